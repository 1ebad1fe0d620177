#include "ssr/metrics.hpp"

#include <cmath>
#include <cstdlib>
#include <stdexcept>

namespace ssr {

namespace {

// n-grams keyed as tokens joined by an unprintable separator
std::unordered_map<std::string, long> ngram_counts(const TokenSeq& tokens, int n) {
  std::unordered_map<std::string, long> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (int k = 1; k < n; ++k) {
      key.push_back('\x1f');
      key += tokens[i + static_cast<std::size_t>(k)];
    }
    ++counts[key];
  }
  return counts;
}

}  // namespace

void NGramStats::add(const TokenSeq& hyp, const RefSet& refs) {
  if (refs.empty()) throw std::invalid_argument("NGramStats: hypothesis without references");
  hyp_len += static_cast<long>(hyp.size());
  long closest = static_cast<long>(refs[0].size());
  for (const auto& r : refs) {
    const long len = static_cast<long>(r.size());
    const long d_new = std::labs(len - static_cast<long>(hyp.size()));
    const long d_old = std::labs(closest - static_cast<long>(hyp.size()));
    if (d_new < d_old || (d_new == d_old && len < closest)) closest = len;
  }
  ref_len += closest;

  for (int n = 1; n <= 4; ++n) {
    const auto hyp_counts = ngram_counts(hyp, n);
    std::unordered_map<std::string, long> max_ref;
    for (const auto& r : refs)
      for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
    for (const auto& [g, c] : hyp_counts) {
      candidates[static_cast<std::size_t>(n - 1)] += c;
      auto it = max_ref.find(g);
      if (it != max_ref.end())
        matches[static_cast<std::size_t>(n - 1)] += std::min(c, it->second);
    }
  }
}

double bleu(const std::vector<TokenSeq>& hyps, const std::vector<RefSet>& refsets, int max_n) {
  if (max_n < 1 || max_n > 4) throw std::invalid_argument("bleu: n must be in 1..4");
  if (hyps.empty() || hyps.size() != refsets.size())
    throw std::invalid_argument("bleu: need aligned non-empty corpora");
  NGramStats stats;
  for (std::size_t i = 0; i < hyps.size(); ++i) stats.add(hyps[i], refsets[i]);

  double log_prec = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const long m = stats.matches[static_cast<std::size_t>(n - 1)];
    const long c = stats.candidates[static_cast<std::size_t>(n - 1)];
    if (m == 0 || c == 0) return 0.0;
    log_prec += std::log(static_cast<double>(m) / static_cast<double>(c));
  }
  const double bp =
      stats.hyp_len >= stats.ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(stats.ref_len) / static_cast<double>(stats.hyp_len));
  return bp * std::exp(log_prec / static_cast<double>(max_n));
}

void CiderScorer::fit(const std::vector<RefSet>& refsets) {
  if (refsets.empty()) throw std::invalid_argument("CiderScorer: empty reference corpus");
  for (auto& m : df_) m.clear();
  corpus_size_ = static_cast<long>(refsets.size());
  for (const auto& refs : refsets) {
    for (int n = 1; n <= 4; ++n) {
      std::unordered_map<std::string, bool> seen;
      for (const auto& r : refs)
        for (const auto& [g, c] : ngram_counts(r, n)) seen[g] = true;
      for (const auto& [g, unused] : seen) ++df_[static_cast<std::size_t>(n - 1)][g];
    }
  }
}

double CiderScorer::score_item(const TokenSeq& hyp, const RefSet& refs) const {
  if (!fitted()) throw std::runtime_error("CiderScorer: score requested before fit");
  if (refs.empty()) throw std::invalid_argument("CiderScorer: item without references");
  double total = 0.0;
  for (int n = 1; n <= 4; ++n) {
    const auto& df = df_[static_cast<std::size_t>(n - 1)];
    auto idf = [&](const std::string& g) {
      auto it = df.find(g);
      const long d = it == df.end() ? 1 : std::max<long>(1, it->second);
      return std::log(static_cast<double>(corpus_size_) / static_cast<double>(d));
    };
    auto weigh = [&](const TokenSeq& s) {
      std::unordered_map<std::string, double> vec;
      double norm_sq = 0.0;
      for (const auto& [g, c] : ngram_counts(s, n)) {
        const double w = static_cast<double>(c) * idf(g);
        vec[g] = w;
        norm_sq += w * w;
      }
      return std::make_pair(vec, std::sqrt(norm_sq));
    };
    const auto [hvec, hnorm] = weigh(hyp);
    double mean_cos = 0.0;
    for (const auto& r : refs) {
      const auto [rvec, rnorm] = weigh(r);
      double dot = 0.0;
      for (const auto& [g, w] : hvec) {
        auto it = rvec.find(g);
        if (it != rvec.end()) dot += w * it->second;
      }
      mean_cos += (hnorm > 0.0 && rnorm > 0.0) ? dot / (hnorm * rnorm) : 0.0;
    }
    total += mean_cos / static_cast<double>(refs.size());
  }
  return 10.0 * total / 4.0;
}

double CiderScorer::corpus_score(const std::vector<TokenSeq>& hyps,
                                 const std::vector<RefSet>& refsets) const {
  if (hyps.empty() || hyps.size() != refsets.size())
    throw std::invalid_argument("CiderScorer: need aligned non-empty corpora");
  double total = 0.0;
  for (std::size_t i = 0; i < hyps.size(); ++i) total += score_item(hyps[i], refsets[i]);
  return total / static_cast<double>(hyps.size());
}

}  // namespace ssr
