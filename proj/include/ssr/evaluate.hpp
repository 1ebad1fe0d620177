// Corpus evaluation: beam-search decodes scored with BLEU@1-4 and CIDEr
// against clean references, plus reward-mean diagnostics and a breakdown
// over the pseudo-caption noise flags.

#pragma once

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssr/decoding.hpp"
#include "ssr/metrics.hpp"
#include "ssr/microworld.hpp"
#include "ssr/rewards.hpp"
#include "ssr/seq_models.hpp"
#include "ssr/vocab.hpp"

namespace ssr {

struct EvalItem {
  int image_id = 0;
  std::vector<std::string> hyp_tokens;
  double cider = 0.0;
  double r_flc = 0.0;
  double r_srlv = 0.0;
  bool disfluent = false;
  bool irrelevant = false;
};

struct FlagGroupStats {
  std::string name;
  long count = 0;
  double mean_cider = 0.0;
};

struct EvalReport {
  double bleu_n[4] = {0, 0, 0, 0};
  double cider = 0.0;
  double mean_r_flc = 0.0;
  double mean_r_srlv = 0.0;
  std::vector<FlagGroupStats> flag_breakdown;
  std::vector<EvalItem> items;
};

template <class S>
EvalReport evaluate_corpus(const Captioner<S>& captioner, const RewardScorers<S>& scorers,
                           const std::vector<PseudoPair>& split, const Vocabulary& vocab, int beam,
                           int max_len) {
  if (split.empty()) throw std::invalid_argument("evaluate_corpus: empty split");
  std::vector<TokenSeq> hyps;
  std::vector<RefSet> refs;
  EvalReport report;
  for (const auto& pair : split) {
    if (pair.clean_tokens.empty())
      throw std::runtime_error("evaluate_corpus: pair " + std::to_string(pair.image.id) +
                               " carries no clean reference");
    Mat<S> feature = pair.image.feature.template cast<S>();
    DecodeResult decoded = beam_search(captioner, feature, beam, max_len);
    EvalItem item;
    item.image_id = pair.image.id;
    item.hyp_tokens = decoded.caption.to_tokens(vocab);
    item.r_flc = fluency_reward(*scorers.lm, decoded.caption);
    item.r_srlv = sentence_relevancy_reward(scorers.sentence_match->image,
                                            scorers.sentence_match->sentence, feature, decoded.caption);
    item.disfluent = pair.disfluent;
    item.irrelevant = pair.irrelevant;
    hyps.push_back(item.hyp_tokens);
    refs.push_back({pair.clean_tokens});
    report.items.push_back(std::move(item));
  }

  for (int n = 1; n <= 4; ++n) report.bleu_n[n - 1] = bleu(hyps, refs, n);
  CiderScorer scorer;
  scorer.fit(refs);
  double cider_total = 0.0, flc_total = 0.0, srlv_total = 0.0;
  for (std::size_t i = 0; i < report.items.size(); ++i) {
    report.items[i].cider = scorer.score_item(hyps[i], refs[i]);
    cider_total += report.items[i].cider;
    flc_total += report.items[i].r_flc;
    srlv_total += report.items[i].r_srlv;
  }
  const double n_items = static_cast<double>(report.items.size());
  report.cider = cider_total / n_items;
  report.mean_r_flc = flc_total / n_items;
  report.mean_r_srlv = srlv_total / n_items;

  const char* group_names[4] = {"clean", "disfluent", "irrelevant", "disfluent+irrelevant"};
  double group_sum[4] = {0, 0, 0, 0};
  long group_count[4] = {0, 0, 0, 0};
  for (const auto& item : report.items) {
    const int g = (item.disfluent ? 1 : 0) + (item.irrelevant ? 2 : 0);
    group_sum[g] += item.cider;
    ++group_count[g];
  }
  for (int g = 0; g < 4; ++g)
    report.flag_breakdown.push_back(
        {group_names[g], group_count[g], group_count[g] ? group_sum[g] / group_count[g] : 0.0});
  return report;
}

// key: value lines, stable ordering
inline void write_report(const std::string& path, const EvalReport& r) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_report: cannot open " + path);
  char buf[64];
  auto emit = [&](const std::string& key, double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << key << ": " << buf << '\n';
  };
  emit("bleu1", r.bleu_n[0]);
  emit("bleu2", r.bleu_n[1]);
  emit("bleu3", r.bleu_n[2]);
  emit("bleu4", r.bleu_n[3]);
  emit("cider", r.cider);
  emit("mean_r_flc", r.mean_r_flc);
  emit("mean_r_srlv", r.mean_r_srlv);
  out << "items: " << r.items.size() << '\n';
  for (const auto& g : r.flag_breakdown) {
    out << "group_" << g.name << "_count: " << g.count << '\n';
    emit("group_" + g.name + "_cider", g.mean_cider);
  }
}

// machine-readable per-item scores
inline void write_item_scores(const std::string& path, const EvalReport& r) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_item_scores: cannot open " + path);
  char buf[64];
  for (const auto& item : r.items) {
    out << item.image_id << '\t';
    for (std::size_t i = 0; i < item.hyp_tokens.size(); ++i) {
      if (i) out << ' ';
      out << item.hyp_tokens[i];
    }
    std::snprintf(buf, sizeof(buf), "%.17g\t%.17g\t%.17g", item.cider, item.r_flc, item.r_srlv);
    out << '\t' << buf << '\t' << (item.disfluent ? 1 : 0) << ' ' << (item.irrelevant ? 1 : 0) << '\n';
  }
}

inline EvalReport read_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_report: cannot open " + path);
  EvalReport r;
  std::string key;
  double value;
  while (in >> key) {
    if (key == "items:" || key.rfind("group_", 0) == 0) {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    in >> value;
    if (key == "bleu1:") r.bleu_n[0] = value;
    else if (key == "bleu2:") r.bleu_n[1] = value;
    else if (key == "bleu3:") r.bleu_n[2] = value;
    else if (key == "bleu4:") r.bleu_n[3] = value;
    else if (key == "cider:") r.cider = value;
    else if (key == "mean_r_flc:") r.mean_r_flc = value;
    else if (key == "mean_r_srlv:") r.mean_r_srlv = value;
  }
  return r;
}

}  // namespace ssr
