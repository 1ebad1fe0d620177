// Corpus-level caption metrics: BLEU@1-4 (clipped modified precision with
// brevity penalty, no smoothing) and plain CIDEr (tf-idf n-gram cosine,
// averaged over references and orders 1..4, scaled by 10).

#pragma once

#include <array>
#include <string>
#include <unordered_map>
#include <vector>

namespace ssr {

using TokenSeq = std::vector<std::string>;
using RefSet = std::vector<TokenSeq>;

// Clipped n-gram match and candidate counts for n = 1..4, plus hypothesis
// and effective (closest) reference length totals.
struct NGramStats {
  std::array<long, 4> matches{};
  std::array<long, 4> candidates{};
  long hyp_len = 0;
  long ref_len = 0;

  void add(const TokenSeq& hyp, const RefSet& refs);
};

// Corpus BLEU@n: geometric mean of clipped precisions for orders 1..n times
// exp(min(0, 1 - r/c)). Zero overlap at any order gives 0.
double bleu(const std::vector<TokenSeq>& hyps, const std::vector<RefSet>& refsets, int max_n);

class CiderScorer {
 public:
  // Document frequencies over the reference corpus; one document per item.
  void fit(const std::vector<RefSet>& refsets);
  bool fitted() const { return corpus_size_ > 0; }
  long corpus_size() const { return corpus_size_; }

  // Mean over n of the mean-over-references tf-idf cosine, times 10.
  double score_item(const TokenSeq& hyp, const RefSet& refs) const;
  // Mean of item scores over an aligned corpus.
  double corpus_score(const std::vector<TokenSeq>& hyps, const std::vector<RefSet>& refsets) const;

 private:
  std::array<std::unordered_map<std::string, long>, 4> df_;
  long corpus_size_ = 0;
};

}  // namespace ssr
