// Self-supervised reward signals: language-model fluency, sentence-level and
// concept-level visual relevancy. Scorers are frozen models; every value is
// computed as a detached constant (value-only scratch tapes, no gradient
// operations recorded anywhere).

#pragma once

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssr/seq_models.hpp"
#include "ssr/vocab.hpp"
#include "ssr/vse.hpp"

namespace ssr {

struct RewardBundle {
  double r_flc = 0.0;
  double r_srlv = 0.0;
  std::vector<double> r_crlv;  // per scored token (content then EOS); empty for baselines
};

// Frozen reward providers plus the constants they need.
template <class S>
struct RewardScorers {
  const LanguageModel<S>* lm = nullptr;
  const SentenceMatchModel<S>* sentence_match = nullptr;
  const ConceptMatchModel<S>* concept_match = nullptr;
  const ConceptVocabulary* concepts = nullptr;  // rows of concept_match align with this
  const Vocabulary* vocab = nullptr;
  double lambda = 0.5;
};

// (1/n) sum_j log P(w_j | w_0:j-1) under the frozen language model, with n
// the scored-token count (content plus EOS).
template <class S>
double fluency_reward(const LanguageModel<S>& lm, const Caption& sentence) {
  const auto terms = lm_log_probs_value(lm, sentence);
  double total = 0.0;
  for (double t : terms) total += t;
  return total / static_cast<double>(terms.size());
}

template <class S>
double sentence_relevancy_reward(const ImageEncoder<S>& image_enc, const SentenceEncoder<S>& sentence_enc,
                                 const Mat<S>& feature, const Caption& sentence) {
  Tape<S> tape;
  auto iv = bind(tape, image_enc, false);
  auto sv = bind(tape, sentence_enc, false);
  Var<S> vi = embed_image(iv, tape.constant_ref(&feature));
  Var<S> vc = embed_sentence(sv, sentence);
  return static_cast<double>(cosine_sim(vi, vc).item());
}

// delta(w) . (cos(E_i'(v), E_w(w)) - lambda p(w)); zero for any token outside
// the concept vocabulary.
template <class S>
double concept_relevancy_reward(const ImageEncoder<S>& image_enc, const ConceptEmbedding<S>& concept_emb,
                                const ConceptVocabulary& concepts, double lambda, const Mat<S>& feature,
                                const std::string& token) {
  const int id = concepts.id_of(token);
  if (id < 0) return 0.0;
  Tape<S> tape;
  auto iv = bind(tape, image_enc, false);
  auto cv = bind(tape, concept_emb, false);
  const double cos = static_cast<double>(
      cosine_sim(embed_image(iv, tape.constant_ref(&feature)), embed_concept(cv, id)).item());
  const double r = cos - lambda * concepts.prior_of(id);
  const double lo = -1.0 - lambda * concepts.max_prior() - 1e-6;
  if (r < lo || r > 1.0 + 1e-6)
    throw std::runtime_error("concept_relevancy_reward: value " + std::to_string(r) + " outside range");
  return r;
}

// All rewards for the sampled sentence; fluency and sentence relevancy for
// the greedy baseline (the concept reward carries no baseline).
template <class S>
std::pair<RewardBundle, RewardBundle> bundle_rewards(const RewardScorers<S>& scorers, const Mat<S>& feature,
                                                     const Caption& sampled, const Caption& baseline) {
  if (!scorers.lm || !scorers.sentence_match || !scorers.concept_match || !scorers.concepts ||
      !scorers.vocab)
    throw std::invalid_argument("bundle_rewards: missing frozen scorer");
  RewardBundle s, b;
  s.r_flc = fluency_reward(*scorers.lm, sampled);
  b.r_flc = fluency_reward(*scorers.lm, baseline);
  s.r_srlv = sentence_relevancy_reward(scorers.sentence_match->image, scorers.sentence_match->sentence,
                                       feature, sampled);
  b.r_srlv = sentence_relevancy_reward(scorers.sentence_match->image, scorers.sentence_match->sentence,
                                       feature, baseline);
  s.r_crlv.reserve(sampled.ids.size() - 1);
  for (std::size_t j = 1; j < sampled.ids.size(); ++j)  // content tokens then EOS
    s.r_crlv.push_back(concept_relevancy_reward(scorers.concept_match->image,
                                                scorers.concept_match->concepts, *scorers.concepts,
                                                scorers.lambda, feature,
                                                scorers.vocab->token(sampled.ids[j])));
  return {s, b};
}

// Line-delimited debugging trace: image id, sentence, r_flc, r_srlv and the
// per-token concept rewards.
class RewardTraceWriter {
 public:
  explicit RewardTraceWriter(const std::string& path) : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("RewardTraceWriter: cannot open " + path);
  }

  void write(int image_id, const std::vector<std::string>& tokens, const RewardBundle& bundle) {
    out_ << image_id << '\t';
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) out_ << ' ';
      out_ << tokens[i];
    }
    out_ << '\t' << bundle.r_flc << '\t' << bundle.r_srlv << '\t';
    for (std::size_t i = 0; i < bundle.r_crlv.size(); ++i) {
      if (i) out_ << ' ';
      out_ << bundle.r_crlv[i];
    }
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

}  // namespace ssr
