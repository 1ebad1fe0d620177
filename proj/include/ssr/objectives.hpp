// Training losses: cross-entropy pretraining for the captioner and the
// language model, the self-critical fluency and multi-level relevancy
// losses, the CIDEr-reward control, and the weighted joint objective.
// Rewards enter all self-critical losses as detached constants.

#pragma once

#include <stdexcept>
#include <vector>

#include "ssr/metrics.hpp"
#include "ssr/rewards.hpp"
#include "ssr/seq_models.hpp"
#include "ssr/vocab.hpp"

namespace ssr {

struct LossWeights {
  double alpha = 0.05;
  double beta = 0.15;
  double gamma = 1.0;

  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0 || (alpha == 0 && beta == 0 && gamma == 0))
      throw std::invalid_argument("LossWeights: weights must be non-negative with one positive");
  }
};

template <class S>
struct XentItem {
  const Mat<S>* feature;
  const Caption* caption;
};

// Batch mean of the per-sentence sum of negative teacher-forced log-probs
// (content tokens plus EOS).
template <class S>
Var<S> caption_xent_loss(const CaptionerVars<S>& m, const std::vector<XentItem<S>>& batch,
                         const ScoreOptions& opts = {}) {
  if (batch.empty()) throw std::invalid_argument("caption_xent_loss: empty batch");
  Tape<S>& t = *m.out_w.tape();
  Var<S> total = t.scalar(S(0));
  for (const auto& item : batch) {
    auto terms = caption_log_probs(m, t.constant_ref(item.feature), *item.caption, opts);
    for (auto& term : terms) total = add(total, term);
  }
  return scale(total, S(-1) / static_cast<S>(batch.size()));
}

template <class S>
Var<S> lm_xent_loss(const LanguageModelVars<S>& m, const std::vector<const Caption*>& batch,
                    const ScoreOptions& opts = {}) {
  if (batch.empty()) throw std::invalid_argument("lm_xent_loss: empty batch");
  Tape<S>& t = *m.out_w.tape();
  Var<S> total = t.scalar(S(0));
  for (const Caption* cap : batch) {
    auto terms = lm_log_probs(m, *cap, opts);
    for (auto& term : terms) total = add(total, term);
  }
  return scale(total, S(-1) / static_cast<S>(batch.size()));
}

template <class S>
struct SelfCriticalItem {
  const Mat<S>* feature;
  const Caption* sampled;
  const RewardBundle* sampled_rewards;
  const RewardBundle* baseline_rewards;
};

struct SelfCriticalOptions {
  ScoreOptions score;          // masks matching the decode-time distribution
  bool length_normalize = false;  // optional ablation: divide the log-prob sum by its length
};

// - mean_i (r_flc(s_s) - r_flc(s_b)) . sum_j log P(w_j | w_0:j-1, v)
template <class S>
Var<S> flc_selfcritical_loss(const CaptionerVars<S>& m, const std::vector<SelfCriticalItem<S>>& batch,
                             const SelfCriticalOptions& opts = {}) {
  if (batch.empty()) throw std::invalid_argument("flc_selfcritical_loss: empty batch");
  Tape<S>& t = *m.out_w.tape();
  Var<S> total = t.scalar(S(0));
  for (const auto& item : batch) {
    const double advantage = item.sampled_rewards->r_flc - item.baseline_rewards->r_flc;
    auto terms = caption_log_probs(m, t.constant_ref(item.feature), *item.sampled, opts.score);
    Var<S> log_prob_sum = t.scalar(S(0));
    for (auto& term : terms) log_prob_sum = add(log_prob_sum, term);
    S coeff = static_cast<S>(-advantage);
    if (opts.length_normalize) coeff /= static_cast<S>(terms.size());
    total = add(total, scale(log_prob_sum, coeff));
  }
  return scale(total, S(1) / static_cast<S>(batch.size()));
}

// - mean_i sum_j (r_srlv(s_s) - r_srlv(s_b) + r_crlv(w_j)) . log P(w_j | ...)
template <class S>
Var<S> rlv_selfcritical_loss(const CaptionerVars<S>& m, const std::vector<SelfCriticalItem<S>>& batch,
                             const SelfCriticalOptions& opts = {}) {
  if (batch.empty()) throw std::invalid_argument("rlv_selfcritical_loss: empty batch");
  Tape<S>& t = *m.out_w.tape();
  Var<S> total = t.scalar(S(0));
  for (const auto& item : batch) {
    const double srlv_advantage = item.sampled_rewards->r_srlv - item.baseline_rewards->r_srlv;
    const auto& crlv = item.sampled_rewards->r_crlv;
    auto terms = caption_log_probs(m, t.constant_ref(item.feature), *item.sampled, opts.score);
    if (terms.size() != crlv.size())
      throw std::invalid_argument("rlv_selfcritical_loss: per-token rewards misaligned with sampled tokens");
    for (std::size_t j = 0; j < terms.size(); ++j)
      total = add(total, scale(terms[j], static_cast<S>(-(srlv_advantage + crlv[j]))));
  }
  return scale(total, S(1) / static_cast<S>(batch.size()));
}

// alpha L_cap + beta L_flc + gamma L_rlv
template <class S>
Var<S> joint_loss(const LossWeights& w, Var<S> l_cap, Var<S> l_flc, Var<S> l_rlv) {
  w.validate();
  return add(add(scale(l_cap, static_cast<S>(w.alpha)), scale(l_flc, static_cast<S>(w.beta))),
             scale(l_rlv, static_cast<S>(w.gamma)));
}

template <class S>
struct CiderCriticalItem {
  const Mat<S>* feature;
  const Caption* sampled;
  const Caption* baseline;
  const RefSet* pseudo_refs;  // tokenized pseudo captions of this image
};

// Self-critical loss with advantage CIDEr(s_s) - CIDEr(s_b) against the
// pseudo references (the CIDEr-reward control model).
template <class S>
Var<S> cider_selfcritical_loss(const CaptionerVars<S>& m, const std::vector<CiderCriticalItem<S>>& batch,
                               const CiderScorer& scorer, const Vocabulary& vocab,
                               const SelfCriticalOptions& opts = {}) {
  if (batch.empty()) throw std::invalid_argument("cider_selfcritical_loss: empty batch");
  if (!scorer.fitted()) throw std::runtime_error("cider_selfcritical_loss: scorer not fitted");
  Tape<S>& t = *m.out_w.tape();
  Var<S> total = t.scalar(S(0));
  for (const auto& item : batch) {
    const double advantage = scorer.score_item(item.sampled->to_tokens(vocab), *item.pseudo_refs) -
                             scorer.score_item(item.baseline->to_tokens(vocab), *item.pseudo_refs);
    auto terms = caption_log_probs(m, t.constant_ref(item.feature), *item.sampled, opts.score);
    Var<S> log_prob_sum = t.scalar(S(0));
    for (auto& term : terms) log_prob_sum = add(log_prob_sum, term);
    S coeff = static_cast<S>(-advantage);
    if (opts.length_normalize) coeff /= static_cast<S>(terms.size());
    total = add(total, scale(log_prob_sum, coeff));
  }
  return scale(total, S(1) / static_cast<S>(batch.size()));
}

}  // namespace ssr
