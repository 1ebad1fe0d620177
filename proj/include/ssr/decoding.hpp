// Sentence generation: Monte-Carlo sampling, greedy baseline decoding, and
// beam search. All decoders mask PAD and BOS from every step's distribution
// and additionally mask EOS at the first step so a caption always carries at
// least one content token; a sequence that reaches max_len is closed with a
// scored, forced EOS so stored log-probs always match a teacher-forced
// rescoring with the same masks.

#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "ssr/rng.hpp"
#include "ssr/seq_models.hpp"
#include "ssr/vocab.hpp"

namespace ssr {

struct DecodeResult {
  Caption caption;
  std::vector<double> step_log_probs;  // one per content token, plus the EOS term
  double total_log_prob = 0.0;
};

// The masks used by every decoder; rescoring with these reproduces decode
// probabilities exactly.
inline ScoreOptions decode_score_options() {
  ScoreOptions opts;
  opts.banned_ids = {Vocabulary::kPad, Vocabulary::kBos};
  opts.ban_eos_first_step = true;
  return opts;
}

namespace detail {

template <class S>
struct DecoderRun {
  Tape<S> tape;
  CaptionerVars<S> vars;
  Mat<S> mask_rest, mask_first;

  DecoderRun(const Captioner<S>& model, const Mat<S>& feature) {
    vars = bind(tape, model, false);
    mask_rest = ban_mask<S>(model.vocab_size(), {Vocabulary::kPad, Vocabulary::kBos});
    mask_first = ban_mask<S>(model.vocab_size(), {Vocabulary::kPad, Vocabulary::kBos, Vocabulary::kEos});
    feature_var = tape.constant_ref(&feature);
  }

  DecState<S> init() { return captioner_init(vars, feature_var); }

  // log-probability row for the next token; step counts content positions from 0
  std::pair<DecState<S>, Var<S>> advance(const DecState<S>& state, int last_token, int step) {
    StepOptions<S> opts;
    opts.ban = step == 0 ? &mask_first : &mask_rest;
    return captioner_step(vars, state, last_token, opts);
  }

  Var<S> feature_var;
};

inline int argmax_lowest_id(const auto& row) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(row.cols()); ++i)
    if (row(0, i) > row(0, best)) best = i;
  return best;
}

}  // namespace detail

// Monte-Carlo sample from the captioner's step distributions.
template <class S>
DecodeResult sample_sentence(const Captioner<S>& model, const Mat<S>& feature, int max_len, Rng& rng) {
  if (max_len < 1) throw std::invalid_argument("sample_sentence: max_len must be positive");
  detail::DecoderRun<S> run(model, feature);
  DecState<S> state = run.init();
  std::vector<int> content;
  std::vector<double> lps;
  int last = Vocabulary::kBos;
  for (int step = 0;; ++step) {
    auto [next, log_probs] = run.advance(state, last, step);
    state = next;
    const auto& row = log_probs.value();
    std::vector<double> probs(static_cast<std::size_t>(row.cols()));
    for (Eigen::Index i = 0; i < row.cols(); ++i) probs[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(row(0, i)));
    const int tok = static_cast<int>(rng.categorical(probs));
    lps.push_back(static_cast<double>(row(0, tok)));
    if (tok == Vocabulary::kEos) break;
    content.push_back(tok);
    last = tok;
    if (static_cast<int>(content.size()) == max_len) {
      auto [fin_state, fin_lp] = run.advance(state, last, step + 1);
      lps.push_back(static_cast<double>(fin_lp.value()(0, Vocabulary::kEos)));
      break;
    }
  }
  DecodeResult out;
  out.caption = Caption::from_ids(std::move(content));
  out.step_log_probs = std::move(lps);
  for (double v : out.step_log_probs) out.total_log_prob += v;
  return out;
}

// Argmax decode, ties broken toward the lowest token id.
template <class S>
DecodeResult greedy_decode(const Captioner<S>& model, const Mat<S>& feature, int max_len) {
  if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be positive");
  detail::DecoderRun<S> run(model, feature);
  DecState<S> state = run.init();
  std::vector<int> content;
  std::vector<double> lps;
  int last = Vocabulary::kBos;
  for (int step = 0;; ++step) {
    auto [next, log_probs] = run.advance(state, last, step);
    state = next;
    const auto& row = log_probs.value();
    const int tok = detail::argmax_lowest_id(row);
    lps.push_back(static_cast<double>(row(0, tok)));
    if (tok == Vocabulary::kEos) break;
    content.push_back(tok);
    last = tok;
    if (static_cast<int>(content.size()) == max_len) {
      auto [fin_state, fin_lp] = run.advance(state, last, step + 1);
      lps.push_back(static_cast<double>(fin_lp.value()(0, Vocabulary::kEos)));
      break;
    }
  }
  DecodeResult out;
  out.caption = Caption::from_ids(std::move(content));
  out.step_log_probs = std::move(lps);
  for (double v : out.step_log_probs) out.total_log_prob += v;
  return out;
}

// Standard beam search over summed log-probs. Finished hypotheses retire to
// a pool; the best finished hypothesis wins, falling back to the best
// unfinished one (closed with a scored EOS) when nothing finished. Ties break
// by score, then lexicographically over token ids.
template <class S>
DecodeResult beam_search(const Captioner<S>& model, const Mat<S>& feature, int beam, int max_len) {
  if (beam < 1) throw std::invalid_argument("beam_search: beam must be >= 1");
  if (max_len < 1) throw std::invalid_argument("beam_search: max_len must be positive");

  struct Hyp {
    std::vector<int> content;
    std::vector<double> lps;
    double score = 0.0;
    DecState<S> state;
    bool finished = false;
  };
  auto better = [](const Hyp& a, const Hyp& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.content < b.content;
  };

  detail::DecoderRun<S> run(model, feature);
  std::vector<Hyp> live(1);
  live[0].state = run.init();
  std::vector<Hyp> pool;

  for (int step = 0; step < max_len + 1 && !live.empty(); ++step) {
    std::vector<Hyp> candidates;
    for (Hyp& h : live) {
      const int last = h.content.empty() ? Vocabulary::kBos : h.content.back();
      auto [next, log_probs] = run.advance(h.state, last, step);
      const auto& row = log_probs.value();
      for (int tok = 0; tok < static_cast<int>(row.cols()); ++tok) {
        const double lp = static_cast<double>(row(0, tok));
        if (lp < -1e29) continue;  // masked
        Hyp c = h;
        c.state = next;
        c.lps.push_back(lp);
        c.score += lp;
        if (tok == Vocabulary::kEos) {
          c.finished = true;
        } else {
          c.content.push_back(tok);
        }
        candidates.push_back(std::move(c));
      }
    }
    std::sort(candidates.begin(), candidates.end(), better);
    if (candidates.size() > static_cast<std::size_t>(beam)) candidates.resize(static_cast<std::size_t>(beam));
    live.clear();
    for (Hyp& c : candidates) {
      if (c.finished)
        pool.push_back(std::move(c));
      else if (static_cast<int>(c.content.size()) == max_len) {
        // close out at the length cap with a scored, forced EOS
        const int last = c.content.back();
        auto [fin_state, fin_lp] = run.advance(c.state, last, step + 1);
        const double lp = static_cast<double>(fin_lp.value()(0, Vocabulary::kEos));
        c.lps.push_back(lp);
        c.score += lp;
        c.finished = true;
        pool.push_back(std::move(c));
      } else {
        live.push_back(std::move(c));
      }
    }
  }

  const Hyp* best = nullptr;
  for (const Hyp& h : pool)
    if (!best || better(h, *best)) best = &h;
  if (!best) throw std::logic_error("beam_search: empty hypothesis pool");

  DecodeResult out;
  out.caption = Caption::from_ids(best->content);
  out.step_log_probs = best->lps;
  out.total_log_prob = best->score;
  return out;
}

}  // namespace ssr
