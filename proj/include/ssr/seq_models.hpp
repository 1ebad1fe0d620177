// Recurrent building blocks and the two generative models: the image
// captioner and the target-language model. All forward passes are expressed
// through the tape so one code path serves training, scoring and decoding.

#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ssr/adam.hpp"
#include "ssr/autodiff.hpp"
#include "ssr/rng.hpp"
#include "ssr/vocab.hpp"

namespace ssr {

inline constexpr double kWeightInitRange = 0.08;  // uniform [-r, r], biases zero

template <class S>
Mat<S> uniform_init(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Mat<S> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m(i) = static_cast<S>(rng.uniform(-kWeightInitRange, kWeightInitRange));
  return m;
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

// Gate blocks packed in column order [input | forget | candidate | output].
template <class S>
struct LstmParams {
  Mat<S> wx;  // input_dim x 4H
  Mat<S> wh;  // H x 4H
  Mat<S> b;   // 1 x 4H

  int hidden_size() const { return static_cast<int>(wh.rows()); }
  int input_size() const { return static_cast<int>(wx.rows()); }

  static LstmParams init(int input_dim, int hidden_dim, Rng& rng) {
    return {uniform_init<S>(rng, input_dim, 4 * hidden_dim),
            uniform_init<S>(rng, hidden_dim, 4 * hidden_dim), Mat<S>::Zero(1, 4 * hidden_dim)};
  }
};

template <class S>
struct LstmVars {
  Var<S> wx, wh, b;
};

template <class S>
LstmVars<S> bind(Tape<S>& tape, const LstmParams<S>& p, bool trainable) {
  if (trainable) return {tape.leaf(p.wx, true), tape.leaf(p.wh, true), tape.leaf(p.b, true)};
  return {tape.constant_ref(&p.wx), tape.constant_ref(&p.wh), tape.constant_ref(&p.b)};
}

// Standard LSTM cell: sigmoid input/forget/output gates, tanh candidate.
template <class S>
std::pair<Var<S>, Var<S>> lstm_step(const LstmVars<S>& p, Var<S> x, Var<S> h_prev, Var<S> c_prev) {
  const Eigen::Index H = p.wh.rows();
  Var<S> z = add_rowvec(add(matmul(x, p.wx), matmul(h_prev, p.wh)), p.b);
  Var<S> i = sigmoid(slice_cols(z, 0, H));
  Var<S> f = sigmoid(slice_cols(z, H, H));
  Var<S> g = tanh(slice_cols(z, 2 * H, H));
  Var<S> o = sigmoid(slice_cols(z, 3 * H, H));
  Var<S> c = add(mul(f, c_prev), mul(i, g));
  Var<S> h = mul(o, tanh(c));
  return {h, c};
}

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------

// Gate blocks packed [update | reset]; candidate kept separate because it
// consumes the reset-masked state.
template <class S>
struct GruParams {
  Mat<S> gate_wx;  // input_dim x 2H
  Mat<S> gate_wh;  // H x 2H
  Mat<S> gate_b;   // 1 x 2H
  Mat<S> cand_wx;  // input_dim x H
  Mat<S> cand_wh;  // H x H
  Mat<S> cand_b;   // 1 x H

  int hidden_size() const { return static_cast<int>(cand_wh.rows()); }

  static GruParams init(int input_dim, int hidden_dim, Rng& rng) {
    return {uniform_init<S>(rng, input_dim, 2 * hidden_dim),
            uniform_init<S>(rng, hidden_dim, 2 * hidden_dim),
            Mat<S>::Zero(1, 2 * hidden_dim),
            uniform_init<S>(rng, input_dim, hidden_dim),
            uniform_init<S>(rng, hidden_dim, hidden_dim),
            Mat<S>::Zero(1, hidden_dim)};
  }
};

template <class S>
struct GruVars {
  Var<S> gate_wx, gate_wh, gate_b, cand_wx, cand_wh, cand_b;
};

template <class S>
GruVars<S> bind(Tape<S>& tape, const GruParams<S>& p, bool trainable) {
  if (trainable)
    return {tape.leaf(p.gate_wx, true), tape.leaf(p.gate_wh, true), tape.leaf(p.gate_b, true),
            tape.leaf(p.cand_wx, true), tape.leaf(p.cand_wh, true), tape.leaf(p.cand_b, true)};
  return {tape.constant_ref(&p.gate_wx), tape.constant_ref(&p.gate_wh), tape.constant_ref(&p.gate_b),
          tape.constant_ref(&p.cand_wx), tape.constant_ref(&p.cand_wh), tape.constant_ref(&p.cand_b)};
}

// h' = (1 - z) . h + z . tanh(Wx x + Wh (r . h) + b)
template <class S>
Var<S> gru_step(const GruVars<S>& p, Var<S> x, Var<S> h_prev) {
  Tape<S>& t = *x.tape();
  const Eigen::Index H = p.cand_wh.rows();
  Var<S> gates = sigmoid(add_rowvec(add(matmul(x, p.gate_wx), matmul(h_prev, p.gate_wh)), p.gate_b));
  Var<S> z = slice_cols(gates, 0, H);
  Var<S> r = slice_cols(gates, H, H);
  Var<S> cand = tanh(add_rowvec(add(matmul(x, p.cand_wx), matmul(mul(r, h_prev), p.cand_wh)), p.cand_b));
  Var<S> ones = t.constant(Mat<S>::Ones(1, H));
  return add(mul(sub(ones, z), h_prev), mul(z, cand));
}

// ---------------------------------------------------------------------------
// dropout (inverted scaling; identity when rate == 0 or rng missing)
// ---------------------------------------------------------------------------

struct DropoutCfg {
  double rate = 0.0;
  Rng* rng = nullptr;

  bool active() const { return rate > 0.0 && rng != nullptr; }
};

template <class S>
Var<S> dropout(Var<S> x, const DropoutCfg& cfg) {
  if (!cfg.active()) return x;
  Tape<S>& t = *x.tape();
  Mat<S> mask(x.rows(), x.cols());
  const S keep_scale = static_cast<S>(1.0 / (1.0 - cfg.rate));
  for (Eigen::Index i = 0; i < mask.size(); ++i)
    mask(i) = cfg.rng->uniform01() < cfg.rate ? S(0) : keep_scale;
  return mul(x, t.constant(std::move(mask)));
}

// ---------------------------------------------------------------------------
// captioner (theta_cap)
// ---------------------------------------------------------------------------

template <class S>
struct Captioner {
  Mat<S> img_w;  // feature_dim x H
  Mat<S> img_b;  // 1 x H
  Mat<S> embed;  // vocab x E
  LstmParams<S> lstm;
  Mat<S> out_w;  // H x vocab
  Mat<S> out_b;  // 1 x vocab

  int feature_dim() const { return static_cast<int>(img_w.rows()); }
  int hidden_dim() const { return lstm.hidden_size(); }
  int embed_dim() const { return static_cast<int>(embed.cols()); }
  int vocab_size() const { return static_cast<int>(embed.rows()); }

  static Captioner init(int feature_dim, int embed_dim, int hidden_dim, int vocab, Rng& rng) {
    Captioner m;
    m.img_w = uniform_init<S>(rng, feature_dim, hidden_dim);
    m.img_b = Mat<S>::Zero(1, hidden_dim);
    m.embed = uniform_init<S>(rng, vocab, embed_dim);
    m.lstm = LstmParams<S>::init(embed_dim, hidden_dim, rng);
    m.out_w = uniform_init<S>(rng, hidden_dim, vocab);
    m.out_b = Mat<S>::Zero(1, vocab);
    return m;
  }

  std::vector<NamedParam<S>> params() {
    return {{"img_w", &img_w},     {"img_b", &img_b},     {"embed", &embed},
            {"lstm_wx", &lstm.wx}, {"lstm_wh", &lstm.wh}, {"lstm_b", &lstm.b},
            {"out_w", &out_w},     {"out_b", &out_b}};
  }
};

template <class S>
struct CaptionerVars {
  Var<S> img_w, img_b, embed;
  LstmVars<S> lstm;
  Var<S> out_w, out_b;

  std::vector<Var<S>> ordered() const {
    return {img_w, img_b, embed, lstm.wx, lstm.wh, lstm.b, out_w, out_b};
  }
};

template <class S>
CaptionerVars<S> bind(Tape<S>& tape, const Captioner<S>& m, bool trainable) {
  CaptionerVars<S> v;
  if (trainable) {
    v.img_w = tape.leaf(m.img_w, true);
    v.img_b = tape.leaf(m.img_b, true);
    v.embed = tape.leaf(m.embed, true);
    v.out_w = tape.leaf(m.out_w, true);
    v.out_b = tape.leaf(m.out_b, true);
  } else {
    v.img_w = tape.constant_ref(&m.img_w);
    v.img_b = tape.constant_ref(&m.img_b);
    v.embed = tape.constant_ref(&m.embed);
    v.out_w = tape.constant_ref(&m.out_w);
    v.out_b = tape.constant_ref(&m.out_b);
  }
  v.lstm = bind(tape, m.lstm, trainable);
  return v;
}

template <class S>
struct DecState {
  Var<S> h, c;
};

// h0 is the projected image feature, c0 zeros; the image conditions the
// decoder only through this initial state.
template <class S>
DecState<S> captioner_init(const CaptionerVars<S>& m, Var<S> v) {
  Tape<S>& t = *v.tape();
  if (v.rows() != 1 || v.cols() != m.img_w.rows())
    throw std::invalid_argument("captioner_init: feature must be 1 x " + std::to_string(m.img_w.rows()));
  Var<S> h0 = add_rowvec(matmul(v, m.img_w), m.img_b);
  Var<S> c0 = t.constant(Mat<S>::Zero(1, m.img_w.value().cols()));
  return {h0, c0};
}

// Assembled per step by the scorer/decoder; ban list entries get a large
// negative logit offset before normalization.
template <class S>
Mat<S> ban_mask(int vocab, const std::vector<int>& banned) {
  Mat<S> mask = Mat<S>::Zero(1, vocab);
  for (int id : banned) {
    if (id < 0 || id >= vocab) throw std::out_of_range("ban_mask: id outside vocabulary");
    mask(0, id) = S(-1e30);
  }
  return mask;
}

template <class S>
struct StepOptions {
  const Mat<S>* ban = nullptr;  // optional 1 x vocab additive logit mask
  DropoutCfg dropout;
};

// Embeds the token, advances the LSTM and emits log-probabilities over the
// vocabulary.
template <class S>
std::pair<DecState<S>, Var<S>> captioner_step(const CaptionerVars<S>& m, const DecState<S>& state,
                                              int token_id, const StepOptions<S>& opts = {}) {
  Tape<S>& t = *state.h.tape();
  if (token_id < 0 || token_id >= m.embed.rows())
    throw std::out_of_range("captioner_step: token id " + std::to_string(token_id));
  Var<S> x = dropout(gather_rows(m.embed, {token_id}), opts.dropout);
  auto [h, c] = lstm_step(m.lstm, x, state.h, state.c);
  Var<S> pre = dropout(h, opts.dropout);
  Var<S> logits = add_rowvec(matmul(pre, m.out_w), m.out_b);
  if (opts.ban) logits = add(logits, t.constant(*opts.ban));
  return {DecState<S>{h, c}, log_softmax(logits)};
}

// ---------------------------------------------------------------------------
// language model (theta_lm)
// ---------------------------------------------------------------------------

template <class S>
struct LanguageModel {
  Mat<S> embed;  // vocab x E
  LstmParams<S> lstm;
  Mat<S> out_w;  // H x vocab
  Mat<S> out_b;  // 1 x vocab

  int hidden_dim() const { return lstm.hidden_size(); }
  int vocab_size() const { return static_cast<int>(embed.rows()); }

  static LanguageModel init(int embed_dim, int hidden_dim, int vocab, Rng& rng) {
    LanguageModel m;
    m.embed = uniform_init<S>(rng, vocab, embed_dim);
    m.lstm = LstmParams<S>::init(embed_dim, hidden_dim, rng);
    m.out_w = uniform_init<S>(rng, hidden_dim, vocab);
    m.out_b = Mat<S>::Zero(1, vocab);
    return m;
  }

  std::vector<NamedParam<S>> params() {
    return {{"embed", &embed},     {"lstm_wx", &lstm.wx}, {"lstm_wh", &lstm.wh},
            {"lstm_b", &lstm.b},   {"out_w", &out_w},     {"out_b", &out_b}};
  }
};

template <class S>
struct LanguageModelVars {
  Var<S> embed;
  LstmVars<S> lstm;
  Var<S> out_w, out_b;

  std::vector<Var<S>> ordered() const { return {embed, lstm.wx, lstm.wh, lstm.b, out_w, out_b}; }
};

template <class S>
LanguageModelVars<S> bind(Tape<S>& tape, const LanguageModel<S>& m, bool trainable) {
  LanguageModelVars<S> v;
  if (trainable) {
    v.embed = tape.leaf(m.embed, true);
    v.out_w = tape.leaf(m.out_w, true);
    v.out_b = tape.leaf(m.out_b, true);
  } else {
    v.embed = tape.constant_ref(&m.embed);
    v.out_w = tape.constant_ref(&m.out_w);
    v.out_b = tape.constant_ref(&m.out_b);
  }
  v.lstm = bind(tape, m.lstm, trainable);
  return v;
}

template <class S>
DecState<S> lm_init(Tape<S>& tape, const LanguageModelVars<S>& m) {
  const Eigen::Index H = m.lstm.wh.rows();
  return {tape.constant(Mat<S>::Zero(1, H)), tape.constant(Mat<S>::Zero(1, H))};
}

template <class S>
std::pair<DecState<S>, Var<S>> lm_step(const LanguageModelVars<S>& m, const DecState<S>& state,
                                       int token_id, const StepOptions<S>& opts = {}) {
  Tape<S>& t = *state.h.tape();
  if (token_id < 0 || token_id >= m.embed.rows())
    throw std::out_of_range("lm_step: token id " + std::to_string(token_id));
  Var<S> x = dropout(gather_rows(m.embed, {token_id}), opts.dropout);
  auto [h, c] = lstm_step(m.lstm, x, state.h, state.c);
  Var<S> pre = dropout(h, opts.dropout);
  Var<S> logits = add_rowvec(matmul(pre, m.out_w), m.out_b);
  if (opts.ban) logits = add(logits, t.constant(*opts.ban));
  return {DecState<S>{h, c}, log_softmax(logits)};
}

// ---------------------------------------------------------------------------
// teacher-forced sequence scoring
// ---------------------------------------------------------------------------

struct ScoreOptions {
  bool include_eos = true;          // score the EOS prediction as the final term
  std::vector<int> banned_ids;      // ids removed from every step's distribution
  bool ban_eos_first_step = false;  // reproduces the decoders' first-step mask
  DropoutCfg dropout;
};

namespace detail {

template <class S>
struct ScoreMasks {
  Mat<S> every_step, first_step;
  bool any = false, first_differs = false;

  ScoreMasks(int vocab, const ScoreOptions& opts) {
    if (!opts.banned_ids.empty() || opts.ban_eos_first_step) {
      any = true;
      every_step = ban_mask<S>(vocab, opts.banned_ids);
      if (opts.ban_eos_first_step) {
        first_differs = true;
        std::vector<int> first = opts.banned_ids;
        first.push_back(Vocabulary::kEos);
        first_step = ban_mask<S>(vocab, first);
      }
    }
  }

  const Mat<S>* at(std::size_t j) const {
    if (!any) return nullptr;
    return (j == 0 && first_differs) ? &first_step : &every_step;
  }
};

}  // namespace detail

// log P(w_j | w_0:j-1, v) for j = 1..n plus the EOS position (n+1 terms).
template <class S>
std::vector<Var<S>> caption_log_probs(const CaptionerVars<S>& m, Var<S> v, const Caption& cap,
                                      const ScoreOptions& opts = {}) {
  if (cap.ids.size() < 2) throw std::invalid_argument("caption_log_probs: empty caption");
  const detail::ScoreMasks<S> masks(static_cast<int>(m.embed.rows()), opts);
  StepOptions<S> step_opts;
  step_opts.dropout = opts.dropout;
  std::vector<Var<S>> out;
  DecState<S> state = captioner_init(m, v);
  const std::size_t last = opts.include_eos ? cap.ids.size() - 1 : cap.ids.size() - 2;
  for (std::size_t j = 0; j < last; ++j) {
    step_opts.ban = masks.at(j);
    auto [next, log_probs] = captioner_step(m, state, cap.ids[j], step_opts);
    out.push_back(pick(log_probs, 0, cap.ids[j + 1]));
    state = next;
  }
  return out;
}

template <class S>
std::vector<Var<S>> lm_log_probs(const LanguageModelVars<S>& m, const Caption& cap,
                                 const ScoreOptions& opts = {}) {
  if (cap.ids.size() < 2) throw std::invalid_argument("lm_log_probs: empty caption");
  Tape<S>& t = *m.out_w.tape();
  const detail::ScoreMasks<S> masks(static_cast<int>(m.embed.rows()), opts);
  StepOptions<S> step_opts;
  step_opts.dropout = opts.dropout;
  std::vector<Var<S>> out;
  DecState<S> state = lm_init(t, m);
  const std::size_t last = opts.include_eos ? cap.ids.size() - 1 : cap.ids.size() - 2;
  for (std::size_t j = 0; j < last; ++j) {
    step_opts.ban = masks.at(j);
    auto [next, log_probs] = lm_step(m, state, cap.ids[j], step_opts);
    out.push_back(pick(log_probs, 0, cap.ids[j + 1]));
    state = next;
  }
  return out;
}

// Value-only scoring on a scratch tape (no gradient machinery recorded).
template <class S>
std::vector<double> caption_log_probs_value(const Captioner<S>& m, const Mat<S>& feature,
                                            const Caption& cap, const ScoreOptions& opts = {}) {
  Tape<S> tape;
  auto vars = bind(tape, m, false);
  auto terms = caption_log_probs(vars, tape.constant_ref(&feature), cap, opts);
  std::vector<double> out;
  out.reserve(terms.size());
  for (const auto& v : terms) out.push_back(static_cast<double>(v.item()));
  return out;
}

template <class S>
std::vector<double> lm_log_probs_value(const LanguageModel<S>& m, const Caption& cap,
                                       const ScoreOptions& opts = {}) {
  Tape<S> tape;
  auto vars = bind(tape, m, false);
  auto terms = lm_log_probs(vars, cap, opts);
  std::vector<double> out;
  out.reserve(terms.size());
  for (const auto& v : terms) out.push_back(static_cast<double>(v.item()));
  return out;
}

}  // namespace ssr
