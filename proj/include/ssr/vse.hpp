// Multi-level visual-semantic embedding: image-sentence matching and
// image-concept matching, trained with a max-violating contrastive ranking
// loss over in-batch negatives, then used frozen as reward providers.

#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ssr/adam.hpp"
#include "ssr/autodiff.hpp"
#include "ssr/microworld.hpp"
#include "ssr/rng.hpp"
#include "ssr/seq_models.hpp"
#include "ssr/vocab.hpp"

namespace ssr {

// ---------------------------------------------------------------------------
// encoders
// ---------------------------------------------------------------------------

template <class S>
struct ImageEncoder {
  Mat<S> w;  // feature_dim x joint_dim
  Mat<S> b;  // 1 x joint_dim

  int feature_dim() const { return static_cast<int>(w.rows()); }
  int joint_dim() const { return static_cast<int>(w.cols()); }

  static ImageEncoder init(int feature_dim, int joint_dim, Rng& rng) {
    return {uniform_init<S>(rng, feature_dim, joint_dim), Mat<S>::Zero(1, joint_dim)};
  }
  std::vector<NamedParam<S>> params() { return {{"img_w", &w}, {"img_b", &b}}; }
};

template <class S>
struct ImageEncoderVars {
  Var<S> w, b;
};

template <class S>
ImageEncoderVars<S> bind(Tape<S>& t, const ImageEncoder<S>& m, bool trainable) {
  if (trainable) return {t.leaf(m.w, true), t.leaf(m.b, true)};
  return {t.constant_ref(&m.w), t.constant_ref(&m.b)};
}

template <class S>
Var<S> embed_image(const ImageEncoderVars<S>& m, Var<S> feature) {
  return l2_normalize(add_rowvec(matmul(feature, m.w), m.b));
}

// Bi-directional GRU over content tokens; the sentence embedding is the mean
// of the two final hidden states, projected when the GRU width differs from
// the joint space, then L2-normalized.
template <class S>
struct SentenceEncoder {
  Mat<S> embed;  // vocab x embed_dim
  GruParams<S> fwd, bwd;
  Mat<S> proj_w;  // hidden x joint (identity-free: absent when hidden == joint)
  Mat<S> proj_b;  // 1 x joint
  bool has_proj = false;

  int joint_dim() const { return has_proj ? static_cast<int>(proj_w.cols()) : fwd.hidden_size(); }

  static SentenceEncoder init(int vocab, int embed_dim, int hidden_dim, int joint_dim, Rng& rng) {
    SentenceEncoder m;
    m.embed = uniform_init<S>(rng, vocab, embed_dim);
    m.fwd = GruParams<S>::init(embed_dim, hidden_dim, rng);
    m.bwd = GruParams<S>::init(embed_dim, hidden_dim, rng);
    m.has_proj = hidden_dim != joint_dim;
    if (m.has_proj) {
      m.proj_w = uniform_init<S>(rng, hidden_dim, joint_dim);
      m.proj_b = Mat<S>::Zero(1, joint_dim);
    }
    return m;
  }

  std::vector<NamedParam<S>> params() {
    std::vector<NamedParam<S>> p = {
        {"embed", &embed},
        {"fwd_gate_wx", &fwd.gate_wx}, {"fwd_gate_wh", &fwd.gate_wh}, {"fwd_gate_b", &fwd.gate_b},
        {"fwd_cand_wx", &fwd.cand_wx}, {"fwd_cand_wh", &fwd.cand_wh}, {"fwd_cand_b", &fwd.cand_b},
        {"bwd_gate_wx", &bwd.gate_wx}, {"bwd_gate_wh", &bwd.gate_wh}, {"bwd_gate_b", &bwd.gate_b},
        {"bwd_cand_wx", &bwd.cand_wx}, {"bwd_cand_wh", &bwd.cand_wh}, {"bwd_cand_b", &bwd.cand_b}};
    if (has_proj) {
      p.push_back({"proj_w", &proj_w});
      p.push_back({"proj_b", &proj_b});
    }
    return p;
  }
};

template <class S>
struct SentenceEncoderVars {
  Var<S> embed;
  GruVars<S> fwd, bwd;
  Var<S> proj_w, proj_b;
  bool has_proj = false;
};

template <class S>
SentenceEncoderVars<S> bind(Tape<S>& t, const SentenceEncoder<S>& m, bool trainable) {
  SentenceEncoderVars<S> v;
  v.embed = trainable ? t.leaf(m.embed, true) : t.constant_ref(&m.embed);
  v.fwd = bind(t, m.fwd, trainable);
  v.bwd = bind(t, m.bwd, trainable);
  v.has_proj = m.has_proj;
  if (m.has_proj) {
    v.proj_w = trainable ? t.leaf(m.proj_w, true) : t.constant_ref(&m.proj_w);
    v.proj_b = trainable ? t.leaf(m.proj_b, true) : t.constant_ref(&m.proj_b);
  }
  return v;
}

template <class S>
Var<S> embed_sentence(const SentenceEncoderVars<S>& m, const std::vector<int>& content_ids) {
  if (content_ids.empty()) throw std::invalid_argument("embed_sentence: empty token sequence");
  Tape<S>& t = *m.embed.tape();
  const Eigen::Index H = m.fwd.cand_wh.rows();
  Var<S> hf = t.constant(Mat<S>::Zero(1, H));
  Var<S> hb = t.constant(Mat<S>::Zero(1, H));
  for (std::size_t j = 0; j < content_ids.size(); ++j) {
    hf = gru_step(m.fwd, gather_rows(m.embed, {content_ids[j]}), hf);
    hb = gru_step(m.bwd, gather_rows(m.embed, {content_ids[content_ids.size() - 1 - j]}), hb);
  }
  Var<S> mean_h = scale(add(hf, hb), S(0.5));
  if (m.has_proj) mean_h = add_rowvec(matmul(mean_h, m.proj_w), m.proj_b);
  return l2_normalize(mean_h);
}

template <class S>
Var<S> embed_sentence(const SentenceEncoderVars<S>& m, const Caption& cap) {
  std::vector<int> content(cap.ids.begin() + 1, cap.ids.end() - 1);
  return embed_sentence(m, content);
}

template <class S>
struct ConceptEmbedding {
  Mat<S> table;  // concept_vocab x joint_dim

  int joint_dim() const { return static_cast<int>(table.cols()); }

  static ConceptEmbedding init(int concept_count, int joint_dim, Rng& rng) {
    return {uniform_init<S>(rng, concept_count, joint_dim)};
  }
  std::vector<NamedParam<S>> params() { return {{"concept_table", &table}}; }
};

template <class S>
struct ConceptEmbeddingVars {
  Var<S> table;
};

template <class S>
ConceptEmbeddingVars<S> bind(Tape<S>& t, const ConceptEmbedding<S>& m, bool trainable) {
  return {trainable ? t.leaf(m.table, true) : t.constant_ref(&m.table)};
}

// rows are normalized at scoring time
template <class S>
Var<S> embed_concept(const ConceptEmbeddingVars<S>& m, int concept_id) {
  return l2_normalize(gather_rows(m.table, {concept_id}));
}

// dot product of unit vectors
template <class S>
Var<S> cosine_sim(Var<S> a, Var<S> b) {
  return sum(mul(a, b));
}

// ---------------------------------------------------------------------------
// contrastive ranking loss with hard negative mining
// ---------------------------------------------------------------------------

// Per pair, a hinge over the single most-violating in-batch negative in each
// direction. Negatives identical to the positive item (bitwise-equal
// embedding, e.g. a duplicated concept) never count as negatives; a batch
// without distinct negatives contributes zero.
template <class S>
Var<S> contrastive_loss(const std::vector<Var<S>>& image_embs, const std::vector<Var<S>>& partner_embs,
                        S margin) {
  if (image_embs.empty() || image_embs.size() != partner_embs.size())
    throw std::invalid_argument("contrastive_loss: need equal-size non-empty embedding lists");
  Tape<S>& t = *image_embs.front().tape();
  const std::size_t n = image_embs.size();
  if (n == 1) return t.scalar(S(0));

  Var<S> sims = matmul(vstack(image_embs), transpose(vstack(partner_embs)));
  const Mat<S> sv = sims.value();  // copy: later node creation may reallocate tape storage

  auto same = [](const Mat<S>& a, const Mat<S>& b) { return (a.array() == b.array()).all(); };

  Var<S> total = t.scalar(S(0));
  Var<S> margin_c = t.scalar(margin);
  for (std::size_t i = 0; i < n; ++i) {
    // hardest negative partner for image i
    std::ptrdiff_t best_c = -1;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || same(partner_embs[j].value(), partner_embs[i].value())) continue;
      if (best_c < 0 || sv(i, j) > sv(i, static_cast<std::size_t>(best_c))) best_c = static_cast<std::ptrdiff_t>(j);
    }
    // hardest negative image for partner i
    std::ptrdiff_t best_i = -1;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || same(image_embs[j].value(), image_embs[i].value())) continue;
      if (best_i < 0 || sv(j, i) > sv(static_cast<std::size_t>(best_i), i)) best_i = static_cast<std::ptrdiff_t>(j);
    }
    const auto ii = static_cast<Eigen::Index>(i);
    Var<S> pos = pick(sims, ii, ii);
    if (best_c >= 0)
      total = add(total, hinge_pos(add(margin_c, sub(pick(sims, ii, static_cast<Eigen::Index>(best_c)), pos))));
    if (best_i >= 0)
      total = add(total, hinge_pos(add(margin_c, sub(pick(sims, static_cast<Eigen::Index>(best_i), ii), pos))));
  }
  return total;
}

// ---------------------------------------------------------------------------
// concept vocabulary with prior table
// ---------------------------------------------------------------------------

struct ConceptVocabulary {
  std::vector<std::string> tokens;  // order: count desc, token asc
  std::vector<long> counts;
  std::vector<double> prior;  // sums to 1
  std::unordered_map<std::string, int> index;

  int size() const { return static_cast<int>(tokens.size()); }
  bool contains(const std::string& token) const { return index.count(token) > 0; }
  int id_of(const std::string& token) const {
    auto it = index.find(token);
    return it == index.end() ? -1 : it->second;
  }
  double prior_of(int id) const { return prior[static_cast<std::size_t>(id)]; }
  double max_prior() const { return prior.empty() ? 0.0 : *std::max_element(prior.begin(), prior.end()); }

  // Counts concept tokens over the training pseudo captions; the prior is
  // the relative frequency over all concept tokens.
  static ConceptVocabulary build(const std::vector<std::vector<std::string>>& pseudo_captions,
                                 const TagTable& tags) {
    std::unordered_map<std::string, long> freq;
    long total = 0;
    for (const auto& caption : pseudo_captions)
      for (const auto& tok : extract_concepts(caption, tags)) {
        ++freq[tok];
        ++total;
      }
    if (total == 0) throw std::runtime_error("ConceptVocabulary: no concept tokens in corpus");
    std::vector<std::pair<std::string, long>> items(freq.begin(), freq.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    ConceptVocabulary v;
    for (const auto& [tok, count] : items) {
      v.index[tok] = static_cast<int>(v.tokens.size());
      v.tokens.push_back(tok);
      v.counts.push_back(count);
      v.prior.push_back(static_cast<double>(count) / static_cast<double>(total));
    }
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("ConceptVocabulary: cannot open " + path);
    char buf[64];
    for (int i = 0; i < size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", prior[static_cast<std::size_t>(i)]);
      out << tokens[static_cast<std::size_t>(i)] << ' ' << counts[static_cast<std::size_t>(i)] << ' '
          << buf << '\n';
    }
  }

  static ConceptVocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("ConceptVocabulary: cannot open " + path);
    ConceptVocabulary v;
    std::string tok;
    long count;
    double p;
    while (in >> tok >> count >> p) {
      v.index[tok] = static_cast<int>(v.tokens.size());
      v.tokens.push_back(tok);
      v.counts.push_back(count);
      v.prior.push_back(p);
    }
    if (v.tokens.empty()) throw std::runtime_error("ConceptVocabulary: empty file " + path);
    return v;
  }
};

// ---------------------------------------------------------------------------
// retrieval
// ---------------------------------------------------------------------------

// Fraction of queries whose gold item ranks in the top k by similarity;
// ties broken toward the lower gallery index.
inline double recall_at_k(const Mat<double>& sim, const std::vector<int>& gold, int k) {
  if (sim.rows() != static_cast<Eigen::Index>(gold.size()))
    throw std::invalid_argument("recall_at_k: one gold index per query required");
  if (k < 1 || k > sim.cols()) throw std::invalid_argument("recall_at_k: k outside gallery size");
  long hits = 0;
  for (Eigen::Index q = 0; q < sim.rows(); ++q) {
    const int g = gold[static_cast<std::size_t>(q)];
    if (g < 0 || g >= sim.cols()) throw std::invalid_argument("recall_at_k: gold index outside gallery");
    long rank = 0;  // number of gallery items strictly ahead of gold
    for (Eigen::Index j = 0; j < sim.cols(); ++j) {
      if (j == g) continue;
      if (sim(q, j) > sim(q, g) || (sim(q, j) == sim(q, g) && j < g)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(sim.rows());
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct VseTrainConfig {
  double learning_rate = 2e-4;
  int batch_size = 128;
  int max_epochs = 40;
  int patience = 3;  // evaluations without held-out improvement before stopping
  double margin = 0.2;
  std::uint64_t seed = 1;
};

template <class S>
struct SentenceMatchModel {
  ImageEncoder<S> image;
  SentenceEncoder<S> sentence;
};

template <class S>
struct ConceptMatchModel {
  ImageEncoder<S> image;
  ConceptEmbedding<S> concepts;
};

template <class S>
struct VseSentenceItem {
  const Mat<S>* feature;
  std::vector<int> token_ids;  // content tokens under the target vocabulary
};

template <class S>
struct VseConceptItem {
  const Mat<S>* feature;
  int concept_id;
  int image_id;
};

namespace detail {

template <class S>
std::vector<Mat<S>> grads_of(const std::vector<Var<S>>& vars) {
  std::vector<Mat<S>> out;
  out.reserve(vars.size());
  for (const auto& v : vars) {
    bool has = v.requires_grad();
    Mat<S> g;
    if (has) {
      try {
        g = v.grad();
      } catch (const std::runtime_error&) {
        has = false;  // never touched by backward
      }
    }
    out.push_back(has ? g : Mat<S>::Zero(v.rows(), v.cols()));
  }
  return out;
}

inline std::vector<std::size_t> index_range(std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  return order;
}

}  // namespace detail

// Trains the image-sentence matching model to a held-out contrastive-loss
// plateau (patience evaluations without improvement; best parameters kept).
template <class S>
void train_sentence_vse(SentenceMatchModel<S>& model, const std::vector<VseSentenceItem<S>>& train,
                        const std::vector<VseSentenceItem<S>>& heldout, const VseTrainConfig& cfg,
                        std::vector<double>* heldout_history = nullptr) {
  if (train.empty()) throw std::invalid_argument("train_sentence_vse: empty dataset");
  Rng rng = Rng(cfg.seed).child(0xe5e1);
  AdamState<S> opt(cfg.learning_rate);
  auto order = detail::index_range(train.size());

  auto batch_loss = [&](Tape<S>& tape, const ImageEncoderVars<S>& iv, const SentenceEncoderVars<S>& sv,
                        const std::vector<VseSentenceItem<S>>& items,
                        const std::vector<std::size_t>& subset) {
    std::vector<Var<S>> img, sent;
    auto add_item = [&](const VseSentenceItem<S>& item) {
      img.push_back(embed_image(iv, tape.constant_ref(item.feature)));
      sent.push_back(embed_sentence(sv, item.token_ids));
    };
    if (subset.empty())
      for (const auto& item : items) add_item(item);
    else
      for (std::size_t i : subset) add_item(items[i]);
    return contrastive_loss(img, sent, static_cast<S>(cfg.margin));
  };

  auto heldout_loss = [&]() {
    if (heldout.empty()) return 0.0;
    Tape<S> tape;
    auto iv = bind(tape, model.image, false);
    auto sv = bind(tape, model.sentence, false);
    return static_cast<double>(batch_loss(tape, iv, sv, heldout, {}).item()) /
           static_cast<double>(heldout.size());
  };

  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  SentenceMatchModel<S> best_model = model;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
      const std::vector<std::size_t> batch(order.begin() + at, order.begin() + end);
      Tape<S> tape;
      auto iv = bind(tape, model.image, true);
      auto sv = bind(tape, model.sentence, true);
      Var<S> loss = batch_loss(tape, iv, sv, train, batch);
      if (!loss.requires_grad()) continue;  // batch of one or no distinct negatives
      tape.backward(loss);
      std::vector<Var<S>> vars = {iv.w, iv.b, sv.embed};
      for (auto* g : {&sv.fwd, &sv.bwd})
        for (Var<S> v : {g->gate_wx, g->gate_wh, g->gate_b, g->cand_wx, g->cand_wh, g->cand_b})
          vars.push_back(v);
      std::vector<Mat<S>*> params = {&model.image.w, &model.image.b, &model.sentence.embed};
      for (auto* g : {&model.sentence.fwd, &model.sentence.bwd})
        for (Mat<S>* m : {&g->gate_wx, &g->gate_wh, &g->gate_b, &g->cand_wx, &g->cand_wh, &g->cand_b})
          params.push_back(m);
      if (model.sentence.has_proj) {
        vars.push_back(sv.proj_w);
        vars.push_back(sv.proj_b);
        params.push_back(&model.sentence.proj_w);
        params.push_back(&model.sentence.proj_b);
      }
      adam_step(params, opt, detail::grads_of(vars));
    }
    const double val = heldout_loss();
    if (heldout_history) heldout_history->push_back(val);
    if (!heldout.empty()) {
      if (val < best - 1e-9) {
        best = val;
        best_model = model;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
    }
  }
  if (!heldout.empty()) model = best_model;
}

// Same loop for the image-concept matching model. Pairs are (image, concept
// token of its pseudo caption); duplicate concepts inside a batch are
// excluded from each other's negative sets by the loss itself.
template <class S>
void train_concept_vse(ConceptMatchModel<S>& model, const std::vector<VseConceptItem<S>>& train,
                       const std::vector<VseConceptItem<S>>& heldout, const VseTrainConfig& cfg,
                       std::vector<double>* heldout_history = nullptr) {
  if (train.empty()) throw std::invalid_argument("train_concept_vse: empty dataset");
  Rng rng = Rng(cfg.seed).child(0xe5e2);
  AdamState<S> opt(cfg.learning_rate);
  auto order = detail::index_range(train.size());

  auto batch_loss = [&](Tape<S>& tape, const ImageEncoderVars<S>& iv, const ConceptEmbeddingVars<S>& cv,
                        const std::vector<VseConceptItem<S>>& items,
                        const std::vector<std::size_t>& subset) {
    std::vector<Var<S>> img, cpt;
    auto add_item = [&](const VseConceptItem<S>& item) {
      img.push_back(embed_image(iv, tape.constant_ref(item.feature)));
      cpt.push_back(embed_concept(cv, item.concept_id));
    };
    if (subset.empty())
      for (const auto& item : items) add_item(item);
    else
      for (std::size_t i : subset) add_item(items[i]);
    return contrastive_loss(img, cpt, static_cast<S>(cfg.margin));
  };

  auto heldout_loss = [&]() {
    if (heldout.empty()) return 0.0;
    Tape<S> tape;
    auto iv = bind(tape, model.image, false);
    auto cv = bind(tape, model.concepts, false);
    return static_cast<double>(batch_loss(tape, iv, cv, heldout, {}).item()) /
           static_cast<double>(heldout.size());
  };

  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  ConceptMatchModel<S> best_model = model;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
      const std::vector<std::size_t> batch(order.begin() + at, order.begin() + end);
      Tape<S> tape;
      auto iv = bind(tape, model.image, true);
      auto cv = bind(tape, model.concepts, true);
      Var<S> loss = batch_loss(tape, iv, cv, train, batch);
      if (!loss.requires_grad()) continue;
      tape.backward(loss);
      const std::vector<Var<S>> vars = {iv.w, iv.b, cv.table};
      const std::vector<Mat<S>*> params = {&model.image.w, &model.image.b, &model.concepts.table};
      adam_step(params, opt, detail::grads_of(vars));
    }
    const double val = heldout_loss();
    if (heldout_history) heldout_history->push_back(val);
    if (!heldout.empty()) {
      if (val < best - 1e-9) {
        best = val;
        best_model = model;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
    }
  }
  if (!heldout.empty()) model = best_model;
}

}  // namespace ssr
