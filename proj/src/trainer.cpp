#include "ssr/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "ssr/adam.hpp"
#include "ssr/checkpoint.hpp"
#include "ssr/decoding.hpp"

namespace ssr {

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::vector<Mat<float>> collect_grads(const std::vector<Var<float>>& vars) {
  std::vector<Mat<float>> out;
  out.reserve(vars.size());
  for (const auto& v : vars) {
    bool has = v.requires_grad();
    Mat<float> g;
    if (has) {
      try {
        g = v.grad();
      } catch (const std::runtime_error&) {
        has = false;
      }
    }
    out.push_back(has ? g : Mat<float>::Zero(v.rows(), v.cols()));
  }
  return out;
}

std::vector<Mat<float>*> param_ptrs(std::vector<NamedParam<float>> params) {
  std::vector<Mat<float>*> out;
  out.reserve(params.size());
  for (auto& [name, m] : params) out.push_back(m);
  return out;
}

Caption caption_from_tokens(const Vocabulary& vocab, const std::vector<std::string>& tokens,
                            int max_len) {
  return truncate_caption(Caption::from_tokens(vocab, tokens), max_len);
}

}  // namespace

// ---------------------------------------------------------------------------
// modes and configuration
// ---------------------------------------------------------------------------

ModeSpec ModeSpec::parse(const std::string& text) {
  ModeSpec m;
  m.name = text;
  if (text == "baseline") {
    m.kind = TrainMode::kBaseline;
    m.rewards = {false, false, false};
  } else if (text == "baseline_plus") {
    m.kind = TrainMode::kBaselinePlus;
    m.rewards = {false, false, false};
  } else if (text == "ssr" || text == "ablation:flc_srlv_crlv") {
    m.kind = text == "ssr" ? TrainMode::kSsr : TrainMode::kAblation;
    m.rewards = {true, true, true};
  } else if (text == "ablation:none") {
    m.kind = TrainMode::kAblation;
    m.rewards = {false, false, false};
  } else if (text == "ablation:flc") {
    m.kind = TrainMode::kAblation;
    m.rewards = {true, false, false};
  } else if (text == "ablation:flc_srlv") {
    m.kind = TrainMode::kAblation;
    m.rewards = {true, true, false};
  } else {
    throw std::runtime_error(
        "unknown mode '" + text +
        "' (expected baseline, baseline_plus, ssr, or ablation:{none,flc,flc_srlv,flc_srlv_crlv})");
  }
  return m;
}

const std::set<std::string>& ExperimentConfig::known_keys() {
  static const std::set<std::string> keys = {
      "data_dir",        "hidden_dim",       "embed_dim",        "vse_sent_embed_dim",
      "vse_sent_joint_dim", "vse_concept_joint_dim", "vocab_threshold", "max_len_target",
      "beam",            "alpha",            "beta",             "gamma",
      "lambda",          "margin",           "lr_captioner",     "lr_lm",
      "lr_vse",          "lr_rl",            "batch_pretrain",   "batch_rl",
      "dropout",         "grad_clip",        "lm_epochs",        "captioner_epochs",
      "vse_epochs",      "vse_patience",     "rl_epochs",        "rl_patience",
      "mc_samples",      "rl_length_norm",   "lm_corpus",        "seed",
      "mode"};
  return keys;
}

ExperimentConfig ExperimentConfig::from_config(const KeyValueConfig& kv) {
  kv.require_known(known_keys());
  ExperimentConfig c;
  c.data_dir = kv.get_string("data_dir", c.data_dir);
  c.hidden_dim = static_cast<int>(kv.get_long("hidden_dim", c.hidden_dim));
  c.embed_dim = static_cast<int>(kv.get_long("embed_dim", c.embed_dim));
  c.vse_sent_embed_dim = static_cast<int>(kv.get_long("vse_sent_embed_dim", c.vse_sent_embed_dim));
  c.vse_sent_joint_dim = static_cast<int>(kv.get_long("vse_sent_joint_dim", c.vse_sent_joint_dim));
  c.vse_concept_joint_dim =
      static_cast<int>(kv.get_long("vse_concept_joint_dim", c.vse_concept_joint_dim));
  c.vocab_threshold = kv.get_long("vocab_threshold", c.vocab_threshold);
  c.max_len_target = static_cast<int>(kv.get_long("max_len_target", c.max_len_target));
  c.beam = static_cast<int>(kv.get_long("beam", c.beam));
  c.alpha = kv.get_double("alpha", c.alpha);
  c.beta = kv.get_double("beta", c.beta);
  c.gamma = kv.get_double("gamma", c.gamma);
  c.lambda = kv.get_double("lambda", c.lambda);
  c.margin = kv.get_double("margin", c.margin);
  c.lr_captioner = kv.get_double("lr_captioner", c.lr_captioner);
  c.lr_lm = kv.get_double("lr_lm", c.lr_lm);
  c.lr_vse = kv.get_double("lr_vse", c.lr_vse);
  c.lr_rl = kv.get_double("lr_rl", c.lr_rl);
  c.batch_pretrain = static_cast<int>(kv.get_long("batch_pretrain", c.batch_pretrain));
  c.batch_rl = static_cast<int>(kv.get_long("batch_rl", c.batch_rl));
  c.dropout = kv.get_double("dropout", c.dropout);
  c.grad_clip = kv.get_double("grad_clip", c.grad_clip);
  c.lm_epochs = static_cast<int>(kv.get_long("lm_epochs", c.lm_epochs));
  c.captioner_epochs = static_cast<int>(kv.get_long("captioner_epochs", c.captioner_epochs));
  c.vse_epochs = static_cast<int>(kv.get_long("vse_epochs", c.vse_epochs));
  c.vse_patience = static_cast<int>(kv.get_long("vse_patience", c.vse_patience));
  c.rl_epochs = static_cast<int>(kv.get_long("rl_epochs", c.rl_epochs));
  c.rl_patience = static_cast<int>(kv.get_long("rl_patience", c.rl_patience));
  c.mc_samples = static_cast<int>(kv.get_long("mc_samples", c.mc_samples));
  c.rl_length_norm = kv.get_bool("rl_length_norm", c.rl_length_norm);
  c.lm_corpus = kv.get_string("lm_corpus", c.lm_corpus);
  c.seed = kv.get_u64("seed", c.seed);
  c.mode = kv.get_string("mode", c.mode);

  if (c.hidden_dim < 1 || c.embed_dim < 1 || c.batch_pretrain < 1 || c.batch_rl < 1 ||
      c.lr_captioner <= 0 || c.lr_lm <= 0 || c.lr_vse <= 0 || c.lr_rl <= 0 || c.beam < 1 ||
      c.mc_samples < 1 || c.max_len_target < 1)
    throw std::runtime_error("config: rates, sizes and dims must be positive");
  if (c.dropout < 0 || c.dropout >= 1) throw std::runtime_error("config: dropout must lie in [0, 1)");
  if (c.lm_corpus != "clean" && c.lm_corpus != "pseudo")
    throw std::runtime_error("config: lm_corpus must be 'clean' or 'pseudo'");
  return c;
}

KeyValueConfig ExperimentConfig::to_config() const {
  KeyValueConfig kv;
  auto num = [&](const std::string& k, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    kv.set(k, buf);
  };
  kv.set("data_dir", data_dir);
  kv.set("mode", mode);
  kv.set("lm_corpus", lm_corpus);
  kv.set("seed", std::to_string(seed));
  kv.set("hidden_dim", std::to_string(hidden_dim));
  kv.set("embed_dim", std::to_string(embed_dim));
  kv.set("vse_sent_embed_dim", std::to_string(vse_sent_embed_dim));
  kv.set("vse_sent_joint_dim", std::to_string(vse_sent_joint_dim));
  kv.set("vse_concept_joint_dim", std::to_string(vse_concept_joint_dim));
  kv.set("vocab_threshold", std::to_string(vocab_threshold));
  kv.set("max_len_target", std::to_string(max_len_target));
  kv.set("beam", std::to_string(beam));
  kv.set("batch_pretrain", std::to_string(batch_pretrain));
  kv.set("batch_rl", std::to_string(batch_rl));
  kv.set("lm_epochs", std::to_string(lm_epochs));
  kv.set("captioner_epochs", std::to_string(captioner_epochs));
  kv.set("vse_epochs", std::to_string(vse_epochs));
  kv.set("vse_patience", std::to_string(vse_patience));
  kv.set("rl_epochs", std::to_string(rl_epochs));
  kv.set("rl_patience", std::to_string(rl_patience));
  kv.set("mc_samples", std::to_string(mc_samples));
  kv.set("rl_length_norm", rl_length_norm ? "true" : "false");
  num("alpha", alpha);
  num("beta", beta);
  num("gamma", gamma);
  num("lambda", lambda);
  num("margin", margin);
  num("lr_captioner", lr_captioner);
  num("lr_lm", lr_lm);
  num("lr_vse", lr_vse);
  num("lr_rl", lr_rl);
  num("dropout", dropout);
  num("grad_clip", grad_clip);
  return kv;
}

// ---------------------------------------------------------------------------
// data preparation
// ---------------------------------------------------------------------------

PreparedData prepare_data(const ExperimentConfig& cfg) {
  if (cfg.data_dir.empty()) throw std::runtime_error("prepare_data: data_dir not set");
  PreparedData p;
  p.data = read_dataset(cfg.data_dir);
  if (p.data.splits.train.empty()) throw std::runtime_error("prepare_data: empty training split");

  std::vector<std::vector<std::string>> pseudo_corpus;
  pseudo_corpus.reserve(p.data.splits.train.size());
  for (const auto& pair : p.data.splits.train) pseudo_corpus.push_back(pair.pseudo_tokens);
  p.vocab = build_vocab(pseudo_corpus, cfg.vocab_threshold);
  p.concepts = ConceptVocabulary::build(pseudo_corpus, p.data.tags);

  for (const auto& pair : p.data.splits.train) {
    p.train_captions.push_back(caption_from_tokens(p.vocab, pair.pseudo_tokens, cfg.max_len_target));
    p.train_features.push_back(pair.image.feature);
  }

  if (cfg.lm_corpus == "pseudo") {
    p.lm_corpus = pseudo_corpus;
  } else {
    const std::string path = cfg.data_dir + "/lm_corpus.txt";
    std::ifstream in(path);
    if (!in)
      throw std::runtime_error("prepare_data: lm_corpus = clean requires " + path +
                               " (emitted by make-dataset)");
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::vector<std::string> tokens;
      std::string tok;
      while (ls >> tok) tokens.push_back(tok);
      if (!tokens.empty()) p.lm_corpus.push_back(std::move(tokens));
    }
    if (p.lm_corpus.empty()) throw std::runtime_error("prepare_data: empty mono-lingual corpus " + path);
  }
  return p;
}

void TrainLog::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("TrainLog: cannot open " + path);
  for (const auto& line : lines) out << line << '\n';
}

// ---------------------------------------------------------------------------
// pretraining phases
// ---------------------------------------------------------------------------

LanguageModel<float> pretrain_lm(const ExperimentConfig& cfg, const PreparedData& data, TrainLog* log) {
  if (data.lm_corpus.empty()) throw std::runtime_error("pretrain_lm: empty corpus");
  Rng init_rng = Rng(cfg.seed).child(0x101);
  auto model = LanguageModel<float>::init(cfg.embed_dim, cfg.hidden_dim, data.vocab.size(), init_rng);

  std::vector<Caption> captions;
  captions.reserve(data.lm_corpus.size());
  for (const auto& tokens : data.lm_corpus)
    captions.push_back(caption_from_tokens(data.vocab, tokens, cfg.max_len_target));
  // deterministic 95/5 split for best-checkpoint selection
  const std::size_t n_heldout = std::max<std::size_t>(1, captions.size() / 20);
  const std::size_t n_train = captions.size() - n_heldout;

  Rng epoch_rng = Rng(cfg.seed).child(0x102);
  Rng dropout_rng = Rng(cfg.seed).child(0x103);
  AdamState<float> opt(cfg.lr_lm);
  auto order = [&]() {
    std::vector<std::size_t> idx(n_train);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
  }();

  auto heldout_loss = [&]() {
    Tape<float> tape;
    auto vars = bind(tape, model, false);
    std::vector<const Caption*> batch;
    for (std::size_t i = n_train; i < captions.size(); ++i) batch.push_back(&captions[i]);
    return static_cast<double>(lm_xent_loss(vars, batch).item());
  };

  double best = std::numeric_limits<double>::infinity();
  LanguageModel<float> best_model = model;
  for (int epoch = 0; epoch < cfg.lm_epochs; ++epoch) {
    epoch_rng.shuffle(order);
    double train_loss = 0;
    long batches = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_pretrain)) {
      const std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_pretrain));
      Tape<float> tape;
      auto vars = bind(tape, model, true);
      std::vector<const Caption*> batch;
      for (std::size_t i = at; i < end; ++i) batch.push_back(&captions[order[i]]);
      ScoreOptions opts;
      opts.dropout = {cfg.dropout, &dropout_rng};
      auto loss = lm_xent_loss(vars, batch, opts);
      tape.backward(loss);
      adam_step(param_ptrs(model.params()), opt, collect_grads(vars.ordered()));
      train_loss += static_cast<double>(loss.item());
      ++batches;
    }
    const double val = heldout_loss();
    if (log)
      log->add("lm epoch " + std::to_string(epoch) + " train_loss " +
               format_double(train_loss / std::max<long>(1, batches)) + " val_loss " + format_double(val));
    if (val < best) {
      best = val;
      best_model = model;
    }
  }
  return best_model;
}

VseModels pretrain_vse(const ExperimentConfig& cfg, const PreparedData& data, TrainLog* log) {
  const int feature_dim = static_cast<int>(data.train_features.front().cols());
  Rng init_rng = Rng(cfg.seed).child(0x201);
  VseModels models{
      {ImageEncoder<float>::init(feature_dim, cfg.vse_sent_joint_dim, init_rng),
       SentenceEncoder<float>::init(data.vocab.size(), cfg.vse_sent_embed_dim, cfg.vse_sent_joint_dim,
                                    cfg.vse_sent_joint_dim, init_rng)},
      {ImageEncoder<float>::init(feature_dim, cfg.vse_concept_joint_dim, init_rng),
       ConceptEmbedding<float>::init(data.concepts.size(), cfg.vse_concept_joint_dim, init_rng)}};

  auto content_ids = [&](const std::vector<std::string>& tokens) {
    std::vector<int> ids;
    const Caption cap = caption_from_tokens(data.vocab, tokens, cfg.max_len_target);
    ids.assign(cap.ids.begin() + 1, cap.ids.end() - 1);
    return ids;
  };

  std::vector<VseSentenceItem<float>> sent_train, sent_val;
  for (std::size_t i = 0; i < data.data.splits.train.size(); ++i)
    sent_train.push_back({&data.train_features[i], content_ids(data.data.splits.train[i].pseudo_tokens)});
  for (const auto& pair : data.data.splits.val)
    sent_val.push_back({&pair.image.feature, content_ids(pair.pseudo_tokens)});

  // image-concept pairs: every (image, concept token of its pseudo caption)
  std::vector<VseConceptItem<float>> concept_train, concept_val;
  auto add_concept_items = [&](const PseudoPair& pair, const Mat<float>* feature,
                               std::vector<VseConceptItem<float>>& out) {
    for (const auto& tok : extract_concepts(pair.pseudo_tokens, data.data.tags)) {
      const int id = data.concepts.id_of(tok);
      if (id >= 0) out.push_back({feature, id, pair.image.id});
    }
  };
  for (std::size_t i = 0; i < data.data.splits.train.size(); ++i)
    add_concept_items(data.data.splits.train[i], &data.train_features[i], concept_train);
  for (const auto& pair : data.data.splits.val) add_concept_items(pair, &pair.image.feature, concept_val);

  VseTrainConfig vse_cfg;
  vse_cfg.learning_rate = cfg.lr_vse;
  vse_cfg.batch_size = cfg.batch_pretrain;
  vse_cfg.max_epochs = cfg.vse_epochs;
  vse_cfg.patience = cfg.vse_patience;
  vse_cfg.margin = cfg.margin;
  vse_cfg.seed = Rng(cfg.seed).child(0x202).seed();

  std::vector<double> sent_history, concept_history;
  train_sentence_vse(models.sentence, sent_train, sent_val, vse_cfg, &sent_history);
  vse_cfg.seed = Rng(cfg.seed).child(0x203).seed();
  train_concept_vse(models.concepts, concept_train, concept_val, vse_cfg, &concept_history);
  if (log) {
    for (std::size_t e = 0; e < sent_history.size(); ++e)
      log->add("vse_sentence epoch " + std::to_string(e) + " heldout_loss " + format_double(sent_history[e]));
    for (std::size_t e = 0; e < concept_history.size(); ++e)
      log->add("vse_concept epoch " + std::to_string(e) + " heldout_loss " + format_double(concept_history[e]));
  }
  return models;
}

Captioner<float> pretrain_captioner(const ExperimentConfig& cfg, const PreparedData& data,
                                    TrainLog* log) {
  const int feature_dim = static_cast<int>(data.train_features.front().cols());
  Rng init_rng = Rng(cfg.seed).child(0x301);
  auto model =
      Captioner<float>::init(feature_dim, cfg.embed_dim, cfg.hidden_dim, data.vocab.size(), init_rng);

  std::vector<Caption> val_captions;
  for (const auto& pair : data.data.splits.val)
    val_captions.push_back(caption_from_tokens(data.vocab, pair.pseudo_tokens, cfg.max_len_target));

  Rng epoch_rng = Rng(cfg.seed).child(0x302);
  Rng dropout_rng = Rng(cfg.seed).child(0x303);
  AdamState<float> opt(cfg.lr_captioner);
  std::vector<std::size_t> order(data.train_captions.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  auto val_loss = [&]() {
    if (val_captions.empty()) return 0.0;
    Tape<float> tape;
    auto vars = bind(tape, model, false);
    std::vector<XentItem<float>> batch;
    for (std::size_t i = 0; i < val_captions.size(); ++i)
      batch.push_back({&data.data.splits.val[i].image.feature, &val_captions[i]});
    return static_cast<double>(caption_xent_loss(vars, batch).item());
  };

  double best = std::numeric_limits<double>::infinity();
  Captioner<float> best_model = model;
  for (int epoch = 0; epoch < cfg.captioner_epochs; ++epoch) {
    epoch_rng.shuffle(order);
    double train_loss = 0;
    long batches = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_pretrain)) {
      const std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_pretrain));
      Tape<float> tape;
      auto vars = bind(tape, model, true);
      std::vector<XentItem<float>> batch;
      for (std::size_t i = at; i < end; ++i)
        batch.push_back({&data.train_features[order[i]], &data.train_captions[order[i]]});
      ScoreOptions opts;
      opts.dropout = {cfg.dropout, &dropout_rng};
      auto loss = caption_xent_loss(vars, batch, opts);
      tape.backward(loss);
      adam_step(param_ptrs(model.params()), opt, collect_grads(vars.ordered()));
      train_loss += static_cast<double>(loss.item());
      ++batches;
    }
    const double val = val_loss();
    if (log)
      log->add("captioner epoch " + std::to_string(epoch) + " train_loss " +
               format_double(train_loss / std::max<long>(1, batches)) + " val_loss " + format_double(val));
    if (val_captions.empty() || val < best) {
      best = val;
      best_model = model;
    }
  }
  return best_model;
}

RewardScorers<float> make_scorers(const PretrainedBundle& bundle, const PreparedData& data,
                                  double lambda) {
  RewardScorers<float> s;
  s.lm = &bundle.lm;
  s.sentence_match = &bundle.vse.sentence;
  s.concept_match = &bundle.vse.concepts;
  s.concepts = &data.concepts;
  s.vocab = &data.vocab;
  s.lambda = lambda;
  return s;
}

// ---------------------------------------------------------------------------
// the reinforcement loop (Algorithm 1 body)
// ---------------------------------------------------------------------------

Captioner<float> train_ssr(const ExperimentConfig& cfg, const PretrainedBundle& bundle,
                           const PreparedData& data, const ModeSpec& mode, TrainLog* log) {
  if (mode.kind == TrainMode::kBaseline)
    throw std::invalid_argument("train_ssr: baseline mode runs no reinforcement phase");
  if (data.data.splits.val.empty()) throw std::runtime_error("train_ssr: validation split required");

  Captioner<float> model = bundle.captioner;
  RewardScorers<float> scorers = make_scorers(bundle, data, cfg.lambda);

  CiderScorer cider;
  if (mode.kind == TrainMode::kBaselinePlus) {
    std::vector<RefSet> refsets;
    for (const auto& pair : data.data.splits.train) refsets.push_back({pair.pseudo_tokens});
    cider.fit(refsets);
  }
  std::vector<RefSet> pseudo_refs;  // per train item, for the CIDEr advantage
  for (const auto& pair : data.data.splits.train) pseudo_refs.push_back({pair.pseudo_tokens});

  AdamState<float> opt(cfg.lr_rl);
  Rng dropout_rng = Rng(cfg.seed).child(0x403);
  std::vector<std::size_t> order(data.train_captions.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  const LossWeights weights{cfg.alpha, cfg.beta, cfg.gamma};

  auto val_cider = [&]() {
    // greedy decodes are enough for epoch selection; the test report uses
    // the configured beam
    EvalReport r = evaluate_corpus(model, scorers, data.data.splits.val, data.vocab, 1,
                                   cfg.max_len_target);
    return r.cider;
  };

  double best = -std::numeric_limits<double>::infinity();
  Captioner<float> best_model = model;
  int stale = 0;
  for (int epoch = 0; epoch < cfg.rl_epochs; ++epoch) {
    Rng epoch_rng = Rng(cfg.seed).child(0x401).child(static_cast<std::uint64_t>(epoch));
    epoch_rng.shuffle(order);
    double epoch_loss = 0;
    long batches = 0;
    double flc_s = 0, flc_b = 0, srlv_s = 0, srlv_b = 0, crlv_sum = 0, sample_len = 0;
    long n_decoded = 0, n_same = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_rl)) {
      const std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_rl));

      // decode and score the batch under the current parameters
      struct Decoded {
        std::size_t item;
        Caption sampled, baseline;
        RewardBundle sampled_rewards, baseline_rewards;
      };
      std::vector<Decoded> decoded;
      for (std::size_t k = at; k < end; ++k) {
        const std::size_t i = order[k];
        const auto& pair = data.data.splits.train[i];
        Caption greedy = greedy_decode(model, data.train_features[i], cfg.max_len_target).caption;
        for (int s = 0; s < cfg.mc_samples; ++s) {
          Rng decode_rng = Rng(cfg.seed)
                               .child(0x402)
                               .child(static_cast<std::uint64_t>(epoch))
                               .child(static_cast<std::uint64_t>(pair.image.id) * 8 +
                                      static_cast<std::uint64_t>(s));
          Decoded d;
          d.item = i;
          d.sampled = sample_sentence(model, data.train_features[i], cfg.max_len_target, decode_rng).caption;
          d.baseline = greedy;
          if (mode.kind != TrainMode::kBaselinePlus) {
            auto [sr, br] = bundle_rewards(scorers, data.train_features[i], d.sampled, d.baseline);
            if (!mode.rewards.crlv) std::fill(sr.r_crlv.begin(), sr.r_crlv.end(), 0.0);
            flc_s += sr.r_flc;
            flc_b += br.r_flc;
            srlv_s += sr.r_srlv;
            srlv_b += br.r_srlv;
            for (double r : sr.r_crlv) crlv_sum += r;
            d.sampled_rewards = sr;
            d.baseline_rewards = br;
          }
          sample_len += d.sampled.length();
          n_same += d.sampled.ids == d.baseline.ids;
          ++n_decoded;
          decoded.push_back(std::move(d));
        }
      }

      Tape<float> tape;
      auto vars = bind(tape, model, true);

      ScoreOptions xent_opts;
      xent_opts.dropout = {cfg.dropout, &dropout_rng};
      std::vector<XentItem<float>> xent_batch;
      for (std::size_t k = at; k < end; ++k)
        xent_batch.push_back({&data.train_features[order[k]], &data.train_captions[order[k]]});
      Var<float> l_cap = caption_xent_loss(vars, xent_batch, xent_opts);

      SelfCriticalOptions sc_opts;
      sc_opts.score = decode_score_options();
      sc_opts.length_normalize = cfg.rl_length_norm;

      Var<float> loss;
      if (mode.kind == TrainMode::kBaselinePlus) {
        std::vector<CiderCriticalItem<float>> batch;
        for (const auto& d : decoded)
          batch.push_back({&data.train_features[d.item], &d.sampled, &d.baseline, &pseudo_refs[d.item]});
        Var<float> l_cider = cider_selfcritical_loss(vars, batch, cider, data.vocab, sc_opts);
        loss = add(scale(l_cap, static_cast<float>(cfg.alpha)), l_cider);
      } else {
        std::vector<SelfCriticalItem<float>> batch;
        for (const auto& d : decoded)
          batch.push_back({&data.train_features[d.item], &d.sampled, &d.sampled_rewards,
                           &d.baseline_rewards});
        Var<float> l_flc = mode.rewards.flc ? flc_selfcritical_loss(vars, batch, sc_opts)
                                            : tape.scalar(0.0f);
        Var<float> l_rlv = mode.rewards.srlv ? rlv_selfcritical_loss(vars, batch, sc_opts)
                                             : tape.scalar(0.0f);
        loss = joint_loss(weights, l_cap, l_flc, l_rlv);
      }

      tape.backward(loss);
      auto grads = collect_grads(vars.ordered());
      clip_global_norm(grads, cfg.grad_clip);
      adam_step(param_ptrs(model.params()), opt, grads);
      epoch_loss += static_cast<double>(loss.item());
      ++batches;
    }

    const double val = val_cider();
    if (log) {
      const double n = std::max<long>(1, n_decoded);
      log->add("rl[" + mode.name + "] epoch " + std::to_string(epoch) + " loss " +
               format_double(epoch_loss / std::max<long>(1, batches)) + " val_cider " +
               format_double(val) + " flc_s " + format_double(flc_s / n) + " flc_b " +
               format_double(flc_b / n) + " srlv_s " + format_double(srlv_s / n) + " srlv_b " +
               format_double(srlv_b / n) + " crlv_sum " + format_double(crlv_sum / n) + " len " +
               format_double(sample_len / n) + " same " + format_double(static_cast<double>(n_same) / n));
    }
    if (val > best + 1e-12) {
      best = val;
      best_model = model;
      stale = 0;
    } else if (++stale >= cfg.rl_patience) {
      break;
    }
  }
  return best_model;
}

// ---------------------------------------------------------------------------
// experiment driver
// ---------------------------------------------------------------------------

namespace {

std::vector<NamedParam<float>> prefixed(const std::string& prefix,
                                        std::vector<NamedParam<float>> params) {
  for (auto& [name, mat] : params) name = prefix + name;
  return params;
}

std::vector<NamedParam<float>> vse_sentence_entries(VseModels& vse) {
  auto entries = prefixed("image.", vse.sentence.image.params());
  for (auto& e : prefixed("sentence.", vse.sentence.sentence.params())) entries.push_back(e);
  return entries;
}

std::vector<NamedParam<float>> vse_concept_entries(VseModels& vse) {
  auto entries = prefixed("image.", vse.concepts.image.params());
  for (auto& e : prefixed("concept.", vse.concepts.concepts.params())) entries.push_back(e);
  return entries;
}

}  // namespace

void save_vse_checkpoints(const std::string& dir, VseModels& vse) {
  auto to_const = [](const std::vector<NamedParam<float>>& in) {
    std::vector<std::pair<std::string, const Mat<float>*>> out;
    for (const auto& [name, mat] : in) out.emplace_back(name, mat);
    return out;
  };
  save_checkpoint(dir + "/vse_sentence.ckpt", to_const(vse_sentence_entries(vse)));
  save_checkpoint(dir + "/vse_concept.ckpt", to_const(vse_concept_entries(vse)));
}

void save_pretrained(const std::string& dir, PretrainedBundle& bundle) {
  save_model(dir + "/lm.ckpt", bundle.lm);
  save_vse_checkpoints(dir, bundle.vse);
  save_model(dir + "/captioner_pretrain.ckpt", bundle.captioner);
}

PretrainedBundle load_pretrained(const std::string& dir, const ExperimentConfig& cfg,
                                 const PreparedData& data) {
  const int feature_dim = static_cast<int>(data.train_features.front().cols());
  Rng dummy(0);
  PretrainedBundle b{
      Captioner<float>::init(feature_dim, cfg.embed_dim, cfg.hidden_dim, data.vocab.size(), dummy),
      LanguageModel<float>::init(cfg.embed_dim, cfg.hidden_dim, data.vocab.size(), dummy),
      VseModels{{ImageEncoder<float>::init(feature_dim, cfg.vse_sent_joint_dim, dummy),
                 SentenceEncoder<float>::init(data.vocab.size(), cfg.vse_sent_embed_dim,
                                              cfg.vse_sent_joint_dim, cfg.vse_sent_joint_dim, dummy)},
                {ImageEncoder<float>::init(feature_dim, cfg.vse_concept_joint_dim, dummy),
                 ConceptEmbedding<float>::init(data.concepts.size(), cfg.vse_concept_joint_dim, dummy)}}};
  load_model(dir + "/lm.ckpt", b.lm);
  load_checkpoint_into(dir + "/vse_sentence.ckpt", vse_sentence_entries(b.vse));
  load_checkpoint_into(dir + "/vse_concept.ckpt", vse_concept_entries(b.vse));
  load_model(dir + "/captioner_pretrain.ckpt", b.captioner);
  return b;
}

std::string render_comparison(const std::vector<ModeResult>& modes) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-22s %8s %8s %8s %8s %8s %9s %9s\n", "mode", "bleu1", "bleu2",
                "bleu3", "bleu4", "cider", "r_flc", "r_srlv");
  out << line;
  for (const auto& m : modes) {
    std::snprintf(line, sizeof(line), "%-22s %8.4f %8.4f %8.4f %8.4f %8.4f %9.4f %9.4f\n",
                  m.mode.c_str(), m.test_report.bleu_n[0], m.test_report.bleu_n[1],
                  m.test_report.bleu_n[2], m.test_report.bleu_n[3], m.test_report.cider,
                  m.test_report.mean_r_flc, m.test_report.mean_r_srlv);
    out << line;
  }
  return out.str();
}

void write_comparison(const std::string& dir, const std::vector<ModeResult>& modes) {
  {
    std::ofstream out(dir + "/comparison.txt", std::ios::trunc);
    if (!out) throw std::runtime_error("write_comparison: cannot open " + dir + "/comparison.txt");
    out << render_comparison(modes);
  }
  std::ofstream tsv(dir + "/comparison.tsv", std::ios::trunc);
  if (!tsv) throw std::runtime_error("write_comparison: cannot open " + dir + "/comparison.tsv");
  char buf[64];
  tsv << "mode\tbleu1\tbleu2\tbleu3\tbleu4\tcider\tr_flc\tr_srlv\n";
  for (const auto& m : modes) {
    tsv << m.mode;
    for (double v : {m.test_report.bleu_n[0], m.test_report.bleu_n[1], m.test_report.bleu_n[2],
                     m.test_report.bleu_n[3], m.test_report.cider, m.test_report.mean_r_flc,
                     m.test_report.mean_r_srlv}) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      tsv << '\t' << buf;
    }
    tsv << '\n';
  }
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::vector<std::string>& modes,
                                const std::string& out_dir) {
  if (modes.empty()) throw std::invalid_argument("run_experiment: no modes requested");
  std::vector<ModeSpec> specs;
  for (const auto& m : modes) specs.push_back(ModeSpec::parse(m));

  namespace fs = std::filesystem;
  const bool persist = !out_dir.empty();
  if (persist) fs::create_directories(out_dir);

  PreparedData data = prepare_data(cfg);
  PretrainedBundle bundle{Captioner<float>{}, LanguageModel<float>{}, VseModels{}};

  TrainLog pretrain_log;
  bundle.lm = pretrain_lm(cfg, data, &pretrain_log);
  bundle.vse = pretrain_vse(cfg, data, &pretrain_log);
  bundle.captioner = pretrain_captioner(cfg, data, &pretrain_log);
  if (persist) {
    pretrain_log.save(out_dir + "/pretrain_log.txt");
    save_model(out_dir + "/lm.ckpt", bundle.lm);
    save_vse_checkpoints(out_dir, bundle.vse);
    save_model(out_dir + "/captioner_pretrain.ckpt", bundle.captioner);
    data.concepts.save(out_dir + "/concept_vocab.txt");
  }

  RewardScorers<float> scorers = make_scorers(bundle, data, cfg.lambda);
  ExperimentResult result;
  for (const auto& spec : specs) {
    TrainLog mode_log;
    Captioner<float> final_model =
        spec.kind == TrainMode::kBaseline ? bundle.captioner : train_ssr(cfg, bundle, data, spec, &mode_log);
    EvalReport report = evaluate_corpus(final_model, scorers, data.data.splits.test, data.vocab,
                                        cfg.beam, cfg.max_len_target);
    if (persist) {
      std::string mode_dir = out_dir + "/mode_" + spec.name;
      for (auto& c : mode_dir)
        if (c == ':') c = '_';
      fs::create_directories(mode_dir);
      mode_log.save(mode_dir + "/train_log.txt");
      save_model(mode_dir + "/captioner.ckpt", final_model);
      write_report(mode_dir + "/report.txt", report);
      write_item_scores(mode_dir + "/items.tsv", report);
    }
    result.modes.push_back({spec.name, std::move(report)});
  }
  if (persist) write_comparison(out_dir, result.modes);
  return result;
}

}  // namespace ssr
