#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ssr/adam.hpp"
#include "ssr/decoding.hpp"
#include "ssr/trainer.hpp"

using ssr::Caption;
using ssr::ExperimentConfig;
using ssr::KeyValueConfig;
using ssr::Mat;
using ssr::ModeSpec;
using ssr::Rng;

namespace {

namespace fs = std::filesystem;

struct TempDataset {
  fs::path dir;

  TempDataset(int n_train, int n_val, int n_test, const ssr::NoiseSpec& noise, std::uint64_t seed,
              int lm_sentences = 400) {
    dir = fs::temp_directory_path() / ("ssr_trainer_" + std::to_string(seed) + "_" +
                                       std::to_string(n_train));
    fs::create_directories(dir);
    ssr::WorldConfig wc;
    wc.n_objects = 8;
    wc.n_scenes = 3;
    wc.n_verbs = 5;
    wc.feature_dim = 16;
    ssr::MicroWorld world = ssr::generate_world(wc, seed);
    auto splits = ssr::generate_dataset(world, noise, n_train, n_val, n_test, seed + 1);
    ssr::write_dataset(dir.string(), world, splits);
    std::ofstream lm(dir / "lm_corpus.txt");
    for (const auto& sent : ssr::sample_clean_target_corpus(world, lm_sentences, seed + 2)) {
      for (std::size_t i = 0; i < sent.size(); ++i) lm << (i ? " " : "") << sent[i];
      lm << '\n';
    }
  }
  ~TempDataset() { fs::remove_all(dir); }
};

ExperimentConfig tiny_config(const std::string& data_dir, std::uint64_t seed = 7) {
  ExperimentConfig cfg;
  cfg.data_dir = data_dir;
  cfg.hidden_dim = 32;
  cfg.embed_dim = 24;
  cfg.lr_captioner = 2e-3;
  cfg.lr_lm = 2e-3;
  cfg.lr_vse = 1e-3;
  cfg.vse_sent_embed_dim = 16;
  cfg.vse_sent_joint_dim = 16;
  cfg.vse_concept_joint_dim = 12;
  cfg.vocab_threshold = 0;
  cfg.batch_pretrain = 32;
  cfg.batch_rl = 32;
  cfg.lm_epochs = 6;
  cfg.captioner_epochs = 8;
  cfg.vse_epochs = 8;
  cfg.rl_epochs = 2;
  cfg.beam = 3;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("config: parsing, overrides, unknown keys") {
  auto kv = KeyValueConfig::from_string("# comment\nhidden_dim = 48\nalpha= 0.25\nmode = ssr\n");
  kv.set("alpha", "0.5");  // override wins
  ExperimentConfig cfg = ExperimentConfig::from_config(kv);
  CHECK(cfg.hidden_dim == 48);
  CHECK(cfg.alpha == 0.5);
  CHECK(cfg.beta == 0.15);  // untouched default

  auto bad = KeyValueConfig::from_string("no_such_key = 3\n");
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_config(bad), doctest::Contains("no_such_key"),
                       std::runtime_error);
  CHECK_THROWS_AS(KeyValueConfig::from_string("just a line\n"), std::runtime_error);
  CHECK_THROWS_AS(ExperimentConfig::from_config(KeyValueConfig::from_string("dropout = 1.5\n")),
                  std::runtime_error);

  // round-trip through the writer
  ExperimentConfig back = ExperimentConfig::from_config(cfg.to_config());
  CHECK(back.hidden_dim == cfg.hidden_dim);
  CHECK(back.alpha == cfg.alpha);
  CHECK(back.lr_rl == cfg.lr_rl);
}

TEST_CASE("mode parsing covers the ablation ladder") {
  CHECK(ModeSpec::parse("baseline").kind == ssr::TrainMode::kBaseline);
  CHECK(ModeSpec::parse("baseline_plus").kind == ssr::TrainMode::kBaselinePlus);
  CHECK(ModeSpec::parse("ssr").rewards.crlv);
  CHECK_FALSE(ModeSpec::parse("ablation:none").rewards.flc);
  CHECK(ModeSpec::parse("ablation:flc").rewards.flc);
  CHECK_FALSE(ModeSpec::parse("ablation:flc").rewards.srlv);
  CHECK(ModeSpec::parse("ablation:flc_srlv").rewards.srlv);
  CHECK_FALSE(ModeSpec::parse("ablation:flc_srlv").rewards.crlv);
  CHECK_THROWS_AS(ModeSpec::parse("nonsense"), std::runtime_error);
}

TEST_CASE("prepare_data wires vocabulary, concepts and the mono-lingual corpus") {
  TempDataset data(120, 20, 20, ssr::NoiseSpec{}, 31);
  ExperimentConfig cfg = tiny_config(data.dir.string());
  ssr::PreparedData prep = prepare_data(cfg);
  CHECK(prep.train_captions.size() == 120);
  CHECK(prep.vocab.size() > ssr::Vocabulary::kNumReserved);
  CHECK(prep.concepts.size() > 0);
  CHECK(prep.lm_corpus.size() == 400);

  cfg.lm_corpus = "pseudo";
  ssr::PreparedData prep2 = prepare_data(cfg);
  CHECK(prep2.lm_corpus.size() == 120);

  cfg.data_dir = (data.dir / "missing").string();
  CHECK_THROWS_AS(prepare_data(cfg), std::runtime_error);
}

TEST_CASE("pretrain_lm: loss decreases and grammatical sentences beat shuffled ones") {
  TempDataset data(150, 20, 20, ssr::NoiseSpec{}, 43, /*lm_sentences=*/800);
  ExperimentConfig cfg = tiny_config(data.dir.string(), 43);
  cfg.lm_epochs = 25;
  cfg.batch_pretrain = 16;
  ssr::PreparedData prep = prepare_data(cfg);
  ssr::TrainLog log;
  auto lm = pretrain_lm(cfg, prep, &log);
  REQUIRE(log.lines.size() >= 3);

  // training loss strictly decreases over the first three epochs
  auto loss_of = [](const std::string& line) {
    const auto at = line.find("train_loss ");
    return std::stod(line.substr(at + 11));
  };
  CHECK(loss_of(log.lines[1]) < loss_of(log.lines[0]));
  CHECK(loss_of(log.lines[2]) < loss_of(log.lines[1]));

  // separation: held-out grammatical sentences score higher than shuffles
  ssr::MicroWorld world = ssr::generate_world(
      []() {
        ssr::WorldConfig wc;
        wc.n_objects = 8;
        wc.n_scenes = 3;
        wc.n_verbs = 5;
        wc.feature_dim = 16;
        return wc;
      }(),
      43);
  auto heldout = ssr::sample_clean_target_corpus(world, 40, 999);
  Rng shuffle_rng(5);
  int wins = 0, pairs = 0;
  for (const auto& sent : heldout) {
    if (sent.size() < 2) continue;
    std::vector<std::string> shuffled = sent;
    do {
      shuffle_rng.shuffle(shuffled);
    } while (shuffled == sent);
    Caption good = Caption::from_tokens(prep.vocab, sent);
    Caption bad = Caption::from_tokens(prep.vocab, shuffled);
    wins += ssr::fluency_reward(lm, good) > ssr::fluency_reward(lm, bad);
    ++pairs;
  }
  CHECK(pairs >= 30);
  CHECK(static_cast<double>(wins) / pairs > 0.85);
}

TEST_CASE("pretrain_captioner: deterministic under seed, learns clean data") {
  TempDataset data(400, 40, 40, ssr::NoiseSpec{0.0, 0.0, 1.0 / 3, 1.0 / 3, 1.0 / 3}, 57);
  ExperimentConfig cfg = tiny_config(data.dir.string(), 57);
  cfg.hidden_dim = 48;
  cfg.embed_dim = 32;
  cfg.batch_pretrain = 16;
  cfg.captioner_epochs = 150;
  ssr::PreparedData prep = prepare_data(cfg);
  auto cap1 = pretrain_captioner(cfg, prep, nullptr);
  auto cap2 = pretrain_captioner(cfg, prep, nullptr);
  CHECK((cap1.embed.array() == cap2.embed.array()).all());
  CHECK((cap1.out_w.array() == cap2.out_w.array()).all());

  // clean-pair control: greedy decodes recover most reference tokens
  long matched = 0, total = 0;
  for (const auto& pair : prep.data.splits.test) {
    Mat<float> f = pair.image.feature;
    auto decoded = greedy_decode(cap1, f, cfg.max_len_target);
    const auto hyp = decoded.caption.to_tokens(prep.vocab);
    std::vector<std::string> ref = pair.clean_tokens;
    for (const auto& tok : ref) {
      total += 1;
      if (std::find(hyp.begin(), hyp.end(), tok) != hyp.end()) ++matched;
    }
  }
  CHECK(static_cast<double>(matched) / static_cast<double>(total) >= 0.8);
}

TEST_CASE("train_ssr: frozen components stay bit-identical; ablation(none) is continued xent") {
  TempDataset data(60, 12, 12, ssr::NoiseSpec{}, 71);
  ExperimentConfig cfg = tiny_config(data.dir.string(), 71);
  cfg.lm_epochs = 3;
  cfg.captioner_epochs = 3;
  cfg.vse_epochs = 3;
  cfg.rl_epochs = 1;
  ssr::PreparedData prep = prepare_data(cfg);
  ssr::PretrainedBundle bundle{pretrain_captioner(cfg, prep), pretrain_lm(cfg, prep),
                               pretrain_vse(cfg, prep)};
  const Mat<float> lm_before = bundle.lm.embed;
  const Mat<float> vse_before = bundle.vse.sentence.image.w;
  const Mat<float> concept_before = bundle.vse.concepts.concepts.table;

  auto after = train_ssr(cfg, bundle, prep, ModeSpec::parse("ssr"), nullptr);
  CHECK((bundle.lm.embed.array() == lm_before.array()).all());
  CHECK((bundle.vse.sentence.image.w.array() == vse_before.array()).all());
  CHECK((bundle.vse.concepts.concepts.table.array() == concept_before.array()).all());
  CHECK((after.embed.array() != bundle.captioner.embed.array()).any());  // parameters moved

  auto xent_only = train_ssr(cfg, bundle, prep, ModeSpec::parse("ablation:none"), nullptr);
  (void)xent_only;

  CHECK_THROWS_AS(train_ssr(cfg, bundle, prep, ModeSpec::parse("baseline"), nullptr),
                  std::invalid_argument);
}

TEST_CASE("policy gradient sign: hand-set advantage moves the sampled log-prob") {
  Rng rng(83);
  auto model = ssr::Captioner<double>::init(4, 8, 8, 9, rng);
  Mat<double> feature(1, 4);
  for (int i = 0; i < 4; ++i) feature(0, i) = rng.uniform(-1, 1);
  Caption sampled = Caption::from_ids({5, 7});

  for (double advantage : {1.0, -1.0}) {
    auto m = model;
    ssr::RewardBundle rs, rb;
    rs.r_flc = advantage;
    rb.r_flc = 0.0;
    auto total_log_prob = [&]() {
      double s = 0;
      for (double t : caption_log_probs_value(m, feature, sampled)) s += t;
      return s;
    };
    const double before = total_log_prob();
    ssr::Tape<double> tape;
    auto vars = bind(tape, m, true);
    std::vector<ssr::SelfCriticalItem<double>> batch = {{&feature, &sampled, &rs, &rb}};
    auto loss = flc_selfcritical_loss(vars, batch);
    tape.backward(loss);
    std::vector<Mat<double>> grads;
    std::vector<Mat<double>*> params;
    auto named = m.params();
    auto ordered = vars.ordered();
    for (std::size_t i = 0; i < named.size(); ++i) {
      params.push_back(named[i].second);
      grads.push_back(ordered[i].grad());
    }
    ssr::AdamState<double> opt(1e-3);
    adam_step(params, opt, grads);
    const double after = total_log_prob();
    if (advantage > 0) {
      CHECK(after > before);
    } else {
      CHECK(after < before);
    }
  }
}

TEST_CASE("run_experiment: shared pretraining, reports on disk, bit-exact reruns") {
  TempDataset data(80, 16, 16, ssr::NoiseSpec{}, 91);
  ExperimentConfig cfg = tiny_config(data.dir.string(), 91);
  cfg.lm_epochs = 3;
  cfg.captioner_epochs = 4;
  cfg.vse_epochs = 3;
  cfg.rl_epochs = 1;

  const fs::path out1 = fs::temp_directory_path() / "ssr_run_a";
  const fs::path out2 = fs::temp_directory_path() / "ssr_run_b";
  fs::remove_all(out1);
  fs::remove_all(out2);
  auto r1 = run_experiment(cfg, {"baseline", "ssr"}, out1.string());
  auto r2 = run_experiment(cfg, {"baseline", "ssr"}, out2.string());
  REQUIRE(r1.modes.size() == 2);
  CHECK(r1.modes[0].mode == "baseline");

  for (std::size_t m = 0; m < r1.modes.size(); ++m) {
    CHECK(r1.modes[m].test_report.cider == r2.modes[m].test_report.cider);
    CHECK(r1.modes[m].test_report.mean_r_flc == r2.modes[m].test_report.mean_r_flc);
    for (int n = 0; n < 4; ++n)
      CHECK(r1.modes[m].test_report.bleu_n[n] == r2.modes[m].test_report.bleu_n[n]);
  }
  for (const char* f : {"lm.ckpt", "vse_sentence.ckpt", "vse_concept.ckpt", "captioner_pretrain.ckpt",
                        "concept_vocab.txt", "comparison.txt", "comparison.tsv", "pretrain_log.txt"})
    CHECK(fs::exists(out1 / f));
  CHECK(fs::exists(out1 / "mode_ssr" / "report.txt"));
  CHECK(fs::exists(out1 / "mode_baseline" / "items.tsv"));

  // the emitted reports byte-match across reruns
  for (const char* rel : {"comparison.tsv", "mode_ssr/report.txt"}) {
    std::ifstream a(out1 / rel), b(out2 / rel);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    CHECK(sa.str() == sb.str());
  }

  // staged save/load round-trips the bundle
  ssr::PreparedData prep = prepare_data(cfg);
  ssr::PretrainedBundle loaded = load_pretrained(out1.string(), cfg, prep);
  auto fresh_lm = pretrain_lm(cfg, prep);
  CHECK((loaded.lm.embed.array() == fresh_lm.embed.array()).all());

  fs::remove_all(out1);
  fs::remove_all(out2);
}
