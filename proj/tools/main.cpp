// Command-line driver for the captioning workbench: dataset generation, the
// training phases, decoding, evaluation, the gradient-check suite and report
// rendering. Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ssr/checkpoint.hpp"
#include "ssr/decoding.hpp"
#include "ssr/gradsuite.hpp"
#include "ssr/trainer.hpp"

namespace fs = std::filesystem;
using namespace ssr;

namespace {

std::string default_out_dir() {
  const char* env = std::getenv("SSR_OUTPUT_DIR");
  return env && *env ? env : "ssr_out";
}

struct CommonOpts {
  std::string config_path;
  std::string data_dir;
  std::string out_dir = default_out_dir();
  long seed = -1;  // -1: keep config value
};

// config file first, then command-line flags override
ExperimentConfig resolve_config(const CommonOpts& opts,
                                const std::vector<std::pair<std::string, std::string>>& extra = {}) {
  KeyValueConfig kv =
      opts.config_path.empty() ? KeyValueConfig{} : KeyValueConfig::from_file(opts.config_path);
  if (!opts.data_dir.empty()) kv.set("data_dir", opts.data_dir);
  if (opts.seed >= 0) kv.set("seed", std::to_string(opts.seed));
  for (const auto& [k, v] : extra) kv.set(k, v);
  return ExperimentConfig::from_config(kv);
}

void add_common(CLI::App* cmd, CommonOpts& opts, bool needs_data) {
  cmd->add_option("--config", opts.config_path, "key = value configuration file");
  auto* data = cmd->add_option("--data", opts.data_dir, "dataset directory");
  cmd->add_option("--out", opts.out_dir, "output directory (default $SSR_OUTPUT_DIR or ./ssr_out)");
  cmd->add_option("--seed", opts.seed, "seed override");
  if (needs_data) data->required();
}

std::vector<std::string> split_csv(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream in(csv);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int run_make_dataset(const CommonOpts& opts, int n_train, int n_val, int n_test, double disfluency,
                     double irrelevancy, int objects, int scenes, int verbs, int feature_dim,
                     int lm_sentences) {
  WorldConfig wc;
  wc.n_objects = objects;
  wc.n_scenes = scenes;
  wc.n_verbs = verbs;
  wc.feature_dim = feature_dim;
  const std::uint64_t seed = opts.seed >= 0 ? static_cast<std::uint64_t>(opts.seed) : 1;
  MicroWorld world = generate_world(wc, seed);
  NoiseSpec noise;
  noise.disfluency_rate = disfluency;
  noise.irrelevancy_rate = irrelevancy;
  DatasetSplits splits = generate_dataset(world, noise, n_train, n_val, n_test, seed ^ 0x5eedULL);

  fs::create_directories(opts.out_dir);
  write_dataset(opts.out_dir, world, splits);
  {
    std::ofstream lm(fs::path(opts.out_dir) / "lm_corpus.txt");
    for (const auto& sent : sample_clean_target_corpus(world, lm_sentences, seed ^ 0xc0deULL)) {
      for (std::size_t i = 0; i < sent.size(); ++i) lm << (i ? " " : "") << sent[i];
      lm << '\n';
    }
  }
  std::printf("dataset: %d train / %d val / %d test pairs, %d concepts, features %d-d -> %s\n",
              n_train, n_val, n_test, world.concept_count(), feature_dim, opts.out_dir.c_str());
  return 0;
}

int run_generate(const CommonOpts& opts, const std::string& ckpt, int image_id, int beam) {
  ExperimentConfig cfg = resolve_config(opts);
  cfg.data_dir = opts.data_dir;
  PreparedData data = prepare_data(cfg);

  const PseudoPair* found = nullptr;
  for (const auto* split : {&data.data.splits.train, &data.data.splits.val, &data.data.splits.test})
    for (const auto& pair : *split)
      if (pair.image.id == image_id) found = &pair;
  if (!found) throw std::runtime_error("image id " + std::to_string(image_id) + " not in dataset");

  const int feature_dim = static_cast<int>(found->image.feature.cols());
  Rng dummy(0);
  auto model = Captioner<float>::init(feature_dim, cfg.embed_dim, cfg.hidden_dim, data.vocab.size(), dummy);
  load_model(ckpt, model);
  DecodeResult result = beam_search(model, found->image.feature, beam, cfg.max_len_target);
  const auto tokens = result.caption.to_tokens(data.vocab);
  for (std::size_t i = 0; i < tokens.size(); ++i) std::printf("%s%s", i ? " " : "", tokens[i].c_str());
  std::printf("\n");
  return 0;
}

int run_evaluate(const CommonOpts& opts, const std::string& ckpt, const std::string& run_dir,
                 const std::string& split_name) {
  ExperimentConfig cfg = resolve_config(opts);
  cfg.data_dir = opts.data_dir;
  PreparedData data = prepare_data(cfg);
  PretrainedBundle bundle = load_pretrained(run_dir, cfg, data);
  if (!ckpt.empty()) load_model(ckpt, bundle.captioner);

  const std::vector<PseudoPair>* split = &data.data.splits.test;
  if (split_name == "val") split = &data.data.splits.val;
  else if (split_name != "test") throw std::runtime_error("--split must be val or test");

  RewardScorers<float> scorers = make_scorers(bundle, data, cfg.lambda);
  EvalReport report = evaluate_corpus(bundle.captioner, scorers, *split, data.vocab, cfg.beam,
                                      cfg.max_len_target);
  fs::create_directories(opts.out_dir);
  write_report((fs::path(opts.out_dir) / "report.txt").string(), report);
  write_item_scores((fs::path(opts.out_dir) / "items.tsv").string(), report);
  std::printf("bleu1 %.4f bleu2 %.4f bleu3 %.4f bleu4 %.4f cider %.4f r_flc %.4f r_srlv %.4f\n",
              report.bleu_n[0], report.bleu_n[1], report.bleu_n[2], report.bleu_n[3], report.cider,
              report.mean_r_flc, report.mean_r_srlv);
  return 0;
}

int run_gradcheck() {
  const auto results = run_gradient_suite();
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-44s max_rel_error %.3e %s\n", r.name.c_str(), r.max_rel_error,
                r.max_rel_error < 1e-4 ? "ok" : "FAIL");
    ok = ok && r.max_rel_error < 1e-4;
  }
  std::printf("%s\n", ok ? "gradient suite: all checks passed" : "gradient suite: FAILURES");
  return ok ? 0 : 2;
}

int run_report(const std::string& run_dir) {
  std::vector<ModeResult> modes;
  std::vector<std::string> missing;
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    if (!entry.is_directory()) continue;
    const std::string name = entry.path().filename().string();
    if (name.rfind("mode_", 0) != 0) continue;
    const fs::path report = entry.path() / "report.txt";
    if (!fs::exists(report)) {
      missing.push_back(name);
      continue;
    }
    ModeResult m;
    m.mode = name.substr(5);
    m.test_report = read_report(report.string());
    modes.push_back(std::move(m));
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw std::runtime_error("missing mode outputs: " + list);
  }
  if (modes.empty()) throw std::runtime_error("no mode_* outputs under " + run_dir);
  std::sort(modes.begin(), modes.end(),
            [](const ModeResult& a, const ModeResult& b) { return a.mode < b.mode; });
  const std::string table = render_comparison(modes);
  std::fputs(table.c_str(), stdout);
  write_comparison(run_dir, modes);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ssr: unpaired cross-lingual captioning with self-supervised rewards"};
  app.require_subcommand(1);

  // make-dataset
  CommonOpts mk_opts;
  int mk_train = 2000, mk_val = 200, mk_test = 200;
  double mk_disfluency = 0.3, mk_irrelevancy = 0.3;
  int mk_objects = 20, mk_scenes = 7, mk_verbs = 13, mk_feature = 32, mk_lm = 2000;
  auto* mk = app.add_subcommand("make-dataset", "generate a micro-world dataset");
  add_common(mk, mk_opts, false);
  mk->add_option("--n-train", mk_train, "training pairs");
  mk->add_option("--n-val", mk_val, "validation pairs");
  mk->add_option("--n-test", mk_test, "test pairs");
  mk->add_option("--noise-disfluency", mk_disfluency, "disfluency rate in [0,1]");
  mk->add_option("--noise-irrelevancy", mk_irrelevancy, "irrelevancy rate in [0,1]");
  mk->add_option("--objects", mk_objects, "object concepts");
  mk->add_option("--scenes", mk_scenes, "scene concepts");
  mk->add_option("--verbs", mk_verbs, "verb concepts");
  mk->add_option("--feature-dim", mk_feature, "image feature dimension");
  mk->add_option("--lm-sentences", mk_lm, "clean mono-lingual corpus size");

  // train-lm
  CommonOpts lm_opts;
  auto* lm_cmd = app.add_subcommand("train-lm", "pretrain the target language model");
  add_common(lm_cmd, lm_opts, true);

  // train-vse
  CommonOpts vse_opts;
  auto* vse_cmd = app.add_subcommand("train-vse", "pretrain both visual-semantic matching models");
  add_common(vse_cmd, vse_opts, true);

  // pretrain (captioner)
  CommonOpts cap_opts;
  auto* cap_cmd = app.add_subcommand("pretrain", "cross-entropy pretrain the captioner");
  add_common(cap_cmd, cap_opts, true);

  // train-ssr
  CommonOpts ssr_opts;
  std::string ssr_modes = "";
  bool ssr_full = false;
  auto* ssr_cmd = app.add_subcommand("train-ssr", "reinforcement training per mode");
  add_common(ssr_cmd, ssr_opts, true);
  ssr_cmd->add_option("--modes", ssr_modes, "comma list: baseline,baseline_plus,ssr,ablation:...");
  ssr_cmd->add_flag("--full", ssr_full, "run all pretraining phases first (fresh run directory)");

  // generate
  CommonOpts gen_opts;
  std::string gen_ckpt;
  int gen_image = 0, gen_beam = 10;
  auto* gen_cmd = app.add_subcommand("generate", "decode one caption");
  add_common(gen_cmd, gen_opts, true);
  gen_cmd->add_option("--ckpt", gen_ckpt, "captioner checkpoint")->required();
  gen_cmd->add_option("--image-id", gen_image, "image id")->required();
  gen_cmd->add_option("--beam", gen_beam, "beam size");

  // evaluate
  CommonOpts eval_opts;
  std::string eval_ckpt, eval_run, eval_split = "test";
  auto* eval_cmd = app.add_subcommand("evaluate", "score a checkpoint on a split");
  add_common(eval_cmd, eval_opts, true);
  eval_cmd->add_option("--run", eval_run, "run directory with pretrained scorers")->required();
  eval_cmd->add_option("--ckpt", eval_ckpt, "captioner checkpoint (default: pretrained baseline)");
  eval_cmd->add_option("--split", eval_split, "val or test");

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");

  // report
  std::string report_run;
  auto* report_cmd = app.add_subcommand("report", "render the mode comparison table");
  report_cmd->add_option("--run", report_run, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (mk->parsed())
      return run_make_dataset(mk_opts, mk_train, mk_val, mk_test, mk_disfluency, mk_irrelevancy,
                              mk_objects, mk_scenes, mk_verbs, mk_feature, mk_lm);
    if (lm_cmd->parsed()) {
      ExperimentConfig cfg = resolve_config(lm_opts);
      cfg.data_dir = lm_opts.data_dir;
      PreparedData data = prepare_data(cfg);
      TrainLog log;
      auto model = pretrain_lm(cfg, data, &log);
      fs::create_directories(lm_opts.out_dir);
      save_model((fs::path(lm_opts.out_dir) / "lm.ckpt").string(), model);
      log.save((fs::path(lm_opts.out_dir) / "lm_log.txt").string());
      std::printf("saved %s/lm.ckpt\n", lm_opts.out_dir.c_str());
      return 0;
    }
    if (vse_cmd->parsed()) {
      ExperimentConfig cfg = resolve_config(vse_opts);
      cfg.data_dir = vse_opts.data_dir;
      PreparedData data = prepare_data(cfg);
      TrainLog log;
      VseModels models = pretrain_vse(cfg, data, &log);
      fs::create_directories(vse_opts.out_dir);
      save_vse_checkpoints(vse_opts.out_dir, models);
      data.concepts.save((fs::path(vse_opts.out_dir) / "concept_vocab.txt").string());
      log.save((fs::path(vse_opts.out_dir) / "vse_log.txt").string());
      std::printf("saved %s/vse_sentence.ckpt and vse_concept.ckpt\n", vse_opts.out_dir.c_str());
      return 0;
    }
    if (cap_cmd->parsed()) {
      ExperimentConfig cfg = resolve_config(cap_opts);
      cfg.data_dir = cap_opts.data_dir;
      PreparedData data = prepare_data(cfg);
      TrainLog log;
      auto model = pretrain_captioner(cfg, data, &log);
      fs::create_directories(cap_opts.out_dir);
      save_model((fs::path(cap_opts.out_dir) / "captioner_pretrain.ckpt").string(), model);
      log.save((fs::path(cap_opts.out_dir) / "captioner_log.txt").string());
      std::printf("saved %s/captioner_pretrain.ckpt\n", cap_opts.out_dir.c_str());
      return 0;
    }
    if (ssr_cmd->parsed()) {
      ExperimentConfig cfg = resolve_config(ssr_opts);
      cfg.data_dir = ssr_opts.data_dir;
      std::vector<std::string> modes = split_csv(ssr_modes.empty() ? cfg.mode : ssr_modes);
      if (ssr_full) {
        ExperimentResult result = run_experiment(cfg, modes, ssr_opts.out_dir);
        std::fputs(render_comparison(result.modes).c_str(), stdout);
        return 0;
      }
      PreparedData data = prepare_data(cfg);
      PretrainedBundle bundle = load_pretrained(ssr_opts.out_dir, cfg, data);
      RewardScorers<float> scorers = make_scorers(bundle, data, cfg.lambda);
      std::vector<ModeResult> results;
      for (const auto& mode_name : modes) {
        ModeSpec spec = ModeSpec::parse(mode_name);
        TrainLog log;
        Captioner<float> final_model = spec.kind == TrainMode::kBaseline
                                           ? bundle.captioner
                                           : train_ssr(cfg, bundle, data, spec, &log);
        EvalReport report = evaluate_corpus(final_model, scorers, data.data.splits.test, data.vocab,
                                            cfg.beam, cfg.max_len_target);
        std::string mode_dir = (fs::path(ssr_opts.out_dir) / ("mode_" + spec.name)).string();
        for (auto& c : mode_dir)
          if (c == ':') c = '_';
        fs::create_directories(mode_dir);
        log.save(mode_dir + "/train_log.txt");
        save_model(mode_dir + "/captioner.ckpt", final_model);
        write_report(mode_dir + "/report.txt", report);
        write_item_scores(mode_dir + "/items.tsv", report);
        results.push_back({spec.name, std::move(report)});
      }
      write_comparison(ssr_opts.out_dir, results);
      std::fputs(render_comparison(results).c_str(), stdout);
      return 0;
    }
    if (gen_cmd->parsed()) return run_generate(gen_opts, gen_ckpt, gen_image, gen_beam);
    if (eval_cmd->parsed()) return run_evaluate(eval_opts, eval_ckpt, eval_run, eval_split);
    if (grad_cmd->parsed()) return run_gradcheck();
    if (report_cmd->parsed()) return run_report(report_run);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
