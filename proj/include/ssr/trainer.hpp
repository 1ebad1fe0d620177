// End-to-end training orchestration: language-model, VSE and captioner
// pretraining, the self-critical reinforcement loop, checkpointing, and the
// experiment driver with its mode/ablation controls.

#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ssr/config.hpp"
#include "ssr/evaluate.hpp"
#include "ssr/microworld.hpp"
#include "ssr/objectives.hpp"
#include "ssr/rewards.hpp"
#include "ssr/seq_models.hpp"
#include "ssr/vocab.hpp"
#include "ssr/vse.hpp"

namespace ssr {

// Reward subset of a training mode, mirroring the ablation rows
// none -> +flc -> +flc+srlv -> +flc+srlv+crlv.
struct RewardSet {
  bool flc = false;
  bool srlv = false;
  bool crlv = false;
};

enum class TrainMode { kBaseline, kBaselinePlus, kSsr, kAblation };

struct ModeSpec {
  TrainMode kind = TrainMode::kSsr;
  RewardSet rewards{true, true, true};  // for kAblation / kSsr
  std::string name;                     // canonical spelling for reports

  static ModeSpec parse(const std::string& text);
};

struct ExperimentConfig {
  std::string data_dir;

  int hidden_dim = 64;
  int embed_dim = 64;
  int vse_sent_embed_dim = 64;
  int vse_sent_joint_dim = 64;
  int vse_concept_joint_dim = 32;

  long vocab_threshold = 4;
  int max_len_target = 16;
  int beam = 10;

  double alpha = 0.05;
  double beta = 0.15;
  double gamma = 1.0;
  double lambda = 0.5;
  double margin = 0.2;

  double lr_captioner = 4e-4;
  double lr_lm = 2e-4;
  double lr_vse = 2e-4;
  double lr_rl = 4e-5;
  int batch_pretrain = 128;
  int batch_rl = 256;
  double dropout = 0.3;
  double grad_clip = 5.0;

  int lm_epochs = 20;
  int captioner_epochs = 25;
  int vse_epochs = 40;
  int vse_patience = 3;
  int rl_epochs = 30;
  int rl_patience = 3;
  int mc_samples = 1;  // Monte-Carlo sentences per image per batch
  bool rl_length_norm = false;

  std::string lm_corpus = "clean";  // clean (lm_corpus.txt) | pseudo (training captions)
  std::uint64_t seed = 1;
  std::string mode = "ssr";

  static const std::set<std::string>& known_keys();
  static ExperimentConfig from_config(const KeyValueConfig& kv);
  KeyValueConfig to_config() const;
};

// Dataset plus everything derived from it that training needs.
struct PreparedData {
  LoadedDataset data;
  Vocabulary vocab;
  ConceptVocabulary concepts;
  std::vector<Caption> train_captions;  // pseudo captions under vocab, truncated
  std::vector<Mat<float>> train_features;
  std::vector<std::vector<std::string>> lm_corpus;  // per config: clean file or pseudo captions
};

PreparedData prepare_data(const ExperimentConfig& cfg);

struct TrainLog {
  std::vector<std::string> lines;  // one record per epoch

  void add(const std::string& line) { lines.push_back(line); }
  void save(const std::string& path) const;
};

LanguageModel<float> pretrain_lm(const ExperimentConfig& cfg, const PreparedData& data,
                                 TrainLog* log = nullptr);

struct VseModels {
  SentenceMatchModel<float> sentence;
  ConceptMatchModel<float> concepts;
};

VseModels pretrain_vse(const ExperimentConfig& cfg, const PreparedData& data, TrainLog* log = nullptr);

Captioner<float> pretrain_captioner(const ExperimentConfig& cfg, const PreparedData& data,
                                    TrainLog* log = nullptr);

struct PretrainedBundle {
  Captioner<float> captioner;
  LanguageModel<float> lm;
  VseModels vse;
};

// Self-critical reinforcement training of the captioner; every other model
// stays frozen. Returns the parameters of the best validation-CIDEr epoch.
Captioner<float> train_ssr(const ExperimentConfig& cfg, const PretrainedBundle& bundle,
                           const PreparedData& data, const ModeSpec& mode, TrainLog* log = nullptr);

struct ModeResult {
  std::string mode;
  EvalReport test_report;
};

struct ExperimentResult {
  std::vector<ModeResult> modes;
};

// Shared pretraining, then one reinforcement run and test evaluation per
// requested mode; all artifacts land under out_dir when it is non-empty.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::vector<std::string>& modes,
                                const std::string& out_dir);

// Aligned text comparison table over per-mode reports (Table-3-style rows).
std::string render_comparison(const std::vector<ModeResult>& modes);
void write_comparison(const std::string& dir, const std::vector<ModeResult>& modes);

RewardScorers<float> make_scorers(const PretrainedBundle& bundle, const PreparedData& data, double lambda);

// Staged-workflow checkpoint layout: lm.ckpt, vse_sentence.ckpt,
// vse_concept.ckpt and captioner_pretrain.ckpt under one run directory.
void save_pretrained(const std::string& dir, PretrainedBundle& bundle);
void save_vse_checkpoints(const std::string& dir, VseModels& vse);
PretrainedBundle load_pretrained(const std::string& dir, const ExperimentConfig& cfg,
                                 const PreparedData& data);

}  // namespace ssr
