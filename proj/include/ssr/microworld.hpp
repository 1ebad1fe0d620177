// Synthetic benchmark domain: concept-composed image features, a toy
// grammar over a pivot language, and a noise-parameterized pseudo-translator
// producing the target-language training pairs.

#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "ssr/autodiff.hpp"
#include "ssr/rng.hpp"
#include "ssr/vocab.hpp"

namespace ssr {

enum class PosTag { kFunction, kObject, kScene, kVerb };

std::string to_string(PosTag tag);
PosTag pos_tag_from_string(const std::string& s);

struct LexEntry {
  std::string pivot;
  std::string target;
  PosTag tag = PosTag::kFunction;
};

struct WorldConfig {
  int n_objects = 20;
  int n_scenes = 7;
  int n_verbs = 13;
  int feature_dim = 32;
  double feature_noise = 0.1;  // stddev of isotropic noise x prototype norm (prototypes are unit)
  int max_len_pivot = 20;
  int max_len_target = 16;
};

// One item of a grammar template: either a fixed function word or a slot to
// be filled with a concept of the given class.
struct TemplateItem {
  bool is_slot = false;
  PosTag slot_tag = PosTag::kFunction;  // for slots
  int function_index = -1;              // for fixed words
};
using CaptionTemplate = std::vector<TemplateItem>;

struct MicroWorld {
  WorldConfig config;
  std::uint64_t seed = 0;
  std::vector<LexEntry> concepts;        // objects, then scenes, then verbs
  std::vector<LexEntry> function_words;
  std::vector<CaptionTemplate> templates;
  Mat<float> prototypes;                 // concept_count x feature_dim, unit rows

  std::unordered_map<std::string, int> concept_by_pivot;
  std::unordered_map<std::string, int> concept_by_target;
  std::unordered_map<std::string, std::string> dict_pivot_to_target;  // full lexicon
  std::unordered_map<std::string, PosTag> target_tags;

  int concept_count() const { return static_cast<int>(concepts.size()); }
  const std::vector<int>& concepts_of_class(PosTag tag) const;
  std::vector<std::string> translate(const std::vector<std::string>& pivot_tokens) const;

  std::vector<int> class_objects, class_scenes, class_verbs;  // concept indices per class
};

MicroWorld generate_world(const WorldConfig& config, std::uint64_t seed);

struct ImageRecord {
  int id = 0;
  Mat<float> feature;             // 1 x feature_dim, fixed at generation
  std::vector<int> concept_ids;   // distinct world concept indices, 1..4 of them
};

struct PseudoPair {
  ImageRecord image;
  std::vector<std::string> pivot_tokens;       // d_P
  std::vector<std::string> pseudo_tokens;      // d_T = f_{P->T}(d_P)
  std::vector<std::string> gt_concept_tokens;  // image ground truth, target surface
  std::vector<std::string> clean_tokens;       // reference translation; empty on train split
  bool disfluent = false;
  bool irrelevant = false;
};

struct NoiseSpec {
  double disfluency_rate = 0.3;
  double irrelevancy_rate = 0.3;
  double p_swap = 1.0 / 3;
  double p_drop = 1.0 / 3;
  double p_duplicate = 1.0 / 3;

  void validate() const;
};

// Dictionary translation, then with probability disfluency_rate one
// swap/drop/duplicate op, then with probability irrelevancy_rate one concept
// token substituted by a random same-class distractor. Flags report what was
// applied.
std::vector<std::string> pseudo_translate(const std::vector<std::string>& pivot_tokens,
                                          const MicroWorld& world, const NoiseSpec& noise, Rng& rng,
                                          bool* disfluent_out = nullptr, bool* irrelevant_out = nullptr);

struct DatasetSplits {
  std::vector<PseudoPair> train, val, test;
};

DatasetSplits generate_dataset(const MicroWorld& world, const NoiseSpec& noise, int n_train, int n_val,
                               int n_test, std::uint64_t seed);

// ---------------------------------------------------------------------------
// part-of-speech tag table (grammar slot tags, or supplied for external data)
// ---------------------------------------------------------------------------

struct TagTable {
  std::unordered_map<std::string, PosTag> target_tags;
  int feature_dim = 0;

  static TagTable from_world(const MicroWorld& world);
};

// Ordered nouns and verbs of a target-language caption. Throws on a token
// absent from the table (external mode with incomplete tags).
std::vector<std::string> extract_concepts(const std::vector<std::string>& tokens, const TagTable& tags);

// ---------------------------------------------------------------------------
// file formats
// ---------------------------------------------------------------------------

// One pair per line, tab-separated fields: image_id, feature floats, pivot
// tokens, pseudo-target tokens, ground-truth concept tokens (target surface),
// noise flags "d i", optional clean reference. Token fields are
// space-separated; features rendered with enough digits to round-trip
// float32 exactly.
void write_pairs(const std::string& path, const std::vector<PseudoPair>& pairs);
std::vector<PseudoPair> read_pairs(const std::string& path);

void write_lexicon(const std::string& path, const MicroWorld& world);
TagTable read_lexicon(const std::string& path);

// Writes train/val/test plus the lexicon under dir.
void write_dataset(const std::string& dir, const MicroWorld& world, const DatasetSplits& splits);

struct LoadedDataset {
  DatasetSplits splits;
  TagTable tags;
};
LoadedDataset read_dataset(const std::string& dir);

// Vocabulary over the training pseudo captions (threshold per spec rule).
Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpus, long threshold);

// Ground-truth concept tokens of an image, in target surface form.
std::vector<std::string> image_concept_tokens(const MicroWorld& world, const ImageRecord& image);

// Fresh clean target-language sentences (mono-lingual corpus for the
// language model), drawn from the same grammar.
std::vector<std::vector<std::string>> sample_clean_target_corpus(const MicroWorld& world, int count,
                                                                 std::uint64_t seed);

}  // namespace ssr
