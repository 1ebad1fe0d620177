#include "ssr/microworld.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace ssr {

namespace {

const std::vector<std::string> kObjects = {"cat",   "dog",   "bird",  "horse", "fish",  "car",  "boat",
                                           "tree",  "house", "ball",  "child", "woman", "man",  "table",
                                           "chair", "bike",  "bus",   "flower", "book", "cup"};
const std::vector<std::string> kScenes = {"park", "beach", "road", "room", "field", "lake", "market"};
const std::vector<std::string> kVerbs = {"sits",  "runs",   "jumps", "sleeps", "walks", "stands", "plays",
                                         "swims", "eats",   "drinks", "waits", "looks", "rests"};
const std::vector<std::string> kFunctionWords = {"the", "a", "in", "on", "near", "and", "by"};

std::string syllable_word(Rng& rng) {
  static const std::string consonants = "bdfgklmnprstvz";
  static const std::string vowels = "aeiou";
  const int syllables = 2 + static_cast<int>(rng.below(2));
  std::string w;
  for (int s = 0; s < syllables; ++s) {
    w.push_back(consonants[rng.below(consonants.size())]);
    w.push_back(vowels[rng.below(vowels.size())]);
  }
  return w;
}

std::string fresh_word(Rng& rng, std::set<std::string>& used) {
  for (;;) {
    std::string w = syllable_word(rng);
    if (used.insert(w).second) return w;
  }
}

// Slot items for the fixed template inventory. Function word indices refer
// to kFunctionWords order: the a in on near and by.
CaptionTemplate make_template(const std::string& pattern) {
  CaptionTemplate t;
  std::istringstream in(pattern);
  std::string item;
  while (in >> item) {
    TemplateItem ti;
    if (item == "O" || item == "S" || item == "V") {
      ti.is_slot = true;
      ti.slot_tag = item == "O" ? PosTag::kObject : item == "S" ? PosTag::kScene : PosTag::kVerb;
    } else {
      auto it = std::find(kFunctionWords.begin(), kFunctionWords.end(), item);
      if (it == kFunctionWords.end()) throw std::logic_error("unknown template word " + item);
      ti.function_index = static_cast<int>(it - kFunctionWords.begin());
    }
    t.push_back(ti);
  }
  return t;
}

// Every template carries a distinct (object, verb, scene) slot signature, so
// the reference wording is a function of an image's concept classes.
std::vector<CaptionTemplate> default_templates() {
  const std::vector<std::string> patterns = {
      "the O",
      "the S",
      "the O V",
      "the O in the S",
      "the O and the O",
      "a O V in the S",
      "a O and a O V",
      "the O V and V",
      "the O and the O near the S",
      "the O and the O V on the S",
      "a O V and V by the S",
      "the O V and the O V",
  };
  std::vector<CaptionTemplate> out;
  for (const auto& p : patterns) out.push_back(make_template(p));
  return out;
}

// Least-used concept of a class, excluding concepts already in the sentence;
// ties broken by a seeded draw. Keeps marginals near-uniform within a class.
struct SlotFiller {
  std::vector<long> usage;

  explicit SlotFiller(int concept_count) : usage(static_cast<std::size_t>(concept_count), 0) {}

  int pick(const MicroWorld& world, PosTag cls, const std::vector<int>& exclude, Rng& rng) {
    const auto& pool = world.concepts_of_class(cls);
    std::vector<int> candidates;
    for (int c : pool)
      if (std::find(exclude.begin(), exclude.end(), c) == exclude.end()) candidates.push_back(c);
    if (candidates.empty()) throw std::runtime_error("micro-world: concept inventory too small for template");
    long best = usage[static_cast<std::size_t>(candidates.front())];
    for (int c : candidates) best = std::min(best, usage[static_cast<std::size_t>(c)]);
    std::vector<int> minimal;
    for (int c : candidates)
      if (usage[static_cast<std::size_t>(c)] == best) minimal.push_back(c);
    const int chosen = minimal[rng.below(minimal.size())];
    ++usage[static_cast<std::size_t>(chosen)];
    return chosen;
  }
};

struct DrawnSentence {
  std::vector<std::string> pivot_tokens;
  std::vector<int> concept_ids;
};

DrawnSentence draw_sentence(const MicroWorld& world, SlotFiller& filler, Rng& rng) {
  const CaptionTemplate& tpl = world.templates[rng.below(world.templates.size())];
  DrawnSentence out;
  for (const TemplateItem& item : tpl) {
    if (item.is_slot) {
      const int c = filler.pick(world, item.slot_tag, out.concept_ids, rng);
      out.concept_ids.push_back(c);
      out.pivot_tokens.push_back(world.concepts[static_cast<std::size_t>(c)].pivot);
    } else {
      out.pivot_tokens.push_back(world.function_words[static_cast<std::size_t>(item.function_index)].pivot);
    }
  }
  return out;
}

void truncate_tokens(std::vector<std::string>& tokens, int max_len) {
  if (static_cast<int>(tokens.size()) > max_len) tokens.resize(static_cast<std::size_t>(max_len));
}

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

std::vector<std::string> split_tokens(const std::string& field) {
  std::vector<std::string> out;
  std::istringstream in(field);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

std::string render_float(float v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

}  // namespace

std::string to_string(PosTag tag) {
  switch (tag) {
    case PosTag::kFunction: return "function";
    case PosTag::kObject: return "object";
    case PosTag::kScene: return "scene";
    case PosTag::kVerb: return "verb";
  }
  return "function";
}

PosTag pos_tag_from_string(const std::string& s) {
  if (s == "function") return PosTag::kFunction;
  if (s == "object") return PosTag::kObject;
  if (s == "scene") return PosTag::kScene;
  if (s == "verb") return PosTag::kVerb;
  throw std::runtime_error("unknown part-of-speech tag '" + s + "'");
}

const std::vector<int>& MicroWorld::concepts_of_class(PosTag tag) const {
  switch (tag) {
    case PosTag::kObject: return class_objects;
    case PosTag::kScene: return class_scenes;
    case PosTag::kVerb: return class_verbs;
    default: throw std::logic_error("concepts_of_class: function words are not concepts");
  }
}

std::vector<std::string> MicroWorld::translate(const std::vector<std::string>& pivot_tokens) const {
  std::vector<std::string> out;
  out.reserve(pivot_tokens.size());
  for (const auto& tok : pivot_tokens) {
    auto it = dict_pivot_to_target.find(tok);
    if (it == dict_pivot_to_target.end())
      throw std::runtime_error("translate: pivot token '" + tok + "' not in dictionary");
    out.push_back(it->second);
  }
  return out;
}

MicroWorld generate_world(const WorldConfig& config, std::uint64_t seed) {
  if (config.n_objects < 2 || config.n_scenes < 2 || config.n_verbs < 2)
    throw std::invalid_argument("generate_world: need at least 2 concepts per class");
  if (config.feature_dim < 1) throw std::invalid_argument("generate_world: feature_dim must be positive");

  MicroWorld w;
  w.config = config;
  w.seed = seed;
  Rng word_rng = Rng(seed).child(1);
  Rng proto_rng = Rng(seed).child(2);

  std::set<std::string> used;
  auto pivot_word = [&](const std::vector<std::string>& builtin, int i) {
    if (i < static_cast<int>(builtin.size())) {
      used.insert(builtin[static_cast<std::size_t>(i)]);
      return builtin[static_cast<std::size_t>(i)];
    }
    return fresh_word(word_rng, used);
  };
  for (const auto& f : kFunctionWords) used.insert(f);

  auto add_class = [&](int count, const std::vector<std::string>& builtin, PosTag tag,
                       std::vector<int>& index_list) {
    for (int i = 0; i < count; ++i) {
      LexEntry e;
      e.pivot = pivot_word(builtin, i);
      e.tag = tag;
      index_list.push_back(static_cast<int>(w.concepts.size()));
      w.concepts.push_back(e);
    }
  };
  add_class(config.n_objects, kObjects, PosTag::kObject, w.class_objects);
  add_class(config.n_scenes, kScenes, PosTag::kScene, w.class_scenes);
  add_class(config.n_verbs, kVerbs, PosTag::kVerb, w.class_verbs);

  // target surface forms: generated pseudo-words, disjoint from everything
  for (auto& e : w.concepts) e.target = fresh_word(word_rng, used);
  for (const auto& f : kFunctionWords)
    w.function_words.push_back(LexEntry{f, fresh_word(word_rng, used), PosTag::kFunction});

  for (int c = 0; c < w.concept_count(); ++c) {
    const auto& e = w.concepts[static_cast<std::size_t>(c)];
    w.concept_by_pivot[e.pivot] = c;
    w.concept_by_target[e.target] = c;
    w.dict_pivot_to_target[e.pivot] = e.target;
    w.target_tags[e.target] = e.tag;
  }
  for (const auto& f : w.function_words) {
    w.dict_pivot_to_target[f.pivot] = f.target;
    w.target_tags[f.target] = PosTag::kFunction;
  }

  w.templates = default_templates();

  // Prototypes in orthonormal blocks (QR of gaussian draws) so feature sums
  // of up to four concepts stay separable at feature_dim below concept_count.
  w.prototypes.resize(w.concept_count(), config.feature_dim);
  int made = 0;
  while (made < w.concept_count()) {
    const int block = std::min(config.feature_dim, w.concept_count() - made);
    Mat<float> draw(config.feature_dim, config.feature_dim);
    for (Eigen::Index i = 0; i < draw.size(); ++i) draw(i) = static_cast<float>(proto_rng.normal());
    Eigen::HouseholderQR<Mat<float>> qr(draw);
    Mat<float> q = qr.householderQ();
    for (int k = 0; k < block; ++k) w.prototypes.row(made + k) = q.col(k).transpose();
    made += block;
  }
  return w;
}

void NoiseSpec::validate() const {
  auto in01 = [](double x) { return x >= 0.0 && x <= 1.0; };
  if (!in01(disfluency_rate) || !in01(irrelevancy_rate))
    throw std::invalid_argument("NoiseSpec: rates must lie in [0, 1]");
  const double mix = p_swap + p_drop + p_duplicate;
  if (p_swap < 0 || p_drop < 0 || p_duplicate < 0 || std::abs(mix - 1.0) > 1e-9)
    throw std::invalid_argument("NoiseSpec: op mix must be non-negative and sum to 1");
}

std::vector<std::string> pseudo_translate(const std::vector<std::string>& pivot_tokens,
                                          const MicroWorld& world, const NoiseSpec& noise, Rng& rng,
                                          bool* disfluent_out, bool* irrelevant_out) {
  noise.validate();
  std::vector<std::string> tokens = world.translate(pivot_tokens);
  bool disfluent = false, irrelevant = false;

  if (rng.uniform01() < noise.disfluency_rate) {
    const std::size_t op = rng.categorical({noise.p_swap, noise.p_drop, noise.p_duplicate});
    if (op == 0 && tokens.size() >= 2) {
      const std::size_t i = rng.below(tokens.size() - 1);
      std::swap(tokens[i], tokens[i + 1]);
      disfluent = true;
    } else if (op == 1 && tokens.size() >= 2) {
      tokens.erase(tokens.begin() + static_cast<std::ptrdiff_t>(rng.below(tokens.size())));
      disfluent = true;
    } else if (op == 2) {
      const std::size_t i = rng.below(tokens.size());
      tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(i) + 1, tokens[i]);
      disfluent = true;
    }
  }

  if (rng.uniform01() < noise.irrelevancy_rate) {
    std::vector<std::size_t> concept_positions;
    for (std::size_t i = 0; i < tokens.size(); ++i)
      if (world.concept_by_target.count(tokens[i])) concept_positions.push_back(i);
    if (!concept_positions.empty()) {
      const std::size_t pos = concept_positions[rng.below(concept_positions.size())];
      const int original = world.concept_by_target.at(tokens[pos]);
      const auto& pool = world.concepts_of_class(world.concepts[static_cast<std::size_t>(original)].tag);
      std::vector<int> distractors;
      for (int c : pool)
        if (c != original) distractors.push_back(c);
      if (!distractors.empty()) {
        const int replacement = distractors[rng.below(distractors.size())];
        tokens[pos] = world.concepts[static_cast<std::size_t>(replacement)].target;
        irrelevant = true;
      }
    }
  }

  truncate_tokens(tokens, world.config.max_len_target);
  if (disfluent_out) *disfluent_out = disfluent;
  if (irrelevant_out) *irrelevant_out = irrelevant;
  return tokens;
}

DatasetSplits generate_dataset(const MicroWorld& world, const NoiseSpec& noise, int n_train, int n_val,
                               int n_test, std::uint64_t seed) {
  if (n_train < 1 || n_val < 0 || n_test < 0)
    throw std::invalid_argument("generate_dataset: split sizes must be positive");
  noise.validate();
  Rng rng = Rng(seed).child(0x9a1a);
  SlotFiller filler(world.concept_count());
  int next_id = 0;

  auto make_pair = [&](bool with_clean) {
    DrawnSentence s = draw_sentence(world, filler, rng);
    PseudoPair p;
    p.image.id = next_id++;
    p.image.concept_ids = s.concept_ids;
    p.image.feature = Mat<float>::Zero(1, world.config.feature_dim);
    for (int c : s.concept_ids) p.image.feature += world.prototypes.row(c);
    for (int d = 0; d < world.config.feature_dim; ++d)
      p.image.feature(0, d) += static_cast<float>(world.config.feature_noise * rng.normal());
    p.pivot_tokens = s.pivot_tokens;
    truncate_tokens(p.pivot_tokens, world.config.max_len_pivot);
    p.gt_concept_tokens = image_concept_tokens(world, p.image);
    p.pseudo_tokens = pseudo_translate(p.pivot_tokens, world, noise, rng, &p.disfluent, &p.irrelevant);
    if (with_clean) {
      p.clean_tokens = world.translate(p.pivot_tokens);
      truncate_tokens(p.clean_tokens, world.config.max_len_target);
    }
    return p;
  };

  DatasetSplits splits;
  for (int i = 0; i < n_train; ++i) splits.train.push_back(make_pair(false));
  for (int i = 0; i < n_val; ++i) splits.val.push_back(make_pair(true));
  for (int i = 0; i < n_test; ++i) splits.test.push_back(make_pair(true));
  return splits;
}

TagTable TagTable::from_world(const MicroWorld& world) {
  TagTable t;
  t.target_tags = world.target_tags;
  t.feature_dim = world.config.feature_dim;
  return t;
}

std::vector<std::string> extract_concepts(const std::vector<std::string>& tokens, const TagTable& tags) {
  std::vector<std::string> out;
  for (const auto& tok : tokens) {
    auto it = tags.target_tags.find(tok);
    if (it == tags.target_tags.end())
      throw std::runtime_error("extract_concepts: token '" + tok + "' has no part-of-speech tag");
    if (it->second != PosTag::kFunction) out.push_back(tok);
  }
  return out;
}

void write_pairs(const std::string& path, const std::vector<PseudoPair>& pairs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_pairs: cannot open " + path);
  for (const auto& p : pairs) {
    out << p.image.id << '\t';
    for (Eigen::Index d = 0; d < p.image.feature.cols(); ++d) {
      if (d) out << ' ';
      out << render_float(p.image.feature(0, d));
    }
    out << '\t' << join(p.pivot_tokens) << '\t' << join(p.pseudo_tokens) << '\t'
        << join(p.gt_concept_tokens) << '\t' << (p.disfluent ? 1 : 0) << ' '
        << (p.irrelevant ? 1 : 0) << '\t' << join(p.clean_tokens) << '\n';
  }
  if (!out) throw std::runtime_error("write_pairs: write failed for " + path);
}

std::vector<PseudoPair> read_pairs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_pairs: cannot open " + path);
  std::vector<PseudoPair> out;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 7)
      throw std::runtime_error("read_pairs: " + path + ":" + std::to_string(line_no) +
                               ": expected 7 tab-separated fields, got " + std::to_string(fields.size()));
    PseudoPair p;
    try {
      p.image.id = std::stoi(fields[0]);
    } catch (const std::exception&) {
      throw std::runtime_error("read_pairs: " + path + ":" + std::to_string(line_no) + ": bad image id");
    }
    const std::vector<std::string> feats = split_tokens(fields[1]);
    if (feats.empty())
      throw std::runtime_error("read_pairs: " + path + ":" + std::to_string(line_no) + ": empty feature");
    p.image.feature.resize(1, static_cast<Eigen::Index>(feats.size()));
    for (std::size_t d = 0; d < feats.size(); ++d) {
      char* end = nullptr;
      p.image.feature(0, static_cast<Eigen::Index>(d)) = std::strtof(feats[d].c_str(), &end);
      if (end == feats[d].c_str() || *end != '\0')
        throw std::runtime_error("read_pairs: " + path + ":" + std::to_string(line_no) +
                                 ": bad feature value '" + feats[d] + "'");
    }
    p.pivot_tokens = split_tokens(fields[2]);
    p.pseudo_tokens = split_tokens(fields[3]);
    p.gt_concept_tokens = split_tokens(fields[4]);
    const std::vector<std::string> flags = split_tokens(fields[5]);
    if (flags.size() != 2 || (flags[0] != "0" && flags[0] != "1") || (flags[1] != "0" && flags[1] != "1"))
      throw std::runtime_error("read_pairs: " + path + ":" + std::to_string(line_no) + ": bad noise flags");
    p.disfluent = flags[0] == "1";
    p.irrelevant = flags[1] == "1";
    p.clean_tokens = split_tokens(fields[6]);
    if (p.pseudo_tokens.empty())
      throw std::runtime_error("read_pairs: " + path + ":" + std::to_string(line_no) + ": empty caption");
    out.push_back(std::move(p));
  }
  return out;
}

void write_lexicon(const std::string& path, const MicroWorld& world) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_lexicon: cannot open " + path);
  out << "feature_dim " << world.config.feature_dim << '\n';
  for (const auto& e : world.concepts)
    out << "word " << e.target << ' ' << e.pivot << ' ' << to_string(e.tag) << '\n';
  for (const auto& e : world.function_words)
    out << "word " << e.target << ' ' << e.pivot << ' ' << to_string(e.tag) << '\n';
}

TagTable read_lexicon(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_lexicon: cannot open " + path);
  TagTable t;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "feature_dim") {
      ls >> t.feature_dim;
    } else if (kind == "word") {
      std::string target, pivot, tag;
      if (!(ls >> target >> pivot >> tag))
        throw std::runtime_error("read_lexicon: " + path + ":" + std::to_string(line_no) + ": bad word line");
      t.target_tags[target] = pos_tag_from_string(tag);
    } else {
      throw std::runtime_error("read_lexicon: " + path + ":" + std::to_string(line_no) +
                               ": unknown record '" + kind + "'");
    }
  }
  return t;
}

void write_dataset(const std::string& dir, const MicroWorld& world, const DatasetSplits& splits) {
  write_pairs(dir + "/train.tsv", splits.train);
  write_pairs(dir + "/val.tsv", splits.val);
  write_pairs(dir + "/test.tsv", splits.test);
  write_lexicon(dir + "/lexicon.txt", world);
}

LoadedDataset read_dataset(const std::string& dir) {
  LoadedDataset d;
  d.splits.train = read_pairs(dir + "/train.tsv");
  d.splits.val = read_pairs(dir + "/val.tsv");
  d.splits.test = read_pairs(dir + "/test.tsv");
  d.tags = read_lexicon(dir + "/lexicon.txt");
  return d;
}

Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpus, long threshold) {
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  return Vocabulary::build(corpus, threshold);
}

std::vector<std::string> image_concept_tokens(const MicroWorld& world, const ImageRecord& image) {
  std::vector<std::string> out;
  out.reserve(image.concept_ids.size());
  for (int c : image.concept_ids) out.push_back(world.concepts[static_cast<std::size_t>(c)].target);
  return out;
}

std::vector<std::vector<std::string>> sample_clean_target_corpus(const MicroWorld& world, int count,
                                                                 std::uint64_t seed) {
  Rng rng = Rng(seed).child(0x5e47);
  SlotFiller filler(world.concept_count());
  std::vector<std::vector<std::string>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    DrawnSentence s = draw_sentence(world, filler, rng);
    auto tokens = world.translate(s.pivot_tokens);
    truncate_tokens(tokens, world.config.max_len_target);
    out.push_back(std::move(tokens));
  }
  return out;
}

}  // namespace ssr
