#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ssr/rewards.hpp"

using ssr::Caption;
using ssr::Captioner;
using ssr::ConceptVocabulary;
using ssr::LanguageModel;
using ssr::Mat;
using ssr::RewardBundle;
using ssr::Rng;
using ssr::Tape;
using ssr::Vocabulary;

namespace {

// language model with zero recurrent weights: the output bias alone fixes one
// step-independent distribution
LanguageModel<double> bias_lm(const std::vector<double>& probs) {
  Rng rng(1);
  auto lm = LanguageModel<double>::init(2, 2, static_cast<int>(probs.size()), rng);
  for (auto& [name, m] : lm.params()) m->setZero();
  for (std::size_t i = 0; i < probs.size(); ++i) lm.out_b(0, static_cast<Eigen::Index>(i)) = std::log(probs[i]);
  return lm;
}

ssr::TagTable toy_tags() {
  ssr::TagTable tags;
  tags.target_tags = {{"kato", ssr::PosTag::kObject},
                      {"runo", ssr::PosTag::kVerb},
                      {"lo", ssr::PosTag::kFunction}};
  return tags;
}

}  // namespace

TEST_CASE("fluency_reward: forced probability one gives zero; uniform gives ln(1/4)") {
  // vocab {PAD BOS EOS UNK a}; distribution uniform after zero weights
  Rng rng(2);
  auto lm = LanguageModel<double>::init(2, 2, 6, rng);
  for (auto& [name, m] : lm.params()) m->setZero();
  // the effective vocabulary after masking PAD and BOS has 4 tokens
  ssr::ScoreOptions mask_reserved;
  mask_reserved.banned_ids = {Vocabulary::kPad, Vocabulary::kBos};
  Caption cap = Caption::from_ids({4, 5, 4});
  auto terms = lm_log_probs_value(lm, cap, mask_reserved);
  double mean = 0;
  for (double t : terms) mean += t;
  mean /= static_cast<double>(terms.size());
  CHECK(mean == doctest::Approx(std::log(0.25)).epsilon(1e-12));

  // softmax collapsed onto EOS alone: every scored token has probability 1
  ssr::ScoreOptions only_eos;
  only_eos.banned_ids = {Vocabulary::kPad, Vocabulary::kBos, Vocabulary::kUnk, 4, 5};
  Caption empty = Caption::from_ids({});
  auto one = lm_log_probs_value(lm, empty, only_eos);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("fluency_reward: hand table with probs 0.5 then 0.25") {
  // one content token at p=0.5, EOS at p=0.25, n = 2 scored tokens
  auto lm = bias_lm({0.125, 0.0625, 0.25, 0.0625, 0.5});
  Caption cap = Caption::from_ids({4});
  const double r = fluency_reward(lm, cap);
  CHECK(r == doctest::Approx((std::log(0.5) + std::log(0.25)) / 2.0).epsilon(1e-9));
  CHECK(r == doctest::Approx(-1.0397207708399179).epsilon(1e-9));
  CHECK(r <= 0.0);  // mean of log-probabilities

  CHECK_THROWS_AS(fluency_reward(lm, Caption{}), std::invalid_argument);
}

TEST_CASE("sentence_relevancy_reward: aligned and orthogonal embeddings") {
  Rng rng(5);
  const int joint = 4;
  auto sent_enc = ssr::SentenceEncoder<double>::init(8, 3, joint, joint, rng);
  Caption cap = Caption::from_ids({4, 6});

  // read off the sentence embedding, then build an image encoder that maps
  // feature e1 exactly onto it (or onto an orthogonal vector)
  Mat<double> sent_emb;
  {
    Tape<double> t;
    auto sv = bind(t, sent_enc, false);
    sent_emb = embed_sentence(sv, cap).value();
  }
  ssr::ImageEncoder<double> aligned{Mat<double>::Zero(2, joint), Mat<double>::Zero(1, joint)};
  aligned.w.row(0) = sent_emb;
  Mat<double> feature(1, 2);
  feature << 1.0, 0.0;
  CHECK(ssr::sentence_relevancy_reward(aligned, sent_enc, feature, cap) ==
        doctest::Approx(1.0).epsilon(1e-9));

  Mat<double> ortho = Mat<double>::Zero(1, joint);
  ortho(0, 0) = -sent_emb(0, 1);
  ortho(0, 1) = sent_emb(0, 0);
  ssr::ImageEncoder<double> orthogonal{Mat<double>::Zero(2, joint), Mat<double>::Zero(1, joint)};
  orthogonal.w.row(0) = ortho;
  const double r = ssr::sentence_relevancy_reward(orthogonal, sent_enc, feature, cap);
  CHECK(r == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(r >= -1.0);
  CHECK(r <= 1.0);
}

TEST_CASE("concept_relevancy_reward: hand case, function words, prior monotonicity") {
  // prior: kato 1/5, runo 4/5
  ConceptVocabulary concepts = ConceptVocabulary::build(
      {{"kato", "runo"}, {"runo", "runo", "runo"}}, toy_tags());
  CHECK(concepts.prior_of(concepts.id_of("kato")) == doctest::Approx(0.2).epsilon(1e-12));

  ssr::ImageEncoder<double> img_enc{Mat<double>::Identity(2, 2), Mat<double>::Zero(1, 2)};
  ssr::ConceptEmbedding<double> table{Mat<double>::Zero(2, 2)};
  table.table.row(concepts.id_of("kato")) << 0.6, 0.8;  // cosine 0.6 against [1, 0]
  table.table.row(concepts.id_of("runo")) << 0.6, 0.8;  // same cosine, higher prior
  Mat<double> feature(1, 2);
  feature << 1.0, 0.0;

  const double r_kato =
      ssr::concept_relevancy_reward(img_enc, table, concepts, 0.5, feature, "kato");
  CHECK(r_kato == doctest::Approx(0.6 - 0.5 * 0.2).epsilon(1e-9));  // 0.5

  // function word (not a concept) scores exactly zero
  CHECK(ssr::concept_relevancy_reward(img_enc, table, concepts, 0.5, feature, "lo") == 0.0);
  CHECK(ssr::concept_relevancy_reward(img_enc, table, concepts, 0.5, feature, "<EOS>") == 0.0);

  // equal cosine, larger prior, strictly smaller reward
  const double r_runo =
      ssr::concept_relevancy_reward(img_enc, table, concepts, 0.5, feature, "runo");
  CHECK(r_runo < r_kato);
  CHECK(r_runo == doctest::Approx(0.6 - 0.5 * 0.8).epsilon(1e-9));

  // range: within [-1 - lambda max p, 1]
  for (double r : {r_kato, r_runo}) {
    CHECK(r >= -1.0 - 0.5 * concepts.max_prior() - 1e-9);
    CHECK(r <= 1.0 + 1e-9);
  }
}

TEST_CASE("bundle_rewards: zero advantage on identical decodes, determinism, composition") {
  Rng rng(17);
  const int feat_dim = 4, vocab = 9;
  LanguageModel<double> lm = LanguageModel<double>::init(3, 4, vocab, rng);
  ssr::SentenceMatchModel<double> sm{ssr::ImageEncoder<double>::init(feat_dim, 5, rng),
                                     ssr::SentenceEncoder<double>::init(vocab, 3, 5, 5, rng)};
  ConceptVocabulary concepts =
      ConceptVocabulary::build({{"kato", "runo"}, {"runo", "kato"}}, toy_tags());
  ssr::ConceptMatchModel<double> cm{ssr::ImageEncoder<double>::init(feat_dim, 3, rng),
                                    ssr::ConceptEmbedding<double>::init(concepts.size(), 3, rng)};
  Vocabulary vocab_table = ssr::build_vocab(
      {std::vector<std::string>(6, "kato"), std::vector<std::string>(6, "runo"),
       std::vector<std::string>(6, "lo")},
      4);
  ssr::RewardScorers<double> scorers{&lm, &sm, &cm, &concepts, &vocab_table, 0.5};

  Mat<double> feature(1, feat_dim);
  for (int i = 0; i < feat_dim; ++i) feature(0, i) = rng.uniform(-1, 1);
  Caption sampled = Caption::from_tokens(vocab_table, {"kato", "runo"});
  Caption baseline = Caption::from_tokens(vocab_table, {"lo", "kato"});

  auto [s, b] = bundle_rewards(scorers, feature, sampled, sampled);
  CHECK(s.r_flc - b.r_flc == 0.0);
  CHECK(s.r_srlv - b.r_srlv == 0.0);

  auto [s1, b1] = bundle_rewards(scorers, feature, sampled, baseline);
  auto [s2, b2] = bundle_rewards(scorers, feature, sampled, baseline);
  CHECK(s1.r_flc == s2.r_flc);
  CHECK(s1.r_srlv == s2.r_srlv);
  CHECK(s1.r_crlv == s2.r_crlv);

  // bundle values equal the standalone operations
  CHECK(s1.r_flc == doctest::Approx(fluency_reward(lm, sampled)).epsilon(1e-12));
  CHECK(s1.r_srlv ==
        doctest::Approx(ssr::sentence_relevancy_reward(sm.image, sm.sentence, feature, sampled))
            .epsilon(1e-12));
  REQUIRE(s1.r_crlv.size() == 3);  // two content tokens plus EOS
  CHECK(s1.r_crlv[0] == doctest::Approx(ssr::concept_relevancy_reward(cm.image, cm.concepts, concepts,
                                                                      0.5, feature, "kato"))
                            .epsilon(1e-12));
  CHECK(s1.r_crlv[2] == 0.0);  // EOS is not a concept
  CHECK(b1.r_crlv.empty());    // no per-token baseline

  ssr::RewardScorers<double> missing;
  CHECK_THROWS_AS(bundle_rewards(missing, feature, sampled, baseline), std::invalid_argument);
}

TEST_CASE("reward trace dump: one line-delimited record per sentence") {
  namespace fs = std::filesystem;
  const auto path = fs::temp_directory_path() / "ssr_reward_trace.tsv";
  {
    ssr::RewardTraceWriter writer(path.string());
    RewardBundle b;
    b.r_flc = -1.25;
    b.r_srlv = 0.5;
    b.r_crlv = {0.25, 0.0};
    writer.write(42, {"kato", "runo"}, b);
    writer.write(43, {"lo"}, RewardBundle{});
  }
  std::ifstream in(path);
  std::string line1, line2, extra;
  REQUIRE(std::getline(in, line1));
  REQUIRE(std::getline(in, line2));
  CHECK_FALSE(std::getline(in, extra));
  CHECK(line1 == "42\tkato runo\t-1.25\t0.5\t0.25 0");
  CHECK(line2.rfind("43\tlo\t", 0) == 0);
  fs::remove(path);
}

TEST_CASE("reward scoring records no gradient operations") {
  Rng rng(23);
  auto lm = LanguageModel<double>::init(3, 4, 6, rng);
  Tape<double> tape;
  auto vars = bind(tape, lm, false);
  Caption cap = Caption::from_ids({4, 5});
  auto terms = lm_log_probs(vars, cap);
  (void)terms;
  CHECK(tape.grad_op_count() == 0);
}
