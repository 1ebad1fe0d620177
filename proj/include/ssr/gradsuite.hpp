// The full finite-difference verification suite: every differentiable
// operation and every loss, on random float64 instances with extents <= 5.

#pragma once

#include <string>
#include <vector>

#include "ssr/gradcheck.hpp"
#include "ssr/objectives.hpp"
#include "ssr/rng.hpp"
#include "ssr/seq_models.hpp"
#include "ssr/vse.hpp"

namespace ssr {

struct GradCheckResult {
  std::string name;
  double max_rel_error;
};

inline std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed = 20240501) {
  Rng rng(seed);
  std::vector<GradCheckResult> results;

  auto extent = [&]() { return static_cast<Eigen::Index>(1 + rng.below(5)); };
  auto matrix = [&](Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
    Mat<double> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = rng.uniform(lo, hi);
    return m;
  };
  auto away_from_kinks = [&](Mat<double> m) {
    for (Eigen::Index i = 0; i < m.size(); ++i)
      if (std::abs(m(i)) < 0.05) m(i) = m(i) < 0 ? -0.1 : 0.1;
    return m;
  };
  auto record = [&](const std::string& name, double err) { results.push_back({name, err}); };
  auto worst_of = [](double a, double b) { return a > b ? a : b; };

  // elementwise and structural ops, several random shapes each
  const int reps = 3;

  auto check_unary = [&](const std::string& name, auto f, bool positive = false,
                         bool avoid_kinks = false) {
    double worst = 0;
    for (int i = 0; i < reps; ++i) {
      Mat<double> x = positive ? matrix(extent(), extent(), 0.3, 2.0) : matrix(extent(), extent());
      if (avoid_kinks) x = away_from_kinks(x);
      worst = worst_of(worst, finite_diff_check(f, x, 1e-4));
    }
    record(name, worst);
  };

  check_unary("elementwise.sigmoid", [](Tape<double>& t, Var<double> v) { return sum(sigmoid(v)); });
  check_unary("elementwise.tanh", [](Tape<double>& t, Var<double> v) { return sum(tanh(v)); });
  check_unary("elementwise.exp", [](Tape<double>& t, Var<double> v) { return sum(mul(exp(v), sigmoid(v))); });
  check_unary("elementwise.log", [](Tape<double>& t, Var<double> v) { return sum(log(v)); }, true);
  check_unary("elementwise.sqrt", [](Tape<double>& t, Var<double> v) { return sum(sqrt(v)); }, true);
  check_unary("elementwise.recip", [](Tape<double>& t, Var<double> v) { return sum(recip(v)); }, true);
  check_unary("elementwise.relu", [](Tape<double>& t, Var<double> v) { return sum(relu(v)); }, false, true);
  check_unary("elementwise.hinge_pos",
              [](Tape<double>& t, Var<double> v) { return sum(hinge_pos(v)); }, false, true);
  check_unary("elementwise.scale", [](Tape<double>& t, Var<double> v) { return sum(scale(v, 1.7)); });
  check_unary("log_softmax", [](Tape<double>& t, Var<double> v) { return sum(mul(log_softmax(v), sigmoid(v))); });
  check_unary("reduce.sum_mean", [](Tape<double>& t, Var<double> v) { return mean(mul(v, v)); });
  check_unary("l2_normalize", [](Tape<double>& t, Var<double> v) { return sum(l2_normalize(v)); });
  check_unary("transpose", [](Tape<double>& t, Var<double> v) { return sum(mul(transpose(v), transpose(v))); });
  check_unary("gather_rows", [](Tape<double>& t, Var<double> v) {
    return sum(gather_rows(v, {0, static_cast<int>(v.rows()) - 1, 0}));
  });
  check_unary("slice_pick", [](Tape<double>& t, Var<double> v) {
    return pick(tanh(slice_cols(v, 0, v.cols())), v.rows() - 1, v.cols() - 1);
  });

  {
    double worst = 0;
    for (int i = 0; i < reps; ++i) {
      const Eigen::Index r = extent(), k = extent(), c = extent();
      worst = worst_of(worst, finite_diff_check_multi(
                                  [](Tape<double>& t, const std::vector<Var<double>>& v) {
                                    return sum(sigmoid(matmul(v[0], v[1])));
                                  },
                                  {matrix(r, k), matrix(k, c)}, 1e-4));
    }
    record("matmul", worst);
  }
  {
    double worst = 0;
    for (int i = 0; i < reps; ++i) {
      const Eigen::Index r = extent(), c = extent();
      worst = worst_of(worst, finite_diff_check_multi(
                                  [](Tape<double>& t, const std::vector<Var<double>>& v) {
                                    return sum(mul(add(v[0], v[1]), sub(v[0], v[1])));
                                  },
                                  {matrix(r, c), matrix(r, c)}, 1e-4));
      worst = worst_of(worst, finite_diff_check_multi(
                                  [](Tape<double>& t, const std::vector<Var<double>>& v) {
                                    return sum(tanh(add_rowvec(v[0], v[1])));
                                  },
                                  {matrix(r, c), matrix(1, c)}, 1e-4));
      worst = worst_of(worst, finite_diff_check_multi(
                                  [](Tape<double>& t, const std::vector<Var<double>>& v) {
                                    return sum(mul_scalar(v[0], v[1]));
                                  },
                                  {matrix(r, c), matrix(1, 1, 0.5, 1.5)}, 1e-4));
      worst = worst_of(worst, finite_diff_check_multi(
                                  [](Tape<double>& t, const std::vector<Var<double>>& v) {
                                    return sum(sigmoid(vstack(std::vector<Var<double>>{v[0], v[1]})));
                                  },
                                  {matrix(extent(), c), matrix(extent(), c)}, 1e-4));
    }
    record("elementwise.binary/add_rowvec/mul_scalar/vstack", worst);
  }

  // recurrent cells
  {
    double worst = 0;
    for (int i = 0; i < reps; ++i) {
      const int E = static_cast<int>(extent()), H = static_cast<int>(extent());
      Mat<double> wx = matrix(E, 4 * H, -0.5, 0.5), wh = matrix(H, 4 * H, -0.5, 0.5),
                  b = matrix(1, 4 * H, -0.5, 0.5);
      worst = worst_of(worst, finite_diff_check_multi(
                                  [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                                    LstmVars<double> p{v[0], v[1], v[2]};
                                    auto [h, c] = lstm_step(p, v[3], v[4], v[5]);
                                    return add(sum(mul(h, h)), sum(mul(c, c)));
                                  },
                                  {wx, wh, b, matrix(1, E), matrix(1, H), matrix(1, H)}, 1e-4));
    }
    record("lstm_step", worst);
  }
  {
    double worst = 0;
    for (int i = 0; i < reps; ++i) {
      const int E = static_cast<int>(extent()), H = static_cast<int>(extent());
      worst = worst_of(
          worst, finite_diff_check_multi(
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       GruVars<double> p{v[0], v[1], v[2], v[3], v[4], v[5]};
                       auto h = gru_step(p, v[6], v[7]);
                       return sum(mul(h, h));
                     },
                     {matrix(E, 2 * H, -0.5, 0.5), matrix(H, 2 * H, -0.5, 0.5), matrix(1, 2 * H, -0.5, 0.5),
                      matrix(E, H, -0.5, 0.5), matrix(H, H, -0.5, 0.5), matrix(1, H, -0.5, 0.5),
                      matrix(1, E), matrix(1, H)},
                     1e-4));
    }
    record("gru_step", worst);
  }

  // captioner / language-model cross-entropies (the generation losses)
  auto captioner_inputs = [&](Captioner<double>& model) {
    std::vector<Mat<double>> inputs;
    for (auto& [name, m] : model.params()) inputs.push_back(*m);
    return inputs;
  };
  auto bind_captioner = [](const std::vector<Var<double>>& v) {
    CaptionerVars<double> cv;
    cv.img_w = v[0];
    cv.img_b = v[1];
    cv.embed = v[2];
    cv.lstm = {v[3], v[4], v[5]};
    cv.out_w = v[6];
    cv.out_b = v[7];
    return cv;
  };
  {
    Rng model_rng(rng.next_u64());
    auto model = Captioner<double>::init(3, 2, 3, 6, model_rng);
    for (auto& [name, m] : model.params()) *m *= 6.0;  // keep gradients clear of the noise floor
    Mat<double> f1 = matrix(1, 3), f2 = matrix(1, 3);
    Caption c1 = Caption::from_ids({4, 5});
    Caption c2 = Caption::from_ids({5});
    record("loss.caption_xent",
           finite_diff_check_multi(
               [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                 auto cv = bind_captioner(v);
                 return caption_xent_loss(cv, {{&f1, &c1}, {&f2, &c2}});
               },
               captioner_inputs(model), 1e-4));

    RewardBundle rs, rb;
    rs.r_flc = 0.8;
    rb.r_flc = 0.1;
    rs.r_srlv = 0.5;
    rb.r_srlv = 0.35;
    rs.r_crlv = {0.2, 0.0, -0.4};
    record("loss.flc_selfcritical",
           finite_diff_check_multi(
               [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                 auto cv = bind_captioner(v);
                 std::vector<SelfCriticalItem<double>> batch = {{&f1, &c1, &rs, &rb}};
                 return flc_selfcritical_loss(cv, batch);
               },
               captioner_inputs(model), 1e-4));
    record("loss.rlv_selfcritical",
           finite_diff_check_multi(
               [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                 auto cv = bind_captioner(v);
                 std::vector<SelfCriticalItem<double>> batch = {{&f1, &c1, &rs, &rb}};
                 return rlv_selfcritical_loss(cv, batch);
               },
               captioner_inputs(model), 1e-4));
    record("loss.joint",
           finite_diff_check_multi(
               [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                 auto cv = bind_captioner(v);
                 std::vector<SelfCriticalItem<double>> batch = {{&f1, &c1, &rs, &rb}};
                 return joint_loss(LossWeights{0.05, 0.15, 1.0},
                                   caption_xent_loss(cv, {{&f2, &c2}}),
                                   flc_selfcritical_loss(cv, batch), rlv_selfcritical_loss(cv, batch));
               },
               captioner_inputs(model), 1e-4));
  }
  {
    Rng model_rng(rng.next_u64());
    auto model = LanguageModel<double>::init(2, 3, 6, model_rng);
    for (auto& [name, m] : model.params()) *m *= 6.0;
    Caption c1 = Caption::from_ids({4, 5});
    Caption c2 = Caption::from_ids({5, 5});
    std::vector<Mat<double>> inputs;
    for (auto& [name, m] : model.params()) inputs.push_back(*m);
    record("loss.lm_xent",
           finite_diff_check_multi(
               [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                 LanguageModelVars<double> lv;
                 lv.embed = v[0];
                 lv.lstm = {v[1], v[2], v[3]};
                 lv.out_w = v[4];
                 lv.out_b = v[5];
                 return lm_xent_loss(lv, {&c1, &c2});
               },
               inputs, 1e-4));
  }

  // contrastive ranking losses over both matching spaces
  {
    double worst = 0;
    for (int i = 0; i < reps; ++i) {
      std::vector<Mat<double>> inputs;
      for (int k = 0; k < 6; ++k) inputs.push_back(matrix(1, 3));
      worst = worst_of(worst, finite_diff_check_multi(
                                  [](Tape<double>& t, const std::vector<Var<double>>& v) {
                                    std::vector<Var<double>> img, partner;
                                    for (int k = 0; k < 3; ++k) {
                                      img.push_back(l2_normalize(v[static_cast<std::size_t>(k)]));
                                      partner.push_back(l2_normalize(v[static_cast<std::size_t>(3 + k)]));
                                    }
                                    return contrastive_loss(img, partner, 0.2);
                                  },
                                  inputs, 1e-4));
    }
    record("loss.contrastive_sentence", worst);
  }
  {
    // image-concept route: gradients flow through the encoder and the table
    Rng model_rng(rng.next_u64());
    auto img_enc = ImageEncoder<double>::init(4, 3, model_rng);
    auto table = ConceptEmbedding<double>::init(5, 3, model_rng);
    img_enc.w *= 6.0;
    table.table *= 6.0;
    Mat<double> f1 = matrix(1, 4), f2 = matrix(1, 4), f3 = matrix(1, 4);
    record("loss.contrastive_concept",
           finite_diff_check_multi(
               [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                 ImageEncoderVars<double> iv{v[0], v[1]};
                 ConceptEmbeddingVars<double> cv{v[2]};
                 std::vector<Var<double>> img = {embed_image(iv, t.constant_ref(&f1)),
                                                 embed_image(iv, t.constant_ref(&f2)),
                                                 embed_image(iv, t.constant_ref(&f3))};
                 std::vector<Var<double>> cpt = {embed_concept(cv, 0), embed_concept(cv, 2),
                                                 embed_concept(cv, 4)};
                 return contrastive_loss(img, cpt, 0.2);
               },
               {img_enc.w, img_enc.b, table.table}, 1e-4));
  }
  {
    // sentence encoder end to end
    Rng model_rng(rng.next_u64());
    auto enc = SentenceEncoder<double>::init(6, 2, 3, 3, model_rng);
    std::vector<Mat<double>> inputs;
    for (auto& [name, m] : enc.params()) {
      *m *= 6.0;
      inputs.push_back(*m);
    }
    record("encoder.sentence",
           finite_diff_check_multi(
               [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                 SentenceEncoderVars<double> sv;
                 sv.embed = v[0];
                 sv.fwd = {v[1], v[2], v[3], v[4], v[5], v[6]};
                 sv.bwd = {v[7], v[8], v[9], v[10], v[11], v[12]};
                 sv.has_proj = false;
                 Var<double> e = embed_sentence(sv, std::vector<int>{4, 5, 4});
                 return pick(e, 0, 1);
               },
               inputs, 1e-4));
  }

  return results;
}

}  // namespace ssr
