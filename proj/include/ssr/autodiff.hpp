// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape records every operation applied to Vars created on it; backward()
// replays the records in exact reverse execution order and accumulates
// adjoints additively, so a value consumed k times receives the sum of its
// k contributions. Tensors are rank-1/2 (a vector is a 1xN or Nx1 matrix).
// Nodes whose inputs carry no gradient store no backward closure at all,
// which makes requires_grad=false forward passes pure value computation.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ssr {

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

// name -> storage of one model parameter, the unit of checkpointing and
// optimizer bookkeeping
template <class Scalar>
using NamedParam = std::pair<std::string, Mat<Scalar>*>;

template <class Scalar>
class Tape;

// Cheap handle to a tape node; valid while its tape is alive.
template <class Scalar>
class Var {
 public:
  Var() = default;

  const Mat<Scalar>& value() const;
  const Mat<Scalar>& grad() const;
  bool requires_grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Eigen::Index size() const { return value().size(); }
  Scalar item() const;

  Tape<Scalar>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape<Scalar>;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class Scalar>
class Tape {
 public:
  using mat_type = Mat<Scalar>;
  using var_type = Var<Scalar>;
  // adds this node's adjoint contributions into its parents' grads
  using backward_fn = std::function<void(Tape&, const mat_type& out_value, const mat_type& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  var_type leaf(mat_type value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr, requires_grad});
    return var_type(this, nodes_.size() - 1);
  }

  var_type constant(mat_type value) { return leaf(std::move(value), false); }

  // non-owning constant view; caller keeps *value alive for the tape's lifetime
  var_type constant_ref(const mat_type* value) {
    nodes_.push_back(Node{{}, {}, value, nullptr, false});
    return var_type(this, nodes_.size() - 1);
  }

  var_type scalar(Scalar v) {
    mat_type m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  var_type make(mat_type value, bool requires_grad, backward_fn back) {
    nodes_.push_back(Node{std::move(value), {}, nullptr,
                          requires_grad ? std::move(back) : backward_fn{}, requires_grad});
    if (nodes_.back().backward) ++grad_op_count_;
    return var_type(this, nodes_.size() - 1);
  }

  const mat_type& value(std::size_t id) const { return nodes_[id].view ? *nodes_[id].view : nodes_[id].value; }
  const mat_type& grad(std::size_t id) const {
    const Node& n = nodes_[id];
    if (!n.requires_grad) throw std::runtime_error("Tape: grad requested on a non-gradient node");
    if (n.grad.size() == 0) throw std::runtime_error("Tape: grad requested before backward()");
    return n.grad;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  void accumulate(std::size_t id, const mat_type& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = mat_type::Zero(value(id).rows(), value(id).cols());
    n.grad += g;
  }

  // dLoss/dNode for every gradient node reachable from a scalar loss
  void backward(var_type loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: loss from another tape");
    if (value(loss.id()).size() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    for (Node& n : nodes_) n.grad.resize(0, 0);
    Node& root = nodes_[loss.id()];
    if (!root.requires_grad) throw std::invalid_argument("backward: loss does not require grad");
    root.grad = mat_type::Constant(1, 1, Scalar(1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(*this, value(i), n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  // number of recorded operations that would participate in backward
  std::size_t grad_op_count() const { return grad_op_count_; }

 private:
  struct Node {
    mat_type value;
    mat_type grad;
    const mat_type* view = nullptr;
    backward_fn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::size_t grad_op_count_ = 0;
};

template <class Scalar>
const Mat<Scalar>& Var<Scalar>::value() const {
  if (!tape_) throw std::runtime_error("Var: empty handle");
  return tape_->value(id_);
}
template <class Scalar>
const Mat<Scalar>& Var<Scalar>::grad() const {
  if (!tape_) throw std::runtime_error("Var: empty handle");
  return tape_->grad(id_);
}
template <class Scalar>
bool Var<Scalar>::requires_grad() const {
  if (!tape_) throw std::runtime_error("Var: empty handle");
  return tape_->requires_grad(id_);
}
template <class Scalar>
Scalar Var<Scalar>::item() const {
  if (value().size() != 1) throw std::runtime_error("Var::item: not a scalar");
  return value()(0, 0);
}

namespace detail {

template <class Scalar>
Tape<Scalar>& same_tape(Var<Scalar> a, Var<Scalar> b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("op: empty Var");
  if (a.tape() != b.tape()) throw std::invalid_argument("op: operands live on different tapes");
  return *a.tape();
}

template <class Scalar>
void check_same_shape(Var<Scalar> a, Var<Scalar> b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) +
                                "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                                "x" + std::to_string(b.cols()) + ")");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  auto& t = detail::same_tape(a, b);
  detail::check_same_shape(a, b, "add");
  const bool rg = a.requires_grad() || b.requires_grad();
  Mat<S> out = a.value() + b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return t.make(std::move(out), rg, [ia, ib](Tape<S>& t, const Mat<S>&, const Mat<S>& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  auto& t = detail::same_tape(a, b);
  detail::check_same_shape(a, b, "sub");
  const bool rg = a.requires_grad() || b.requires_grad();
  Mat<S> out = a.value() - b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return t.make(std::move(out), rg, [ia, ib](Tape<S>& t, const Mat<S>&, const Mat<S>& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, Mat<S>(-g));
  });
}

// Hadamard product
template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  auto& t = detail::same_tape(a, b);
  detail::check_same_shape(a, b, "mul");
  const bool rg = a.requires_grad() || b.requires_grad();
  Mat<S> out = a.value().cwiseProduct(b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.make(std::move(out), rg, [ia, ib](Tape<S>& t, const Mat<S>&, const Mat<S>& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

template <class S>
Var<S> scale(Var<S> a, S c) {
  Tape<S>& t = *a.tape();
  Mat<S> out = a.value() * c;
  const std::size_t ia = a.id();
  return t.make(std::move(out), a.requires_grad(),
                [ia, c](Tape<S>& t, const Mat<S>&, const Mat<S>& g) { t.accumulate(ia, Mat<S>(g * c)); });
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

template <class S>
Var<S> sigmoid(Var<S> a) {
  Tape<S>& t = *a.tape();
  Mat<S> out = (S(1) / (S(1) + (-a.value().array()).exp())).matrix();
  const std::size_t ia = a.id();
  return t.make(std::move(out), a.requires_grad(), [ia](Tape<S>& t, const Mat<S>& y, const Mat<S>& g) {
    t.accumulate(ia, Mat<S>((g.array() * y.array() * (S(1) - y.array())).matrix()));
  });
}

template <class S>
Var<S> tanh(Var<S> a) {
  Tape<S>& t = *a.tape();
  Mat<S> out = a.value().array().tanh().matrix();
  const std::size_t ia = a.id();
  return t.make(std::move(out), a.requires_grad(), [ia](Tape<S>& t, const Mat<S>& y, const Mat<S>& g) {
    t.accumulate(ia, Mat<S>((g.array() * (S(1) - y.array().square())).matrix()));
  });
}

template <class S>
Var<S> exp(Var<S> a) {
  Tape<S>& t = *a.tape();
  Mat<S> out = a.value().array().exp().matrix();
  const std::size_t ia = a.id();
  return t.make(std::move(out), a.requires_grad(), [ia](Tape<S>& t, const Mat<S>& y, const Mat<S>& g) {
    t.accumulate(ia, Mat<S>(g.cwiseProduct(y)));
  });
}

template <class S>
Var<S> log(Var<S> a) {
  Tape<S>& t = *a.tape();
  if (!(a.value().array() > S(0)).all()) throw std::domain_error("log: operand must be strictly positive");
  Mat<S> out = a.value().array().log().matrix();
  const std::size_t ia = a.id();
  return t.make(std::move(out), a.requires_grad(), [ia](Tape<S>& t, const Mat<S>&, const Mat<S>& g) {
    t.accumulate(ia, Mat<S>(g.cwiseQuotient(t.value(ia))));
  });
}

// subgradient at 0 is 0
template <class S>
Var<S> relu(Var<S> a) {
  Tape<S>& t = *a.tape();
  Mat<S> out = a.value().cwiseMax(S(0));
  const std::size_t ia = a.id();
  return t.make(std::move(out), a.requires_grad(), [ia](Tape<S>& t, const Mat<S>&, const Mat<S>& g) {
    const auto& x = t.value(ia);
    t.accumulate(ia, Mat<S>((g.array() * (x.array() > S(0)).template cast<S>()).matrix()));
  });
}

// [x]+ = max(x, 0)
template <class S>
Var<S> hinge_pos(Var<S> a) {
  return relu(a);
}

template <class S>
Var<S> sqrt(Var<S> a) {
  Tape<S>& t = *a.tape();
  if (!(a.value().array() >= S(0)).all()) throw std::domain_error("sqrt: operand must be non-negative");
  Mat<S> out = a.value().array().sqrt().matrix();
  const std::size_t ia = a.id();
  return t.make(std::move(out), a.requires_grad(), [ia](Tape<S>& t, const Mat<S>& y, const Mat<S>& g) {
    t.accumulate(ia, Mat<S>((g.array() / (S(2) * y.array())).matrix()));
  });
}

template <class S>
Var<S> recip(Var<S> a) {
  Tape<S>& t = *a.tape();
  if ((a.value().array() == S(0)).any()) throw std::domain_error("recip: operand must be non-zero");
  Mat<S> out = a.value().cwiseInverse();
  const std::size_t ia = a.id();
  return t.make(std::move(out), a.requires_grad(), [ia](Tape<S>& t, const Mat<S>& y, const Mat<S>& g) {
    t.accumulate(ia, Mat<S>((-g.array() * y.array().square()).matrix()));
  });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  auto& t = detail::same_tape(a, b);
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner extents disagree (" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + ")");
  const bool rg = a.requires_grad() || b.requires_grad();
  Mat<S> out = a.value() * b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return t.make(std::move(out), rg, [ia, ib](Tape<S>& t, const Mat<S>&, const Mat<S>& g) {
    t.accumulate(ia, Mat<S>(g * t.value(ib).transpose()));
    t.accumulate(ib, Mat<S>(t.value(ia).transpose() * g));
  });
}

template <class S>
Var<S> transpose(Var<S> a) {
  Tape<S>& t = *a.tape();
  Mat<S> out = a.value().transpose();
  const std::size_t ia = a.id();
  return t.make(std::move(out), a.requires_grad(),
                [ia](Tape<S>& t, const Mat<S>&, const Mat<S>& g) { t.accumulate(ia, Mat<S>(g.transpose())); });
}

// ---------------------------------------------------------------------------
// shape / selection
// ---------------------------------------------------------------------------

template <class S>
Var<S> gather_rows(Var<S> table, std::vector<int> ids) {
  Tape<S>& t = *table.tape();
  const auto& v = table.value();
  Mat<S> out(static_cast<Eigen::Index>(ids.size()), v.cols());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] < 0 || ids[k] >= v.rows())
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[k]) + " outside 0.." +
                              std::to_string(v.rows() - 1));
    out.row(static_cast<Eigen::Index>(k)) = v.row(ids[k]);
  }
  const std::size_t it = table.id();
  return t.make(std::move(out), table.requires_grad(),
                [it, ids = std::move(ids)](Tape<S>& t, const Mat<S>&, const Mat<S>& g) {
                  Mat<S> gt = Mat<S>::Zero(t.value(it).rows(), t.value(it).cols());
                  for (std::size_t k = 0; k < ids.size(); ++k)
                    gt.row(ids[k]) += g.row(static_cast<Eigen::Index>(k));
                  t.accumulate(it, gt);
                });
}

template <class S>
Var<S> slice_cols(Var<S> a, Eigen::Index begin, Eigen::Index len) {
  Tape<S>& t = *a.tape();
  if (begin < 0 || len < 0 || begin + len > a.cols()) throw std::out_of_range("slice_cols: range outside matrix");
  Mat<S> out = a.value().middleCols(begin, len);
  const std::size_t ia = a.id();
  return t.make(std::move(out), a.requires_grad(),
                [ia, begin, len](Tape<S>& t, const Mat<S>&, const Mat<S>& g) {
                  Mat<S> ga = Mat<S>::Zero(t.value(ia).rows(), t.value(ia).cols());
                  ga.middleCols(begin, len) = g;
                  t.accumulate(ia, ga);
                });
}

template <class S>
Var<S> pick(Var<S> a, Eigen::Index r, Eigen::Index c) {
  Tape<S>& t = *a.tape();
  if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols()) throw std::out_of_range("pick: index outside matrix");
  Mat<S> out(1, 1);
  out(0, 0) = a.value()(r, c);
  const std::size_t ia = a.id();
  return t.make(std::move(out), a.requires_grad(), [ia, r, c](Tape<S>& t, const Mat<S>&, const Mat<S>& g) {
    Mat<S> ga = Mat<S>::Zero(t.value(ia).rows(), t.value(ia).cols());
    ga(r, c) = g(0, 0);
    t.accumulate(ia, ga);
  });
}

template <class S>
Var<S> vstack(const std::vector<Var<S>>& rows) {
  if (rows.empty()) throw std::invalid_argument("vstack: empty input");
  Tape<S>& t = *rows.front().tape();
  const Eigen::Index cols = rows.front().cols();
  Eigen::Index total = 0;
  bool rg = false;
  for (const auto& r : rows) {
    if (r.tape() != &t) throw std::invalid_argument("vstack: mixed tapes");
    if (r.cols() != cols) throw std::invalid_argument("vstack: column extents disagree");
    total += r.rows();
    rg = rg || r.requires_grad();
  }
  Mat<S> out(total, cols);
  std::vector<std::size_t> ids;
  std::vector<Eigen::Index> offsets, lens;
  Eigen::Index at = 0;
  for (const auto& r : rows) {
    out.middleRows(at, r.rows()) = r.value();
    ids.push_back(r.id());
    offsets.push_back(at);
    lens.push_back(r.rows());
    at += r.rows();
  }
  return t.make(std::move(out), rg,
                [ids = std::move(ids), offsets = std::move(offsets), lens = std::move(lens)](
                    Tape<S>& t, const Mat<S>&, const Mat<S>& g) {
                  for (std::size_t k = 0; k < ids.size(); ++k)
                    t.accumulate(ids[k], Mat<S>(g.middleRows(offsets[k], lens[k])));
                });
}

// ---------------------------------------------------------------------------
// reductions / broadcast
// ---------------------------------------------------------------------------

template <class S>
Var<S> sum(Var<S> a) {
  Tape<S>& t = *a.tape();
  Mat<S> out(1, 1);
  out(0, 0) = a.value().sum();
  const std::size_t ia = a.id();
  return t.make(std::move(out), a.requires_grad(), [ia](Tape<S>& t, const Mat<S>&, const Mat<S>& g) {
    t.accumulate(ia, Mat<S>(Mat<S>::Constant(t.value(ia).rows(), t.value(ia).cols(), g(0, 0))));
  });
}

template <class S>
Var<S> mean(Var<S> a) {
  return scale(sum(a), S(1) / static_cast<S>(a.size()));
}

// broadcast multiply by a 1x1 tensor
template <class S>
Var<S> mul_scalar(Var<S> a, Var<S> s) {
  auto& t = detail::same_tape(a, s);
  if (s.size() != 1) throw std::invalid_argument("mul_scalar: multiplier must be 1x1");
  const bool rg = a.requires_grad() || s.requires_grad();
  Mat<S> out = a.value() * s.value()(0, 0);
  const std::size_t ia = a.id(), is = s.id();
  return t.make(std::move(out), rg, [ia, is](Tape<S>& t, const Mat<S>&, const Mat<S>& g) {
    t.accumulate(ia, Mat<S>(g * t.value(is)(0, 0)));
    Mat<S> gs(1, 1);
    gs(0, 0) = g.cwiseProduct(t.value(ia)).sum();
    t.accumulate(is, gs);
  });
}

// add a 1xC row vector to every row
template <class S>
Var<S> add_rowvec(Var<S> a, Var<S> b) {
  auto& t = detail::same_tape(a, b);
  if (b.rows() != 1 || b.cols() != a.cols()) throw std::invalid_argument("add_rowvec: bias must be 1 x cols(a)");
  const bool rg = a.requires_grad() || b.requires_grad();
  Mat<S> out = a.value().rowwise() + b.value().row(0);
  const std::size_t ia = a.id(), ib = b.id();
  return t.make(std::move(out), rg, [ia, ib](Tape<S>& t, const Mat<S>&, const Mat<S>& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, Mat<S>(g.colwise().sum()));
  });
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

// Row-wise log-softmax, computed with max subtraction. A vector input
// (single row or single column) is treated as one distribution.
template <class S>
Var<S> log_softmax(Var<S> a) {
  Tape<S>& t = *a.tape();
  const bool vector_in = (a.rows() == 1 || a.cols() == 1);
  const bool column_vector = vector_in && a.cols() == 1 && a.rows() > 1;
  Mat<S> x = column_vector ? Mat<S>(a.value().transpose()) : a.value();
  Mat<S> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S m = x.row(r).maxCoeff();
    const S lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  if (column_vector) out = out.transpose().eval();
  const std::size_t ia = a.id();
  return t.make(std::move(out), a.requires_grad(),
                [ia, column_vector](Tape<S>& t, const Mat<S>& y, const Mat<S>& g) {
                  Mat<S> yy = column_vector ? Mat<S>(y.transpose()) : y;
                  Mat<S> gg = column_vector ? Mat<S>(g.transpose()) : g;
                  Mat<S> gx(gg.rows(), gg.cols());
                  for (Eigen::Index r = 0; r < gg.rows(); ++r) {
                    const S gsum = gg.row(r).sum();
                    gx.row(r) = gg.row(r).array() - yy.row(r).array().exp() * gsum;
                  }
                  if (column_vector) gx = gx.transpose().eval();
                  t.accumulate(ia, gx);
                });
}

// ---------------------------------------------------------------------------
// operator sugar
// ---------------------------------------------------------------------------

template <class S> Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <class S> Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }
template <class S> Var<S> operator*(Var<S> a, Var<S> b) { return mul(a, b); }
template <class S> Var<S> operator*(Var<S> a, S c) { return scale(a, c); }
template <class S> Var<S> operator*(S c, Var<S> a) { return scale(a, c); }
template <class S> Var<S> operator-(Var<S> a) { return scale(a, S(-1)); }

// x / max(||x||_2, floor); never NaN, even on an all-zero vector
template <class S>
Var<S> l2_normalize(Var<S> x, S floor = S(1e-12)) {
  Tape<S>& t = *x.tape();
  Var<S> norm = sqrt(sum(mul(x, x)));
  Var<S> clamped = add(hinge_pos(add(norm, t.scalar(-floor))), t.scalar(floor));
  return mul_scalar(x, recip(clamped));
}

}  // namespace ssr
