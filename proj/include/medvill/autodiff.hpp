#pragma once

#include "medvill/error.hpp"
#include "medvill/rng.hpp"
#include "medvill/tensor.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace medvill {

template <typename T>
class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Matrix<T>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode recording of a computation over dense matrices.
///
/// Nodes are appended in evaluation order, so a reverse sweep over node ids
/// is a valid topological order for backpropagation. A tape created with
/// `record = false` keeps values only and never stores backward closures.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Matrix<T> value) { return push(std::move(value), {}, nullptr); }

  /// Leaf bound to a named parameter. Requesting the same name twice returns
  /// the same node so that shared tensors accumulate a single gradient.
  Var<T> parameter(const std::string& name, const Matrix<T>& value) {
    if (auto it = param_ids_.find(name); it != param_ids_.end()) return Var<T>(this, it->second);
    Node n;
    n.value = value;
    n.requires_grad = record_;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    param_ids_.emplace(name, id);
    return Var<T>(this, id);
  }

  Var<T> push(Matrix<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    bool needs = false;
    if (record_ && fn) {
      for (const auto& p : parents) needs = needs || nodes_[static_cast<std::size_t>(p.id())].requires_grad;
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var<T> push(Matrix<T> value, const std::vector<Var<T>>& parents, BackwardFn fn) {
    bool needs = false;
    if (record_ && fn) {
      for (const auto& p : parents) needs = needs || nodes_[static_cast<std::size_t>(p.id())].requires_grad;
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Matrix<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Matrix<T>& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Gradient buffer of `id`, zero-initialised on first access.
  Matrix<T>& grad_buffer(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = Matrix<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  template <typename Expr>
  void accumulate(int id, const Eigen::MatrixBase<Expr>& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Backpropagates from a 1x1 loss node.
  void backward(Var<T> loss) {
    if (loss.rows() != 1 || loss.cols() != 1) {
      throw NumericError("backward() needs a scalar loss, got " + shape_string(loss.rows(), loss.cols()));
    }
    if (!record_) throw NumericError("backward() on a tape that did not record the forward pass");
    grad_buffer(loss.id()).setConstant(T(1));
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.backward && n.grad.size() != 0) n.backward(*this, id);
    }
  }

  /// Gradients of every parameter leaf on this tape; parameters the loss
  /// never reached get a zero gradient.
  std::map<std::string, Matrix<T>> parameter_gradients() const {
    std::map<std::string, Matrix<T>> out;
    for (const auto& [name, id] : param_ids_) {
      const Node& n = nodes_[static_cast<std::size_t>(id)];
      out.emplace(name, n.grad.size() ? n.grad : Matrix<T>::Zero(n.value.rows(), n.value.cols()));
    }
    return out;
  }

  /// Adds the gradients of reached parameters into `acc` (entries are created
  /// zero-filled on demand).
  void add_parameter_gradients(std::map<std::string, Matrix<T>>& acc) const {
    for (const auto& [name, id] : param_ids_) {
      const Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.size() == 0) continue;
      auto [it, inserted] = acc.try_emplace(name, n.grad);
      if (!inserted) it->second += n.grad;
    }
  }

  bool parameter_reached(const std::string& name) const {
    auto it = param_ids_.find(name);
    return it != param_ids_.end() && nodes_[static_cast<std::size_t>(it->second)].grad.size() != 0;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> param_ids_;
};

namespace ad {

namespace detail {

template <typename T>
void require(bool ok, const char* op, const Var<T>& a, const Var<T>& b) {
  if (!ok) {
    throw NumericError(std::string(op) + ": shape mismatch " + shape_string(a.rows(), a.cols()) + " vs " +
                       shape_string(b.rows(), b.cols()));
  }
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require(a.cols() == b.rows(), "matmul", a, b);
  Matrix<T> out = a.value() * b.value();
  return a.tape()->push(std::move(out), {a, b}, [ai = a.id(), bi = b.id()](Tape<T>& t, int self) {
    const Matrix<T>& g = t.grad(self);
    if (t.needs_grad(ai)) t.accumulate(ai, g * t.value(bi).transpose());
    if (t.needs_grad(bi)) t.accumulate(bi, t.value(ai).transpose() * g);
  });
}

/// a * b^T
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  detail::require(a.cols() == b.cols(), "matmul_nt", a, b);
  Matrix<T> out = a.value() * b.value().transpose();
  return a.tape()->push(std::move(out), {a, b}, [ai = a.id(), bi = b.id()](Tape<T>& t, int self) {
    const Matrix<T>& g = t.grad(self);
    if (t.needs_grad(ai)) t.accumulate(ai, g * t.value(bi));
    if (t.needs_grad(bi)) t.accumulate(bi, g.transpose() * t.value(ai));
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add", a, b);
  Matrix<T> out = a.value() + b.value();
  return a.tape()->push(std::move(out), {a, b}, [ai = a.id(), bi = b.id()](Tape<T>& t, int self) {
    const Matrix<T>& g = t.grad(self);
    if (t.needs_grad(ai)) t.accumulate(ai, g);
    if (t.needs_grad(bi)) t.accumulate(bi, g);
  });
}

/// Adds a 1 x n row vector to every row of `a`.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  detail::require(row.rows() == 1 && row.cols() == a.cols(), "add_row", a, row);
  Matrix<T> out = a.value().rowwise() + row.value().row(0);
  return a.tape()->push(std::move(out), {a, row}, [ai = a.id(), ri = row.id()](Tape<T>& t, int self) {
    const Matrix<T>& g = t.grad(self);
    if (t.needs_grad(ai)) t.accumulate(ai, g);
    if (t.needs_grad(ri)) t.accumulate(ri, g.colwise().sum());
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Matrix<T> out = a.value() * s;
  return a.tape()->push(std::move(out), {a}, [ai = a.id(), s](Tape<T>& t, int self) {
    t.accumulate(ai, t.grad(self) * s);
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->push(std::move(out), {a}, [ai = a.id()](Tape<T>& t, int self) {
    const T g = t.grad(self)(0, 0);
    t.accumulate(ai, Matrix<T>::Constant(t.value(ai).rows(), t.value(ai).cols(), g));
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Matrix<T> out = a.value().cwiseMax(T(0));
  return a.tape()->push(std::move(out), {a}, [ai = a.id()](Tape<T>& t, int self) {
    const Matrix<T>& x = t.value(ai);
    t.accumulate(ai, t.grad(self).cwiseProduct((x.array() > T(0)).template cast<T>().matrix()));
  });
}

/// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(Var<T> a) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  Matrix<T> out = a.value().unaryExpr([inv_sqrt2](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); });
  return a.tape()->push(std::move(out), {a}, [ai = a.id(), inv_sqrt2](Tape<T>& t, int self) {
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    Matrix<T> d = t.value(ai).unaryExpr([&](T x) {
      return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
    });
    t.accumulate(ai, t.grad(self).cwiseProduct(d));
  });
}

/// Row-wise layer normalisation with learned 1 x d gain and bias.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  detail::require(gamma.cols() == x.cols() && beta.cols() == x.cols(), "layer_norm", x, gamma);
  const Matrix<T>& xv = x.value();
  const Eigen::Index d = xv.cols();
  Matrix<T> xhat(xv.rows(), d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const T mean = xv.row(r).mean();
    const T var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Matrix<T> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return x.tape()->push(
      std::move(out), {x, gamma, beta},
      [xi = x.id(), gi = gamma.id(), bi = beta.id(), xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& t, int self) {
        const Matrix<T>& g = t.grad(self);
        if (t.needs_grad(gi)) t.accumulate(gi, g.cwiseProduct(xhat).colwise().sum());
        if (t.needs_grad(bi)) t.accumulate(bi, g.colwise().sum());
        if (t.needs_grad(xi)) {
          Matrix<T> dxhat = g.array().rowwise() * t.value(gi).row(0).array();
          const T n = static_cast<T>(dxhat.cols());
          Matrix<T> dx(dxhat.rows(), dxhat.cols());
          for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
            const T mean_d = dxhat.row(r).sum() / n;
            const T mean_dx = dxhat.row(r).dot(xhat.row(r)) / n;
            dx.row(r) = inv_std(r) * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx);
          }
          t.accumulate(xi, dx);
        }
      });
}

/// softmax(scores + mask) row by row with max subtraction.
template <typename T>
Var<T> masked_softmax(Var<T> scores, const Matrix<T>& mask) {
  if (mask.rows() != scores.rows() || mask.cols() != scores.cols()) {
    throw NumericError("masked_softmax: mask " + shape_string(mask.rows(), mask.cols()) + " vs scores " +
                       shape_string(scores.rows(), scores.cols()));
  }
  Matrix<T> z = scores.value() + mask;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const T m = z.row(r).maxCoeff();
    // Scalar exp: the vectorised one clamps large negative inputs, which would
    // leave blocked entries at a denormal instead of exactly zero.
    z.row(r) = (z.row(r).array() - m).unaryExpr([](T x) { return std::exp(x); });
    z.row(r) /= z.row(r).sum();
  }
  return scores.tape()->push(std::move(z), {scores}, [si = scores.id()](Tape<T>& t, int self) {
    const Matrix<T>& p = t.value(self);
    const Matrix<T>& g = t.grad(self);
    Eigen::Matrix<T, Eigen::Dynamic, 1> inner = g.cwiseProduct(p).rowwise().sum();
    Matrix<T> dz = p.cwiseProduct(Matrix<T>(g.colwise() - inner));
    t.accumulate(si, dz);
  });
}

/// Inverted dropout; identity when rate is zero.
template <typename T>
Var<T> dropout(Var<T> a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  const T keep_scale = T(1) / static_cast<T>(1.0 - rate);
  Matrix<T> keep(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < keep.size(); ++i) keep.data()[i] = rng.bernoulli(rate) ? T(0) : keep_scale;
  Matrix<T> out = a.value().cwiseProduct(keep);
  return a.tape()->push(std::move(out), {a}, [ai = a.id(), keep = std::move(keep)](Tape<T>& t, int self) {
    t.accumulate(ai, t.grad(self).cwiseProduct(keep));
  });
}

/// Rows of `a` selected by index (repeats allowed).
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<int> rows) {
  Matrix<T> out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) {
      throw NumericError("gather_rows: index " + std::to_string(rows[i]) + " out of range " +
                         std::to_string(a.rows()));
    }
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  return a.tape()->push(std::move(out), {a}, [ai = a.id(), rows = std::move(rows)](Tape<T>& t, int self) {
    const Matrix<T>& g = t.grad(self);
    Matrix<T>& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < rows.size(); ++i) ga.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    detail::require(p.cols() == cols, "concat_rows", parts.front(), p);
    rows += p.rows();
  }
  Matrix<T> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.rows();
  }
  return parts.front().tape()->push(std::move(out), parts, [spans = std::move(spans)](Tape<T>& t, int self) {
    const Matrix<T>& g = t.grad(self);
    for (const auto& [id, start] : spans) {
      if (t.needs_grad(id)) t.accumulate(id, g.middleRows(start, t.value(id).rows()));
    }
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  for (const auto& p : parts) {
    detail::require(p.rows() == rows, "concat_cols", parts.front(), p);
    cols += p.cols();
  }
  Matrix<T> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.cols();
  }
  return parts.front().tape()->push(std::move(out), parts, [spans = std::move(spans)](Tape<T>& t, int self) {
    const Matrix<T>& g = t.grad(self);
    for (const auto& [id, start] : spans) {
      if (t.needs_grad(id)) t.accumulate(id, g.middleCols(start, t.value(id).cols()));
    }
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.cols()) throw NumericError("slice_cols: range out of bounds");
  Matrix<T> out = a.value().middleCols(start, count);
  return a.tape()->push(std::move(out), {a}, [ai = a.id(), start, count](Tape<T>& t, int self) {
    t.grad_buffer(ai).middleCols(start, count) += t.grad(self);
  });
}

/// Non-overlapping or strided patch extraction (im2col without padding).
/// Input rows are the raster-ordered positions of a height x width grid with
/// `channels` columns; each output row holds one kernel window laid out as
/// (ky, kx, channel).
template <typename T>
Var<T> patches(Var<T> a, int height, int width, int kernel, int stride) {
  if (a.rows() != static_cast<Eigen::Index>(height) * width) throw NumericError("patches: grid size mismatch");
  if (height < kernel || width < kernel || (height - kernel) % stride || (width - kernel) % stride) {
    throw NumericError("patches: kernel " + std::to_string(kernel) + "/stride " + std::to_string(stride) +
                       " does not tile a " + std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  const int out_h = (height - kernel) / stride + 1;
  const int out_w = (width - kernel) / stride + 1;
  const Eigen::Index c = a.cols();
  std::vector<int> source(static_cast<std::size_t>(out_h) * out_w * kernel * kernel);
  std::size_t n = 0;
  for (int oy = 0; oy < out_h; ++oy)
    for (int ox = 0; ox < out_w; ++ox)
      for (int ky = 0; ky < kernel; ++ky)
        for (int kx = 0; kx < kernel; ++kx) source[n++] = (oy * stride + ky) * width + (ox * stride + kx);
  const Eigen::Index window = static_cast<Eigen::Index>(kernel) * kernel;
  Matrix<T> out(static_cast<Eigen::Index>(out_h) * out_w, window * c);
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    for (Eigen::Index w = 0; w < window; ++w)
      out.block(r, w * c, 1, c) = a.value().row(source[static_cast<std::size_t>(r * window + w)]);
  return a.tape()->push(std::move(out), {a}, [ai = a.id(), source = std::move(source), window, c](Tape<T>& t, int self) {
    const Matrix<T>& g = t.grad(self);
    Matrix<T>& ga = t.grad_buffer(ai);
    for (Eigen::Index r = 0; r < g.rows(); ++r)
      for (Eigen::Index w = 0; w < window; ++w)
        ga.row(source[static_cast<std::size_t>(r * window + w)]) += g.block(r, w * c, 1, c);
  });
}

/// Sum over rows of -log softmax(logits)[target]; 1x1 result.
template <typename T>
Var<T> softmax_cross_entropy_sum(Var<T> logits, std::vector<int> targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw NumericError("softmax_cross_entropy: target count does not match logit rows");
  }
  const Matrix<T>& z = logits.value();
  if (!z.allFinite()) throw NumericError("softmax_cross_entropy: non-finite logits");
  Matrix<T> probs(z.rows(), z.cols());
  T total = 0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const int y = targets[static_cast<std::size_t>(r)];
    if (y < 0 || y >= z.cols()) throw NumericError("softmax_cross_entropy: target out of range");
    const T m = z.row(r).maxCoeff();
    probs.row(r) = (z.row(r).array() - m).exp();
    const T denom = probs.row(r).sum();
    probs.row(r) /= denom;
    total += std::log(denom) + m - z(r, y);
  }
  Matrix<T> out(1, 1);
  out(0, 0) = total;
  return logits.tape()->push(std::move(out), {logits},
                             [li = logits.id(), probs = std::move(probs), targets = std::move(targets)](Tape<T>& t, int self) {
                               const T g = t.grad(self)(0, 0);
                               Matrix<T> d = probs;
                               for (std::size_t r = 0; r < targets.size(); ++r) d(static_cast<Eigen::Index>(r), targets[r]) -= T(1);
                               t.accumulate(li, d * g);
                             });
}

/// Sum of elementwise binary cross-entropy on sigmoid(logits), logit form.
template <typename T>
Var<T> bce_with_logits_sum(Var<T> logits, Matrix<T> targets) {
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
    throw NumericError("bce_with_logits: target shape mismatch");
  }
  const Matrix<T>& x = logits.value();
  if (!x.allFinite()) throw NumericError("bce_with_logits: non-finite logits");
  T total = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const T v = x.data()[i];
    total += std::max(v, T(0)) - v * targets.data()[i] + std::log1p(std::exp(-std::abs(v)));
  }
  Matrix<T> out(1, 1);
  out(0, 0) = total;
  return logits.tape()->push(std::move(out), {logits}, [li = logits.id(), targets = std::move(targets)](Tape<T>& t, int self) {
    const T g = t.grad(self)(0, 0);
    const Matrix<T>& xv = t.value(li);
    Matrix<T> d = xv.unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); }) - targets;
    t.accumulate(li, d * g);
  });
}

/// Affine map x W + b with W stored as in x out.
template <typename T>
Var<T> affine(Var<T> x, Var<T> weight, Var<T> bias) {
  return add_row(matmul(x, weight), bias);
}

}  // namespace ad

}  // namespace medvill
