#pragma once

// Dense real tensors with a reverse-mode tape.
//
// A Tensor is a shared handle onto a node holding values and (lazily) grads.
// Every primitive takes the Tape it should record onto; a tape constructed
// with recording=false turns the same calls into a pure inference path.
// All reductions accumulate in a fixed left-to-right order so that results
// and gradients are bit-reproducible for identical inputs.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dyneval/errors.hpp"

namespace dyneval {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

template <class T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor: zero-sized dimension in " + shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->value.assign(shape_size(shape), fill);
    t.node_->shape = std::move(shape);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_values(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_size(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    }
    Tensor t = zeros(std::move(shape), requires_grad);
    t.node_->value = std::move(values);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  // Leading dimensions flattened; the last axis is the feature axis.
  std::size_t cols() const { return node_->shape.back(); }
  std::size_t rows() const { return size() / cols(); }

  std::vector<T>& data() & { return node_->value; }
  const std::vector<T>& data() const& { return node_->value; }
  // Temporaries hand out a copy so `for (x : f().data())` stays valid.
  std::vector<T> data() && { return node_->value; }
  std::span<T> values() { return node_->value; }
  std::span<const T> values() const { return node_->value; }
  T at(std::size_t i) const { return node_->value.at(i); }

  T item() const {
    if (size() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<T>& grad_or_empty() const { return node_->grad; }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
  void drop_grad() { node_->grad.clear(); }

  Tensor detach_copy() const {
    Tensor t = from_values(shape(), node_->value, false);
    return t;
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  std::shared_ptr<Node> share() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

template <class T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  bool wants(const Tensor<T>& t) const { return recording_ && t.requires_grad(); }
  std::size_t size() const { return ops_.size(); }

  void record(std::function<void()> backward_rule) { ops_.push_back(std::move(backward_rule)); }

  // Seeds d(loss)/d(loss) = 1 and replays the recorded rules in reverse.
  // The tape is consumed: a second backward() needs a fresh forward pass.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw UsageError("backward: loss must be a scalar, got " +
                       (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    if (!loss.requires_grad()) throw UsageError("backward: loss is not on the tape");
    auto node = loss.share();
    node->ensure_grad();
    node->grad[0] = T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

  void clear() { ops_.clear(); }

 private:
  bool recording_;
  std::vector<std::function<void()>> ops_;
};

namespace detail {

// C[m x n] += A[m x k] * B[k x n]; each output element sums over k in order,
// so a row's result does not depend on how many rows are computed with it.
template <class T>
void gemm_acc(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* __restrict c0 = c + i * n;
    T* __restrict c1 = c0 + n;
    T* __restrict c2 = c1 + n;
    T* __restrict c3 = c2 + n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T a0 = arow[p], a1 = arow[k + p], a2 = arow[2 * k + p], a3 = arow[3 * k + p];
      const T* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T bj = brow[j];
        c0[j] += a0 * bj;
        c1[j] += a1 * bj;
        c2[j] += a2 * bj;
        c3[j] += a3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    T* __restrict crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      const T* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <class T>
std::vector<T> transposed(const T* src, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
  return out;
}

template <class T>
bool any_wants(const Tape<T>& tape, const Tensor<T>& a) {
  return tape.wants(a);
}
template <class T, class... Rest>
bool any_wants(const Tape<T>& tape, const Tensor<T>& a, const Rest&... rest) {
  return tape.wants(a) || any_wants(tape, rest...);
}

template <class T>
void require_rank2(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace detail

template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros({m, n});
  detail::gemm_acc(m, k, n, a.data().data(), b.data().data(), out.data().data());
  if (detail::any_wants(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record([an = a.share(), bn = b.share(), on = out.share(), m, k, n] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        const auto bt = detail::transposed(bn->value.data(), k, n);
        detail::gemm_acc(m, n, k, on->grad.data(), bt.data(), an->grad.data());
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        const auto at = detail::transposed(an->value.data(), m, k);
        detail::gemm_acc(k, m, n, at.data(), on->grad.data(), bn->grad.data());
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto& o = out.data();
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  if (detail::any_wants(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record([an = a.share(), bn = b.share(), on = out.share()] {
      if (on->grad.empty()) return;
      for (auto* in : {an.get(), bn.get()}) {
        if (!in->requires_grad) continue;
        in->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) in->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

// x[.. x n] + bias[n], broadcast over rows.
template <class T>
Tensor<T> add_rowwise(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.size() != x.cols()) {
    throw DimensionError("add_rowwise: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.data()[r * cols + c] = x.data()[r * cols + c] + bias.data()[c];
  if (detail::any_wants(tape, x, bias)) {
    out.set_requires_grad(true);
    tape.record([xn = x.share(), bn = bias.share(), on = out.share(), rows, cols] {
      if (on->grad.empty()) return;
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) bn->grad[c] += on->grad[r * cols + c];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (detail::any_wants(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record([an = a.share(), bn = b.share(), on = out.share()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * factor;
  if (tape.wants(a)) {
    out.set_requires_grad(true);
    tape.record([an = a.share(), on = out.share(), factor] {
      if (on->grad.empty()) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * factor;
    });
  }
  return out;
}

// tanh approximation of GeLU.
template <class T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  constexpr T kAlpha = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kCubic = T(0.044715);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    out.data()[i] = T(0.5) * v * (T(1) + std::tanh(kAlpha * (v + kCubic * v * v * v)));
  }
  if (tape.wants(x)) {
    out.set_requires_grad(true);
    tape.record([xn = x.share(), on = out.share()] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const T v = xn->value[i];
        const T t = std::tanh(kAlpha * (v + kCubic * v * v * v));
        const T dt = kAlpha * (T(1) + T(3) * kCubic * v * v);
        const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * dt;
        xn->grad[i] += on->grad[i] * d;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps) {
  if (!(eps > T(0))) throw DimensionError("layer_norm: eps must be positive");
  const std::size_t d = x.cols();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.rows();
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= T(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= T(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (xr[c] - mean) * rstd[r];
      xhat[r * d + c] = h;
      out.data()[r * d + c] = gain.data()[c] * h + bias.data()[c];
    }
  }
  if (detail::any_wants(tape, x, gain, bias)) {
    out.set_requires_grad(true);
    tape.record([xn = x.share(), gn = gain.share(), bn = bias.share(), on = out.share(),
                 xhat = std::move(xhat), rstd = std::move(rstd), rows, d] {
      if (on->grad.empty()) return;
      const auto& dy = on->grad;
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < d; ++c) gn->grad[c] += dy[r * d + c] * xhat[r * d + c];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < d; ++c) bn->grad[c] += dy[r * d + c];
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t c = 0; c < d; ++c) {
            const T dh = dy[r * d + c] * gn->value[c];
            mean_dh += dh;
            mean_dh_h += dh * xhat[r * d + c];
          }
          mean_dh /= T(d);
          mean_dh_h /= T(d);
          for (std::size_t c = 0; c < d; ++c) {
            const T dh = dy[r * d + c] * gn->value[c];
            xn->grad[r * d + c] += rstd[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h);
          }
        }
      }
    });
  }
  return out;
}

// Row gather from table[V x d].
template <class T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, std::span<const int> ids) {
  detail::require_rank2(table, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding: token id " + std::to_string(ids[i]) + " at position " +
                       std::to_string(i) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  Tensor<T> out = Tensor<T>::zeros({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const T* src = table.data().data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(src, src + d, out.data().data() + i * d);
  }
  if (tape.wants(table)) {
    out.set_requires_grad(true);
    tape.record([tn = table.share(), on = out.share(), idv = std::vector<int>(ids.begin(), ids.end()), d] {
      if (on->grad.empty()) return;
      tn->ensure_grad();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        T* dst = tn->grad.data() + static_cast<std::size_t>(idv[i]) * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += on->grad[i * d + c];
      }
    });
  }
  return out;
}

namespace detail {

// Numerically stable softmax of one row into out; returns log(sum exp(x - max)) + max.
template <class T>
T softmax_row(const T* x, T* out, std::size_t n) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
  T sum = 0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(x[j] - mx);
    sum += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
  return mx + std::log(sum);
}

}  // namespace detail

template <class T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x) {
  const std::size_t rows = x.rows(), n = x.cols();
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    detail::softmax_row(x.data().data() + r * n, out.data().data() + r * n, n);
  if (tape.wants(x)) {
    out.set_requires_grad(true);
    tape.record([xn = x.share(), on = out.share(), rows, n] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = on->value.data() + r * n;
        const T* dy = on->grad.data() + r * n;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) xn->grad[r * n + j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

// Per-row negative log-likelihood in nats: logsumexp(logits_t) - logits_t[target_t].
template <class T>
Tensor<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> targets) {
  detail::require_rank2(logits, "softmax_cross_entropy");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
  }
  for (std::size_t t = 0; t < rows; ++t) {
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(targets[t]) + " at position " +
                       std::to_string(t) + " outside [0, " + std::to_string(vocab) + ")");
    }
  }
  Tensor<T> out = Tensor<T>::zeros({rows});
  std::vector<T> probs(rows * vocab);
  for (std::size_t t = 0; t < rows; ++t) {
    const T* x = logits.data().data() + t * vocab;
    const T lse = detail::softmax_row(x, probs.data() + t * vocab, vocab);
    out.data()[t] = std::max(T(0), lse - x[targets[t]]);
  }
  if (tape.wants(logits)) {
    out.set_requires_grad(true);
    tape.record([ln = logits.share(), on = out.share(), probs = std::move(probs),
                 tv = std::vector<int>(targets.begin(), targets.end()), rows, vocab] {
      if (on->grad.empty()) return;
      ln->ensure_grad();
      for (std::size_t t = 0; t < rows; ++t) {
        const T g = on->grad[t];
        T* dst = ln->grad.data() + t * vocab;
        const T* p = probs.data() + t * vocab;
        for (std::size_t j = 0; j < vocab; ++j) dst[j] += g * p[j];
        dst[tv[t]] -= g;
      }
    });
  }
  return out;
}

// Multi-head scaled dot-product attention.
// q: [L x H*dk], k/v: [S x H*dk], bias: [H x L x S] additive logits bias
// (no gradient; -inf entries mask a key out). Returns [L x H*dk].
template <class T>
Tensor<T> attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const Tensor<T>& bias, std::size_t heads) {
  detail::require_rank2(q, "attention");
  detail::require_rank2(k, "attention");
  detail::require_same_shape(k, v, "attention");
  const std::size_t len = q.dim(0), width = q.dim(1), keys = k.dim(0);
  if (heads == 0 || width % heads != 0 || k.dim(1) != width) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         " with " + std::to_string(heads) + " heads");
  }
  if (bias.shape() != Shape{heads, len, keys}) {
    throw DimensionError("attention: bias " + shape_str(bias.shape()) + " expected " +
                         shape_str({heads, len, keys}));
  }
  const std::size_t dk = width / heads;
  const T scl = T(1) / std::sqrt(T(dk));
  std::vector<T> probs(heads * len * keys, T(0));
  Tensor<T> out = Tensor<T>::zeros({len, width});
  const T* qv = q.data().data();
  const T* kv = k.data().data();
  const T* vv = v.data().data();
  const T* bv = bias.data().data();
  constexpr T kNegInf = -std::numeric_limits<T>::infinity();
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < len; ++i) {
      T* p = probs.data() + (h * len + i) * keys;
      const T* b = bv + (h * len + i) * keys;
      const T* qi = qv + i * width + h * dk;
      T mx = kNegInf;
      for (std::size_t j = 0; j < keys; ++j) {
        if (b[j] == kNegInf) {
          p[j] = kNegInf;
          continue;
        }
        const T* kj = kv + j * width + h * dk;
        T s = 0;
        for (std::size_t c = 0; c < dk; ++c) s += qi[c] * kj[c];
        p[j] = s * scl + b[j];
        mx = std::max(mx, p[j]);
      }
      T sum = 0;
      for (std::size_t j = 0; j < keys; ++j) {
        p[j] = (p[j] == kNegInf) ? T(0) : std::exp(p[j] - mx);
        sum += p[j];
      }
      T* oi = out.data().data() + i * width + h * dk;
      for (std::size_t j = 0; j < keys; ++j) {
        p[j] /= sum;
        if (p[j] == T(0)) continue;
        const T* vj = vv + j * width + h * dk;
        for (std::size_t c = 0; c < dk; ++c) oi[c] += p[j] * vj[c];
      }
    }
  }
  if (detail::any_wants(tape, q, k, v)) {
    out.set_requires_grad(true);
    tape.record([qn = q.share(), kn = k.share(), vn = v.share(), on = out.share(), probs = std::move(probs),
                 heads, len, keys, width, dk, scl] {
      if (on->grad.empty()) return;
      if (qn->requires_grad) qn->ensure_grad();
      if (kn->requires_grad) kn->ensure_grad();
      if (vn->requires_grad) vn->ensure_grad();
      std::vector<T> dp(keys);
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < len; ++i) {
          const T* p = probs.data() + (h * len + i) * keys;
          const T* doi = on->grad.data() + i * width + h * dk;
          T dot = 0;
          for (std::size_t j = 0; j < keys; ++j) {
            dp[j] = 0;
            if (p[j] == T(0)) continue;
            const T* vj = vn->value.data() + j * width + h * dk;
            T s = 0;
            for (std::size_t c = 0; c < dk; ++c) s += doi[c] * vj[c];
            dp[j] = s;
            dot += p[j] * s;
            if (vn->requires_grad) {
              T* dvj = vn->grad.data() + j * width + h * dk;
              for (std::size_t c = 0; c < dk; ++c) dvj[c] += p[j] * doi[c];
            }
          }
          const T* qi = qn->value.data() + i * width + h * dk;
          for (std::size_t j = 0; j < keys; ++j) {
            if (p[j] == T(0)) continue;
            const T ds = p[j] * (dp[j] - dot) * scl;
            if (qn->requires_grad) {
              const T* kj = kn->value.data() + j * width + h * dk;
              T* dqi = qn->grad.data() + i * width + h * dk;
              for (std::size_t c = 0; c < dk; ++c) dqi[c] += ds * kj[c];
            }
            if (kn->requires_grad) {
              T* dkj = kn->grad.data() + j * width + h * dk;
              for (std::size_t c = 0; c < dk; ++c) dkj[c] += ds * qi[c];
            }
          }
        }
      }
    });
  }
  return out;
}

// Stack a[m x n] on top of b[p x n].
template <class T>
Tensor<T> concat_rows(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a, "concat_rows");
  detail::require_rank2(b, "concat_rows");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("concat_rows: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros({a.dim(0) + b.dim(0), a.dim(1)});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  if (detail::any_wants(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record([an = a.share(), bn = b.share(), on = out.share()] {
      if (on->grad.empty()) return;
      const std::size_t na = an->value.size();
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < na; ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < bn->value.size(); ++i) bn->grad[i] += on->grad[na + i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor<T> out = Tensor<T>::from_values(std::move(shape), a.data());
  if (tape.wants(a)) {
    out.set_requires_grad(true);
    tape.record([an = a.share(), on = out.share()] {
      if (on->grad.empty()) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor<T> out = Tensor<T>::from_values({c, r}, detail::transposed(a.data().data(), r, c));
  if (tape.wants(a)) {
    out.set_requires_grad(true);
    tape.record([an = a.share(), on = out.share(), r, c] {
      if (on->grad.empty()) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) an->grad[i * c + j] += on->grad[j * r + i];
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  Tensor<T> out = Tensor<T>::from_values({1}, {s});
  if (tape.wants(a)) {
    out.set_requires_grad(true);
    tape.record([an = a.share(), on = out.share()] {
      if (on->grad.empty()) return;
      an->ensure_grad();
      for (auto& g : an->grad) g += on->grad[0];
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a) {
  return scale(tape, sum(tape, a), T(1) / T(a.size()));
}

}  // namespace dyneval
