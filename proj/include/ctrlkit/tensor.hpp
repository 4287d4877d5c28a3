#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctrlkit/errors.hpp"
#include "ctrlkit/rng.hpp"

namespace ctrlkit {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array with an optional gradient buffer.
///
/// A Tensor is a handle: copies share storage. This is what makes tied
/// weights work (two parameter slots holding the same handle). Use clone()
/// for a deep copy.
template <typename T = float>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() : s_(std::make_shared<Storage>()) {}

  explicit Tensor(Shape shape, bool requires_grad = false) : s_(std::make_shared<Storage>()) {
    for (std::size_t d : shape)
      if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
    s_->data.assign(shape_numel(shape), T(0));
    s_->shape = std::move(shape);
    s_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : s_(std::make_shared<Storage>()) {
    for (std::size_t d : shape)
      if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
    if (shape_numel(shape) != data.size())
      throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                           shape_str(shape));
    s_->shape = std::move(shape);
    s_->data = std::move(data);
    s_->requires_grad = requires_grad;
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.s_->data.begin(), t.s_->data.end(), value);
    return t;
  }

  const Shape& shape() const noexcept { return s_->shape; }
  std::size_t rank() const noexcept { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const noexcept { return s_->data.size(); }
  bool empty() const noexcept { return s_->data.empty(); }

  // Row view used by row-wise ops: last dimension is the row width.
  std::size_t cols() const noexcept { return s_->shape.empty() ? 1 : s_->shape.back(); }
  std::size_t rows() const noexcept { return numel() / std::max<std::size_t>(cols(), 1); }

  std::span<T> data() noexcept { return s_->data; }
  std::span<const T> data() const noexcept { return s_->data; }
  T& operator[](std::size_t i) noexcept { return s_->data[i]; }
  const T& operator[](std::size_t i) const noexcept { return s_->data[i]; }
  T& at(std::size_t r, std::size_t c) noexcept { return s_->data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const noexcept { return s_->data[r * cols() + c]; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const noexcept { return s_->requires_grad; }
  void set_requires_grad(bool v) noexcept { s_->requires_grad = v; }

  bool has_grad() const noexcept { return !s_->grad.empty(); }
  std::span<T> grad() noexcept { return s_->grad; }
  std::span<const T> grad() const noexcept { return s_->grad; }
  void ensure_grad() {
    if (s_->grad.empty()) s_->grad.assign(numel(), T(0));
  }
  void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), T(0)); }
  void drop_grad() { std::vector<T>().swap(s_->grad); }

  bool same_storage(const Tensor& other) const noexcept { return s_ == other.s_; }

  Tensor clone() const {
    Tensor t;
    t.s_->shape = s_->shape;
    t.s_->data = s_->data;
    t.s_->requires_grad = s_->requires_grad;
    return t;
  }

  bool all_finite() const noexcept {
    return std::all_of(s_->data.begin(), s_->data.end(), [](T v) { return std::isfinite(v); });
  }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

namespace detail {

// C[m x n] += A[m x k] * B[k x n]. Row i of C reads only row i of A.
template <typename T>
void gemm_acc(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
std::vector<T> transposed(const T* x, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = x[r * cols + c];
  return out;
}

// Keep-mask for dropout. Element e of the tensor is dropped iff its draw < p.
inline bool dropout_keep(const CounterRng& rng, std::uint64_t element, double p) {
  return rng.uniform_at(element) >= p;
}

}  // namespace detail

/// Identifies a dropout call site: replaying the same key reproduces the mask.
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t layer = 0;
  std::uint64_t site = 0;
};

/// Records operations in execution order and runs reverse-mode
/// differentiation over them. An op is recorded only when the tape is
/// recording and at least one input requires a gradient. Not thread-safe;
/// use one tape per thread.
template <typename T = float>
class Tape {
 public:
  using TensorT = Tensor<T>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward closure in
  /// exact reverse order. Parameter grads accumulate across calls.
  void backward(TensorT& loss) {
    if (loss.numel() != 1) throw DimensionError("backward() needs a scalar, got " + shape_str(loss.shape()));
    std::vector<T> seed{T(1)};
    backward(loss, seed);
  }

  void backward(TensorT& root, std::span<const T> upstream) {
    if (upstream.size() != root.numel()) throw DimensionError("upstream gradient size mismatch");
    root.ensure_grad();
    for (std::size_t i = 0; i < upstream.size(); ++i) root.grad()[i] += upstream[i];
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  // ---- linear algebra -------------------------------------------------

  TensorT matmul(const TensorT& a, const TensorT& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
      throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT out({m, n});
    detail::gemm_acc(m, k, n, a.data().data(), b.data().data(), out.data().data());
    if (track(out, {&a, &b})) {
      record([a = TensorT(a), b = TensorT(b), out, m, k, n]() mutable {
        if (!out.has_grad()) return;
        const T* dc = out.grad().data();
        if (a.requires_grad()) {
          a.ensure_grad();
          auto bt = detail::transposed(b.data().data(), k, n);  // n x k
          detail::gemm_acc(m, n, k, dc, bt.data(), a.grad().data());
        }
        if (b.requires_grad()) {
          b.ensure_grad();
          auto at = detail::transposed(a.data().data(), m, k);  // k x m
          detail::gemm_acc(k, m, n, at.data(), dc, b.grad().data());
        }
      });
    }
    return out;
  }

  TensorT transpose(const TensorT& x) {
    if (x.rank() != 2) throw DimensionError("transpose needs a matrix, got " + shape_str(x.shape()));
    const std::size_t r = x.dim(0), c = x.dim(1);
    TensorT out({c, r}, detail::transposed(x.data().data(), r, c));
    if (track(out, {&x})) {
      record([x = TensorT(x), out, r, c]() mutable {
        if (!out.has_grad()) return;
        x.ensure_grad();
        auto g = x.grad();
        auto dg = out.grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += dg[j * r + i];
      });
    }
    return out;
  }

  // ---- elementwise ----------------------------------------------------

  TensorT add(const TensorT& a, const TensorT& b) {
    if (a.shape() != b.shape())
      throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
    TensorT out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
    if (track(out, {&a, &b})) {
      record([a = TensorT(a), b = TensorT(b), out]() mutable {
        if (!out.has_grad()) return;
        for (TensorT* t : {&a, &b}) {
          if (!t->requires_grad()) continue;
          t->ensure_grad();
          auto g = t->grad();
          auto dg = out.grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += dg[i];
        }
      });
    }
    return out;
  }

  TensorT scale(const TensorT& x, T s) {
    TensorT out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * s;
    if (track(out, {&x})) {
      record([x = TensorT(x), out, s]() mutable {
        if (!out.has_grad()) return;
        x.ensure_grad();
        auto g = x.grad();
        auto dg = out.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dg[i] * s;
      });
    }
    return out;
  }

  TensorT relu(const TensorT& x) {
    TensorT out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    if (track(out, {&x})) {
      record([x = TensorT(x), out]() mutable {
        if (!out.has_grad()) return;
        x.ensure_grad();
        auto g = x.grad();
        auto dg = out.grad();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x[i] > T(0)) g[i] += dg[i];
      });
    }
    return out;
  }

  /// Identity when `training` is false or p == 0. Otherwise zeroes each
  /// element with probability p and scales survivors by 1/(1-p). The mask
  /// is a pure function of the key and the element index.
  TensorT dropout(const TensorT& x, double p, bool training, DropoutKey key) {
    if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout probability must be in [0, 1)");
    if (!training || p == 0.0) return x;
    const CounterRng rng(key.seed, {key.step, key.layer, key.site});
    const T keep_scale = T(1.0 / (1.0 - p));
    TensorT out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i)
      out[i] = detail::dropout_keep(rng, i, p) ? x[i] * keep_scale : T(0);
    if (track(out, {&x})) {
      record([x = TensorT(x), out, rng, p, keep_scale]() mutable {
        if (!out.has_grad()) return;
        x.ensure_grad();
        auto g = x.grad();
        auto dg = out.grad();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (detail::dropout_keep(rng, i, p)) g[i] += dg[i] * keep_scale;
      });
    }
    return out;
  }

  // ---- row-wise -------------------------------------------------------

  /// Softmax over the last dimension with max subtraction. -inf entries are
  /// treated as masked (probability 0); NaN, +inf, or a fully masked row
  /// raise NumericError.
  TensorT softmax_rows(const TensorT& x) {
    const std::size_t rows = x.rows(), n = x.cols();
    TensorT out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = x.data().data() + r * n;
      T* yr = out.data().data() + r * n;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (std::isnan(xr[j]) || xr[j] == std::numeric_limits<T>::infinity())
          throw NumericError("softmax_rows: non-finite input");
        mx = std::max(mx, xr[j]);
      }
      if (mx == -std::numeric_limits<T>::infinity()) throw NumericError("softmax_rows: fully masked row");
      T sum = 0;
      for (std::size_t j = 0; j < n; ++j) {
        yr[j] = std::exp(xr[j] - mx);
        sum += yr[j];
      }
      const T inv = T(1) / sum;
      for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
    }
    if (track(out, {&x})) {
      record([x = TensorT(x), out, rows, n]() mutable {
        if (!out.has_grad()) return;
        x.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* y = out.data().data() + r * n;
          const T* dy = out.grad().data() + r * n;
          T* dx = x.grad().data() + r * n;
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
          for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
      });
    }
    return out;
  }

  /// Per-row normalization to zero mean / unit (biased) variance, then
  /// gain * x_hat + bias.
  TensorT layernorm(const TensorT& x, const TensorT& gain, const TensorT& bias, T eps = T(1e-5)) {
    const std::size_t rows = x.rows(), d = x.cols();
    if (gain.numel() != d || bias.numel() != d)
      throw DimensionError("layernorm parameter shape mismatch: x " + shape_str(x.shape()) + ", gain " +
                           shape_str(gain.shape()) + ", bias " + shape_str(bias.shape()));
    TensorT out(x.shape());
    std::vector<T> xhat(x.numel());
    std::vector<T> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = x.data().data() + r * d;
      T mean = 0;
      for (std::size_t j = 0; j < d; ++j) mean += xr[j];
      mean /= T(d);
      T var = 0;
      for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
      var /= T(d);
      rstd[r] = T(1) / std::sqrt(var + eps);
      for (std::size_t j = 0; j < d; ++j) {
        xhat[r * d + j] = (xr[j] - mean) * rstd[r];
        out[r * d + j] = gain[j] * xhat[r * d + j] + bias[j];
      }
    }
    if (track(out, {&x, &gain, &bias})) {
      record([x = TensorT(x), gain = TensorT(gain), bias = TensorT(bias), out, xhat = std::move(xhat), rstd = std::move(rstd), rows, d]() mutable {
        if (!out.has_grad()) return;
        auto dy = out.grad();
        if (gain.requires_grad()) gain.ensure_grad();
        if (bias.requires_grad()) bias.ensure_grad();
        if (x.requires_grad()) x.ensure_grad();
        std::vector<T> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dyr = dy.data() + r * d;
          const T* xh = xhat.data() + r * d;
          if (gain.requires_grad())
            for (std::size_t j = 0; j < d; ++j) gain.grad()[j] += dyr[j] * xh[j];
          if (bias.requires_grad())
            for (std::size_t j = 0; j < d; ++j) bias.grad()[j] += dyr[j];
          if (!x.requires_grad()) continue;
          T mean_dxhat = 0, mean_dxhat_xhat = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
          }
          mean_dxhat /= T(d);
          mean_dxhat_xhat /= T(d);
          T* dx = x.grad().data() + r * d;
          for (std::size_t j = 0; j < d; ++j) dx[j] += rstd[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
      });
    }
    return out;
  }

  /// Sets entries strictly above the diagonal of each n x n score matrix to
  /// -inf so a position can only attend to itself and earlier positions.
  TensorT causal_mask(const TensorT& scores) {
    if (scores.rank() != 2 || scores.dim(0) != scores.dim(1))
      throw DimensionError("causal_mask needs a square matrix, got " + shape_str(scores.shape()));
    const std::size_t n = scores.dim(0);
    TensorT out(scores.shape());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out[i * n + j] = j > i ? -std::numeric_limits<T>::infinity() : scores[i * n + j];
    if (track(out, {&scores})) {
      record([scores = TensorT(scores), out, n]() mutable {
        if (!out.has_grad()) return;
        scores.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j <= i; ++j) scores.grad()[i * n + j] += out.grad()[i * n + j];
      });
    }
    return out;
  }

  /// Mean over rows of -log softmax(scores[r])[targets[r]]. Rows whose target
  /// is negative are skipped (not prediction positions).
  TensorT cross_entropy(const TensorT& scores, std::span<const std::int64_t> targets) {
    if (scores.rank() != 2 || scores.dim(0) != targets.size())
      throw DimensionError("cross_entropy: scores " + shape_str(scores.shape()) + " vs " +
                           std::to_string(targets.size()) + " targets");
    const std::size_t rows = scores.dim(0), v = scores.dim(1);
    std::vector<T> probs(scores.numel());
    double total = 0;
    std::size_t counted = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::int64_t t = targets[r];
      if (t < 0) continue;
      if (static_cast<std::size_t>(t) >= v)
        throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(v) + ")");
      const T* x = scores.data().data() + r * v;
      T* p = probs.data() + r * v;
      T mx = *std::max_element(x, x + v);
      if (!std::isfinite(mx)) throw NumericError("cross_entropy: non-finite scores");
      T sum = 0;
      for (std::size_t j = 0; j < v; ++j) {
        p[j] = std::exp(x[j] - mx);
        sum += p[j];
      }
      for (std::size_t j = 0; j < v; ++j) p[j] /= sum;
      total += static_cast<double>(std::log(sum) + mx - x[t]);
      ++counted;
    }
    if (counted == 0) throw ParameterError("cross_entropy: no prediction targets");
    TensorT out(Shape{1}, std::vector<T>{T(total / double(counted))});
    if (track(out, {&scores})) {
      std::vector<std::int64_t> tgt(targets.begin(), targets.end());
      record([scores = TensorT(scores), out, probs = std::move(probs), tgt = std::move(tgt), rows, v, counted]() mutable {
        if (!out.has_grad()) return;
        scores.ensure_grad();
        const T g = out.grad()[0] / T(counted);
        for (std::size_t r = 0; r < rows; ++r) {
          if (tgt[r] < 0) continue;
          T* ds = scores.grad().data() + r * v;
          const T* p = probs.data() + r * v;
          for (std::size_t j = 0; j < v; ++j) ds[j] += g * p[j];
          ds[tgt[r]] -= g;
        }
      });
    }
    return out;
  }

  // ---- gather / reshape ----------------------------------------------

  TensorT embed_lookup(const TensorT& table, std::span<const std::int64_t> ids) {
    if (table.rank() != 2) throw DimensionError("embedding table must be a matrix");
    if (ids.empty()) throw DimensionError("embed_lookup: empty id list");
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    TensorT out({ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab)
        throw IndexError("token id " + std::to_string(ids[r]) + " outside [0, " + std::to_string(vocab) + ")");
      std::copy_n(table.data().data() + ids[r] * d, d, out.data().data() + r * d);
    }
    if (track(out, {&table})) {
      std::vector<std::int64_t> idv(ids.begin(), ids.end());
      record([table = TensorT(table), out, idv = std::move(idv), d]() mutable {
        if (!out.has_grad()) return;
        table.ensure_grad();
        for (std::size_t r = 0; r < idv.size(); ++r) {
          T* g = table.grad().data() + idv[r] * d;
          const T* dg = out.grad().data() + r * d;
          for (std::size_t j = 0; j < d; ++j) g[j] += dg[j];
        }
      });
    }
    return out;
  }

  /// Column-wise concatenation of per-head n x d_head outputs.
  TensorT concat_heads(const std::vector<TensorT>& heads) { return concat(heads, /*columns=*/true); }

  TensorT concat_rows(const std::vector<TensorT>& parts) { return concat(parts, /*columns=*/false); }

  TensorT slice_cols(const TensorT& x, std::size_t start, std::size_t width) {
    if (x.rank() != 2 || width == 0 || start + width > x.dim(1))
      throw DimensionError("slice_cols [" + std::to_string(start) + ", +" + std::to_string(width) + ") of " +
                           shape_str(x.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    TensorT out({rows, width});
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(x.data().data() + r * cols + start, width, out.data().data() + r * width);
    if (track(out, {&x})) {
      record([x = TensorT(x), out, rows, cols, start, width]() mutable {
        if (!out.has_grad()) return;
        x.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < width; ++j) x.grad()[r * cols + start + j] += out.grad()[r * width + j];
      });
    }
    return out;
  }

  TensorT slice_rows(const TensorT& x, std::size_t start, std::size_t count) {
    if (x.rank() != 2 || count == 0 || start + count > x.dim(0))
      throw DimensionError("slice_rows [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                           shape_str(x.shape()));
    const std::size_t cols = x.dim(1);
    TensorT out({count, cols});
    std::copy_n(x.data().data() + start * cols, count * cols, out.data().data());
    if (track(out, {&x})) {
      record([x = TensorT(x), out, start, count, cols]() mutable {
        if (!out.has_grad()) return;
        x.ensure_grad();
        T* g = x.grad().data() + start * cols;
        for (std::size_t i = 0; i < count * cols; ++i) g[i] += out.grad()[i];
      });
    }
    return out;
  }

 private:
  bool track(TensorT& out, std::initializer_list<const TensorT*> inputs) const {
    if (!recording_) return false;
    for (const TensorT* t : inputs)
      if (t->requires_grad()) {
        out.set_requires_grad(true);
        return true;
      }
    return false;
  }

  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  TensorT concat(const std::vector<TensorT>& parts, bool columns) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    const std::size_t fixed = columns ? parts[0].dim(0) : parts[0].dim(1);
    std::size_t total = 0;
    for (const auto& p : parts) {
      if (p.rank() != 2 || (columns ? p.dim(0) : p.dim(1)) != fixed)
        throw DimensionError("concat shape mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
      total += columns ? p.dim(1) : p.dim(0);
    }
    TensorT out(columns ? Shape{fixed, total} : Shape{total, fixed});
    std::size_t offset = 0;
    for (const auto& p : parts) {
      if (columns) {
        const std::size_t w = p.dim(1);
        for (std::size_t r = 0; r < fixed; ++r)
          std::copy_n(p.data().data() + r * w, w, out.data().data() + r * total + offset);
        offset += w;
      } else {
        std::copy_n(p.data().data(), p.numel(), out.data().data() + offset);
        offset += p.numel();
      }
    }
    bool any = false;
    if (recording_)
      for (const auto& p : parts) any = any || p.requires_grad();
    if (any) {
      out.set_requires_grad(true);
      record([parts = std::vector<TensorT>(parts), out, columns, fixed, total]() mutable {
        if (!out.has_grad()) return;
        std::size_t offset = 0;
        for (auto& p : parts) {
          const std::size_t w = columns ? p.dim(1) : p.numel();
          if (p.requires_grad()) {
            p.ensure_grad();
            if (columns) {
              for (std::size_t r = 0; r < fixed; ++r)
                for (std::size_t j = 0; j < w; ++j) p.grad()[r * w + j] += out.grad()[r * total + offset + j];
            } else {
              for (std::size_t i = 0; i < w; ++i) p.grad()[i] += out.grad()[offset + i];
            }
          }
          offset += w;
        }
      });
    }
    return out;
  }

  bool recording_;
  std::vector<std::function<void()>> nodes_;
};

}  // namespace ctrlkit
