#pragma once

// Dense row-major tensor and the deterministic numeric kernels the model and
// the explanation code are built from. Every reduction runs in a fixed index
// order so results are bit-reproducible between runs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace legrad {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

enum class DType : std::uint8_t { f32, f64 };

inline const char* dtype_name(DType t) { return t == DType::f32 ? "f32" : "f64"; }

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "only float and double tensors are supported");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    validate_shape();
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor vector(std::initializer_list<T> v) { return Tensor({v.size()}, std::vector<T>(v)); }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> d;
    d.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      d.insert(d.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(d));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
    return t;
  }

  /// 0, 1, 2, ... laid out in row-major order.
  static Tensor arange(Shape shape) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t.data_[i] = static_cast<T>(i);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw ShapeError("axis out of range");
    return shape_[axis];
  }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Row `i` of a rank-2 tensor.
  std::span<T> row(std::size_t i) { return {data_.data() + i * shape_[1], shape_[1]}; }
  std::span<const T> row(std::size_t i) const { return {data_.data() + i * shape_[1], shape_[1]}; }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> d(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(d));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  Tensor reshaped(Shape shape) const& {
    Tensor t = *this;
    return std::move(t).reshaped(std::move(shape));
  }
  Tensor reshaped(Shape shape) && {
    if (shape_numel(shape) != data_.size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    shape_ = std::move(shape);
    return std::move(*this);
  }

 private:
  void validate_shape() const {
    for (auto s : shape_)
      if (s == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
const Tensor<T>& require_finite(const Tensor<T>& t, const char* what) {
  if (!all_finite(t)) throw NumericError(std::string("non-finite values in ") + what);
  return t;
}

namespace detail {

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(s));
}

template <typename T, typename F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

}  // namespace detail

// Output tile size for matmul. Tiling only partitions the output; each
// element's k-sum always runs 0..k-1 in order.
inline constexpr std::size_t kMatmulTile = 64;

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a.shape(), 2, "matmul");
  detail::require_rank(b.shape(), 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  Tensor<T> c({m, p});
  const T* A = a.data();
  const T* B = b.data();
  T* C = c.data();
  for (std::size_t i0 = 0; i0 < m; i0 += kMatmulTile) {
    const std::size_t i1 = std::min(m, i0 + kMatmulTile);
    for (std::size_t j0 = 0; j0 < p; j0 += kMatmulTile) {
      const std::size_t j1 = std::min(p, j0 + kMatmulTile);
      for (std::size_t i = i0; i < i1; ++i) {
        T* crow = C + i * p;
        for (std::size_t kk = 0; kk < k; ++kk) {
          const T aik = A[i * k + kk];
          const T* brow = B + kk * p;
          for (std::size_t j = j0; j < j1; ++j) crow[j] += aik * brow[j];
        }
      }
    }
  }
  return require_finite(c, "matmul output");
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a.shape(), 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor<T> t({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t(j, i) = a(i, j);
  return t;
}

/// Numerically stable softmax along `axis` (negative counts from the back).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const int r = static_cast<int>(x.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax: axis out of range");
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < r; ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Tensor<T> y(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = x[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      T sum = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(x[base + j * inner] - mx);
        y[base + j * inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] /= sum;
    }
  }
  return require_finite(y, "softmax output");
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each row of the trailing axis, then applies gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = kLayerNormEps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d)
    throw ShapeError("layer_norm: affine parameters do not match width " + std::to_string(d));
  const std::size_t rows = x.size() / d;
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * d;
    T* out = y.data() + r * d;
    T mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += in[i];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= static_cast<T>(d);
    const T rstd = T{1} / std::sqrt(var + static_cast<T>(eps));
    for (std::size_t i = 0; i < d; ++i) out[i] = (in[i] - mean) * rstd * gain[i] + bias[i];
  }
  return require_finite(y, "layer_norm output");
}

enum class GeluKind : std::uint8_t { tanh, erf };

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
inline constexpr double kGeluSqrt2OverPi = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;

template <typename T>
T gelu_scalar(T x, GeluKind kind = GeluKind::tanh) {
  if (kind == GeluKind::erf) return T(0.5) * x * (T{1} + std::erf(x / std::sqrt(T{2})));
  const T inner = static_cast<T>(kGeluSqrt2OverPi) * (x + static_cast<T>(kGeluCubic) * x * x * x);
  return T(0.5) * x * (T{1} + std::tanh(inner));
}

template <typename T>
T gelu_grad_scalar(T x, GeluKind kind = GeluKind::tanh) {
  if (kind == GeluKind::erf) {
    const T cdf = T(0.5) * (T{1} + std::erf(x / std::sqrt(T{2})));
    const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T{2} * static_cast<T>(M_PI));
    return cdf + x * pdf;
  }
  const T c = static_cast<T>(kGeluSqrt2OverPi);
  const T a = static_cast<T>(kGeluCubic);
  const T t = std::tanh(c * (x + a * x * x * x));
  return T(0.5) * (T{1} + t) + T(0.5) * x * (T{1} - t * t) * c * (T{1} + T{3} * a * x * x);
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x, GeluKind kind = GeluKind::tanh) {
  return detail::map(x, [kind](T v) { return gelu_scalar(v, kind); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::map(x, [](T v) { return v > T{0} ? v : T{0}; });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, "add", [](T x, T y) { return x + y; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, "sub", [](T x, T y) { return x - y; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, "mul", [](T x, T y) { return x * y; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::map(a, [s](T v) { return v * s; });
}

/// Adds a length-`c` vector to every row of an [r, c] matrix.
template <typename T>
Tensor<T> add_row_vector(const Tensor<T>& m, const Tensor<T>& v) {
  detail::require_rank(m.shape(), 2, "add_row_vector");
  if (v.size() != m.dim(1)) throw ShapeError("add_row_vector: width mismatch");
  Tensor<T> out = m;
  for (std::size_t i = 0; i < m.dim(0); ++i)
    for (std::size_t j = 0; j < m.dim(1); ++j) out(i, j) += v[j];
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  return a.reshaped(std::move(shape));
}

/// Elements [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank()) throw ShapeError("slice: axis out of range");
  if (begin >= end || end > a.dim(axis)) throw ShapeError("slice: empty or out-of-range bounds");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  Shape s = a.shape();
  s[axis] = end - begin;
  Tensor<T> out(s);
  const std::size_t n = a.dim(axis), m = end - begin;
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.data() + (o * n + begin) * inner, m * inner, out.data() + o * m * inner);
  return out;
}

/// Arithmetic mean over the listed axes; reduced axes are dropped. Reducing
/// every axis yields a rank-1 tensor of length 1.
template <typename T>
Tensor<T> mean_over_axes(const Tensor<T>& a, std::vector<std::size_t> axes) {
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  std::vector<bool> reduced(a.rank(), false);
  for (auto ax : axes) {
    if (ax >= a.rank()) throw ShapeError("mean_over_axes: axis out of range");
    reduced[ax] = true;
  }
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (reduced[i])
      count *= a.dim(i);
    else
      out_shape.push_back(a.dim(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> idx(a.rank(), 0);
  for (std::size_t flat = 0; flat < a.size(); ++flat) {
    std::size_t o = 0;
    for (std::size_t i = 0; i < a.rank(); ++i)
      if (!reduced[i]) o = o * a.dim(i) + idx[i];
    out[o] += a[flat];
    for (std::size_t i = a.rank(); i-- > 0;) {
      if (++idx[i] < a.dim(i)) break;
      idx[i] = 0;
    }
  }
  for (auto& v : out.values()) v /= static_cast<T>(count);
  return out;
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace legrad
