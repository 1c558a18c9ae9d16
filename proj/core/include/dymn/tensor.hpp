#pragma once

// Dense tensors, rank 1-4, row-major contiguous.
// Canonical rank-4 layout is batch x channels x frequency x time.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dymn {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline void check_shape(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <typename T>
struct TensorT {
  Shape shape;
  std::vector<T> data;

  TensorT() = default;

  explicit TensorT(Shape s) : shape(std::move(s)) {
    validate_extents();
    data.assign(static_cast<std::size_t>(numel(shape)), T(0));
  }

  TensorT(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    validate_extents();
    if (numel(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static TensorT full(Shape s, T v) {
    TensorT t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }
  static TensorT zeros(Shape s) { return TensorT(std::move(s)); }
  static TensorT ones(Shape s) { return full(std::move(s), T(1)); }
  static TensorT scalar(T v) { return TensorT({1}, {v}); }

  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

  T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  // rank-4 indexing, no bounds checks
  T& at4(int b, int c, int f, int t) {
    return data[((static_cast<std::size_t>(b) * shape[1] + c) * shape[2] + f) * shape[3] + t];
  }
  const T& at4(int b, int c, int f, int t) const {
    return data[((static_cast<std::size_t>(b) * shape[1] + c) * shape[2] + f) * shape[3] + t];
  }
  T& at3(int b, int c, int l) {
    return data[(static_cast<std::size_t>(b) * shape[1] + c) * shape[2] + l];
  }
  const T& at3(int b, int c, int l) const {
    return data[(static_cast<std::size_t>(b) * shape[1] + c) * shape[2] + l];
  }
  T& at2(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
  const T& at2(int r, int c) const { return data[static_cast<std::size_t>(r) * shape[1] + c]; }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of size " + std::to_string(size()));
    return data[0];
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

 private:
  void validate_extents() const {
    if (shape.empty() || shape.size() > 4)
      throw ShapeError("tensor rank must be 1..4, got " + shape_str(shape));
    for (int d : shape)
      if (d < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape));
  }
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

}  // namespace dymn
