#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace simplr {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major n-d array of f64. Extents are strictly positive; the flat
// data length always equals the product of the extents.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(checked_numel(shape)), 0.0);
  }

  Tensor(std::vector<int> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (checked_numel(shape) != static_cast<int64_t>(data.size()))
      throw Error("tensor: data length " + std::to_string(data.size()) +
                  " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int> s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static int64_t checked_numel(const std::vector<int>& s) {
    int64_t n = 1;
    for (int e : s) {
      if (e <= 0) throw Error("tensor: non-positive extent in shape " + shape_str(s));
      n *= e;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  int extent(int axis) const {
    if (axis < 0 || axis >= rank())
      throw Error("tensor: axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    return shape[static_cast<size_t>(axis)];
  }

  // Row-major strides in elements.
  std::vector<int64_t> strides() const {
    std::vector<int64_t> st(shape.size(), 1);
    for (int i = rank() - 2; i >= 0; --i)
      st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * shape[static_cast<size_t>(i) + 1];
    return st;
  }

  double& at2(int i, int j) {
    return data[static_cast<size_t>(i) * shape[1] + j];
  }
  double at2(int i, int j) const {
    return data[static_cast<size_t>(i) * shape[1] + j];
  }
  double& at3(int i, int j, int k) {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  double at3(int i, int j, int k) const {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline int64_t numel_of(const std::vector<int>& s) {
  int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw Error("max_abs_diff: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace simplr
