#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace focus {

/// Raised when a run is handed inconsistent settings (bad shapes, invalid
/// hyperparameters). Maps to CLI exit code 1 with a one-line diagnostic.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised for malformed runtime inputs (mismatched images, missing files).
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when a computation produces non-finite values.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised on filesystem failures.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dense row-major tensor of doubles. Rank is dynamic (1 to 4 in practice);
/// most of the model works on rank-2 views (rows x cols).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    v_.assign(static_cast<std::size_t>(numel_of(shape_)), 0.0);
  }

  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), v_(std::move(data)) {
    if (static_cast<std::int64_t>(v_.size()) != numel_of(shape_))
      throw ConfigError("tensor data size does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.v_.begin(), t.v_.end(), value);
    return t;
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  void fill(double value) { std::fill(v_.begin(), v_.end(), value); }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(v_.size()); }
  bool empty() const { return v_.empty(); }

  int rows() const { return shape_.size() == 1 ? 1 : shape_[0]; }
  int cols() const { return shape_.size() == 1 ? shape_[0] : shape_[shape_.size() - 1]; }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  std::vector<double>& vec() { return v_; }
  const std::vector<double>& vec() const { return v_; }

  double& operator[](std::int64_t i) { return v_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return v_[static_cast<std::size_t>(i)]; }

  double& at(int i, int j) { return v_[static_cast<std::size_t>(i) * cols() + j]; }
  double at(int i, int j) const { return v_[static_cast<std::size_t>(i) * cols() + j]; }

  /// Rank-3 indexing (d0,d1,d2).
  double& at3(int i, int j, int k) {
    return v_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  double at3(int i, int j, int k) const {
    return v_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }

  Tensor reshaped(std::vector<int> shape) const {
    if (numel_of(shape) != numel()) throw ConfigError("reshape changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.v_ = v_;
    return t;
  }

  bool all_finite() const {
    for (double x : v_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  double min() const { return v_.empty() ? 0.0 : *std::min_element(v_.begin(), v_.end()); }
  double max() const { return v_.empty() ? 0.0 : *std::max_element(v_.begin(), v_.end()); }
  double sum() const { return std::accumulate(v_.begin(), v_.end(), 0.0); }
  double mean() const { return v_.empty() ? 0.0 : sum() / static_cast<double>(v_.size()); }

  std::string shape_str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << ')';
    return os.str();
  }

  static std::int64_t numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ConfigError("negative tensor dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  std::vector<double> v_;
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

/// C = A * B for rank-2 operands, accumulating into a fresh tensor.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
    throw ConfigError("matmul shape mismatch " + a.shape_str() + " x " + b.shape_str());
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (int i = 0; i < m; ++i) {
    const double* arow = pa + static_cast<std::size_t>(i) * k;
    double* crow = pc + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = pb + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

inline Tensor transposed(const Tensor& a) {
  if (a.ndim() != 2) throw ConfigError("transpose expects rank-2");
  Tensor t({a.cols(), a.rows()});
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

}  // namespace focus
