#pragma once

// Dense 64-bit numeric substrate: row-major tensors, probability
// distributions and the handful of kernels the toy transformer needs.
// All reductions run sequentially in ascending index order so results are
// bit-identical from run to run.

#include <cstddef>
#include <span>
#include <vector>

namespace layertracer::numerics {

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor matrix(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }
  static Tensor vector(std::size_t n) { return Tensor({n}); }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-2 view helpers. A rank-1 tensor behaves as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  void fill(double v);
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  // Bitwise equality of shape and every element (distinguishes -0.0 and NaN payloads).
  bool bit_equal(const Tensor& other) const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// Probability mass over an explicit support of token ids.
class ProbabilityDistribution {
 public:
  ProbabilityDistribution() = default;
  // Validates: equal lengths, unique ids, finite nonnegative probs, sum == 1 within 1e-12.
  ProbabilityDistribution(std::vector<int> support, std::vector<double> probs);
  // Full-vocabulary distribution with support 0..n-1.
  static ProbabilityDistribution dense(std::vector<double> probs);

  const std::vector<int>& support() const { return support_; }
  const std::vector<double>& probs() const { return probs_; }
  std::size_t size() const { return probs_.size(); }
  bool is_dense() const { return dense_; }

  // Probability of a token id; 0 when the id is outside the support.
  double prob_of(int token_id) const;

  bool operator==(const ProbabilityDistribution& other) const {
    return support_ == other.support_ && probs_ == other.probs_;
  }

 private:
  std::vector<int> support_;
  std::vector<double> probs_;
  bool dense_ = false;
};

inline constexpr double kDistributionTolerance = 1e-12;

ProbabilityDistribution softmax(std::span<const double> logits);

// In-place numerically stable softmax over a row; used by the autodiff kernels.
void softmax_inplace(std::span<double> values);

double log_sum_exp(std::span<const double> values);

// C[m,n] (+)= A[m,k] * B[k,n], reduction over k in ascending order.
void matmul_accumulate(std::span<const double> a, std::span<const double> b, std::span<double> c,
                       std::size_t m, std::size_t k, std::size_t n);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// y = x / sqrt(mean(x^2) + eps) * weight, for one row.
void rmsnorm_row(std::span<const double> x, std::span<const double> weight, double eps,
                 std::span<double> out);

inline constexpr double kRmsNormEps = 1e-5;

}  // namespace layertracer::numerics
