#include "layertracer/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>
#include <unordered_set>

#include "layertracer/error.hpp"

namespace layertracer::numerics {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) {
    n *= d;
  }
  return shape.empty() ? 0 : n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  require(shape_product(shape_) == data_.size(), ErrorCode::InvalidInput,
          "tensor data length " + std::to_string(data_.size()) + " does not match shape product " +
              std::to_string(shape_product(shape_)));
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) {
    return 1;
  }
  return shape_.empty() ? 0 : shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.empty()) {
    return 0;
  }
  return shape_.size() == 1 ? shape_[0] : data_.size() / shape_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::bit_equal(const Tensor& other) const {
  return shape_ == other.shape_ &&
         (data_.empty() ||
          std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

ProbabilityDistribution::ProbabilityDistribution(std::vector<int> support, std::vector<double> probs)
    : support_(std::move(support)), probs_(std::move(probs)) {
  require(!probs_.empty(), ErrorCode::InvalidInput, "distribution is empty");
  require(support_.size() == probs_.size(), ErrorCode::InvalidInput,
          "distribution support and probability lengths differ");
  std::unordered_set<int> seen;
  dense_ = true;
  double total = 0.0;
  for (std::size_t i = 0; i < probs_.size(); ++i) {
    require(seen.insert(support_[i]).second, ErrorCode::InvalidInput,
            "duplicate token id " + std::to_string(support_[i]) + " in distribution support");
    require(std::isfinite(probs_[i]) && probs_[i] >= 0.0, ErrorCode::InvalidInput,
            "distribution has a negative or non-finite probability");
    dense_ = dense_ && support_[i] == static_cast<int>(i);
    total += probs_[i];
  }
  require(std::abs(total - 1.0) <= kDistributionTolerance, ErrorCode::InvalidInput,
          "distribution sums to " + std::to_string(total) + ", not 1");
}

ProbabilityDistribution ProbabilityDistribution::dense(std::vector<double> probs) {
  std::vector<int> ids(probs.size());
  std::iota(ids.begin(), ids.end(), 0);
  return ProbabilityDistribution(std::move(ids), std::move(probs));
}

double ProbabilityDistribution::prob_of(int token_id) const {
  if (dense_) {
    return token_id >= 0 && static_cast<std::size_t>(token_id) < probs_.size() ? probs_[token_id] : 0.0;
  }
  for (std::size_t i = 0; i < support_.size(); ++i) {
    if (support_[i] == token_id) {
      return probs_[i];
    }
  }
  return 0.0;
}

void softmax_inplace(std::span<double> values) {
  double max_v = values[0];
  for (double v : values) {
    max_v = std::max(max_v, v);
  }
  double total = 0.0;
  for (double& v : values) {
    v = std::exp(v - max_v);
    total += v;
  }
  for (double& v : values) {
    v /= total;
  }
}

ProbabilityDistribution softmax(std::span<const double> logits) {
  require(!logits.empty(), ErrorCode::InvalidInput, "softmax of an empty vector");
  for (double v : logits) {
    require(std::isfinite(v), ErrorCode::InvalidInput, "softmax input is not finite");
  }
  std::vector<double> probs(logits.begin(), logits.end());
  softmax_inplace(probs);
  return ProbabilityDistribution::dense(std::move(probs));
}

double log_sum_exp(std::span<const double> values) {
  double max_v = values[0];
  for (double v : values) {
    max_v = std::max(max_v, v);
  }
  double total = 0.0;
  for (double v : values) {
    total += std::exp(v - max_v);
  }
  return max_v + std::log(total);
}

void matmul_accumulate(std::span<const double> a, std::span<const double> b, std::span<double> c,
                       std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c_row = c.data() + i * n;
    const double* a_row = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double a_ip = a_row[p];
      const double* b_row = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        c_row[j] += a_ip * b_row[j];
      }
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.rows(), ErrorCode::InvalidInput,
          "matmul shape mismatch");
  Tensor c = Tensor::matrix(a.rows(), b.cols());
  matmul_accumulate(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  Tensor t = Tensor::matrix(n, m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      t(j, i) = a(i, j);
    }
  }
  return t;
}

void rmsnorm_row(std::span<const double> x, std::span<const double> weight, double eps,
                 std::span<double> out) {
  double sum_sq = 0.0;
  for (double v : x) {
    sum_sq += v * v;
  }
  const double inv = 1.0 / std::sqrt(sum_sq / static_cast<double>(x.size()) + eps);
  for (std::size_t j = 0; j < x.size(); ++j) {
    out[j] = x[j] * inv * weight[j];
  }
}

}  // namespace layertracer::numerics
