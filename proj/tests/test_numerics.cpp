#include <doctest.h>

#include <cmath>
#include <random>

#include "layertracer/error.hpp"
#include "layertracer/numerics.hpp"

using namespace layertracer;
using namespace layertracer::numerics;

TEST_CASE("softmax of equal logits is uniform") {
  auto p = softmax(std::vector<double>{0.0, 0.0});
  CHECK(p.probs()[0] == 0.5);
  CHECK(p.probs()[1] == 0.5);

  auto q = softmax(std::vector<double>{1000.0, 1000.0, 1000.0});
  for (double v : q.probs()) {
    CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
}

TEST_CASE("softmax matches extended-precision evaluation") {
  const long double e1 = std::exp(1.0L);
  const long double expected0 = e1 / (e1 + 1.0L);
  auto p = softmax(std::vector<double>{1.0, 0.0});
  CHECK(std::abs(p.probs()[0] - static_cast<double>(expected0)) < 1e-15);
  CHECK(std::abs(p.probs()[1] - static_cast<double>(1.0L - expected0)) < 1e-15);
  CHECK(p.probs()[0] == doctest::Approx(0.7310586).epsilon(1e-7));
}

TEST_CASE("softmax rejects empty and non-finite input") {
  CHECK_THROWS_AS(softmax(std::vector<double>{}), Error);
  CHECK_THROWS_AS(softmax(std::vector<double>{0.0, INFINITY}), Error);
  try {
    softmax(std::vector<double>{});
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidInput);
  }
}

TEST_CASE("softmax sums to one for random logits up to 1e3") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> mag(-1000.0, 1000.0);
  std::uniform_int_distribution<int> len(1, 300);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> logits(static_cast<std::size_t>(len(rng)));
    for (auto& v : logits) {
      v = mag(rng);
    }
    auto p = softmax(logits);
    double total = 0.0;
    for (double v : p.probs()) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
    auto again = softmax(logits);
    CHECK(again == p);
  }
}

TEST_CASE("distribution validation") {
  CHECK_THROWS_AS(ProbabilityDistribution({0, 0}, {0.5, 0.5}), Error);
  CHECK_THROWS_AS(ProbabilityDistribution({0, 1}, {0.5, 0.6}), Error);
  CHECK_THROWS_AS(ProbabilityDistribution({0}, {0.5, 0.5}), Error);
  ProbabilityDistribution sparse({7, 3}, {0.25, 0.75});
  CHECK_FALSE(sparse.is_dense());
  CHECK(sparse.prob_of(3) == 0.75);
  CHECK(sparse.prob_of(4) == 0.0);
}

TEST_CASE("tensor shape invariant") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), Error);
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({3, 2}, {1, 0, 0, 1, 1, 1});
  Tensor c = matmul(a, b);
  CHECK(c.shape() == std::vector<std::size_t>{2, 2});
  CHECK(c(0, 0) == 4.0);
  CHECK(c(0, 1) == 5.0);
  CHECK(c(1, 0) == 10.0);
  CHECK(c(1, 1) == 11.0);
  CHECK(transpose(a)(2, 1) == 6.0);
}
