#include <doctest.h>

#include <functional>
#include <random>

#include "layertracer/autodiff.hpp"
#include "layertracer/error.hpp"
#include "test_support.hpp"

using namespace layertracer;
using namespace layertracer::autodiff;
using layertracer::testing::central_difference;
using layertracer::testing::relative_error;

namespace {

Tensor random_tensor(std::mt19937_64& rng, std::vector<std::size_t> shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.data()) {
    v = n(rng);
  }
  return t;
}

// Builds a scalar loss from leaf values; checks tape gradients against central differences.
double max_gradient_error(std::vector<Tensor> inputs,
                          const std::function<Var(Tape&, const std::vector<Var>&)>& build) {
  Tape tape;
  std::vector<Var> leaves;
  for (auto& t : inputs) {
    leaves.push_back(tape.parameter(t));
  }
  Var loss = build(tape, leaves);
  auto grads = grad(loss, leaves);

  auto evaluate = [&]() {
    Tape eval(false);
    std::vector<Var> vs;
    for (auto& t : inputs) {
      vs.push_back(eval.parameter(t));
    }
    return build(eval, vs).value()[0];
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double numeric = central_difference(evaluate, inputs[i][j], 1e-5);
      worst = std::max(worst, relative_error(grads[i][j], numeric));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("gradient of sum of squares") {
  Tape tape;
  Tensor theta({2}, {1.0, 2.0});
  Var t = tape.parameter(theta);
  Var loss = sum(mul(t, t));
  const Var params[] = {t};
  auto g = grad(loss, params);
  CHECK(g[0][0] == 2.0);
  CHECK(g[0][1] == 4.0);
}

TEST_CASE("parameters outside the graph get zero gradient") {
  Tape tape;
  Tensor theta({3}, {1.0, -2.0, 3.0});
  Tensor other({2}, {5.0, 6.0});
  Var t = tape.parameter(theta);
  Var o = tape.parameter(other);
  Var loss = sum(mul(o, o));
  const Var params[] = {t, o};
  auto g = grad(loss, params);
  for (double v : g[0].data()) {
    CHECK(v == 0.0);
  }
  CHECK(g[1][0] == 10.0);
}

TEST_CASE("non-scalar loss is rejected") {
  Tape tape;
  Tensor theta({2}, {1.0, 2.0});
  Var t = tape.parameter(theta);
  Var y = mul(t, t);
  try {
    tape.backward(y);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidInput);
  }
}

TEST_CASE("inference tapes record no closures and stay cheap") {
  Tape tape(false);
  Tensor theta({2}, {1.0, 2.0});
  Var t = tape.parameter(theta);
  Var y = sum(mul(t, t));
  CHECK(y.value()[0] == 5.0);
  CHECK_FALSE(tape.requires_grad(y.id));
}

TEST_CASE("every op matches finite differences") {
  std::mt19937_64 rng(11);
  const double tol = 1e-6;

  SUBCASE("matmul and matmul_nt") {
    CHECK(max_gradient_error({random_tensor(rng, {3, 4}), random_tensor(rng, {4, 5})},
                             [](Tape&, const std::vector<Var>& v) {
                               return sum(mul(matmul(v[0], v[1]), matmul(v[0], v[1])));
                             }) < tol);
    CHECK(max_gradient_error({random_tensor(rng, {3, 4}), random_tensor(rng, {5, 4})},
                             [](Tape&, const std::vector<Var>& v) {
                               auto y = matmul_nt(v[0], v[1]);
                               return sum(mul(y, y));
                             }) < tol);
  }
  SUBCASE("rmsnorm, silu, elu+1, add_row, scale") {
    CHECK(max_gradient_error({random_tensor(rng, {4, 6}), random_tensor(rng, {6}),
                              random_tensor(rng, {6})},
                             [](Tape&, const std::vector<Var>& v) {
                               auto y = silu(add_row(rmsnorm(v[0], v[1]), v[2]));
                               auto z = scale(elu_plus_one(y), 0.7);
                               return sum(mul(z, y));
                             }) < tol);
  }
  SUBCASE("causal softmax and causal row normalization") {
    CHECK(max_gradient_error({random_tensor(rng, {5, 5}), random_tensor(rng, {5, 3})},
                             [](Tape&, const std::vector<Var>& v) {
                               auto a = causal_softmax(v[0], 0.5);
                               auto y = matmul(a, v[1]);
                               return sum(mul(y, y));
                             }) < tol);
    CHECK(max_gradient_error({random_tensor(rng, {5, 5}), random_tensor(rng, {5, 3})},
                             [](Tape&, const std::vector<Var>& v) {
                               auto a = causal_row_normalize(elu_plus_one(v[0]));
                               auto y = matmul(a, v[1]);
                               return sum(mul(y, y));
                             }) < tol);
  }
  SUBCASE("slices, concat, embedding, cross-entropy") {
    const std::vector<int> ids = {2, 0, 2, 1};
    const std::vector<int> targets = {1, 3, 0, 2};
    CHECK(max_gradient_error({random_tensor(rng, {3, 6}), random_tensor(rng, {4, 6})},
                             [&](Tape&, const std::vector<Var>& v) {
                               auto x = embedding(v[0], ids);
                               const Var parts[] = {slice_cols(x, 3, 6), slice_cols(x, 0, 3)};
                               auto y = concat_cols(parts);
                               auto logits = matmul_nt(y, v[1]);
                               return add(cross_entropy(logits, targets),
                                          sum(slice_rows(logits, 1, 3)));
                             }) < tol);
  }
}

TEST_CASE("random small graphs match finite differences") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> pick(0, 5);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<int> ops(4);
    for (auto& o : ops) {
      o = pick(rng);
    }
    const double err = max_gradient_error(
        {random_tensor(rng, {4, 4}), random_tensor(rng, {4, 4}), random_tensor(rng, {4})},
        [&](Tape&, const std::vector<Var>& v) {
          Var x = v[0];
          for (int o : ops) {
            switch (o) {
              case 0: x = matmul(x, v[1]); break;
              case 1: x = add(x, v[1]); break;
              case 2: x = silu(x); break;
              case 3: x = rmsnorm(x, v[2]); break;
              case 4: x = causal_softmax(x, 0.9); break;
              default: x = mul(x, v[1]); break;
            }
          }
          return sum(mul(x, x));
        });
    CHECK(err < 1e-4);
  }
}
