#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <cstring>
#include <set>

#include "layertracer/autodiff.hpp"
#include "layertracer/corpus.hpp"
#include "layertracer/logit_lens.hpp"
#include "layertracer/perturbation.hpp"
#include "test_support.hpp"

using namespace layertracer;
using namespace layertracer::lens;
using namespace layertracer::perturbation;
using layertracer::testing::code_of;
using layertracer::testing::oracle_js;
using layertracer::testing::random_distribution;
using numerics::ProbabilityDistribution;
using numerics::Tensor;
using namespace layertracer::autodiff;

namespace {

model::Model toy_model(const std::string& layout = "FFFF", std::uint64_t seed = 3) {
  model::ModelConfig c;
  c.n_layers = static_cast<int>(layout.size());
  c.d_model = 16;
  c.n_heads = 2;
  c.vocab_size = 96;
  c.max_seq_len = 64;
  c.block_layout = model::parse_layout(layout);
  auto m = model::Model::build(c, seed);
  // Larger weights make intermediate distributions less uniform.
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& p : m.parameters()) {
    if (p.decays) {
      for (auto& v : p.tensor->storage()) {
        v = n(rng);
      }
    }
  }
  return m;
}

corpus::TokenizedSample toy_sample(std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  const auto prompts = corpus::generate_prompts(corpus::builtin_antonyms(), 1, rng);
  return corpus::tokenize(prompts[0], corpus::Vocabulary::characters());
}

// Final norm, head and softmax evaluated on the autodiff tape with a long-double softmax.
std::vector<double> oracle_projection(const model::Model& m, const Tensor& hidden, bool final_norm) {
  Tape tape(false);
  const auto bound = m.bind(tape);
  Var x = tape.constant(hidden);
  x = slice_rows(x, hidden.rows() - 1, hidden.rows());
  if (final_norm) {
    x = rmsnorm(x, bound.final_norm);
  }
  const auto& logits = tape.value(add_row(matmul_nt(x, bound.head), bound.head_bias)).storage();
  const long double mx = *std::max_element(logits.begin(), logits.end());
  long double total = 0.0L;
  std::vector<long double> e(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(static_cast<long double>(logits[i]) - mx);
    total += e[i];
  }
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = static_cast<double>(e[i] / total);
  }
  return out;
}

// Blocks start+1..N replayed on the autodiff tape, then projected.
std::vector<double> oracle_resume(const model::Model& m, const Tensor& hidden, int start) {
  Tape tape(false);
  const auto bound = m.bind(tape);
  Var x = tape.constant(hidden);
  for (int l = start + 1; l <= m.n_layers(); ++l) {
    x = m.run_block(bound.layers[static_cast<std::size_t>(l - 1)], x);
  }
  return oracle_projection(m, tape.value(x), true);
}

}  // namespace

TEST_CASE("select_target uses the lowest id on ties") {
  CHECK(select_target(ProbabilityDistribution::dense({0.7, 0.2, 0.1})).token_id == 0);
  CHECK(select_target(ProbabilityDistribution::dense({0.25, 0.25, 0.25, 0.25})).token_id == 0);
  CHECK(select_target(ProbabilityDistribution::dense({0.1, 0.45, 0.45})).token_id == 1);
  CHECK(select_target(ProbabilityDistribution({9, 4, 7}, {0.4, 0.4, 0.2})).token_id == 4);
}

TEST_CASE("select_target follows a permutation of ids") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_distribution(rng, 40);
    std::vector<int> perm(40);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> permuted(40);
    for (std::size_t i = 0; i < 40; ++i) {
      permuted[static_cast<std::size_t>(perm[i])] = p[i];
    }
    const auto brute = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    CHECK(select_target(ProbabilityDistribution::dense(p)).token_id == brute);
    CHECK(select_target(ProbabilityDistribution::dense(permuted)).token_id == perm[static_cast<std::size_t>(brute)]);
  }
}

TEST_CASE("select_target is invariant under logit scaling") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> z(20);
    for (auto& v : z) {
      v = n(rng);
    }
    std::vector<double> scaled = z;
    for (auto& v : scaled) {
      v *= 0.37;
    }
    CHECK(select_target(numerics::softmax(z)).token_id ==
          select_target(numerics::softmax(scaled)).token_id);
  }
}

TEST_CASE("truncate_top_k: shared support is the union of top-K sets") {
  const auto p = ProbabilityDistribution::dense({0.4, 0.3, 0.1, 0.1, 0.1});
  const auto q = ProbabilityDistribution::dense({0.05, 0.5, 0.35, 0.05, 0.05});
  const auto [pk, qk] = truncate_top_k(p, q, 2);
  CHECK(pk.support() == std::vector<int>{0, 1, 2});
  CHECK(qk.support() == pk.support());
  CHECK(pk.probs()[0] == doctest::Approx(0.5));
  CHECK(qk.probs()[2] == doctest::Approx(0.35 / 0.9));
}

TEST_CASE("truncate_top_k: identity cases and clamping") {
  std::mt19937_64 rng(4);
  const auto p = ProbabilityDistribution::dense(random_distribution(rng, 12));
  const auto [a, b] = truncate_top_k(p, p, 4);
  CHECK(a == b);
  CHECK(a.size() == 4);
  const auto [full, full2] = truncate_top_k(p, p, 12);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(full.probs()[i] == doctest::Approx(p.probs()[i]).epsilon(1e-14));
  }
  const auto [clamped, c2] = truncate_top_k(p, p, 1000);
  CHECK(clamped.size() == 12);
  CHECK(code_of([&] { truncate_top_k(p, p, 0); }) == ErrorCode::InvalidInput);
}

TEST_CASE("truncate_top_k: random supports match a set-union oracle and grow with K") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = random_distribution(rng, 64, true);
    const auto q = random_distribution(rng, 64, true);
    const auto dp = ProbabilityDistribution::dense(p);
    const auto dq = ProbabilityDistribution::dense(q);
    std::set<int> prev;
    for (int k : {1, 3, 10, 50}) {
      std::vector<int> order_p(64), order_q(64);
      std::iota(order_p.begin(), order_p.end(), 0);
      std::iota(order_q.begin(), order_q.end(), 0);
      std::stable_sort(order_p.begin(), order_p.end(), [&](int a, int b) { return p[a] > p[b]; });
      std::stable_sort(order_q.begin(), order_q.end(), [&](int a, int b) { return q[a] > q[b]; });
      std::set<int> expect(order_p.begin(), order_p.begin() + k);
      expect.insert(order_q.begin(), order_q.begin() + k);
      const auto [pk, qk] = truncate_top_k(dp, dq, k);
      CHECK(std::vector<int>(expect.begin(), expect.end()) == pk.support());
      CHECK(std::includes(expect.begin(), expect.end(), prev.begin(), prev.end()));
      double sp = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < pk.size(); ++i) {
        sp += pk.probs()[i];
        sq += qk.probs()[i];
      }
      CHECK(std::abs(sp - 1.0) < 1e-12);
      CHECK(std::abs(sq - 1.0) < 1e-12);
      prev = expect;
    }
  }
}

TEST_CASE("project_layer matches an independent projection at every layer") {
  for (const char* layout : {"FFFF", "LFLF"}) {
    const auto m = toy_model(layout);
    const auto sample = toy_sample();
    const auto trace = m.forward_with_trace(sample.token_ids);
    const auto target = select_target(trace.final_distribution);
    for (int l = 1; l <= 4; ++l) {
      for (auto norm : {LensNorm::Final, LensNorm::None}) {
        const auto ld = project_layer(m, trace, l, target.token_id, norm);
        const auto oracle = oracle_projection(m, trace.states[static_cast<std::size_t>(l - 1)], norm == LensNorm::Final);
        REQUIRE(ld.dist.size() == oracle.size());
        for (std::size_t i = 0; i < oracle.size(); ++i) {
          CHECK(std::abs(ld.dist.probs()[i] - oracle[i]) < 1e-12);
        }
        CHECK(ld.target_prob >= 0.0);
        CHECK(ld.target_prob <= 1.0);
      }
    }
    CHECK(project_layer(m, trace, 4, target.token_id).dist == trace.final_distribution);
    CHECK(code_of([&] { project_layer(m, trace, 0, 0); }) == ErrorCode::InvalidLayer);
    CHECK(code_of([&] { project_layer(m, trace, 5, 0); }) == ErrorCode::InvalidLayer);
  }
}

TEST_CASE("mask_context zeroes exactly the listed rows") {
  Tensor h = Tensor::matrix(5, 3);
  std::iota(h.storage().begin(), h.storage().end(), 1.0);
  const std::vector<int> ctx{0, 1, 2};
  const auto m = mask_context(h, ctx);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(m(r, c) == (r < 3 ? 0.0 : h(r, c)));
    }
  }
  CHECK(mask_context(h, {}).bit_equal(h));
  CHECK(mask_context(m, ctx).bit_equal(m));
  const std::vector<int> all{0, 1, 2, 3, 4};
  const auto zeroed = mask_context(h, all);
  for (double v : zeroed.storage()) {
    CHECK(v == 0.0);
  }
  const std::vector<int> bad{5};
  CHECK(code_of([&] { mask_context(h, bad); }) == ErrorCode::InvalidInput);
}

TEST_CASE("perturbed outcome: identity at layer N and with no context") {
  const auto m = toy_model();
  const auto sample = toy_sample();
  const auto trace = m.forward_with_trace(sample.token_ids);
  for (bool full : {false, true}) {
    const JsOptions opts{full, 10};
    const auto last = perturbed_final(m, trace, 4, sample.context_indices, opts);
    CHECK(last.q_dist == trace.final_distribution);
    CHECK(last.js_to_original == 0.0);
    for (int l = 1; l <= 4; ++l) {
      const auto none = perturbed_final(m, trace, l, {}, opts);
      CHECK(none.q_dist == trace.final_distribution);
      CHECK(none.js_to_original == 0.0);
    }
  }
  CHECK(code_of([&] { perturbed_final(m, trace, 0, sample.context_indices, {}); }) == ErrorCode::InvalidLayer);
}

TEST_CASE("perturbed outcome matches a masked replay on the tape") {
  for (const char* layout : {"FFFF", "LLFF"}) {
    const auto m = toy_model(layout);
    const auto sample = toy_sample(9);
    const auto trace = m.forward_with_trace(sample.token_ids);
    for (int l = 1; l <= 3; ++l) {
      Tensor masked = trace.states[static_cast<std::size_t>(l - 1)];
      for (int i : sample.context_indices) {
        for (std::size_t c = 0; c < masked.cols(); ++c) {
          masked(static_cast<std::size_t>(i), c) = 0.0;
        }
      }
      const auto oracle = oracle_resume(m, masked, l);
      const auto out = perturbed_final(m, trace, l, sample.context_indices, {true, 10});
      for (std::size_t i = 0; i < oracle.size(); ++i) {
        CHECK(std::abs(out.q_dist.probs()[i] - oracle[i]) < 1e-12);
      }
      const double js = static_cast<double>(oracle_js(trace.final_distribution.probs(), oracle));
      CHECK(std::abs(out.js_to_original - js) < 1e-12);
      if (l == 1) {
        CHECK(out.js_to_original > 0.0);
      }
    }
  }
}

TEST_CASE("js_curve: bounds, zero tail, call counts, repeatability") {
  const auto m = toy_model("LFLF");
  const auto sample = toy_sample(21);
  m.reset_call_counters();
  const auto js = js_curve(m, sample, {});
  CHECK(m.trace_calls() == 1);
  CHECK(m.resume_calls() == 4);
  REQUIRE(js.size() == 4);
  CHECK(js.back() == 0.0);
  for (double v : js) {
    CHECK(v >= 0.0);
    CHECK(v <= std::log(2.0));
  }
  for (int run = 0; run < 4; ++run) {
    const auto again = js_curve(m, sample, {});
    CHECK(std::memcmp(again.data(), js.data(), js.size() * sizeof(double)) == 0);
  }
}
