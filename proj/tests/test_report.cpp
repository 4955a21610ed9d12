#include <doctest.h>

#include <random>
#include <sstream>

#include "layertracer/corpus.hpp"
#include "layertracer/report.hpp"
#include "test_support.hpp"

using namespace layertracer;
using namespace layertracer::report;
using layertracer::testing::code_of;
using layertracer::testing::temp_dir;
namespace fs = std::filesystem;

namespace {

model::Model toy() {
  model::ModelConfig c;
  c.n_layers = 5;
  c.d_model = 16;
  c.n_heads = 2;
  c.max_seq_len = 64;
  return model::Model::build(c, 2);
}

std::vector<corpus::TokenizedSample> prompts(std::size_t n) {
  std::mt19937_64 rng(12);
  std::vector<corpus::TokenizedSample> out;
  for (const auto& p : corpus::generate_prompts(corpus::builtin_antonyms(), n, rng)) {
    out.push_back(corpus::tokenize(p, corpus::Vocabulary::characters()));
  }
  return out;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) {
    out.push_back(l);
  }
  return out;
}

}  // namespace

TEST_CASE("report shape follows groups and layers") {
  const auto m = toy();
  DiagnoseOptions opts;
  const auto r = diagnose_model(m, prompts(40), opts, 9);
  CHECK(r.samples.size() == 40);
  CHECK(r.ratio_heatmap.values.size() == 10);
  CHECK(r.ratio_heatmap.values.front().size() == 4);
  CHECK(r.delta_js_heatmap.values.size() == 10);
  CHECK(r.mean_ratio.size() == 4);
  CHECK(r.scan.rows.size() == 3);
  CHECK(r.scan.tp_hat.size() == 5);
  CHECK(r.samples[7].group_id == 2);
  CHECK(r.metadata.seed == 9);
  CHECK(r.metadata.n_layers == 5);

  const auto csv = lines(heatmap_csv(r.ratio_heatmap));
  REQUIRE(csv.size() == 11);
  CHECK(csv[0] == "group,layer_2,layer_3,layer_4,layer_5");
  CHECK(csv[1].rfind("1,", 0) == 0);
  CHECK(csv[10].rfind("10,", 0) == 0);
}

TEST_CASE("heatmap rows are group means of the sample profiles") {
  const auto m = toy();
  const auto r = diagnose_model(m, prompts(20), {}, 0);
  for (int g = 0; g < 10; ++g) {
    for (std::size_t c = 0; c < 4; ++c) {
      const long double expect =
          (static_cast<long double>(r.samples[2 * g].ratio[c]) + r.samples[2 * g + 1].ratio[c]) / 2.0L;
      CHECK(std::abs(r.ratio_heatmap.values[static_cast<std::size_t>(g)][c] - static_cast<double>(expect)) <
            1e-12 * std::max(1.0, static_cast<double>(expect)));
    }
  }
}

TEST_CASE("report bytes do not depend on the job count") {
  const auto m = toy();
  const auto samples = prompts(20);
  DiagnoseOptions one;
  DiagnoseOptions four;
  four.jobs = 4;
  CHECK(report_json(diagnose_model(m, samples, one, 1)) == report_json(diagnose_model(m, samples, four, 1)));
}

TEST_CASE("json round trip reproduces the scan exactly") {
  const auto m = toy();
  DiagnoseOptions opts;
  opts.fractions = diagnostics::parse_fractions("1/5,2/5,3/5,4/5");
  const auto r = diagnose_model(m, prompts(10), opts, 3);
  const auto back = report_from_json(report_json(r));
  REQUIRE(back.scan.rows.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(back.scan.rows[i].score == r.scan.rows[i].score);
    CHECK(back.scan.rows[i].split_layer == r.scan.rows[i].split_layer);
  }
  CHECK(back.mean_delta_js == r.mean_delta_js);
  CHECK(back.samples.size() == r.samples.size());
  CHECK(back.samples[3].js == r.samples[3].js);
  CHECK(report_json(back) == report_json(r));
  CHECK(code_of([] { report_from_json("{}"); }) == ErrorCode::InvalidInput);
}

TEST_CASE("emitted files") {
  const auto m = toy();
  const auto r = diagnose_model(m, prompts(10), {}, 3);
  const auto dir = temp_dir("emit");
  emit_report(r, dir, true, true);
  for (const char* f : {"report.json", "ratio_heatmap.csv", "delta_js_heatmap.csv", "ratio_heatmap_log1p.csv",
                        "delta_js_heatmap_log1p.csv", "scan.csv"}) {
    CHECK(fs::exists(dir / f));
  }
  CHECK(lines(scan_csv(r.scan)).front() == "ratio,fraction,split_layer,score");
  CHECK(scan_table(r.scan).find("| 1/3 | 2 |") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("grouping and empty input errors") {
  const auto m = toy();
  CHECK(code_of([&] { diagnose_model(m, prompts(15), {}, 0); }) == ErrorCode::InvalidInput);
  CHECK(code_of([&] { diagnose_model(m, {}, {}, 0); }) == ErrorCode::InvalidInput);
  CHECK(code_of([&] { assemble({}, {}, {}); }) == ErrorCode::InvalidInput);
  diagnostics::Heatmap empty;
  CHECK(code_of([&] { heatmap_csv(empty); }) == ErrorCode::InvalidInput);
}

TEST_CASE("top-50 mode keeps the report shape") {
  const auto m = toy();
  DiagnoseOptions opts;
  opts.js.top_k = 50;
  const auto r = diagnose_model(m, prompts(10), opts, 0);
  CHECK(r.metadata.top_k == 50);
  CHECK(r.ratio_heatmap.values.size() == 10);
  for (const auto& s : r.samples) {
    CHECK(s.js.back() == 0.0);
  }
}
