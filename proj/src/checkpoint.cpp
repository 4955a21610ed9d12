#include <json.hpp>

#include "binary_io.hpp"
#include "layertracer/error.hpp"
#include "layertracer/model.hpp"

namespace layertracer::model {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kCheckpointVersion = 1;

json config_to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},     {"d_model", c.d_model},
              {"n_heads", c.n_heads},       {"d_ff", c.d_ff},
              {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
              {"block_layout", format_layout(c.block_layout)},
              {"tie_lm_head", c.tie_lm_head}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.block_layout = parse_layout(j.at("block_layout").get<std::string>());
  c.tie_lm_head = j.at("tie_lm_head").get<bool>();
  return c;
}

}  // namespace

std::vector<unsigned char> canonical_bytes(const Model& model, int group) {
  std::vector<unsigned char> out;
  for (const auto& p : model.parameters()) {
    if (group >= 0 && p.group != group) {
      continue;
    }
    out.insert(out.end(), p.name.begin(), p.name.end());
    out.push_back(0);
    detail::append_u64_le(out, p.tensor->rank());
    for (auto dim : p.tensor->shape()) {
      detail::append_u64_le(out, dim);
    }
    for (double v : p.tensor->data()) {
      detail::append_f64_le(out, v);
    }
  }
  return out;
}

std::string parameter_digest(const Model& model, int group) {
  return detail::sha256_hex(canonical_bytes(model, group));
}

void save_checkpoint(const Model& model, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorCode::Io, "cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  json params = json::array();
  for (const auto& p : model.parameters()) {
    const std::string file = p.name + ".f64";
    detail::write_f64_blob(dir / file, p.tensor->data());
    params.push_back({{"name", p.name}, {"shape", p.tensor->shape()}, {"file", file}});
  }
  json manifest{{"format_version", kCheckpointVersion},
                {"config", config_to_json(model.config())},
                {"seed", model.seed()},
                {"parameters", params}};
  detail::write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Model load_checkpoint(const fs::path& dir) {
  json manifest;
  try {
    manifest = json::parse(detail::read_text_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidInput, (dir / "manifest.json").string() + ": " + e.what());
  }
  try {
    const int version = manifest.at("format_version").get<int>();
    require(version == kCheckpointVersion, ErrorCode::UnsupportedVersion,
            "checkpoint format version " + std::to_string(version) + " is not supported");
    Model model = Model::build(config_from_json(manifest.at("config")),
                               manifest.at("seed").get<std::uint64_t>());
    auto params = model.parameters();
    const auto& index = manifest.at("parameters");
    require(index.size() == params.size(), ErrorCode::InvalidInput,
            "checkpoint lists " + std::to_string(index.size()) + " parameters, model expects " +
                std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& entry = index[i];
      require(entry.at("name").get<std::string>() == params[i].name, ErrorCode::InvalidInput,
              "checkpoint parameter order mismatch at " + params[i].name);
      auto values = detail::read_f64_blob(dir / entry.at("file").get<std::string>());
      require(values.size() == params[i].tensor->size(), ErrorCode::CorruptTrace,
              "parameter blob " + entry.at("file").get<std::string>() + " has wrong size");
      params[i].tensor->storage() = std::move(values);
    }
    return model;
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidInput, (dir / "manifest.json").string() + ": " + e.what());
  }
}

}  // namespace layertracer::model
