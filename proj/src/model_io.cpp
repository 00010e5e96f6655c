#include "zachvit/model_io.hpp"

#include <fstream>

#include "zachvit/binary.hpp"
#include "zachvit/errors.hpp"

namespace zachvit {

using nlohmann::json;

json config_to_json(const ModelConfig& c) {
  return json{{"input_size", c.input_size},
              {"channels", c.channels},
              {"patch_size", c.patch_size},
              {"unit_dims", c.unit_dims},
              {"mlp_dims", c.mlp_dims},
              {"heads", c.heads},
              {"num_classes", c.num_classes},
              {"pooling", to_string(c.pooling)},
              {"use_positional", c.use_positional},
              {"use_adaptive_residual", c.use_adaptive_residual},
              {"shuffle_patches", c.shuffle_patches}};
}

ModelConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig c;
  auto field = [&](const char* name) -> const json& {
    auto it = j.find(name);
    if (it == j.end()) throw ConfigError(std::string("model config is missing field '") + name + "'");
    return *it;
  };
  try {
    c.input_size = field("input_size").get<std::size_t>();
    c.channels = field("channels").get<std::size_t>();
    c.patch_size = field("patch_size").get<std::size_t>();
    c.unit_dims = field("unit_dims").get<std::vector<std::size_t>>();
    c.mlp_dims = field("mlp_dims").get<std::vector<std::size_t>>();
    c.heads = field("heads").get<std::size_t>();
    c.num_classes = field("num_classes").get<std::size_t>();
    c.pooling = pooling_from_string(field("pooling").get<std::string>());
    c.use_positional = field("use_positional").get<bool>();
    c.use_adaptive_residual = field("use_adaptive_residual").get<bool>();
    c.shuffle_patches = field("shuffle_patches").get<bool>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  for (const auto& [key, _] : j.items())
    if (!config_to_json(c).contains(key)) throw ConfigError("model config has unknown field '" + key + "'");
  c.validate();
  return c;
}

ModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

std::string serialize_params(const ModelParams& params) {
  binary::Writer w;
  w.bytes("ZVIT");
  w.put<std::uint32_t>(kParamsVersion);
  std::uint32_t count = 0;
  params.for_each([&](const std::string&, const Tensor&) { ++count; });
  w.put<std::uint32_t>(count);
  params.for_each([&](const std::string& name, const Tensor& t) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
    for (double v : t.values()) w.put<double>(v);
  });
  return std::move(w.str());
}

ModelParams deserialize_params(const std::string& bytes, const ModelConfig& config) {
  Rng rng(0);
  ModelParams params = init_params(config, rng);
  binary::Reader r(bytes);
  if (r.bytes(4, "magic") != "ZVIT") throw FormatError("bad magic, expected 'ZVIT'", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kParamsVersion) throw FormatError("unsupported params version " + std::to_string(version), 4);
  const auto count = r.get<std::uint32_t>("component count");
  std::uint32_t expected = 0;
  params.for_each([&](const std::string&, const Tensor&) { ++expected; });
  if (count != expected)
    throw FormatError("component count " + std::to_string(count) + " does not match config (" +
                          std::to_string(expected) + ")",
                      8);
  params.for_each([&](const std::string& name, Tensor& t) {
    const std::size_t at = r.offset();
    const auto len = r.get<std::uint16_t>("name length");
    const auto got = r.bytes(len, "name");
    if (got != name) throw FormatError("expected component '" + name + "', found '" + std::string(got) + "'", at);
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& e : shape) e = r.get<std::uint32_t>("extent");
    if (shape != t.shape())
      throw FormatError("component '" + name + "' has shape " + shape_str(shape) + ", config implies " +
                            shape_str(t.shape()),
                        at);
    for (auto& v : t.values()) v = r.get<double>("values");
  });
  if (r.remaining() != 0) throw FormatError("trailing bytes after last component", r.offset());
  return params;
}

void save_params(const std::filesystem::path& path, const ModelParams& params) {
  binary::write_file(path.string(), serialize_params(params));
}

ModelParams load_params(const std::filesystem::path& path, const ModelConfig& config) {
  return deserialize_params(binary::read_file(path.string()), config);
}

}  // namespace zachvit
