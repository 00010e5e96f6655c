#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "zachvit/model.hpp"

namespace zachvit {

/// ModelConfig <-> JSON object using the config's field names verbatim.
nlohmann::json config_to_json(const ModelConfig& config);
/// Throws ConfigError on missing/mistyped fields or an invalid config.
ModelConfig config_from_json(const nlohmann::json& j);
ModelConfig load_config(const std::filesystem::path& path);

/// Parameter file layout (little-endian):
///   "ZVIT" | version u32 | component count u32 |
///   per component: name length u16 | name bytes | rank u8 |
///                  extents u32 x rank | values f64 x prod(extents)
inline constexpr std::uint32_t kParamsVersion = 1;

std::string serialize_params(const ModelParams& params);
/// Parses into the layout implied by `config`; names and shapes must match.
ModelParams deserialize_params(const std::string& bytes, const ModelConfig& config);
void save_params(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_params(const std::filesystem::path& path, const ModelConfig& config);

}  // namespace zachvit
