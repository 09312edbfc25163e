#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ntformer/model.hpp"
#include "ntformer/node2par.hpp"
#include "ntformer/training.hpp"

namespace ntformer {

// Everything needed to reproduce a run, as one flat key-value document.
struct RunConfig {
  Node2ParConfig tokens;
  ModelConfig model;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0};

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

std::string_view to_string(Precision p);
Precision parse_precision(std::string_view s);

// Missing keys keep their defaults; unknown keys and ill-typed values throw
// UserError.
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::filesystem::path& path);

// Pretty-printed JSON with every key present, in a fixed order.
std::string render_run_config(const RunConfig& cfg);

// Names of all accepted keys, in render order.
const std::vector<std::string>& run_config_keys();

}  // namespace ntformer
