#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ntformer/tensor.hpp"

namespace ntformer {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

// "NTFW", version u32, count u32, then per parameter: name length u32, name,
// rank u32, dims u64 each, little-endian f32 payload.
template <typename T>
void save_checkpoint(const std::vector<Parameter<T>>& params, const std::filesystem::path& path);

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

// Overwrites the values of `params` by name; names and shapes must match exactly.
template <typename T>
void load_checkpoint(std::vector<Parameter<T>>& params, const std::filesystem::path& path);

}  // namespace ntformer
