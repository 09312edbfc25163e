#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>

#include "ntformer/node2par.hpp"

namespace ntformer {

inline constexpr std::uint32_t kTokenCacheVersion = 1;

// Token bundle on disk ("N2PT"). Neighborhood tokens are stored as f32, so a
// loaded bundle holds the f32-rounded values of the saved one.
void save_token_cache(const TokenBundle& bundle, const std::filesystem::path& path);

// Throws UserError "checksum mismatch", "version mismatch" or similar.
TokenBundle load_token_cache(const std::filesystem::path& path);

// As above, and additionally rejects with "config mismatch" a cache whose
// header disagrees with the requested config or dataset shape.
TokenBundle load_token_cache(const std::filesystem::path& path, const Node2ParConfig& expected,
                             std::size_t num_nodes, std::size_t feature_dim);

// Hash of everything tokens are computed from (graph CSR and features). The
// N2PT header has no room for it, so the CLI keeps it in a "<cache>.key"
// sidecar and regenerates the cache when the dataset changed underneath.
std::uint64_t token_source_fingerprint(const Graph& g, const FeatureMatrix& x);
void write_cache_key(const std::filesystem::path& cache, std::uint64_t fingerprint);
// Absent when there is no readable sidecar.
std::optional<std::uint64_t> read_cache_key(const std::filesystem::path& cache);

// Casts neighborhood token values through f32, giving the bundle that a
// save/load round trip produces.
TokenBundle quantize_bundle(TokenBundle bundle);

}  // namespace ntformer
