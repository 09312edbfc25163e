#pragma once

#include <filesystem>

#include "ntformer/graph.hpp"

namespace ntformer {

// Dataset directory:
//   graph.edges   "u v" per line, 0-indexed; '#' starts a comment. An optional
//                 "# nodes N" line fixes n, otherwise n = max(max id + 1, #labels).
//   features.bin  "NTFX", n u64, d u32, n*d little-endian f32 row-major
//   labels.txt    one integer per line
//   splits.json   {"train": [...], "val": [...], "test": [...]}
// Every failure throws UserError.
Dataset load_dataset(const std::filesystem::path& dir);
void save_dataset(const Dataset& data, const std::filesystem::path& dir);

FeatureMatrix read_features(const std::filesystem::path& path);
void write_features(const FeatureMatrix& x, const std::filesystem::path& path);

}  // namespace ntformer
