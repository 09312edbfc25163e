#pragma once

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ntformer/run_config.hpp"
#include "ntformer/training.hpp"

namespace ntformer {

struct ReportSection {
  std::string name;                   // "train", "ne_t", "full/mean", "hops=3", ...
  std::optional<std::size_t> value;   // sweep value
  SeedSummary summary;
};

struct Report {
  std::string command;
  RunConfig config;
  std::size_t num_nodes = 0;
  std::size_t num_edges = 0;
  std::size_t feature_dim = 0;
  int num_classes = 0;
  double edge_homophily = 0.0;
  std::vector<ReportSection> sections;
};

// Stable-key JSON; equal reports render to equal bytes.
std::string render_report_json(const Report& report);

// One row per (section, seed).
std::string render_report_csv(const Report& report);

// Per-epoch loss and validation accuracy, one row per (section, seed, epoch).
std::string render_curves_csv(const Report& report);

void write_text(const std::filesystem::path& path, std::string_view text);

// Wall-clock phase timings, kept apart from the report so that stays reproducible.
class PhaseTimer {
 public:
  void start(std::string phase);
  void stop();
  std::string render_json() const;

 private:
  std::vector<std::pair<std::string, double>> phases_;
  std::string current_;
  std::chrono::steady_clock::time_point begin_;
};

}  // namespace ntformer
