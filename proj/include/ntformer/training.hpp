#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ntformer/graph.hpp"
#include "ntformer/model.hpp"
#include "ntformer/node2par.hpp"
#include "ntformer/tensor.hpp"

namespace ntformer {

struct TrainConfig {
  double learning_rate = 5e-4;
  double weight_decay = 1e-5;
  std::size_t batch_size = 1024;
  int max_epochs = 500;
  int patience = 50;
  std::uint64_t seed = 0;
  Precision precision = Precision::kSingle;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

template <typename T>
struct AdamWState {
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
  std::int64_t step = 0;
};

struct AdamWHyper {
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// One AdamW update with decoupled weight decay:
//   θ ← θ − lr·wd·θ, then θ ← θ − lr·m̂/(√v̂ + ε) with bias-corrected moments.
// Moments are allocated on the first call.
template <typename T>
void adamw_step(std::span<Parameter<T>* const> params, AdamWState<T>& state,
                const AdamWHyper& hyper);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

// Mean fusion weight per sequence type; inactive sequences report 0.
using FusionWeights = std::array<double, kNumSequences>;

struct RunMetrics {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_accuracy = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::optional<FusionWeights> fusion_weights;  // absent for concat fusion
};

// Minibatch training with early stopping on validation accuracy. The model is
// left holding the parameters of the best validation epoch. When the split has
// no validation nodes, training accuracy drives model selection.
template <typename T>
RunMetrics train(Model<T>& model, const TokenTables<T>& tables, const Dataset& data,
                 const TrainConfig& cfg);

// Argmax accuracy; ties go to the lowest class index.
template <typename T>
double evaluate(Model<T>& model, const TokenTables<T>& tables, const LabelVector& labels,
                std::span<const NodeId> ids);

// Mean adaptive or fixed fusion weights over `ids`; absent for concat fusion.
template <typename T>
std::optional<FusionWeights> mean_fusion_weights(Model<T>& model, const TokenTables<T>& tables,
                                                 std::span<const NodeId> ids);

// Inference-mode logits for `ids`, row-major |ids| x c.
template <typename T>
std::vector<T> predict_logits(Model<T>& model, const TokenTables<T>& tables,
                              std::span<const NodeId> ids);

std::size_t argmax_lowest(std::span<const double> row);

struct SeedRecord {
  std::uint64_t seed = 0;
  RunMetrics metrics;
};

struct SeedSummary {
  std::vector<SeedRecord> runs;
  double mean_test_accuracy = 0.0;
  std::optional<double> std_test_accuracy;  // sample std; absent with one seed
  std::optional<FusionWeights> mean_fusion_weights;
};

// Mean and sample standard deviation; std is absent for fewer than 2 values.
std::pair<double, std::optional<double>> mean_and_std(std::span<const double> values);

// Independent training runs, one per seed, aggregated on test accuracy.
// `on_model` (optional) receives each trained model in seed order, in single
// or double precision depending on cfg.precision.
struct TrainedModelSink {
  std::function<void(std::uint64_t seed, Model<float>&)> single;
  std::function<void(std::uint64_t seed, Model<double>&)> dual;
};
SeedSummary run_seeds(const Dataset& data, const TokenBundle& bundle, const ModelConfig& model_cfg,
                      const TrainConfig& train_cfg, std::span<const std::uint64_t> seeds,
                      const TrainedModelSink* sink = nullptr);

struct VariantResult {
  std::string name;  // "full", "ne_t", ..., or "fusion=mean"
  ModelConfig model;
  SeedSummary summary;
};

// Runs each requested single-sequence variant, then the full model under each
// requested fusion mode (adaptive always included), all on the same seeds.
std::vector<VariantResult> ablate(const Dataset& data, const TokenBundle& bundle,
                                  const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                                  std::span<const SequenceType> single_variants,
                                  std::span<const FusionMode> fusion_modes,
                                  std::span<const std::uint64_t> seeds);

enum class SweepParam { kHops, kTopk };
SweepParam parse_sweep_param(std::string_view s);

struct SweepRow {
  std::size_t value = 0;
  Node2ParConfig tokens;
  SeedSummary summary;
};

// Supplies a bundle for a Node2Par configuration (e.g. through a cache).
using BundleProvider = std::function<TokenBundle(const Node2ParConfig&)>;

std::vector<SweepRow> sweep(const Dataset& data, SweepParam param,
                            std::span<const std::size_t> values, const Node2ParConfig& base_tokens,
                            const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                            std::span<const std::uint64_t> seeds,
                            const BundleProvider& provider = {});

}  // namespace ntformer
