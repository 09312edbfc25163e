#include "ntformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "ntformer/parallel.hpp"

namespace ntformer {

namespace {

constexpr std::size_t kEvalChunk = 1024;

template <typename T>
std::vector<Tensor<T>> snapshot(const Model<T>& model) {
  std::vector<Tensor<T>> out;
  out.reserve(model.parameters().size());
  for (const auto& p : model.parameters()) out.push_back(p.value);
  return out;
}

template <typename T>
void restore(Model<T>& model, const std::vector<Tensor<T>>& values) {
  auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value = values[i];
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (patience < 1) throw std::invalid_argument("patience must be >= 1");
  if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
  if (learning_rate < 0.0 || weight_decay < 0.0) {
    throw std::invalid_argument("learning_rate and weight_decay must be non-negative");
  }
}

template <typename T>
void adamw_step(std::span<Parameter<T>* const> params, AdamWState<T>& state,
                const AdamWHyper& hyper) {
  if (state.first_moment.size() != params.size()) {
    state.first_moment.clear();
    state.second_moment.clear();
    for (auto* p : params) {
      state.first_moment.emplace_back(p->value.shape());
      state.second_moment.emplace_back(p->value.shape());
    }
    state.step = 0;
  }
  ++state.step;
  const double b1 = hyper.beta1, b2 = hyper.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double decay = 1.0 - hyper.learning_rate * hyper.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<T>& p = *params[k];
    Tensor<T>& m = state.first_moment[k];
    Tensor<T>& v = state.second_moment[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double mi = b1 * m[i] + (1.0 - b1) * g;
      const double vi = b2 * v[i] + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      double theta = static_cast<double>(p.value[i]) * decay;
      theta -= hyper.learning_rate * (mi / correction1) / (std::sqrt(vi / correction2) + hyper.epsilon);
      p.value[i] = static_cast<T>(theta);
    }
  }
}

std::size_t argmax_lowest(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c) {
    if (row[c] > row[best]) best = c;
  }
  return best;
}

template <typename T>
std::vector<T> predict_logits(Model<T>& model, const TokenTables<T>& tables,
                              std::span<const NodeId> ids) {
  std::vector<T> out;
  out.reserve(ids.size() * static_cast<std::size_t>(model.num_classes()));
  for (std::size_t start = 0; start < ids.size(); start += kEvalChunk) {
    auto chunk = ids.subspan(start, std::min(kEvalChunk, ids.size() - start));
    Tape<T> tape;
    ForwardOutput fw = model.forward(tape, chunk, tables);
    const auto& logits = tape.value(fw.logits).values();
    out.insert(out.end(), logits.begin(), logits.end());
  }
  return out;
}

template <typename T>
double evaluate(Model<T>& model, const TokenTables<T>& tables, const LabelVector& labels,
                std::span<const NodeId> ids) {
  if (ids.empty()) throw std::invalid_argument("evaluate: empty node id set");
  const std::vector<T> logits = predict_logits(model, tables, ids);
  const auto c = static_cast<std::size_t>(model.num_classes());
  std::vector<double> row(c);
  std::size_t correct = 0;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    for (std::size_t j = 0; j < c; ++j) row[j] = static_cast<double>(logits[k * c + j]);
    if (static_cast<int>(argmax_lowest(row)) == labels[ids[k]]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ids.size());
}

template <typename T>
std::optional<FusionWeights> mean_fusion_weights(Model<T>& model, const TokenTables<T>& tables,
                                                 std::span<const NodeId> ids) {
  if (model.config().fusion == FusionMode::kConcat || ids.empty()) return std::nullopt;
  FusionWeights acc{};
  for (std::size_t start = 0; start < ids.size(); start += kEvalChunk) {
    auto chunk = ids.subspan(start, std::min(kEvalChunk, ids.size() - start));
    Tape<T> tape;
    ForwardOutput fw = model.forward(tape, chunk, tables);
    const Tensor<T>& w = tape.value(*fw.weights);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      for (std::size_t s = 0; s < fw.order.size(); ++s) {
        acc[static_cast<std::size_t>(fw.order[s])] += static_cast<double>(w.at(b, s));
      }
    }
  }
  for (double& a : acc) a /= static_cast<double>(ids.size());
  return acc;
}

template <typename T>
RunMetrics train(Model<T>& model, const TokenTables<T>& tables, const Dataset& data,
                 const TrainConfig& cfg) {
  cfg.validate();
  if (data.splits.train.empty()) throw std::invalid_argument("train: empty train split");
  validate_split(data.splits, data.labels.size());

  std::mt19937_64 shuffler(cfg.seed ^ 0x5deece66dULL);
  std::vector<NodeId> order(data.splits.train);
  std::span<const NodeId> selection_ids =
      data.splits.val.empty() ? std::span<const NodeId>(data.splits.train)
                              : std::span<const NodeId>(data.splits.val);
  std::vector<Parameter<T>*> params = model.parameter_ptrs();
  AdamWState<T> state;
  const AdamWHyper hyper{cfg.learning_rate, cfg.weight_decay};

  RunMetrics metrics;
  std::vector<Tensor<T>> best_values = snapshot(model);
  int waited = 0;
  std::vector<int> batch_labels;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffler);
    double loss_total = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      std::span<const NodeId> batch(order.data() + start,
                                    std::min(cfg.batch_size, order.size() - start));
      batch_labels.clear();
      for (NodeId v : batch) batch_labels.push_back(data.labels[v]);
      Tape<T> tape(true, DropoutKey{cfg.seed, static_cast<std::uint64_t>(epoch), batch_index});
      ForwardOutput fw = model.forward(tape, batch, tables);
      Var loss = ops::cross_entropy(tape, fw.logits, std::span<const int>(batch_labels));
      for (auto* p : params) p->zero_grad();
      tape.backward(loss);
      adamw_step<T>(params, state, hyper);
      loss_total += static_cast<double>(tape.value(loss)[0]) * static_cast<double>(batch.size());
    }
    const double val_acc = evaluate(model, tables, data.labels, selection_ids);
    metrics.epochs.push_back({epoch, loss_total / static_cast<double>(order.size()), val_acc});
    if (epoch == 1 || val_acc > metrics.best_val_accuracy) {
      metrics.best_val_accuracy = val_acc;
      metrics.best_epoch = epoch;
      best_values = snapshot(model);
      waited = 0;
    } else if (++waited >= cfg.patience) {
      break;
    }
  }
  restore(model, best_values);
  metrics.train_accuracy = evaluate(model, tables, data.labels, data.splits.train);
  if (!data.splits.test.empty()) {
    metrics.test_accuracy = evaluate(model, tables, data.labels, data.splits.test);
    metrics.fusion_weights = mean_fusion_weights(model, tables, data.splits.test);
  } else {
    metrics.fusion_weights = mean_fusion_weights(model, tables, data.splits.train);
  }
  return metrics;
}

std::pair<double, std::optional<double>> mean_and_std(std::span<const double> values) {
  if (values.empty()) return {0.0, std::nullopt};
  const double mean =
      std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() < 2) return {mean, std::nullopt};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

namespace {

template <typename T>
SeedSummary run_seeds_typed(const Dataset& data, const TokenBundle& bundle,
                            const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                            std::span<const std::uint64_t> seeds,
                            const std::function<void(std::uint64_t, Model<T>&)>& sink) {
  const TokenTables<T> tables = TokenTables<T>::from(bundle, data.features);
  std::vector<SeedRecord> records(seeds.size());
  std::vector<std::optional<Model<T>>> models(seeds.size());
  parallel_for(seeds.size(), 1, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      Model<T> model(model_cfg, data.features.cols(), data.labels.num_classes, seeds[i]);
      TrainConfig cfg = train_cfg;
      cfg.seed = seeds[i];
      records[i] = {seeds[i], train(model, tables, data, cfg)};
      if (sink) models[i].emplace(std::move(model));
    }
  });
  if (sink) {
    for (std::size_t i = 0; i < seeds.size(); ++i) sink(seeds[i], *models[i]);
  }

  SeedSummary summary;
  summary.runs = std::move(records);
  std::vector<double> accs;
  for (const auto& r : summary.runs) accs.push_back(r.metrics.test_accuracy);
  std::tie(summary.mean_test_accuracy, summary.std_test_accuracy) = mean_and_std(accs);
  if (!summary.runs.empty() && summary.runs.front().metrics.fusion_weights) {
    FusionWeights mean{};
    for (const auto& r : summary.runs) {
      for (std::size_t s = 0; s < kNumSequences; ++s) mean[s] += (*r.metrics.fusion_weights)[s];
    }
    for (double& m : mean) m /= static_cast<double>(summary.runs.size());
    summary.mean_fusion_weights = mean;
  }
  return summary;
}

}  // namespace

SeedSummary run_seeds(const Dataset& data, const TokenBundle& bundle, const ModelConfig& model_cfg,
                      const TrainConfig& train_cfg, std::span<const std::uint64_t> seeds,
                      const TrainedModelSink* sink) {
  if (seeds.empty()) throw std::invalid_argument("run_seeds: need at least one seed");
  if (train_cfg.precision == Precision::kDouble) {
    return run_seeds_typed<double>(data, bundle, model_cfg, train_cfg, seeds,
                                   sink ? sink->dual : nullptr);
  }
  return run_seeds_typed<float>(data, bundle, model_cfg, train_cfg, seeds,
                                sink ? sink->single : nullptr);
}

std::vector<VariantResult> ablate(const Dataset& data, const TokenBundle& bundle,
                                  const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                                  std::span<const SequenceType> single_variants,
                                  std::span<const FusionMode> fusion_modes,
                                  std::span<const std::uint64_t> seeds) {
  std::vector<VariantResult> out;
  for (SequenceType s : single_variants) {
    ModelConfig cfg = model_cfg;
    cfg.sequences = SequenceMask::only(s);
    cfg.fusion = FusionMode::kAdaptive;
    out.push_back({std::string(sequence_name(s)), cfg,
                   run_seeds(data, bundle, cfg, train_cfg, seeds)});
  }
  std::vector<FusionMode> modes{FusionMode::kAdaptive};
  for (FusionMode m : fusion_modes) {
    if (std::find(modes.begin(), modes.end(), m) == modes.end()) modes.push_back(m);
  }
  for (FusionMode m : modes) {
    ModelConfig cfg = model_cfg;
    cfg.sequences = SequenceMask{};
    cfg.fusion = m;
    std::string name = m == FusionMode::kAdaptive ? "full" : "full/" + std::string(to_string(m));
    out.push_back({name, cfg, run_seeds(data, bundle, cfg, train_cfg, seeds)});
  }
  return out;
}

SweepParam parse_sweep_param(std::string_view s) {
  if (s == "hops") return SweepParam::kHops;
  if (s == "topk") return SweepParam::kTopk;
  throw std::invalid_argument("sweep parameter must be hops or topk, got '" + std::string(s) + "'");
}

std::vector<SweepRow> sweep(const Dataset& data, SweepParam param,
                            std::span<const std::size_t> values, const Node2ParConfig& base_tokens,
                            const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                            std::span<const std::uint64_t> seeds, const BundleProvider& provider) {
  if (values.empty()) throw std::invalid_argument("sweep: no values given");
  std::vector<Node2ParConfig> configs;
  for (std::size_t v : values) {
    Node2ParConfig cfg = base_tokens;
    if (param == SweepParam::kHops) {
      cfg.hops = static_cast<int>(v);
    } else {
      cfg.topk = v;
    }
    cfg.validate(data.graph.num_nodes());
    configs.push_back(cfg);
  }
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < values.size(); ++i) {
    TokenBundle bundle =
        provider ? provider(configs[i]) : generate_bundle(data.graph, data.features, configs[i]);
    rows.push_back({values[i], configs[i], run_seeds(data, bundle, model_cfg, train_cfg, seeds)});
  }
  return rows;
}

template void adamw_step<float>(std::span<Parameter<float>* const>, AdamWState<float>&,
                                const AdamWHyper&);
template void adamw_step<double>(std::span<Parameter<double>* const>, AdamWState<double>&,
                                 const AdamWHyper&);
template RunMetrics train<float>(Model<float>&, const TokenTables<float>&, const Dataset&,
                                 const TrainConfig&);
template RunMetrics train<double>(Model<double>&, const TokenTables<double>&, const Dataset&,
                                  const TrainConfig&);
template double evaluate<float>(Model<float>&, const TokenTables<float>&, const LabelVector&,
                                std::span<const NodeId>);
template double evaluate<double>(Model<double>&, const TokenTables<double>&, const LabelVector&,
                                 std::span<const NodeId>);
template std::optional<FusionWeights> mean_fusion_weights<float>(Model<float>&,
                                                                 const TokenTables<float>&,
                                                                 std::span<const NodeId>);
template std::optional<FusionWeights> mean_fusion_weights<double>(Model<double>&,
                                                                  const TokenTables<double>&,
                                                                  std::span<const NodeId>);
template std::vector<float> predict_logits<float>(Model<float>&, const TokenTables<float>&,
                                                  std::span<const NodeId>);
template std::vector<double> predict_logits<double>(Model<double>&, const TokenTables<double>&,
                                                    std::span<const NodeId>);

}  // namespace ntformer
