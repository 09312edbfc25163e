#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ntformer/graph.hpp"
#include "ntformer/node2par.hpp"
#include "ntformer/tensor.hpp"

namespace ntformer {

// The four token sequences, in canonical order.
enum class SequenceType : std::size_t {
  kNeighborhoodTopology = 0,
  kNeighborhoodAttribute = 1,
  kNodeTopology = 2,
  kNodeAttribute = 3,
};
inline constexpr std::size_t kNumSequences = 4;

std::string_view sequence_name(SequenceType s);  // "ne_t", "ne_a", "no_t", "no_a"
SequenceType parse_sequence(std::string_view name);

struct SequenceMask {
  std::array<bool, kNumSequences> active{true, true, true, true};

  static SequenceMask only(SequenceType s);
  // Comma-separated sequence names, e.g. "ne_t,no_a".
  static SequenceMask parse(std::string_view list);
  std::string to_string() const;
  std::size_t count() const;
  std::vector<SequenceType> members() const;
  bool contains(SequenceType s) const { return active[static_cast<std::size_t>(s)]; }
  bool operator==(const SequenceMask&) const = default;
};

enum class LayerNormMode { kPreLn, kNone };
enum class FusionMode { kAdaptive, kMean, kConcat };

std::string_view to_string(LayerNormMode m);
std::string_view to_string(FusionMode m);
std::string_view to_string(Activation a);
LayerNormMode parse_layer_norm_mode(std::string_view s);
FusionMode parse_fusion_mode(std::string_view s);
Activation parse_activation(std::string_view s);

struct ModelConfig {
  std::size_t hidden_dim = 128;  // d^(0); residuals keep the output width equal
  std::size_t ffn_dim = 256;
  std::size_t fusion_dim = 64;   // d^f
  std::size_t classifier_dim = 128;
  int layers = 1;
  std::size_t heads = 8;
  double dropout = 0.1;
  double attention_dropout = 0.5;
  LayerNormMode layer_norm = LayerNormMode::kPreLn;
  bool share_encoder = false;
  Activation activation = Activation::kRelu;
  FusionMode fusion = FusionMode::kAdaptive;
  SequenceMask sequences;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Bundle arrays converted to the model's scalar type once per run. Neighborhood
// tokens are stored as (n*(K+1)) x d tables so a batch is a row gather.
template <typename T>
struct TokenTables {
  std::size_t num_nodes = 0;
  std::size_t feature_dim = 0;
  std::size_t ne_length = 0;
  std::size_t no_length = 0;
  Tensor<T> ne_topology;
  Tensor<T> ne_attribute;
  Tensor<T> features;
  std::vector<NodeId> no_topology;
  std::vector<NodeId> no_attribute;

  static TokenTables from(const TokenBundle& bundle, const FeatureMatrix& x);
};

struct ForwardOutput {
  Var logits;                  // B x c
  std::optional<Var> weights;  // B x |active| fusion weights (absent for concat)
  std::vector<SequenceType> order;
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::size_t input_dim, int num_classes, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::size_t input_dim() const { return input_dim_; }
  int num_classes() const { return num_classes_; }

  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  std::vector<Parameter<T>*> parameter_ptrs();
  Parameter<T>& parameter(std::string_view name);

  // Token sequences -> per-node logits for the given batch of node ids.
  ForwardOutput forward(Tape<T>& tape, std::span<const NodeId> batch,
                        const TokenTables<T>& tables);

  // Tokens (B x L x d) through projection and Transformer layers; returns the
  // first row of the final hidden state, B x d^(0).
  Var encode(Tape<T>& tape, Var tokens, SequenceType s);

 private:
  struct LayerParams {
    std::vector<std::size_t> query, key, value;  // one per head
    std::size_t output;
    std::size_t ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    std::size_t ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  };
  struct EncoderParams {
    std::size_t projection;
    std::vector<LayerParams> layers;
  };

  std::size_t add_weight(std::string name, std::size_t rows, std::size_t cols,
                         std::mt19937_64& rng);
  std::size_t add_constant(std::string name, Shape shape, T fill);
  EncoderParams build_encoder(const std::string& prefix, std::mt19937_64& rng);
  Var transformer_layer(Tape<T>& tape, Var h, const LayerParams& p);
  Var bind(Tape<T>& tape, std::size_t index) { return tape.parameter(params_[index]); }
  const EncoderParams& encoder_for(SequenceType s) const;

  ModelConfig config_;
  std::size_t input_dim_;
  int num_classes_;
  std::vector<Parameter<T>> params_;
  std::vector<EncoderParams> encoders_;
  std::array<std::size_t, kNumSequences> encoder_slot_{};
  std::size_t fusion_w0_ = 0, fusion_w1_ = 0;
  std::size_t cls_w1_ = 0, cls_b1_ = 0, cls_w2_ = 0, cls_b2_ = 0;
};

// Gathers the four token sequences for a batch as B x L x d constants.
template <typename T>
Var batch_tokens(Tape<T>& tape, SequenceType s, std::span<const NodeId> batch,
                 const TokenTables<T>& tables);

}  // namespace ntformer
