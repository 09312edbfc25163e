#include "ntformer/model.hpp"

#include <cmath>
#include <stdexcept>

namespace ntformer {

namespace {

constexpr std::array<std::string_view, kNumSequences> kSequenceNames{"ne_t", "ne_a", "no_t",
                                                                     "no_a"};

}  // namespace

std::string_view sequence_name(SequenceType s) {
  return kSequenceNames.at(static_cast<std::size_t>(s));
}

SequenceType parse_sequence(std::string_view name) {
  for (std::size_t i = 0; i < kNumSequences; ++i) {
    if (kSequenceNames[i] == name) return static_cast<SequenceType>(i);
  }
  throw std::invalid_argument("unknown sequence '" + std::string(name) +
                              "' (expected ne_t, ne_a, no_t or no_a)");
}

SequenceMask SequenceMask::only(SequenceType s) {
  SequenceMask m;
  m.active.fill(false);
  m.active[static_cast<std::size_t>(s)] = true;
  return m;
}

SequenceMask SequenceMask::parse(std::string_view list) {
  SequenceMask m;
  m.active.fill(false);
  std::size_t start = 0;
  while (start <= list.size()) {
    std::size_t end = list.find(',', start);
    if (end == std::string_view::npos) end = list.size();
    std::string_view item = list.substr(start, end - start);
    if (!item.empty()) m.active[static_cast<std::size_t>(parse_sequence(item))] = true;
    start = end + 1;
  }
  if (m.count() == 0) throw std::invalid_argument("sequence mask is empty");
  return m;
}

std::string SequenceMask::to_string() const {
  std::string out;
  for (SequenceType s : members()) {
    if (!out.empty()) out += ',';
    out += sequence_name(s);
  }
  return out;
}

std::size_t SequenceMask::count() const {
  std::size_t c = 0;
  for (bool a : active) c += a ? 1 : 0;
  return c;
}

std::vector<SequenceType> SequenceMask::members() const {
  std::vector<SequenceType> out;
  for (std::size_t i = 0; i < kNumSequences; ++i) {
    if (active[i]) out.push_back(static_cast<SequenceType>(i));
  }
  return out;
}

std::string_view to_string(LayerNormMode m) { return m == LayerNormMode::kPreLn ? "pre_ln" : "none"; }

std::string_view to_string(FusionMode m) {
  switch (m) {
    case FusionMode::kAdaptive: return "adaptive";
    case FusionMode::kMean: return "mean";
    case FusionMode::kConcat: return "concat";
  }
  return "adaptive";
}

std::string_view to_string(Activation a) { return a == Activation::kRelu ? "relu" : "gelu"; }

LayerNormMode parse_layer_norm_mode(std::string_view s) {
  if (s == "pre_ln") return LayerNormMode::kPreLn;
  if (s == "none") return LayerNormMode::kNone;
  throw std::invalid_argument("layer_norm must be pre_ln or none, got '" + std::string(s) + "'");
}

FusionMode parse_fusion_mode(std::string_view s) {
  if (s == "adaptive") return FusionMode::kAdaptive;
  if (s == "mean") return FusionMode::kMean;
  if (s == "concat") return FusionMode::kConcat;
  throw std::invalid_argument("fusion must be adaptive, mean or concat, got '" + std::string(s) +
                              "'");
}

Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "gelu") return Activation::kGelu;
  throw std::invalid_argument("activation must be relu or gelu, got '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  if (hidden_dim == 0 || ffn_dim == 0 || fusion_dim == 0 || classifier_dim == 0) {
    throw std::invalid_argument("model dimensions must be positive");
  }
  if (heads == 0 || hidden_dim % heads != 0) {
    throw std::invalid_argument("hidden_dim must be divisible by heads");
  }
  if (layers < 1) throw std::invalid_argument("layers must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0 || attention_dropout < 0.0 || attention_dropout >= 1.0) {
    throw std::invalid_argument("dropout rates must lie in [0, 1)");
  }
  if (sequences.count() == 0) throw std::invalid_argument("at least one sequence must be active");
}

template <typename T>
TokenTables<T> TokenTables<T>::from(const TokenBundle& bundle, const FeatureMatrix& x) {
  if (bundle.num_nodes() != x.rows() || bundle.feature_dim() != x.cols()) {
    throw std::invalid_argument("token bundle does not match feature matrix");
  }
  TokenTables t;
  t.num_nodes = bundle.num_nodes();
  t.feature_dim = bundle.feature_dim();
  t.ne_length = bundle.ne_topology.length;
  t.no_length = bundle.no_topology.length;
  auto convert = [](const std::vector<double>& src, Shape shape) {
    std::vector<T> out(src.begin(), src.end());
    return Tensor<T>(std::move(shape), std::move(out));
  };
  t.ne_topology = convert(bundle.ne_topology.values, {t.num_nodes * t.ne_length, t.feature_dim});
  t.ne_attribute = convert(bundle.ne_attribute.values, {t.num_nodes * t.ne_length, t.feature_dim});
  t.features = convert(x.data(), {t.num_nodes, t.feature_dim});
  t.no_topology = bundle.no_topology.ids;
  t.no_attribute = bundle.no_attribute.ids;
  return t;
}

template <typename T>
Var batch_tokens(Tape<T>& tape, SequenceType s, std::span<const NodeId> batch,
                 const TokenTables<T>& tables) {
  const std::size_t d = tables.feature_dim;
  const bool neighborhood = s == SequenceType::kNeighborhoodTopology ||
                            s == SequenceType::kNeighborhoodAttribute;
  const std::size_t len = neighborhood ? tables.ne_length : tables.no_length;
  Tensor<T> out(Shape{batch.size(), len, d});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const NodeId node = batch[b];
    if (node >= tables.num_nodes) throw std::invalid_argument("node id out of range in batch");
    for (std::size_t k = 0; k < len; ++k) {
      const T* src;
      switch (s) {
        case SequenceType::kNeighborhoodTopology:
          src = tables.ne_topology.data() + (node * len + k) * d;
          break;
        case SequenceType::kNeighborhoodAttribute:
          src = tables.ne_attribute.data() + (node * len + k) * d;
          break;
        case SequenceType::kNodeTopology:
          src = tables.features.data() + tables.no_topology[node * len + k] * d;
          break;
        default:
          src = tables.features.data() + tables.no_attribute[node * len + k] * d;
          break;
      }
      std::copy_n(src, d, out.data() + (b * len + k) * d);
    }
  }
  return tape.constant(std::move(out));
}

template <typename T>
Model<T>::Model(const ModelConfig& config, std::size_t input_dim, int num_classes,
                std::uint64_t seed)
    : config_(config), input_dim_(input_dim), num_classes_(num_classes) {
  config_.validate();
  if (input_dim == 0) throw std::invalid_argument("model input dimension must be positive");
  if (num_classes < 2) throw std::invalid_argument("model needs at least 2 classes");
  std::mt19937_64 rng(seed);

  if (config_.share_encoder) {
    encoders_.push_back(build_encoder("encoder.shared", rng));
    encoder_slot_.fill(0);
  } else {
    for (SequenceType s : config_.sequences.members()) {
      encoder_slot_[static_cast<std::size_t>(s)] = encoders_.size();
      encoders_.push_back(build_encoder("encoder." + std::string(sequence_name(s)), rng));
    }
  }
  const std::size_t d = config_.hidden_dim;
  if (config_.fusion == FusionMode::kAdaptive) {
    fusion_w0_ = add_weight("fusion.w0", d, config_.fusion_dim, rng);
    fusion_w1_ = add_constant("fusion.w1", {config_.fusion_dim, 1}, T(0));
  }
  const std::size_t cls_in =
      config_.fusion == FusionMode::kConcat ? d * config_.sequences.count() : d;
  cls_w1_ = add_weight("classifier.w1", cls_in, config_.classifier_dim, rng);
  cls_b1_ = add_constant("classifier.b1", {config_.classifier_dim}, T(0));
  cls_w2_ = add_weight("classifier.w2", config_.classifier_dim,
                       static_cast<std::size_t>(num_classes), rng);
  cls_b2_ = add_constant("classifier.b2", {static_cast<std::size_t>(num_classes)}, T(0));
}

template <typename T>
std::size_t Model<T>::add_weight(std::string name, std::size_t rows, std::size_t cols,
                                 std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> values(rows * cols);
  for (T& v : values) v = static_cast<T>(dist(rng));
  params_.emplace_back(std::move(name), Tensor<T>(Shape{rows, cols}, std::move(values)));
  return params_.size() - 1;
}

template <typename T>
std::size_t Model<T>::add_constant(std::string name, Shape shape, T fill) {
  params_.emplace_back(std::move(name), Tensor<T>(std::move(shape), fill));
  return params_.size() - 1;
}

template <typename T>
typename Model<T>::EncoderParams Model<T>::build_encoder(const std::string& prefix,
                                                          std::mt19937_64& rng) {
  const std::size_t d = config_.hidden_dim;
  const std::size_t dk = d / config_.heads;
  EncoderParams enc;
  enc.projection = add_weight(prefix + ".projection", input_dim_, d, rng);
  for (int l = 0; l < config_.layers; ++l) {
    const std::string lp = prefix + ".layer" + std::to_string(l);
    LayerParams p;
    for (std::size_t h = 0; h < config_.heads; ++h) {
      const std::string hp = lp + ".head" + std::to_string(h);
      p.query.push_back(add_weight(hp + ".query", d, dk, rng));
      p.key.push_back(add_weight(hp + ".key", d, dk, rng));
      p.value.push_back(add_weight(hp + ".value", d, dk, rng));
    }
    p.output = add_weight(lp + ".output", d, d, rng);
    p.ffn_w1 = add_weight(lp + ".ffn.w1", d, config_.ffn_dim, rng);
    p.ffn_b1 = add_constant(lp + ".ffn.b1", {config_.ffn_dim}, T(0));
    p.ffn_w2 = add_weight(lp + ".ffn.w2", config_.ffn_dim, d, rng);
    p.ffn_b2 = add_constant(lp + ".ffn.b2", {d}, T(0));
    if (config_.layer_norm == LayerNormMode::kPreLn) {
      p.ln1_gamma = add_constant(lp + ".ln1.gamma", {d}, T(1));
      p.ln1_beta = add_constant(lp + ".ln1.beta", {d}, T(0));
      p.ln2_gamma = add_constant(lp + ".ln2.gamma", {d}, T(1));
      p.ln2_beta = add_constant(lp + ".ln2.beta", {d}, T(0));
    }
    enc.layers.push_back(std::move(p));
  }
  return enc;
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::parameter_ptrs() {
  std::vector<Parameter<T>*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p);
  return out;
}

template <typename T>
Parameter<T>& Model<T>::parameter(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::invalid_argument("no parameter named '" + std::string(name) + "'");
}

template <typename T>
const typename Model<T>::EncoderParams& Model<T>::encoder_for(SequenceType s) const {
  if (!config_.share_encoder && !config_.sequences.contains(s)) {
    throw std::invalid_argument("sequence " + std::string(sequence_name(s)) + " is not active");
  }
  return encoders_[encoder_slot_[static_cast<std::size_t>(s)]];
}

template <typename T>
Var Model<T>::transformer_layer(Tape<T>& tape, Var h, const LayerParams& p) {
  const bool pre_ln = config_.layer_norm == LayerNormMode::kPreLn;
  const std::size_t dk = config_.hidden_dim / config_.heads;
  const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(dk));

  Var attn_in = pre_ln ? ops::layer_norm(tape, h, bind(tape, p.ln1_gamma), bind(tape, p.ln1_beta))
                       : h;
  std::vector<Var> heads;
  heads.reserve(config_.heads);
  for (std::size_t k = 0; k < config_.heads; ++k) {
    Var q = ops::matmul(tape, attn_in, bind(tape, p.query[k]));
    Var key = ops::matmul(tape, attn_in, bind(tape, p.key[k]));
    Var v = ops::matmul(tape, attn_in, bind(tape, p.value[k]));
    Var scores = ops::scale(tape, ops::matmul(tape, q, key, false, true), inv_sqrt_dk);
    Var probs = ops::dropout(tape, ops::softmax_rows(tape, scores), config_.attention_dropout);
    heads.push_back(ops::matmul(tape, probs, v));
  }
  Var merged = heads.size() == 1 ? heads[0] : ops::concat_last<T>(tape, heads);
  Var attended = ops::matmul(tape, merged, bind(tape, p.output));
  Var h_mid = ops::add(tape, attended, h);

  Var ffn_in = pre_ln ? ops::layer_norm(tape, h_mid, bind(tape, p.ln2_gamma),
                                        bind(tape, p.ln2_beta))
                      : h_mid;
  Var hidden = ops::add_bias(tape, ops::matmul(tape, ffn_in, bind(tape, p.ffn_w1)),
                             bind(tape, p.ffn_b1));
  hidden = ops::dropout(tape, ops::activation(tape, hidden, config_.activation), config_.dropout);
  Var ffn_out = ops::add_bias(tape, ops::matmul(tape, hidden, bind(tape, p.ffn_w2)),
                              bind(tape, p.ffn_b2));
  return ops::add(tape, ffn_out, h_mid);
}

template <typename T>
Var Model<T>::encode(Tape<T>& tape, Var tokens, SequenceType s) {
  const EncoderParams& enc = encoder_for(s);
  const Tensor<T>& tv = tape.value(tokens);
  if (tv.rank() != 3 || tv.dim(2) != input_dim_) {
    throw std::invalid_argument("encode: tokens must be B x L x " + std::to_string(input_dim_) +
                                ", got " + shape_string(tv.shape()));
  }
  if (tv.dim(1) == 0) throw std::invalid_argument("encode: empty token sequence");
  Var h = ops::dropout(tape, ops::matmul(tape, tokens, bind(tape, enc.projection)),
                       config_.dropout);
  for (const LayerParams& layer : enc.layers) h = transformer_layer(tape, h, layer);
  return ops::first_row(tape, h);
}

template <typename T>
ForwardOutput Model<T>::forward(Tape<T>& tape, std::span<const NodeId> batch,
                                const TokenTables<T>& tables) {
  if (batch.empty()) throw std::invalid_argument("forward: empty batch");
  ForwardOutput out;
  out.order = config_.sequences.members();
  std::vector<Var> reps;
  for (SequenceType s : out.order) {
    reps.push_back(encode(tape, batch_tokens(tape, s, batch, tables), s));
  }

  Var fused;
  if (config_.fusion == FusionMode::kConcat) {
    fused = reps.size() == 1 ? reps[0] : ops::concat_last<T>(tape, reps);
  } else {
    Var weights;
    if (config_.fusion == FusionMode::kAdaptive) {
      std::vector<Var> logits;
      for (Var z : reps) {
        Var hidden = ops::activation(tape, ops::matmul(tape, z, bind(tape, fusion_w0_)),
                                     config_.activation);
        logits.push_back(ops::matmul(tape, hidden, bind(tape, fusion_w1_)));
      }
      Var stacked = logits.size() == 1 ? logits[0] : ops::concat_last<T>(tape, logits);
      weights = ops::softmax_rows(tape, stacked);
    } else {
      weights = tape.constant(
          Tensor<T>(Shape{batch.size(), reps.size()}, T(1) / static_cast<T>(reps.size())));
    }
    out.weights = weights;
    for (std::size_t i = 0; i < reps.size(); ++i) {
      Var term = ops::row_scale(tape, reps[i], ops::column(tape, weights, i));
      fused = i == 0 ? term : ops::add(tape, fused, term);
    }
  }

  Var hidden = ops::add_bias(tape, ops::matmul(tape, fused, bind(tape, cls_w1_)),
                             bind(tape, cls_b1_));
  hidden = ops::activation(tape, hidden, config_.activation);
  out.logits = ops::add_bias(tape, ops::matmul(tape, hidden, bind(tape, cls_w2_)),
                             bind(tape, cls_b2_));
  return out;
}

template struct TokenTables<float>;
template struct TokenTables<double>;
template class Model<float>;
template class Model<double>;
template Var batch_tokens<float>(Tape<float>&, SequenceType, std::span<const NodeId>,
                                 const TokenTables<float>&);
template Var batch_tokens<double>(Tape<double>&, SequenceType, std::span<const NodeId>,
                                  const TokenTables<double>&);

}  // namespace ntformer
