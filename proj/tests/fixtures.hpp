// Small seeded datasets shared by the model/training tests and the acceptance runner.
#pragma once

#include <cstdint>
#include <random>

#include "ntformer/graph.hpp"
#include "ntformer/model.hpp"
#include "ntformer/node2par.hpp"
#include "oracles.hpp"

namespace ntformer::fixture {

struct Toy {
  Graph graph;
  FeatureMatrix features;
  LabelVector labels;
  TokenBundle bundle;
};

// Random graph with every node given at least one neighbour so attribute
// tokens are not trivially zero.
inline Toy make_toy(std::size_t n, std::size_t d, int hops, std::size_t topk, int classes,
                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::pair<NodeId, NodeId>> edges;
  std::bernoulli_distribution coin(0.3);
  for (NodeId u = 0; u < n; ++u) {
    edges.emplace_back(u, static_cast<NodeId>((u + 1) % n));
    for (NodeId v = u + 2; v < n; ++v)
      if (coin(rng) && !(u == 0 && v == n - 1)) edges.emplace_back(u, v);
  }
  Toy t;
  t.graph = build_graph(edges, n);
  t.features = oracle::random_features(n, d, rng);
  t.labels.num_classes = classes;
  for (std::size_t i = 0; i < n; ++i) t.labels.labels.push_back(static_cast<int>(i % classes));
  Node2ParConfig cfg;
  cfg.hops = hops;
  cfg.topk = topk;
  t.bundle = generate_bundle(t.graph, t.features, cfg);
  return t;
}

// Tiny double-precision model settings used by gradient checks.
inline ModelConfig tiny_model_config(LayerNormMode ln) {
  ModelConfig m;
  m.hidden_dim = 8;
  m.ffn_dim = 12;
  m.fusion_dim = 6;
  m.classifier_dim = 10;
  m.layers = 1;
  m.heads = 1;
  m.dropout = 0.0;
  m.attention_dropout = 0.0;
  m.layer_norm = ln;
  return m;
}

// Overwrites every parameter (biases, LN scales and fusion.w1 included) with
// seeded values so no term of the forward pass is trivially zero.
template <typename T>
void randomize(Model<T>& model, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& p : model.parameters())
    for (T& v : p.value.values()) v = static_cast<T>(u(rng));
}

}  // namespace ntformer::fixture
