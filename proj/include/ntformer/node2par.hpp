#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "ntformer/graph.hpp"

namespace ntformer {

struct Node2ParConfig {
  int hops = 3;                  // K: neighborhood tokens cover hops 0..K
  std::size_t topk = 10;         // n_k: sampled nodes per node-token sequence
  double ppr_damping = 0.85;     // r in (0, 1)
  int ppr_steps = 2;
  bool attr_adj_normalize = false;

  // Throws std::invalid_argument on K < 0, n_k outside [1, n), r outside
  // (0, 1) or ppr_steps < 1.
  void validate(std::size_t num_nodes) const;

  bool operator==(const Node2ParConfig&) const = default;
};

enum class View : std::uint8_t { kTopology, kAttribute };

// n x (K+1) x d, token k of node i holds the k-hop aggregate of node i.
struct NeighborhoodTokens {
  View view = View::kTopology;
  std::size_t num_nodes = 0;
  std::size_t length = 0;  // K + 1
  std::size_t dim = 0;
  std::vector<double> values;

  std::span<const double> token(std::size_t node, std::size_t hop) const {
    return {values.data() + (node * length + hop) * dim, dim};
  }
  std::span<double> token(std::size_t node, std::size_t hop) {
    return {values.data() + (node * length + hop) * dim, dim};
  }
  bool operator==(const NeighborhoodTokens&) const = default;
};

// n x (n_k+1) node ids; column 0 is the node itself. Features are gathered
// from X when a batch is assembled.
struct NodeTokens {
  View view = View::kTopology;
  std::size_t num_nodes = 0;
  std::size_t length = 0;  // n_k + 1
  std::vector<NodeId> ids;

  std::span<const NodeId> row(std::size_t node) const {
    return {ids.data() + node * length, length};
  }
  bool operator==(const NodeTokens&) const = default;
};

struct TokenBundle {
  Node2ParConfig config;
  NeighborhoodTokens ne_topology;
  NeighborhoodTokens ne_attribute;
  NodeTokens no_topology;
  NodeTokens no_attribute;

  std::size_t num_nodes() const { return ne_topology.num_nodes; }
  std::size_t feature_dim() const { return ne_topology.dim; }
  bool operator==(const TokenBundle&) const = default;
};

// Tokens X, S X, S^2 X, ..., S^K X by repeated spmm; S^k is never formed.
NeighborhoodTokens propagate_tokens(const SparseMatrix& propagator, const FeatureMatrix& x,
                                    int hops, View view);

inline NeighborhoodTokens neighborhood_tokens_topology(const SparseMatrix& a_hat,
                                                       const FeatureMatrix& x, int hops) {
  return propagate_tokens(a_hat, x, hops, View::kTopology);
}

inline NeighborhoodTokens neighborhood_tokens_attribute(const SparseMatrix& a_attr,
                                                        const FeatureMatrix& x, int hops) {
  return propagate_tokens(a_attr, x, hops, View::kAttribute);
}

// A ⊙ cos(X, X), evaluated on the edges of A only (no self-loops). Zero-norm
// rows have similarity 0. With `normalize`, each row is divided by its L1 norm
// unless that norm is zero.
SparseMatrix attribute_weighted_adjacency(const Graph& g, const FeatureMatrix& x,
                                          bool normalize);

// Personalized PageRank scores from node i after cfg.ppr_steps propagation
// steps, seeded with row i of a_hat. Dense n-vector.
std::vector<double> ppr_score_row(const SparseMatrix& a_hat, NodeId i,
                                  const Node2ParConfig& cfg);

// Cosine similarity of X_i against every row of X.
std::vector<double> cosine_score_row(const FeatureMatrix& x, NodeId i);

// The n_k highest-scoring ids other than self_id, by descending score and
// ascending id among equal scores.
std::vector<NodeId> top_k_select(std::span<const double> scores, NodeId self_id,
                                 std::size_t topk);

// Full node-token tables; rows are computed per target node without any n x n
// score matrix.
NodeTokens node_tokens_topology(const SparseMatrix& a_hat, const Node2ParConfig& cfg);
NodeTokens node_tokens_attribute(const FeatureMatrix& x, std::size_t topk);

TokenBundle generate_bundle(const Graph& g, const FeatureMatrix& x, const Node2ParConfig& cfg);

}  // namespace ntformer
