#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace ntformer {

using NodeId = std::uint32_t;

// Row-major dense matrix of doubles.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool operator==(const DenseMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Node attribute matrix X (n x d). Entries must be finite and d >= 1.
using FeatureMatrix = DenseMatrix;
void validate_features(const FeatureMatrix& x);

// Undirected simple graph in CSR form. Immutable once built.
class Graph {
 public:
  Graph() = default;

  std::size_t num_nodes() const { return offsets_.empty() ? 0 : offsets_.size() - 1; }
  // Undirected edge count (each {u, v} counted once).
  std::size_t num_edges() const { return columns_.size() / 2; }
  std::size_t degree(NodeId v) const { return offsets_[v + 1] - offsets_[v]; }
  std::span<const NodeId> neighbors(NodeId v) const {
    return {columns_.data() + offsets_[v], degree(v)};
  }
  const std::vector<std::size_t>& offsets() const { return offsets_; }
  const std::vector<NodeId>& columns() const { return columns_; }

  bool operator==(const Graph&) const = default;

 private:
  friend Graph build_graph(std::span<const std::pair<NodeId, NodeId>>, std::size_t);
  std::vector<std::size_t> offsets_;
  std::vector<NodeId> columns_;
};

// Real-valued CSR matrix with sorted, duplicate-free columns per row.
class SparseMatrix {
 public:
  SparseMatrix() = default;
  SparseMatrix(std::size_t rows, std::size_t cols, std::vector<std::size_t> offsets,
               std::vector<NodeId> columns, std::vector<double> values);

  static SparseMatrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t nnz() const { return values_.size(); }

  std::span<const NodeId> row_columns(std::size_t r) const {
    return {columns_.data() + offsets_[r], offsets_[r + 1] - offsets_[r]};
  }
  std::span<const double> row_values(std::size_t r) const {
    return {values_.data() + offsets_[r], offsets_[r + 1] - offsets_[r]};
  }
  // Entry lookup by binary search; 0 for structural zeros.
  double at(std::size_t r, std::size_t c) const;

  DenseMatrix to_dense() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::size_t> offsets_{0};
  std::vector<NodeId> columns_;
  std::vector<double> values_;
};

struct LabelVector {
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  int operator[](std::size_t i) const { return labels[i]; }
};
// Throws unless every label is in [0, num_classes) and num_classes >= 2.
void validate_labels(const LabelVector& y);

struct SplitSet {
  std::vector<NodeId> train;
  std::vector<NodeId> val;
  std::vector<NodeId> test;
};
// Throws unless the three sets are disjoint, in range and train is nonempty.
void validate_split(const SplitSet& split, std::size_t n);

struct Dataset {
  Graph graph;
  FeatureMatrix features;
  LabelVector labels;
  SplitSet splits;
};

// Builds a symmetric, deduplicated CSR graph. Either orientation of an edge is
// accepted; self-loops and out-of-range ids throw std::invalid_argument.
Graph build_graph(std::span<const std::pair<NodeId, NodeId>> edges, std::size_t n);

// (D+I)^{-1/2} (A+I) (D+I)^{-1/2}.
SparseMatrix normalized_adjacency(const Graph& g);

// Sparse times dense. Each output row is accumulated left to right over the
// row's stored columns, independent of the worker count.
DenseMatrix spmm(const SparseMatrix& s, const DenseMatrix& m);

// Sparse matrix-vector product with the same per-row ordering as spmm.
std::vector<double> spmv(const SparseMatrix& s, std::span<const double> v);

// Fraction of undirected edges joining same-label endpoints.
double edge_homophily(const Graph& g, const LabelVector& y);

struct SyntheticGraph {
  Graph graph;
  FeatureMatrix features;
  LabelVector labels;
};

// Two-block stochastic block model. Class c in {0, 1} has Gaussian features
// N(mu_c, I) where the two means sit at -/+ separation/2 along the unit
// diagonal, so ||mu_1 - mu_0|| = class_mean_separation.
SyntheticGraph generate_sbm(std::size_t n_per_class, double p_in, double p_out,
                            std::size_t feature_dim, double class_mean_separation,
                            std::uint64_t seed);

// Labels fixed by features, edges independent of labels. Features are binary
// bags of words: each class owns a block of vocabulary/num_classes words and
// each of a node's draws comes from its class block with probability
// `purity`, otherwise from the whole vocabulary. Edges are uniform random
// pairs, so edge homophily sits near 1/num_classes.
SyntheticGraph generate_feature_labeled_random_graph(std::size_t num_classes,
                                                     std::size_t n_per_class,
                                                     std::size_t num_edges,
                                                     std::size_t vocabulary,
                                                     std::size_t words_per_node,
                                                     double purity, std::uint64_t seed);

// `num_edges` distinct uniform random undirected pairs over n nodes.
std::vector<std::pair<NodeId, NodeId>> random_edges(std::size_t n, std::size_t num_edges,
                                                    std::uint64_t seed);

// Per-class shuffled split with the given fractions; the test set takes the rest.
SplitSet stratified_split(const LabelVector& y, double train_fraction,
                          double val_fraction, std::uint64_t seed);

}  // namespace ntformer
