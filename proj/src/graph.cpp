#include "ntformer/graph.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>
#include <string>

#include "ntformer/parallel.hpp"

namespace ntformer {

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw std::invalid_argument("DenseMatrix: payload size does not match shape");
  }
}

void validate_features(const FeatureMatrix& x) {
  if (x.cols() < 1) throw std::invalid_argument("features: dimension must be >= 1");
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw std::invalid_argument("features: non-finite entry");
  }
}

SparseMatrix::SparseMatrix(std::size_t rows, std::size_t cols,
                           std::vector<std::size_t> offsets, std::vector<NodeId> columns,
                           std::vector<double> values)
    : rows_(rows),
      cols_(cols),
      offsets_(std::move(offsets)),
      columns_(std::move(columns)),
      values_(std::move(values)) {
  if (offsets_.size() != rows_ + 1 || offsets_.front() != 0 ||
      offsets_.back() != columns_.size() || columns_.size() != values_.size()) {
    throw std::invalid_argument("SparseMatrix: inconsistent CSR arrays");
  }
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t k = offsets_[r]; k < offsets_[r + 1]; ++k) {
      if (columns_[k] >= cols_) throw std::invalid_argument("SparseMatrix: column out of range");
      if (k > offsets_[r] && columns_[k] <= columns_[k - 1]) {
        throw std::invalid_argument("SparseMatrix: columns not strictly increasing");
      }
      if (!std::isfinite(values_[k])) throw std::invalid_argument("SparseMatrix: non-finite value");
    }
  }
}

SparseMatrix SparseMatrix::identity(std::size_t n) {
  std::vector<std::size_t> offsets(n + 1);
  std::vector<NodeId> cols(n);
  for (std::size_t i = 0; i <= n; ++i) offsets[i] = i;
  for (std::size_t i = 0; i < n; ++i) cols[i] = static_cast<NodeId>(i);
  return SparseMatrix(n, n, std::move(offsets), std::move(cols), std::vector<double>(n, 1.0));
}

double SparseMatrix::at(std::size_t r, std::size_t c) const {
  auto cols = row_columns(r);
  auto it = std::lower_bound(cols.begin(), cols.end(), static_cast<NodeId>(c));
  if (it == cols.end() || *it != c) return 0.0;
  return row_values(r)[static_cast<std::size_t>(it - cols.begin())];
}

DenseMatrix SparseMatrix::to_dense() const {
  DenseMatrix out(rows_, cols_);
  for (std::size_t r = 0; r < rows_; ++r) {
    auto cols = row_columns(r);
    auto vals = row_values(r);
    for (std::size_t k = 0; k < cols.size(); ++k) out(r, cols[k]) = vals[k];
  }
  return out;
}

void validate_labels(const LabelVector& y) {
  if (y.num_classes < 2) throw std::invalid_argument("labels: need at least 2 classes");
  for (int l : y.labels) {
    if (l < 0 || l >= y.num_classes) throw std::invalid_argument("labels: label out of range");
  }
}

void validate_split(const SplitSet& split, std::size_t n) {
  if (split.train.empty()) throw std::invalid_argument("split: train set is empty");
  std::vector<char> seen(n, 0);
  for (const auto* part : {&split.train, &split.val, &split.test}) {
    for (NodeId v : *part) {
      if (v >= n) throw std::invalid_argument("split: node id out of range");
      if (seen[v]) throw std::invalid_argument("split: sets are not disjoint");
      seen[v] = 1;
    }
  }
}

Graph build_graph(std::span<const std::pair<NodeId, NodeId>> edges, std::size_t n) {
  std::vector<std::pair<NodeId, NodeId>> directed;
  directed.reserve(edges.size() * 2);
  for (auto [u, v] : edges) {
    if (u >= n || v >= n) {
      throw std::invalid_argument("edge (" + std::to_string(u) + "," + std::to_string(v) +
                                  ") has node id out of range for n=" + std::to_string(n));
    }
    if (u == v) throw std::invalid_argument("self-loop at node " + std::to_string(u));
    directed.emplace_back(u, v);
    directed.emplace_back(v, u);
  }
  std::sort(directed.begin(), directed.end());
  directed.erase(std::unique(directed.begin(), directed.end()), directed.end());

  Graph g;
  g.offsets_.assign(n + 1, 0);
  g.columns_.reserve(directed.size());
  for (auto [u, v] : directed) {
    ++g.offsets_[u + 1];
    g.columns_.push_back(v);
  }
  for (std::size_t i = 0; i < n; ++i) g.offsets_[i + 1] += g.offsets_[i];
  return g;
}

SparseMatrix normalized_adjacency(const Graph& g) {
  const std::size_t n = g.num_nodes();
  std::vector<double> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    inv_sqrt[i] = 1.0 / std::sqrt(static_cast<double>(g.degree(static_cast<NodeId>(i)) + 1));
  }
  std::vector<std::size_t> offsets(n + 1, 0);
  std::vector<NodeId> cols;
  std::vector<double> vals;
  cols.reserve(g.columns().size() + n);
  vals.reserve(g.columns().size() + n);
  for (std::size_t i = 0; i < n; ++i) {
    bool diagonal_done = false;
    auto emit_diagonal = [&] {
      cols.push_back(static_cast<NodeId>(i));
      vals.push_back(inv_sqrt[i] * inv_sqrt[i]);
      diagonal_done = true;
    };
    for (NodeId j : g.neighbors(static_cast<NodeId>(i))) {
      if (!diagonal_done && j > i) emit_diagonal();
      cols.push_back(j);
      vals.push_back(inv_sqrt[i] * inv_sqrt[j]);
    }
    if (!diagonal_done) emit_diagonal();
    offsets[i + 1] = cols.size();
  }
  return SparseMatrix(n, n, std::move(offsets), std::move(cols), std::move(vals));
}

DenseMatrix spmm(const SparseMatrix& s, const DenseMatrix& m) {
  if (s.cols() != m.rows()) {
    throw std::invalid_argument("spmm: dimension mismatch (" + std::to_string(s.cols()) +
                                " vs " + std::to_string(m.rows()) + ")");
  }
  const std::size_t d = m.cols();
  DenseMatrix out(s.rows(), d);
  parallel_for(s.rows(), 256, [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) {
      auto cols = s.row_columns(r);
      auto vals = s.row_values(r);
      auto dst = out.row(r);
      for (std::size_t k = 0; k < cols.size(); ++k) {
        auto src = m.row(cols[k]);
        const double w = vals[k];
        for (std::size_t c = 0; c < d; ++c) dst[c] += w * src[c];
      }
    }
  });
  return out;
}

std::vector<double> spmv(const SparseMatrix& s, std::span<const double> v) {
  if (s.cols() != v.size()) throw std::invalid_argument("spmv: dimension mismatch");
  std::vector<double> out(s.rows(), 0.0);
  for (std::size_t r = 0; r < s.rows(); ++r) {
    auto cols = s.row_columns(r);
    auto vals = s.row_values(r);
    double acc = 0.0;
    for (std::size_t k = 0; k < cols.size(); ++k) acc += vals[k] * v[cols[k]];
    out[r] = acc;
  }
  return out;
}

double edge_homophily(const Graph& g, const LabelVector& y) {
  if (y.size() != g.num_nodes()) throw std::invalid_argument("homophily: label count mismatch");
  if (g.num_edges() == 0) throw std::invalid_argument("undefined homophily: graph has no edges");
  std::size_t same = 0;
  for (std::size_t u = 0; u < g.num_nodes(); ++u) {
    for (NodeId v : g.neighbors(static_cast<NodeId>(u))) {
      if (v > u && y[u] == y[v]) ++same;
    }
  }
  return static_cast<double>(same) / static_cast<double>(g.num_edges());
}

SyntheticGraph generate_sbm(std::size_t n_per_class, double p_in, double p_out,
                            std::size_t feature_dim, double class_mean_separation,
                            std::uint64_t seed) {
  if (!(0.0 <= p_out && p_out <= p_in && p_in <= 1.0)) {
    throw std::invalid_argument("sbm: require 0 <= p_out <= p_in <= 1");
  }
  if (feature_dim < 1) throw std::invalid_argument("sbm: feature_dim must be >= 1");
  const std::size_t n = 2 * n_per_class;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  SyntheticGraph out;
  out.labels.num_classes = 2;
  out.labels.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.labels.labels[i] = i < n_per_class ? 0 : 1;

  std::vector<std::pair<NodeId, NodeId>> edges;
  for (std::size_t u = 0; u < n; ++u) {
    for (std::size_t v = u + 1; v < n; ++v) {
      double p = out.labels[u] == out.labels[v] ? p_in : p_out;
      if (coin(rng) < p) edges.emplace_back(static_cast<NodeId>(u), static_cast<NodeId>(v));
    }
  }
  out.graph = build_graph(edges, n);

  const double offset = 0.5 * class_mean_separation / std::sqrt(static_cast<double>(feature_dim));
  out.features = FeatureMatrix(n, feature_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const double mean = out.labels[i] == 0 ? -offset : offset;
    for (std::size_t c = 0; c < feature_dim; ++c) out.features(i, c) = mean + noise(rng);
  }
  return out;
}

std::vector<std::pair<NodeId, NodeId>> random_edges(std::size_t n, std::size_t num_edges,
                                                    std::uint64_t seed) {
  if (n < 2 || num_edges > n * (n - 1) / 2) {
    throw std::invalid_argument("random_edges: too many edges for node count");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<NodeId> pick(0, static_cast<NodeId>(n - 1));
  std::vector<std::pair<NodeId, NodeId>> edges;
  edges.reserve(num_edges);
  // Oversample, then dedup; repeat until enough distinct pairs exist.
  while (edges.size() < num_edges) {
    std::size_t missing = num_edges - edges.size();
    for (std::size_t k = 0; k < missing + missing / 8 + 16; ++k) {
      NodeId u = pick(rng), v = pick(rng);
      if (u == v) continue;
      edges.emplace_back(std::min(u, v), std::max(u, v));
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    if (edges.size() > num_edges) {
      std::shuffle(edges.begin(), edges.end(), rng);
      edges.resize(num_edges);
      std::sort(edges.begin(), edges.end());
    }
  }
  return edges;
}

SyntheticGraph generate_feature_labeled_random_graph(std::size_t num_classes,
                                                     std::size_t n_per_class,
                                                     std::size_t num_edges,
                                                     std::size_t vocabulary,
                                                     std::size_t words_per_node,
                                                     double purity, std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("need at least 2 classes");
  if (vocabulary < num_classes) throw std::invalid_argument("vocabulary smaller than class count");
  if (words_per_node < 1) throw std::invalid_argument("words_per_node must be >= 1");
  if (!(purity >= 0.0 && purity <= 1.0)) throw std::invalid_argument("purity must lie in [0, 1]");
  const std::size_t n = num_classes * n_per_class;
  const std::size_t block = vocabulary / num_classes;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution from_class(purity);
  std::uniform_int_distribution<std::size_t> any_word(0, vocabulary - 1);
  std::uniform_int_distribution<std::size_t> class_word(0, block - 1);

  SyntheticGraph out;
  out.labels.num_classes = static_cast<int>(num_classes);
  out.labels.labels.resize(n);
  out.features = FeatureMatrix(n, vocabulary);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % num_classes;
    out.labels.labels[i] = static_cast<int>(c);
    for (std::size_t w = 0; w < words_per_node; ++w) {
      const std::size_t word = from_class(rng) ? c * block + class_word(rng) : any_word(rng);
      out.features(i, word) = 1.0;
    }
  }
  auto edges = random_edges(n, num_edges, rng());
  out.graph = build_graph(edges, n);
  return out;
}

SplitSet stratified_split(const LabelVector& y, double train_fraction, double val_fraction,
                          std::uint64_t seed) {
  if (train_fraction <= 0.0 || val_fraction < 0.0 || train_fraction + val_fraction > 1.0) {
    throw std::invalid_argument("stratified_split: invalid fractions");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::vector<NodeId>> by_class(static_cast<std::size_t>(y.num_classes));
  for (std::size_t i = 0; i < y.size(); ++i) {
    by_class[static_cast<std::size_t>(y[i])].push_back(static_cast<NodeId>(i));
  }
  SplitSet split;
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    const auto m = static_cast<double>(members.size());
    auto n_train = static_cast<std::size_t>(std::llround(m * train_fraction));
    auto n_val = static_cast<std::size_t>(std::llround(m * val_fraction));
    n_val = std::min(n_val, members.size() - std::min(n_train, members.size()));
    n_train = std::min(n_train, members.size());
    split.train.insert(split.train.end(), members.begin(), members.begin() + n_train);
    split.val.insert(split.val.end(), members.begin() + n_train,
                     members.begin() + n_train + n_val);
    split.test.insert(split.test.end(), members.begin() + n_train + n_val, members.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

}  // namespace ntformer
