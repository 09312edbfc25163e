#include "ntformer/node2par.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "blas.hpp"
#include "ntformer/parallel.hpp"

namespace ntformer {

namespace {

struct Candidate {
  double score;
  NodeId id;
};

// Higher score first; lower id first among equal scores.
bool ranks_before(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

// Sparse accumulator over n slots that remembers which slots were written.
class ScatterBuffer {
 public:
  explicit ScatterBuffer(std::size_t n) : values_(n, 0.0), used_(n, 0) {}

  void add(NodeId slot, double v) {
    if (!used_[slot]) {
      used_[slot] = 1;
      touched_.push_back(slot);
    }
    values_[slot] += v;
  }
  bool used(NodeId slot) const { return used_[slot] != 0; }

  // Moves the accumulated entries out in first-touch order and resets. That
  // order is a pure function of the inputs, so sums stay reproducible without
  // paying for a sort per target.
  void drain(std::vector<NodeId>& ids, std::vector<double>& vals) {
    ids.assign(touched_.begin(), touched_.end());
    vals.resize(ids.size());
    for (std::size_t k = 0; k < ids.size(); ++k) {
      vals[k] = values_[ids[k]];
      values_[ids[k]] = 0.0;
      used_[ids[k]] = 0;
    }
    touched_.clear();
  }

 private:
  std::vector<double> values_;
  std::vector<char> used_;
  std::vector<NodeId> touched_;
};

// Sparse PPR iterate for one target. Returns (ids, scores) in no particular order. a_hat is
// symmetric, so the product a_hat * s is scattered along the rows of s's support.
void ppr_sparse(const SparseMatrix& a_hat, NodeId target, const Node2ParConfig& cfg,
                ScatterBuffer& scratch, std::vector<NodeId>& ids, std::vector<double>& vals) {
  auto seed_cols = a_hat.row_columns(target);
  auto seed_vals = a_hat.row_values(target);
  ids.assign(seed_cols.begin(), seed_cols.end());
  vals.assign(seed_vals.begin(), seed_vals.end());
  const double r = cfg.ppr_damping;
  for (int step = 0; step < cfg.ppr_steps; ++step) {
    for (std::size_t k = 0; k < ids.size(); ++k) {
      auto cols = a_hat.row_columns(ids[k]);
      auto weights = a_hat.row_values(ids[k]);
      for (std::size_t e = 0; e < cols.size(); ++e) scratch.add(cols[e], weights[e] * vals[k]);
    }
    scratch.add(target, 0.0);
    scratch.drain(ids, vals);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      vals[k] = r * vals[k] + (ids[k] == target ? 1.0 - r : 0.0);
    }
  }
}

void check_node(std::size_t n, NodeId i) {
  if (i >= n) {
    throw std::invalid_argument("invalid node id " + std::to_string(i) + " for n=" +
                                std::to_string(n));
  }
}

// Row-normalized copy of X; zero-norm rows stay zero.
std::vector<double> unit_rows(const FeatureMatrix& x) {
  std::vector<double> out(x.data());
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double norm = 0.0;
    for (std::size_t c = 0; c < d; ++c) norm += out[i * d + c] * out[i * d + c];
    norm = std::sqrt(norm);
    const double inv = norm > 0.0 ? 1.0 / norm : 0.0;
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] *= inv;
  }
  return out;
}

}  // namespace

void Node2ParConfig::validate(std::size_t num_nodes) const {
  if (hops < 0) throw std::invalid_argument("hops (K) must be >= 0");
  if (topk < 1 || topk >= num_nodes) {
    throw std::invalid_argument("topk (n_k) must satisfy 1 <= n_k < n (n_k=" +
                                std::to_string(topk) + ", n=" + std::to_string(num_nodes) + ")");
  }
  if (!(ppr_damping > 0.0 && ppr_damping < 1.0)) {
    throw std::invalid_argument("ppr damping must lie in (0, 1)");
  }
  if (ppr_steps < 1) throw std::invalid_argument("ppr steps must be >= 1");
}

NeighborhoodTokens propagate_tokens(const SparseMatrix& propagator, const FeatureMatrix& x,
                                    int hops, View view) {
  if (hops < 0) throw std::invalid_argument("hops (K) must be >= 0");
  if (propagator.rows() != propagator.cols() || propagator.cols() != x.rows()) {
    throw std::invalid_argument("propagate_tokens: dimension mismatch");
  }
  NeighborhoodTokens out;
  out.view = view;
  out.num_nodes = x.rows();
  out.length = static_cast<std::size_t>(hops) + 1;
  out.dim = x.cols();
  out.values.resize(out.num_nodes * out.length * out.dim);

  auto store = [&](const DenseMatrix& slice, std::size_t hop) {
    for (std::size_t i = 0; i < out.num_nodes; ++i) {
      auto src = slice.row(i);
      std::copy(src.begin(), src.end(), out.token(i, hop).begin());
    }
  };
  store(x, 0);
  DenseMatrix current = x;
  for (std::size_t hop = 1; hop < out.length; ++hop) {
    current = spmm(propagator, current);
    store(current, hop);
  }
  return out;
}

SparseMatrix attribute_weighted_adjacency(const Graph& g, const FeatureMatrix& x,
                                          bool normalize) {
  const std::size_t n = g.num_nodes();
  if (x.rows() != n) throw std::invalid_argument("attribute adjacency: feature rows != n");
  const std::size_t d = x.cols();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : x.row(i)) s += v * v;
    norms[i] = std::sqrt(s);
  }
  std::vector<NodeId> cols(g.columns());
  std::vector<double> vals(cols.size());
  parallel_for(n, 1024, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      auto xi = x.row(i);
      double row_abs = 0.0;
      for (std::size_t k = g.offsets()[i]; k < g.offsets()[i + 1]; ++k) {
        const NodeId j = cols[k];
        double sim = 0.0;
        if (norms[i] > 0.0 && norms[j] > 0.0) {
          auto xj = x.row(j);
          double dot = 0.0;
          for (std::size_t c = 0; c < d; ++c) dot += xi[c] * xj[c];
          sim = dot / (norms[i] * norms[j]);
        }
        vals[k] = sim;
        row_abs += std::abs(sim);
      }
      if (normalize && row_abs > 0.0) {
        for (std::size_t k = g.offsets()[i]; k < g.offsets()[i + 1]; ++k) vals[k] /= row_abs;
      }
    }
  });
  return SparseMatrix(n, n, g.offsets(), std::move(cols), std::move(vals));
}

std::vector<double> ppr_score_row(const SparseMatrix& a_hat, NodeId i,
                                  const Node2ParConfig& cfg) {
  check_node(a_hat.rows(), i);
  ScatterBuffer scratch(a_hat.rows());
  std::vector<NodeId> ids;
  std::vector<double> vals;
  ppr_sparse(a_hat, i, cfg, scratch, ids, vals);
  std::vector<double> dense(a_hat.rows(), 0.0);
  for (std::size_t k = 0; k < ids.size(); ++k) dense[ids[k]] = vals[k];
  return dense;
}

std::vector<double> cosine_score_row(const FeatureMatrix& x, NodeId i) {
  check_node(x.rows(), i);
  const std::vector<double> unit = unit_rows(x);
  const std::size_t d = x.cols();
  std::vector<double> scores(x.rows());
  const double* xi = unit.data() + static_cast<std::size_t>(i) * d;
  for (std::size_t j = 0; j < x.rows(); ++j) {
    const double* xj = unit.data() + j * d;
    double dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) dot += xi[c] * xj[c];
    scores[j] = dot;
  }
  return scores;
}

std::vector<NodeId> top_k_select(std::span<const double> scores, NodeId self_id,
                                 std::size_t topk) {
  const std::size_t n = scores.size();
  if (topk >= n) {
    throw std::invalid_argument("top_k_select: n_k=" + std::to_string(topk) +
                                " must be < n=" + std::to_string(n));
  }
  std::vector<Candidate> pool;
  pool.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    if (j != self_id) pool.push_back({scores[j], static_cast<NodeId>(j)});
  }
  std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(topk), pool.end(),
                    ranks_before);
  std::vector<NodeId> out(topk);
  for (std::size_t k = 0; k < topk; ++k) out[k] = pool[k].id;
  return out;
}

NodeTokens node_tokens_topology(const SparseMatrix& a_hat, const Node2ParConfig& cfg) {
  const std::size_t n = a_hat.rows();
  cfg.validate(n);
  NodeTokens out;
  out.view = View::kTopology;
  out.num_nodes = n;
  out.length = cfg.topk + 1;
  out.ids.resize(n * out.length);

  parallel_for(n, 64, [&](std::size_t begin, std::size_t end) {
    ScatterBuffer scratch(n);
    std::vector<NodeId> ids;
    std::vector<double> vals;
    std::vector<Candidate> pool(cfg.topk);
    std::vector<char> in_support(n, 0);
    for (std::size_t i = begin; i < end; ++i) {
      const auto target = static_cast<NodeId>(i);
      ppr_sparse(a_hat, target, cfg, scratch, ids, vals);
      // Bounded insertion keeps the best n_k seen so far, ranked by score then id.
      std::size_t take = 0;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        if (ids[k] == target) continue;
        const Candidate c{vals[k], ids[k]};
        if (take == cfg.topk && !ranks_before(c, pool[take - 1])) continue;
        std::size_t pos = take < cfg.topk ? take++ : take - 1;
        while (pos > 0 && ranks_before(c, pool[pos - 1])) {
          pool[pos] = pool[pos - 1];
          --pos;
        }
        pool[pos] = c;
      }
      NodeId* dst = out.ids.data() + i * out.length;
      dst[0] = target;
      for (std::size_t k = 0; k < take; ++k) dst[1 + k] = pool[k].id;
      if (take < cfg.topk) {
        // Remaining slots go to zero-score nodes in ascending id order.
        for (NodeId id : ids) in_support[id] = 1;
        std::size_t filled = take;
        for (NodeId j = 0; filled < cfg.topk; ++j) {
          if (j != target && !in_support[j]) dst[1 + filled++] = j;
        }
        for (NodeId id : ids) in_support[id] = 0;
      }
    }
  });
  return out;
}

NodeTokens node_tokens_attribute(const FeatureMatrix& x, std::size_t topk) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (topk < 1 || topk >= n) throw std::invalid_argument("topk (n_k) must satisfy 1 <= n_k < n");
  const std::vector<double> unit = unit_rows(x);

  NodeTokens out;
  out.view = View::kAttribute;
  out.num_nodes = n;
  out.length = topk + 1;
  out.ids.resize(n * out.length);

  constexpr std::size_t kRowBlock = 64;
  constexpr std::size_t kColBlock = 4096;
  const std::size_t row_blocks = (n + kRowBlock - 1) / kRowBlock;

  parallel_for(row_blocks, 1, [&](std::size_t block_begin, std::size_t block_end) {
    std::vector<double> tile(kRowBlock * kColBlock);
    std::vector<Candidate> best(kRowBlock * topk);
    std::vector<std::size_t> best_count(kRowBlock);
    for (std::size_t rb = block_begin; rb < block_end; ++rb) {
      const std::size_t r0 = rb * kRowBlock;
      const std::size_t rows = std::min(kRowBlock, n - r0);
      std::fill(best_count.begin(), best_count.end(), 0);
      for (std::size_t c0 = 0; c0 < n; c0 += kColBlock) {
        const std::size_t cols = std::min(kColBlock, n - c0);
        detail::gemm(false, true, static_cast<int>(rows), static_cast<int>(cols),
                     static_cast<int>(d), 1.0, unit.data() + r0 * d, static_cast<int>(d),
                     unit.data() + c0 * d, static_cast<int>(d), 0.0, tile.data(),
                     static_cast<int>(cols));
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t self = r0 + r;
          Candidate* list = best.data() + r * topk;
          std::size_t& count = best_count[r];
          const double* scores = tile.data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) {
            const double s = scores[c];
            // Columns arrive in ascending id order, so an equal score never
            // displaces an existing entry.
            if (count == topk && !(s > list[topk - 1].score)) continue;
            const std::size_t j = c0 + c;
            if (j == self) continue;
            std::size_t pos = count < topk ? count : topk - 1;
            while (pos > 0 && s > list[pos - 1].score) {
              list[pos] = list[pos - 1];
              --pos;
            }
            list[pos] = {s, static_cast<NodeId>(j)};
            if (count < topk) ++count;
          }
        }
      }
      for (std::size_t r = 0; r < rows; ++r) {
        NodeId* dst = out.ids.data() + (r0 + r) * out.length;
        dst[0] = static_cast<NodeId>(r0 + r);
        for (std::size_t k = 0; k < topk; ++k) dst[1 + k] = best[r * topk + k].id;
      }
    }
  });
  return out;
}

TokenBundle generate_bundle(const Graph& g, const FeatureMatrix& x, const Node2ParConfig& cfg) {
  const std::size_t n = g.num_nodes();
  if (x.rows() != n) {
    throw std::invalid_argument("generate_bundle: features have " + std::to_string(x.rows()) +
                                " rows, graph has " + std::to_string(n) + " nodes");
  }
  validate_features(x);
  cfg.validate(n);

  TokenBundle bundle;
  bundle.config = cfg;
  const SparseMatrix a_hat = normalized_adjacency(g);
  bundle.ne_topology = neighborhood_tokens_topology(a_hat, x, cfg.hops);
  const SparseMatrix a_attr = attribute_weighted_adjacency(g, x, cfg.attr_adj_normalize);
  bundle.ne_attribute = neighborhood_tokens_attribute(a_attr, x, cfg.hops);
  bundle.no_topology = node_tokens_topology(a_hat, cfg);
  bundle.no_attribute = node_tokens_attribute(x, cfg.topk);
  return bundle;
}

}  // namespace ntformer
