#include "ntformer/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "blas.hpp"

namespace ntformer {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                              shape_string(b));
}

// SplitMix64 finalizer, chained over the dropout key fields.
std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double dropout_uniform(const DropoutKey& key, std::uint64_t site, std::uint64_t element) {
  std::uint64_t h = mix(key.seed);
  h = mix(h ^ key.epoch);
  h = mix(h ^ key.batch);
  h = mix(h ^ site);
  h = mix(h ^ element);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// Geometry of one op(A) op(B) product over row-major storage.
struct MatmulDims {
  bool ta, tb;
  int m, n, k;
  int lda, ldb;
};

template <typename T>
void matmul_backward(const MatmulDims& d, const T* a, const T* b, const T* dc, T* da, T* db) {
  if (da) {
    if (!d.ta) {
      detail::gemm(false, !d.tb, d.m, d.k, d.n, T(1), dc, d.n, b, d.ldb, T(1), da, d.lda);
    } else {
      detail::gemm(d.tb, true, d.k, d.m, d.n, T(1), b, d.ldb, dc, d.n, T(1), da, d.lda);
    }
  }
  if (db) {
    if (!d.tb) {
      detail::gemm(!d.ta, false, d.k, d.n, d.m, T(1), a, d.lda, dc, d.n, T(1), db, d.ldb);
    } else {
      detail::gemm(true, d.ta, d.n, d.k, d.m, T(1), dc, d.n, a, d.lda, T(1), db, d.ldb);
    }
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  if (shape_.empty() || shape_.size() > 3) {
    throw std::invalid_argument("Tensor: rank must be 1..3, got " + shape_string(shape_));
  }
  data_.assign(shape_size(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty() || shape_.size() > 3) {
    throw std::invalid_argument("Tensor: rank must be 1..3, got " + shape_string(shape_));
  }
  if (data_.size() != shape_size(shape_)) {
    throw std::invalid_argument("Tensor: payload length does not match shape " +
                                shape_string(shape_));
  }
}

template <typename T>
Var Tape<T>::record(Tensor<T> value, std::span<const Var> inputs, BackwardFn backward,
                    const char* op) {
  for (T v : value.values()) {
    if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite output in ") + op);
  }
  Node node;
  node.value = std::move(value);
  for (Var in : inputs) node.requires_grad = node.requires_grad || nodes_.at(in.id).requires_grad;
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn backward,
                    const char* op) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward), op);
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  return record(std::move(value), std::span<const Var>{}, nullptr, "constant");
}

template <typename T>
Var Tape<T>::parameter(Parameter<T>& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return Var{it->second};
  Var v = record(p.value, std::span<const Var>{}, nullptr, p.name.c_str());
  nodes_[v.id].param = &p;
  nodes_[v.id].requires_grad = true;
  bound_.emplace(&p, v.id);
  return v;
}

template <typename T>
Tensor<T> Tape<T>::grad(Var v) const {
  const Node& node = nodes_.at(v.id);
  if (node.grad.size() == 0) return Tensor<T>(node.value.shape());
  return node.grad;
}

template <typename T>
T* Tape<T>::grad_buffer(Var v) {
  Node& node = nodes_[v.id];
  if (node.grad.size() == 0) node.grad = Tensor<T>(node.value.shape());
  return node.grad.data();
}

template <typename T>
void Tape<T>::backward(Var loss) {
  if (nodes_.at(loss.id).value.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_string(nodes_[loss.id].value.shape()));
  }
  for (Node& node : nodes_) node.grad = Tensor<T>();
  grad_buffer(loss)[0] = T(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.size() == 0 || !node.backward) continue;
    node.backward(*this, Var{i});
  }
  for (Node& node : nodes_) {
    if (node.param == nullptr || node.grad.size() == 0) continue;
    auto& dst = node.param->grad;
    if (dst.shape() != node.value.shape()) dst = Tensor<T>(node.value.shape());
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += node.grad[k];
  }
}

namespace ops {

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b, bool trans_a, bool trans_b) {
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  std::size_t batches = 1;
  std::size_t ra, ca, rb, cb;
  Shape out_shape;
  if (av.rank() == 2 && bv.rank() == 2) {
    ra = av.dim(0), ca = av.dim(1), rb = bv.dim(0), cb = bv.dim(1);
  } else if (av.rank() == 3 && bv.rank() == 2) {
    if (trans_a) throw std::invalid_argument("matmul: transpose of a rank-3 lhs needs rank-3 rhs");
    ra = av.dim(0) * av.dim(1), ca = av.dim(2), rb = bv.dim(0), cb = bv.dim(1);
  } else if (av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0)) {
    batches = av.dim(0);
    ra = av.dim(1), ca = av.dim(2), rb = bv.dim(1), cb = bv.dim(2);
  } else {
    shape_error("matmul", av.shape(), bv.shape());
  }
  const std::size_t m = trans_a ? ca : ra, k = trans_a ? ra : ca;
  const std::size_t kb = trans_b ? cb : rb, n = trans_b ? rb : cb;
  if (k != kb) shape_error("matmul", av.shape(), bv.shape());

  if (av.rank() == 2) {
    out_shape = {m, n};
  } else if (bv.rank() == 2) {
    out_shape = {av.dim(0), av.dim(1), n};
  } else {
    out_shape = {batches, m, n};
  }
  Tensor<T> out(out_shape);
  const MatmulDims dims{trans_a, trans_b, static_cast<int>(m), static_cast<int>(n),
                        static_cast<int>(k), static_cast<int>(ca), static_cast<int>(cb)};
  const std::size_t a_step = ra * ca, b_step = rb * cb, c_step = m * n;
  for (std::size_t bi = 0; bi < batches; ++bi) {
    detail::gemm(trans_a, trans_b, dims.m, dims.n, dims.k, T(1), av.data() + bi * a_step,
                 dims.lda, bv.data() + bi * b_step, dims.ldb, T(0), out.data() + bi * c_step,
                 dims.n);
  }
  return t.record(std::move(out), {a, b},
                  [a, b, dims, batches, a_step, b_step, c_step](Tape<T>& tape, Var self) {
                    T* da = tape.requires_grad(a) ? tape.grad_buffer(a) : nullptr;
                    T* db = tape.requires_grad(b) ? tape.grad_buffer(b) : nullptr;
                    const T* dc = tape.grad_ref(self).data();
                    const T* av = tape.value(a).data();
                    const T* bv = tape.value(b).data();
                    for (std::size_t bi = 0; bi < batches; ++bi) {
                      matmul_backward(dims, av + bi * a_step, bv + bi * b_step, dc + bi * c_step,
                                      da ? da + bi * a_step : nullptr,
                                      db ? db + bi * b_step : nullptr);
                    }
                  },
                  "matmul");
}

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  if (av.shape() != bv.shape()) shape_error("add", av.shape(), bv.shape());
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return t.record(std::move(out), {a, b},
                  [a, b](Tape<T>& tape, Var self) {
                    const Tensor<T>& g = tape.grad_ref(self);
                    for (Var in : {a, b}) {
                      if (!tape.requires_grad(in)) continue;
                      T* d = tape.grad_buffer(in);
                      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                    }
                  },
                  "add");
}

template <typename T>
Var add_bias(Tape<T>& t, Var a, Var bias) {
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(bias);
  if (bv.rank() != 1 || bv.dim(0) != av.inner()) shape_error("add_bias", av.shape(), bv.shape());
  const std::size_t rows = av.outer(), cols = av.inner();
  Tensor<T> out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = av[r * cols + c] + bv[c];
  }
  return t.record(std::move(out), {a, bias},
                  [a, bias, rows, cols](Tape<T>& tape, Var self) {
                    const Tensor<T>& g = tape.grad_ref(self);
                    if (tape.requires_grad(a)) {
                      T* d = tape.grad_buffer(a);
                      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                    }
                    if (tape.requires_grad(bias)) {
                      T* d = tape.grad_buffer(bias);
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < cols; ++c) d[c] += g[r * cols + c];
                      }
                    }
                  },
                  "add_bias");
}

template <typename T>
Var scale(Tape<T>& t, Var a, T factor) {
  const Tensor<T>& av = t.value(a);
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return t.record(std::move(out), {a},
                  [a, factor](Tape<T>& tape, Var self) {
                    const Tensor<T>& g = tape.grad_ref(self);
                    T* d = tape.grad_buffer(a);
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * factor;
                  },
                  "scale");
}

template <typename T>
Var softmax_rows(Tape<T>& t, Var a) {
  const Tensor<T>& av = t.value(a);
  const std::size_t rows = av.outer(), cols = av.inner();
  Tensor<T> out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * cols;
    T* y = out.data() + r * cols;
    T peak = *std::max_element(x, x + cols);
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - peak);
      total += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= total;
  }
  return t.record(std::move(out), {a},
                  [a, rows, cols](Tape<T>& tape, Var self) {
                    const Tensor<T>& g = tape.grad_ref(self);
                    const Tensor<T>& y = tape.value(self);
                    T* d = tape.grad_buffer(a);
                    for (std::size_t r = 0; r < rows; ++r) {
                      T dot = 0;
                      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
                      for (std::size_t c = 0; c < cols; ++c) {
                        d[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
                      }
                    }
                  },
                  "softmax_rows");
}

template <typename T>
Var activation(Tape<T>& t, Var a, Activation kind) {
  const Tensor<T>& av = t.value(a);
  Tensor<T> out(av.shape());
  // tanh approximation of GELU
  constexpr T kC = T(0.7978845608028654);
  constexpr T kA = T(0.044715);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = av[i];
    if (kind == Activation::kRelu) {
      out[i] = x > T(0) ? x : T(0);
    } else {
      out[i] = T(0.5) * x * (T(1) + std::tanh(kC * (x + kA * x * x * x)));
    }
  }
  return t.record(std::move(out), {a},
                  [a, kind](Tape<T>& tape, Var self) {
                    const Tensor<T>& g = tape.grad_ref(self);
                    const Tensor<T>& x = tape.value(a);
                    T* d = tape.grad_buffer(a);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      if (kind == Activation::kRelu) {
                        if (x[i] > T(0)) d[i] += g[i];
                      } else {
                        const T u = kC * (x[i] + kA * x[i] * x[i] * x[i]);
                        const T th = std::tanh(u);
                        const T du = kC * (T(1) + T(3) * kA * x[i] * x[i]);
                        d[i] += g[i] * (T(0.5) * (T(1) + th) +
                                        T(0.5) * x[i] * (T(1) - th * th) * du);
                      }
                    }
                  },
                  kind == Activation::kRelu ? "relu" : "gelu");
}

template <typename T>
Var dropout(Tape<T>& t, Var a, double p) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
  if (!t.training() || p == 0.0) return a;
  const Tensor<T>& av = t.value(a);
  const std::uint64_t site = t.next_dropout_site();
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> mask(av.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = dropout_uniform(t.dropout_key(), site, i) < p ? T(0) : keep_scale;
  }
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * mask[i];
  return t.record(std::move(out), {a},
                  [a, mask = std::move(mask)](Tape<T>& tape, Var self) {
                    const Tensor<T>& g = tape.grad_ref(self);
                    T* d = tape.grad_buffer(a);
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * mask[i];
                  },
                  "dropout");
}

template <typename T>
Var layer_norm(Tape<T>& t, Var a, Var gamma, Var beta, T eps) {
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& gv = t.value(gamma);
  const Tensor<T>& bv = t.value(beta);
  const std::size_t rows = av.outer(), cols = av.inner();
  if (gv.rank() != 1 || gv.dim(0) != cols) shape_error("layer_norm", av.shape(), gv.shape());
  if (bv.rank() != 1 || bv.dim(0) != cols) shape_error("layer_norm", av.shape(), bv.shape());
  std::vector<T> normalized(av.size());
  std::vector<T> inv_std(rows);
  Tensor<T> out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * cols;
    T mean = 0;
    for (std::size_t c = 0; c < cols; ++c) mean += x[c];
    mean /= T(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (x[c] - mean) * (x[c] - mean);
    var /= T(cols);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const T xh = (x[c] - mean) * inv_std[r];
      normalized[r * cols + c] = xh;
      out[r * cols + c] = gv[c] * xh + bv[c];
    }
  }
  return t.record(
      std::move(out), {a, gamma, beta},
      [a, gamma, beta, rows, cols, normalized = std::move(normalized),
       inv_std = std::move(inv_std)](Tape<T>& tape, Var self) {
        const Tensor<T>& g = tape.grad_ref(self);
        const Tensor<T>& gv = tape.value(gamma);
        if (tape.requires_grad(gamma)) {
          T* d = tape.grad_buffer(gamma);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) d[c] += g[r * cols + c] * normalized[r * cols + c];
          }
        }
        if (tape.requires_grad(beta)) {
          T* d = tape.grad_buffer(beta);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) d[c] += g[r * cols + c];
          }
        }
        if (tape.requires_grad(a)) {
          T* d = tape.grad_buffer(a);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_g = 0, mean_gx = 0;
            for (std::size_t c = 0; c < cols; ++c) {
              const T gh = g[r * cols + c] * gv[c];
              mean_g += gh;
              mean_gx += gh * normalized[r * cols + c];
            }
            mean_g /= T(cols);
            mean_gx /= T(cols);
            for (std::size_t c = 0; c < cols; ++c) {
              const T gh = g[r * cols + c] * gv[c];
              d[r * cols + c] += inv_std[r] * (gh - mean_g - normalized[r * cols + c] * mean_gx);
            }
          }
        }
      },
      "layer_norm");
}

template <typename T>
Var gather_rows(Tape<T>& t, Var table, std::span<const std::uint32_t> ids, std::size_t batch) {
  const Tensor<T>& tv = t.value(table);
  if (tv.rank() != 2) throw std::invalid_argument("gather_rows: table must be rank 2");
  const std::size_t d = tv.dim(1);
  Shape shape{ids.size(), d};
  if (batch > 0) {
    if (ids.size() % batch != 0) throw std::invalid_argument("gather_rows: ids not divisible by batch");
    shape = {batch, ids.size() / batch, d};
  }
  Tensor<T> out(shape);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] >= tv.dim(0)) throw std::invalid_argument("gather_rows: row index out of range");
    std::copy_n(tv.data() + ids[k] * d, d, out.data() + k * d);
  }
  std::vector<std::uint32_t> rows(ids.begin(), ids.end());
  return t.record(std::move(out), {table},
                  [table, d, rows = std::move(rows)](Tape<T>& tape, Var self) {
                    const Tensor<T>& g = tape.grad_ref(self);
                    T* dst = tape.grad_buffer(table);
                    for (std::size_t k = 0; k < rows.size(); ++k) {
                      for (std::size_t c = 0; c < d; ++c) dst[rows[k] * d + c] += g[k * d + c];
                    }
                  },
                  "gather_rows");
}

template <typename T>
Var concat_last(Tape<T>& t, std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_last: no inputs");
  const Tensor<T>& first = t.value(parts[0]);
  const std::size_t rows = first.outer();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    const Tensor<T>& pv = t.value(p);
    Shape lead(pv.shape().begin(), pv.shape().end() - 1);
    Shape first_lead(first.shape().begin(), first.shape().end() - 1);
    if (lead != first_lead) shape_error("concat_last", first.shape(), pv.shape());
    widths.push_back(pv.inner());
    total += pv.inner();
  }
  Shape shape = first.shape();
  shape.back() = total;
  Tensor<T> out(shape);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor<T>& pv = t.value(parts[i]);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.data() + r * widths[i], widths[i], out.data() + r * total + offset);
    }
    offset += widths[i];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), parts,
                  [inputs, widths, rows, total](Tape<T>& tape, Var self) {
                    const Tensor<T>& g = tape.grad_ref(self);
                    std::size_t offset = 0;
                    for (std::size_t i = 0; i < inputs.size(); ++i) {
                      if (tape.requires_grad(inputs[i])) {
                        T* d = tape.grad_buffer(inputs[i]);
                        for (std::size_t r = 0; r < rows; ++r) {
                          for (std::size_t c = 0; c < widths[i]; ++c) {
                            d[r * widths[i] + c] += g[r * total + offset + c];
                          }
                        }
                      }
                      offset += widths[i];
                    }
                  },
                  "concat_last");
}

template <typename T>
Var first_row(Tape<T>& t, Var a) {
  const Tensor<T>& av = t.value(a);
  std::size_t batch, len, d;
  if (av.rank() == 3) {
    batch = av.dim(0), len = av.dim(1), d = av.dim(2);
  } else if (av.rank() == 2) {
    batch = 1, len = av.dim(0), d = av.dim(1);
  } else {
    throw std::invalid_argument("first_row: rank must be 2 or 3");
  }
  if (len == 0) throw std::invalid_argument("first_row: empty sequence");
  Tensor<T> out(Shape{batch, d});
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(av.data() + b * len * d, d, out.data() + b * d);
  return t.record(std::move(out), {a},
                  [a, batch, len, d](Tape<T>& tape, Var self) {
                    const Tensor<T>& g = tape.grad_ref(self);
                    T* dst = tape.grad_buffer(a);
                    for (std::size_t b = 0; b < batch; ++b) {
                      for (std::size_t c = 0; c < d; ++c) dst[b * len * d + c] += g[b * d + c];
                    }
                  },
                  "first_row");
}

template <typename T>
Var column(Tape<T>& t, Var a, std::size_t j) {
  const Tensor<T>& av = t.value(a);
  if (av.rank() != 2 || j >= av.dim(1)) throw std::invalid_argument("column: index out of range");
  const std::size_t rows = av.dim(0), cols = av.dim(1);
  Tensor<T> out(Shape{rows, 1});
  for (std::size_t r = 0; r < rows; ++r) out[r] = av[r * cols + j];
  return t.record(std::move(out), {a},
                  [a, j, rows, cols](Tape<T>& tape, Var self) {
                    const Tensor<T>& g = tape.grad_ref(self);
                    T* d = tape.grad_buffer(a);
                    for (std::size_t r = 0; r < rows; ++r) d[r * cols + j] += g[r];
                  },
                  "column");
}

template <typename T>
Var row_scale(Tape<T>& t, Var a, Var w) {
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& wv = t.value(w);
  if (av.rank() != 2 || wv.rank() != 2 || wv.dim(1) != 1 || wv.dim(0) != av.dim(0)) {
    shape_error("row_scale", av.shape(), wv.shape());
  }
  const std::size_t rows = av.dim(0), cols = av.dim(1);
  Tensor<T> out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = av[r * cols + c] * wv[r];
  }
  return t.record(std::move(out), {a, w},
                  [a, w, rows, cols](Tape<T>& tape, Var self) {
                    const Tensor<T>& g = tape.grad_ref(self);
                    const Tensor<T>& av = tape.value(a);
                    const Tensor<T>& wv = tape.value(w);
                    if (tape.requires_grad(a)) {
                      T* d = tape.grad_buffer(a);
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] += g[r * cols + c] * wv[r];
                      }
                    }
                    if (tape.requires_grad(w)) {
                      T* d = tape.grad_buffer(w);
                      for (std::size_t r = 0; r < rows; ++r) {
                        T acc = 0;
                        for (std::size_t c = 0; c < cols; ++c) acc += g[r * cols + c] * av[r * cols + c];
                        d[r] += acc;
                      }
                    }
                  },
                  "row_scale");
}

template <typename T>
Var sum(Tape<T>& t, Var a) {
  const Tensor<T>& av = t.value(a);
  T total = 0;
  for (T v : av.values()) total += v;
  return t.record(Tensor<T>(Shape{1}, std::vector<T>{total}), {a},
                  [a](Tape<T>& tape, Var self) {
                    const T g = tape.grad_ref(self)[0];
                    T* d = tape.grad_buffer(a);
                    for (std::size_t i = 0; i < tape.value(a).size(); ++i) d[i] += g;
                  },
                  "sum");
}

template <typename T>
Var cross_entropy(Tape<T>& t, Var logits, std::span<const int> labels) {
  const Tensor<T>& lv = t.value(logits);
  if (lv.rank() != 2 || lv.dim(0) != labels.size() || labels.empty()) {
    throw std::invalid_argument("cross_entropy: logits must be B x C with B labels");
  }
  const std::size_t rows = lv.dim(0), cols = lv.dim(1);
  std::vector<T> probs(lv.size());
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= cols) {
      throw std::invalid_argument("cross_entropy: label out of range");
    }
    const T* x = lv.data() + r * cols;
    const T peak = *std::max_element(x, x + cols);
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(x[c] - peak);
    const T log_total = std::log(total);
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] = std::exp(x[c] - peak - log_total);
    loss -= x[labels[r]] - peak - log_total;
  }
  loss /= T(rows);
  std::vector<int> targets(labels.begin(), labels.end());
  return t.record(Tensor<T>(Shape{1}, std::vector<T>{loss}), {logits},
                  [logits, rows, cols, probs = std::move(probs),
                   targets = std::move(targets)](Tape<T>& tape, Var self) {
                    const T g = tape.grad_ref(self)[0] / T(rows);
                    T* d = tape.grad_buffer(logits);
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t c = 0; c < cols; ++c) {
                        const T onehot = static_cast<int>(c) == targets[r] ? T(1) : T(0);
                        d[r * cols + c] += g * (probs[r * cols + c] - onehot);
                      }
                    }
                  },
                  "cross_entropy");
}

}  // namespace ops

GradCheckResult finite_difference_check(const std::function<Var(Tape<double>&)>& loss,
                                        std::span<Parameter<double>* const> params, double eps) {
  auto evaluate = [&] {
    Tape<double> tape;
    return tape.value(loss(tape))[0];
  };
  for (auto* p : params) p->zero_grad();
  double base;
  {
    Tape<double> tape;
    Var l = loss(tape);
    base = tape.value(l)[0];
    tape.backward(l);
  }
  if (evaluate() != base) {
    throw std::runtime_error("finite_difference_check: loss is not deterministic");
  }
  GradCheckResult result;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double plus = evaluate();
      p->value[i] = saved - eps;
      const double minus = evaluate();
      p->value[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      const double abs_err = std::abs(analytic - numeric);
      const double rel = abs_err / denom;
      result.max_absolute_error = std::max(result.max_absolute_error, abs_err);
      if (result.worst_parameter.empty() || rel > result.max_relative_error) {
        const double max_abs = result.max_absolute_error;
        result = {rel, max_abs, p->name, i, analytic, numeric};
      }
    }
  }
  return result;
}

#define NTF_INSTANTIATE(T)                                                              \
  template class Tensor<T>;                                                             \
  template class Tape<T>;                                                               \
  template Var ops::matmul<T>(Tape<T>&, Var, Var, bool, bool);                          \
  template Var ops::add<T>(Tape<T>&, Var, Var);                                         \
  template Var ops::add_bias<T>(Tape<T>&, Var, Var);                                    \
  template Var ops::scale<T>(Tape<T>&, Var, T);                                         \
  template Var ops::softmax_rows<T>(Tape<T>&, Var);                                     \
  template Var ops::activation<T>(Tape<T>&, Var, Activation);                           \
  template Var ops::dropout<T>(Tape<T>&, Var, double);                                  \
  template Var ops::layer_norm<T>(Tape<T>&, Var, Var, Var, T);                          \
  template Var ops::gather_rows<T>(Tape<T>&, Var, std::span<const std::uint32_t>,       \
                                   std::size_t);                                        \
  template Var ops::concat_last<T>(Tape<T>&, std::span<const Var>);                     \
  template Var ops::first_row<T>(Tape<T>&, Var);                                        \
  template Var ops::column<T>(Tape<T>&, Var, std::size_t);                              \
  template Var ops::row_scale<T>(Tape<T>&, Var, Var);                                   \
  template Var ops::sum<T>(Tape<T>&, Var);                                              \
  template Var ops::cross_entropy<T>(Tape<T>&, Var, std::span<const int>);

NTF_INSTANTIATE(float)
NTF_INSTANTIATE(double)

#undef NTF_INSTANTIATE

}  // namespace ntformer
