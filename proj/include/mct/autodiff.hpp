#pragma once

// Tape-based reverse-mode differentiation over dense tensors.
//
// A Graph records every op in execution order together with a closure that
// pushes the output gradient back onto the op's inputs. backward() walks the
// tape in exact reverse order; gradients accumulate additively so fan-out is
// handled without special cases.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mct/error.hpp"
#include "mct/tensor.hpp"

namespace mct {

template <std::floating_point T>
class Graph;

/// Handle to a node on a Graph tape.
template <std::floating_point T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return graph->value(id).shape(); }
  const Tensor<T>& grad() const { return graph->grad(id); }
};

template <std::floating_point T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, false, {}});
    return {this, nodes_.size() - 1};
  }

  Var<T> parameter(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, true, {}});
    return {this, nodes_.size() - 1};
  }

  /// Appends an op output. The closure is kept only when some input needs a
  /// gradient; otherwise the node is a constant.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) {
      check_owner(v);
      needs = needs || nodes_[v.id].requires_grad;
    }
    return record_impl(std::move(value), needs, std::move(fn));
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs,
                BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) {
      check_owner(v);
      needs = needs || nodes_[v.id].requires_grad;
    }
    return record_impl(std::move(value), needs, std::move(fn));
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  /// Gradient slot, zero-allocated on first access.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  const Tensor<T>& grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.empty()) {
      throw Error("no gradient recorded for node " + std::to_string(id));
    }
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded closure in reverse.
  void backward(Var<T> loss) {
    check_owner(loss);
    if (value(loss.id).size() != 1) {
      throw DimensionError("backward needs a scalar loss, got " +
                           shape_str(value(loss.id).shape()));
    }
    grad(loss.id)[0] += T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> record_impl(Tensor<T> value, bool needs, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, needs,
                          needs ? std::move(fn) : BackwardFn{}});
    return {this, nodes_.size() - 1};
  }

  void check_owner(const Var<T>& v) const {
    if (v.graph != this || v.id >= nodes_.size()) {
      throw Error("variable does not belong to this graph");
    }
  }

  std::vector<Node> nodes_;
};

namespace detail {

// C[m x n] += op(A) * op(B), where op transposes when the flag is set.
// The inner loop always runs over a contiguous row of B so it vectorizes.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
              std::size_t n, bool trans_a, bool trans_b) {
  std::vector<T> bt;
  if (trans_b) {
    // b is stored n x k; materialize k x n.
    bt.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    b = bt.data();
  }
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = trans_a ? a[p * m + i] : a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <std::floating_point T>
Var<T> add(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_same_shape(av, bv, "add");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.graph->record(std::move(out), {a, b},
                         [a, b](Graph<T>& g, std::size_t self) {
                           const auto& dy = g.grad(self);
                           for (auto v : {a, b}) {
                             if (!g.requires_grad(v.id)) continue;
                             auto& dv = g.grad(v.id);
                             for (std::size_t i = 0; i < dy.size(); ++i) dv[i] += dy[i];
                           }
                         });
}

template <std::floating_point T>
Var<T> mul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_same_shape(av, bv, "mul");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.graph->record(std::move(out), {a, b},
                         [a, b](Graph<T>& g, std::size_t self) {
                           const auto& dy = g.grad(self);
                           if (g.requires_grad(a.id)) {
                             auto& da = g.grad(a.id);
                             const auto& bv = g.value(b.id);
                             for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
                           }
                           if (g.requires_grad(b.id)) {
                             auto& db = g.grad(b.id);
                             const auto& av = g.value(a.id);
                             for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
                           }
                         });
}

template <std::floating_point T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.graph->record(std::move(out), {a},
                         [a, s](Graph<T>& g, std::size_t self) {
                           const auto& dy = g.grad(self);
                           auto& da = g.grad(a.id);
                           for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * s;
                         });
}

/// x[r x c] + bias[c], the only broadcast pattern supported.
template <std::floating_point T>
Var<T> add_row_bias(Var<T> x, Var<T> bias) {
  const auto& xv = x.value();
  const auto& bv = bias.value();
  require_rank(xv.shape(), 2, "add_row_bias");
  if (bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    throw DimensionError("add_row_bias: bias " + shape_str(bv.shape()) +
                         " does not match rows of " + shape_str(xv.shape()));
  }
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor<T> out = xv;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bv[j];
  return x.graph->record(std::move(out), {x, bias},
                         [x, bias, r, c](Graph<T>& g, std::size_t self) {
                           const auto& dy = g.grad(self);
                           if (g.requires_grad(x.id)) {
                             auto& dx = g.grad(x.id);
                             for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
                           }
                           if (g.requires_grad(bias.id)) {
                             auto& db = g.grad(bias.id);
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j) db[j] += dy[i * c + j];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

template <std::floating_point T>
Var<T> matmul_impl(Var<T> a, Var<T> b, bool trans_b, const char* name) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2) {
    throw DimensionError(std::string(name) + ": operands must be matrices, got " +
                         shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1);
  const std::size_t kb = trans_b ? bv.dim(1) : bv.dim(0);
  const std::size_t n = trans_b ? bv.dim(0) : bv.dim(1);
  if (k != kb) {
    throw DimensionError(std::string(name) + ": inner dimensions differ for " +
                         shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  Tensor<T> out({m, n});
  gemm_acc(av.data().data(), bv.data().data(), out.data().data(), m, k, n,
           false, trans_b);
  return a.graph->record(
      std::move(out), {a, b},
      [a, b, m, k, n, trans_b](Graph<T>& g, std::size_t self) {
        const auto& dy = g.grad(self);
        const T* bp = g.value(b.id).data().data();
        const T* ap = g.value(a.id).data().data();
        if (g.requires_grad(a.id)) {
          // dA = dC * B^T   (or dC * B when B was used transposed)
          gemm_acc(dy.data().data(), bp, g.grad(a.id).data().data(), m, n, k,
                   false, !trans_b);
        }
        if (g.requires_grad(b.id)) {
          if (!trans_b) {
            // dB = A^T * dC
            gemm_acc(ap, dy.data().data(), g.grad(b.id).data().data(), k, m, n,
                     true, false);
          } else {
            // B is n x k: dB = dC^T * A
            gemm_acc(dy.data().data(), ap, g.grad(b.id).data().data(), n, m, k,
                     true, false);
          }
        }
      });
}

}  // namespace detail

template <std::floating_point T>
Var<T> matmul(Var<T> a, Var<T> b) {
  return detail::matmul_impl(a, b, false, "matmul");
}

/// a * b^T without materializing the transpose on the tape.
template <std::floating_point T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  return detail::matmul_impl(a, b, true, "matmul_nt");
}

template <std::floating_point T>
Var<T> transpose(Var<T> a) {
  const auto& av = a.value();
  require_rank(av.shape(), 2, "transpose");
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return a.graph->record(std::move(out), {a},
                         [a, r, c](Graph<T>& g, std::size_t self) {
                           const auto& dy = g.grad(self);
                           auto& da = g.grad(a.id);
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) da[i * c + j] += dy[j * r + i];
                         });
}

template <std::floating_point T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.graph->record(std::move(out), {a},
                         [a](Graph<T>& g, std::size_t self) {
                           const auto& dy = g.grad(self);
                           auto& da = g.grad(a.id);
                           for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
                         });
}

// ---------------------------------------------------------------------------
// Slicing and concatenation (rank-2)

template <std::floating_point T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
  const auto& av = a.value();
  require_rank(av.shape(), 2, "slice_rows");
  if (begin >= end || end > av.dim(0)) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") outside " + shape_str(av.shape()));
  }
  const std::size_t c = av.dim(1);
  std::vector<T> data(av.data().begin() + begin * c, av.data().begin() + end * c);
  return a.graph->record(Tensor<T>({end - begin, c}, std::move(data)), {a},
                         [a, begin, c](Graph<T>& g, std::size_t self) {
                           const auto& dy = g.grad(self);
                           auto& da = g.grad(a.id);
                           for (std::size_t i = 0; i < dy.size(); ++i) da[begin * c + i] += dy[i];
                         });
}

template <std::floating_point T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  const auto& av = a.value();
  require_rank(av.shape(), 2, "slice_cols");
  if (begin >= end || end > av.dim(1)) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") outside " + shape_str(av.shape()));
  }
  const std::size_t r = av.dim(0), c = av.dim(1), w = end - begin;
  Tensor<T> out({r, w});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = av[i * c + begin + j];
  return a.graph->record(std::move(out), {a},
                         [a, begin, r, c, w](Graph<T>& g, std::size_t self) {
                           const auto& dy = g.grad(self);
                           auto& da = g.grad(a.id);
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < w; ++j) da[i * c + begin + j] += dy[i * w + j];
                         });
}

template <std::floating_point T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts.front().value().dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank(p.shape(), 2, "concat_rows");
    if (p.value().dim(1) != c) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(p.shape()));
    }
    rows += p.value().dim(0);
  }
  std::vector<T> data;
  data.reserve(rows * c);
  for (const auto& p : parts)
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  return parts.front().graph->record(
      Tensor<T>({rows, c}, std::move(data)), parts,
      [parts](Graph<T>& g, std::size_t self) {
        const auto& dy = g.grad(self);
        std::size_t offset = 0;
        for (const auto& p : parts) {
          const std::size_t n = g.value(p.id).size();
          if (g.requires_grad(p.id)) {
            auto& dp = g.grad(p.id);
            for (std::size_t i = 0; i < n; ++i) dp[i] += dy[offset + i];
          }
          offset += n;
        }
      });
}

template <std::floating_point T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts.front().value().dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require_rank(p.shape(), 2, "concat_cols");
    if (p.value().dim(0) != r) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()));
    }
    cols += p.value().dim(1);
  }
  Tensor<T> out({r, cols});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    const std::size_t w = pv.dim(1);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * cols + offset + j] = pv[i * w + j];
    offset += w;
  }
  return parts.front().graph->record(
      std::move(out), parts, [parts, r, cols](Graph<T>& g, std::size_t self) {
        const auto& dy = g.grad(self);
        std::size_t offset = 0;
        for (const auto& p : parts) {
          const std::size_t w = g.value(p.id).dim(1);
          if (g.requires_grad(p.id)) {
            auto& dp = g.grad(p.id);
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < w; ++j) dp[i * w + j] += dy[i * cols + offset + j];
          }
          offset += w;
        }
      });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization

/// Row-wise softmax stabilized by subtracting the row maximum.
template <std::floating_point T>
Var<T> softmax_rows(Var<T> x) {
  const auto& xv = x.value();
  require_rank(xv.shape(), 2, "softmax_rows");
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor<T> out({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data().data() + i * c;
    T* o = out.data().data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T sum = 0;
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(row[j] - mx);
      sum += o[j];
    }
    const T inv = T{1} / sum;
    for (std::size_t j = 0; j < c; ++j) o[j] *= inv;
  }
  return x.graph->record(std::move(out), {x},
                         [x, r, c](Graph<T>& g, std::size_t self) {
                           const auto& dy = g.grad(self);
                           const auto& y = g.value(self);
                           auto& dx = g.grad(x.id);
                           for (std::size_t i = 0; i < r; ++i) {
                             T dot = 0;
                             for (std::size_t j = 0; j < c; ++j) dot += dy[i * c + j] * y[i * c + j];
                             for (std::size_t j = 0; j < c; ++j)
                               dx[i * c + j] += y[i * c + j] * (dy[i * c + j] - dot);
                           }
                         });
}

/// Per-row normalization over the last dimension followed by gain/bias.
template <std::floating_point T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-6)) {
  const auto& xv = x.value();
  require_rank(xv.shape(), 2, "layer_norm");
  const std::size_t r = xv.dim(0), d = xv.dim(1);
  if (d < 2) throw DimensionError("layer_norm: needs at least 2 features");
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: affine parameters must have length " +
                         std::to_string(d));
  }
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  Tensor<T> out({r, d});
  // normalized activations and inverse std, saved for backward
  auto xhat = std::make_shared<std::vector<T>>(r * d);
  auto inv_std = std::make_shared<std::vector<T>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data().data() + i * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(d);
    const T is = T{1} / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mean) * is;
      (*xhat)[i * d + j] = h;
      out[i * d + j] = h * gv[j] + bv[j];
    }
  }
  return x.graph->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, r, d, xhat, inv_std](Graph<T>& g, std::size_t self) {
        const auto& dy = g.grad(self);
        const auto& gv = g.value(gain.id);
        if (g.requires_grad(gain.id)) {
          auto& dg = g.grad(gain.id);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < d; ++j) dg[j] += dy[i * d + j] * (*xhat)[i * d + j];
        }
        if (g.requires_grad(bias.id)) {
          auto& db = g.grad(bias.id);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < d; ++j) db[j] += dy[i * d + j];
        }
        if (g.requires_grad(x.id)) {
          auto& dx = g.grad(x.id);
          std::vector<T> dh(d);
          for (std::size_t i = 0; i < r; ++i) {
            T mean_dh = 0, mean_dh_h = 0;
            for (std::size_t j = 0; j < d; ++j) {
              dh[j] = dy[i * d + j] * gv[j];
              mean_dh += dh[j];
              mean_dh_h += dh[j] * (*xhat)[i * d + j];
            }
            mean_dh /= T(d);
            mean_dh_h /= T(d);
            const T is = (*inv_std)[i];
            for (std::size_t j = 0; j < d; ++j)
              dx[i * d + j] += is * (dh[j] - mean_dh - (*xhat)[i * d + j] * mean_dh_h);
          }
        }
      });
}

/// Exact (erf-based) GELU.
template <std::floating_point T>
Var<T> gelu(Var<T> x) {
  Tensor<T> out = x.value();
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (auto& v : out.data()) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  return x.graph->record(std::move(out), {x},
                         [x, inv_sqrt2](Graph<T>& g, std::size_t self) {
                           const auto& dy = g.grad(self);
                           const auto& xv = g.value(x.id);
                           auto& dx = g.grad(x.id);
                           const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
                           for (std::size_t i = 0; i < dy.size(); ++i) {
                             const T v = xv[i];
                             const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                             const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
                             dx[i] += dy[i] * (cdf + v * pdf);
                           }
                         });
}

template <std::floating_point T>
Var<T> sigmoid(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = T(1) / (T(1) + std::exp(-v));
  return x.graph->record(std::move(out), {x},
                         [x](Graph<T>& g, std::size_t self) {
                           const auto& dy = g.grad(self);
                           const auto& y = g.value(self);
                           auto& dx = g.grad(x.id);
                           for (std::size_t i = 0; i < dy.size(); ++i)
                             dx[i] += dy[i] * y[i] * (T(1) - y[i]);
                         });
}

/// Inverted dropout. Identity when p == 0 (no mask drawn).
template <std::floating_point T, class Rng>
Var<T> dropout(Var<T> x, T p, Rng& rng) {
  if (p <= T(0)) return x;
  if (p >= T(1)) throw ConfigError("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  auto mask = std::make_shared<std::vector<T>>(x.value().size());
  Tensor<T> out = x.value();
  const T s = T(1) / (T(1) - p);
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = keep(rng) ? s : T(0);
    out[i] *= (*mask)[i];
  }
  return x.graph->record(std::move(out), {x},
                         [x, mask](Graph<T>& g, std::size_t self) {
                           const auto& dy = g.grad(self);
                           auto& dx = g.grad(x.id);
                           for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * (*mask)[i];
                         });
}

// ---------------------------------------------------------------------------
// Reductions

template <std::floating_point T>
Var<T> sum(Var<T> x) {
  T s = 0;
  for (auto v : x.value().data()) s += v;
  return x.graph->record(Tensor<T>({1}, s), {x},
                         [x](Graph<T>& g, std::size_t self) {
                           const T dy = g.grad(self)[0];
                           auto& dx = g.grad(x.id);
                           for (auto& v : dx.data()) v += dy;
                         });
}

template <std::floating_point T>
Var<T> mean(Var<T> x) {
  const T n = T(x.value().size());
  T s = 0;
  for (auto v : x.value().data()) s += v;
  return x.graph->record(Tensor<T>({1}, s / n), {x},
                         [x, n](Graph<T>& g, std::size_t self) {
                           const T dy = g.grad(self)[0] / n;
                           auto& dx = g.grad(x.id);
                           for (auto& v : dx.data()) v += dy;
                         });
}

/// Mean of each row of an r x c matrix -> [r].
template <std::floating_point T>
Var<T> mean_cols(Var<T> x) {
  const auto& xv = x.value();
  require_rank(xv.shape(), 2, "mean_cols");
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor<T> out({r});
  for (std::size_t i = 0; i < r; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += xv[i * c + j];
    out[i] = s / T(c);
  }
  return x.graph->record(std::move(out), {x},
                         [x, r, c](Graph<T>& g, std::size_t self) {
                           const auto& dy = g.grad(self);
                           auto& dx = g.grad(x.id);
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += dy[i] / T(c);
                         });
}

/// Max of each row -> [r]; gradient goes to the first maximal entry.
template <std::floating_point T>
Var<T> max_cols(Var<T> x) {
  const auto& xv = x.value();
  require_rank(xv.shape(), 2, "max_cols");
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor<T> out({r});
  auto arg = std::make_shared<std::vector<std::size_t>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data().data() + i * c;
    const std::size_t a = static_cast<std::size_t>(std::max_element(row, row + c) - row);
    (*arg)[i] = a;
    out[i] = row[a];
  }
  return x.graph->record(std::move(out), {x},
                         [x, c, arg](Graph<T>& g, std::size_t self) {
                           const auto& dy = g.grad(self);
                           auto& dx = g.grad(x.id);
                           for (std::size_t i = 0; i < arg->size(); ++i) dx[i * c + (*arg)[i]] += dy[i];
                         });
}

/// Global weighted rank pooling over each row of x [r x c]:
///   out[i] = sum_j lambda^(j-1) * x[i, r_j] / sum_j lambda^(j-1)
/// where r_1, r_2, ... order the row descending (stable: earlier index first
/// among equal values). The accumulation runs in original index order, so
/// lambda = 1 reproduces mean_cols bit-for-bit and lambda = 0 gives the max.
/// Backward routes each rank weight to the position that held the rank at
/// forward time.
template <std::floating_point T>
Var<T> rank_pool_cols(Var<T> x, T lambda) {
  if (!(lambda >= T(0) && lambda <= T(1))) {
    throw ConfigError("GWRP decay must lie in [0,1], got " + std::to_string(lambda));
  }
  const auto& xv = x.value();
  require_rank(xv.shape(), 2, "rank_pool_cols");
  const std::size_t r = xv.dim(0), c = xv.dim(1);

  std::vector<T> rank_weight(c);
  T norm = 0;
  {
    T w = 1;  // 0^0 = 1
    for (std::size_t j = 0; j < c; ++j) {
      rank_weight[j] = w;
      norm += w;
      w *= lambda;
    }
  }

  auto weights = std::make_shared<std::vector<T>>(r * c);
  Tensor<T> out({r});
  std::vector<std::size_t> order(c);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data().data() + i * c;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    T* w = weights->data() + i * c;
    for (std::size_t j = 0; j < c; ++j) w[order[j]] = rank_weight[j];
    T acc = 0;
    for (std::size_t j = 0; j < c; ++j) acc += w[j] * row[j];
    out[i] = acc / norm;
  }
  return x.graph->record(std::move(out), {x},
                         [x, r, c, weights, norm](Graph<T>& g, std::size_t self) {
                           const auto& dy = g.grad(self);
                           auto& dx = g.grad(x.id);
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j)
                               dx[i * c + j] += dy[i] * (*weights)[i * c + j] / norm;
                         });
}

// ---------------------------------------------------------------------------
// Convolution

/// Same-size 2-D convolution: x [D x H x W], w [C x D x k x k] (k odd),
/// b [C] -> [C x H x W], stride 1, zero padding k/2.
template <std::floating_point T>
Var<T> conv2d_same(Var<T> x, Var<T> w, Var<T> b) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  require_rank(xv.shape(), 3, "conv2d input");
  require_rank(wv.shape(), 4, "conv2d weight");
  const std::size_t in_ch = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const std::size_t out_ch = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != in_ch || wv.dim(3) != k || k % 2 == 0) {
    throw DimensionError("conv2d: weight " + shape_str(wv.shape()) +
                         " incompatible with input " + shape_str(xv.shape()));
  }
  if (bv.rank() != 1 || bv.dim(0) != out_ch) {
    throw DimensionError("conv2d: bias " + shape_str(bv.shape()) + " needs length " +
                         std::to_string(out_ch));
  }
  const long pad = static_cast<long>(k / 2);
  const long H = static_cast<long>(h), W = static_cast<long>(wd), K = static_cast<long>(k);

  // visit(o, d, y, xx, u, v, in_index) for every in-bounds tap
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t o = 0; o < out_ch; ++o)
      for (std::size_t d = 0; d < in_ch; ++d)
        for (long u = 0; u < K; ++u)
          for (long v = 0; v < K; ++v) {
            const std::size_t widx = ((o * in_ch + d) * k + u) * k + v;
            for (long y = 0; y < H; ++y) {
              const long sy = y + u - pad;
              if (sy < 0 || sy >= H) continue;
              for (long xx = 0; xx < W; ++xx) {
                const long sx = xx + v - pad;
                if (sx < 0 || sx >= W) continue;
                fn(widx, (o * h + y) * wd + xx, (d * h + sy) * wd + sx);
              }
            }
          }
  };

  Tensor<T> out({out_ch, h, wd});
  for (std::size_t o = 0; o < out_ch; ++o)
    for (std::size_t i = 0; i < h * wd; ++i) out[o * h * wd + i] = bv[o];
  for_each_tap([&](std::size_t wi, std::size_t oi, std::size_t xi) {
    out[oi] += wv[wi] * xv[xi];
  });

  return x.graph->record(
      std::move(out), {x, w, b},
      [x, w, b, out_ch, h, wd, for_each_tap](Graph<T>& g, std::size_t self) {
        const auto& dy = g.grad(self);
        const bool gx = g.requires_grad(x.id), gw = g.requires_grad(w.id);
        if (g.requires_grad(b.id)) {
          auto& db = g.grad(b.id);
          for (std::size_t o = 0; o < out_ch; ++o)
            for (std::size_t i = 0; i < h * wd; ++i) db[o] += dy[o * h * wd + i];
        }
        if (!gx && !gw) return;
        const auto& xv = g.value(x.id);
        const auto& wv = g.value(w.id);
        Tensor<T>* dx = gx ? &g.grad(x.id) : nullptr;
        Tensor<T>* dw = gw ? &g.grad(w.id) : nullptr;
        for_each_tap([&](std::size_t wi, std::size_t oi, std::size_t xi) {
          if (dx) (*dx)[xi] += wv[wi] * dy[oi];
          if (dw) (*dw)[wi] += xv[xi] * dy[oi];
        });
      });
}

// ---------------------------------------------------------------------------
// Losses

/// Multi-label soft margin loss over logits y [C] and multi-hot labels:
///   -(1/C) sum_i [ t_i log s(y_i) + (1 - t_i) log(1 - s(y_i)) ]
/// with s clamped to [1e-12, 1 - 1e-12]. Evaluated in double precision.
template <std::floating_point T>
Var<T> multilabel_soft_margin(Var<T> logits, const std::vector<T>& labels) {
  const auto& yv = logits.value();
  if (yv.rank() != 1 || yv.size() != labels.size()) {
    throw DimensionError("multilabel_soft_margin: logits " + shape_str(yv.shape()) +
                         " vs " + std::to_string(labels.size()) + " labels");
  }
  constexpr double lo = 1e-12, hi = 1.0 - 1e-12;
  const std::size_t c = labels.size();
  auto dlogit = std::make_shared<std::vector<T>>(c);
  double loss = 0;
  for (std::size_t i = 0; i < c; ++i) {
    const double t = static_cast<double>(labels[i]);
    const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(yv[i])));
    const double pc = std::clamp(p, lo, hi);
    loss -= t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc);
    (*dlogit)[i] = (p > lo && p < hi) ? static_cast<T>((p - t) / double(c)) : T(0);
  }
  loss /= double(c);
  return logits.graph->record(Tensor<T>({1}, static_cast<T>(loss)), {logits},
                              [logits, dlogit](Graph<T>& g, std::size_t self) {
                                const T dy = g.grad(self)[0];
                                auto& dx = g.grad(logits.id);
                                for (std::size_t i = 0; i < dlogit->size(); ++i)
                                  dx[i] += dy * (*dlogit)[i];
                              });
}

/// Mean over rows of softmax cross-entropy where row i's target is column i
/// (an identity target matrix). Uses log1p over the non-maximal terms so a
/// dominant diagonal yields its exponentially small loss without cancellation.
template <std::floating_point T>
Var<T> softmax_xent_identity(Var<T> s) {
  const auto& sv = s.value();
  require_rank(sv.shape(), 2, "softmax_xent_identity");
  const std::size_t n = sv.dim(0);
  if (sv.dim(1) != n) {
    throw DimensionError("softmax_xent_identity: expected a square matrix, got " +
                         shape_str(sv.shape()));
  }
  auto prob = std::make_shared<std::vector<T>>(n * n);
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = sv.data().data() + i * n;
    const std::size_t am = static_cast<std::size_t>(std::max_element(row, row + n) - row);
    const double m = row[am];
    double rest = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != am) rest += std::exp(static_cast<double>(row[j]) - m);
    const double lse = m + std::log1p(rest);
    loss += (m - static_cast<double>(row[i])) + std::log1p(rest);
    for (std::size_t j = 0; j < n; ++j)
      (*prob)[i * n + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
  }
  loss /= double(n);
  return s.graph->record(Tensor<T>({1}, static_cast<T>(loss)), {s},
                         [s, n, prob](Graph<T>& g, std::size_t self) {
                           const T dy = g.grad(self)[0] / T(n);
                           auto& ds = g.grad(s.id);
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < n; ++j)
                               ds[i * n + j] += dy * ((*prob)[i * n + j] - (i == j ? T(1) : T(0)));
                         });
}

}  // namespace mct
