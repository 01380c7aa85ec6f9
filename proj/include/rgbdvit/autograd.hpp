#pragma once

// Reverse-mode differentiation over a recorded graph of fused tensor ops.
//
// Every op computes its forward value eagerly and, when the graph records,
// pushes a closure that accumulates into the gradients of its inputs. Nodes
// are appended in evaluation order, so walking them backwards is a valid
// topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "rgbdvit/error.hpp"
#include "rgbdvit/tensor.hpp"

namespace rgbdvit::nn {

// Named trainable tensors, ordered by path.
template <class T>
using ParamMap = std::map<std::string, Tensor<T>>;

struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

namespace detail {

template <class T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

template <class T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace detail

template <class T>
class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  // Parameters are looked up lazily by path; repeated lookups of the same path
  // return the same node so that shared weights accumulate one gradient.
  void bind(const ParamMap<T>& params) { params_ = &params; }

  Var param(const std::string& path) {
    if (auto it = param_vars_.find(path); it != param_vars_.end()) return it->second;
    if (params_ == nullptr) throw StateError("graph has no bound parameters");
    auto it = params_->find(path);
    if (it == params_->end()) throw InvalidArgument("unknown parameter '" + path + "'");
    Node n;
    n.ref = &it->second;
    n.path = path;
    nodes_.push_back(std::move(n));
    Var v{nodes_.size() - 1};
    param_vars_.emplace(path, v);
    return v;
  }

  bool has_param(const std::string& path) const {
    return params_ != nullptr && params_->count(path) > 0;
  }

  Var constant(Tensor<T> value) {
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.ref ? *n.ref : n.owned;
  }

  // Gradient buffer of a node, zero-allocated on first access.
  Tensor<T>& grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.data.empty()) n.grad = Tensor<T>(value(v).shape);
    return n.grad;
  }

  Var push(Tensor<T> value, std::function<void(Graph&, Var)> backward) {
    Node n;
    n.owned = std::move(value);
    if (record_) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  // Parameter paths that were read while building this graph.
  std::set<std::string> touched() const {
    std::set<std::string> out;
    for (const auto& [path, v] : param_vars_) out.insert(path);
    return out;
  }

  // Runs the reverse sweep from a scalar loss. Returns one gradient per bound
  // parameter; parameters that were never reached get zeros.
  ParamMap<T> backward(Var loss) {
    if (!record_) throw StateError("backward on a graph that does not record");
    if (done_) throw StateError("backward already ran on this graph");
    if (!loss.valid() || loss.id >= nodes_.size())
      throw StateError("backward without a recorded forward pass");
    if (value(loss).numel() != 1) throw InvalidArgument("backward needs a scalar loss");
    done_ = true;
    grad(loss).data[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.data.empty()) continue;
      n.backward(*this, Var{i});
    }
    ParamMap<T> out;
    if (params_ != nullptr) {
      for (const auto& [path, tensor] : *params_) {
        auto it = param_vars_.find(path);
        if (it != param_vars_.end() && !nodes_[it->second.id].grad.data.empty())
          out.emplace(path, nodes_[it->second.id].grad);
        else
          out.emplace(path, Tensor<T>(tensor.shape));
      }
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    std::function<void(Graph&, Var)> backward;
    std::string path;
  };

  bool record_;
  bool done_ = false;
  const ParamMap<T>* params_ = nullptr;
  std::deque<Node> nodes_;  // stable references across push
  std::map<std::string, Var> param_vars_;
};

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  if (va.shape != vb.shape)
    throw InvalidArgument("add: shape mismatch " + shape_str(va.shape) + " vs " +
                          shape_str(vb.shape));
  Tensor<T> out(va.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = va.data[i] + vb.data[i];
  return g.push(std::move(out), [a, b](Graph<T>& g, Var self) {
    const auto& d = g.grad(self).data;
    auto& ga = g.grad(a).data;
    for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i];
    auto& gb = g.grad(b).data;
    for (std::size_t i = 0; i < d.size(); ++i) gb[i] += d[i];
  });
}

template <class T>
Var sum(Graph<T>& g, Var x) {
  T s = 0;
  for (T v : g.value(x).data) s += v;
  return g.push(Tensor<T>({1}, s), [x](Graph<T>& g, Var self) {
    T d = g.grad(self).data[0];
    for (auto& v : g.grad(x).data) v += d;
  });
}

// Exact (erf) GELU.
template <class T>
Var gelu(Graph<T>& g, Var x) {
  const auto& vx = g.value(x);
  Tensor<T> out(vx.shape);
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    T v = vx.data[i];
    out.data[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return g.push(std::move(out), [x](Graph<T>& g, Var self) {
    constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
    constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
    const auto& vx = g.value(x).data;
    const auto& d = g.grad(self).data;
    auto& gx = g.grad(x).data;
    for (std::size_t i = 0; i < d.size(); ++i) {
      T v = vx[i];
      T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      gx[i] += d[i] * (cdf + v * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Dense layers

// y = x W^T + b with x [M,K], W [N,K], b [N] (b optional).
// Adds a bias row to every row of x. Columns in [skip_begin, skip_end) get
// no bias gradient; used for the attention key bias, whose gradient is
// identically zero since softmax is invariant to a per-row shift.
template <class T>
Var add_row_bias(Graph<T>& g, Var x, Var b, std::size_t skip_begin = 0, std::size_t skip_end = 0) {
  const auto& vx = g.value(x);
  const auto& vb = g.value(b);
  if (vx.rank() != 2 || vb.numel() != vx.cols()) throw InvalidArgument("add_row_bias: width mismatch");
  const std::size_t m = vx.rows(), n = vx.cols();
  Tensor<T> out = vx;
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) += vb.data[c];
  return g.push(std::move(out), [x, b, m, n, skip_begin, skip_end](Graph<T>& g, Var self) {
    const auto& d = g.grad(self);
    detail::axpy(T(1), d.data.data(), g.grad(x).data.data(), d.numel());
    auto& gb = g.grad(b).data;
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c)
        if (c < skip_begin || c >= skip_end) gb[c] += d(r, c);
  });
}

template <class T>
Var linear(Graph<T>& g, Var x, Var w, Var b = {}) {
  const auto& vx = g.value(x);
  const auto& vw = g.value(w);
  if (vx.rank() != 2 || vw.rank() != 2 || vx.cols() != vw.cols())
    throw InvalidArgument("linear: input " + shape_str(vx.shape) + " incompatible with weight " +
                          shape_str(vw.shape));
  const std::size_t m = vx.rows(), k = vx.cols(), n = vw.rows();
  const T* bias = nullptr;
  if (b.valid()) {
    const auto& vb = g.value(b);
    if (vb.numel() != n) throw InvalidArgument("linear: bias width mismatch");
    bias = vb.data.data();
  }
  Tensor<T> out({m, n});
  for (std::size_t r = 0; r < m; ++r) {
    const T* xr = vx.row(r);
    T* yr = out.row(r);
    for (std::size_t c = 0; c < n; ++c) yr[c] = detail::dot(xr, vw.row(c), k) + (bias ? bias[c] : T(0));
  }
  return g.push(std::move(out), [x, w, b, m, k, n](Graph<T>& g, Var self) {
    const auto& d = g.grad(self);
    const auto& vx = g.value(x);
    const auto& vw = g.value(w);
    auto& gx = g.grad(x);
    auto& gw = g.grad(w);
    for (std::size_t r = 0; r < m; ++r) {
      const T* dr = d.row(r);
      const T* xr = vx.row(r);
      T* gxr = gx.row(r);
      for (std::size_t c = 0; c < n; ++c) {
        T dv = dr[c];
        if (dv == T(0)) continue;
        detail::axpy(dv, vw.row(c), gxr, k);
        detail::axpy(dv, xr, gw.row(c), k);
      }
    }
    if (b.valid()) {
      auto& gb = g.grad(b).data;
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += d(r, c);
    }
  });
}

// Row-wise layer normalization over the last dimension, then affine.
template <class T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta, T eps = T(1e-6)) {
  const auto& vx = g.value(x);
  const std::size_t m = vx.rows(), dim = vx.cols();
  const auto& vg = g.value(gamma).data;
  const auto& vb = g.value(beta).data;
  if (vg.size() != dim || vb.size() != dim) throw InvalidArgument("layer_norm: affine width mismatch");
  Tensor<T> out({m, dim});
  Tensor<T> xhat({m, dim});
  std::vector<T> rstd(m);
  for (std::size_t r = 0; r < m; ++r) {
    const T* xr = vx.row(r);
    T mean = 0;
    for (std::size_t c = 0; c < dim; ++c) mean += xr[c];
    mean /= T(dim);
    T var = 0;
    for (std::size_t c = 0; c < dim; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= T(dim);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < dim; ++c) {
      T h = (xr[c] - mean) * rstd[r];
      xhat(r, c) = h;
      out(r, c) = h * vg[c] + vb[c];
    }
  }
  return g.push(std::move(out), [x, gamma, beta, m, dim, xhat = std::move(xhat),
                                 rstd = std::move(rstd)](Graph<T>& g, Var self) {
    const auto& d = g.grad(self);
    const auto& vg = g.value(gamma).data;
    auto& gx = g.grad(x);
    auto& gg = g.grad(gamma).data;
    auto& gb = g.grad(beta).data;
    std::vector<T> dh(dim);
    for (std::size_t r = 0; r < m; ++r) {
      T mean_dh = 0, mean_dh_h = 0;
      for (std::size_t c = 0; c < dim; ++c) {
        T dy = d(r, c);
        gg[c] += dy * xhat(r, c);
        gb[c] += dy;
        dh[c] = dy * vg[c];
        mean_dh += dh[c];
        mean_dh_h += dh[c] * xhat(r, c);
      }
      mean_dh /= T(dim);
      mean_dh_h /= T(dim);
      for (std::size_t c = 0; c < dim; ++c)
        gx(r, c) += rstd[r] * (dh[c] - mean_dh - xhat(r, c) * mean_dh_h);
    }
  });
}

// Multi-head scaled dot-product self-attention on packed projections.
// qkv: [batch*seq, 3*dim] laid out as [q | k | v]; returns [batch*seq, dim]
// with heads concatenated. `probs_out`, when given, receives the softmax
// matrices [batch][head][seq*seq].
template <class T>
Var self_attention(Graph<T>& g, Var qkv, std::size_t batch, std::size_t seq, std::size_t heads,
                   std::vector<std::vector<T>>* probs_out = nullptr) {
  const auto& v = g.value(qkv);
  if (v.rank() != 2 || v.rows() != batch * seq || v.cols() % 3 != 0 || (v.cols() / 3) % heads != 0)
    throw InvalidArgument("self_attention: bad packed qkv shape " + shape_str(v.shape));
  const std::size_t dim = v.cols() / 3, hd = dim / heads, stride = 3 * dim;
  const T scale = T(1) / std::sqrt(T(hd));
  std::vector<std::vector<T>> probs(batch * heads, std::vector<T>(seq * seq));
  Tensor<T> out({batch * seq, dim});
  std::vector<T> row(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* base = v.row(b * seq);
    for (std::size_t h = 0; h < heads; ++h) {
      auto& p = probs[b * heads + h];
      for (std::size_t i = 0; i < seq; ++i) {
        const T* q = base + i * stride + h * hd;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          const T* kk = base + j * stride + dim + h * hd;
          row[j] = detail::dot(q, kk, hd) * scale;
          mx = std::max(mx, row[j]);
        }
        T z = 0;
        for (std::size_t j = 0; j < seq; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        T* o = out.row(b * seq + i) + h * hd;
        for (std::size_t j = 0; j < seq; ++j) {
          T pij = row[j] / z;
          p[i * seq + j] = pij;
          detail::axpy(pij, base + j * stride + 2 * dim + h * hd, o, hd);
        }
      }
    }
  }
  if (probs_out) *probs_out = probs;
  return g.push(std::move(out), [qkv, batch, seq, heads, dim, hd, stride, scale,
                                 probs = std::move(probs)](Graph<T>& g, Var self) {
    const auto& d = g.grad(self);
    const auto& v = g.value(qkv);
    auto& gq = g.grad(qkv);
    std::vector<T> dp(seq);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* base = v.row(b * seq);
      T* gbase = gq.row(b * seq);
      for (std::size_t h = 0; h < heads; ++h) {
        const auto& p = probs[b * heads + h];
        for (std::size_t i = 0; i < seq; ++i) {
          const T* dout = d.row(b * seq + i) + h * hd;
          // dV_j += p_ij * dO_i ; dP_ij = dO_i . V_j
          T dot_pd = 0;
          for (std::size_t j = 0; j < seq; ++j) {
            T pij = p[i * seq + j];
            detail::axpy(pij, dout, gbase + j * stride + 2 * dim + h * hd, hd);
            dp[j] = detail::dot(dout, base + j * stride + 2 * dim + h * hd, hd);
            dot_pd += pij * dp[j];
          }
          const T* q = base + i * stride + h * hd;
          T* gqi = gbase + i * stride + h * hd;
          for (std::size_t j = 0; j < seq; ++j) {
            T ds = p[i * seq + j] * (dp[j] - dot_pd) * scale;
            if (ds == T(0)) continue;
            detail::axpy(ds, base + j * stride + dim + h * hd, gqi, hd);
            detail::axpy(ds, q, gbase + j * stride + dim + h * hd, hd);
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Row/column plumbing

template <class T>
Var gather_rows(Graph<T>& g, Var x, std::vector<std::size_t> rows) {
  const auto& vx = g.value(x);
  const std::size_t c = vx.cols();
  Tensor<T> out({rows.size(), c});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= vx.rows()) throw InvalidArgument("gather_rows: row index out of range");
    std::copy_n(vx.row(rows[r]), c, out.row(r));
  }
  return g.push(std::move(out), [x, rows = std::move(rows), c](Graph<T>& g, Var self) {
    const auto& d = g.grad(self);
    auto& gx = g.grad(x);
    for (std::size_t r = 0; r < rows.size(); ++r) detail::axpy(T(1), d.row(r), gx.row(rows[r]), c);
  });
}

template <class T>
Var concat_cols(Graph<T>& g, Var a, Var b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  if (va.rows() != vb.rows()) throw InvalidArgument("concat_cols: row count mismatch");
  const std::size_t m = va.rows(), ca = va.cols(), cb = vb.cols();
  Tensor<T> out({m, ca + cb});
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(va.row(r), ca, out.row(r));
    std::copy_n(vb.row(r), cb, out.row(r) + ca);
  }
  return g.push(std::move(out), [a, b, m, ca, cb](Graph<T>& g, Var self) {
    const auto& d = g.grad(self);
    auto& ga = g.grad(a);
    auto& gb = g.grad(b);
    for (std::size_t r = 0; r < m; ++r) {
      detail::axpy(T(1), d.row(r), ga.row(r), ca);
      detail::axpy(T(1), d.row(r) + ca, gb.row(r), cb);
    }
  });
}

template <class T>
Var mean_pair(Graph<T>& g, Var a, Var b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  if (va.shape != vb.shape) throw InvalidArgument("mean_pair: shape mismatch");
  Tensor<T> out(va.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = (va.data[i] + vb.data[i]) * T(0.5);
  return g.push(std::move(out), [a, b](Graph<T>& g, Var self) {
    const auto& d = g.grad(self).data;
    auto& ga = g.grad(a).data;
    for (std::size_t i = 0; i < d.size(); ++i) ga[i] += T(0.5) * d[i];
    auto& gb = g.grad(b).data;
    for (std::size_t i = 0; i < d.size(); ++i) gb[i] += T(0.5) * d[i];
  });
}

// Elementwise max; exact ties take the first operand (and its gradient).
template <class T>
Var max_pair(Graph<T>& g, Var a, Var b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  if (va.shape != vb.shape) throw InvalidArgument("max_pair: shape mismatch");
  Tensor<T> out(va.shape);
  std::vector<bool> from_a(out.numel());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    from_a[i] = va.data[i] >= vb.data[i];
    out.data[i] = from_a[i] ? va.data[i] : vb.data[i];
  }
  return g.push(std::move(out), [a, b, from_a = std::move(from_a)](Graph<T>& g, Var self) {
    const auto& d = g.grad(self).data;
    auto& ga = g.grad(a).data;
    auto& gb = g.grad(b).data;
    for (std::size_t i = 0; i < d.size(); ++i) (from_a[i] ? ga[i] : gb[i]) += d[i];
  });
}

// Row-wise x / max(||x||_2, eps). Each clamped row increments *clamped.
template <class T>
Var l2_normalize_rows(Graph<T>& g, Var x, T eps = T(1e-12), std::size_t* clamped = nullptr) {
  const auto& vx = g.value(x);
  const std::size_t m = vx.rows(), c = vx.cols();
  Tensor<T> out({m, c});
  std::vector<T> norms(m);
  std::vector<bool> clamp(m);
  for (std::size_t r = 0; r < m; ++r) {
    T n = std::sqrt(detail::dot(vx.row(r), vx.row(r), c));
    clamp[r] = !(n >= eps);
    if (clamp[r]) {
      n = eps;
      if (clamped) ++*clamped;
    }
    norms[r] = n;
    for (std::size_t j = 0; j < c; ++j) out(r, j) = vx(r, j) / n;
  }
  return g.push(std::move(out), [x, m, c, norms = std::move(norms),
                                 clamp = std::move(clamp)](Graph<T>& g, Var self) {
    const auto& d = g.grad(self);
    const auto& y = g.value(self);
    auto& gx = g.grad(x);
    for (std::size_t r = 0; r < m; ++r) {
      T proj = clamp[r] ? T(0) : detail::dot(y.row(r), d.row(r), c);
      for (std::size_t j = 0; j < c; ++j) gx(r, j) += (d(r, j) - y(r, j) * proj) / norms[r];
    }
  });
}

// Mean over the batch of -log softmax(logits)[label], max-shifted.
template <class T>
Var cross_entropy(Graph<T>& g, Var logits, std::span<const int> labels) {
  const auto& vl = g.value(logits);
  const std::size_t b = vl.rows(), c = vl.cols();
  if (labels.size() != b) throw InvalidArgument("cross_entropy: label count mismatch");
  Tensor<T> probs({b, c});
  T loss = 0;
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c)
      throw InvalidArgument("cross_entropy: label " + std::to_string(labels[r]) +
                            " out of range [0," + std::to_string(c) + ")");
    const T* lr = vl.row(r);
    T mx = *std::max_element(lr, lr + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(lr[j] - mx);
    for (std::size_t j = 0; j < c; ++j) probs(r, j) = std::exp(lr[j] - mx) / z;
    loss += std::log(z) - (lr[labels[r]] - mx);
  }
  loss /= T(b);
  std::vector<int> lab(labels.begin(), labels.end());
  return g.push(Tensor<T>({1}, loss), [logits, b, c, probs = std::move(probs),
                                      lab = std::move(lab)](Graph<T>& g, Var self) {
    T d = g.grad(self).data[0] / T(b);
    auto& gl = g.grad(logits);
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t j = 0; j < c; ++j)
        gl(r, j) += d * (probs(r, j) - (static_cast<int>(j) == lab[r] ? T(1) : T(0)));
  });
}

}  // namespace rgbdvit::nn
