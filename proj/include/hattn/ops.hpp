#pragma once

// Dense numeric primitives and their hand-written gradient counterparts.
// Gradient functions accumulate (+=) into their output tensors so callers can
// fan in several paths to the same buffer.

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "hattn/tensor.hpp"

namespace hattn {

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// c[m x n] (+)= a[m x k] * b[k x n].  i-k-j loop order: the inner j loop is a
// contiguous axpy, which vectorizes without FP reassociation.
template <typename R>
inline void matmul_acc(const R* a, const R* b, R* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const R* arow = a + static_cast<size_t>(i) * k;
    R* crow = c + static_cast<size_t>(i) * n;
    for (int x = 0; x < k; ++x) {
      const R av = arow[x];
      if (av == R(0)) continue;
      const R* brow = b + static_cast<size_t>(x) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] (+)= a[m x k] * b[n x k]^T  (b given row-major as [n x k]).
// b is transposed into a scratch buffer so the inner loop runs contiguous;
// the transpose is O(nk) against O(mnk) work.
template <typename R>
inline void matmul_nt_acc(const R* a, const R* b, R* c, int m, int k, int n) {
  std::vector<R> bt(static_cast<size_t>(k) * n);
  for (int j = 0; j < n; ++j)
    for (int x = 0; x < k; ++x) bt[static_cast<size_t>(x) * n + j] = b[static_cast<size_t>(j) * k + x];
  matmul_acc(a, bt.data(), c, m, k, n);
}

// c[m x n] (+)= a[k x m]^T * b[k x n]  (a given row-major as [k x m]).
template <typename R>
inline void matmul_tn_acc(const R* a, const R* b, R* c, int m, int k, int n) {
  for (int x = 0; x < k; ++x) {
    const R* arow = a + static_cast<size_t>(x) * m;
    const R* brow = b + static_cast<size_t>(x) * n;
    for (int i = 0; i < m; ++i) {
      const R av = arow[i];
      if (av == R(0)) continue;
      R* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename R>
inline Tensor<R> matmul(const Tensor<R>& a, const Tensor<R>& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul: expects rank-2 tensors");
  require(a.dim(1) == b.dim(0),
          "matmul: inner dimensions differ, " + a.shape_str() + " vs " + b.shape_str());
  Tensor<R> c({a.dim(0), b.dim(1)});
  matmul_acc(a.ptr(), b.ptr(), c.ptr(), a.dim(0), a.dim(1), b.dim(1));
  assert_finite(c, "matmul");
  return c;
}

// Accumulates dA += dC * B^T and dB += A^T * dC.
template <typename R>
inline void matmul_grad_acc(const Tensor<R>& dc, const Tensor<R>& a, const Tensor<R>& b,
                            Tensor<R>* da, Tensor<R>* db) {
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(dc.dim(0) == m && dc.dim(1) == n, "matmul_grad: dC shape mismatch");
  if (da) matmul_nt_acc(dc.ptr(), b.ptr(), da->ptr(), m, n, k);
  if (db) matmul_tn_acc(a.ptr(), dc.ptr(), db->ptr(), k, m, n);
}

template <typename R>
inline std::pair<Tensor<R>, Tensor<R>> matmul_grad(const Tensor<R>& dc, const Tensor<R>& a,
                                                   const Tensor<R>& b) {
  Tensor<R> da(a.shape), db(b.shape);
  matmul_grad_acc(dc, a, b, &da, &db);
  return {std::move(da), std::move(db)};
}

// ---------------------------------------------------------------------------
// masked row softmax
// ---------------------------------------------------------------------------

// Row-wise softmax over visible entries; hidden entries are exactly zero.
// Stabilized by max subtraction over the visible set.
template <typename R>
inline Tensor<R> softmax_row(const Tensor<R>& x, const std::vector<uint8_t>& visible) {
  require(x.numel() == visible.size(), "softmax_row: mask length mismatch");
  const int n = x.shape.back();
  const int rows = x.rows();
  Tensor<R> y(x.shape);
  for (int i = 0; i < rows; ++i) {
    const R* xr = x.row(i);
    const uint8_t* vr = visible.data() + static_cast<size_t>(i) * n;
    R m = -std::numeric_limits<R>::infinity();
    bool any = false;
    for (int j = 0; j < n; ++j)
      if (vr[j]) {
        any = true;
        m = std::max(m, xr[j]);
      }
    if (!any) throw numeric_error("softmax_row: fully hidden row " + std::to_string(i));
    R z = 0;
    R* yr = y.row(i);
    for (int j = 0; j < n; ++j) {
      if (vr[j]) {
        yr[j] = std::exp(xr[j] - m);
        z += yr[j];
      } else {
        yr[j] = R(0);
      }
    }
    const R inv = R(1) / z;
    for (int j = 0; j < n; ++j) yr[j] *= inv;
  }
  assert_finite(y, "softmax_row");
  return y;
}

// dx from dy for y = softmax_row(x, visible): dx_j = y_j * (dy_j - sum_k y_k dy_k).
template <typename R>
inline void softmax_row_grad_acc(const Tensor<R>& dy, const Tensor<R>& y, Tensor<R>* dx) {
  const int n = y.shape.back();
  const int rows = y.rows();
  for (int i = 0; i < rows; ++i) {
    const R* yr = y.row(i);
    const R* dyr = dy.row(i);
    R dot = 0;
    for (int j = 0; j < n; ++j) dot += yr[j] * dyr[j];
    R* dxr = dx->row(i);
    for (int j = 0; j < n; ++j) dxr[j] += yr[j] * (dyr[j] - dot);
  }
}

// ---------------------------------------------------------------------------
// rmsnorm / l2 normalize
// ---------------------------------------------------------------------------

template <typename R>
inline void rmsnorm_row(const R* x, const R* gamma, R eps, int d, R* y) {
  R ss = 0;
  for (int j = 0; j < d; ++j) ss += x[j] * x[j];
  const R r = R(1) / std::sqrt(ss / d + eps);
  for (int j = 0; j < d; ++j) y[j] = x[j] * r * gamma[j];
}

template <typename R>
inline Tensor<R> rmsnorm(const Tensor<R>& x, const Tensor<R>& gamma, R eps) {
  const int d = x.shape.back();
  require(gamma.rank() == 1 && gamma.dim(0) == d, "rmsnorm: gamma dim mismatch");
  require(eps > R(0), "rmsnorm: eps must be positive");
  Tensor<R> y(x.shape);
  for (int i = 0; i < x.rows(); ++i) rmsnorm_row(x.row(i), gamma.ptr(), eps, d, y.row(i));
  assert_finite(y, "rmsnorm");
  return y;
}

template <typename R>
inline void rmsnorm_row_grad(const R* dy, const R* x, const R* gamma, R eps, int d, R* dx,
                             R* dgamma) {
  R ss = 0;
  for (int j = 0; j < d; ++j) ss += x[j] * x[j];
  const R ms = ss / d + eps;
  const R r = R(1) / std::sqrt(ms);
  // y_j = gamma_j * x_j * r;  r depends on all of x.
  R dot = 0;  // sum_j dy_j * gamma_j * x_j
  for (int j = 0; j < d; ++j) dot += dy[j] * gamma[j] * x[j];
  const R k = dot * r * r * r / d;  // d r/d x_j = -x_j r^3 / d
  for (int j = 0; j < d; ++j) {
    if (dx) dx[j] += dy[j] * gamma[j] * r - k * x[j];
    if (dgamma) dgamma[j] += dy[j] * x[j] * r;
  }
}

template <typename R>
inline void rmsnorm_grad_acc(const Tensor<R>& dy, const Tensor<R>& x, const Tensor<R>& gamma,
                             R eps, Tensor<R>* dx, Tensor<R>* dgamma) {
  const int d = x.shape.back();
  for (int i = 0; i < x.rows(); ++i)
    rmsnorm_row_grad(dy.row(i), x.row(i), gamma.ptr(), eps, d, dx ? dx->row(i) : nullptr,
                     dgamma ? dgamma->ptr() : nullptr);
}

template <typename R>
inline void l2_normalize_row(const R* x, R eps, int d, R* y) {
  R ss = 0;
  for (int j = 0; j < d; ++j) ss += x[j] * x[j];
  const R inv = R(1) / (std::sqrt(ss) + eps);
  for (int j = 0; j < d; ++j) y[j] = x[j] * inv;
}

template <typename R>
inline Tensor<R> l2_normalize(const Tensor<R>& x, R eps) {
  require(eps > R(0), "l2_normalize: eps must be positive");
  const int d = x.shape.back();
  Tensor<R> y(x.shape);
  for (int i = 0; i < x.rows(); ++i) l2_normalize_row(x.row(i), eps, d, y.row(i));
  assert_finite(y, "l2_normalize");
  return y;
}

template <typename R>
inline void l2_normalize_row_grad(const R* dy, const R* x, R eps, int d, R* dx) {
  R ss = 0;
  for (int j = 0; j < d; ++j) ss += x[j] * x[j];
  const R nrm = std::sqrt(ss);
  const R s = nrm + eps;
  R dot = 0;
  for (int j = 0; j < d; ++j) dot += dy[j] * x[j];
  // y = x / s, ds/dx_j = x_j / nrm (0 at the origin).
  const R k = nrm > R(0) ? dot / (nrm * s * s) : R(0);
  for (int j = 0; j < d; ++j) dx[j] += dy[j] / s - k * x[j];
}

template <typename R>
inline void l2_normalize_grad_acc(const Tensor<R>& dy, const Tensor<R>& x, R eps, Tensor<R>* dx) {
  const int d = x.shape.back();
  for (int i = 0; i < x.rows(); ++i) l2_normalize_row_grad(dy.row(i), x.row(i), eps, d, dx->row(i));
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

enum class Act { Silu, Sigmoid, Softplus };

template <typename R>
inline R sigmoid_s(R x) {
  return x >= R(0) ? R(1) / (R(1) + std::exp(-x)) : std::exp(x) / (R(1) + std::exp(x));
}

template <typename R>
inline R softplus_s(R x) {
  // log(1 + e^x), overflow-safe
  return x > R(30) ? x : std::log1p(std::exp(x));
}

template <typename R>
inline R activation_s(Act kind, R x) {
  switch (kind) {
    case Act::Silu: return x * sigmoid_s(x);
    case Act::Sigmoid: return sigmoid_s(x);
    case Act::Softplus: return softplus_s(x);
  }
  return R(0);
}

template <typename R>
inline R activation_deriv_s(Act kind, R x) {
  const R s = sigmoid_s(x);
  switch (kind) {
    case Act::Silu: return s * (R(1) + x * (R(1) - s));
    case Act::Sigmoid: return s * (R(1) - s);
    case Act::Softplus: return s;
  }
  return R(0);
}

template <typename R>
inline Tensor<R> activation(Act kind, const Tensor<R>& x) {
  Tensor<R> y(x.shape);
  for (size_t i = 0; i < x.data.size(); ++i) y.data[i] = activation_s(kind, x.data[i]);
  assert_finite(y, "activation");
  return y;
}

template <typename R>
inline void activation_grad_acc(Act kind, const Tensor<R>& dy, const Tensor<R>& x, Tensor<R>* dx) {
  for (size_t i = 0; i < x.data.size(); ++i)
    dx->data[i] += dy.data[i] * activation_deriv_s(kind, x.data[i]);
}

// ---------------------------------------------------------------------------
// depthwise causal conv
// ---------------------------------------------------------------------------

// y[t,c] = sum_j kernels[c,j] * x[t-kw+1+j, c], with the left context taken
// from `tail` ([kw-1 x d], oldest first) or zeros when tail is null.
template <typename R>
inline Tensor<R> depthwise_causal_conv(const Tensor<R>& x, const Tensor<R>& kernels,
                                       const Tensor<R>* tail) {
  require(x.rank() == 2 && kernels.rank() == 2, "conv: expects rank-2 tensors");
  const int L = x.dim(0), d = x.dim(1), kw = kernels.dim(1);
  require(kernels.dim(0) == d, "conv: kernel channel count mismatch");
  require(kw >= 1, "conv: kernel width must be >= 1");
  if (tail)
    require(tail->rank() == 2 && tail->dim(0) == kw - 1 && tail->dim(1) == d,
            "conv: tail shape mismatch, want [" + std::to_string(kw - 1) + " x " +
                std::to_string(d) + "], got " + tail->shape_str());
  Tensor<R> y({L, d});
  for (int t = 0; t < L; ++t) {
    R* yr = y.row(t);
    for (int j = 0; j < kw; ++j) {
      const int src = t - kw + 1 + j;
      const R* xr;
      if (src >= 0) {
        xr = x.row(src);
      } else if (tail) {
        xr = tail->row(src + (kw - 1));
      } else {
        continue;  // zero left padding
      }
      for (int ch = 0; ch < d; ++ch) yr[ch] += kernels(ch, j) * xr[ch];
    }
  }
  assert_finite(y, "depthwise_causal_conv");
  return y;
}

// Training-mode gradient (zero left padding).
template <typename R>
inline void depthwise_causal_conv_grad_acc(const Tensor<R>& dy, const Tensor<R>& x,
                                           const Tensor<R>& kernels, Tensor<R>* dx,
                                           Tensor<R>* dkernels) {
  const int L = x.dim(0), d = x.dim(1), kw = kernels.dim(1);
  for (int t = 0; t < L; ++t) {
    const R* dyr = dy.row(t);
    for (int j = 0; j < kw; ++j) {
      const int src = t - kw + 1 + j;
      if (src < 0) continue;
      const R* xr = x.row(src);
      R* dxr = dx ? dx->row(src) : nullptr;
      for (int ch = 0; ch < d; ++ch) {
        if (dkernels) (*dkernels)(ch, j) += dyr[ch] * xr[ch];
        if (dxr) dxr[ch] += dyr[ch] * kernels(ch, j);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// chunk mean pooling
// ---------------------------------------------------------------------------

template <typename R>
inline Tensor<R> mean_pool_chunks(const Tensor<R>& x, int C) {
  require(x.rank() == 2, "mean_pool_chunks: expects [L x d]");
  const int L = x.dim(0), d = x.dim(1);
  require(C >= 1 && L % C == 0,
          "mean_pool_chunks: L=" + std::to_string(L) + " not divisible by C=" + std::to_string(C) +
              "; pad the input to a chunk boundary first");
  Tensor<R> m({L / C, d});
  for (int t = 0; t < L / C; ++t) {
    R* mr = m.row(t);
    for (int i = 0; i < C; ++i) {
      const R* xr = x.row(t * C + i);
      for (int j = 0; j < d; ++j) mr[j] += xr[j];
    }
    for (int j = 0; j < d; ++j) mr[j] /= R(C);
  }
  return m;
}

template <typename R>
inline void mean_pool_chunks_grad_acc(const Tensor<R>& dm, int C, Tensor<R>* dx) {
  const int T = dm.dim(0), d = dm.dim(1);
  for (int t = 0; t < T; ++t) {
    const R* dmr = dm.row(t);
    for (int i = 0; i < C; ++i) {
      R* dxr = dx->row(t * C + i);
      for (int j = 0; j < d; ++j) dxr[j] += dmr[j] / R(C);
    }
  }
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

// Mean negative log-softmax over positions whose target != ignore.
template <typename R>
inline R cross_entropy(const Tensor<R>& logits, const std::vector<int>& targets, int ignore,
                       int* scored_out = nullptr) {
  require(logits.rank() == 2, "cross_entropy: expects [L x V]");
  const int L = logits.dim(0), V = logits.dim(1);
  require(static_cast<int>(targets.size()) == L, "cross_entropy: target length mismatch");
  double total = 0;
  int scored = 0;
  for (int i = 0; i < L; ++i) {
    const int t = targets[static_cast<size_t>(i)];
    if (t == ignore) continue;
    require(t >= 0 && t < V, "cross_entropy: target out of range at position " + std::to_string(i));
    const R* lr = logits.row(i);
    R m = lr[0];
    for (int v = 1; v < V; ++v) m = std::max(m, lr[v]);
    double z = 0;
    for (int v = 0; v < V; ++v) z += std::exp(static_cast<double>(lr[v] - m));
    total += std::log(z) - static_cast<double>(lr[t] - m);
    ++scored;
  }
  if (scored == 0) throw dim_error("cross_entropy: every position is ignored");
  if (scored_out) *scored_out = scored;
  return static_cast<R>(total / scored);
}

// dlogits for the mean-reduced loss, scaled by `weight` (use 1/batch for
// multi-sequence batches where `scored` counts the whole batch).
template <typename R>
inline void cross_entropy_grad_acc(const Tensor<R>& logits, const std::vector<int>& targets,
                                   int ignore, int scored, Tensor<R>* dlogits, R weight = R(1)) {
  const int L = logits.dim(0), V = logits.dim(1);
  for (int i = 0; i < L; ++i) {
    const int t = targets[static_cast<size_t>(i)];
    if (t == ignore) continue;
    const R* lr = logits.row(i);
    R* dr = dlogits->row(i);
    R m = lr[0];
    for (int v = 1; v < V; ++v) m = std::max(m, lr[v]);
    R z = 0;
    for (int v = 0; v < V; ++v) z += std::exp(lr[v] - m);
    const R inv = weight / (z * static_cast<R>(scored));
    for (int v = 0; v < V; ++v) dr[v] += std::exp(lr[v] - m) * inv;
    dr[t] -= weight / static_cast<R>(scored);
  }
}

}  // namespace hattn
