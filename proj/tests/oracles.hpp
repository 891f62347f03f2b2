#pragma once

// Independent references used only by tests: a naive O(L^2) dense attention
// with a continuous mask tensor, a step-by-step recurrent reference for the
// gated delta rule (with routing and a continuous commit gate), and central
// finite differences. None of these share code with the kernels they check.

#include <cmath>
#include <functional>
#include <vector>

#include "hattn/gdn.hpp"
#include "hattn/router.hpp"
#include "hattn/tensor.hpp"

namespace oracle {

using hattn::ChunkRouting;
using hattn::OpChoice;
using hattn::Rng;
using hattn::Tensor;

template <typename R>
inline void fill_normal(Tensor<R>& t, Rng& rng, double std = 1.0) {
  for (R& v : t.data) v = static_cast<R>(rng.normal() * std);
}

inline double rel_err(double a, double b, double floor = 1e-9) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

template <typename R>
inline double max_abs_diff(const Tensor<R>& a, const Tensor<R>& b) {
  double m = 0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  return m;
}

// Central difference d f / d x.
inline double central_diff(const std::function<double()>& f, double* x, double h) {
  const double x0 = *x;
  *x = x0 + h;
  const double fp = f();
  *x = x0 - h;
  const double fm = f();
  *x = x0;
  return (fp - fm) / (2.0 * h);
}

// Dense masked attention with a continuous mask M[g][i][j] (>=0). Q,K,V:
// [L x h x d]. Softmax normalizes by the mask-weighted exponential sum.
template <typename R>
inline Tensor<R> dense_masked_attention(const Tensor<R>& Q, const Tensor<R>& K, const Tensor<R>& V,
                                        const std::vector<Tensor<R>>& M,
                                        const std::vector<int>& group_of_head) {
  const int L = Q.dim(0), h = Q.dim(1), d = Q.dim(2);
  const R scale = R(1) / std::sqrt(static_cast<R>(d));
  Tensor<R> O({L, h, d});
  for (int hh = 0; hh < h; ++hh) {
    const Tensor<R>& m = M[static_cast<size_t>(group_of_head[static_cast<size_t>(hh)])];
    for (int i = 0; i < L; ++i) {
      double z = 0;
      std::vector<double> w(static_cast<size_t>(L), 0.0);
      for (int j = 0; j < L; ++j) {
        double a = 0;
        for (int x = 0; x < d; ++x)
          a += static_cast<double>(Q(i, hh, x)) * static_cast<double>(K(j, hh, x));
        w[static_cast<size_t>(j)] = std::exp(a * scale) * static_cast<double>(m(i, j));
        z += w[static_cast<size_t>(j)];
      }
      for (int j = 0; j < L; ++j) {
        const double p = w[static_cast<size_t>(j)] / z;
        for (int x = 0; x < d; ++x)
          O(i, hh, x) += static_cast<R>(p * static_cast<double>(V(j, hh, x)));
      }
    }
  }
  return O;
}

// 0/1 mask tensors realizing the column-chunk visibility rule.
template <typename R>
inline std::vector<Tensor<R>> masks_from_routing(const ChunkRouting& r, int C, int L,
                                                 bool include_diagonal = true) {
  std::vector<Tensor<R>> M;
  for (int g = 0; g < r.n_groups; ++g) {
    Tensor<R> m({L, L});
    for (int i = 0; i < L; ++i)
      for (int j = 0; j <= i; ++j) {
        const int ti = i / C, tj = j / C;
        if (ti == tj) {
          if (include_diagonal) m(i, j) = R(1);
        } else if (r.at(g, tj) == OpChoice::Softmax) {
          m(i, j) = R(1);
        }
      }
    M.push_back(std::move(m));
  }
  return M;
}

// Token-by-token routed reference for the gated delta rule. Per chunk the
// tentative state evolves with every write; at the boundary a linear chunk
// commits `base + gate * (tentative - base)` and a softmax chunk commits the
// decay-only base. gates == nullptr means gate = 1.
template <typename R>
struct RecurrentResult {
  Tensor<R> O;                       // [L x h x d_v]
  std::vector<Tensor<R>> boundaries; // committed state per chunk boundary
};

template <typename R>
inline RecurrentResult<R> recurrent_reference(const Tensor<R>& Q, const Tensor<R>& K,
                                              const Tensor<R>& V, const Tensor<R>& alpha,
                                              const Tensor<R>& beta, const ChunkRouting& routing,
                                              int C, const Tensor<R>* S0, bool always_decay = true,
                                              bool inner_output = true,
                                              const Tensor<R>* gates = nullptr) {
  const int L = Q.dim(0), h = Q.dim(1), d_k = Q.dim(2), d_v = V.dim(2);
  const int T = L / C;
  RecurrentResult<R> res;
  res.O = Tensor<R>({L, h, d_v});
  for (int t = 0; t <= T; ++t) res.boundaries.push_back(Tensor<R>({h, d_v, d_k}));

  std::vector<R> S(static_cast<size_t>(d_v) * d_k), S_tmp(S.size()), S_new(S.size());
  std::vector<R> o(static_cast<size_t>(d_v));
  for (int head = 0; head < h; ++head) {
    if (S0)
      for (int a = 0; a < d_v; ++a)
        for (int b = 0; b < d_k; ++b) S[static_cast<size_t>(a) * d_k + b] = (*S0)(head, a, b);
    else
      std::fill(S.begin(), S.end(), R(0));
    for (int t = 0; t < T; ++t) {
      for (int a = 0; a < d_v; ++a)
        for (int b = 0; b < d_k; ++b)
          res.boundaries[static_cast<size_t>(t)](head, a, b) = S[static_cast<size_t>(a) * d_k + b];
      S_tmp = S;
      R decay = R(1);
      for (int i = t * C; i < t * C + C; ++i) {
        hattn::gdn_recurrent_step(S_tmp.data(), &Q(i, head, 0), &K(i, head, 0), &V(i, head, 0),
                                  alpha(i, head), beta(i, head), d_k, d_v, o.data(), S_new.data());
        S_tmp = S_new;
        decay *= alpha(i, head);
        if (inner_output) {
          for (int a = 0; a < d_v; ++a) res.O(i, head, a) = o[static_cast<size_t>(a)];
        } else {
          for (int a = 0; a < d_v; ++a) {
            R acc = 0;
            for (int b = 0; b < d_k; ++b) acc += S[static_cast<size_t>(a) * d_k + b] * Q(i, head, b);
            res.O(i, head, a) = decay * acc;
          }
        }
      }
      std::vector<R> base = S;
      if (always_decay)
        for (R& v : base) v *= decay;
      if (routing.at(head, t) == OpChoice::Linear) {
        const R g = gates ? (*gates)(head, t) : R(1);
        for (size_t idx = 0; idx < S.size(); ++idx)
          S[idx] = base[idx] + g * (S_tmp[idx] - base[idx]);
      } else {
        S = base;
      }
    }
    for (int a = 0; a < d_v; ++a)
      for (int b = 0; b < d_k; ++b)
        res.boundaries[static_cast<size_t>(T)](head, a, b) = S[static_cast<size_t>(a) * d_k + b];
  }
  return res;
}

}  // namespace oracle
