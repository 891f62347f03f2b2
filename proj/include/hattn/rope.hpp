#pragma once

// Rotary positional encoding: consecutive pairs (2k, 2k+1) of each head
// vector are rotated by pos * theta_base^(-2k/d).

#include <cmath>
#include <vector>

#include "hattn/tensor.hpp"

namespace hattn {

template <typename R>
inline void rope_rotate_head(R* v, int d, double pos, double theta_base, bool inverse) {
  for (int k = 0; k * 2 < d; ++k) {
    const double freq = std::pow(theta_base, -2.0 * k / d);
    const double ang = pos * freq;
    const R c = static_cast<R>(std::cos(ang));
    const R s = static_cast<R>(inverse ? -std::sin(ang) : std::sin(ang));
    const R a = v[2 * k], b = v[2 * k + 1];
    v[2 * k] = a * c - b * s;
    v[2 * k + 1] = a * s + b * c;
  }
}

// x: [L x h x d], d even.
template <typename R>
inline Tensor<R> rope_apply(const Tensor<R>& x, const std::vector<int>& positions,
                            double theta_base) {
  require(x.rank() == 3, "rope_apply: expects [L x h x d]");
  const int L = x.dim(0), h = x.dim(1), d = x.dim(2);
  require(d % 2 == 0, "rope_apply: head dim must be even, got " + std::to_string(d));
  require(static_cast<int>(positions.size()) == L, "rope_apply: positions length mismatch");
  Tensor<R> y = x;
  for (int l = 0; l < L; ++l)
    for (int hh = 0; hh < h; ++hh)
      rope_rotate_head(&y(l, hh, 0), d, static_cast<double>(positions[static_cast<size_t>(l)]),
                       theta_base, false);
  return y;
}

// Rotation is orthogonal, so the gradient is the inverse rotation of dy.
template <typename R>
inline void rope_grad_acc(const Tensor<R>& dy, const std::vector<int>& positions,
                          double theta_base, Tensor<R>* dx) {
  const int L = dy.dim(0), h = dy.dim(1), d = dy.dim(2);
  std::vector<R> tmp(static_cast<size_t>(d));
  for (int l = 0; l < L; ++l)
    for (int hh = 0; hh < h; ++hh) {
      for (int j = 0; j < d; ++j) tmp[static_cast<size_t>(j)] = dy(l, hh, j);
      rope_rotate_head(tmp.data(), d, static_cast<double>(positions[static_cast<size_t>(l)]),
                       theta_base, true);
      for (int j = 0; j < d; ++j) (*dx)(l, hh, j) += tmp[static_cast<size_t>(j)];
    }
}

}  // namespace hattn
