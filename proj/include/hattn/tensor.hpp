#pragma once

// Dense row-major tensor (rank <= 4) over float or double, plus the named
// parameter/gradient store every module shares.

#include <cstddef>
#include <initializer_list>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hattn/common.hpp"

namespace hattn {

template <typename R>
struct Tensor {
  std::vector<int> shape;
  std::vector<R> data;

  Tensor() = default;

  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    require(shape.size() >= 1 && shape.size() <= 4, "tensor rank must be 1..4");
    size_t n = 1;
    for (int d : shape) {
      require(d > 0, "tensor dims must be positive");
      n *= static_cast<size_t>(d);
    }
    data.assign(n, R(0));
  }

  Tensor(std::vector<int> s, std::vector<R> values) : shape(std::move(s)), data(std::move(values)) {
    require(numel() == data.size(), "tensor data length does not match shape");
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int> s, R v) {
    Tensor t(std::move(s));
    for (R& x : t.data) x = v;
    return t;
  }

  size_t numel() const {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
  }

  int rank() const { return static_cast<int>(shape.size()); }

  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  R* ptr() { return data.data(); }
  const R* ptr() const { return data.data(); }

  R& operator()(int i) { return data[static_cast<size_t>(i)]; }
  const R& operator()(int i) const { return data[static_cast<size_t>(i)]; }

  R& operator()(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
  const R& operator()(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }

  R& operator()(int i, int j, int k) {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  const R& operator()(int i, int j, int k) const {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  R& operator()(int i, int j, int k, int l) {
    return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  const R& operator()(int i, int j, int k, int l) const {
    return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }

  // Row pointer treating the tensor as [rows x last_dim].
  R* row(int i) { return data.data() + static_cast<size_t>(i) * shape.back(); }
  const R* row(int i) const { return data.data() + static_cast<size_t>(i) * shape.back(); }

  int rows() const { return static_cast<int>(numel()) / shape.back(); }

  void fill(R v) {
    for (R& x : data) x = v;
  }

  void zero() { fill(R(0)); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }
};

template <typename R>
inline bool all_finite(const Tensor<R>& t) {
  for (R v : t.data)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

// Debug-mode assertion, active only when finite_checks() is on.
template <typename R>
inline void assert_finite(const Tensor<R>& t, const char* where) {
  if (!finite_checks()) return;
  if (!all_finite(t)) throw numeric_error(std::string("non-finite values after ") + where);
}

template <typename R>
struct Param {
  Tensor<R> value;
  Tensor<R> grad;

  Param() = default;
  explicit Param(Tensor<R> v) : value(std::move(v)), grad(Tensor<R>::zeros(value.shape)) {}
};

// Named parameters with paired gradient accumulators. std::map keeps the
// iteration order deterministic (checkpoints, optimizer, FD sampling).
template <typename R>
struct ParamStore {
  std::map<std::string, Param<R>> entries;

  Param<R>& add(const std::string& name, Tensor<R> value) {
    require(!entries.count(name), "duplicate parameter name: " + name);
    auto [it, ok] = entries.emplace(name, Param<R>(std::move(value)));
    (void)ok;
    return it->second;
  }

  Param<R>& at(const std::string& name) {
    auto it = entries.find(name);
    require(it != entries.end(), "unknown parameter: " + name);
    return it->second;
  }

  const Param<R>& at(const std::string& name) const {
    auto it = entries.find(name);
    require(it != entries.end(), "unknown parameter: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return entries.count(name) != 0; }

  void zero_grads() {
    for (auto& [name, p] : entries) p.grad.zero();
  }

  size_t total_params() const {
    size_t n = 0;
    for (const auto& [name, p] : entries) n += p.value.numel();
    return n;
  }
};

}  // namespace hattn
