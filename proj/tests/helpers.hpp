#pragma once

// Shared test machinery: deterministic random tensors, scalarizing losses,
// and central-difference gradient checking against the autodiff backward.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dfft/param_store.hpp"
#include "dfft/tensor.hpp"

namespace dtest {

inline dfft::Tensor rand_tensor(dfft::Shape shape, std::uint64_t seed, double lo = -1.0,
                                double hi = 1.0, bool requires_grad = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  auto n = static_cast<std::size_t>(dfft::shape_numel(shape));
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return dfft::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Fixed-weight scalarization. Spreads gradient signal across every output
// element so a single backward exercises the whole op.
inline dfft::Tensor weighted_sum(const dfft::Tensor& y, std::uint64_t seed = 1234) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> w(static_cast<std::size_t>(y.numel()));
  for (auto& x : w) x = dist(rng);
  auto wt = dfft::Tensor::from(y.shape(), std::move(w));
  return dfft::sum_all(dfft::mul(y, wt));
}

inline void zero_tensor_grad(const dfft::Tensor& t) {
  auto n = t.node();
  if (n->grad) std::fill(n->grad->begin(), n->grad->end(), 0.0);
}

struct FdReport {
  double max_rel = 0.0;
  std::string worst;  // "leaf3[17]" or parameter name plus index
};

inline double fd_rel(double analytic, double numeric) {
  double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-2});
  return std::abs(analytic - numeric) / denom;
}

// Picks up to max_count probe indices spread over [0, n).
inline std::vector<std::size_t> probe_indices(std::size_t n, std::size_t max_count) {
  std::vector<std::size_t> out;
  if (n == 0) return out;
  if (max_count >= n) {
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = i;
    return out;
  }
  for (std::size_t i = 0; i < max_count; ++i) out.push_back(i * n / max_count);
  return out;
}

// Central differences on explicit graph leaves. `build` must construct the
// loss from current leaf values each call.
inline FdReport fd_check_leaves(const std::vector<dfft::Tensor>& leaves,
                                const std::function<dfft::Tensor()>& build, double h = 1e-4,
                                std::size_t max_per_leaf = 1u << 30) {
  for (const auto& t : leaves) zero_tensor_grad(t);
  auto loss = build();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& t : leaves) analytic.push_back(t.grad());

  FdReport rep;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& data = const_cast<std::vector<double>&>(leaves[li].data());
    for (auto i : probe_indices(data.size(), max_per_leaf)) {
      double saved = data[i];
      data[i] = saved + h;
      double fp = build().item();
      data[i] = saved - h;
      double fm = build().item();
      data[i] = saved;
      double numeric = (fp - fm) / (2.0 * h);
      double rel = fd_rel(analytic[li][i], numeric);
      if (rel > rep.max_rel) {
        rep.max_rel = rel;
        rep.worst = "leaf" + std::to_string(li) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

// Central differences on every parameter in a store. The builder runs the
// module forward and returns a scalar; the store must already be frozen.
inline FdReport fd_check_params(dfft::ParamStore& ps, const std::function<dfft::Tensor()>& build,
                                double h = 1e-4, std::size_t max_per_param = 1u << 30) {
  ps.zero_grad();
  auto loss = build();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& name : ps.names()) analytic.push_back(*ps.entry(name).grad);

  FdReport rep;
  std::size_t pi = 0;
  for (const auto& name : ps.names()) {
    auto& data = *ps.entry(name).val;
    for (auto i : probe_indices(data.size(), max_per_param)) {
      double saved = data[i];
      data[i] = saved + h;
      double fp = build().item();
      data[i] = saved - h;
      double fm = build().item();
      data[i] = saved;
      double numeric = (fp - fm) / (2.0 * h);
      double rel = fd_rel(analytic[pi][i], numeric);
      if (rel > rep.max_rel) {
        rep.max_rel = rel;
        rep.worst = name + "[" + std::to_string(i) + "]";
      }
    }
    ++pi;
  }
  return rep;
}

}  // namespace dtest
