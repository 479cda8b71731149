#pragma once

// AdamW with decoupled weight decay and global-norm gradient clipping.
// Parameters and both moment buffers are rounded to the float32 grid after
// every update so a reload from a float32 checkpoint continues bit-exactly.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "errors.hpp"
#include "param_store.hpp"

namespace dfft {

struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  std::int64_t t = 0;
  std::map<std::string, std::vector<double>> m, v;

  double grad_norm(const ParamStore& ps) const {
    double sq = 0.0;
    for (const auto& name : ps.names())
      for (double g : *ps.entry(name).grad) sq += g * g;
    return std::sqrt(sq);
  }

  // Scales all gradients so their global norm is at most max_norm; returns the
  // norm seen before scaling. max_norm 0 disables clipping.
  double clip_gradients(ParamStore& ps, double max_norm) const {
    double norm = grad_norm(ps);
    if (max_norm > 0.0 && norm > max_norm) {
      double scale = max_norm / norm;
      for (const auto& name : ps.names())
        for (double& g : *ps.entry(name).grad) g *= scale;
    }
    return norm;
  }

  void step(ParamStore& ps, double lr) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (const auto& name : ps.names()) {
      auto& e = ps.entry(name);
      auto n = e.val->size();
      auto& mm = m[name];
      auto& vv = v[name];
      if (mm.size() != n) mm.assign(n, 0.0);
      if (vv.size() != n) vv.assign(n, 0.0);
      auto& val = *e.val;
      const auto& grad = *e.grad;
      for (std::size_t i = 0; i < n; ++i) {
        double g = grad[i];
        if (g != 0.0) e.got_nonzero_grad = true;
        mm[i] = to_f32(beta1 * mm[i] + (1.0 - beta1) * g);
        vv[i] = to_f32(beta2 * vv[i] + (1.0 - beta2) * g * g);
        double mhat = mm[i] / bc1;
        double vhat = vv[i] / bc2;
        double x = val[i];
        x -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * x);
        val[i] = to_f32(x);
      }
    }
  }
};

// Names of parameters that never saw a nonzero gradient in any step so far.
inline std::vector<std::string> untouched_params(const ParamStore& ps) {
  std::vector<std::string> out;
  for (const auto& name : ps.names())
    if (!ps.entry(name).got_nonzero_grad) out.push_back(name);
  return out;
}

}  // namespace dfft
