#pragma once

// Named parameter registry. Layers ask for tensors by name during the first
// forward pass, which creates and initializes them; freeze() then locks the
// set so later passes can only look up, never invent. Keeps parameter
// discovery in one place and makes checkpoint round trips exact.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace dfft {

// Round a double to the nearest float32-representable value. Parameters and
// optimizer moments live on this grid so float32 checkpoints lose nothing.
inline double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

enum class Init { kTruncNormal, kZeros, kOnes };

class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  struct Entry {
    Shape shape;
    std::shared_ptr<std::vector<double>> val;
    std::shared_ptr<std::vector<double>> grad;
    bool got_nonzero_grad = false;
  };

  Tensor get(const std::string& name, const Shape& shape, Init init = Init::kTruncNormal) {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
      if (frozen_)
        throw StoreError("unknown parameter '" + name + "' requested after freeze");
      Entry e;
      e.shape = shape;
      auto n = static_cast<std::size_t>(shape_numel(shape));
      e.val = std::make_shared<std::vector<double>>(n);
      e.grad = std::make_shared<std::vector<double>>(n, 0.0);
      initialize(*e.val, init);
      it = entries_.emplace(name, std::move(e)).first;
      order_.push_back(name);
    } else if (it->second.shape != shape) {
      throw StoreError("parameter '" + name + "' requested with shape " + shape_str(shape) +
                       " but stored as " + shape_str(it->second.shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = it->second.shape;
    node->val = it->second.val;
    node->requires_grad = grad_enabled_;
    if (grad_enabled_) node->grad = it->second.grad;
    return Tensor(node);
  }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  void zero_grad() {
    for (auto& [name, e] : entries_) std::fill(e.grad->begin(), e.grad->end(), 0.0);
  }

  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return entries_.size(); }
  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw StoreError("no parameter named '" + name + "'");
    return it->second;
  }
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw StoreError("no parameter named '" + name + "'");
    return it->second;
  }

  std::int64_t total_scalars() const {
    std::int64_t n = 0;
    for (const auto& [name, e] : entries_) n += shape_numel(e.shape);
    return n;
  }

 private:
  void initialize(std::vector<double>& v, Init init) {
    switch (init) {
      case Init::kZeros:
        std::fill(v.begin(), v.end(), 0.0);
        break;
      case Init::kOnes:
        std::fill(v.begin(), v.end(), 1.0);
        break;
      case Init::kTruncNormal: {
        std::normal_distribution<double> dist(0.0, 0.02);
        for (auto& x : v) {
          double z;
          do {
            z = dist(rng_);
          } while (std::abs(z) > 0.04);
          x = to_f32(z);
        }
        break;
      }
    }
  }

  std::map<std::string, Entry> entries_;
  std::vector<std::string> order_;  // creation order, used for serialization
  std::mt19937_64 rng_;
  bool frozen_ = false;
  bool grad_enabled_ = true;
};

}  // namespace dfft
