#pragma once

// A spatial tensor plus the stride it lives at relative to the input image.

#include <cstdint>

#include "errors.hpp"
#include "tensor.hpp"

namespace dfft {

struct FeatureMap {
  Tensor data;  // [batch, h, w, channels]
  int stride = 1;

  FeatureMap() = default;
  FeatureMap(Tensor t, int stride_) : data(std::move(t)), stride(stride_) {
    if (data.ndim() != 4)
      throw ShapeError("feature map must be 4-d, got " + shape_str(data.shape()));
    for (int i = 0; i < 4; ++i)
      if (data.dim(i) < 1) throw DimensionError("feature map axis " + std::to_string(i) + " is empty");
    if (stride < 1 || (stride & (stride - 1)) != 0)
      throw ValueError("feature map stride must be a positive power of two, got " +
                       std::to_string(stride));
  }

  std::int64_t batch() const { return data.dim(0); }
  std::int64_t height() const { return data.dim(1); }
  std::int64_t width() const { return data.dim(2); }
  std::int64_t channels() const { return data.dim(3); }
};

}  // namespace dfft
