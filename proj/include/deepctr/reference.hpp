#pragma once

// Straightforward serial versions of the parallel kernels. They are slow on
// purpose: tests use them as oracles and the bench target measures the gap.

#include <cstddef>

#include "deepctr/layers.hpp"
#include "deepctr/tensor.hpp"

namespace deepctr::reference {

/// Triple loop, i-j-p order.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor dense_fc_forward(const Tensor& x, const LayerParams& p);

/// Direct sliding window, no im2col.
Tensor conv2d_forward(const Tensor& x, const LayerParams& p, std::size_t stride, std::size_t pad);

}  // namespace deepctr::reference
