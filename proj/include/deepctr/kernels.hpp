#pragma once

// OpenMP-parallel dense kernels. Every output element is produced by exactly
// one thread with a fixed summation order, so results do not depend on the
// thread count. Serial reference versions live in reference.hpp.

#include <cstddef>

#include "deepctr/tensor.hpp"

namespace deepctr::kernels {

/// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);

/// C[m x n] += A^T * B with A stored as [k x m]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);

/// C[m x n] += A * B^T with B stored as [n x k]
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);

void transpose(std::size_t rows, std::size_t cols, const double* in, double* out);

/// Row-major product of two rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w;
  std::size_t stride, pad;

  std::size_t out_h() const { return (height + 2 * pad - kernel_h) / stride + 1; }
  std::size_t out_w() const { return (width + 2 * pad - kernel_w) / stride + 1; }
  std::size_t patch() const { return channels * kernel_h * kernel_w; }
};

/// col[patch x out_h*out_w] from one image [channels x height x width].
void im2col(const ConvGeometry& g, const double* image, double* col);
/// Scatter-add of col back into image (adjoint of im2col).
void col2im(const ConvGeometry& g, const double* col, double* image);

}  // namespace deepctr::kernels
