#include "deepctr/sparse.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace deepctr {

void SparseBatch::append_row(std::span<const SparseEntry> row) {
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (row[i].index >= dim) {
      throw std::invalid_argument("SparseBatch: index " + std::to_string(row[i].index) + " >= dim " +
                                  std::to_string(dim));
    }
    if (i > 0 && row[i].index <= row[i - 1].index) {
      throw std::invalid_argument(row[i].index == row[i - 1].index
                                      ? "SparseBatch: duplicate index " + std::to_string(row[i].index)
                                      : std::string("SparseBatch: row indices not sorted"));
    }
  }
  for (const auto& e : row) {
    col_indices.push_back(e.index);
    values.push_back(e.value);
  }
  row_offsets.push_back(col_indices.size());
  ++num_rows;
}

void SparseBatch::validate() const {
  if (row_offsets.size() != num_rows + 1 || row_offsets.front() != 0 || row_offsets.back() != col_indices.size() ||
      values.size() != col_indices.size()) {
    throw std::invalid_argument("SparseBatch: inconsistent offsets");
  }
  for (std::size_t r = 0; r < num_rows; ++r) {
    if (row_offsets[r + 1] < row_offsets[r]) throw std::invalid_argument("SparseBatch: offsets decrease");
    for (std::size_t i = row_offsets[r]; i < row_offsets[r + 1]; ++i) {
      if (col_indices[i] >= dim) throw std::invalid_argument("SparseBatch: index out of range");
      if (i > row_offsets[r] && col_indices[i] <= col_indices[i - 1]) {
        throw std::invalid_argument("SparseBatch: row indices not strictly increasing");
      }
    }
  }
}

SparseBatch csr_from_rows(const std::vector<SparseRow>& rows, std::size_t dim) {
  SparseBatch out(dim);
  SparseRow sorted;
  for (const auto& row : rows) {
    sorted = row;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
    out.append_row(sorted);
  }
  return out;
}

Tensor densify(const SparseBatch& v) {
  Tensor d({v.num_rows, v.dim});
  for (std::size_t r = 0; r < v.num_rows; ++r) {
    const auto idx = v.row_indices(r);
    const auto val = v.row_values(r);
    for (std::size_t i = 0; i < idx.size(); ++i) d.at(r, idx[i]) = val[i];
  }
  return d;
}

SparseBatch sparsify(const Tensor& dense) {
  require_rank(dense, 2, "sparsify");
  SparseBatch out(dense.dim(1));
  SparseRow row;
  for (std::size_t r = 0; r < dense.dim(0); ++r) {
    row.clear();
    for (std::size_t j = 0; j < dense.dim(1); ++j)
      if (dense.at(r, j) != 0.0) row.push_back({j, dense.at(r, j)});
    out.append_row(row);
  }
  return out;
}

Tensor sparse_fc_forward(const SparseBatch& v, const LayerParams& p) {
  require_rank(p.weights, 2, "sparse_fc_forward weights");
  if (v.dim != p.weights.dim(0)) {
    throw DimensionError("sparse_fc_forward: feature dim " + std::to_string(v.dim) + " vs weight rows " +
                         std::to_string(p.weights.dim(0)));
  }
  const std::size_t out = p.weights.dim(1);
  Tensor y({v.num_rows, out});
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < v.num_rows; ++r) {
    double* yr = y.data() + r * out;
    std::copy(p.bias.data(), p.bias.data() + out, yr);
    for (std::size_t i = v.row_offsets[r]; i < v.row_offsets[r + 1]; ++i) {
      const double val = v.values[i];
      const double* wr = p.weights.data() + v.col_indices[i] * out;
#pragma omp simd
      for (std::size_t j = 0; j < out; ++j) yr[j] += val * wr[j];
    }
  }
  return y;
}

void sparse_fc_backward(const SparseBatch& v, LayerParams& p, const Tensor& grad_out) {
  if (v.dim != p.weights.dim(0)) throw DimensionError("sparse_fc_backward: feature dim mismatch");
  const std::size_t out = p.weights.dim(1);
  require_shape(grad_out, {v.num_rows, out}, "sparse_fc_backward grad_out");

  // Weight rows are shared between batch rows, so work is split over output
  // columns; each column slice keeps the serial row order.
  constexpr std::size_t kSlice = 16;
  const std::size_t slices = (out + kSlice - 1) / kSlice;
#pragma omp parallel for schedule(static)
  for (std::size_t s = 0; s < slices; ++s) {
    const std::size_t j0 = s * kSlice, j1 = std::min(out, j0 + kSlice);
    for (std::size_t r = 0; r < v.num_rows; ++r) {
      const double* g = grad_out.data() + r * out;
      for (std::size_t i = v.row_offsets[r]; i < v.row_offsets[r + 1]; ++i) {
        const double val = v.values[i];
        double* gw = p.grad_weights.data() + v.col_indices[i] * out;
        for (std::size_t j = j0; j < j1; ++j) gw[j] += val * g[j];
      }
      for (std::size_t j = j0; j < j1; ++j) p.grad_bias[j] += g[j];
    }
  }
}

}  // namespace deepctr
