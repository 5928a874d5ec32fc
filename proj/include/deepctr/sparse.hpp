#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "deepctr/layers.hpp"
#include "deepctr/tensor.hpp"

namespace deepctr {

struct SparseEntry {
  std::size_t index = 0;
  double value = 0.0;

  friend bool operator==(const SparseEntry&, const SparseEntry&) = default;
};

using SparseRow = std::vector<SparseEntry>;

/// CSR batch of basic-feature vectors. Column indices are strictly
/// increasing within a row.
struct SparseBatch {
  std::size_t num_rows = 0;
  std::size_t dim = 0;
  std::vector<std::size_t> row_offsets{0};
  std::vector<std::size_t> col_indices;
  std::vector<double> values;

  SparseBatch() = default;
  explicit SparseBatch(std::size_t feature_dim) : dim(feature_dim) {}

  std::size_t nnz() const noexcept { return col_indices.size(); }
  std::span<const std::size_t> row_indices(std::size_t r) const {
    return {col_indices.data() + row_offsets[r], row_offsets[r + 1] - row_offsets[r]};
  }
  std::span<const double> row_values(std::size_t r) const {
    return {values.data() + row_offsets[r], row_offsets[r + 1] - row_offsets[r]};
  }

  /// Appends an already-sorted row; throws on unsorted, duplicate or
  /// out-of-range indices.
  void append_row(std::span<const SparseEntry> row);
  /// Throws std::invalid_argument if any CSR invariant is broken.
  void validate() const;
};

/// Canonical CSR from unsorted rows. Duplicate indices within a row and
/// indices >= dim are errors.
SparseBatch csr_from_rows(const std::vector<SparseRow>& rows, std::size_t dim);

/// Dense [num_rows x dim] copy; test and benchmark use only.
Tensor densify(const SparseBatch& v);
/// Nonzeros of a dense [rows x dim] tensor as CSR.
SparseBatch sparsify(const Tensor& dense);

/// Y = V W + b touching only the weight rows named by nonzeros.
Tensor sparse_fc_forward(const SparseBatch& v, const LayerParams& p);
/// grad_W[j] += value * grad_out[row] for each nonzero (row, j); grad_b +=
/// column sums. The sparse input is a leaf, so no input gradient.
void sparse_fc_backward(const SparseBatch& v, LayerParams& p, const Tensor& grad_out);

}  // namespace deepctr
