#include "deepctr/layers.hpp"
#include "deepctr/sparse.hpp"
#include "doctest.h"
#include "gradcheck.hpp"
#include "util.hpp"

using namespace deepctr;
using testutil::random_sparse;
using testutil::random_tensor;

TEST_SUITE("sparse") {
  TEST_CASE("csr construction") {
    SUBCASE("no rows") {
      const SparseBatch v = csr_from_rows({}, 10);
      CHECK(v.num_rows == 0);
      CHECK(v.row_offsets == std::vector<std::size_t>{0});
      CHECK(v.nnz() == 0);
    }
    SUBCASE("indices are sorted per row") {
      const SparseBatch v = csr_from_rows({{{3, 1.0}, {0, 1.0}}}, 5);
      CHECK(v.col_indices == std::vector<std::size_t>{0, 3});
      CHECK(v.row_offsets == std::vector<std::size_t>{0, 2});
      CHECK_NOTHROW(v.validate());
    }
    SUBCASE("values follow their indices when sorted") {
      const SparseBatch v = csr_from_rows({{{4, 2.0}, {1, -1.0}}, {}, {{2, 0.5}}}, 5);
      CHECK(v.values == std::vector<double>{-1.0, 2.0, 0.5});
      CHECK(v.row_offsets == std::vector<std::size_t>{0, 2, 2, 3});
    }
    SUBCASE("errors") {
      CHECK_THROWS_AS(csr_from_rows({{{5, 1.0}}}, 5), std::invalid_argument);
      CHECK_THROWS_AS(csr_from_rows({{{2, 1.0}, {2, 3.0}}}, 5), std::invalid_argument);
      SparseBatch v(5);
      const SparseRow unsorted{{3, 1.0}, {1, 1.0}};
      CHECK_THROWS_AS(v.append_row(unsorted), std::invalid_argument);
    }
    SUBCASE("validate catches broken invariants") {
      SparseBatch v = csr_from_rows({{{1, 1.0}, {3, 1.0}}}, 5);
      v.col_indices = {3, 1};
      CHECK_THROWS_AS(v.validate(), std::invalid_argument);
      v.col_indices = {1, 3};
      v.row_offsets = {0, 1};
      CHECK_THROWS_AS(v.validate(), std::invalid_argument);
    }
    SUBCASE("densify and sparsify round-trip") {
      Rng rng(1);
      for (int t = 0; t < 5; ++t) {
        const SparseBatch v = random_sparse(100, 40, 6, rng);
        const SparseBatch w = sparsify(densify(v));
        CHECK(w.row_offsets == v.row_offsets);
        CHECK(w.col_indices == v.col_indices);
        CHECK(w.values == v.values);
        CHECK(w.dim == v.dim);
      }
    }
  }

  TEST_CASE("sparse fc forward") {
    Rng rng(2);
    LayerParams p = LayerParams::fully_connected(12, 4);
    p.init_he(rng);
    for (auto& b : p.bias.values()) b = rng.normal();
    SUBCASE("one-hot row") {
      const Tensor y = sparse_fc_forward(csr_from_rows({{{7, 1.0}}}, 12), p);
      for (std::size_t c = 0; c < 4; ++c) CHECK(y.at(0, c) == p.weights.at(7, c) + p.bias[c]);
    }
    SUBCASE("empty row gives the bias") {
      const Tensor y = sparse_fc_forward(csr_from_rows({{}, {}}, 12), p);
      for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < 4; ++c) CHECK(y.at(r, c) == p.bias[c]);
    }
    SUBCASE("dimension mismatch") {
      CHECK_THROWS_AS(sparse_fc_forward(csr_from_rows({{}}, 11), p), DimensionError);
    }
  }

  TEST_CASE("sparse fc backward") {
    Rng rng(3);
    LayerParams p = LayerParams::fully_connected(12, 4);
    p.init_he(rng);
    SUBCASE("zero upstream gradient") {
      sparse_fc_backward(random_sparse(5, 12, 4, rng), p, Tensor({5, 4}));
      CHECK(squared_norm(p.grad_weights) == 0.0);
      CHECK(squared_norm(p.grad_bias) == 0.0);
    }
    SUBCASE("one-hot row touches exactly one weight row") {
      const Tensor g = random_tensor({1, 4}, rng);
      sparse_fc_backward(csr_from_rows({{{9, 1.0}}}, 12), p, g);
      for (std::size_t r = 0; r < 12; ++r)
        for (std::size_t c = 0; c < 4; ++c) CHECK(p.grad_weights.at(r, c) == (r == 9 ? g[c] : 0.0));
    }
    SUBCASE("dimension mismatch") {
      CHECK_THROWS_AS(sparse_fc_backward(csr_from_rows({{}}, 11), p, Tensor({1, 4})), DimensionError);
    }
    SUBCASE("finite differences") {
      for (std::uint64_t s = 0; s < 20; ++s) CHECK(gradcheck::sparse_fc(s).worst < 1e-6);
    }
  }

  TEST_CASE("sparse path equals the dense path") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed);
      const std::size_t rows = 1 + rng.uniform_index(30), dim = 1 + rng.uniform_index(60),
                        out = 1 + rng.uniform_index(8);
      const SparseBatch v = random_sparse(rows, dim, 8, rng);
      LayerParams sp = LayerParams::fully_connected(dim, out);
      sp.init_he(rng);
      for (auto& b : sp.bias.values()) b = rng.normal();
      LayerParams dp = sp;
      const Tensor g = random_tensor({rows, out}, rng);
      const Tensor x = densify(v);
      CHECK(max_abs_diff(sparse_fc_forward(v, sp), dense_fc_forward(x, dp)) <= 1e-12);
      sparse_fc_backward(v, sp, g);
      dense_fc_backward(x, dp, g);
      CHECK(max_abs_diff(sp.grad_weights, dp.grad_weights) <= 1e-12);
      CHECK(max_abs_diff(sp.grad_bias, dp.grad_bias) <= 1e-12);
    }
  }

  TEST_CASE("sparse path allocates nothing proportional to batch x dim") {
    Rng rng(4);
    const std::size_t dim = 50000, batch = 200, out = 16;
    const SparseBatch v = random_sparse(batch, dim, 20, rng, true);
    LayerParams p = LayerParams::fully_connected(dim, out);
    memory::reset_peak();
    const std::size_t base = memory::current_bytes();
    const Tensor y = sparse_fc_forward(v, p);
    sparse_fc_backward(v, p, Tensor({batch, out}, 1.0));
    const std::size_t transient = memory::peak_bytes() - base;
    CHECK(transient < batch * dim * sizeof(double) / 100);
    CHECK(transient <= (v.nnz() + 2 * batch * out) * sizeof(double));
  }
}
