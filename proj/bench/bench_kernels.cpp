// Parallel kernels against the serial reference, plus the sparse input layer
// against a dense product over the same one-hot batch.

#include <benchmark/benchmark.h>

#include <vector>

#include "deepctr/kernels.hpp"
#include "deepctr/layers.hpp"
#include "deepctr/reference.hpp"
#include "deepctr/rng.hpp"
#include "deepctr/sparse.hpp"

using namespace deepctr;

namespace {

Tensor random(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(s));
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

void BM_matmul_parallel(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const Tensor a = random({n, n}, 1), b = random({n, n}, 2);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::matmul(a, b));
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(n * n * n));
}

void BM_matmul_reference(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const Tensor a = random({n, n}, 1), b = random({n, n}, 2);
  for (auto _ : st) benchmark::DoNotOptimize(reference::matmul(a, b));
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(n * n * n));
}

// 16 images of 16 x 32 x 32 through a 3x3 conv to 32 channels
struct ConvCase {
  Tensor x = random({16, 16, 32, 32}, 3);
  LayerParams p = [] {
    LayerParams l = LayerParams::conv(32, 16, 3, 3);
    Rng rng(4);
    l.init_he(rng);
    return l;
  }();
};

void BM_conv_parallel(benchmark::State& st) {
  const ConvCase c;
  for (auto _ : st) benchmark::DoNotOptimize(conv2d_forward(c.x, c.p, 1, 1));
}

void BM_conv_reference(benchmark::State& st) {
  const ConvCase c;
  for (auto _ : st) benchmark::DoNotOptimize(reference::conv2d_forward(c.x, c.p, 1, 1));
}

// 1000 rows, 20 active features each, fan-out 128
struct SparseCase {
  static constexpr std::size_t batch = 1000, nnz = 20, out = 128;
  std::size_t dim;
  SparseBatch v;
  LayerParams p;
  Tensor g;

  explicit SparseCase(std::size_t dim) : dim(dim), p(LayerParams::fully_connected(dim, out)), g(random({batch, out}, 6)) {
    Rng rng(5);
    std::vector<SparseRow> rows(batch);
    for (auto& r : rows)
      for (std::size_t j = 0; j < nnz; ++j) r.push_back({rng.uniform_index(dim / nnz) * nnz + j, 1.0});
    v = csr_from_rows(rows, dim);
    p.init_he(rng);
  }
};

void BM_input_layer_sparse(benchmark::State& st) {
  SparseCase c(static_cast<std::size_t>(st.range(0)));
  for (auto _ : st) {
    benchmark::DoNotOptimize(sparse_fc_forward(c.v, c.p));
    sparse_fc_backward(c.v, c.p, c.g);
  }
}

void BM_input_layer_dense(benchmark::State& st) {
  SparseCase c(static_cast<std::size_t>(st.range(0)));
  const Tensor x = densify(c.v);
  for (auto _ : st) {
    benchmark::DoNotOptimize(dense_fc_forward(x, c.p));
    benchmark::DoNotOptimize(dense_fc_backward(x, c.p, c.g));
  }
}

}  // namespace

BENCHMARK(BM_matmul_parallel)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_matmul_reference)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_parallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_reference)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_input_layer_sparse)->Arg(10000)->Arg(30000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_input_layer_dense)->Arg(10000)->Arg(30000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
