#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deepctr/json_util.hpp"
#include "deepctr/metrics.hpp"
#include "deepctr/network.hpp"
#include "deepctr/synth.hpp"
#include "deepctr/trainer.hpp"

namespace deepctr::cli {

namespace fs = std::filesystem;

/// Declarative run description. Sub-config seeds left unset are derived from
/// the run seed.
struct RunConfig {
  fs::path dataset;
  std::string model = "deepctr";  // deepctr | dnn | lr
  std::uint64_t seed = 1;
  json net = json::object();  // NetConfig overrides; image shape and dim come from the dataset
  TrainConfig train;
  PretrainConfig pretrain;
  LrConfig lr;
  fs::path pretrained;  // conv checkpoint from `pretrain`, optional
  std::string eval_split = "test";
};

RunConfig run_config_from_json(const json& j, std::optional<std::uint64_t> seed_override = {});
RunConfig load_run_config(const fs::path& path, std::optional<std::uint64_t> seed_override = {});
json to_json(const RunConfig& c);

/// NetConfig defaults, then dataset shape, then the config's overrides.
NetConfig resolve_net(const RunConfig& c, const DatasetMeta& meta);

/// Writes <out>/resolved_config.json.
void write_resolved(const fs::path& out, const json& resolved);

// Each command throws on failure; main turns that into a one-line diagnostic.

void cmd_generate(const std::optional<fs::path>& spec_path, const fs::path& out, std::uint64_t seed);
void cmd_pretrain(const RunConfig& c, const fs::path& out);

struct TrainOptions {
  std::optional<fs::path> resume;
  std::uint64_t stop_at = ~std::uint64_t{0};
};
void cmd_train(const RunConfig& c, const fs::path& out, const TrainOptions& opt = {});

/// Averages the checkpoints' probabilities on the configured split.
EvalReport cmd_eval(const RunConfig& c, std::span<const fs::path> checkpoints, const std::optional<fs::path>& baseline,
                    const fs::path& out);

struct SaliencyOptions {
  fs::path checkpoint;
  std::vector<std::string> image_ids;
  std::optional<std::string> features;  // "idx:val,..."; default: first impression of each image
};
void cmd_saliency(const RunConfig& c, const SaliencyOptions& opt, const fs::path& out);

// --- benchmarks --------------------------------------------------------------------

struct SparseDenseTiming {
  std::size_t dim = 0, nnz_per_row = 0, batch = 0, out = 0;
  double sparse_seconds = 0.0;  // forward + backward, best of reps
  double dense_seconds = 0.0;
  double speedup = 0.0;
  std::size_t sparse_peak_bytes = 0;  // transient allocations beyond the layer itself
  std::size_t dense_peak_bytes = 0;
  double max_abs_diff = 0.0;  // sparse vs dense outputs and gradients
};

SparseDenseTiming time_sparse_vs_dense(std::size_t dim, std::size_t nnz_per_row, std::size_t batch, std::size_t out,
                                       std::size_t reps, std::uint64_t seed);

struct SamplingTiming {
  std::size_t n = 0, k = 0;
  double grouped_seconds = 0.0;  // one forward_backward on n images x k impressions
  double flat_seconds = 0.0;     // one forward_backward on n*k images
};

SamplingTiming time_grouped_vs_flat(std::size_t n, std::size_t k, std::size_t image_size, std::size_t reps,
                                    std::uint64_t seed);

struct BenchOptions {
  std::size_t dim = 100000, nnz = 20, batch = 1000, out = 128, reps = 3;
  std::size_t n = 8, k = 16, image_size = 32;
  std::uint64_t seed = 1;
};
void cmd_bench(const BenchOptions& opt, const fs::path& out);

}  // namespace deepctr::cli
