#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "deepctr/checkpoint.hpp"
#include "deepctr/data.hpp"
#include "deepctr/json_util.hpp"
#include "deepctr/network.hpp"
#include "deepctr/optim.hpp"
#include "deepctr/sampler.hpp"
#include "deepctr/synth.hpp"

namespace deepctr {

/// Impression splits plus the images they reference, in memory.
struct Dataset {
  DatasetMeta meta;
  std::vector<Impression> train, valid, test, test_cold;
  ImageStore images;
  std::unordered_map<std::string, std::size_t> categories;  // image id -> category label
  std::vector<PlantedPatch> patches;
};

/// Reads dataset.json, the split files, every referenced image and
/// patches.tsv (categories) when present.
Dataset load_dataset(const std::filesystem::path& dir);
Dataset dataset_from_synth(const SynthDataset& synth);

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::uint64_t iteration) : std::runtime_error(what), iteration(iteration) {}
  std::uint64_t iteration;
};

/// Random crop to `crop` x `crop` plus a horizontal mirror with probability 1/2.
Tensor augment_batch(const Tensor& images, std::size_t crop, Rng& rng);
/// [n x c x h x w] flipped left-right.
Tensor mirror_images(const Tensor& images);

// --- end-to-end training --------------------------------------------------------

enum class Sampling { Grouped, Shuffled };

struct TrainConfig {
  SamplerConfig sampler;  // n images x k impressions; Shuffled uses n * k flat rows
  OptimConfig optim;
  GradMode grad_mode = GradMode::Paper;
  Sampling sampling = Sampling::Grouped;
  bool freeze_conv = false;
  bool augment = false;
  std::size_t prefetch = 2;  // 0 samples on the training thread
  std::size_t eval_max_rows = 0;  // 0 evaluates the whole validation split
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(json& j, const TrainConfig& c);
TrainConfig train_config_from_json(const json& j, TrainConfig defaults = {});

struct TrainLogEntry {
  std::uint64_t iter = 0;  // iterations completed
  double lr = 0.0;
  double train_loss = 0.0;  // mean data loss since the previous entry
  double eval_logloss = 0.0;
  double eval_auc = 0.0;

  friend bool operator==(const TrainLogEntry&, const TrainLogEntry&) = default;
};

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  std::uint64_t iteration = 0;
  std::vector<TrainLogEntry> log;
  double best_eval_logloss = std::numeric_limits<double>::infinity();
  std::uint64_t best_iter = 0;
  Checkpoint best;  // parameters at best_iter
  double loss_sum = 0.0;
  std::uint64_t loss_count = 0;
};

/// Runs iterations state.iteration .. min(max_iters, stop_at) - 1. Batch t and
/// its dropout masks come from per-iteration RNG streams, so a stopped run
/// continues bitwise-identically. Evaluates on data.valid every eval_every
/// iterations and at max_iters, keeping the best parameters by logloss. On a
/// non-finite loss the net is rolled back to the best parameters and
/// DivergenceError is thrown.
TrainState train_deepctr(DeepCtrNet& net, const Dataset& data, const TrainConfig& cfg, TrainState state = {},
                         std::uint64_t stop_at = std::numeric_limits<std::uint64_t>::max());

/// One tab-separated `iter lr train_loss eval_logloss eval_auc` line per entry.
void write_train_log(const std::filesystem::path& path, std::span<const TrainLogEntry> log);

/// Parameters and BN statistics of a network; kind "deepctr".
Checkpoint model_checkpoint(DeepCtrNet& net);
/// Resumable state: model (with momentum), best parameters under "best/",
/// schedule position and log.
Checkpoint train_checkpoint(DeepCtrNet& net, const TrainConfig& cfg, const TrainState& state);
TrainState restore_train_checkpoint(const Checkpoint& c, DeepCtrNet& net);
/// Network rebuilt from a model or train checkpoint (best parameters if present).
DeepCtrNet load_deepctr(const Checkpoint& c);

/// Probabilities for each impression. Image features are computed once per
/// distinct image, everything in eval mode.
std::vector<double> predict_deepctr(DeepCtrNet& net, std::span<const Impression> rows, const ImageStore* images,
                                    std::size_t chunk = 512);

// --- pretraining -----------------------------------------------------------------

struct PretrainConfig {
  OptimConfig optim{0.01, 1.0, 0.9, 1e-4, {1000, 1500}, 10.0, 2000, 250};
  std::size_t batch_size = 32;
  bool augment = true;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(json& j, const PretrainConfig& c);
PretrainConfig pretrain_config_from_json(const json& j, PretrainConfig defaults = {});

struct PretrainResult {
  std::vector<std::pair<std::uint64_t, double>> log;  // (iter, mean loss since previous entry)
  double train_accuracy = 0.0;
};

/// Category classification on the listed images; updates the shared trunk in
/// place.
PretrainResult pretrain_convnet(PretrainNet& net, const ImageStore& store, std::span<const std::string> ids,
                                std::span<const std::size_t> labels, const PretrainConfig& cfg, std::size_t crop);

/// Eval-mode accuracy on full images.
double classification_accuracy(PretrainNet& net, const ImageStore& store, std::span<const std::string> ids,
                               std::span<const std::size_t> labels);

/// Images and category labels seen by training impressions only.
void pretrain_set(const Dataset& data, std::vector<std::string>& ids, std::vector<std::size_t>& labels);

// --- logistic regression baseline ---------------------------------------------------

struct LrConfig {
  OptimConfig optim{0.1, 1.0, 0.9, 1e-6, {3000}, 10.0, 4000, 1000};
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(json& j, const LrConfig& c);
LrConfig lr_config_from_json(const json& j, LrConfig defaults = {});

struct LrModel {
  LayerParams fc;  // [dim x 1]

  explicit LrModel(std::size_t dim = 0) : fc(LayerParams::fully_connected(dim, 1)) {}
  std::size_t dim() const { return fc.weights.dim(0); }
  std::vector<double> predict(const SparseBatch& v) const;
  std::vector<ParamRef> parameters();
};

LrModel train_lr_baseline(std::span<const Impression> impressions, std::size_t dim, const LrConfig& cfg);
std::vector<double> predict_lr(const LrModel& m, std::span<const Impression> rows);

Checkpoint lr_checkpoint(const LrModel& m);
LrModel load_lr(const Checkpoint& c);

}  // namespace deepctr
