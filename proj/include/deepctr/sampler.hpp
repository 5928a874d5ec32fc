#pragma once

#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <exception>
#include <functional>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "deepctr/data.hpp"
#include "deepctr/rng.hpp"
#include "deepctr/sparse.hpp"
#include "deepctr/tensor.hpp"

namespace deepctr {

struct SamplerConfig {
  std::size_t n = 8;   // images per batch
  std::size_t k = 16;  // impressions sampled per image
  std::uint64_t seed = 0;

  void validate() const;
};

/// n images plus k impressions per image, image-major: feature row r belongs
/// to image r / k. A flat batch is the k = 1 case with one (possibly repeated)
/// image per impression.
struct GroupedBatch {
  std::vector<std::string> image_ids;
  std::vector<std::size_t> groups;  // GroupIndex positions; empty for flat batches
  Tensor images;                    // [n x c x h x w]; empty when built without a store
  SparseBatch features;
  std::vector<double> labels;
  std::size_t k = 1;

  std::size_t n() const { return image_ids.size(); }
  std::size_t rows() const { return labels.size(); }
};

/// p(u) = #V_u / sum #V_u'.
std::vector<double> compute_sample_probs(const GroupIndex& g);

/// Vose alias table for O(1) draws from a fixed discrete distribution.
class AliasTable {
 public:
  explicit AliasTable(std::span<const double> probs);
  std::size_t sample(Rng& rng) const;
  std::size_t size() const { return prob_.size(); }

 private:
  std::vector<double> prob_;
  std::vector<std::size_t> alias_;
};

/// Image-proportional grouped sampler. Batch t is drawn from its own RNG
/// stream derive_seed(seed, sampler, t), so batches can be produced ahead of
/// time or regenerated after a resume without changing content.
class GroupedSampler {
 public:
  GroupedSampler(const GroupIndex& groups, std::span<const Impression> impressions, std::size_t dim,
                 const ImageStore* store, SamplerConfig cfg);

  GroupedBatch sample(Rng& rng) const;
  GroupedBatch batch_at(std::uint64_t t) const;
  const SamplerConfig& config() const { return cfg_; }

 private:
  const GroupIndex& groups_;
  std::span<const Impression> impressions_;
  std::size_t dim_;
  const ImageStore* store_;
  SamplerConfig cfg_;
  std::vector<double> probs_;
  AliasTable alias_;
};

/// One grouped batch: n distinct images by p(u), then k impressions per image
/// uniformly with replacement.
GroupedBatch sample_batch(const GroupIndex& g, const ImageStore* store, std::span<const Impression> impressions,
                          std::size_t dim, const SamplerConfig& cfg, Rng& rng);

/// Flat batches of `batch_size` impressions from consecutive epoch-wise
/// permutations of the whole set. Caches the current epoch's permutation, so
/// one instance must not be shared between threads.
class ShuffledBatcher {
 public:
  ShuffledBatcher(std::span<const Impression> impressions, std::size_t dim, const ImageStore* store,
                  std::size_t batch_size, std::uint64_t seed);
  GroupedBatch batch_at(std::uint64_t t) const;

 private:
  const std::vector<std::size_t>& permutation(std::uint64_t epoch) const;

  std::span<const Impression> impressions_;
  std::size_t dim_;
  const ImageStore* store_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  mutable std::uint64_t cached_epoch_ = ~std::uint64_t{0};
  mutable std::vector<std::size_t> cached_perm_;
};

/// Stacks the listed store images into [n x c x h x w].
Tensor stack_images(const ImageStore& store, std::span<const std::string> ids);

/// [n x f] -> [kn x f]; row i is copied to rows i*k .. i*k+k-1.
Tensor replicate_image_features(const Tensor& conv, std::size_t k);

enum class GradMode {
  Paper,  // mean over the k copies
  Exact,  // sum over the k copies (chain rule for a replicated node)
};

GradMode grad_mode_from_string(const std::string& s);
std::string to_string(GradMode m);

/// [kn x f] -> [n x f] reduction of the per-copy gradients.
Tensor reduce_copy_gradients(const Tensor& grad_copies, std::size_t k, GradMode mode);

/// Produces batches on a worker thread into a queue of bounded capacity.
class BatchPrefetcher {
 public:
  using Producer = std::function<GroupedBatch(std::uint64_t)>;

  BatchPrefetcher(Producer producer, std::uint64_t first, std::uint64_t last, std::size_t capacity = 2);
  ~BatchPrefetcher();
  BatchPrefetcher(const BatchPrefetcher&) = delete;
  BatchPrefetcher& operator=(const BatchPrefetcher&) = delete;

  /// Next batch in order; rethrows a producer exception.
  GroupedBatch next();

 private:
  void run();

  Producer producer_;
  std::uint64_t next_, last_;
  std::size_t capacity_;
  std::deque<GroupedBatch> queue_;
  std::exception_ptr error_;
  bool stop_ = false;
  bool done_ = false;
  std::mutex mu_;
  std::condition_variable cv_;
  std::thread worker_;
};

}  // namespace deepctr
