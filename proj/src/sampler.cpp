#include "deepctr/sampler.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace deepctr {

void SamplerConfig::validate() const {
  if (n == 0 || k == 0) throw std::invalid_argument("sampler config: n and k must be >= 1");
}

std::vector<double> compute_sample_probs(const GroupIndex& g) {
  if (g.total == 0 || g.size() == 0) throw std::invalid_argument("compute_sample_probs: empty group index");
  std::vector<double> p(g.size());
  const double total = static_cast<double>(g.total);
  for (std::size_t i = 0; i < g.size(); ++i) p[i] = static_cast<double>(g.count(i)) / total;
  return p;
}

AliasTable::AliasTable(std::span<const double> probs) : prob_(probs.size()), alias_(probs.size()) {
  const std::size_t n = probs.size();
  if (n == 0) throw std::invalid_argument("AliasTable: empty distribution");
  const double sum = std::accumulate(probs.begin(), probs.end(), 0.0);
  std::vector<double> scaled(n);
  std::vector<std::size_t> small, large;
  for (std::size_t i = 0; i < n; ++i) {
    if (probs[i] < 0.0) throw std::invalid_argument("AliasTable: negative probability");
    scaled[i] = probs[i] * static_cast<double>(n) / sum;
    (scaled[i] < 1.0 ? small : large).push_back(i);
  }
  while (!small.empty() && !large.empty()) {
    const std::size_t s = small.back(), l = large.back();
    small.pop_back();
    prob_[s] = scaled[s];
    alias_[s] = l;
    scaled[l] = (scaled[l] + scaled[s]) - 1.0;
    if (scaled[l] < 1.0) {
      large.pop_back();
      small.push_back(l);
    }
  }
  for (std::size_t i : large) prob_[i] = 1.0, alias_[i] = i;
  for (std::size_t i : small) prob_[i] = 1.0, alias_[i] = i;
}

std::size_t AliasTable::sample(Rng& rng) const {
  const std::size_t column = rng.uniform_index(prob_.size());
  return rng.uniform() < prob_[column] ? column : alias_[column];
}

// --- grouped sampling -----------------------------------------------------------

Tensor stack_images(const ImageStore& store, std::span<const std::string> ids) {
  if (ids.empty()) return {};
  const Shape& s = store.image_shape();
  Tensor out({ids.size(), s[0], s[1], s[2]});
  const std::size_t stride = product(s);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Tensor& img = store.get(ids[i]);
    std::copy(img.data(), img.data() + stride, out.data() + i * stride);
  }
  return out;
}

GroupedSampler::GroupedSampler(const GroupIndex& groups, std::span<const Impression> impressions, std::size_t dim,
                               const ImageStore* store, SamplerConfig cfg)
    : groups_(groups),
      impressions_(impressions),
      dim_(dim),
      store_(store),
      cfg_(cfg),
      probs_(compute_sample_probs(groups)),
      alias_(probs_) {
  cfg_.validate();
  if (groups.size() < cfg_.n) {
    throw std::invalid_argument("sampler: batch needs " + std::to_string(cfg_.n) + " distinct images, dataset has " +
                                std::to_string(groups.size()));
  }
}

GroupedBatch GroupedSampler::sample(Rng& rng) const {
  GroupedBatch b;
  b.k = cfg_.k;
  std::vector<char> taken(groups_.size(), 0);
  std::size_t rejections = 0;
  while (b.groups.size() < cfg_.n) {
    std::size_t g;
    if (rejections < 64 * cfg_.n) {
      g = alias_.sample(rng);
      if (taken[g]) {
        ++rejections;
        continue;
      }
    } else {
      // Heavily skewed mass: draw from what is left by a linear scan.
      double left = 0.0;
      for (std::size_t i = 0; i < probs_.size(); ++i)
        if (!taken[i]) left += probs_[i];
      double u = rng.uniform() * left;
      g = probs_.size();
      for (std::size_t i = 0; i < probs_.size(); ++i) {
        if (taken[i]) continue;
        g = i;
        if (u < probs_[i]) break;
        u -= probs_[i];
      }
    }
    taken[g] = 1;
    b.groups.push_back(g);
  }

  b.features = SparseBatch(dim_);
  b.labels.reserve(cfg_.n * cfg_.k);
  for (std::size_t g : b.groups) {
    b.image_ids.push_back(groups_.image_ids[g]);
    const auto& rows = groups_.rows[g];
    for (std::size_t j = 0; j < cfg_.k; ++j) {
      const Impression& imp = impressions_[rows[rng.uniform_index(rows.size())]];
      b.features.append_row(imp.features);
      b.labels.push_back(static_cast<double>(imp.label));
    }
  }
  if (store_) b.images = stack_images(*store_, b.image_ids);
  return b;
}

GroupedBatch GroupedSampler::batch_at(std::uint64_t t) const {
  Rng rng(derive_seed(cfg_.seed, streams::kSampler, t));
  return sample(rng);
}

GroupedBatch sample_batch(const GroupIndex& g, const ImageStore* store, std::span<const Impression> impressions,
                          std::size_t dim, const SamplerConfig& cfg, Rng& rng) {
  return GroupedSampler(g, impressions, dim, store, cfg).sample(rng);
}

// --- flat shuffled batches -----------------------------------------------------

ShuffledBatcher::ShuffledBatcher(std::span<const Impression> impressions, std::size_t dim, const ImageStore* store,
                                 std::size_t batch_size, std::uint64_t seed)
    : impressions_(impressions), dim_(dim), store_(store), batch_size_(batch_size), seed_(seed) {
  if (impressions.empty()) throw std::invalid_argument("ShuffledBatcher: no impressions");
  if (batch_size == 0) throw std::invalid_argument("ShuffledBatcher: batch size must be positive");
}

const std::vector<std::size_t>& ShuffledBatcher::permutation(std::uint64_t epoch) const {
  if (epoch == cached_epoch_) return cached_perm_;
  auto& perm = cached_perm_;
  perm.resize(impressions_.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed_, streams::kShuffle, epoch));
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
  cached_epoch_ = epoch;
  return perm;
}

GroupedBatch ShuffledBatcher::batch_at(std::uint64_t t) const {
  const std::size_t n = impressions_.size();
  GroupedBatch b;
  b.k = 1;
  b.features = SparseBatch(dim_);
  std::uint64_t pos = t * batch_size_;
  for (std::size_t i = 0; i < batch_size_; ++i, ++pos) {
    const std::uint64_t epoch = pos / n;
    const Impression& imp = impressions_[permutation(epoch)[pos % n]];
    b.image_ids.push_back(imp.image_id);
    b.features.append_row(imp.features);
    b.labels.push_back(static_cast<double>(imp.label));
  }
  if (store_) b.images = stack_images(*store_, b.image_ids);
  return b;
}

// --- copy / reduce ---------------------------------------------------------------

Tensor replicate_image_features(const Tensor& conv, std::size_t k) {
  require_rank(conv, 2, "replicate_image_features");
  if (k == 0) throw std::invalid_argument("replicate_image_features: k must be >= 1");
  const std::size_t n = conv.dim(0), f = conv.dim(1);
  Tensor out({n * k, f});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) std::copy(conv.data() + i * f, conv.data() + (i + 1) * f, out.data() + (i * k + c) * f);
  return out;
}

GradMode grad_mode_from_string(const std::string& s) {
  if (s == "paper") return GradMode::Paper;
  if (s == "exact") return GradMode::Exact;
  throw std::invalid_argument("grad mode must be 'paper' or 'exact', got '" + s + "'");
}

std::string to_string(GradMode m) { return m == GradMode::Paper ? "paper" : "exact"; }

Tensor reduce_copy_gradients(const Tensor& grad_copies, std::size_t k, GradMode mode) {
  require_rank(grad_copies, 2, "reduce_copy_gradients");
  if (k == 0 || grad_copies.dim(0) % k != 0) {
    throw std::invalid_argument("reduce_copy_gradients: " + std::to_string(grad_copies.dim(0)) +
                                " rows not divisible by k=" + std::to_string(k));
  }
  const std::size_t n = grad_copies.dim(0) / k, f = grad_copies.dim(1);
  Tensor out({n, f});
  const double scale = mode == GradMode::Paper ? 1.0 / static_cast<double>(k) : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.data() + i * f;
    for (std::size_t c = 0; c < k; ++c) {
      const double* g = grad_copies.data() + (i * k + c) * f;
      for (std::size_t j = 0; j < f; ++j) o[j] += g[j];
    }
    for (std::size_t j = 0; j < f; ++j) o[j] *= scale;
  }
  return out;
}

// --- prefetch ---------------------------------------------------------------------

BatchPrefetcher::BatchPrefetcher(Producer producer, std::uint64_t first, std::uint64_t last, std::size_t capacity)
    : producer_(std::move(producer)), next_(first), last_(last), capacity_(std::max<std::size_t>(1, capacity)) {
  worker_ = std::thread([this] { run(); });
}

BatchPrefetcher::~BatchPrefetcher() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  worker_.join();
}

void BatchPrefetcher::run() {
  try {
    for (;;) {
      std::uint64_t t;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return stop_ || queue_.size() < capacity_; });
        if (stop_ || next_ >= last_) break;
        t = next_++;
      }
      GroupedBatch b = producer_(t);
      {
        std::lock_guard lock(mu_);
        queue_.push_back(std::move(b));
      }
      cv_.notify_all();
    }
  } catch (...) {
    std::lock_guard lock(mu_);
    error_ = std::current_exception();
  }
  {
    std::lock_guard lock(mu_);
    done_ = true;
  }
  cv_.notify_all();
}

GroupedBatch BatchPrefetcher::next() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return !queue_.empty() || done_; });
  if (queue_.empty()) {
    if (error_) std::rethrow_exception(error_);
    throw std::logic_error("BatchPrefetcher: no more batches");
  }
  GroupedBatch b = std::move(queue_.front());
  queue_.pop_front();
  lock.unlock();
  cv_.notify_all();
  return b;
}

}  // namespace deepctr
