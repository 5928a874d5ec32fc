#include "deepctr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>

#include "deepctr/metrics.hpp"

namespace deepctr {

// --- dataset -------------------------------------------------------------------

Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Dataset d;
  d.meta = load_dataset_meta(dir);
  d.train = load_impressions(dir / "train.tsv", d.meta.dim);
  if (fs::exists(dir / "valid.tsv")) d.valid = load_impressions(dir / "valid.tsv", d.meta.dim);
  if (fs::exists(dir / "test.tsv")) d.test = load_impressions(dir / "test.tsv", d.meta.dim);
  if (fs::exists(dir / "test_cold.tsv")) d.test_cold = load_impressions(dir / "test_cold.tsv", d.meta.dim);

  std::set<std::string> ids;
  for (const auto* split : {&d.train, &d.valid, &d.test, &d.test_cold})
    for (const auto& imp : *split) ids.insert(imp.image_id);
  const std::vector<std::string> id_list(ids.begin(), ids.end());
  d.images = ImageStore::load(dir / "images", id_list, d.meta.height == d.meta.width ? d.meta.height : 0);

  if (fs::exists(dir / "patches.tsv")) {
    d.patches = load_patches(dir / "patches.tsv");
    for (const auto& p : d.patches) d.categories[p.image_id] = p.category;
  }
  return d;
}

Dataset dataset_from_synth(const SynthDataset& s) {
  Dataset d;
  const Shape& shape = s.images.image_shape();
  d.meta.dim = s.spec.dim();
  d.meta.channels = shape[0];
  d.meta.height = shape[1];
  d.meta.width = shape[2];
  d.meta.n_categories = s.spec.n_categories;
  d.meta.n_impressions = s.impressions.size();
  d.meta.n_images = s.images.size();
  auto take = [&](const std::vector<std::size_t>& rows) {
    std::vector<Impression> out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(s.impressions[r]);
    return out;
  };
  d.train = take(s.train_rows);
  d.valid = take(s.valid_rows);
  d.test = take(s.test_rows);
  d.test_cold = take(s.cold_rows);
  d.images = s.images;
  d.patches = s.patches;
  for (const auto& p : s.patches) d.categories[p.image_id] = p.category;
  return d;
}

// --- augmentation ------------------------------------------------------------------

Tensor augment_batch(const Tensor& images, std::size_t crop, Rng& rng) {
  require_rank(images, 4, "augment_batch");
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (crop == 0 || crop > h || crop > w) throw std::invalid_argument("augment_batch: crop larger than image");
  Tensor out({n, c, crop, crop});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t oy = rng.uniform_index(h - crop + 1);
    const std::size_t ox = rng.uniform_index(w - crop + 1);
    const bool flip = rng.bernoulli(0.5);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* src = images.data() + (i * c + ch) * h * w;
      double* dst = out.data() + (i * c + ch) * crop * crop;
      for (std::size_t y = 0; y < crop; ++y)
        for (std::size_t x = 0; x < crop; ++x)
          dst[y * crop + x] = src[(oy + y) * w + ox + (flip ? crop - 1 - x : x)];
    }
  }
  return out;
}

Tensor mirror_images(const Tensor& images) {
  require_rank(images, 4, "mirror_images");
  const std::size_t planes = images.dim(0) * images.dim(1), h = images.dim(2), w = images.dim(3);
  Tensor out(images.shape());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(p * h + y) * w + x] = images[(p * h + y) * w + (w - 1 - x)];
  return out;
}

// --- configs --------------------------------------------------------------------------

void TrainConfig::validate() const {
  sampler.validate();
  optim.validate();
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"n", c.sampler.n},
           {"k", c.sampler.k},
           {"optim", c.optim},
           {"grad_mode", to_string(c.grad_mode)},
           {"sampling", c.sampling == Sampling::Grouped ? "grouped" : "shuffled"},
           {"freeze_conv", c.freeze_conv},
           {"augment", c.augment},
           {"prefetch", c.prefetch},
           {"eval_max_rows", c.eval_max_rows},
           {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  StrictReader r(j, "train");
  std::string grad_mode = to_string(c.grad_mode);
  std::string sampling = c.sampling == Sampling::Grouped ? "grouped" : "shuffled";
  r.get("n", c.sampler.n)
      .get("k", c.sampler.k)
      .get("grad_mode", grad_mode)
      .get("sampling", sampling)
      .get("freeze_conv", c.freeze_conv)
      .get("augment", c.augment)
      .get("prefetch", c.prefetch)
      .get("eval_max_rows", c.eval_max_rows)
      .get("seed", c.seed);
  if (r.has("optim")) c.optim = optim_config_from_json(r.at("optim"), c.optim);
  r.finish();
  try {
    c.grad_mode = grad_mode_from_string(grad_mode);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train.grad_mode: ") + e.what());
  }
  if (sampling == "grouped")
    c.sampling = Sampling::Grouped;
  else if (sampling == "shuffled")
    c.sampling = Sampling::Shuffled;
  else
    throw ConfigError("train.sampling must be 'grouped' or 'shuffled', got '" + sampling + "'");
  c.validate();
  return c;
}

void PretrainConfig::validate() const {
  optim.validate();
  if (batch_size < 2) throw ConfigError("pretrain: batch_size must be >= 2 (batch normalisation)");
}

void to_json(json& j, const PretrainConfig& c) {
  j = json{{"optim", c.optim}, {"batch_size", c.batch_size}, {"augment", c.augment}, {"seed", c.seed}};
}

PretrainConfig pretrain_config_from_json(const json& j, PretrainConfig c) {
  StrictReader r(j, "pretrain");
  r.get("batch_size", c.batch_size).get("augment", c.augment).get("seed", c.seed);
  if (r.has("optim")) c.optim = optim_config_from_json(r.at("optim"), c.optim);
  r.finish();
  c.validate();
  return c;
}

void LrConfig::validate() const {
  optim.validate();
  if (batch_size == 0) throw ConfigError("lr: batch_size must be positive");
}

void to_json(json& j, const LrConfig& c) {
  j = json{{"optim", c.optim}, {"batch_size", c.batch_size}, {"seed", c.seed}};
}

LrConfig lr_config_from_json(const json& j, LrConfig c) {
  StrictReader r(j, "lr");
  r.get("batch_size", c.batch_size).get("seed", c.seed);
  if (r.has("optim")) c.optim = optim_config_from_json(r.at("optim"), c.optim);
  r.finish();
  c.validate();
  return c;
}

// --- prediction -----------------------------------------------------------------------

std::vector<double> predict_deepctr(DeepCtrNet& net, std::span<const Impression> rows, const ImageStore* images,
                                    std::size_t chunk) {
  if (chunk == 0) throw std::invalid_argument("predict_deepctr: chunk must be positive");
  const auto& cfg = net.config();
  std::map<std::string, std::size_t> slot;
  Tensor emb;
  if (cfg.use_convnet) {
    if (!images) throw std::invalid_argument("predict_deepctr: network needs images");
    const auto ids = unique_image_ids(rows);
    emb = Tensor({ids.size(), cfg.embed_dim});
    constexpr std::size_t kImageChunk = 64;
    for (std::size_t b = 0; b < ids.size(); b += kImageChunk) {
      const std::size_t e = std::min(ids.size(), b + kImageChunk);
      std::span<const std::string> part(ids.data() + b, e - b);
      Tensor f = net.convnet_forward(stack_images(*images, part), Mode::Eval);
      std::copy(f.data(), f.data() + f.size(), emb.data() + b * cfg.embed_dim);
    }
    for (std::size_t i = 0; i < ids.size(); ++i) slot[ids[i]] = i;
  }

  std::vector<double> out;
  out.reserve(rows.size());
  Rng unused(0);
  for (std::size_t b = 0; b < rows.size(); b += chunk) {
    const std::size_t e = std::min(rows.size(), b + chunk);
    auto part = rows.subspan(b, e - b);
    SparseBatch v = features_of(part, cfg.basic_dim);
    Tensor img_rows;
    if (cfg.use_convnet) {
      img_rows = Tensor({part.size(), cfg.embed_dim});
      for (std::size_t r = 0; r < part.size(); ++r) {
        const std::size_t s = slot.at(part[r].image_id);
        std::copy(emb.data() + s * cfg.embed_dim, emb.data() + (s + 1) * cfg.embed_dim, img_rows.data() + r * cfg.embed_dim);
      }
    }
    Tensor z = net.head_forward(img_rows, v, Mode::Eval, unused);
    for (double zi : z.values()) out.push_back(sigmoid(zi));
  }
  return out;
}

// --- checkpoints ------------------------------------------------------------------------

namespace {

Checkpoint snapshot(DeepCtrNet& net) {
  Checkpoint c;
  store_state(c, net.parameters(), net.buffers(), "", false);
  return c;
}

json log_to_json(std::span<const TrainLogEntry> log) {
  json a = json::array();
  for (const auto& e : log) a.push_back({e.iter, e.lr, e.train_loss, e.eval_logloss, e.eval_auc});
  return a;
}

std::vector<TrainLogEntry> log_from_json(const json& a) {
  std::vector<TrainLogEntry> log;
  for (const auto& e : a) {
    log.push_back({e.at(0).get<std::uint64_t>(), e.at(1).get<double>(), e.at(2).get<double>(), e.at(3).get<double>(),
                   e.at(4).get<double>()});
  }
  return log;
}

const std::string kBest = "best/";

}  // namespace

Checkpoint model_checkpoint(DeepCtrNet& net) {
  Checkpoint c = snapshot(net);
  c.meta = json{{"kind", "deepctr"}, {"net", net.config()}};
  return c;
}

Checkpoint train_checkpoint(DeepCtrNet& net, const TrainConfig& cfg, const TrainState& state) {
  Checkpoint c;
  c.meta = json{{"kind", "deepctr-train"},
                {"net", net.config()},
                {"train", cfg},
                {"iteration", state.iteration},
                {"best_iter", state.best_iter},
                {"loss_sum", state.loss_sum},
                {"loss_count", state.loss_count},
                {"log", log_to_json(state.log)},
                {"seeds", {{"run", cfg.seed},
                           {"sampler_stream", derive_seed(cfg.seed, streams::kSampler, state.iteration)},
                           {"dropout_stream", derive_seed(cfg.seed, streams::kDropout, state.iteration)}}}};
  if (std::isfinite(state.best_eval_logloss)) c.meta["best_eval_logloss"] = state.best_eval_logloss;
  store_state(c, net.parameters(), net.buffers(), "", true);
  for (const auto& [name, t] : state.best.tensors) c.put(kBest + name, t);
  return c;
}

TrainState restore_train_checkpoint(const Checkpoint& c, DeepCtrNet& net) {
  if (c.meta.value("kind", "") != "deepctr-train") throw FormatError("checkpoint is not a resumable training state");
  if (net_config_from_json(c.meta.at("net")) != net.config()) {
    throw FormatError("checkpoint network configuration differs from the target network");
  }
  restore_state(c, net.parameters(), net.buffers(), "", true);
  TrainState s;
  s.iteration = c.meta.at("iteration").get<std::uint64_t>();
  s.best_iter = c.meta.at("best_iter").get<std::uint64_t>();
  s.loss_sum = c.meta.at("loss_sum").get<double>();
  s.loss_count = c.meta.at("loss_count").get<std::uint64_t>();
  s.log = log_from_json(c.meta.at("log"));
  if (c.meta.contains("best_eval_logloss")) s.best_eval_logloss = c.meta.at("best_eval_logloss").get<double>();
  for (const auto& [name, t] : c.tensors)
    if (name.starts_with(kBest)) s.best.put(name.substr(kBest.size()), t);
  return s;
}

DeepCtrNet load_deepctr(const Checkpoint& c) {
  const std::string kind = c.meta.value("kind", "");
  if (kind != "deepctr" && kind != "deepctr-train") throw FormatError("checkpoint kind '" + kind + "' is not a DeepCTR model");
  const NetConfig cfg = net_config_from_json(c.meta.at("net"));
  DeepCtrNet net(cfg, std::make_shared<ConvTrunk>(cfg));
  const bool has_best = std::any_of(c.tensors.begin(), c.tensors.end(),
                                    [](const auto& t) { return t.first.starts_with(kBest); });
  restore_state(c, net.parameters(), net.buffers(), has_best ? kBest : "");
  return net;
}

void write_train_log(const std::filesystem::path& path, std::span<const TrainLogEntry> log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%llu\t%.17g\t%.17g\t%.17g\t%.17g\n", static_cast<unsigned long long>(e.iter), e.lr,
                  e.train_loss, e.eval_logloss, e.eval_auc);
    out << buf;
  }
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

// --- end-to-end training -----------------------------------------------------------------

TrainState train_deepctr(DeepCtrNet& net, const Dataset& data, const TrainConfig& cfg, TrainState state,
                         std::uint64_t stop_at) {
  cfg.validate();
  const auto& o = cfg.optim;
  const auto& ncfg = net.config();
  if (data.train.empty()) throw std::invalid_argument("train_deepctr: no training impressions");
  if (data.valid.empty()) throw std::invalid_argument("train_deepctr: no validation impressions");
  const bool conv = ncfg.use_convnet;
  const bool frozen = conv && cfg.freeze_conv;

  auto all_params = net.parameters();
  std::vector<ParamRef> params;
  for (const auto& p : all_params)
    if (!(frozen && p.conv)) params.push_back(p);

  if (state.best.tensors.empty()) state.best = snapshot(net);
  const std::uint64_t end = std::min(o.max_iters, stop_at);
  if (state.iteration >= end) return state;

  std::optional<TrunkFeatureCache> cache;
  if (frozen) cache.emplace(*net.trunk(), data.images);
  const ImageStore* batch_images = conv && !frozen ? &data.images : nullptr;

  SamplerConfig sc = cfg.sampler;
  sc.seed = cfg.seed;
  const GroupIndex groups = build_group_index(data.train);
  std::optional<GroupedSampler> grouped;
  std::optional<ShuffledBatcher> shuffled;
  if (cfg.sampling == Sampling::Grouped)
    grouped.emplace(groups, data.train, ncfg.basic_dim, batch_images, sc);
  else
    shuffled.emplace(data.train, ncfg.basic_dim, batch_images, sc.n * sc.k, cfg.seed);
  auto produce = [&](std::uint64_t t) { return grouped ? grouped->batch_at(t) : shuffled->batch_at(t); };

  std::span<const Impression> eval_rows = data.valid;
  if (cfg.eval_max_rows > 0 && eval_rows.size() > cfg.eval_max_rows) eval_rows = eval_rows.first(cfg.eval_max_rows);
  std::vector<double> eval_labels = labels_of(eval_rows);

  std::optional<BatchPrefetcher> prefetch;
  if (cfg.prefetch > 0) prefetch.emplace(produce, state.iteration, end, cfg.prefetch);

  for (std::uint64_t t = state.iteration; t < end; ++t) {
    GroupedBatch batch = prefetch ? prefetch->next() : produce(t);
    if (cfg.augment && batch_images) {
      Rng arng(derive_seed(cfg.seed, streams::kAugment, t));
      batch.images = augment_batch(batch.images, ncfg.crop, arng);
    }
    Rng drng(derive_seed(cfg.seed, streams::kDropout, t));
    ForwardBackwardResult res;
    try {
      res = forward_backward(net, batch, 0.0, cfg.grad_mode, drng, cache ? &*cache : nullptr);
    } catch (const NonFiniteError& e) {
      restore_state(state.best, all_params, net.buffers());
      throw DivergenceError("training diverged at iteration " + std::to_string(t) + ": " + e.what(), t);
    }
    if (!std::isfinite(res.loss)) {
      restore_state(state.best, all_params, net.buffers());
      throw DivergenceError("training diverged at iteration " + std::to_string(t) + " (non-finite loss)", t);
    }
    const double lr = lr_at(o, t);
    try {
      sgd_step(params, o, lr);
    } catch (const NonFiniteError& e) {
      restore_state(state.best, all_params, net.buffers());
      throw DivergenceError("training diverged at iteration " + std::to_string(t) + ": " + e.what(), t);
    }
    state.loss_sum += res.data_loss;
    ++state.loss_count;
    state.iteration = t + 1;

    if (state.iteration % o.eval_every == 0 || state.iteration == o.max_iters) {
      const auto probs = predict_deepctr(net, eval_rows, &data.images);
      TrainLogEntry e{state.iteration, lr, state.loss_sum / static_cast<double>(state.loss_count),
                      eval_logloss(probs, eval_labels), eval_auc(probs, eval_labels)};
      state.log.push_back(e);
      state.loss_sum = 0.0;
      state.loss_count = 0;
      if (e.eval_logloss < state.best_eval_logloss) {
        state.best_eval_logloss = e.eval_logloss;
        state.best_iter = e.iter;
        state.best = snapshot(net);
      }
    }
  }
  return state;
}

// --- pretraining ----------------------------------------------------------------------------

void pretrain_set(const Dataset& data, std::vector<std::string>& ids, std::vector<std::size_t>& labels) {
  ids = unique_image_ids(data.train);
  labels.clear();
  for (const auto& id : ids) {
    auto it = data.categories.find(id);
    if (it == data.categories.end()) throw std::invalid_argument("pretrain: no category for image '" + id + "'");
    labels.push_back(it->second);
  }
}

PretrainResult pretrain_convnet(PretrainNet& net, const ImageStore& store, std::span<const std::string> ids,
                                std::span<const std::size_t> labels, const PretrainConfig& cfg, std::size_t crop) {
  cfg.validate();
  if (ids.empty() || ids.size() != labels.size()) {
    throw std::invalid_argument("pretrain_convnet: need one label per image and at least one image");
  }
  if (std::set<std::size_t>(labels.begin(), labels.end()).size() < 2) {
    throw std::invalid_argument("pretrain_convnet: need at least 2 categories");
  }
  const auto& o = cfg.optim;
  auto params = net.parameters();
  PretrainResult result;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  std::vector<std::string> batch_ids(cfg.batch_size);
  std::vector<std::size_t> batch_labels(cfg.batch_size);
  for (std::uint64_t t = 0; t < o.max_iters; ++t) {
    Rng rng(derive_seed(cfg.seed, streams::kShuffle, t));
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      const std::size_t j = rng.uniform_index(ids.size());
      batch_ids[i] = ids[j];
      batch_labels[i] = labels[j];
    }
    Tensor images = stack_images(store, batch_ids);
    if (cfg.augment) {
      Rng arng(derive_seed(cfg.seed, streams::kAugment, t));
      images = augment_batch(images, crop, arng);
    }
    const double loss = pretrain_forward_backward(net, images, batch_labels, 0.0);
    if (!std::isfinite(loss)) throw DivergenceError("pretraining diverged at iteration " + std::to_string(t), t);
    sgd_step(params, o, lr_at(o, t));
    loss_sum += loss;
    ++loss_count;
    if ((t + 1) % o.eval_every == 0 || t + 1 == o.max_iters) {
      result.log.emplace_back(t + 1, loss_sum / static_cast<double>(loss_count));
      loss_sum = 0.0;
      loss_count = 0;
    }
  }
  result.train_accuracy = classification_accuracy(net, store, ids, labels);
  return result;
}

double classification_accuracy(PretrainNet& net, const ImageStore& store, std::span<const std::string> ids,
                               std::span<const std::size_t> labels) {
  if (ids.empty() || ids.size() != labels.size()) throw std::invalid_argument("classification_accuracy: bad inputs");
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t b = 0; b < ids.size(); b += kChunk) {
    const std::size_t e = std::min(ids.size(), b + kChunk);
    Tensor logits = net.forward(stack_images(store, ids.subspan(b, e - b)), Mode::Eval);
    for (std::size_t i = 0; i < e - b; ++i) {
      auto row = logits.row(i);
      const auto arg = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (arg == labels[b + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ids.size());
}

// --- logistic regression ------------------------------------------------------------------------

std::vector<ParamRef> LrModel::parameters() {
  return {{"lr.w", &fc.weights, &fc.grad_weights, &fc.momentum_weights, false, true},
          {"lr.b", &fc.bias, &fc.grad_bias, &fc.momentum_bias, false, false}};
}

std::vector<double> LrModel::predict(const SparseBatch& v) const {
  Tensor z = sparse_fc_forward(v, fc);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = sigmoid(z[i]);
  return out;
}

LrModel train_lr_baseline(std::span<const Impression> impressions, std::size_t dim, const LrConfig& cfg) {
  cfg.validate();
  LrModel m(dim);
  auto params = m.parameters();
  const auto& o = cfg.optim;
  ShuffledBatcher batches(impressions, dim, nullptr, cfg.batch_size, cfg.seed);
  for (std::uint64_t t = 0; t < o.max_iters; ++t) {
    GroupedBatch b = batches.batch_at(t);
    Tensor z = sparse_fc_forward(b.features, m.fc);
    z.reshape({b.rows()});
    LossResult lr = sigmoid_logloss(z, b.labels);
    if (!std::isfinite(lr.loss)) throw DivergenceError("lr baseline diverged at iteration " + std::to_string(t), t);
    sparse_fc_backward(b.features, m.fc, lr.grad.reshaped({b.rows(), 1}));
    sgd_step(params, o, lr_at(o, t));
  }
  return m;
}

std::vector<double> predict_lr(const LrModel& m, std::span<const Impression> rows) {
  return m.predict(features_of(rows, m.dim()));
}

Checkpoint lr_checkpoint(const LrModel& m) {
  Checkpoint c;
  c.meta = json{{"kind", "lr"}, {"dim", m.dim()}};
  c.put("lr.w", m.fc.weights);
  c.put("lr.b", m.fc.bias);
  return c;
}

LrModel load_lr(const Checkpoint& c) {
  if (c.meta.value("kind", "") != "lr") throw FormatError("checkpoint is not an lr model");
  LrModel m(c.meta.at("dim").get<std::size_t>());
  const Tensor& w = c.tensor("lr.w");
  const Tensor& b = c.tensor("lr.b");
  if (w.shape() != m.fc.weights.shape() || b.shape() != m.fc.bias.shape()) throw FormatError("lr checkpoint: bad shapes");
  m.fc.weights = w;
  m.fc.bias = b;
  return m;
}

}  // namespace deepctr
