#include "commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "deepctr/checkpoint.hpp"
#include "deepctr/kernels.hpp"
#include "deepctr/metrics.hpp"
#include "deepctr/saliency.hpp"
#include "deepctr/sparse.hpp"

namespace deepctr::cli {

namespace {

// Sub-streams for seeds derived from the run seed.
constexpr std::uint64_t kPretrainSeed = 101;
constexpr std::uint64_t kLrSeed = 102;

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::span<const Impression> split_rows(const Dataset& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "valid") return d.valid;
  if (split == "test") return d.test;
  if (split == "test_cold") return d.test_cold;
  throw ConfigError("eval_split must be train, valid, test or test_cold, got '" + split + "'");
}

Checkpoint convnet_checkpoint(ConvTrunk& trunk, const NetConfig& cfg) {
  std::vector<ParamRef> params;
  std::vector<BufferRef> buffers;
  trunk.collect(params, buffers);
  Checkpoint c;
  c.meta = json{{"kind", "convnet"}, {"net", cfg}};
  store_state(c, params, buffers, "", false);
  return c;
}

void load_convnet(const fs::path& path, ConvTrunk& trunk) {
  const Checkpoint c = checkpoint_load(path);
  if (c.meta.value("kind", "") != "convnet") throw FormatError(path.string() + ": not a convnet checkpoint");
  std::vector<ParamRef> params;
  std::vector<BufferRef> buffers;
  trunk.collect(params, buffers);
  restore_state(c, params, buffers);
}

}  // namespace

// --- run config ----------------------------------------------------------------------

RunConfig run_config_from_json(const json& j, std::optional<std::uint64_t> seed_override) {
  RunConfig c;
  StrictReader r(j, "config");
  std::string dataset, pretrained;
  r.get("dataset", dataset).get("model", c.model).get("seed", c.seed).get("pretrained", pretrained).get("eval_split", c.eval_split);
  if (seed_override) c.seed = *seed_override;
  if (r.has("net")) c.net = r.at("net");
  if (!c.net.is_object()) throw ConfigError("config.net: expected an object");
  bool train_seed = false, pretrain_seed = false, lr_seed = false;
  if (r.has("train")) {
    c.train = train_config_from_json(r.at("train"), c.train);
    train_seed = r.at("train").contains("seed");
  }
  if (r.has("pretrain")) {
    c.pretrain = pretrain_config_from_json(r.at("pretrain"), c.pretrain);
    pretrain_seed = r.at("pretrain").contains("seed");
  }
  if (r.has("lr")) {
    c.lr = lr_config_from_json(r.at("lr"), c.lr);
    lr_seed = r.at("lr").contains("seed");
  }
  r.finish();
  // A --seed flag always wins; otherwise explicit sub-seeds are kept.
  if (seed_override || !train_seed) c.train.seed = c.seed;
  if (seed_override || !pretrain_seed) c.pretrain.seed = derive_seed(c.seed, kPretrainSeed);
  if (seed_override || !lr_seed) c.lr.seed = derive_seed(c.seed, kLrSeed);
  if (c.model != "deepctr" && c.model != "dnn" && c.model != "lr") {
    throw ConfigError("config.model must be deepctr, dnn or lr, got '" + c.model + "'");
  }
  c.dataset = dataset;
  c.pretrained = pretrained;
  split_rows(Dataset{}, c.eval_split);  // validates the name
  return c;
}

RunConfig load_run_config(const fs::path& path, std::optional<std::uint64_t> seed_override) {
  const json j = read_json_file(path);
  RunConfig c = run_config_from_json(j, seed_override);
  // relative dataset / checkpoint paths are relative to the config file
  const fs::path base = path.parent_path();
  if (!c.dataset.empty() && c.dataset.is_relative()) c.dataset = base / c.dataset;
  if (!c.pretrained.empty() && c.pretrained.is_relative()) c.pretrained = base / c.pretrained;
  return c;
}

json to_json(const RunConfig& c) {
  json j{{"dataset", c.dataset.string()},
         {"model", c.model},
         {"seed", c.seed},
         {"net", c.net},
         {"train", c.train},
         {"pretrain", c.pretrain},
         {"lr", c.lr},
         {"eval_split", c.eval_split}};
  if (!c.pretrained.empty()) j["pretrained"] = c.pretrained.string();
  return j;
}

NetConfig resolve_net(const RunConfig& c, const DatasetMeta& meta) {
  NetConfig n;
  n.channels = meta.channels;
  n.height = meta.height;
  n.width = meta.width;
  n.basic_dim = meta.dim;
  if (meta.n_categories >= 2) n.n_categories = meta.n_categories;
  n.crop = std::min({n.crop, n.height, n.width});
  n = net_config_from_json(c.net, n);
  if (c.model == "dnn") n.use_convnet = false;
  n.validate();
  if (n.channels != meta.channels || n.height != meta.height || n.width != meta.width || n.basic_dim != meta.dim) {
    throw ConfigError("config.net: image shape / basic_dim disagree with the dataset");
  }
  return n;
}

void write_resolved(const fs::path& out, const json& resolved) { write_json_file(out / "resolved_config.json", resolved); }

// --- generate ------------------------------------------------------------------------------

void cmd_generate(const std::optional<fs::path>& spec_path, const fs::path& out, std::uint64_t seed) {
  SynthSpec spec;
  if (spec_path) spec = synth_spec_from_json(read_json_file(*spec_path));
  spec.validate();
  fs::create_directories(out);
  const auto d = synth_generate(spec, seed, out);
  write_resolved(out, json{{"synth", spec}, {"seed", seed}});
  std::cout << "generated " << d.impressions.size() << " impressions over " << d.images.size() << " images in "
            << out.string() << '\n';
}

// --- pretrain ----------------------------------------------------------------------------

void cmd_pretrain(const RunConfig& c, const fs::path& out) {
  if (c.dataset.empty()) throw ConfigError("config.dataset is required");
  const Dataset data = load_dataset(c.dataset);
  NetConfig net_cfg = resolve_net(c, data.meta);
  net_cfg.use_convnet = true;
  fs::create_directories(out);
  write_resolved(out, json{{"run", to_json(c)}, {"net", net_cfg}});

  Rng init(derive_seed(c.seed, streams::kInit));
  Networks nets = build_networks(net_cfg, init);
  std::vector<std::string> ids;
  std::vector<std::size_t> labels;
  pretrain_set(data, ids, labels);
  const auto t0 = std::chrono::steady_clock::now();
  const PretrainResult res = pretrain_convnet(nets.pretrain, data.images, ids, labels, c.pretrain, net_cfg.crop);

  checkpoint_save(out / "convnet.ckpt", convnet_checkpoint(*nets.pretrain.trunk(), net_cfg));
  {
    std::ofstream log(out / "pretrain_log.tsv", std::ios::trunc);
    char buf[96];
    for (const auto& [iter, loss] : res.log) {
      std::snprintf(buf, sizeof buf, "%llu\t%.17g\n", static_cast<unsigned long long>(iter), loss);
      log << buf;
    }
  }
  write_json_file(out / "pretrain_report.json", json{{"train_accuracy", res.train_accuracy}, {"n_images", ids.size()}});
  std::cout << "pretrained on " << ids.size() << " images, train accuracy " << res.train_accuracy << " ("
            << seconds_since(t0) << " s)\n";
}

// --- train ----------------------------------------------------------------------------------

void cmd_train(const RunConfig& c, const fs::path& out, const TrainOptions& opt) {
  if (c.dataset.empty()) throw ConfigError("config.dataset is required");
  const Dataset data = load_dataset(c.dataset);
  fs::create_directories(out);
  const auto t0 = std::chrono::steady_clock::now();

  if (c.model == "lr") {
    write_resolved(out, json{{"run", to_json(c)}});
    const LrModel m = train_lr_baseline(data.train, data.meta.dim, c.lr);
    checkpoint_save(out / "model.ckpt", lr_checkpoint(m));
    std::cout << "trained lr baseline (" << seconds_since(t0) << " s)\n";
    return;
  }

  const NetConfig net_cfg = resolve_net(c, data.meta);
  write_resolved(out, json{{"run", to_json(c)}, {"net", net_cfg}});
  Rng init(derive_seed(c.seed, streams::kInit));
  Networks nets = build_networks(net_cfg, init);
  DeepCtrNet& net = nets.deepctr;

  TrainState state;
  if (opt.resume) {
    state = restore_train_checkpoint(checkpoint_load(*opt.resume), net);
  } else if (!c.pretrained.empty() && net_cfg.use_convnet) {
    load_convnet(c.pretrained, *net.trunk());
  }

  try {
    state = train_deepctr(net, data, c.train, std::move(state), opt.stop_at);
  } catch (const DivergenceError&) {
    // net has been rolled back to its best parameters
    checkpoint_save(out / "model.ckpt", model_checkpoint(net));
    throw;
  }
  write_train_log(out / "train_log.tsv", state.log);
  checkpoint_save(out / "state.ckpt", train_checkpoint(net, c.train, state));
  restore_state(state.best, net.parameters(), net.buffers());
  checkpoint_save(out / "model.ckpt", model_checkpoint(net));
  std::cout << "trained " << c.model << " to iteration " << state.iteration << ", best eval logloss "
            << state.best_eval_logloss << " at " << state.best_iter << " (" << seconds_since(t0) << " s)\n";
}

// --- eval -----------------------------------------------------------------------------------

EvalReport cmd_eval(const RunConfig& c, std::span<const fs::path> checkpoints, const std::optional<fs::path>& baseline,
                    const fs::path& out) {
  if (c.dataset.empty()) throw ConfigError("config.dataset is required");
  if (checkpoints.empty()) throw ConfigError("eval needs at least one checkpoint");
  const Dataset data = load_dataset(c.dataset);
  const auto rows = split_rows(data, c.eval_split);
  if (rows.empty()) throw std::runtime_error("eval split '" + c.eval_split + "' is empty");

  std::vector<double> mean(rows.size(), 0.0);
  for (const auto& path : checkpoints) {
    const Checkpoint ck = checkpoint_load(path);
    std::vector<double> p;
    if (ck.meta.value("kind", "") == "lr") {
      p = predict_lr(load_lr(ck), rows);
    } else {
      DeepCtrNet net = load_deepctr(ck);
      p = predict_deepctr(net, rows, &data.images);
    }
    for (std::size_t i = 0; i < p.size(); ++i) mean[i] += p[i];
  }
  for (auto& v : mean) v /= static_cast<double>(checkpoints.size());

  std::optional<EvalReport> base;
  if (baseline) base = eval_report_from_json(read_json_file(*baseline));
  const EvalReport report = evaluate(mean, labels_of(rows), base ? &*base : nullptr);

  fs::create_directories(out);
  json ckpts = json::array();
  for (const auto& p : checkpoints) ckpts.push_back(p.string());
  write_resolved(out, json{{"run", to_json(c)}, {"checkpoints", ckpts},
                           {"baseline", baseline ? baseline->string() : std::string()}});
  write_json_file(out / "eval_report.json", report);
  std::cout << json(report).dump() << '\n';
  return report;
}

// --- saliency --------------------------------------------------------------------------------

void cmd_saliency(const RunConfig& c, const SaliencyOptions& opt, const fs::path& out) {
  if (c.dataset.empty()) throw ConfigError("config.dataset is required");
  if (opt.image_ids.empty()) throw ConfigError("saliency needs at least one image id");
  const Dataset data = load_dataset(c.dataset);
  DeepCtrNet net = load_deepctr(checkpoint_load(opt.checkpoint));

  std::optional<SparseRow> fixed;
  if (opt.features) {
    std::istringstream line("x\t0\t" + *opt.features + "\n");
    fixed = parse_impressions(line, data.meta.dim, "--features").at(0).features;
  }
  std::map<std::string, const PlantedPatch*> patch_of;
  for (const auto& p : data.patches) patch_of[p.image_id] = &p;

  fs::create_directories(out);
  json summary = json::array();
  for (const auto& id : opt.image_ids) {
    if (!data.images.contains(id)) throw std::runtime_error("saliency: unknown image id '" + id + "'");
    SparseRow row;
    if (fixed) {
      row = *fixed;
    } else {
      const Impression* first = nullptr;
      for (const auto* split : {&data.test, &data.valid, &data.train, &data.test_cold}) {
        for (const auto& imp : *split)
          if (!first && imp.image_id == id) first = &imp;
      }
      if (!first) throw std::runtime_error("saliency: no impression shows image '" + id + "'; pass --features");
      row = first->features;
    }
    SaliencyMap m = saliency_from_gradient(input_gradient(net, data.images.get(id), row));
    m.image_id = id;
    m.features = row;
    export_heatmap(m, out / (id + ".pgm"));
    json entry{{"image_id", id}, {"heatmap", id + ".pgm"}};
    if (auto it = patch_of.find(id); it != patch_of.end()) {
      const PlantedPatch& p = *it->second;
      entry["patch_mass_ratio"] = region_mass_ratio(m, p.x, p.y, p.size);
    }
    summary.push_back(entry);
  }
  write_resolved(out, json{{"run", to_json(c)}, {"checkpoint", opt.checkpoint.string()}, {"image_ids", opt.image_ids}});
  write_json_file(out / "saliency.json", summary);
  std::cout << summary.dump() << '\n';
}

// --- bench ---------------------------------------------------------------------------------------

SparseDenseTiming time_sparse_vs_dense(std::size_t dim, std::size_t nnz_per_row, std::size_t batch, std::size_t out,
                                       std::size_t reps, std::uint64_t seed) {
  if (nnz_per_row > dim || reps == 0) throw std::invalid_argument("time_sparse_vs_dense: bad arguments");
  Rng rng(seed);
  LayerParams sp = LayerParams::fully_connected(dim, out);
  sp.init_he(rng);
  LayerParams dp = sp;

  std::vector<SparseRow> rows(batch);
  for (auto& r : rows) {
    while (r.size() < nnz_per_row) {
      const std::size_t j = rng.uniform_index(dim);
      bool dup = false;
      for (const auto& e : r) dup |= e.index == j;
      if (!dup) r.push_back({j, rng.normal()});
    }
  }
  const SparseBatch v = csr_from_rows(rows, dim);
  Tensor grad_out({batch, out});
  for (auto& g : grad_out.values()) g = rng.normal();

  SparseDenseTiming t{dim, nnz_per_row, batch, out, 1e300, 1e300, 0, 0, 0, 0};
  Tensor ys, yd;
  for (std::size_t r = 0; r < reps; ++r) {
    sp.zero_grad();
    memory::reset_peak();
    const std::size_t base = memory::current_bytes();
    const auto t0 = std::chrono::steady_clock::now();
    ys = sparse_fc_forward(v, sp);
    sparse_fc_backward(v, sp, grad_out);
    t.sparse_seconds = std::min(t.sparse_seconds, seconds_since(t0));
    t.sparse_peak_bytes = memory::peak_bytes() - base;
  }

  // Dense path on the densified input: Y = XW + b, dW = X^T G, db = colsum G.
  {
    memory::reset_peak();
    const std::size_t base = memory::current_bytes();
    Tensor x = densify(v);
    for (std::size_t r = 0; r < std::max<std::size_t>(1, reps / 2); ++r) {
      dp.zero_grad();
      const auto t0 = std::chrono::steady_clock::now();
      yd = Tensor({batch, out});
      kernels::gemm_nn(batch, dim, out, x.data(), dp.weights.data(), yd.data());
      for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j = 0; j < out; ++j) yd.at(i, j) += dp.bias[j];
      kernels::gemm_tn(dim, batch, out, x.data(), grad_out.data(), dp.grad_weights.data());
      for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j = 0; j < out; ++j) dp.grad_bias[j] += grad_out.at(i, j);
      t.dense_seconds = std::min(t.dense_seconds, seconds_since(t0));
    }
    t.dense_peak_bytes = memory::peak_bytes() - base;
  }
  t.speedup = t.dense_seconds / t.sparse_seconds;
  t.max_abs_diff = std::max({max_abs_diff(ys, yd), max_abs_diff(sp.grad_weights, dp.grad_weights),
                             max_abs_diff(sp.grad_bias, dp.grad_bias)});
  return t;
}

SamplingTiming time_grouped_vs_flat(std::size_t n, std::size_t k, std::size_t image_size, std::size_t reps,
                                    std::uint64_t seed) {
  if (reps == 0) throw std::invalid_argument("time_grouped_vs_flat: reps must be positive");
  Rng rng(seed);
  NetConfig cfg;
  cfg.height = cfg.width = image_size;
  cfg.crop = std::min(cfg.crop, image_size);
  cfg.basic_dim = 1000;
  Networks nets = build_networks(cfg, rng);

  auto make_batch = [&](std::size_t images, std::size_t per_image) {
    GroupedBatch b;
    b.k = per_image;
    b.images = Tensor({images, cfg.channels, image_size, image_size});
    for (auto& p : b.images.values()) p = rng.uniform();
    b.features = SparseBatch(cfg.basic_dim);
    for (std::size_t i = 0; i < images; ++i) {
      b.image_ids.push_back("img" + std::to_string(i));
      for (std::size_t j = 0; j < per_image; ++j) {
        SparseRow row{{rng.uniform_index(500), 1.0}, {500 + rng.uniform_index(500), 1.0}};
        b.features.append_row(row);
        b.labels.push_back(rng.bernoulli(0.3) ? 1.0 : 0.0);
      }
    }
    return b;
  };
  const GroupedBatch grouped = make_batch(n, k);
  const GroupedBatch flat = make_batch(n * k, 1);

  SamplingTiming t{n, k, 1e300, 1e300};
  for (std::size_t r = 0; r < reps; ++r) {
    Rng d1(r), d2(r);
    auto t0 = std::chrono::steady_clock::now();
    forward_backward(nets.deepctr, grouped, 0.0, GradMode::Paper, d1);
    t.grouped_seconds = std::min(t.grouped_seconds, seconds_since(t0));
    t0 = std::chrono::steady_clock::now();
    forward_backward(nets.deepctr, flat, 0.0, GradMode::Paper, d2);
    t.flat_seconds = std::min(t.flat_seconds, seconds_since(t0));
  }
  return t;
}

void cmd_bench(const BenchOptions& o, const fs::path& out) {
  const auto sd = time_sparse_vs_dense(o.dim, o.nnz, o.batch, o.out, o.reps, o.seed);
  const auto gf = time_grouped_vs_flat(o.n, o.k, o.image_size, o.reps, o.seed);
  json report{{"sparse_vs_dense",
               {{"dim", sd.dim},
                {"nnz_per_row", sd.nnz_per_row},
                {"batch", sd.batch},
                {"out", sd.out},
                {"sparse_seconds", sd.sparse_seconds},
                {"dense_seconds", sd.dense_seconds},
                {"speedup", sd.speedup},
                {"sparse_peak_bytes", sd.sparse_peak_bytes},
                {"dense_peak_bytes", sd.dense_peak_bytes},
                {"max_abs_diff", sd.max_abs_diff}}},
              {"grouped_vs_flat",
               {{"n", gf.n},
                {"k", gf.k},
                {"grouped_seconds", gf.grouped_seconds},
                {"flat_seconds", gf.flat_seconds},
                {"speedup", gf.flat_seconds / gf.grouped_seconds}}}};
  fs::create_directories(out);
  write_resolved(out, json{{"bench", {{"dim", o.dim}, {"nnz", o.nnz}, {"batch", o.batch}, {"out", o.out},
                                      {"reps", o.reps}, {"n", o.n}, {"k", o.k}, {"image_size", o.image_size},
                                      {"seed", o.seed}}}});
  write_json_file(out / "bench.json", report);

  std::printf("%-28s %12s %12s %10s\n", "layer (fwd+bwd)", "sparse s", "dense s", "speedup");
  std::printf("%-28s %12.5f %12.5f %9.1fx\n", ("fc " + std::to_string(o.dim) + "-dim input").c_str(), sd.sparse_seconds, sd.dense_seconds, sd.speedup);
  std::printf("%-28s %12.1f %12.1f\n", "transient memory (MB)", static_cast<double>(sd.sparse_peak_bytes) / 1e6,
              static_cast<double>(sd.dense_peak_bytes) / 1e6);
  std::printf("%-28s %12s %12s %10s\n", "iteration (fwd+bwd)", "grouped s", "flat s", "speedup");
  std::printf("%-28s %12.4f %12.4f %9.1fx\n", ("n=" + std::to_string(o.n) + " k=" + std::to_string(o.k)).c_str(),
              gf.grouped_seconds, gf.flat_seconds, gf.flat_seconds / gf.grouped_seconds);
}

}  // namespace deepctr::cli
