#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "commands.hpp"

using namespace deepctr::cli;

int main(int argc, char** argv) {
  CLI::App app{"deepctr: image + basic-feature CTR models"};
  app.require_subcommand(1);

  std::string config, out = "out";
  std::optional<std::uint64_t> seed;
  auto common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", config, "run config (JSON)");
    if (config_required) opt->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "run seed (overrides the config)");
    sub->add_option("--out", out, "output directory");
  };

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  common(gen, false);

  auto* pre = app.add_subcommand("pretrain", "pretrain the convnet on image categories");
  common(pre, true);

  auto* train = app.add_subcommand("train", "train deepctr, dnn or lr (config.model)");
  common(train, true);
  std::string resume;
  std::uint64_t stop_at = ~std::uint64_t{0};
  train->add_option("--resume", resume, "resume from a state.ckpt")->check(CLI::ExistingFile);
  train->add_option("--stop-at", stop_at, "stop after this many iterations (resumable)");

  auto* eval = app.add_subcommand("eval", "evaluate one checkpoint or an ensemble");
  common(eval, true);
  std::vector<std::string> checkpoints;
  std::string baseline, split;
  eval->add_option("--checkpoint", checkpoints, "model checkpoint(s); several are averaged")->required();
  eval->add_option("--baseline", baseline, "baseline eval_report.json for relative metrics")->check(CLI::ExistingFile);
  eval->add_option("--split", split, "train, valid, test or test_cold");

  auto* sal = app.add_subcommand("saliency", "gradient saliency heatmaps");
  common(sal, true);
  SaliencyOptions so;
  std::string sal_ckpt, features;
  sal->add_option("--checkpoint", sal_ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  sal->add_option("--image", so.image_ids, "image id(s)")->required();
  sal->add_option("--features", features, "basic features idx:val,... (default: first impression of the image)");

  auto* bench = app.add_subcommand("bench", "sparse vs dense and grouped vs flat timings");
  common(bench, false);
  BenchOptions bo;
  bench->add_option("--dim", bo.dim);
  bench->add_option("--nnz", bo.nnz);
  bench->add_option("--batch", bo.batch);
  bench->add_option("--fc-out", bo.out);
  bench->add_option("--reps", bo.reps);
  bench->add_option("-n", bo.n);
  bench->add_option("-k", bo.k);
  bench->add_option("--image-size", bo.image_size);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      std::optional<fs::path> spec;
      if (!config.empty()) spec = config;
      cmd_generate(spec, out, seed.value_or(1));
    } else if (*pre) {
      cmd_pretrain(load_run_config(config, seed), out);
    } else if (*train) {
      TrainOptions o;
      if (!resume.empty()) o.resume = resume;
      o.stop_at = stop_at;
      cmd_train(load_run_config(config, seed), out, o);
    } else if (*eval) {
      RunConfig c = load_run_config(config, seed);
      if (!split.empty()) c.eval_split = split;
      std::vector<fs::path> paths(checkpoints.begin(), checkpoints.end());
      std::optional<fs::path> base;
      if (!baseline.empty()) base = baseline;
      cmd_eval(c, paths, base, out);
    } else if (*sal) {
      so.checkpoint = sal_ckpt;
      if (!features.empty()) so.features = features;
      cmd_saliency(load_run_config(config, seed), so, out);
    } else if (*bench) {
      bo.seed = seed.value_or(1);
      cmd_bench(bo, out);
    }
  } catch (const std::exception& e) {
    std::cerr << "deepctr: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
