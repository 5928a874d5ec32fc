#include <cstdlib>
#include <fstream>
#include <sstream>

#include "commands.hpp"
#include "doctest.h"
#include "util.hpp"

using namespace deepctr;
using namespace deepctr::cli;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::trunc);
  out << s;
}

json small_spec() {
  SynthSpec s;
  s.n_images = 24;
  s.fixed_impressions_per_image = 10;
  s.image_size = 8;
  s.patch_size = 3;
  s.images_per_group = 2;
  s.n_zones = 5;
  s.n_targets = 3;
  s.n_noise = 10;
  return json(s);
}

json small_net() {
  return json{{"first_kernel", 3}, {"first_channels", 4}, {"groups", json::array({{{"layers", 1}, {"channels", 4}, {"downsample", true}}})},
              {"embed_dim", 4},    {"basic_hidden", 8},   {"comb_hidden", {8}},
              {"pretrain_hidden", 8}};
}

// generate a small dataset in dir/data and return its path
fs::path make_dataset(const testutil::TempDir& dir) {
  write_text(dir / "spec.json", small_spec().dump());
  cmd_generate(dir / "spec.json", dir / "data", 3);
  return dir / "data";
}

int run_tool(const std::string& args) {
  const std::string cmd = std::string(DEEPCTR_TOOL_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("generate: smallest spec") {
    testutil::TempDir dir("gen-min");
    SynthSpec s;
    s.n_images = 2;
    s.fixed_impressions_per_image = 2;
    s.image_size = 4;
    s.patch_size = 2;
    s.images_per_group = 1;
    s.cold_group_fraction = 0.0;
    write_text(dir / "spec.json", json(s).dump());
    cmd_generate(dir / "spec.json", dir / "out", 1);
    CHECK(line_count(dir / "out" / "impressions.tsv") == 4);
    CHECK(fs::exists(dir / "out" / "resolved_config.json"));
    CHECK(fs::exists(dir / "out" / "dataset.json"));
    const json resolved = json::parse(slurp(dir / "out" / "resolved_config.json"));
    CHECK(resolved.at("seed") == 1);
    CHECK(synth_spec_from_json(resolved.at("synth")).n_images == 2);
  }

  TEST_CASE("generate: same seed, same bytes; other seed differs") {
    testutil::TempDir dir("gen-det");
    SynthSpec s;
    s.n_images = 100;
    s.fixed_impressions_per_image = 10;
    s.image_size = 8;
    s.patch_size = 3;
    write_text(dir / "spec.json", json(s).dump());
    cmd_generate(dir / "spec.json", dir / "a", 5);
    cmd_generate(dir / "spec.json", dir / "b", 5);
    cmd_generate(dir / "spec.json", dir / "c", 6);
    CHECK(line_count(dir / "a" / "impressions.tsv") == 1000);
    for (const char* f : {"impressions.tsv", "train.tsv", "test.tsv", "truth.tsv", "patches.tsv", "dataset.json"})
      CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
    CHECK(slurp(dir / "a" / "images" / "img00000.ppm") == slurp(dir / "b" / "images" / "img00000.ppm"));
    CHECK(slurp(dir / "a" / "impressions.tsv") != slurp(dir / "c" / "impressions.tsv"));
  }

  TEST_CASE("run config parsing") {
    CHECK_THROWS_AS(run_config_from_json(json{{"datset", "x"}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(json{{"model", "svm"}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(json{{"train", {{"optim", {{"lr", 0.1}}}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(json{{"eval_split", "holdout"}}), ConfigError);
    const RunConfig a = run_config_from_json(json{{"seed", 4}});
    const RunConfig b = run_config_from_json(json{{"seed", 9}}, 4);
    CHECK(a.train.seed == b.train.seed);
    CHECK(a.pretrain.seed == b.pretrain.seed);
    CHECK(a.pretrain.seed != a.lr.seed);
    const RunConfig back = run_config_from_json(to_json(a));
    CHECK(to_json(back) == to_json(a));
  }

  TEST_CASE("train with zero iterations writes the initial network") {
    testutil::TempDir dir("train0");
    const fs::path data = make_dataset(dir);
    json cfg{{"dataset", data.string()}, {"model", "deepctr"}, {"seed", 2}, {"net", small_net()},
             {"train", {{"n", 2}, {"k", 4}, {"optim", {{"max_iters", 0}}}}}};
    const RunConfig c = run_config_from_json(cfg);
    cmd_train(c, dir / "run");
    CHECK(fs::exists(dir / "run" / "resolved_config.json"));
    const NetConfig nc = resolve_net(c, load_dataset_meta(data));
    Rng init(derive_seed(2, streams::kInit));
    Networks nets = build_networks(nc, init);
    CHECK(checkpoint_bytes(checkpoint_load(dir / "run" / "model.ckpt")) == checkpoint_bytes(model_checkpoint(nets.deepctr)));
    CHECK(line_count(dir / "run" / "train_log.tsv") == 0);
  }

  TEST_CASE("train, stop, resume gives the uninterrupted checkpoint") {
    testutil::TempDir dir("resume");
    const fs::path data = make_dataset(dir);
    json cfg{{"dataset", data.string()}, {"seed", 3}, {"net", small_net()},
             {"train", {{"n", 2}, {"k", 4}, {"optim", {{"max_iters", 8}, {"eval_every", 4}}}}}};
    const RunConfig c = run_config_from_json(cfg);
    cmd_train(c, dir / "full");
    cmd_train(c, dir / "half", {{}, 4});
    cmd_train(c, dir / "rest", {dir / "half" / "state.ckpt", ~std::uint64_t{0}});
    CHECK(slurp(dir / "full" / "state.ckpt") == slurp(dir / "rest" / "state.ckpt"));
    CHECK(slurp(dir / "full" / "model.ckpt") == slurp(dir / "rest" / "model.ckpt"));
    CHECK(slurp(dir / "full" / "train_log.tsv") == slurp(dir / "rest" / "train_log.tsv"));
  }

  TEST_CASE("eval against its own report is a zero improvement") {
    testutil::TempDir dir("eval");
    const fs::path data = make_dataset(dir);
    json cfg{{"dataset", data.string()}, {"model", "lr"}, {"lr", {{"optim", {{"max_iters", 200}}}}},
             {"eval_split", "train"}};
    const RunConfig c = run_config_from_json(cfg);
    cmd_train(c, dir / "lr");
    const std::vector<fs::path> ck{dir / "lr" / "model.ckpt"};
    const EvalReport first = cmd_eval(c, ck, std::nullopt, dir / "e1");
    REQUIRE(first.auc > 0.5);
    const EvalReport again = cmd_eval(c, ck, dir / "e1" / "eval_report.json", dir / "e2");
    CHECK(*again.relative_auc_pct == 0.0);
    CHECK(*again.relative_logloss_pct == 0.0);
    // an ensemble of one model twice is that model
    const std::vector<fs::path> twice{ck[0], ck[0]};
    CHECK(cmd_eval(c, twice, std::nullopt, dir / "e3").auc == first.auc);
  }

  TEST_CASE("saliency writes one heatmap per image") {
    testutil::TempDir dir("sal");
    const fs::path data = make_dataset(dir);
    json cfg{{"dataset", data.string()}, {"net", small_net()},
             {"train", {{"n", 2}, {"k", 4}, {"optim", {{"max_iters", 2}, {"eval_every", 2}}}}}};
    const RunConfig c = run_config_from_json(cfg);
    cmd_train(c, dir / "run");
    SaliencyOptions so;
    so.checkpoint = dir / "run" / "model.ckpt";
    so.image_ids = {"img00000", "img00001"};
    cmd_saliency(c, so, dir / "sal");
    std::size_t pgm = 0;
    for (const auto& e : fs::directory_iterator(dir / "sal"))
      if (e.path().extension() == ".pgm") ++pgm;
    CHECK(pgm == 2);
    so.image_ids = {"nope"};
    CHECK_THROWS(cmd_saliency(c, so, dir / "sal2"));
  }

  TEST_CASE("the executable reports errors with a non-zero exit") {
    testutil::TempDir dir("exe");
    write_text(dir / "bad.json", R"({"datset": "x"})");
    CHECK(run_tool("train --config " + (dir / "bad.json").string() + " --out " + (dir / "o").string()) == 1);
    CHECK(run_tool("train") != 0);
    CHECK(run_tool("frobnicate") != 0);
    write_text(dir / "spec.json", small_spec().dump());
    CHECK(run_tool("generate --config " + (dir / "spec.json").string() + " --out " + (dir / "g").string()) == 0);
    CHECK(line_count(dir / "g" / "impressions.tsv") == 240);
  }
}
