#include <cmath>

#include "deepctr/network.hpp"
#include "deepctr/optim.hpp"
#include "doctest.h"
#include "gradcheck.hpp"
#include "util.hpp"

using namespace deepctr;
using gradcheck::grad_rel_diff;
using gradcheck::grads_of;
using gradcheck::tiny_batch;
using gradcheck::tiny_config;
using gradcheck::unroll;

namespace {

std::size_t closed_form_count(const NetConfig& c, bool pretrain) {
  auto conv = [](std::size_t in, std::size_t out, std::size_t k) { return out * in * k * k + out + 2 * out; };
  std::size_t n = conv(c.channels, c.first_channels, c.first_kernel);
  std::size_t ch = c.first_channels;
  for (const auto& g : c.groups) {
    for (std::size_t l = 0; l < g.layers; ++l) {
      n += conv(ch, g.channels, 3);
      ch = g.channels;
    }
  }
  if (pretrain) {
    const std::size_t h = c.pretrain_hidden;
    return n + (ch * h + h) + (h * h + h) + (h * c.n_categories + c.n_categories);
  }
  n += ch * c.embed_dim + c.embed_dim;
  n += c.basic_dim * c.basic_hidden + c.basic_hidden;
  std::size_t in = c.embed_dim + c.basic_hidden;
  n += 2 * in;  // comb BN
  for (std::size_t w : c.comb_hidden) {
    n += in * w + w;
    in = w;
  }
  return n + in + 1;
}

NetConfig small_default() {
  NetConfig c;
  c.basic_dim = 300;
  return c;
}

}  // namespace

TEST_SUITE("network") {
  TEST_CASE("parameter counts follow the layer shapes") {
    const NetConfig c = small_default();
    Rng rng(1);
    Networks nets = build_networks(c, rng);
    CHECK(parameter_count(nets.deepctr.parameters()) == closed_form_count(c, false));
    CHECK(parameter_count(nets.pretrain.parameters()) == closed_form_count(c, true));
  }

  TEST_CASE("combnet input width is embed_dim + basic_hidden") {
    NetConfig c = small_default();
    c.basic_hidden = 40;
    Rng rng(2);
    Networks nets = build_networks(c, rng);
    CHECK(c.comb_input() == 168);
    CHECK(nets.deepctr.comb_layers()[0].weights.dim(0) == 168);
    CHECK(nets.deepctr.comb_bn().channels() == 168);
    CHECK(nets.deepctr.comb_layers().back().weights.dim(1) == 1);
  }

  TEST_CASE("same seed builds identical networks; init follows the rules") {
    const NetConfig c = small_default();
    Rng r1(3), r2(3);
    Networks a = build_networks(c, r1), b = build_networks(c, r2);
    auto pa = a.deepctr.parameters(), pb = b.deepctr.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].name == pb[i].name);
      CHECK(max_abs_diff(*pa[i].value, *pb[i].value) == 0.0);
      if (pa[i].name.ends_with(".b") || pa[i].name.ends_with(".beta")) CHECK(squared_norm(*pa[i].value) == 0.0);
      if (pa[i].name.ends_with(".gamma"))
        for (double v : pa[i].value->values()) CHECK(v == 1.0);
      if (pa[i].name.ends_with(".w")) CHECK(squared_norm(*pa[i].value) > 0.0);
      CHECK(pa[i].decay == (pa[i].name.ends_with(".w") || pa[i].name.ends_with(".gamma")));
      CHECK(pa[i].conv == pa[i].name.starts_with("trunk."));
    }
  }

  TEST_CASE("pretraining updates the shared trunk in place") {
    NetConfig c = tiny_config();
    Rng rng(4);
    Networks nets = build_networks(c, rng);
    const Tensor before = nets.deepctr.trunk()->layers()[0].conv.weights;
    const Tensor images = testutil::random_uniform({4, 3, 6, 6}, rng);
    const std::vector<std::size_t> labels{0, 1, 2, 1};
    pretrain_forward_backward(nets.pretrain, images, labels);
    OptimConfig o;
    o.conv_lr_scale = 1.0;
    sgd_step(nets.pretrain.parameters(), o, 0.1);
    const Tensor& after = nets.deepctr.trunk()->layers()[0].conv.weights;
    CHECK(max_abs_diff(before, after) > 0.0);
    CHECK(nets.deepctr.trunk().get() == nets.pretrain.trunk().get());
  }

  TEST_CASE("invalid configurations") {
    NetConfig c;
    c.dropout_rate = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.embed_dim = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.groups.push_back({0, 8, false});
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_THROWS_AS(net_config_from_json(json{{"widths", 3}}), ConfigError);
    NetConfig d = small_default();
    d.groups = {{3, 8, true}, {1, 4, false}};
    d.comb_hidden = {7};
    CHECK(net_config_from_json(json(d)) == d);
  }

  TEST_CASE("convnet forward") {
    NetConfig c = small_default();
    Rng rng(5);
    Networks nets = build_networks(c, rng);
    DeepCtrNet& net = nets.deepctr;
    SUBCASE("zero image is finite") {
      const Tensor e = net.convnet_forward(Tensor({2, 3, 32, 32}), Mode::Train);
      CHECK(e.all_finite());
      const Tensor f = net.convnet_forward(Tensor({1, 3, 32, 32}), Mode::Eval);
      CHECK(f.all_finite());
    }
    SUBCASE("shape") {
      CHECK(net.convnet_forward(testutil::random_uniform({3, 3, 32, 32}, rng), Mode::Train).shape() ==
            Shape{3, 128});
      // any spatial size works thanks to global pooling
      CHECK(net.convnet_forward(testutil::random_uniform({2, 3, 28, 28}, rng), Mode::Eval).shape() ==
            Shape{2, 128});
      CHECK_THROWS_AS(net.convnet_forward(Tensor({1, 1, 32, 32}), Mode::Eval), DimensionError);
    }
    SUBCASE("equals a manual composition of layer ops") {
      const Tensor x = testutil::random_uniform({3, 3, 32, 32}, rng);
      for (Mode mode : {Mode::Train, Mode::Eval}) {
        auto& layers = net.trunk()->layers();
        // copies, so the net's own running statistics evolve independently
        std::vector<BnState> bns;
        for (const auto& l : layers) bns.push_back(l.bn);
        const Tensor got = net.convnet_forward(x, mode);

        Tensor h = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
          h = relu(batchnorm_forward(conv2d_forward(h, layers[i].conv, layers[i].stride, layers[i].pad), bns[i], mode));
        }
        const Tensor expect = relu(dense_fc_forward(global_avg_pool(h), net.embed()));
        CHECK(max_abs_diff(got, expect) <= 1e-12);
      }
      // strides and kernels as configured
      auto& layers = net.trunk()->layers();
      REQUIRE(layers.size() == 5);
      CHECK(layers[0].conv.weights.dim(2) == 5);
      CHECK(layers[0].pad == 2);
      CHECK(layers[3].stride == 2);
      CHECK(layers[4].stride == 1);
    }
  }

  TEST_CASE("grouped forward") {
    const NetConfig c = tiny_config();
    Rng rng(6);
    Networks nets = build_networks(c, rng);
    DeepCtrNet& net = nets.deepctr;
    SUBCASE("identical impressions in a group give identical predictions") {
      GroupedBatch b = tiny_batch(c, 2, 4, rng);
      SparseBatch same(c.basic_dim);
      const SparseRow row{{1, 1.0}, {7, 1.0}};
      for (std::size_t r = 0; r < 8; ++r) same.append_row(row);
      b.features = same;
      const Tensor z = deepctr_forward(net, b, Mode::Eval, rng);
      for (std::size_t r = 1; r < 4; ++r) CHECK(z[r] == z[0]);
      for (std::size_t r = 5; r < 8; ++r) CHECK(z[r] == z[4]);
    }
    SUBCASE("probabilities stay inside (0, 1)") {
      for (int t = 0; t < 5; ++t) {
        const GroupedBatch b = tiny_batch(c, 3, 2, rng);
        const Tensor z = deepctr_forward(net, b, Mode::Train, rng);
        for (double v : z.values()) {
          CHECK(std::isfinite(v));
          CHECK(sigmoid(v) > 0.0);
          CHECK(sigmoid(v) < 1.0);
        }
      }
    }
    SUBCASE("equals the unrolled forward") {
      for (Mode mode : {Mode::Eval, Mode::Train}) {
        const GroupedBatch b = tiny_batch(c, 3, 4, rng);
        Rng d1(77), d2(77);
        const Tensor zg = deepctr_forward(net, b, mode, d1);
        const Tensor zf = deepctr_forward(net, unroll(b), mode, d2);
        CHECK(max_abs_diff(zg, zf) <= 1e-12);
      }
    }
    SUBCASE("rows permute with the impressions") {
      const GroupedBatch b = tiny_batch(c, 2, 3, rng);
      GroupedBatch p = b;
      const std::vector<std::size_t> perm{2, 0, 1, 4, 5, 3};
      std::vector<SparseRow> rows;
      p.labels.clear();
      for (std::size_t r : perm) {
        SparseRow row;
        for (std::size_t i = 0; i < b.features.row_indices(r).size(); ++i)
          row.push_back({b.features.row_indices(r)[i], b.features.row_values(r)[i]});
        rows.push_back(row);
        p.labels.push_back(b.labels[r]);
      }
      p.features = csr_from_rows(rows, c.basic_dim);
      const Tensor z = deepctr_forward(net, b, Mode::Eval, rng);
      const Tensor zp = deepctr_forward(net, p, Mode::Eval, rng);
      for (std::size_t i = 0; i < 6; ++i) CHECK(zp[i] == doctest::Approx(z[perm[i]]).epsilon(1e-14));
    }
    SUBCASE("combnet BN centres the concatenation") {
      const GroupedBatch b = tiny_batch(c, 3, 4, rng);
      deepctr_forward(net, b, Mode::Train, rng);
      const Tensor& cat = net.last_concat();
      REQUIRE(cat.dim(1) == c.comb_input());
      BnState fresh(cat.dim(1));
      const Tensor y = batchnorm_forward(cat, fresh, Mode::Train);
      for (std::size_t j = 0; j < y.dim(1); ++j) {
        double m = 0;
        for (std::size_t r = 0; r < y.dim(0); ++r) m += y.at(r, j);
        CHECK(std::abs(m / y.dim(0)) < 1e-10);
      }
    }
  }

  TEST_CASE("forward_backward") {
    const NetConfig c = tiny_config();
    Rng rng(7);
    Networks nets = build_networks(c, rng);
    DeepCtrNet& net = nets.deepctr;
    SUBCASE("a zero learning-rate step leaves parameters unchanged") {
      std::vector<Tensor> before;
      for (auto& p : net.parameters()) before.push_back(*p.value);
      const GroupedBatch b = tiny_batch(c, 2, 3, rng);
      forward_backward(net, b, 1e-3, GradMode::Paper, rng);
      OptimConfig o;
      sgd_step(net.parameters(), o, 0.0);
      auto params = net.parameters();
      for (std::size_t i = 0; i < params.size(); ++i) CHECK(max_abs_diff(*params[i].value, before[i]) == 0.0);
    }
    SUBCASE("k = 1 makes both reductions plain backprop") {
      const GroupedBatch b = tiny_batch(c, 4, 1, rng);
      Rng d1(5), d2(5);
      forward_backward(net, b, 0.0, GradMode::Exact, d1);
      const auto ge = grads_of(net);
      forward_backward(net, b, 0.0, GradMode::Paper, d2);
      CHECK(grad_rel_diff(ge, grads_of(net)) == 0.0);
    }
    SUBCASE("exact grouped gradients equal the unrolled batch") {
      for (std::uint64_t s = 0; s < 5; ++s) {
        const GroupedBatch b = tiny_batch(c, 2, 3, rng);
        Rng d1(s), d2(s);
        const auto rg = forward_backward(net, b, 1e-3, GradMode::Exact, d1);
        const auto gg = grads_of(net);
        const auto rf = forward_backward(net, unroll(b), 1e-3, GradMode::Exact, d2);
        CHECK(rg.loss == doctest::Approx(rf.loss).epsilon(1e-12));
        CHECK(grad_rel_diff(gg, grads_of(net)) <= 1e-10);
      }
    }
    SUBCASE("paper mode scales the image pathway by 1/k") {
      const std::size_t k = 4;
      const GroupedBatch b = tiny_batch(c, 2, k, rng);
      Rng d1(9), d2(9);
      forward_backward(net, b, 0.0, GradMode::Exact, d1);
      const auto ge = grads_of(net);
      forward_backward(net, b, 0.0, GradMode::Paper, d2);
      const auto gp = grads_of(net);
      auto params = net.parameters();
      for (std::size_t i = 0; i < params.size(); ++i) {
        const bool image_path = params[i].name.starts_with("trunk.") || params[i].name.starts_with("embed.");
        for (std::size_t j = 0; j < ge[i].size(); ++j) {
          const double expect = image_path ? ge[i][j] / k : ge[i][j];
          CHECK(testutil::rel_err(gp[i][j], expect, 1e-12) <= 1e-10);
        }
      }
    }
    SUBCASE("finite differences on the full tiny network") {
      for (std::uint64_t s = 0; s < 20; ++s) {
        const auto r = gradcheck::tiny_deepctr(s);
        CHECK(r.worst < 1e-4);
        CHECK(r.checked > 10 * r.skipped);
      }
    }
    SUBCASE("a frozen trunk gets no gradient and no decay") {
      ImageStore store;
      for (std::size_t i = 0; i < 3; ++i) store.add("img" + std::to_string(i), testutil::random_uniform({3, 6, 6}, rng));
      const TrunkFeatureCache cache(*net.trunk(), store);
      GroupedBatch b = tiny_batch(c, 3, 2, rng);
      b.images = stack_images(store, b.image_ids);
      forward_backward(net, b, 1e-2, GradMode::Exact, rng, &cache);
      for (auto& p : net.parameters()) {
        if (p.conv) CHECK(squared_norm(*p.grad) == 0.0);
        if (p.name == "embed.w") CHECK(squared_norm(*p.grad) > 0.0);
      }
      // cache rows are eval-mode trunk features
      const Tensor direct = net.trunk()->forward(b.images, Mode::Eval);
      CHECK(max_abs_diff(cache.gather(b.image_ids), direct) <= 1e-12);
    }
    SUBCASE("basic-only network has no image tower") {
      NetConfig d = c;
      d.use_convnet = false;
      DeepCtrNet dnn(d, nullptr);
      dnn.init(rng);
      GroupedBatch b = tiny_batch(c, 3, 2, rng);
      b.images = Tensor();
      const auto r = forward_backward(dnn, b, 0.0, GradMode::Paper, rng);
      CHECK(std::isfinite(r.loss));
      for (auto& p : dnn.parameters()) CHECK_FALSE(p.name.starts_with("trunk."));
    }
  }

  TEST_CASE("pretraining classifier") {
    SUBCASE("first-batch loss is near ln C") {
      NetConfig c = small_default();
      c.n_categories = 8;
      for (std::uint64_t s = 0; s < 3; ++s) {
        Rng rng(s);
        Networks nets = build_networks(c, rng);
        const Tensor images = testutil::random_uniform({16, 3, 32, 32}, rng);
        std::vector<std::size_t> labels(16);
        for (auto& l : labels) l = rng.uniform_index(8);
        const double loss = pretrain_forward_backward(nets.pretrain, images, labels);
        CHECK(loss == doctest::Approx(std::log(8.0)).epsilon(0.2));
      }
    }
    SUBCASE("single-class data is learned to zero loss") {
      NetConfig c = tiny_config();
      Rng rng(8);
      Networks nets = build_networks(c, rng);
      const Tensor images = testutil::random_uniform({4, 3, 6, 6}, rng);
      const std::vector<std::size_t> labels(4, 1);
      OptimConfig o;
      o.conv_lr_scale = 1.0;
      o.weight_decay = 0.0;
      double loss = 0.0;
      for (int t = 0; t < 200; ++t) {
        loss = pretrain_forward_backward(nets.pretrain, images, labels);
        sgd_step(nets.pretrain.parameters(), o, 0.05);
      }
      CHECK(loss < 1e-3);
    }
    SUBCASE("finite differences") {
      for (std::uint64_t s = 0; s < 20; ++s) CHECK(gradcheck::tiny_pretrain(s).worst < 1e-4);
    }
    SUBCASE("label range") {
      Rng rng(9);
      Networks nets = build_networks(tiny_config(), rng);
      CHECK_THROWS(pretrain_forward_backward(nets.pretrain, Tensor({2, 3, 6, 6}), std::vector<std::size_t>{0, 3}));
    }
  }
}
