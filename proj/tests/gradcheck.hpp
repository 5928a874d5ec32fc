#pragma once

// Finite-difference checks for every differentiable piece, one function per
// layer. Each builds a random instance from `seed`, forms the scalar
// L = sum(r * layer(x)) for a random r, and compares the hand-written backward
// against central differences on every input and parameter coordinate.

#include <cstdint>
#include <string>
#include <vector>

#include "deepctr/layers.hpp"
#include "deepctr/network.hpp"
#include "deepctr/sampler.hpp"
#include "deepctr/sparse.hpp"
#include "util.hpp"

namespace gradcheck {

using namespace deepctr;
using testutil::FdReport;
using testutil::fd_check;
using testutil::random_tensor;

inline void merge(FdReport& into, const FdReport& r) {
  into.worst = std::max(into.worst, r.worst);
  into.checked += r.checked;
  into.skipped += r.skipped;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline FdReport dense_fc(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t batch = 1 + rng.uniform_index(4), in = 1 + rng.uniform_index(6), out = 1 + rng.uniform_index(5);
  Tensor x = random_tensor({batch, in}, rng);
  LayerParams p = LayerParams::fully_connected(in, out);
  p.init_he(rng);
  for (auto& b : p.bias.values()) b = rng.normal();
  const Tensor r = random_tensor({batch, out}, rng);
  const Tensor dx = dense_fc_backward(x, p, r);
  auto f = [&] { return dot(r, dense_fc_forward(x, p)); };
  FdReport rep;
  merge(rep, fd_check(f, x, dx));
  merge(rep, fd_check(f, p.weights, p.grad_weights));
  merge(rep, fd_check(f, p.bias, p.grad_bias));
  return rep;
}

inline FdReport conv2d(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 1 + rng.uniform_index(2), cin = 1 + rng.uniform_index(3), cout = 1 + rng.uniform_index(3);
  const std::size_t k = 1 + 2 * rng.uniform_index(2);  // 1 or 3
  const std::size_t stride = 1 + rng.uniform_index(2), pad = rng.uniform_index(k / 2 + 2);
  const std::size_t h = 4 + rng.uniform_index(3), w = 4 + rng.uniform_index(3);
  Tensor x = random_tensor({n, cin, h, w}, rng);
  LayerParams p = LayerParams::conv(cout, cin, k, k);
  p.init_he(rng);
  for (auto& b : p.bias.values()) b = rng.normal();
  const Tensor y0 = conv2d_forward(x, p, stride, pad);
  const Tensor r = random_tensor(y0.shape(), rng);
  const Tensor dx = conv2d_backward(x, p, r, stride, pad);
  auto f = [&] { return dot(r, conv2d_forward(x, p, stride, pad)); };
  FdReport rep;
  merge(rep, fd_check(f, x, dx));
  merge(rep, fd_check(f, p.weights, p.grad_weights));
  merge(rep, fd_check(f, p.bias, p.grad_bias));
  return rep;
}

inline FdReport batchnorm(std::uint64_t seed, bool spatial) {
  Rng rng(seed);
  const std::size_t batch = 2 + rng.uniform_index(4), c = 1 + rng.uniform_index(3);
  Tensor x = spatial ? random_tensor({batch, c, 3, 2}, rng, 2.0) : random_tensor({batch, c}, rng, 2.0);
  BnState s(c);
  for (auto& g : s.gamma.values()) g = rng.uniform(0.5, 2.0);
  for (auto& b : s.beta.values()) b = rng.normal();
  const Tensor r = random_tensor(x.shape(), rng);
  batchnorm_forward(x, s, Mode::Train);
  const Tensor dx = batchnorm_backward(x, s, r);
  const Tensor dgamma = s.grad_gamma, dbeta = s.grad_beta;
  auto f = [&] { return dot(r, batchnorm_forward(x, s, Mode::Train)); };
  FdReport rep;
  merge(rep, fd_check(f, x, dx));
  merge(rep, fd_check(f, s.gamma, dgamma));
  merge(rep, fd_check(f, s.beta, dbeta));
  return rep;
}

inline FdReport relu_layer(std::uint64_t seed) {
  Rng rng(seed);
  Tensor x = random_tensor({3, 5}, rng);
  // keep clear of the kink so the step never crosses it
  for (auto& v : x.values())
    if (std::abs(v) < 1e-3) v = 0.5;
  const Tensor r = random_tensor(x.shape(), rng);
  const Tensor dx = relu_backward(x, r);
  auto f = [&] { return dot(r, relu(x)); };
  return fd_check(f, x, dx);
}

inline FdReport dropout_layer(std::uint64_t seed) {
  Rng rng(seed);
  Tensor x = random_tensor({4, 6}, rng);
  const Tensor r = random_tensor(x.shape(), rng);
  const double rate = rng.uniform(0.0, 0.8);
  const std::uint64_t mask_seed = rng.next_u64();
  Rng m1(mask_seed);
  const auto d = dropout_forward(x, rate, m1, Mode::Train);
  const Tensor dx = dropout_backward(d.mask, r);
  auto f = [&] {
    Rng m(mask_seed);
    return dot(r, dropout_forward(x, rate, m, Mode::Train).output);
  };
  return fd_check(f, x, dx);
}

inline FdReport global_pool(std::uint64_t seed) {
  Rng rng(seed);
  Tensor x = random_tensor({2, 3, 3, 4}, rng);
  const Tensor r = random_tensor({2, 3}, rng);
  const Tensor dx = global_avg_pool_backward(x.shape(), r);
  auto f = [&] { return dot(r, global_avg_pool(x)); };
  return fd_check(f, x, dx);
}

inline FdReport logloss(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 1 + rng.uniform_index(8);
  Tensor z = random_tensor({n}, rng, 3.0);
  std::vector<double> y(n);
  for (auto& v : y) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  const LossResult lr = sigmoid_logloss(z, y);
  auto f = [&] { return sigmoid_logloss(z, y).loss; };
  return testutil::fd_check5(f, z, lr.grad);
}

inline FdReport softmax(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 1 + rng.uniform_index(4), c = 2 + rng.uniform_index(5);
  Tensor logits = random_tensor({n, c}, rng, 2.0);
  std::vector<std::size_t> y(n);
  for (auto& v : y) v = rng.uniform_index(c);
  const LossResult lr = softmax_cross_entropy(logits, y);
  auto f = [&] { return softmax_cross_entropy(logits, y).loss; };
  return testutil::fd_check5(f, logits, lr.grad);
}

/// Weight and bias gradients of the sparse layer (its input is a leaf).
inline FdReport sparse_fc(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t rows = 1 + rng.uniform_index(5), dim = 3 + rng.uniform_index(10), out = 1 + rng.uniform_index(4);
  const SparseBatch v = testutil::random_sparse(rows, dim, 4, rng);
  LayerParams p = LayerParams::fully_connected(dim, out);
  p.init_he(rng);
  const Tensor r = random_tensor({rows, out}, rng);
  sparse_fc_backward(v, p, r);
  auto f = [&] { return dot(r, sparse_fc_forward(v, p)); };
  FdReport rep;
  merge(rep, fd_check(f, p.weights, p.grad_weights));
  merge(rep, fd_check(f, p.bias, p.grad_bias));
  return rep;
}

/// Two conv layers, d = 20, n = 2 images, k = 3 impressions each.
inline NetConfig tiny_config() {
  NetConfig c;
  c.channels = 3;
  c.height = c.width = 6;
  c.crop = 6;
  c.first_kernel = 3;
  c.first_channels = 3;
  c.groups = {{1, 4, true}};
  c.embed_dim = 5;
  c.basic_dim = 20;
  c.basic_hidden = 4;
  c.comb_hidden = {6, 5};
  c.dropout_rate = 0.3;
  c.use_bn_comb = true;
  c.n_categories = 3;
  c.pretrain_hidden = 6;
  return c;
}

inline GroupedBatch tiny_batch(const NetConfig& c, std::size_t n, std::size_t k, Rng& rng) {
  GroupedBatch b;
  b.k = k;
  b.images = testutil::random_uniform({n, c.channels, c.height, c.width}, rng);
  b.features = SparseBatch(c.basic_dim);
  for (std::size_t i = 0; i < n; ++i) {
    b.image_ids.push_back("img" + std::to_string(i));
    for (std::size_t j = 0; j < k; ++j) {
      SparseRow row;
      for (std::size_t f = 0; f < c.basic_dim; f += 5) row.push_back({f + rng.uniform_index(5), 1.0});
      b.features.append_row(row);
      b.labels.push_back(rng.bernoulli(0.5) ? 1.0 : 0.0);
    }
  }
  return b;
}

/// The same impressions as a flat batch: one physically copied image per row.
inline GroupedBatch unroll(const GroupedBatch& b) {
  GroupedBatch f;
  f.k = 1;
  f.features = b.features;
  f.labels = b.labels;
  const std::size_t per = b.images.size() / b.n();
  Shape shape = b.images.shape();
  shape[0] = b.rows();
  f.images = Tensor(shape);
  for (std::size_t r = 0; r < b.rows(); ++r) {
    const std::size_t i = r / b.k;
    f.image_ids.push_back(b.image_ids[i]);
    std::copy(b.images.data() + i * per, b.images.data() + (i + 1) * per, f.images.data() + r * per);
  }
  return f;
}

/// Largest |a - b| / max(|a|, |b|, floor) over every parameter gradient.
/// Worst per-tensor relative difference ||a - b|| / max(||a||, ||b||, floor * ||a||_all).
/// Coordinates whose true gradient is exactly zero (a conv bias in front of
/// batch norm) carry only round-off, so elementwise ratios are meaningless
/// there; the floor ties them to the scale of the whole gradient.
inline double grad_rel_diff(const std::vector<Tensor>& a, const std::vector<Tensor>& b, double floor = 1e-4) {
  double all = 0.0;
  for (const auto& t : a) all += squared_norm(t);
  all = std::sqrt(all);
  double worst = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    Tensor d = a[t];
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= b[t][i];
    const double den = std::max({std::sqrt(squared_norm(a[t])), std::sqrt(squared_norm(b[t])), floor * all});
    if (den > 0.0) worst = std::max(worst, std::sqrt(squared_norm(d)) / den);
  }
  return worst;
}

inline std::vector<Tensor> grads_of(DeepCtrNet& net) {
  std::vector<Tensor> g;
  for (auto& p : net.parameters()) g.push_back(*p.grad);
  return g;
}

/// Whole-network losses sum hundreds of terms; a 1e-5 central difference of an
/// O(1) loss carries ~1e-10 absolute round-off, so coordinates with a true
/// gradient of zero need this floor.
inline constexpr double kNetFloor = 1e-5;

/// Loss (data term + lambda ||W||^2) of the whole DeepCTR network against
/// every parameter and BN affine coefficient. Dropout masks are replayed from
/// a fixed seed; coordinates whose ReLU pattern flips within the step are
/// skipped.
inline FdReport tiny_deepctr(std::uint64_t seed, GradMode mode = GradMode::Exact, double lambda = 1e-3) {
  Rng rng(seed);
  const NetConfig c = tiny_config();
  Networks nets = build_networks(c, rng);
  DeepCtrNet& net = nets.deepctr;
  for (auto& p : net.parameters())
    if (p.name.ends_with(".b") || p.name.ends_with(".beta"))
      for (auto& v : p.value->values()) v = 0.1 * rng.normal();
  const GroupedBatch batch = tiny_batch(c, 2, 3, rng);
  const std::uint64_t drop_seed = rng.next_u64();

  Rng d0(drop_seed);
  forward_backward(net, batch, lambda, mode, d0);
  const std::vector<char> sig = net.activation_signature();
  std::vector<Tensor> grads;
  for (auto& p : net.parameters()) grads.push_back(*p.grad);

  auto f = [&] {
    Rng d(drop_seed);
    const Tensor z = deepctr_forward(net, batch, Mode::Train, d);
    return sigmoid_logloss(z, batch.labels, net.weight_sq_norm(), lambda).loss;
  };
  auto stable = [&] { return net.activation_signature() == sig; };
  FdReport rep;
  auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) merge(rep, fd_check(f, *params[i].value, grads[i], 1e-5, stable, kNetFloor));
  return rep;
}

/// Pretraining classifier: softmax loss against trunk and fc18-20 parameters.
inline FdReport tiny_pretrain(std::uint64_t seed) {
  Rng rng(seed);
  const NetConfig c = tiny_config();
  Networks nets = build_networks(c, rng);
  PretrainNet& net = nets.pretrain;
  const Tensor images = testutil::random_uniform({3, c.channels, c.height, c.width}, rng);
  std::vector<std::size_t> labels(3);
  for (auto& l : labels) l = rng.uniform_index(c.n_categories);
  pretrain_forward_backward(net, images, labels);
  std::vector<Tensor> grads;
  for (auto& p : net.parameters()) grads.push_back(*p.grad);
  auto f = [&] { return softmax_cross_entropy(net.forward(images, Mode::Train), labels).loss; };
  const std::vector<char> sig = net.activation_signature();
  auto stable = [&] { return net.activation_signature() == sig; };
  FdReport rep;
  auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) merge(rep, fd_check(f, *params[i].value, grads[i], 1e-5, stable, kNetFloor));
  return rep;
}

}  // namespace gradcheck
