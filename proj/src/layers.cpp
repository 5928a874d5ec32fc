#include "deepctr/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "deepctr/kernels.hpp"

namespace deepctr {

// --- parameters --------------------------------------------------------------

LayerParams LayerParams::fully_connected(std::size_t in, std::size_t out) {
  LayerParams p;
  p.weights = Tensor({in, out});
  p.bias = Tensor({out});
  p.grad_weights = Tensor({in, out});
  p.grad_bias = Tensor({out});
  p.momentum_weights = Tensor({in, out});
  p.momentum_bias = Tensor({out});
  return p;
}

LayerParams LayerParams::conv(std::size_t out_channels, std::size_t in_channels, std::size_t kh, std::size_t kw) {
  LayerParams p;
  const Shape ws{out_channels, in_channels, kh, kw};
  p.weights = Tensor(ws);
  p.bias = Tensor({out_channels});
  p.grad_weights = Tensor(ws);
  p.grad_bias = Tensor({out_channels});
  p.momentum_weights = Tensor(ws);
  p.momentum_bias = Tensor({out_channels});
  return p;
}

void LayerParams::zero_grad() {
  grad_weights.fill(0.0);
  grad_bias.fill(0.0);
}

std::size_t LayerParams::fan_in() const {
  if (weights.rank() == 2) return weights.dim(0);
  return weights.size() / weights.dim(0);
}

void LayerParams::init_he(Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(std::max<std::size_t>(1, fan_in())));
  for (double& w : weights.values()) w = rng.normal(0.0, stddev);
  bias.fill(0.0);
}

BnState::BnState(std::size_t channels)
    : gamma({channels}, 1.0),
      beta({channels}),
      running_mean({channels}),
      running_var({channels}, 1.0),
      grad_gamma({channels}),
      grad_beta({channels}),
      momentum_gamma({channels}),
      momentum_beta({channels}) {}

void BnState::zero_grad() {
  grad_gamma.fill(0.0);
  grad_beta.fill(0.0);
}

// --- fully connected -----------------------------------------------------------

Tensor dense_fc_forward(const Tensor& x, const LayerParams& p) {
  require_rank(x, 2, "dense_fc_forward");
  if (x.dim(1) != p.weights.dim(0)) {
    throw DimensionError("dense_fc_forward: input width " + std::to_string(x.dim(1)) +
                         " vs weight rows " + std::to_string(p.weights.dim(0)));
  }
  require_finite(x, "dense_fc_forward");
  const std::size_t batch = x.dim(0), in = x.dim(1), out = p.weights.dim(1);
  Tensor y({batch, out});
  for (std::size_t r = 0; r < batch; ++r) std::copy(p.bias.data(), p.bias.data() + out, y.data() + r * out);
  kernels::gemm_nn(batch, in, out, x.data(), p.weights.data(), y.data());
  return y;
}

Tensor dense_fc_backward(const Tensor& x, LayerParams& p, const Tensor& grad_out) {
  require_rank(x, 2, "dense_fc_backward");
  const std::size_t batch = x.dim(0), in = x.dim(1), out = p.weights.dim(1);
  if (in != p.weights.dim(0)) throw DimensionError("dense_fc_backward: input width mismatch");
  require_shape(grad_out, {batch, out}, "dense_fc_backward grad_out");

  kernels::gemm_tn(in, batch, out, x.data(), grad_out.data(), p.grad_weights.data());
  for (std::size_t r = 0; r < batch; ++r) {
    const double* g = grad_out.data() + r * out;
    for (std::size_t j = 0; j < out; ++j) p.grad_bias[j] += g[j];
  }
  Tensor grad_in({batch, in});
  kernels::gemm_nt(batch, out, in, grad_out.data(), p.weights.data(), grad_in.data());
  return grad_in;
}

// --- convolution ---------------------------------------------------------------

namespace {

kernels::ConvGeometry conv_geometry(const Tensor& x, const LayerParams& p, std::size_t stride, std::size_t pad,
                                    const char* where) {
  require_rank(x, 4, where);
  if (p.weights.rank() != 4) throw DimensionError(std::string(where) + ": weights must be rank 4");
  if (x.dim(1) != p.weights.dim(1)) {
    throw DimensionError(std::string(where) + ": input channels " + std::to_string(x.dim(1)) +
                         " vs kernel channels " + std::to_string(p.weights.dim(1)));
  }
  if (stride == 0) throw DimensionError(std::string(where) + ": stride must be positive");
  kernels::ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), p.weights.dim(2), p.weights.dim(3), stride, pad};
  if (g.height + 2 * pad < g.kernel_h || g.width + 2 * pad < g.kernel_w) {
    throw DimensionError(std::string(where) + ": non-positive output extent for input " +
                         shape_string(x.shape()) + " and kernel " + shape_string(p.weights.shape()));
  }
  return g;
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, const LayerParams& p, std::size_t stride, std::size_t pad) {
  const auto g = conv_geometry(x, p, stride, pad, "conv2d_forward");
  require_finite(x, "conv2d_forward");
  const std::size_t n = x.dim(0), cout = p.weights.dim(0);
  const std::size_t oh = g.out_h(), ow = g.out_w(), plane = oh * ow, k = g.patch();
  const std::size_t in_stride = g.channels * g.height * g.width;
  Tensor y({n, cout, oh, ow});

#pragma omp parallel
  {
    std::vector<double> col(k * plane);
#pragma omp for schedule(static)
    for (std::size_t b = 0; b < n; ++b) {
      kernels::im2col(g, x.data() + b * in_stride, col.data());
      double* out = y.data() + b * cout * plane;
      for (std::size_t o = 0; o < cout; ++o) std::fill(out + o * plane, out + (o + 1) * plane, p.bias[o]);
      kernels::gemm_nn(cout, k, plane, p.weights.data(), col.data(), out);
    }
  }
  return y;
}

Tensor conv2d_backward(const Tensor& x, LayerParams& p, const Tensor& grad_out, std::size_t stride,
                       std::size_t pad) {
  const auto g = conv_geometry(x, p, stride, pad, "conv2d_backward");
  const std::size_t n = x.dim(0), cout = p.weights.dim(0);
  const std::size_t oh = g.out_h(), ow = g.out_w(), plane = oh * ow, k = g.patch();
  const std::size_t in_stride = g.channels * g.height * g.width;
  require_shape(grad_out, {n, cout, oh, ow}, "conv2d_backward grad_out");

  Tensor grad_in(x.shape());
#pragma omp parallel
  {
    std::vector<double> dcol(k * plane);
#pragma omp for schedule(static)
    for (std::size_t b = 0; b < n; ++b) {
      std::fill(dcol.begin(), dcol.end(), 0.0);
      kernels::gemm_tn(k, cout, plane, p.weights.data(), grad_out.data() + b * cout * plane, dcol.data());
      kernels::col2im(g, dcol.data(), grad_in.data() + b * in_stride);
    }
  }

#pragma omp parallel for schedule(static)
  for (std::size_t o = 0; o < cout; ++o) {
    double s = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const double* gp = grad_out.data() + (b * cout + o) * plane;
      for (std::size_t i = 0; i < plane; ++i) s += gp[i];
    }
    p.grad_bias[o] += s;
  }

  // Weight gradient accumulates image by image in a fixed order.
  std::vector<double> col(k * plane), col_t(plane * k);
  for (std::size_t b = 0; b < n; ++b) {
    kernels::im2col(g, x.data() + b * in_stride, col.data());
    kernels::transpose(k, plane, col.data(), col_t.data());
    kernels::gemm_nn(cout, plane, k, grad_out.data() + b * cout * plane, col_t.data(), p.grad_weights.data());
  }
  return grad_in;
}

// --- batch normalisation ---------------------------------------------------------

namespace {

struct BnLayout {
  std::size_t batch, channels, spatial;
};

BnLayout bn_layout(const Tensor& x, const BnState& s, const char* where) {
  if (x.rank() != 2 && x.rank() != 4) throw DimensionError(std::string(where) + ": expects rank 2 or 4");
  BnLayout l{x.dim(0), x.dim(1), x.rank() == 4 ? x.dim(2) * x.dim(3) : 1};
  if (l.channels != s.channels()) {
    throw DimensionError(std::string(where) + ": " + std::to_string(l.channels) + " channels vs state " +
                         std::to_string(s.channels()));
  }
  return l;
}

}  // namespace

Tensor batchnorm_forward(const Tensor& x, BnState& s, Mode mode) {
  const auto l = bn_layout(x, s, "batchnorm_forward");
  require_finite(x, "batchnorm_forward");
  Tensor y(x.shape());
  const std::size_t count = l.batch * l.spatial;

  if (mode == Mode::Eval) {
    for (std::size_t c = 0; c < l.channels; ++c) {
      const double scale = s.gamma[c] / std::sqrt(s.running_var[c] + s.epsilon);
      const double shift = s.beta[c] - s.running_mean[c] * scale;
      for (std::size_t b = 0; b < l.batch; ++b) {
        const std::size_t base = (b * l.channels + c) * l.spatial;
        for (std::size_t i = 0; i < l.spatial; ++i) y[base + i] = x[base + i] * scale + shift;
      }
    }
    s.cache.reset();
    return y;
  }

  if (l.batch < 2) throw std::invalid_argument("batchnorm_forward: train mode needs a batch of at least 2");
  BnCache cache{Tensor(x.shape()), std::vector<double>(l.channels)};

#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < l.channels; ++c) {
    double sum = 0.0;
    for (std::size_t b = 0; b < l.batch; ++b) {
      const std::size_t base = (b * l.channels + c) * l.spatial;
      for (std::size_t i = 0; i < l.spatial; ++i) sum += x[base + i];
    }
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (std::size_t b = 0; b < l.batch; ++b) {
      const std::size_t base = (b * l.channels + c) * l.spatial;
      for (std::size_t i = 0; i < l.spatial; ++i) {
        const double d = x[base + i] - mean;
        sq += d * d;
      }
    }
    const double var = sq / static_cast<double>(count);
    const double inv_std = 1.0 / std::sqrt(var + s.epsilon);
    cache.inv_std[c] = inv_std;
    for (std::size_t b = 0; b < l.batch; ++b) {
      const std::size_t base = (b * l.channels + c) * l.spatial;
      for (std::size_t i = 0; i < l.spatial; ++i) {
        const double xh = (x[base + i] - mean) * inv_std;
        cache.normalized[base + i] = xh;
        y[base + i] = s.gamma[c] * xh + s.beta[c];
      }
    }
    s.running_mean[c] = s.momentum * s.running_mean[c] + (1.0 - s.momentum) * mean;
    s.running_var[c] = s.momentum * s.running_var[c] + (1.0 - s.momentum) * var;
  }
  s.cache = std::move(cache);
  return y;
}

Tensor batchnorm_backward(const Tensor& x, BnState& s, const Tensor& grad_out) {
  const auto l = bn_layout(x, s, "batchnorm_backward");
  if (!s.cache) throw std::logic_error("batchnorm_backward: no train-mode forward cache");
  require_shape(grad_out, x.shape(), "batchnorm_backward grad_out");
  const BnCache& cache = *s.cache;
  if (!cache.normalized.same_shape(x)) throw std::logic_error("batchnorm_backward: cache is for another input");
  const double count = static_cast<double>(l.batch * l.spatial);
  Tensor grad_in(x.shape());

#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < l.channels; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t b = 0; b < l.batch; ++b) {
      const std::size_t base = (b * l.channels + c) * l.spatial;
      for (std::size_t i = 0; i < l.spatial; ++i) {
        sum_g += grad_out[base + i];
        sum_gx += grad_out[base + i] * cache.normalized[base + i];
      }
    }
    s.grad_gamma[c] += sum_gx;
    s.grad_beta[c] += sum_g;
    const double k = s.gamma[c] * cache.inv_std[c] / count;
    for (std::size_t b = 0; b < l.batch; ++b) {
      const std::size_t base = (b * l.channels + c) * l.spatial;
      for (std::size_t i = 0; i < l.spatial; ++i) {
        grad_in[base + i] = k * (count * grad_out[base + i] - sum_g - cache.normalized[base + i] * sum_gx);
      }
    }
  }
  return grad_in;
}

Tensor batchnorm_eval_backward(const BnState& s, const Tensor& grad_out) {
  const auto l = bn_layout(grad_out, s, "batchnorm_eval_backward");
  Tensor grad_in(grad_out.shape());
  for (std::size_t c = 0; c < l.channels; ++c) {
    const double scale = s.gamma[c] / std::sqrt(s.running_var[c] + s.epsilon);
    for (std::size_t b = 0; b < l.batch; ++b) {
      const std::size_t base = (b * l.channels + c) * l.spatial;
      for (std::size_t i = 0; i < l.spatial; ++i) grad_in[base + i] = grad_out[base + i] * scale;
    }
  }
  return grad_in;
}

// --- activations -----------------------------------------------------------------

Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
  require_shape(grad_out, x.shape(), "relu_backward");
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > 0.0 ? grad_out[i] : 0.0;
  return g;
}

DropoutResult dropout_forward(const Tensor& x, double rate, Rng& rng, Mode mode) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout_forward: rate must be in [0, 1)");
  if (mode == Mode::Eval || rate == 0.0) return {x, Tensor(x.shape(), 1.0)};
  const double scale = 1.0 / (1.0 - rate);
  DropoutResult r{Tensor(x.shape()), Tensor(x.shape())};
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double m = rng.uniform() < rate ? 0.0 : scale;
    r.mask[i] = m;
    r.output[i] = x[i] * m;
  }
  return r;
}

Tensor dropout_backward(const Tensor& mask, const Tensor& grad_out) {
  require_shape(grad_out, mask.shape(), "dropout_backward");
  Tensor g(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) g[i] = grad_out[i] * mask[i];
  return g;
}

// --- pooling -----------------------------------------------------------------------

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), spatial = x.dim(2) * x.dim(3);
  Tensor y({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < spatial; ++j) s += x[i * spatial + j];
    y[i] = s / static_cast<double>(spatial);
  }
  return y;
}

Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out) {
  if (input_shape.size() != 4) throw DimensionError("global_avg_pool_backward: input must be rank 4");
  require_shape(grad_out, {input_shape[0], input_shape[1]}, "global_avg_pool_backward");
  const std::size_t spatial = input_shape[2] * input_shape[3];
  Tensor g(input_shape);
  const double inv = 1.0 / static_cast<double>(spatial);
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    std::fill(g.data() + i * spatial, g.data() + (i + 1) * spatial, grad_out[i] * inv);
  }
  return g;
}

// --- losses --------------------------------------------------------------------------

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

LossResult sigmoid_logloss(const Tensor& z, std::span<const double> labels, double weight_sq_norm,
                           double lambda) {
  const std::size_t n = z.size();
  if (n == 0) throw std::invalid_argument("sigmoid_logloss: empty batch");
  if (labels.size() != n) throw DimensionError("sigmoid_logloss: label count mismatch");
  LossResult r{0.0, Tensor(z.shape())};
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = labels[i];
    if (y != 0.0 && y != 1.0) throw std::invalid_argument("sigmoid_logloss: label outside {0,1}");
    const double zi = z[i];
    // -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z
    const double softplus = std::max(zi, 0.0) + std::log1p(std::exp(-std::abs(zi)));
    total += softplus - y * zi;
    r.grad[i] = (sigmoid(zi) - y) * inv_n;
  }
  r.loss = total * inv_n + lambda * weight_sq_norm;
  return r;
}

LossResult softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (batch == 0) throw std::invalid_argument("softmax_cross_entropy: empty batch");
  if (labels.size() != batch) throw DimensionError("softmax_cross_entropy: label count mismatch");
  LossResult r{0.0, Tensor(logits.shape())};
  const double inv_b = 1.0 / static_cast<double>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) throw std::invalid_argument("softmax_cross_entropy: label out of range");
    const double* row = logits.data() + b * classes;
    const double mx = *std::max_element(row, row + classes);
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(row[c] - mx);
    const double log_z = mx + std::log(sum);
    r.loss += (log_z - row[labels[b]]) * inv_b;
    for (std::size_t c = 0; c < classes; ++c) {
      const double pc = std::exp(row[c] - log_z);
      r.grad.at(b, c) = (pc - (c == labels[b] ? 1.0 : 0.0)) * inv_b;
    }
  }
  return r;
}

}  // namespace deepctr
