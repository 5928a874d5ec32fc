#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "deepctr/rng.hpp"
#include "deepctr/tensor.hpp"

namespace deepctr {

enum class Mode { Train, Eval };

/// Weights, bias, their gradients and SGD momentum buffers for one layer.
/// Fully-connected weights are [in x out] (Y = XW); convolution weights are
/// [out_channels x in_channels x kh x kw].
struct LayerParams {
  Tensor weights;
  Tensor bias;
  Tensor grad_weights;
  Tensor grad_bias;
  Tensor momentum_weights;
  Tensor momentum_bias;

  static LayerParams fully_connected(std::size_t in, std::size_t out);
  static LayerParams conv(std::size_t out_channels, std::size_t in_channels, std::size_t kh, std::size_t kw);

  void zero_grad();
  /// He initialisation: N(0, 2 / fan_in) weights, zero bias.
  void init_he(Rng& rng);
  std::size_t fan_in() const;
};

struct BnCache {
  Tensor normalized;         // x-hat
  std::vector<double> inv_std;
};

/// Per-channel batch normalisation state. For rank-2 inputs [batch x features]
/// each feature is a channel; for rank-4 inputs [n x c x h x w] statistics
/// pool over n, h and w.
struct BnState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  Tensor grad_gamma;
  Tensor grad_beta;
  Tensor momentum_gamma;
  Tensor momentum_beta;
  double epsilon = 1e-5;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
  std::optional<BnCache> cache;

  explicit BnState(std::size_t channels = 0);
  std::size_t channels() const { return gamma.size(); }
  void zero_grad();
};

// --- fully connected -------------------------------------------------------

Tensor dense_fc_forward(const Tensor& x, const LayerParams& p);
/// Accumulates weight/bias gradients, returns dL/dx.
Tensor dense_fc_backward(const Tensor& x, LayerParams& p, const Tensor& grad_out);

// --- convolution (cross-correlation) ---------------------------------------

Tensor conv2d_forward(const Tensor& x, const LayerParams& p, std::size_t stride, std::size_t pad);
Tensor conv2d_backward(const Tensor& x, LayerParams& p, const Tensor& grad_out, std::size_t stride,
                       std::size_t pad);

// --- batch normalisation ---------------------------------------------------

Tensor batchnorm_forward(const Tensor& x, BnState& s, Mode mode);
/// Gradient of the train-mode forward; needs the cache left by it.
Tensor batchnorm_backward(const Tensor& x, BnState& s, const Tensor& grad_out);
/// Gradient of the eval-mode (affine) forward w.r.t. its input only.
Tensor batchnorm_eval_backward(const BnState& s, const Tensor& grad_out);

// --- activations -----------------------------------------------------------

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& grad_out);

struct DropoutResult {
  Tensor output;
  Tensor mask;  // already carries the 1/(1-rate) scale
};
DropoutResult dropout_forward(const Tensor& x, double rate, Rng& rng, Mode mode);
Tensor dropout_backward(const Tensor& mask, const Tensor& grad_out);

// --- pooling ----------------------------------------------------------------

/// [n x c x h x w] -> [n x c]
Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out);

// --- losses ----------------------------------------------------------------

struct LossResult {
  double loss = 0.0;
  Tensor grad;
};

double sigmoid(double z);

/// Mean logloss of sigmoid(z) against 0/1 labels plus lambda * weight_sq_norm.
/// grad is d(data term)/dz = (sigmoid(z) - y) / N.
LossResult sigmoid_logloss(const Tensor& z, std::span<const double> labels, double weight_sq_norm = 0.0,
                           double lambda = 0.0);

/// Mean cross-entropy of softmax(logits) [batch x classes].
LossResult softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

}  // namespace deepctr
