#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "deepctr/json_util.hpp"
#include "deepctr/layers.hpp"
#include "deepctr/rng.hpp"
#include "deepctr/sampler.hpp"
#include "deepctr/sparse.hpp"
#include "deepctr/tensor.hpp"

namespace deepctr {

/// One group of 3x3 convolutions. When `downsample` is set the first layer of
/// the group uses stride 2.
struct ConvGroupSpec {
  std::size_t layers = 2;
  std::size_t channels = 16;
  bool downsample = false;

  friend bool operator==(const ConvGroupSpec&, const ConvGroupSpec&) = default;
};

struct NetConfig {
  // image tower
  std::size_t channels = 3, height = 32, width = 32;
  std::size_t crop = 28;  // random-crop size used by augmentation
  std::size_t first_kernel = 5;
  std::size_t first_channels = 16;
  std::vector<ConvGroupSpec> groups{{2, 16, false}, {2, 32, true}};
  std::size_t embed_dim = 128;
  bool use_convnet = true;  // false gives the basic-feature-only DNN

  // basic-feature tower and fusion head
  std::size_t basic_dim = 0;
  std::size_t basic_hidden = 128;
  std::vector<std::size_t> comb_hidden{256, 128};
  double dropout_rate = 0.5;
  bool use_bn_comb = true;

  // pretraining head
  std::size_t n_categories = 4;
  std::size_t pretrain_hidden = 1024;

  void validate() const;
  std::size_t trunk_channels() const { return groups.empty() ? first_channels : groups.back().channels; }
  std::size_t comb_input() const { return (use_convnet ? embed_dim : 0) + basic_hidden; }

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

void to_json(json& j, const NetConfig& c);
NetConfig net_config_from_json(const json& j, NetConfig defaults = {});

/// Handle on one trainable tensor for the optimiser, checkpoints and tests.
struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
  Tensor* momentum;
  bool conv;   // belongs to the convolution trunk (own learning-rate scale)
  bool decay;  // weight decay applies (weights and BN gamma, not biases/beta)
};

/// Non-trainable state that still has to be checkpointed (BN running stats).
struct BufferRef {
  std::string name;
  Tensor* value;
};

/// Convolution stack: conv -> BN -> ReLU per layer, then global average
/// pooling. Shared between the CTR network and the pretraining classifier.
class ConvTrunk {
 public:
  struct Layer {
    LayerParams conv;
    BnState bn;
    std::size_t stride = 1, pad = 0;
    // forward cache
    Tensor input;
    Tensor conv_out;
    Tensor bn_out;
  };

  explicit ConvTrunk(const NetConfig& cfg);

  void init(Rng& rng);
  /// images [n x c x h x w] -> pooled features [n x out_channels]
  Tensor forward(const Tensor& images, Mode mode);
  /// Accumulates parameter gradients; returns d/d images.
  Tensor backward(const Tensor& grad_features);

  std::size_t out_channels() const { return out_channels_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  void collect(std::vector<ParamRef>& params, std::vector<BufferRef>& buffers);
  void append_signature(std::vector<char>& sig) const;

 private:
  std::size_t in_channels_;
  std::size_t out_channels_;
  std::vector<Layer> layers_;
  Shape last_map_shape_;
  Mode mode_ = Mode::Train;
};

/// DeepCTR: Convnet (trunk + embedding FC) and Basicnet (sparse FC) feeding
/// Combnet (BN over the concatenation, hidden FC+ReLU+dropout layers, scalar
/// output z). With use_convnet = false this is the basic-feature DNN.
class DeepCtrNet {
 public:
  DeepCtrNet(NetConfig cfg, std::shared_ptr<ConvTrunk> trunk);

  const NetConfig& config() const { return cfg_; }
  const std::shared_ptr<ConvTrunk>& trunk() const { return trunk_; }

  void init(Rng& rng);

  /// Embedding FC + ReLU on pooled trunk features [n x trunk_channels].
  Tensor embed_forward(const Tensor& trunk_features);
  /// Returns d/d trunk features.
  Tensor embed_backward(const Tensor& grad_embed);

  /// Convnet: trunk then embedding, [n x embed_dim].
  Tensor convnet_forward(const Tensor& images, Mode mode);
  Tensor convnet_backward(const Tensor& grad_embed);

  /// Basicnet + Combnet for `rows` impressions. image_rows is [rows x
  /// embed_dim] (ignored without a convnet). Returns z of shape [rows].
  Tensor head_forward(const Tensor& image_rows, const SparseBatch& features, Mode mode, Rng& rng);
  /// Accumulates head gradients; returns d/d image_rows (empty without a convnet).
  Tensor head_backward(const Tensor& grad_z);

  std::vector<ParamRef> parameters();
  std::vector<BufferRef> buffers();
  /// Sum of squares of every decayed parameter.
  double weight_sq_norm();
  void zero_grad();

  LayerParams& embed() { return embed_; }
  LayerParams& basic() { return basic_; }
  BnState& comb_bn() { return comb_bn_; }
  std::vector<LayerParams>& comb_layers() { return comb_; }

  /// Input of the Combnet BN (the raw concatenation) from the last forward.
  const Tensor& last_concat() const { return concat_; }

  /// Sign pattern of every ReLU input in the last forward (kink detection
  /// for finite-difference checks).
  std::vector<char> activation_signature() const;

 private:
  NetConfig cfg_;
  std::shared_ptr<ConvTrunk> trunk_;
  LayerParams embed_;
  LayerParams basic_;
  BnState comb_bn_;
  std::vector<LayerParams> comb_;  // hidden layers then the scalar output layer

  // forward cache
  Tensor trunk_features_, embed_pre_;
  SparseBatch features_;
  Tensor basic_pre_, concat_, comb_in_;
  Mode head_mode_ = Mode::Train;
  std::vector<Tensor> hidden_in_, hidden_pre_, dropout_mask_;
};

/// Convnet trunk plus fc18 / fc19 (ReLU) and fc20 logits over categories.
class PretrainNet {
 public:
  PretrainNet(NetConfig cfg, std::shared_ptr<ConvTrunk> trunk);

  void init(Rng& rng);
  Tensor forward(const Tensor& images, Mode mode);  // logits [n x n_categories]
  Tensor backward(const Tensor& grad_logits);       // d/d images

  const std::shared_ptr<ConvTrunk>& trunk() const { return trunk_; }
  std::vector<ParamRef> parameters();
  std::vector<BufferRef> buffers();
  double weight_sq_norm();
  void zero_grad();
  std::vector<char> activation_signature() const;

 private:
  NetConfig cfg_;
  std::shared_ptr<ConvTrunk> trunk_;
  std::vector<LayerParams> fc_;  // fc18, fc19, fc20
  std::vector<Tensor> fc_in_, fc_pre_;
};

struct Networks {
  DeepCtrNet deepctr;
  PretrainNet pretrain;
};

/// He-initialised networks that share one convolution trunk.
Networks build_networks(const NetConfig& cfg, Rng& rng);

std::size_t parameter_count(std::span<const ParamRef> params);

/// Pooled trunk features of every store image, computed once in eval mode.
/// Stands in for the trunk when it is frozen.
class TrunkFeatureCache {
 public:
  TrunkFeatureCache(ConvTrunk& trunk, const ImageStore& store, std::size_t chunk = 32);
  Tensor gather(std::span<const std::string> image_ids) const;

 private:
  const ImageStore* store_;
  Tensor features_;  // [store size x channels]
};

struct ForwardBackwardResult {
  double loss = 0.0;       // data term + lambda * ||W||^2
  double data_loss = 0.0;  // logloss only
  Tensor z;
};

/// One training step's gradients for a grouped batch: Convnet on the n unique
/// images, copy each feature k times, Basicnet + Combnet to the loss,
/// backward to the copies, reduce per `mode`, Convnet backward. Zeroes and
/// then fills every parameter gradient. With `frozen` the trunk is replaced by
/// the cache and receives no gradient.
ForwardBackwardResult forward_backward(DeepCtrNet& net, const GroupedBatch& batch, double lambda, GradMode mode,
                                       Rng& rng, const TrunkFeatureCache* frozen = nullptr);

/// Softmax cross-entropy over categories, gradients into fc18-20 and the
/// shared trunk.
double pretrain_forward_backward(PretrainNet& net, const Tensor& images, std::span<const std::size_t> labels,
                                 double lambda = 0.0);

/// z for a grouped batch with no parameter updates.
Tensor deepctr_forward(DeepCtrNet& net, const GroupedBatch& batch, Mode mode, Rng& rng,
                       const TrunkFeatureCache* frozen = nullptr);

}  // namespace deepctr
