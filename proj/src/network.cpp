#include "deepctr/network.hpp"

#include <algorithm>
#include <stdexcept>

#include "deepctr/kernels.hpp"

namespace deepctr {

void NetConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("net config: " + m); };
  if (channels == 0 || height == 0 || width == 0) fail("image shape must be positive");
  if (crop == 0 || crop > std::min(height, width)) fail("crop must be in [1, min(height, width)]");
  if (first_kernel == 0 || first_kernel % 2 == 0) fail("first_kernel must be odd");
  if (first_channels == 0) fail("first_channels must be positive");
  for (const auto& g : groups)
    if (g.layers == 0 || g.channels == 0) fail("conv groups need layers and channels > 0");
  if (embed_dim == 0) fail("embed_dim must be positive");
  if (basic_dim == 0) fail("basic_dim must be positive");
  if (basic_hidden == 0) fail("basic_hidden must be positive");
  for (auto h : comb_hidden)
    if (h == 0) fail("comb_hidden entries must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must be in [0, 1)");
  if (n_categories < 2) fail("n_categories must be >= 2");
  if (pretrain_hidden == 0) fail("pretrain_hidden must be positive");
}

void to_json(json& j, const NetConfig& c) {
  json groups = json::array();
  for (const auto& g : c.groups) groups.push_back({{"layers", g.layers}, {"channels", g.channels}, {"downsample", g.downsample}});
  j = json{{"channels", c.channels},
           {"height", c.height},
           {"width", c.width},
           {"crop", c.crop},
           {"first_kernel", c.first_kernel},
           {"first_channels", c.first_channels},
           {"groups", groups},
           {"embed_dim", c.embed_dim},
           {"use_convnet", c.use_convnet},
           {"basic_dim", c.basic_dim},
           {"basic_hidden", c.basic_hidden},
           {"comb_hidden", c.comb_hidden},
           {"dropout_rate", c.dropout_rate},
           {"use_bn_comb", c.use_bn_comb},
           {"n_categories", c.n_categories},
           {"pretrain_hidden", c.pretrain_hidden}};
}

NetConfig net_config_from_json(const json& j, NetConfig c) {
  StrictReader r(j, "net");
  r.get("channels", c.channels)
      .get("height", c.height)
      .get("width", c.width)
      .get("crop", c.crop)
      .get("first_kernel", c.first_kernel)
      .get("first_channels", c.first_channels)
      .get("embed_dim", c.embed_dim)
      .get("use_convnet", c.use_convnet)
      .get("basic_dim", c.basic_dim)
      .get("basic_hidden", c.basic_hidden)
      .get("comb_hidden", c.comb_hidden)
      .get("dropout_rate", c.dropout_rate)
      .get("use_bn_comb", c.use_bn_comb)
      .get("n_categories", c.n_categories)
      .get("pretrain_hidden", c.pretrain_hidden);
  if (r.has("groups")) {
    c.groups.clear();
    const json& gs = r.at("groups");
    if (!gs.is_array()) throw ConfigError("net.groups: expected an array");
    for (const auto& g : gs) {
      ConvGroupSpec s;
      StrictReader gr(g, "net.groups[]");
      gr.get("layers", s.layers).get("channels", s.channels).get("downsample", s.downsample);
      gr.finish();
      c.groups.push_back(s);
    }
  }
  r.finish();
  return c;
}

namespace {

void add_layer(std::vector<ParamRef>& out, const std::string& name, LayerParams& p, bool conv) {
  out.push_back({name + ".w", &p.weights, &p.grad_weights, &p.momentum_weights, conv, true});
  out.push_back({name + ".b", &p.bias, &p.grad_bias, &p.momentum_bias, conv, false});
}

void add_bn(std::vector<ParamRef>& out, std::vector<BufferRef>& buf, const std::string& name, BnState& s, bool conv) {
  out.push_back({name + ".gamma", &s.gamma, &s.grad_gamma, &s.momentum_gamma, conv, true});
  out.push_back({name + ".beta", &s.beta, &s.grad_beta, &s.momentum_beta, conv, false});
  buf.push_back({name + ".running_mean", &s.running_mean});
  buf.push_back({name + ".running_var", &s.running_var});
}

double decayed_sq_norm(const std::vector<ParamRef>& params) {
  double s = 0.0;
  for (const auto& p : params)
    if (p.decay) s += squared_norm(*p.value);
  return s;
}

// d(lambda ||W||^2)/dW on top of the data gradient.
void add_decay_grad(const std::vector<ParamRef>& params, double lambda, bool skip_conv) {
  if (lambda == 0.0) return;
  for (const auto& p : params) {
    if (!p.decay || (skip_conv && p.conv)) continue;
    const double* w = p.value->data();
    double* g = p.grad->data();
    for (std::size_t i = 0; i < p.value->size(); ++i) g[i] += 2.0 * lambda * w[i];
  }
}

void append_positive(std::vector<char>& sig, const Tensor& t) {
  for (double v : t.values()) sig.push_back(v > 0.0 ? 1 : 0);
}

// [rows x a] | [rows x b] -> [rows x (a + b)]
Tensor concat_cols(const Tensor& a, const Tensor& b) {
  const std::size_t rows = b.dim(0), na = a.empty() ? 0 : a.dim(1), nb = b.dim(1);
  Tensor out({rows, na + nb});
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out.data() + r * (na + nb);
    if (na) std::copy(a.data() + r * na, a.data() + (r + 1) * na, o);
    std::copy(b.data() + r * nb, b.data() + (r + 1) * nb, o + na);
  }
  return out;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t rows = x.dim(0), n = x.dim(1), w = end - begin;
  Tensor out({rows, w});
  for (std::size_t r = 0; r < rows; ++r) std::copy(x.data() + r * n + begin, x.data() + r * n + end, out.data() + r * w);
  return out;
}

}  // namespace

// --- trunk -----------------------------------------------------------------------

ConvTrunk::ConvTrunk(const NetConfig& cfg) : in_channels_(cfg.channels), out_channels_(cfg.trunk_channels()) {
  const std::size_t fk = cfg.first_kernel;
  Layer first{LayerParams::conv(cfg.first_channels, cfg.channels, fk, fk), BnState(cfg.first_channels), 1, fk / 2, {}, {}, {}};
  layers_.push_back(std::move(first));
  std::size_t prev = cfg.first_channels;
  for (const auto& g : cfg.groups) {
    for (std::size_t i = 0; i < g.layers; ++i) {
      const std::size_t stride = (g.downsample && i == 0) ? 2 : 1;
      layers_.push_back({LayerParams::conv(g.channels, prev, 3, 3), BnState(g.channels), stride, 1, {}, {}, {}});
      prev = g.channels;
    }
  }
}

void ConvTrunk::init(Rng& rng) {
  for (auto& l : layers_) l.conv.init_he(rng);
}

Tensor ConvTrunk::forward(const Tensor& images, Mode mode) {
  require_rank(images, 4, "ConvTrunk::forward");
  if (images.dim(1) != in_channels_) {
    throw DimensionError("ConvTrunk::forward: expected " + std::to_string(in_channels_) + " channels, got " +
                         shape_string(images.shape()));
  }
  mode_ = mode;
  Tensor x = images;
  for (auto& l : layers_) {
    l.input = std::move(x);
    l.conv_out = conv2d_forward(l.input, l.conv, l.stride, l.pad);
    l.bn_out = batchnorm_forward(l.conv_out, l.bn, mode);
    x = relu(l.bn_out);
  }
  last_map_shape_ = x.shape();
  return global_avg_pool(x);
}

Tensor ConvTrunk::backward(const Tensor& grad_features) {
  if (last_map_shape_.empty()) throw std::logic_error("ConvTrunk::backward before forward");
  Tensor g = global_avg_pool_backward(last_map_shape_, grad_features);
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    g = relu_backward(it->bn_out, g);
    g = mode_ == Mode::Train ? batchnorm_backward(it->conv_out, it->bn, g) : batchnorm_eval_backward(it->bn, g);
    g = conv2d_backward(it->input, it->conv, g, it->stride, it->pad);
  }
  return g;
}

void ConvTrunk::collect(std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    add_layer(params, "trunk.conv" + std::to_string(i), layers_[i].conv, true);
    add_bn(params, buffers, "trunk.bn" + std::to_string(i), layers_[i].bn, true);
  }
}

void ConvTrunk::append_signature(std::vector<char>& sig) const {
  for (const auto& l : layers_) append_positive(sig, l.bn_out);
}

// --- DeepCTR -----------------------------------------------------------------------

DeepCtrNet::DeepCtrNet(NetConfig cfg, std::shared_ptr<ConvTrunk> trunk) : cfg_(std::move(cfg)), trunk_(std::move(trunk)) {
  cfg_.validate();
  if (cfg_.use_convnet) {
    if (!trunk_) throw std::invalid_argument("DeepCtrNet: convnet enabled but no trunk given");
    embed_ = LayerParams::fully_connected(trunk_->out_channels(), cfg_.embed_dim);
  }
  basic_ = LayerParams::fully_connected(cfg_.basic_dim, cfg_.basic_hidden);
  comb_bn_ = BnState(cfg_.comb_input());
  std::size_t prev = cfg_.comb_input();
  for (auto h : cfg_.comb_hidden) {
    comb_.push_back(LayerParams::fully_connected(prev, h));
    prev = h;
  }
  comb_.push_back(LayerParams::fully_connected(prev, 1));
}

void DeepCtrNet::init(Rng& rng) {
  if (cfg_.use_convnet) embed_.init_he(rng);
  basic_.init_he(rng);
  for (auto& l : comb_) l.init_he(rng);
}

Tensor DeepCtrNet::embed_forward(const Tensor& trunk_features) {
  require_rank(trunk_features, 2, "DeepCtrNet::embed_forward");
  trunk_features_ = trunk_features;
  embed_pre_ = dense_fc_forward(trunk_features_, embed_);
  return relu(embed_pre_);
}

Tensor DeepCtrNet::embed_backward(const Tensor& grad_embed) {
  Tensor g = relu_backward(embed_pre_, grad_embed);
  return dense_fc_backward(trunk_features_, embed_, g);
}

Tensor DeepCtrNet::convnet_forward(const Tensor& images, Mode mode) {
  if (!cfg_.use_convnet) throw std::logic_error("DeepCtrNet: no convnet in this configuration");
  return embed_forward(trunk_->forward(images, mode));
}

Tensor DeepCtrNet::convnet_backward(const Tensor& grad_embed) { return trunk_->backward(embed_backward(grad_embed)); }

Tensor DeepCtrNet::head_forward(const Tensor& image_rows, const SparseBatch& features, Mode mode, Rng& rng) {
  const std::size_t rows = features.num_rows;
  if (cfg_.use_convnet) require_shape(image_rows, {rows, cfg_.embed_dim}, "DeepCtrNet::head_forward");
  if (features.dim != cfg_.basic_dim) {
    throw DimensionError("DeepCtrNet::head_forward: feature dim " + std::to_string(features.dim) + " != " +
                         std::to_string(cfg_.basic_dim));
  }
  head_mode_ = mode;
  features_ = features;
  basic_pre_ = sparse_fc_forward(features_, basic_);
  Tensor basic_act = relu(basic_pre_);
  concat_ = cfg_.use_convnet ? concat_cols(image_rows, basic_act) : std::move(basic_act);
  comb_in_ = cfg_.use_bn_comb ? batchnorm_forward(concat_, comb_bn_, mode) : concat_;

  hidden_in_.clear();
  hidden_pre_.clear();
  dropout_mask_.clear();
  Tensor x = comb_in_;
  for (std::size_t i = 0; i + 1 < comb_.size(); ++i) {
    hidden_in_.push_back(x);
    hidden_pre_.push_back(dense_fc_forward(x, comb_[i]));
    auto d = dropout_forward(relu(hidden_pre_.back()), cfg_.dropout_rate, rng, mode);
    dropout_mask_.push_back(std::move(d.mask));
    x = std::move(d.output);
  }
  hidden_in_.push_back(x);
  Tensor z = dense_fc_forward(x, comb_.back());
  z.reshape({rows});
  return z;
}

Tensor DeepCtrNet::head_backward(const Tensor& grad_z) {
  if (hidden_in_.empty()) throw std::logic_error("DeepCtrNet::head_backward before head_forward");
  const std::size_t rows = features_.num_rows;
  require_shape(grad_z, {rows}, "DeepCtrNet::head_backward");
  Tensor g = dense_fc_backward(hidden_in_.back(), comb_.back(), grad_z.reshaped({rows, 1}));
  for (std::size_t i = comb_.size() - 1; i-- > 0;) {
    g = dropout_backward(dropout_mask_[i], g);
    g = relu_backward(hidden_pre_[i], g);
    g = dense_fc_backward(hidden_in_[i], comb_[i], g);
  }
  if (cfg_.use_bn_comb) {
    g = head_mode_ == Mode::Train ? batchnorm_backward(concat_, comb_bn_, g) : batchnorm_eval_backward(comb_bn_, g);
  }
  const std::size_t e = cfg_.use_convnet ? cfg_.embed_dim : 0;
  Tensor g_basic = slice_cols(g, e, e + cfg_.basic_hidden);
  sparse_fc_backward(features_, basic_, relu_backward(basic_pre_, g_basic));
  if (!cfg_.use_convnet) return {};
  return slice_cols(g, 0, e);
}

std::vector<ParamRef> DeepCtrNet::parameters() {
  std::vector<ParamRef> p;
  std::vector<BufferRef> unused;
  if (cfg_.use_convnet) {
    trunk_->collect(p, unused);
    add_layer(p, "embed", embed_, false);
  }
  add_layer(p, "basic", basic_, false);
  if (cfg_.use_bn_comb) add_bn(p, unused, "comb.bn", comb_bn_, false);
  for (std::size_t i = 0; i < comb_.size(); ++i) add_layer(p, "comb.fc" + std::to_string(i), comb_[i], false);
  return p;
}

std::vector<BufferRef> DeepCtrNet::buffers() {
  std::vector<ParamRef> unused;
  std::vector<BufferRef> b;
  if (cfg_.use_convnet) trunk_->collect(unused, b);
  if (cfg_.use_bn_comb) add_bn(unused, b, "comb.bn", comb_bn_, false);
  return b;
}

double DeepCtrNet::weight_sq_norm() { return decayed_sq_norm(parameters()); }

void DeepCtrNet::zero_grad() {
  for (auto& p : parameters()) p.grad->fill(0.0);
}

std::vector<char> DeepCtrNet::activation_signature() const {
  std::vector<char> sig;
  if (cfg_.use_convnet) {
    trunk_->append_signature(sig);
    append_positive(sig, embed_pre_);
  }
  append_positive(sig, basic_pre_);
  for (const auto& h : hidden_pre_) append_positive(sig, h);
  return sig;
}

// --- pretraining classifier --------------------------------------------------------

PretrainNet::PretrainNet(NetConfig cfg, std::shared_ptr<ConvTrunk> trunk) : cfg_(std::move(cfg)), trunk_(std::move(trunk)) {
  if (!trunk_) throw std::invalid_argument("PretrainNet: no trunk given");
  fc_.push_back(LayerParams::fully_connected(trunk_->out_channels(), cfg_.pretrain_hidden));
  fc_.push_back(LayerParams::fully_connected(cfg_.pretrain_hidden, cfg_.pretrain_hidden));
  fc_.push_back(LayerParams::fully_connected(cfg_.pretrain_hidden, cfg_.n_categories));
}

void PretrainNet::init(Rng& rng) {
  for (auto& l : fc_) l.init_he(rng);
}

Tensor PretrainNet::forward(const Tensor& images, Mode mode) {
  Tensor x = trunk_->forward(images, mode);
  fc_in_.clear();
  fc_pre_.clear();
  for (std::size_t i = 0; i < fc_.size(); ++i) {
    fc_in_.push_back(x);
    fc_pre_.push_back(dense_fc_forward(x, fc_[i]));
    x = i + 1 < fc_.size() ? relu(fc_pre_.back()) : fc_pre_.back();
  }
  return x;
}

Tensor PretrainNet::backward(const Tensor& grad_logits) {
  if (fc_in_.empty()) throw std::logic_error("PretrainNet::backward before forward");
  Tensor g = grad_logits;
  for (std::size_t i = fc_.size(); i-- > 0;) {
    if (i + 1 < fc_.size()) g = relu_backward(fc_pre_[i], g);
    g = dense_fc_backward(fc_in_[i], fc_[i], g);
  }
  return trunk_->backward(g);
}

std::vector<ParamRef> PretrainNet::parameters() {
  std::vector<ParamRef> p;
  std::vector<BufferRef> unused;
  trunk_->collect(p, unused);
  for (std::size_t i = 0; i < fc_.size(); ++i) add_layer(p, "pretrain.fc" + std::to_string(i), fc_[i], false);
  return p;
}

std::vector<BufferRef> PretrainNet::buffers() {
  std::vector<ParamRef> unused;
  std::vector<BufferRef> b;
  trunk_->collect(unused, b);
  return b;
}

std::vector<char> PretrainNet::activation_signature() const {
  std::vector<char> sig;
  trunk_->append_signature(sig);
  for (std::size_t i = 0; i + 1 < fc_pre_.size(); ++i) append_positive(sig, fc_pre_[i]);
  return sig;
}

double PretrainNet::weight_sq_norm() { return decayed_sq_norm(parameters()); }

void PretrainNet::zero_grad() {
  for (auto& p : parameters()) p.grad->fill(0.0);
}

// --- assembly ---------------------------------------------------------------------

Networks build_networks(const NetConfig& cfg, Rng& rng) {
  cfg.validate();
  auto trunk = std::make_shared<ConvTrunk>(cfg);
  Networks nets{DeepCtrNet(cfg, trunk), PretrainNet(cfg, trunk)};
  trunk->init(rng);
  nets.deepctr.init(rng);
  nets.pretrain.init(rng);
  return nets;
}

std::size_t parameter_count(std::span<const ParamRef> params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value->size();
  return n;
}

TrunkFeatureCache::TrunkFeatureCache(ConvTrunk& trunk, const ImageStore& store, std::size_t chunk) : store_(&store) {
  if (chunk == 0) throw std::invalid_argument("TrunkFeatureCache: chunk must be positive");
  const std::size_t n = store.size(), c = trunk.out_channels();
  features_ = Tensor({n, c});
  std::vector<std::string> ids;
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t end = std::min(n, begin + chunk);
    ids.clear();
    for (std::size_t i = begin; i < end; ++i) ids.push_back(store.id_at(i));
    Tensor f = trunk.forward(stack_images(store, ids), Mode::Eval);
    std::copy(f.data(), f.data() + f.size(), features_.data() + begin * c);
  }
}

Tensor TrunkFeatureCache::gather(std::span<const std::string> image_ids) const {
  const std::size_t c = features_.dim(1);
  Tensor out({image_ids.size(), c});
  for (std::size_t i = 0; i < image_ids.size(); ++i) {
    const std::size_t src = store_->index_of(image_ids[i]);
    std::copy(features_.data() + src * c, features_.data() + (src + 1) * c, out.data() + i * c);
  }
  return out;
}

// --- training step ------------------------------------------------------------------

namespace {

Tensor image_rows_forward(DeepCtrNet& net, const GroupedBatch& batch, Mode mode, const TrunkFeatureCache* frozen) {
  if (!net.config().use_convnet) return {};
  if (batch.rows() != batch.n() * batch.k) {
    throw std::invalid_argument("grouped batch: " + std::to_string(batch.rows()) + " rows for n=" +
                                std::to_string(batch.n()) + ", k=" + std::to_string(batch.k));
  }
  Tensor emb;
  if (frozen) {
    emb = net.embed_forward(frozen->gather(batch.image_ids));
  } else {
    if (batch.images.empty()) throw std::invalid_argument("grouped batch has no images");
    emb = net.convnet_forward(batch.images, mode);
  }
  return replicate_image_features(emb, batch.k);
}

}  // namespace

ForwardBackwardResult forward_backward(DeepCtrNet& net, const GroupedBatch& batch, double lambda, GradMode mode,
                                       Rng& rng, const TrunkFeatureCache* frozen) {
  auto params = net.parameters();
  for (auto& p : params) p.grad->fill(0.0);

  Tensor copies = image_rows_forward(net, batch, Mode::Train, frozen);
  Tensor z = net.head_forward(copies, batch.features, Mode::Train, rng);
  const double wn = lambda != 0.0 ? decayed_sq_norm(params) : 0.0;
  LossResult lr = sigmoid_logloss(z, batch.labels, wn, lambda);

  Tensor g_copies = net.head_backward(lr.grad);
  if (net.config().use_convnet) {
    Tensor g_emb = reduce_copy_gradients(g_copies, batch.k, mode);
    Tensor g_trunk = net.embed_backward(g_emb);
    if (!frozen) net.trunk()->backward(g_trunk);
  }
  add_decay_grad(params, lambda, frozen != nullptr);
  return {lr.loss, lr.loss - lambda * wn, std::move(z)};
}

Tensor deepctr_forward(DeepCtrNet& net, const GroupedBatch& batch, Mode mode, Rng& rng, const TrunkFeatureCache* frozen) {
  Tensor copies = image_rows_forward(net, batch, mode, frozen);
  return net.head_forward(copies, batch.features, mode, rng);
}

double pretrain_forward_backward(PretrainNet& net, const Tensor& images, std::span<const std::size_t> labels,
                                 double lambda) {
  auto params = net.parameters();
  for (auto& p : params) p.grad->fill(0.0);
  Tensor logits = net.forward(images, Mode::Train);
  LossResult lr = softmax_cross_entropy(logits, labels);
  net.backward(lr.grad);
  double wn = 0.0;
  if (lambda != 0.0) {
    wn = decayed_sq_norm(params);
    add_decay_grad(params, lambda, false);
  }
  return lr.loss + lambda * wn;
}

}  // namespace deepctr
