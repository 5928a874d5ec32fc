#include "deepctr/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "deepctr/netpbm.hpp"

namespace deepctr {

Tensor DeepCtrScorer::forward(const Tensor& image, const SparseRow& row) {
  require_rank(image, 3, "DeepCtrScorer");
  if (!net_->config().use_convnet) throw std::invalid_argument("DeepCtrScorer: network has no image tower");
  Tensor batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  Tensor emb = net_->convnet_forward(batch, Mode::Eval);
  SparseBatch v(net_->config().basic_dim);
  v.append_row(row);
  Rng unused(0);
  return net_->head_forward(emb, v, Mode::Eval, unused);
}

double DeepCtrScorer::score(const Tensor& image, const SparseRow& row) { return forward(image, row)[0]; }

Tensor DeepCtrScorer::score_gradient(const Tensor& image, const SparseRow& row) {
  forward(image, row);
  Tensor g_rows = net_->head_backward(Tensor({1}, 1.0));
  Tensor g = net_->convnet_backward(g_rows);
  net_->zero_grad();
  return g.reshaped(image.shape());
}

double LinearImageScorer::score(const Tensor& image, const SparseRow&) const {
  require_shape(image, a_.shape(), "LinearImageScorer");
  double z = b_;
  for (std::size_t i = 0; i < a_.size(); ++i) z += a_[i] * image[i];
  return z;
}

Tensor LinearImageScorer::score_gradient(const Tensor& image, const SparseRow&) const {
  require_shape(image, a_.shape(), "LinearImageScorer");
  return a_;
}

SaliencyMap saliency_from_gradient(const Tensor& w) {
  require_rank(w, 3, "saliency_from_gradient");
  const std::size_t c = w.dim(0), hw = w.dim(1) * w.dim(2);
  SaliencyMap m;
  m.values = Tensor({w.dim(1), w.dim(2)});
  for (std::size_t p = 0; p < hw; ++p) {
    double best = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) best = std::max(best, std::abs(w[ch * hw + p]));
    m.values[p] = best;
  }
  return m;
}

std::vector<std::uint8_t> heatmap_bytes(const SaliencyMap& m) {
  require_rank(m.values, 2, "heatmap_bytes");
  require_finite(m.values, "heatmap_bytes");
  double top = 0.0;
  for (double v : m.values.values()) {
    if (v < 0.0) throw std::invalid_argument("heatmap_bytes: saliency must be non-negative");
    top = std::max(top, v);
  }
  std::vector<std::uint8_t> out(m.values.size(), 0);
  if (top == 0.0) return out;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * m.values[i] / top));
  return out;
}

void export_heatmap(const SaliencyMap& m, const std::filesystem::path& path) {
  PnmImage img;
  img.height = m.values.dim(0);
  img.width = m.values.dim(1);
  img.channels = 1;
  img.pixels = heatmap_bytes(m);
  write_pnm(path, img);
}

double region_mass_ratio(const SaliencyMap& m, std::size_t x, std::size_t y, std::size_t size) {
  require_rank(m.values, 2, "region_mass_ratio");
  const std::size_t h = m.values.dim(0), w = m.values.dim(1);
  if (size == 0 || x + size > w || y + size > h) throw std::invalid_argument("region_mass_ratio: region outside image");
  double total = 0.0, inside = 0.0;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double v = m.values.at(i, j);
      total += v;
      if (i >= y && i < y + size && j >= x && j < x + size) inside += v;
    }
  }
  if (total == 0.0) return 0.0;
  const double area_share = static_cast<double>(size * size) / static_cast<double>(h * w);
  return (inside / total) / area_share;
}

}  // namespace deepctr
