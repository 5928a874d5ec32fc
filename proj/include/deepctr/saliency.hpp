#pragma once

#include <concepts>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deepctr/network.hpp"
#include "deepctr/sparse.hpp"
#include "deepctr/tensor.hpp"

namespace deepctr {

/// Per-pixel importance [h x w], all values >= 0.
struct SaliencyMap {
  Tensor values;
  std::string image_id;
  SparseRow features;  // impression context the gradient was taken in
};

/// Anything that scores one image plus one basic-feature row and can
/// differentiate the score with respect to the image.
template <class M>
concept ImageScoreModel = requires(M& m, const Tensor& image, const SparseRow& row) {
  { m.score(image, row) } -> std::convertible_to<double>;
  { m.score_gradient(image, row) } -> std::same_as<Tensor>;
};

/// DeepCTR in eval mode, scored at z (before the sigmoid). Parameter
/// gradients touched by the backward pass are cleared afterwards.
class DeepCtrScorer {
 public:
  explicit DeepCtrScorer(DeepCtrNet& net) : net_(&net) {}
  double score(const Tensor& image, const SparseRow& row);
  Tensor score_gradient(const Tensor& image, const SparseRow& row);

 private:
  Tensor forward(const Tensor& image, const SparseRow& row);
  DeepCtrNet* net_;
};

/// z = sum_p a_p U_p + b; ignores the basic features.
class LinearImageScorer {
 public:
  LinearImageScorer(Tensor coefficients, double bias = 0.0) : a_(std::move(coefficients)), b_(bias) {}
  double score(const Tensor& image, const SparseRow& row) const;
  Tensor score_gradient(const Tensor& image, const SparseRow& row) const;

 private:
  Tensor a_;
  double b_;
};

/// dz/dU at U = image ([c x h x w]) for one impression's basic features.
template <ImageScoreModel M>
Tensor input_gradient(M& model, const Tensor& image, const SparseRow& row) {
  require_rank(image, 3, "input_gradient");
  Tensor g = model.score_gradient(image, row);
  require_shape(g, image.shape(), "input_gradient");
  return g;
}

inline Tensor input_gradient(DeepCtrNet& net, const Tensor& image, const SparseRow& row) {
  DeepCtrScorer s(net);
  return input_gradient(s, image, row);
}

/// M(i, j) = max over channels of |w(c, i, j)|.
SaliencyMap saliency_from_gradient(const Tensor& w);

/// Linear rescale with max -> 255 (all-zero stays zero), written as P5.
void export_heatmap(const SaliencyMap& m, const std::filesystem::path& path);
/// The bytes export_heatmap would write for each pixel.
std::vector<std::uint8_t> heatmap_bytes(const SaliencyMap& m);

/// Share of total saliency inside the square [x, x+size) x [y, y+size),
/// divided by the square's share of the image area. 1 means no preference.
double region_mass_ratio(const SaliencyMap& m, std::size_t x, std::size_t y, std::size_t size);

}  // namespace deepctr
