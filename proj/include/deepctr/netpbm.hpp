#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "deepctr/tensor.hpp"

namespace deepctr {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit binary netpbm raster: P5 (1 channel) or P6 (3 channels, interleaved).
struct PnmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;
};

PnmImage read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const PnmImage& image);

/// Channels-first [c x h x w] tensor with byte b mapped to b / 255.
Tensor pnm_to_tensor(const PnmImage& image);
/// Central square crop of [c x h x w] (side min(h, w)) resized to side x side
/// by nearest neighbour. Square inputs of the right size come back unchanged.
Tensor center_resize(const Tensor& image, std::size_t side);

/// Inverse of pnm_to_tensor; values are clamped to [0, 1] and rounded.
PnmImage tensor_to_pnm(const Tensor& image);

}  // namespace deepctr
