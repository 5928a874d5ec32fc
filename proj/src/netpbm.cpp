#include "deepctr/netpbm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

namespace deepctr {

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in, const std::filesystem::path& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw FormatError(path.string() + ": truncated netpbm header");
  return tok;
}

std::size_t header_number(std::istream& in, const std::filesystem::path& path) {
  const std::string tok = header_token(in, path);
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char ch) { return std::isdigit(ch); })) {
    throw FormatError(path.string() + ": bad netpbm header field '" + tok + "'");
  }
  return std::stoul(tok);
}

}  // namespace

PnmImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  const std::string magic = header_token(in, path);
  PnmImage img;
  if (magic == "P6") {
    img.channels = 3;
  } else if (magic == "P5") {
    img.channels = 1;
  } else {
    throw FormatError(path.string() + ": unsupported netpbm magic '" + magic + "'");
  }
  img.width = header_number(in, path);
  img.height = header_number(in, path);
  const std::size_t maxval = header_number(in, path);
  if (maxval != 255) throw FormatError(path.string() + ": only maxval 255 is supported");
  if (img.width == 0 || img.height == 0) throw FormatError(path.string() + ": empty raster");
  // header_token consumed the single whitespace byte after maxval
  img.pixels.resize(img.width * img.height * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.pixels.size()) {
    throw FormatError(path.string() + ": truncated pixel data");
  }
  return img;
}

void write_pnm(const std::filesystem::path& path, const PnmImage& image) {
  if (image.channels != 1 && image.channels != 3) throw FormatError("write_pnm: channels must be 1 or 3");
  if (image.pixels.size() != image.width * image.height * image.channels) {
    throw FormatError("write_pnm: pixel buffer size mismatch");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

Tensor pnm_to_tensor(const PnmImage& image) {
  const std::size_t c = image.channels, h = image.height, w = image.width;
  Tensor t({c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        t[(ch * h + y) * w + x] = static_cast<double>(image.pixels[(y * w + x) * c + ch]) / 255.0;
  return t;
}

Tensor center_resize(const Tensor& image, std::size_t side) {
  require_rank(image, 3, "center_resize");
  if (side == 0) throw DimensionError("center_resize: side must be positive");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t sq = std::min(h, w), y0 = (h - sq) / 2, x0 = (w - sq) / 2;
  Tensor out({c, side, side});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        // sample at the centre of the destination pixel
        const std::size_t sy = y0 + (2 * y + 1) * sq / (2 * side), sx = x0 + (2 * x + 1) * sq / (2 * side);
        out[(ch * side + y) * side + x] = image[(ch * h + sy) * w + sx];
      }
  return out;
}

PnmImage tensor_to_pnm(const Tensor& image) {
  require_rank(image, 3, "tensor_to_pnm");
  PnmImage img{image.dim(2), image.dim(1), image.dim(0), {}};
  if (img.channels != 1 && img.channels != 3) throw FormatError("tensor_to_pnm: channels must be 1 or 3");
  img.pixels.resize(image.size());
  const std::size_t c = img.channels, h = img.height, w = img.width;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = std::clamp(image[(ch * h + y) * w + x], 0.0, 1.0);
        img.pixels[(y * w + x) * c + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

}  // namespace deepctr
