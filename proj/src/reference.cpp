#include "deepctr/reference.hpp"

namespace deepctr::reference {

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "reference::matmul");
  require_rank(b, 2, "reference::matmul");
  if (a.dim(1) != b.dim(0)) throw DimensionError("reference::matmul: inner extents differ");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      c.at(i, j) = s;
    }
  return c;
}

Tensor dense_fc_forward(const Tensor& x, const LayerParams& p) {
  Tensor y = matmul(x, p.weights);
  for (std::size_t r = 0; r < y.dim(0); ++r)
    for (std::size_t j = 0; j < y.dim(1); ++j) y.at(r, j) += p.bias[j];
  return y;
}

Tensor conv2d_forward(const Tensor& x, const LayerParams& p, std::size_t stride, std::size_t pad) {
  require_rank(x, 4, "reference::conv2d_forward");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = p.weights.dim(0), kh = p.weights.dim(2), kw = p.weights.dim(3);
  if (p.weights.dim(1) != cin) throw DimensionError("reference::conv2d_forward: channel mismatch");
  if (h + 2 * pad < kh || w + 2 * pad < kw) throw DimensionError("reference::conv2d_forward: empty output");
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
  Tensor y({n, cout, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double s = p.bias[o];
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                s += x[((b * cin + c) * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] *
                     p.weights[((o * cin + c) * kh + ky) * kw + kx];
              }
          y[((b * cout + o) * oh + oy) * ow + ox] = s;
        }
  return y;
}

}  // namespace deepctr::reference
