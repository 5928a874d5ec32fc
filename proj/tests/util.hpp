#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "deepctr/rng.hpp"
#include "deepctr/sparse.hpp"
#include "deepctr/tensor.hpp"

namespace testutil {

using deepctr::Rng;
using deepctr::Shape;
using deepctr::Tensor;

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

inline Tensor random_uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// |a - n| / max(|a|, |n|, floor). The floor keeps coordinates whose true
/// gradient is ~0 from turning round-off into a huge ratio.
inline double rel_err(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline double central_difference(const std::function<double()>& f, double& x, double h = 1e-5) {
  const double keep = x;
  x = keep + h;
  const double up = f();
  x = keep - h;
  const double down = f();
  x = keep;
  return (up - down) / (2 * h);
}

struct FdReport {
  double worst = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

/// Compares `analytic` against central differences of f over every element of
/// `x`. `stable` (optional) reports whether the piecewise-linear pattern is
/// unchanged at x +- h; coordinates where it flips are skipped.
inline FdReport fd_check(const std::function<double()>& f, Tensor& x, const Tensor& analytic, double h = 1e-5,
                         const std::function<bool()>& stable = {}, double floor = 1e-6) {
  FdReport r;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double& xi = x[i];
    const double keep = xi;
    bool ok = true;
    xi = keep + h;
    const double up = f();
    if (stable) ok &= stable();
    xi = keep - h;
    const double down = f();
    if (stable) ok &= stable();
    xi = keep;
    if (!ok) {
      ++r.skipped;
      continue;
    }
    r.worst = std::max(r.worst, rel_err(analytic[i], (up - down) / (2 * h), floor));
    ++r.checked;
  }
  return r;
}

/// Five-point stencil, truncation O(h^4). Used where the tolerance is tighter
/// than the round-off of a 1e-5 central difference allows.
inline FdReport fd_check5(const std::function<double()>& f, Tensor& x, const Tensor& analytic, double h = 1e-3,
                          double floor = 1e-6) {
  FdReport r;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double& xi = x[i];
    const double keep = xi;
    double v[4];
    const double off[4] = {2 * h, h, -h, -2 * h};
    for (int j = 0; j < 4; ++j) {
      xi = keep + off[j];
      v[j] = f();
    }
    xi = keep;
    const double numeric = (-v[0] + 8 * v[1] - 8 * v[2] + v[3]) / (12 * h);
    r.worst = std::max(r.worst, rel_err(analytic[i], numeric, floor));
    ++r.checked;
  }
  return r;
}

inline deepctr::SparseBatch random_sparse(std::size_t rows, std::size_t dim, std::size_t max_nnz, Rng& rng,
                                          bool one_hot = false) {
  std::vector<deepctr::SparseRow> rs(rows);
  for (auto& r : rs) {
    const std::size_t nnz = rng.uniform_index(std::min(max_nnz, dim) + 1);
    while (r.size() < nnz) {
      const std::size_t j = rng.uniform_index(dim);
      if (std::none_of(r.begin(), r.end(), [&](const auto& e) { return e.index == j; }))
        r.push_back({j, one_hot ? 1.0 : rng.normal()});
    }
  }
  return deepctr::csr_from_rows(rs, dim);
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("deepctr-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
