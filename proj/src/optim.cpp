#include "deepctr/optim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace deepctr {

void OptimConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("optim config: " + m); };
  if (!(base_lr > 0.0)) fail("base_lr must be positive");
  if (!(conv_lr_scale >= 0.0)) fail("conv_lr_scale must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(lr_drop_factor > 0.0)) fail("lr_drop_factor must be positive");
  if (eval_every == 0) fail("eval_every must be positive");
  for (std::size_t i = 1; i < lr_drop_iters.size(); ++i)
    if (lr_drop_iters[i] <= lr_drop_iters[i - 1]) fail("lr_drop_iters must be strictly increasing");
}

void to_json(json& j, const OptimConfig& c) {
  j = json{{"base_lr", c.base_lr},
           {"conv_lr_scale", c.conv_lr_scale},
           {"momentum", c.momentum},
           {"weight_decay", c.weight_decay},
           {"lr_drop_iters", c.lr_drop_iters},
           {"lr_drop_factor", c.lr_drop_factor},
           {"max_iters", c.max_iters},
           {"eval_every", c.eval_every}};
}

OptimConfig optim_config_from_json(const json& j, OptimConfig c) {
  StrictReader r(j, "optim");
  r.get("base_lr", c.base_lr)
      .get("conv_lr_scale", c.conv_lr_scale)
      .get("momentum", c.momentum)
      .get("weight_decay", c.weight_decay)
      .get("lr_drop_iters", c.lr_drop_iters)
      .get("lr_drop_factor", c.lr_drop_factor)
      .get("max_iters", c.max_iters)
      .get("eval_every", c.eval_every)
      .finish();
  c.validate();
  return c;
}

double lr_at(const OptimConfig& cfg, std::uint64_t iter) {
  const auto drops = std::count_if(cfg.lr_drop_iters.begin(), cfg.lr_drop_iters.end(),
                                   [&](std::uint64_t d) { return d <= iter; });
  return cfg.base_lr / std::pow(cfg.lr_drop_factor, static_cast<double>(drops));
}

void sgd_step(std::span<const ParamRef> params, const OptimConfig& cfg, double lr_now) {
  for (const auto& p : params) {
    const double lr = p.conv ? lr_now * cfg.conv_lr_scale : lr_now;
    const double wd = p.decay ? cfg.weight_decay : 0.0;
    double* w = p.value->data();
    double* g = p.grad->data();
    double* m = p.momentum->data();
    const std::size_t n = p.value->size();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = cfg.momentum * m[i] + g[i] + wd * w[i];
      w[i] -= lr * m[i];
      g[i] = 0.0;
    }
    if (!p.value->all_finite()) throw NonFiniteError("sgd_step: non-finite value in " + p.name);
  }
}

}  // namespace deepctr
