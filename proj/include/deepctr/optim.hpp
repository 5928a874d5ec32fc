#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "deepctr/json_util.hpp"
#include "deepctr/network.hpp"

namespace deepctr {

struct OptimConfig {
  double base_lr = 0.1;
  double conv_lr_scale = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-5;
  std::vector<std::uint64_t> lr_drop_iters{3000, 5000, 7000};
  double lr_drop_factor = 10.0;
  std::uint64_t max_iters = 8000;
  std::uint64_t eval_every = 500;

  void validate() const;
};

void to_json(json& j, const OptimConfig& c);
OptimConfig optim_config_from_json(const json& j, OptimConfig defaults = {});

/// base_lr / factor^(number of drop points <= iter)
double lr_at(const OptimConfig& cfg, std::uint64_t iter);

/// buf = momentum * buf + grad + weight_decay * param (decayed params only);
/// param -= lr * buf, with lr scaled by conv_lr_scale for trunk parameters.
/// Zeroes the gradients. The decay term is the gradient of
/// (weight_decay / 2) * ||W||^2.
void sgd_step(std::span<const ParamRef> params, const OptimConfig& cfg, double lr_now);

}  // namespace deepctr
