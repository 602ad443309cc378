// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <unordered_map>
#include <vector>

#include "moecl/tensor.hpp"

namespace moecl {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adaptive-moment optimiser with weight decay applied to the parameter
/// directly rather than folded into the gradient. Parameters that do not
/// require a grad, or received none since the last zero_grad, are skipped.
class AdamW {
   public:
    explicit AdamW(AdamWConfig config) : config_(config) {}

    void step(std::span<Tensor> params);
    void set_lr(double lr) { config_.lr = lr; }
    const AdamWConfig& config() const noexcept { return config_; }

   private:
    struct Moments {
        std::vector<double> first;
        std::vector<double> second;
        std::size_t steps = 0;
    };

    AdamWConfig config_;
    std::unordered_map<const detail::Node*, Moments> state_;
};

void zero_grads(std::span<Tensor> params);

}  // namespace moecl
