// SPDX-License-Identifier: Apache-2.0
#include "moecl/optim.hpp"

#include <cmath>
#include <string>

namespace moecl {

void AdamW::step(std::span<Tensor> params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].requires_grad()) continue;
        for (double g : params[i].grad_view()) {
            if (!std::isfinite(g)) {
                throw Error(ErrorKind::NonFinite, "AdamW: non-finite gradient in parameter " + std::to_string(i) +
                                                      " of shape " + shape_string(params[i].shape()) +
                                                      "; step aborted");
            }
        }
    }
    const double decay = 1.0 - config_.lr * config_.weight_decay;
    for (Tensor& p : params) {
        if (!p.requires_grad() || !p.has_grad()) continue;
        auto& state = state_[p.node().get()];
        if (state.first.empty()) {
            state.first.assign(p.numel(), 0.0);
            state.second.assign(p.numel(), 0.0);
        }
        ++state.steps;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(state.steps));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(state.steps));
        auto values = p.mutable_data();
        const auto grad = p.grad_view();
        for (std::size_t j = 0; j < values.size(); ++j) {
            state.first[j] = config_.beta1 * state.first[j] + (1.0 - config_.beta1) * grad[j];
            state.second[j] = config_.beta2 * state.second[j] + (1.0 - config_.beta2) * grad[j] * grad[j];
            const double m_hat = state.first[j] / bc1;
            const double v_hat = state.second[j] / bc2;
            values[j] = values[j] * decay - config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
        }
    }
}

void zero_grads(std::span<Tensor> params) {
    for (Tensor& p : params) p.zero_grad();
}

}  // namespace moecl
