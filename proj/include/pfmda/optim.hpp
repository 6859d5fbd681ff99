#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "pfmda/tensor.hpp"

namespace pfmda {

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

/// Bias-corrected Adam update, in place.
inline void adam_step(std::vector<Tensor>& params, AdamState& state, double lr) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.numel(), 0.0);
            state.v.emplace_back(p.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ContractError("adam_step: parameter list changed between steps");
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (!params[k].has_grad())
            throw ContractError("adam_step: parameter " + std::to_string(k) + " has no gradient");
        if (state.m[k].size() != params[k].numel()) throw ContractError("adam_step: moment shape mismatch");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto w = params[k].data();
        auto g = params[k].grad();
        auto& m = state.m[k];
        auto& v = state.v[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
        }
    }
}

/// Constant learning rate, then linear decay to zero at `total_epochs`.
struct Schedule {
    double base_lr = 5e-4;
    std::size_t constant_epochs = 200;
    std::size_t total_epochs = 300;
};

inline double lr_at(const Schedule& s, std::size_t epoch) {
    if (epoch > s.total_epochs)
        throw ContractError("lr_at: epoch " + std::to_string(epoch) + " beyond schedule end " +
                            std::to_string(s.total_epochs));
    if (s.constant_epochs > s.total_epochs) throw ContractError("lr_at: constant segment longer than schedule");
    if (epoch < s.constant_epochs) return s.base_lr;
    const double span = static_cast<double>(s.total_epochs - s.constant_epochs);
    if (span == 0.0) return 0.0;
    return s.base_lr * static_cast<double>(s.total_epochs - epoch) / span;
}

}  // namespace pfmda
