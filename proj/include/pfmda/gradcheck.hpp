#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "pfmda/tensor.hpp"

namespace pfmda {

/// Max over checked coordinates of |analytic - central difference| / max(1, |central difference|).
///
/// `f` must rebuild its graph from the current values of `params` on every
/// call. When `max_coords_per_tensor` is nonzero, larger tensors are checked
/// on an evenly strided subset of coordinates.
inline double finite_difference_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double h = 1e-5,
                                      std::size_t max_coords_per_tensor = 0) {
    if (h <= 0.0) throw ContractError("finite_difference_check: step must be positive");
    for (auto& p : params) {
        if (!p.is_leaf()) throw ContractError("finite_difference_check: parameters must be leaves");
        if (!p.requires_grad()) p.set_requires_grad(true);
        p.zero_grad();
    }
    backward(f());
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

    double worst = 0.0;
    NoGradGuard no_grad;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto values = params[k].data();
        const std::size_t n = values.size();
        std::size_t stride = 1;
        if (max_coords_per_tensor != 0 && n > max_coords_per_tensor)
            stride = (n + max_coords_per_tensor - 1) / max_coords_per_tensor;
        for (std::size_t i = 0; i < n; i += stride) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = f().item();
            values[i] = saved - h;
            const double down = f().item();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double err = std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

/// Single-input form: checks d f(x) / dx.
inline double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-5) {
    return finite_difference_check([&] { return f(x); }, std::vector<Tensor>{x}, h);
}

}  // namespace pfmda
