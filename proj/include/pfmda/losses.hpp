#pragma once

#include <array>
#include <cstdio>
#include <string>
#include <vector>

#include "pfmda/attention.hpp"
#include "pfmda/ops.hpp"

namespace pfmda {

struct LossWeights {
    double lambda = 0.5;  // bridge balance between source and target distances
    double alpha = 0.4;   // source L1 weight in the Agg objective
    double beta = 0.7;    // target L1 weight in the Agg objective
    double gamma = 0.4;   // distillation weight in the Infer objective
    double bridge = 1.0;  // multiplier on the summed bridge terms; 0 disables them

    void validate() const {
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("lambda must lie in [0,1]");
        if (!(alpha >= 0.0 && beta >= 0.0 && gamma >= 0.0 && bridge >= 0.0))
            throw ContractError("loss weights must be nonnegative");
    }
};

/// lambda·‖p_s − p_p‖₂ + (1 − lambda)·‖p_t − p_p‖₂ over flattened tokens.
inline Tensor bridge_loss(const BranchOutputs& out, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("bridge_loss: lambda must lie in [0,1]");
    if (!out.has_polymerized()) throw ContractError("bridge_loss needs the polymerized branch output");
    if (out.p_s.shape() != out.p_p.shape() || out.p_t.shape() != out.p_p.shape())
        throw DimensionError("bridge_loss: branch outputs differ in shape");
    return add(scale(l2_norm(sub(out.p_s, out.p_p)), lambda), scale(l2_norm(sub(out.p_t, out.p_p)), 1.0 - lambda));
}

/// Batch mean of the per-sample bridge loss.
inline Tensor bridge_loss(const std::vector<BranchOutputs>& batch, double lambda) {
    if (batch.empty()) throw ContractError("bridge_loss on empty batch");
    Tensor total = bridge_loss(batch[0], lambda);
    for (std::size_t b = 1; b < batch.size(); ++b) total = add(total, bridge_loss(batch[b], lambda));
    return scale(total, 1.0 / static_cast<double>(batch.size()));
}

/// Mean absolute error between a predicted and a reference dose map.
inline Tensor domain_l1(const Tensor& predicted, const Tensor& truth) {
    if (predicted.shape() != truth.shape())
        throw DimensionError("domain_l1: " + shape_str(predicted.shape()) + " vs " + shape_str(truth.shape()));
    return mean_abs(sub(predicted, truth));
}

/// Mean absolute difference between student and frozen-teacher predictions.
/// No gradient reaches the teacher.
inline Tensor distillation_loss(const Tensor& teacher, const Tensor& student) {
    if (teacher.shape() != student.shape())
        throw DimensionError("distillation_loss: " + shape_str(teacher.shape()) + " vs " + shape_str(student.shape()));
    return mean_abs(sub(student, teacher.detach()));
}

/// Σ L_brd^i + α·L_s + β·L_t. Works on doubles and on tensors.
template <class T>
T agg_total(const std::array<T, 3>& brd, const T& l_s, const T& l_t, const LossWeights& w) {
    const T bridges = brd[0] + brd[1] + brd[2];
    if (w.bridge == 1.0) return bridges + w.alpha * l_s + w.beta * l_t;
    return w.bridge * bridges + w.alpha * l_s + w.beta * l_t;
}

/// L_t' + γ·L_dtl.
template <class T>
T infer_total(const T& l_t_prime, const T& l_dtl, const LossWeights& w) {
    return l_t_prime + w.gamma * l_dtl;
}

struct AggLossReport {
    std::size_t step = 0;
    std::array<double, 3> l_brd{};
    double l_s = 0.0;
    double l_t = 0.0;
    double l_total = 0.0;

    static std::string csv_header() { return "step,l_brd_1,l_brd_2,l_brd_3,l_s,l_t,l_total"; }

    std::string csv_row() const {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", step, l_brd[0], l_brd[1], l_brd[2],
                      l_s, l_t, l_total);
        return buf;
    }
};

struct InferLossReport {
    std::size_t step = 0;
    double l_t_prime = 0.0;
    double l_dtl = 0.0;
    double l_total = 0.0;

    static std::string csv_header() { return "step,l_t_prime,l_dtl,l_total"; }

    std::string csv_row() const {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g", step, l_t_prime, l_dtl, l_total);
        return buf;
    }
};

}  // namespace pfmda
