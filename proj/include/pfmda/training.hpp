#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "pfmda/config.hpp"
#include "pfmda/losses.hpp"
#include "pfmda/networks.hpp"
#include "pfmda/optim.hpp"
#include "pfmda/phantom.hpp"

namespace pfmda {

namespace detail {

// Independent, reproducible streams derived from the run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0) {
    return splitmix64(splitmix64(splitmix64(seed) ^ tag) ^ index);
}

inline constexpr std::uint64_t kTagAggInit = 0xA11;
inline constexpr std::uint64_t kTagInferInit = 0x1F3;
inline constexpr std::uint64_t kTagShuffleSource = 0x5A;
inline constexpr std::uint64_t kTagShuffleTarget = 0x7A;

inline std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

struct PreparedSet {
    std::vector<Tensor> inputs;  // 3×H×W
    std::vector<Tensor> doses;   // 1×H×W
};

inline PreparedSet prepare(const std::vector<Case>& cases) {
    PreparedSet p;
    for (const auto& c : cases) {
        p.inputs.push_back(c.input());
        p.doses.push_back(c.dose);
    }
    return p;
}

inline void require_finite_loss(double v, std::size_t step) {
    if (!std::isfinite(v)) throw NumericalError("training diverged: non-finite loss at step " + std::to_string(step));
}

}  // namespace detail

inline Schedule agg_schedule(const TrainConfig& cfg) {
    return {cfg.lr_agg, cfg.effective_constant_epochs(), cfg.epochs};
}
inline Schedule infer_schedule(const TrainConfig& cfg) {
    return {cfg.lr_infer, cfg.effective_constant_epochs(), cfg.epochs};
}

/// Called after every epoch with (epoch index, model).
using EpochHook = std::function<void(std::size_t, const DoseModel&)>;

struct AggRun {
    AggNetwork net;
    std::vector<AggLossReport> history;
};

/// Minimizes Σ L_brd + α·L_s + β·L_t. Each step pairs one source batch with
/// one target batch; the shorter domain is cycled.
inline AggRun train_agg(const TrainConfig& cfg, const std::vector<Case>& source, const std::vector<Case>& target,
                        const EpochHook& hook = {}) {
    cfg.validate();
    if (source.empty() || target.empty()) throw ConfigError("train_agg: both domains need at least one case");
    AggRun run{AggNetwork(cfg.model, detail::derive_seed(cfg.seed, detail::kTagAggInit), cfg.use_mca), {}};
    LossWeights w = cfg.weights;
    w.bridge = cfg.use_mca && cfg.use_brd ? 1.0 : 0.0;

    const auto src = detail::prepare(source);
    const auto tgt = detail::prepare(target);
    const std::size_t longest = std::max(src.inputs.size(), tgt.inputs.size());
    const std::size_t steps_per_epoch = (longest + cfg.batch_size - 1) / cfg.batch_size;
    const Schedule schedule = agg_schedule(cfg);
    auto params = run.net.model.store().trainable();
    AdamState adam;
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(schedule, epoch);
        const auto src_order = detail::shuffled(src.inputs.size(), detail::derive_seed(cfg.seed, detail::kTagShuffleSource, epoch));
        const auto tgt_order = detail::shuffled(tgt.inputs.size(), detail::derive_seed(cfg.seed, detail::kTagShuffleTarget, epoch));
        for (std::size_t k = 0; k < steps_per_epoch; ++k) {
            const std::size_t begin = k * cfg.batch_size;
            const std::size_t count = std::min(cfg.batch_size, longest - begin);
            std::vector<Tensor> xs, xt, ys, yt;
            for (std::size_t j = 0; j < count; ++j) {
                const std::size_t si = src_order[(begin + j) % src_order.size()];
                const std::size_t ti = tgt_order[(begin + j) % tgt_order.size()];
                xs.push_back(src.inputs[si]);
                ys.push_back(src.doses[si]);
                xt.push_back(tgt.inputs[ti]);
                yt.push_back(tgt.doses[ti]);
            }
            const AggOutput out = agg_forward(run.net, xs, xt, Mode::Train);
            const Tensor l_s = domain_l1(out.y_s, stack(ys));
            const Tensor l_t = domain_l1(out.y_t, stack(yt));
            std::array<Tensor, 3> brd;
            for (std::size_t i = 0; i < kPfmBlocks; ++i)
                brd[i] = cfg.use_mca ? bridge_loss(out.per_block[i], w.lambda) : Tensor::scalar(0.0);
            const Tensor total = agg_total(brd, l_s, l_t, w);

            ++step;
            detail::require_finite_loss(total.item(), step);
            run.net.model.store().zero_grad();
            backward(total);
            adam_step(params, adam, lr);

            AggLossReport r;
            r.step = step;
            for (std::size_t i = 0; i < 3; ++i) r.l_brd[i] = brd[i].item();
            r.l_s = l_s.item();
            r.l_t = l_t.item();
            r.l_total = total.item();
            run.history.push_back(r);
        }
        if (hook) hook(epoch, run.net.model);
    }
    return run;
}

struct InferRun {
    InferNetwork net;
    std::vector<InferLossReport> history;
};

/// Teacher prediction for a target batch: the frozen Agg with the target
/// input fed to both token paths, evaluation-mode normalization, no graph.
inline Tensor teacher_predict(const AggNetwork& teacher, const std::vector<Tensor>& x_t) {
    NoGradGuard no_grad;
    return agg_forward(teacher, x_t, x_t, Mode::Eval).y_t;
}

/// Minimizes L_t' + γ·L_dtl for the target-only network. `agg` may be null
/// only when neither initialization from Agg nor distillation is requested.
inline InferRun train_infer(const TrainConfig& cfg, const AggNetwork* agg, const std::vector<Case>& target,
                            const EpochHook& hook = {}) {
    cfg.validate();
    if (target.empty()) throw ConfigError("train_infer: target domain needs at least one case");
    if ((cfg.init_from_agg || cfg.use_dtl) && agg == nullptr)
        throw ConfigError("train_infer: an Agg network is required for initialization or distillation");
    InferRun run{cfg.init_from_agg ? build_infer_from_agg(*agg)
                                   : InferNetwork(cfg.model, detail::derive_seed(cfg.seed, detail::kTagInferInit)),
                 {}};
    LossWeights w = cfg.weights;
    if (!cfg.use_dtl) w.gamma = 0.0;

    const auto tgt = detail::prepare(target);
    const std::size_t n = tgt.inputs.size();
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const Schedule schedule = infer_schedule(cfg);
    auto params = run.net.model.store().trainable();
    AdamState adam;
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(schedule, epoch);
        const auto order = detail::shuffled(n, detail::derive_seed(cfg.seed, detail::kTagShuffleTarget, epoch));
        for (std::size_t k = 0; k < steps_per_epoch; ++k) {
            const std::size_t begin = k * cfg.batch_size;
            const std::size_t count = std::min(cfg.batch_size, n - begin);
            std::vector<Tensor> xt, yt;
            for (std::size_t j = 0; j < count; ++j) {
                xt.push_back(tgt.inputs[order[begin + j]]);
                yt.push_back(tgt.doses[order[begin + j]]);
            }
            const Tensor student = infer_forward(run.net, xt, Mode::Train);
            const Tensor l_t_prime = domain_l1(student, stack(yt));
            const Tensor l_dtl = agg != nullptr ? distillation_loss(teacher_predict(*agg, xt), student)
                                                : Tensor::scalar(0.0);
            const Tensor total = infer_total(l_t_prime, l_dtl, w);

            ++step;
            detail::require_finite_loss(total.item(), step);
            run.net.model.store().zero_grad();
            backward(total);
            adam_step(params, adam, lr);

            run.history.push_back({step, l_t_prime.item(), l_dtl.item(), total.item()});
        }
        if (hook) hook(epoch, run.net.model);
    }
    return run;
}

template <class Report>
void write_loss_csv(const std::filesystem::path& path, const std::vector<Report>& history) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << Report::csv_header() << '\n';
    for (const auto& r : history) os << r.csv_row() << '\n';
}

}  // namespace pfmda
