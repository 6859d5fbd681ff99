#pragma once

#include <chrono>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "pfmda/attention.hpp"
#include "pfmda/gradcheck.hpp"
#include "pfmda/losses.hpp"
#include "pfmda/networks.hpp"
#include "pfmda/ops.hpp"
#include "pfmda/parameters.hpp"

namespace pfmda {

struct GradCheckResult {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed() const { return max_rel_error < tolerance; }
};

struct GradientSuiteReport {
    std::vector<GradCheckResult> checks;
    double seconds = 0.0;

    bool passed() const {
        for (const auto& c : checks)
            if (!c.passed()) return false;
        return !checks.empty();
    }
    std::vector<std::string> failures() const {
        std::vector<std::string> out;
        for (const auto& c : checks)
            if (!c.passed()) out.push_back(c.name);
        return out;
    }
};

struct GradientSuiteOptions {
    std::uint64_t seed = 11;
    double h = 1e-5;
    double op_tolerance = 1e-4;
    double total_tolerance = 1e-3;
    std::string corrupt;  // name of a check whose gradient rule is deliberately broken (negative control)
};

/// Tiny model used by the gradient suite: 16×16 inputs, d=8, two heads.
inline ModelConfig gradcheck_model_config() {
    return {.image_size = 16, .patch_size = 8, .in_channels = 3, .embed_dim = 8, .heads = 2, .ffn_mult = 4,
            .head_channels = 4, .conv_width = 4};
}

namespace detail {

// Identity forward; backward scales the incoming gradient. Wrapping an op's
// output with this is equivalent to breaking that op's gradient rule.
inline Tensor corrupt_gradient(const Tensor& x, double factor) {
    return make_result("corrupt", x.shape(), x.values(), {x}, [factor](Node& self) {
        if (auto* g = parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += factor * self.grad[i];
    });
}

// Random values bounded away from zero so piecewise ops stay off their kinks.
template <class Rng>
Tensor off_kink(Shape shape, Rng& rng) {
    std::uniform_real_distribution<double> mag(0.2, 1.5);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
    return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace detail

/// Runs central finite differences over every differentiable op family and
/// both total objectives on a 2-case 16×16 batch.
inline GradientSuiteReport run_gradient_suite(const GradientSuiteOptions& opt = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    GradientSuiteReport report;
    std::mt19937_64 rng(opt.seed);
    auto rnd = [&](Shape s, double sd = 1.0) { return Tensor::randn(std::move(s), rng, sd, true); };

    auto check = [&](const std::string& name, std::function<Tensor()> f, std::vector<Tensor> params, bool total = false,
                     std::size_t max_coords = 0) {
        const bool corrupt = name == opt.corrupt;
        // Contract the output against fixed random weights so every coordinate matters.
        Tensor probe;
        auto wrapped = [&, corrupt]() -> Tensor {
            Tensor y = f();
            if (corrupt) y = detail::corrupt_gradient(y, 1.5);
            if (y.numel() == 1) return sum(y);
            if (!probe.defined() || probe.shape() != y.shape()) {
                std::mt19937_64 prng(opt.seed ^ 0x9E37);
                probe = Tensor::randn(y.shape(), prng);
            }
            return sum(mul(y, probe));
        };
        const double err = finite_difference_check(wrapped, std::move(params), opt.h, max_coords);
        report.checks.push_back({name, err, total ? opt.total_tolerance : opt.op_tolerance});
    };

    {
        Tensor a = rnd({3, 4}), b = rnd({3, 4});
        check("add", [=] { return add(a, b); }, {a, b});
        check("sub", [=] { return sub(a, b); }, {a, b});
        check("mul", [=] { return mul(a, b); }, {a, b});
        check("scale", [=] { return scale(a, -1.7); }, {a});
    }
    {
        Tensor x = rnd({4, 5}), bias = rnd({5});
        check("add_bias", [=] { return add_bias(x, bias); }, {x, bias});
    }
    {
        Tensor x = detail::off_kink({4, 6}, rng);
        check("relu", [=] { return relu(x); }, {x});
        check("mean_abs", [=] { return mean_abs(x); }, {x});
    }
    {
        Tensor x = rnd({4, 6}, 1.5);
        check("gelu", [=] { return gelu(x); }, {x});
        check("sigmoid", [=] { return sigmoid(x); }, {x});
        check("softmax_rows", [=] { return softmax_rows(x); }, {x});
        check("sum", [=] { return sum(x); }, {x});
        check("mean", [=] { return mean(x); }, {x});
        check("l2_norm", [=] { return l2_norm(x); }, {x});
        check("reshape_transpose", [=] { return transpose(reshape(x, {6, 4})); }, {x});
        check("slice_concat_cols", [=] { return concat_cols({slice_cols(x, 3, 3), slice_cols(x, 0, 2)}); }, {x});
    }
    {
        Tensor a = rnd({2, 3}), b = rnd({2, 3});
        check("stack_select", [=] { return add(select(stack({a, b}), 1), scale(select(stack({b, a}), 1), 0.5)); },
              {a, b});
    }
    {
        Tensor a = rnd({3, 5}), b = rnd({5, 4});
        check("matmul", [=] { return matmul(a, b); }, {a, b});
    }
    {
        Tensor x = rnd({2, 2, 5, 4}), w = rnd({3, 2, 3, 3}, 0.5), bias = rnd({3});
        check("conv3x3", [=] { return conv3x3(x, w, bias); }, {x, w, bias});
    }
    {
        Tensor x = rnd({2, 3, 3, 3}), g = rnd({3}), b = rnd({3});
        BatchNormStats stats{Tensor::zeros({3}), Tensor::full({3}, 1.0)};
        check("batch_norm", [=] { return batch_norm(x, g, b, stats, true); }, {x, g, b});
    }
    {
        Tensor x = rnd({3, 6}), g = rnd({6}), b = rnd({6});
        check("layer_norm", [=] { return layer_norm(x, g, b); }, {x, g, b});
    }
    {
        Tensor img = rnd({2, 4, 4});
        check("patchify", [=] { return patchify(img, 2); }, {img});
        Tensor tok = rnd({4, 8});
        check("unpatchify", [=] { return unpatchify(tok, 2, 4, 4, 2); }, {tok});
    }
    {
        ParameterStore store;
        PFMBlock block(store, "blk", 8, 2, 4, rng);
        Tensor q = rnd({4, 8}), kv = rnd({4, 8});
        auto params = store.trainable();
        params.push_back(q);
        params.push_back(kv);
        check("attention", [=] { return multi_head_attention(q, kv, block); }, params);
        check("mca", [=] { return mca(q, kv, block); }, params);
    }

    // Full objectives on the tiny model.
    const ModelConfig cfg = gradcheck_model_config();
    std::vector<Tensor> xs, xt, ys, yt;
    for (int b = 0; b < 2; ++b) {
        xs.push_back(Tensor::uniform({3, 16, 16}, rng, 0.0, 1.0));
        xt.push_back(Tensor::uniform({3, 16, 16}, rng, 0.0, 1.0));
        ys.push_back(Tensor::uniform({1, 16, 16}, rng, 0.0, 1.0));
        yt.push_back(Tensor::uniform({1, 16, 16}, rng, 0.0, 1.0));
    }
    const Tensor y_s = stack(ys), y_t = stack(yt);
    const LossWeights w;
    {
        AggNetwork agg(cfg, opt.seed + 1);
        check("agg_total",
              [&] {
                  const AggOutput out = agg_forward(agg, xs, xt, Mode::Train);
                  std::array<Tensor, 3> brd;
                  for (std::size_t i = 0; i < kPfmBlocks; ++i) brd[i] = bridge_loss(out.per_block[i], w.lambda);
                  return agg_total(brd, domain_l1(out.y_s, y_s), domain_l1(out.y_t, y_t), w);
              },
              agg.model.store().trainable(), true, 6);

        InferNetwork infer = build_infer_from_agg(agg);
        // Perturb the student so the distillation term is away from its kink at zero.
        for (auto& p : infer.model.store().trainable()) {
            std::normal_distribution<double> n(0.0, 0.05);
            for (auto& v : p.data()) v += n(rng);
        }
        const Tensor teacher = [&] {
            NoGradGuard ng;
            return agg_forward(agg, xt, xt, Mode::Eval).y_t;
        }();
        check("infer_total",
              [&] {
                  const Tensor student = infer_forward(infer, xt, Mode::Train);
                  return infer_total(domain_l1(student, y_t), distillation_loss(teacher, student), w);
              },
              infer.model.store().trainable(), true, 6);
    }

    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace pfmda
