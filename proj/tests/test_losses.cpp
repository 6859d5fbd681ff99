#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "pfmda/pfmda.hpp"

using namespace pfmda;

namespace {

double loop_norm(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

double loop_l1(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.numel());
}

}  // namespace

TEST(BridgeLoss, Examples) {
    std::mt19937_64 rng(1);
    const Tensor p = Tensor::randn({3, 4}, rng);
    EXPECT_EQ(bridge_loss(BranchOutputs{p, p, p}, 0.5).item(), 0.0);
    const auto mid = BranchOutputs{Tensor::from({1}, {0.0}), Tensor::from({1}, {2.0}), Tensor::from({1}, {1.0})};
    EXPECT_DOUBLE_EQ(bridge_loss(mid, 0.5).item(), 1.0);
}

TEST(BridgeLoss, MatchesLoopOracle) {
    std::mt19937_64 rng(2);
    for (int rep = 0; rep < 20; ++rep) {
        const BranchOutputs b{Tensor::randn({4, 8}, rng), Tensor::randn({4, 8}, rng), Tensor::randn({4, 8}, rng)};
        const double want = 0.3 * loop_norm(b.p_s, b.p_p) + 0.7 * loop_norm(b.p_t, b.p_p);
        EXPECT_NEAR(bridge_loss(b, 0.3).item(), want, 1e-12);
    }
}

TEST(BridgeLoss, SwapSymmetry) {
    std::mt19937_64 rng(3);
    for (int rep = 0; rep < 20; ++rep) {
        const Tensor s = Tensor::randn({4, 8}, rng), t = Tensor::randn({4, 8}, rng), p = Tensor::randn({4, 8}, rng);
        const double lam = static_cast<double>(std::uniform_int_distribution<int>(0, 1024)(rng)) / 1024.0;
        EXPECT_EQ(bridge_loss(BranchOutputs{s, t, p}, lam).item(), bridge_loss(BranchOutputs{t, s, p}, 1.0 - lam).item());
    }
    // Arbitrary lambda: equal up to the rounding of 1 - lambda.
    const Tensor s = Tensor::randn({4, 8}, rng), t = Tensor::randn({4, 8}, rng), p = Tensor::randn({4, 8}, rng);
    const double a = bridge_loss(BranchOutputs{s, t, p}, 0.3).item(), b = bridge_loss(BranchOutputs{t, s, p}, 0.7).item();
    EXPECT_NEAR(a, b, 1e-15 * a);
}

TEST(BridgeLoss, ZeroOnlyWhenCoincident) {
    std::mt19937_64 rng(4);
    const Tensor s = Tensor::randn({2, 2}, rng);
    EXPECT_EQ(bridge_loss(BranchOutputs{s, s, s.clone()}, 0.4).item(), 0.0);
    EXPECT_GT(bridge_loss(BranchOutputs{s, add(s, Tensor::full({2, 2}, 1e-3)), s}, 0.4).item(), 0.0);
    EXPECT_THROW(bridge_loss(BranchOutputs{s, s, s}, 1.5), ContractError);
}

TEST(BridgeLoss, GradientCheck) {
    std::mt19937_64 rng(5);
    Tensor s = Tensor::randn({3, 4}, rng, 1.0, true), t = Tensor::randn({3, 4}, rng, 1.0, true),
           p = Tensor::randn({3, 4}, rng, 1.0, true);
    EXPECT_LT(finite_difference_check([&] { return bridge_loss(BranchOutputs{s, t, p}, 0.5); }, {s, t, p}), 1e-4);
}

TEST(DomainL1, Examples) {
    std::mt19937_64 rng(6);
    const Tensor y = Tensor::uniform({1, 4, 4}, rng, 0, 1);
    EXPECT_EQ(domain_l1(y, y).item(), 0.0);
    EXPECT_DOUBLE_EQ(domain_l1(Tensor::full({1, 4, 4}, 0.5), Tensor::full({1, 4, 4}, 0.25)).item(), 0.25);
    const Tensor a = Tensor::uniform({2, 1, 5, 5}, rng, 0, 1), b = Tensor::uniform({2, 1, 5, 5}, rng, 0, 1);
    EXPECT_NEAR(domain_l1(a, b).item(), loop_l1(a, b), 1e-12);
    EXPECT_THROW(domain_l1(a, y), DimensionError);
}

TEST(Distillation, ExamplesAndTeacherIsolation) {
    std::mt19937_64 rng(7);
    const Tensor y = Tensor::uniform({1, 4, 4}, rng, 0, 1);
    EXPECT_EQ(distillation_loss(y, y).item(), 0.0);
    EXPECT_DOUBLE_EQ(distillation_loss(Tensor::full({1, 3, 3}, 1.0), Tensor::zeros({1, 3, 3})).item(), 1.0);
    const Tensor a = Tensor::uniform({1, 5, 5}, rng, 0, 1), b = Tensor::uniform({1, 5, 5}, rng, 0, 1);
    EXPECT_NEAR(distillation_loss(a, b).item(), loop_l1(a, b), 1e-12);

    Tensor teacher = Tensor::uniform({1, 3, 3}, rng, 0, 1, true);
    Tensor student = Tensor::uniform({1, 3, 3}, rng, 0, 1, true);
    backward(distillation_loss(teacher, student));
    for (double g : teacher.grad()) EXPECT_EQ(g, 0.0);
    double mag = 0.0;
    for (double g : student.grad()) mag += std::abs(g);
    EXPECT_GT(mag, 0.0);
}

TEST(Totals, AggArithmetic) {
    const LossWeights w;
    EXPECT_NEAR(agg_total(std::array<double, 3>{0.1, 0.2, 0.3}, 1.0, 2.0, w), 2.4, 1e-15);
    EXPECT_EQ(agg_total(std::array<double, 3>{0, 0, 0}, 0.0, 0.0, w), 0.0);
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0, 3);
    for (int rep = 0; rep < 50; ++rep) {
        const std::array<double, 3> b{u(rng), u(rng), u(rng)};
        const double ls = u(rng), lt = u(rng);
        EXPECT_NEAR(agg_total(b, ls, lt, w), b[0] + b[1] + b[2] + 0.4 * ls + 0.7 * lt, 1e-12);
        const std::array<Tensor, 3> bt{Tensor::scalar(b[0]), Tensor::scalar(b[1]), Tensor::scalar(b[2])};
        EXPECT_NEAR(agg_total(bt, Tensor::scalar(ls), Tensor::scalar(lt), w).item(), agg_total(b, ls, lt, w), 1e-12);
    }
}

TEST(Totals, InferArithmetic) {
    const LossWeights w;
    EXPECT_NEAR(infer_total(0.5, 0.25, w), 0.6, 1e-15);
    EXPECT_EQ(infer_total(0.37, 0.0, w), 0.37);
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0, 3);
    for (int rep = 0; rep < 50; ++rep) {
        const double a = u(rng), b = u(rng);
        EXPECT_NEAR(infer_total(a, b, w), a + 0.4 * b, 1e-12);
    }
}

TEST(Totals, DefaultWeights) {
    const LossWeights w;
    EXPECT_EQ(w.lambda, 0.5);
    EXPECT_EQ(w.alpha, 0.4);
    EXPECT_EQ(w.beta, 0.7);
    EXPECT_EQ(w.gamma, 0.4);
}

TEST(LossReport, CsvRowsRoundTripAndRecombine) {
    AggLossReport r{.step = 3, .l_brd = {0.1, 0.2, 0.3}, .l_s = 1.0 / 3.0, .l_t = 2.0 / 7.0, .l_total = 0.0};
    r.l_total = agg_total(r.l_brd, r.l_s, r.l_t, LossWeights{});
    EXPECT_EQ(AggLossReport::csv_header(), "step,l_brd_1,l_brd_2,l_brd_3,l_s,l_t,l_total");
    std::stringstream ss(r.csv_row());
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    ASSERT_EQ(v.size(), 7u);
    EXPECT_EQ(v[4], r.l_s);
    EXPECT_EQ(v[5], r.l_t);
    EXPECT_LT(std::abs(v[6] - (v[1] + v[2] + v[3] + 0.4 * v[4] + 0.7 * v[5])), 1e-12);
    EXPECT_EQ(InferLossReport::csv_header(), "step,l_t_prime,l_dtl,l_total");
}
