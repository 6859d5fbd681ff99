// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "pfmda/pfmda.hpp"

using namespace pfmda;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail += (detail.empty() ? "" : "; ") + what;
        }
    }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v) {
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

std::vector<Case> make_cases(const DomainSpec& spec, std::size_t n) {
    std::vector<Case> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back(generate_case(spec, i));
    return v;
}

std::vector<std::vector<double>> snapshot(const DoseModel& m) {
    std::vector<std::vector<double>> v;
    for (const auto& e : m.store().entries()) v.push_back(e.tensor.values());
    return v;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

ModelConfig small_model() {
    return {.image_size = 16, .patch_size = 8, .in_channels = 3, .embed_dim = 8, .heads = 2, .ffn_mult = 4,
            .head_channels = 4, .conv_width = 4};
}

TrainConfig small_config() {
    TrainConfig cfg;
    cfg.model = small_model();
    cfg.epochs = 3;
    cfg.batch_size = 2;
    return cfg;
}

std::vector<Case> small_cases(DomainSpec spec, std::size_t n) {
    spec.image_size = 16;
    return make_cases(spec, n);
}

const fs::path kScratch = fs::temp_directory_path() / "pfmda_acceptance";

// 1. Analytic gradients against central differences.
Outcome gradient_suite() {
    Outcome o;
    const auto report = run_gradient_suite();
    double worst = 0.0;
    for (const auto& c : report.checks) {
        worst = std::max(worst, c.max_rel_error);
        o.require(c.passed(), c.name + " rel " + num(c.max_rel_error));
    }
    const bool has_totals = std::any_of(report.checks.begin(), report.checks.end(), [](auto& c) { return c.name == "agg_total"; }) &&
                            std::any_of(report.checks.begin(), report.checks.end(), [](auto& c) { return c.name == "infer_total"; });
    o.require(has_totals, "objective checks missing");
    o.require(report.seconds < 120.0, "runtime " + num(report.seconds) + " s");
    if (o.pass)
        o.detail = std::to_string(report.checks.size()) + " checks, worst rel " + num(worst) + ", " + num(report.seconds) + " s";
    return o;
}

// 2. Cross-attention with identical inputs is self-attention.
Outcome cross_attention_degeneracy() {
    Outcome o;
    std::mt19937_64 rng(2024);
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t heads = 1 + rep % 4, dim = heads * (2 + rep % 3), tokens = 1 + rep % 7;
        ParameterStore s;
        PFMBlock block(s, "b", dim, heads, 2, rng);
        for (auto* t : {&block.ln1_g, &block.ln1_b, &block.bo, &block.ln2_g, &block.b1, &block.b2})
            for (auto& v : t->data()) v = std::normal_distribution<double>(0.0, 0.5)(rng) + (t == &block.ln1_g ? 1.0 : 0.0);
        const Tensor q = Tensor::randn({tokens, dim}, rng, 2.0);
        worst = std::max(worst, max_abs_diff(mca(q, q, block), msa(q, block)));
        worst = std::max(worst, max_abs_diff(mca(q, q.clone(), block), msa(q, block)));
    }
    o.require(worst <= 1e-12, "mca vs msa " + num(worst));

    const TrainConfig cfg;
    AggNetwork net(cfg.model, 99);
    std::vector<Tensor> x;
    for (const auto& c : make_cases(DomainSpec::target_like(), 3)) x.push_back(c.input());
    std::vector<Tensor> x_copy;
    for (const auto& t : x) x_copy.push_back(t.clone());
    for (Mode mode : {Mode::Train, Mode::Eval}) {
        const auto out = agg_forward(net, x, x_copy, mode);
        o.require(max_abs_diff(out.y_s, out.y_t) == 0.0, "agg outputs differ");
        for (const auto& level : out.per_block) {
            const double b = bridge_loss(level, 0.5).item();
            o.require(b == 0.0, "bridge distance " + num(b));
        }
    }
    if (o.pass) o.detail = "100 inputs, max |mca-msa| " + num(worst) + ", agg collapsed in both modes";
    return o;
}

// 3. Bridge geometry.
Outcome bridge_geometry() {
    Outcome o;
    std::mt19937_64 rng(3);
    const Tensor ps = Tensor::randn({16, 8}, rng), pt = Tensor::randn({16, 8}, rng);
    Tensor pp = Tensor::randn({16, 8}, rng, 1.0, true);
    const double step = 0.05 * std::sqrt(sum(mul(sub(ps, pt), sub(ps, pt))).item());
    double slack = 0.0;
    for (int it = 0; it < 20000; ++it) {
        pp.zero_grad();
        backward(bridge_loss(BranchOutputs{ps, pt, pp}, 0.5));
        for (std::size_t i = 0; i < pp.numel(); ++i) pp.data()[i] -= step * pp.grad()[i];
        slack = geodesic_report(BranchOutputs{ps, pt, pp}).slack;
        if (slack < 1e-7) break;
    }
    o.require(slack < 1e-6, "descent slack " + num(slack));

    std::size_t asym = 0, negative = 0;
    double min_slack = std::numeric_limits<double>::infinity();
    for (int rep = 0; rep < 1000; ++rep) {
        const std::size_t n = 1 + rep % 9, d = 1 + rep % 5;
        const Tensor s = Tensor::randn({n, d}, rng), t = Tensor::randn({n, d}, rng), p = Tensor::randn({n, d}, rng);
        // dyadic weights keep 1 - (1 - lambda) == lambda in floating point
        const double lam = static_cast<double>(std::uniform_int_distribution<int>(0, 1024)(rng)) / 1024.0;
        asym += bridge_loss(BranchOutputs{s, t, p}, lam).item() != bridge_loss(BranchOutputs{t, s, p}, 1.0 - lam).item();
        const double sl = geodesic_report(BranchOutputs{s, t, p}).slack;
        min_slack = std::min(min_slack, sl);
        negative += sl < -1e-9;
    }
    o.require(asym == 0, std::to_string(asym) + " asymmetric swaps");
    o.require(negative == 0, std::to_string(negative) + " negative slacks");
    if (o.pass) o.detail = "descent slack " + num(slack) + ", swap exact, min slack " + num(min_slack);
    return o;
}

// 4. Single parameter copy, frozen teacher, exact Infer initialization.
Outcome sharing_and_freezing() {
    Outcome o;
    TrainConfig cfg = small_config();
    const auto src = small_cases(DomainSpec::source_like(), 4), tgt = small_cases(DomainSpec::target_like(), 3);
    auto agg = train_agg(cfg, src, tgt);

    const auto& store = agg.net.model.store();
    std::set<std::string> names;
    std::size_t wq = 0;
    for (const auto& e : store.entries()) {
        o.require(names.insert(e.name).second, "duplicate entry " + e.name);
        wq += e.name.ends_with(".wq");
    }
    o.require(wq == kPfmBlocks, "wq count " + std::to_string(wq));
    for (std::size_t i = 0; i < kPfmBlocks; ++i) {
        const auto& b = agg.net.model.blocks()[i];
        const std::string p = "block" + std::to_string(i) + ".";
        o.require(b.wq.same_storage(store.get(p + "wq")) && b.wk.same_storage(store.get(p + "wk")) &&
                      b.wv.same_storage(store.get(p + "wv")) && b.w1.same_storage(store.get(p + "w1")),
                  "block " + std::to_string(i) + " holds a private copy");
    }

    std::vector<Tensor> x;
    for (const auto& c : tgt) x.push_back(c.input());
    const InferNetwork init = build_infer_from_agg(agg.net);
    double init_diff = 0.0;
    for (Mode mode : {Mode::Eval, Mode::Train})
        init_diff = std::max(init_diff, max_abs_diff(agg_forward(agg.net, x, x, mode).y_t, infer_forward(init, x, mode)));
    o.require(init_diff <= 1e-12, "init diff " + num(init_diff));

    const auto before = snapshot(agg.net.model);
    const auto infer = train_infer(cfg, &agg.net, tgt);
    o.require(snapshot(agg.net.model) == before, "Agg parameters changed during train_infer");
    o.require(snapshot(infer.net.model) != before, "Infer did not train");
    if (o.pass)
        o.detail = std::to_string(store.size()) + " entries single-copy, teacher bitwise frozen, init diff " + num(init_diff);
    return o;
}

// 5. Dosimetry against counting and sorting oracles.
Outcome dosimetry_oracles() {
    Outcome o;
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::size_t mismatches = 0, order = 0, ci_bad = 0;
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> dose(32 * 32), ptv(32 * 32), oars(32 * 32);
        for (std::size_t i = 0; i < dose.size(); ++i) {
            dose[i] = u(rng) < 0.3 ? std::round(u(rng) * 20.0) / 20.0 : u(rng);
            const double r = u(rng);
            ptv[i] = r < 0.35;
            oars[i] = r > 0.7;
        }
        ptv[0] = 1.0;
        oars[1] = 1.0;
        if (rep % 5 == 0)  // exact conformity
            for (std::size_t i = 0; i < dose.size(); ++i) dose[i] = ptv[i] > 0.5 ? 0.95 + 0.05 * u(rng) : 0.9 * u(rng);
        const Tensor d = Tensor::from({1, 32, 32}, dose), mp = Tensor::from({1, 32, 32}, ptv),
                     mo = Tensor::from({1, 32, 32}, oars);
        const auto pv = oracle::masked(d, mp), ov = oracle::masked(d, mo);

        for (const auto& [mask, vals] : {std::pair{&mp, &pv}, std::pair{&mo, &ov}}) {
            const auto curve = dvh(d, *mask);
            for (std::size_t k = 0; k <= 256; ++k) {
                mismatches += curve.volume_fraction[k] != oracle::fraction_at_least(*vals, k / 256.0);
                if (k > 0) order += curve.volume_fraction[k] > curve.volume_fraction[k - 1];
            }
            double prev_d = 2.0, prev_v = 101.0;
            for (int x = 1; x <= 100; ++x) {
                const double dx = dose_at_volume(d, *mask, x);
                mismatches += dx != oracle::dx_sweep(*vals, x);
                order += dx > prev_d;
                prev_d = dx;
                const double vx = volume_at_dose(d, *mask, x / 100.0);
                mismatches += vx != oracle::percent_at_least(*vals, x / 100.0);
                order += vx > prev_v;
                prev_v = vx;
            }
        }
        const double hi = (oracle::dx_sweep(pv, 2) - oracle::dx_sweep(pv, 98)) / oracle::dx_sweep(pv, 50);
        mismatches += homogeneity_index(d, mp) != hi;

        std::size_t tv = 0, piv = 0, both = 0;
        for (std::size_t i = 0; i < dose.size(); ++i) {
            tv += ptv[i] > 0.5;
            piv += dose[i] >= 0.95;
            both += ptv[i] > 0.5 && dose[i] >= 0.95;
        }
        const double ci = conformality_index(d, mp);
        const double want = piv == 0 ? 0.0 : double(both) * double(both) / (double(tv) * double(piv));
        mismatches += ci != want;
        const bool same_sets = both == tv && both == piv;
        ci_bad += ci < 0.0 || ci > 1.0 || (ci == 1.0) != same_sets;
        if (rep % 5 == 0) ci_bad += !same_sets;
    }
    o.require(mismatches == 0, std::to_string(mismatches) + " oracle mismatches");
    o.require(order == 0, std::to_string(order) + " monotonicity violations");
    o.require(ci_bad == 0, std::to_string(ci_bad) + " CI range or iff violations");
    if (o.pass) o.detail = "50 cases exact";
    return o;
}

double epoch_mean(const auto& history, std::size_t epoch, std::size_t steps_per_epoch) {
    double s = 0.0;
    for (std::size_t i = 0; i < steps_per_epoch; ++i) s += history[epoch * steps_per_epoch + i].l_total;
    return s / static_cast<double>(steps_per_epoch);
}

// 6. Desk-scale training reduces both objectives.
Outcome desk_training() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    const TrainConfig cfg;  // desk defaults
    const auto src = make_cases(DomainSpec::source_like(), 40), tgt = make_cases(DomainSpec::target_like(), 12);
    const auto agg = train_agg(cfg, src, tgt);
    const auto infer = train_infer(cfg, &agg.net, tgt);
    const double secs = seconds_since(t0);

    const std::size_t agg_spe = agg.history.size() / cfg.epochs, inf_spe = infer.history.size() / cfg.epochs;
    const double a0 = epoch_mean(agg.history, 0, agg_spe), a1 = epoch_mean(agg.history, cfg.epochs - 1, agg_spe);
    const double i0 = epoch_mean(infer.history, 0, inf_spe), i1 = epoch_mean(infer.history, cfg.epochs - 1, inf_spe);
    o.require(a1 < 0.5 * a0, "Agg loss " + num(a0) + " -> " + num(a1));
    o.require(i1 < i0, "Infer loss " + num(i0) + " -> " + num(i1));
    o.require(secs < 900.0, "runtime " + num(secs) + " s");
    o.detail += (o.detail.empty() ? "" : "; ") + std::string("Agg epoch loss ") + num(a0) + " -> " + num(a1) +
                ", Infer " + num(i0) + " -> " + num(i1) + ", " + num(secs) + " s";
    return o;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// 7. Ablation trend over five seeds on a held-out target split.
Outcome ablation_trend() {
    Outcome o;
    const std::vector<std::string> rows{"star", "d", "e"};
    std::map<std::string, std::vector<double>> l1;
    for (std::uint64_t s = 1; s <= 5; ++s) {
        TrainConfig cfg;
        cfg.seed = s;
        const auto src = make_cases(DomainSpec::source_like(100 + s), 40);
        const auto tgt = make_cases(DomainSpec::target_like(200 + s), 12);
        const auto test = make_cases(DomainSpec::target_like(300 + s), 10);
        const auto results = run_ablation(cfg, rows, src, tgt, test, kScratch / ("ablation_seed" + std::to_string(s)));
        std::string line = "  seed " + std::to_string(s);
        for (const auto& r : results) {
            l1[r.label].push_back(r.evaluation.l1.mean);
            line += " " + r.label + "=" + num(r.evaluation.l1.mean);
        }
        std::cout << line << std::endl;
    }
    const double e = median(l1["e"]), d = median(l1["d"]), star = median(l1["star"]);
    o.require(e <= d, "median e " + num(e) + " > d " + num(d));
    o.require(d <= star, "median d " + num(d) + " > star " + num(star));
    o.detail += (o.detail.empty() ? "" : "; ") + std::string("medians star=") + num(star) + " d=" + num(d) + " e=" + num(e);
    return o;
}

// 8. Bitwise reruns and the tensor container.
Outcome determinism_and_format() {
    Outcome o;
    const TrainConfig cfg = small_config();
    const auto src = small_cases(DomainSpec::source_like(), 4), tgt = small_cases(DomainSpec::target_like(), 3);
    for (int rep = 0; rep < 2; ++rep) {
        const fs::path dir = kScratch / ("rerun" + std::to_string(rep));
        fs::remove_all(dir);
        fs::create_directories(dir);
        const auto agg = train_agg(cfg, src, tgt);
        const auto infer = train_infer(cfg, &agg.net, tgt);
        write_loss_csv(dir / "loss_agg.csv", agg.history);
        write_loss_csv(dir / "loss_infer.csv", infer.history);
        save_checkpoint(dir / "agg", agg.net.model, NetworkKind::Agg, agg.net.polymerized);
        save_checkpoint(dir / "infer", infer.net.model, NetworkKind::Infer, false);
    }
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(kScratch / "rerun0")) {
        if (!e.is_regular_file()) continue;
        ++files;
        const auto twin = kScratch / "rerun1" / fs::relative(e.path(), kScratch / "rerun0");
        o.require(slurp(e.path()) == slurp(twin), "rerun differs in " + twin.filename().string());
    }

    std::mt19937_64 rng(8);
    for (const Shape& s : {Shape{}, Shape{7}, Shape{3, 5}, Shape{2, 3, 4}, Shape{2, 2, 3, 3}}) {
        const Tensor t = Tensor::randn(s, rng, 1e6);
        const auto bytes = pfmt::encode(t);
        const Tensor back = pfmt::decode(bytes);
        bool same = back.shape() == s;
        for (std::size_t i = 0; same && i < t.numel(); ++i)
            same = std::bit_cast<std::uint64_t>(back[i]) == std::bit_cast<std::uint64_t>(t[i]);
        o.require(same && pfmt::encode(back) == bytes, "round trip rank " + std::to_string(s.size()));
    }
    const auto good = pfmt::encode(Tensor::from({2, 2}, {1, 2, 3, 4}));
    auto magic = good;
    magic[1] = 'X';
    const std::vector<std::pair<std::vector<std::uint8_t>, std::size_t>> bad{
        {std::vector<std::uint8_t>(good.begin(), good.begin() + 45), 45}, {magic, 1},
        {std::vector<std::uint8_t>(good.begin(), good.begin() + 9), 9}};
    for (const auto& [bytes, offset] : bad) {
        try {
            pfmt::decode(bytes);
            o.require(false, "accepted corrupt container");
        } catch (const FormatError& e) {
            o.require(e.offset() <= offset && std::string(e.what()).find("offset") != std::string::npos,
                      std::string("offset report: ") + e.what());
        }
    }
    if (o.pass) o.detail = std::to_string(files) + " rerun files bitwise equal, ranks 0-4 round trip, corrupt inputs rejected";
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient suite", gradient_suite},
        {"cross-attention degeneracy", cross_attention_degeneracy},
        {"bridge geometry", bridge_geometry},
        {"weight sharing and teacher freezing", sharing_and_freezing},
        {"dosimetry oracles", dosimetry_oracles},
        {"desk training", desk_training},
        {"ablation trend", ablation_trend},
        {"determinism and format", determinism_and_format},
    };
    std::set<std::size_t> only;
    for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));
    fs::create_directories(kScratch);

    int failed = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        if (!only.empty() && !only.count(k + 1)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[k].second();
        } catch (const std::exception& e) {
            o.require(false, std::string("exception: ") + e.what());
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << k + 1 << " (" << criteria[k].first << "): " << o.detail
                  << " [" << num(seconds_since(t0)) << " s]" << std::endl;
    }
    std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criterion(s) failed") << std::endl;
    return failed == 0 ? 0 : 1;
}
