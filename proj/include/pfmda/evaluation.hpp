#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pfmda/dosimetry.hpp"
#include "pfmda/losses.hpp"
#include "pfmda/networks.hpp"
#include "pfmda/phantom.hpp"

namespace pfmda {

/// Target-path predictions (1×H×W each) in evaluation mode.
inline std::vector<Tensor> predict(const InferNetwork& net, const std::vector<Case>& cases) {
    NoGradGuard no_grad;
    std::vector<Tensor> out;
    for (const auto& c : cases) out.push_back(select(infer_forward(net, std::vector<Tensor>{c.input()}, Mode::Eval), 0));
    return out;
}

/// Agg target path, with the target case fed to both token streams.
inline std::vector<Tensor> predict(const AggNetwork& net, const std::vector<Case>& cases) {
    NoGradGuard no_grad;
    std::vector<Tensor> out;
    for (const auto& c : cases) {
        const std::vector<Tensor> x{c.input()};
        out.push_back(select(agg_forward(net, x, x, Mode::Eval).y_t, 0));
    }
    return out;
}

struct CaseEvaluation {
    std::string id;
    DoseMetrics predicted;
    DoseMetrics truth;
    double l1 = 0.0;
    DVHCurve ptv_predicted, ptv_truth, oars_predicted, oars_truth;
};

struct Evaluation {
    std::vector<CaseEvaluation> cases;
    APEReport ape;
    CohortStat l1;
};

inline Evaluation evaluate(const std::vector<Tensor>& predictions, const std::vector<Case>& cases) {
    if (predictions.size() != cases.size() || cases.empty())
        throw ContractError("evaluate: need one prediction per case");
    Evaluation ev;
    std::vector<std::string> ids;
    std::vector<DoseMetrics> pred, truth;
    std::vector<double> l1s;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const auto& c = cases[i];
        if (predictions[i].shape() != c.dose.shape())
            throw ConfigError("prediction " + shape_str(predictions[i].shape()) + " does not match case " + c.id +
                              " dose " + shape_str(c.dose.shape()));
        CaseEvaluation ce;
        ce.id = c.id;
        ce.predicted = compute_metrics(predictions[i], c.ptv, c.oars);
        ce.truth = compute_metrics(c.dose, c.ptv, c.oars);
        {
            NoGradGuard no_grad;
            ce.l1 = domain_l1(predictions[i], c.dose).item();
        }
        ce.ptv_predicted = dvh(predictions[i], c.ptv, "PTV");
        ce.ptv_truth = dvh(c.dose, c.ptv, "PTV");
        ce.oars_predicted = dvh(predictions[i], c.oars, "OARs");
        ce.oars_truth = dvh(c.dose, c.oars, "OARs");
        ids.push_back(ce.id);
        pred.push_back(ce.predicted);
        truth.push_back(ce.truth);
        l1s.push_back(ce.l1);
        ev.cases.push_back(std::move(ce));
    }
    ev.ape = ape_report(ids, pred, truth);
    ev.l1 = cohort_stat(l1s);
    return ev;
}

inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string fmt_cohort(const CohortStat& s) { return fmt17(s.mean) + "±" + fmt17(s.stddev); }

inline std::string metrics_csv_header() {
    std::string h = "case_id";
    for (const char* m : kMetricNames) h += std::string(",") + m;
    return h;
}

namespace detail {
inline std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream os(p, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    return os;
}

inline void write_metric_table(const std::filesystem::path& path, const std::vector<std::string>& ids,
                               const std::vector<std::array<double, 7>>& rows) {
    auto os = open_out(path);
    os << metrics_csv_header() << '\n';
    for (std::size_t i = 0; i < rows.size(); ++i) {
        os << ids[i];
        for (double v : rows[i]) os << ',' << fmt17(v);
        os << '\n';
    }
    os << "cohort";
    for (std::size_t k = 0; k < 7; ++k) {
        std::vector<double> col;
        for (const auto& r : rows) col.push_back(r[k]);
        os << ',' << fmt_cohort(cohort_stat(col));
    }
    os << '\n';
}

inline void write_dvh(const std::filesystem::path& path, const DVHCurve& ptv, const DVHCurve& oars) {
    auto os = open_out(path);
    os << "structure,dose_bin,volume_fraction\n";
    for (const DVHCurve* c : {&ptv, &oars})
        for (std::size_t k = 0; k < c->dose_bins.size(); ++k)
            os << c->structure << ',' << fmt17(c->dose_bins[k]) << ',' << fmt17(c->volume_fraction[k]) << '\n';
}
}  // namespace detail

/// Writes metrics_pred.csv, metrics_true.csv, ape.csv, l1.csv and dvh/<id>_{pred,true}.csv.
inline void write_evaluation(const std::filesystem::path& dir, const Evaluation& ev) {
    std::filesystem::create_directories(dir / "dvh");
    std::vector<std::string> ids;
    std::vector<std::array<double, 7>> pred, truth;
    for (const auto& c : ev.cases) {
        ids.push_back(c.id);
        pred.push_back(c.predicted.as_array());
        truth.push_back(c.truth.as_array());
        detail::write_dvh(dir / "dvh" / (c.id + "_pred.csv"), c.ptv_predicted, c.oars_predicted);
        detail::write_dvh(dir / "dvh" / (c.id + "_true.csv"), c.ptv_truth, c.oars_truth);
    }
    detail::write_metric_table(dir / "metrics_pred.csv", ids, pred);
    detail::write_metric_table(dir / "metrics_true.csv", ids, truth);

    auto ape = detail::open_out(dir / "ape.csv");
    ape << metrics_csv_header() << ",absolute_fallback\n";
    for (std::size_t i = 0; i < ev.ape.per_case.size(); ++i) {
        ape << ev.ape.case_ids[i];
        for (double v : ev.ape.per_case[i]) ape << ',' << fmt17(v);
        std::string flagged;
        for (std::size_t k = 0; k < 7; ++k)
            if (ev.ape.fallback[i][k]) flagged += (flagged.empty() ? "" : ";") + std::string(kMetricNames[k]);
        ape << ',' << flagged << '\n';
    }
    ape << "cohort";
    for (const auto& s : ev.ape.cohort) ape << ',' << fmt_cohort(s);
    ape << ",\n";

    auto l1 = detail::open_out(dir / "l1.csv");
    l1 << "case_id,l1\n";
    for (const auto& c : ev.cases) l1 << c.id << ',' << fmt17(c.l1) << '\n';
    l1 << "cohort," << fmt_cohort(ev.l1) << '\n';
}

}  // namespace pfmda
