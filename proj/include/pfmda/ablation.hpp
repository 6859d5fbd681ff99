#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pfmda/checkpoint.hpp"
#include "pfmda/config.hpp"
#include "pfmda/evaluation.hpp"
#include "pfmda/training.hpp"

namespace pfmda {

/// One row of the component ablation. Labels: a, b, c (Agg variants),
/// star (Infer from scratch), d (Infer from Agg, L1 only), e (d + distillation).
struct AblationRow {
    std::string label;
    NetworkKind network = NetworkKind::Agg;
    bool use_mca = false;
    bool use_brd = false;
    bool init_from_agg = false;
    bool use_dtl = false;
};

inline const std::vector<std::string>& ablation_labels() {
    static const std::vector<std::string> labels{"a", "b", "c", "star", "d", "e"};
    return labels;
}

inline AblationRow ablation_row(const std::string& label) {
    if (label == "a") return {"a", NetworkKind::Agg, false, false, false, false};
    if (label == "b") return {"b", NetworkKind::Agg, true, false, false, false};
    if (label == "c") return {"c", NetworkKind::Agg, true, true, false, false};
    if (label == "star") return {"star", NetworkKind::Infer, true, true, false, false};
    if (label == "d") return {"d", NetworkKind::Infer, true, true, true, false};
    if (label == "e") return {"e", NetworkKind::Infer, true, true, true, true};
    throw ContractError("unknown ablation row '" + label + "' (expected a, b, c, star, d, e)");
}

inline TrainConfig row_config(TrainConfig base, const AblationRow& row) {
    base.use_mca = row.use_mca;
    base.use_brd = row.use_brd;
    base.init_from_agg = row.init_from_agg;
    base.use_dtl = row.use_dtl;
    return base;
}

/// Comparison columns: PTV (HI, CI, D98, D95) and OARs (Dmean, V50).
inline constexpr std::array<std::size_t, 6> kAblationColumns{0, 1, 2, 3, 4, 6};

struct AblationResult {
    std::string label;
    Evaluation evaluation;  // pooled over folds
};

namespace detail {

// Trains every requested row on one train/test split; returns per-row predictions.
inline std::map<std::string, std::vector<Tensor>> run_ablation_split(const TrainConfig& base,
                                                                     const std::vector<std::string>& labels,
                                                                     const std::vector<Case>& source,
                                                                     const std::vector<Case>& target_train,
                                                                     const std::vector<Case>& test,
                                                                     const std::filesystem::path& out_dir) {
    std::map<std::string, std::unique_ptr<AggNetwork>> agg_cache;  // keyed by Agg toggles
    auto agg_for = [&](const TrainConfig& cfg) -> const AggNetwork& {
        const std::string key = std::string(cfg.use_mca ? "1" : "0") + (cfg.use_brd ? "1" : "0");
        auto it = agg_cache.find(key);
        if (it == agg_cache.end()) {
            auto run = train_agg(cfg, source, target_train);
            it = agg_cache.emplace(key, std::make_unique<AggNetwork>(std::move(run.net))).first;
        }
        return *it->second;
    };
    std::map<std::string, std::vector<Tensor>> predictions;
    for (const auto& label : labels) {
        const AblationRow row = ablation_row(label);
        const TrainConfig cfg = row_config(base, row);
        const auto row_dir = out_dir / label;
        std::filesystem::create_directories(row_dir);
        {
            std::ofstream os(row_dir / "config.txt", std::ios::trunc);
            os << cfg.to_text();
            std::ofstream rs(row_dir / "row.txt", std::ios::trunc);
            rs << "label=" << row.label << "\nnetwork=" << to_string(row.network) << '\n';
        }
        if (row.network == NetworkKind::Agg) {
            auto run = train_agg(cfg, source, target_train);
            write_loss_csv(row_dir / "loss.csv", run.history);
            predictions[label] = predict(run.net, test);
            agg_cache.try_emplace(std::string(cfg.use_mca ? "1" : "0") + (cfg.use_brd ? "1" : "0"),
                                  std::make_unique<AggNetwork>(std::move(run.net)));
        } else {
            const AggNetwork* agg = (cfg.init_from_agg || cfg.use_dtl) ? &agg_for(cfg) : nullptr;
            auto run = train_infer(cfg, agg, target_train);
            write_loss_csv(row_dir / "loss.csv", run.history);
            predictions[label] = predict(run.net, test);
        }
    }
    return predictions;
}

}  // namespace detail

/// Runs the ablation rows on a fixed held-out test set.
inline std::vector<AblationResult> run_ablation(const TrainConfig& base, const std::vector<std::string>& labels,
                                                const std::vector<Case>& source, const std::vector<Case>& target_train,
                                                const std::vector<Case>& test, const std::filesystem::path& out_dir) {
    for (const auto& l : labels) ablation_row(l);
    auto preds = detail::run_ablation_split(base, labels, source, target_train, test, out_dir / "rows");
    std::vector<AblationResult> out;
    for (const auto& l : labels) out.push_back({l, evaluate(preds[l], test)});
    return out;
}

/// k-fold variant: each fold of `target` is held out once; per-case results are pooled.
inline std::vector<AblationResult> run_ablation_folds(const TrainConfig& base, const std::vector<std::string>& labels,
                                                      const std::vector<Case>& source, const std::vector<Case>& target,
                                                      std::size_t folds, const std::filesystem::path& out_dir) {
    for (const auto& l : labels) ablation_row(l);
    if (folds < 2 || folds > target.size())
        throw ConfigError("folds must lie in [2, " + std::to_string(target.size()) + "]");
    std::map<std::string, std::vector<Tensor>> pooled;
    std::vector<Case> pooled_cases;
    for (std::size_t f = 0; f < folds; ++f) {
        const std::size_t lo = f * target.size() / folds, hi = (f + 1) * target.size() / folds;
        std::vector<Case> train, test;
        for (std::size_t i = 0; i < target.size(); ++i) (i >= lo && i < hi ? test : train).push_back(target[i]);
        auto preds = detail::run_ablation_split(base, labels, source, train, test,
                                                out_dir / ("fold" + std::to_string(f)) / "rows");
        for (const auto& l : labels) pooled[l].insert(pooled[l].end(), preds[l].begin(), preds[l].end());
        pooled_cases.insert(pooled_cases.end(), test.begin(), test.end());
    }
    std::vector<AblationResult> out;
    for (const auto& l : labels) out.push_back({l, evaluate(pooled[l], pooled_cases)});
    return out;
}

inline std::string ablation_csv_header() {
    std::string h = "row";
    for (auto k : kAblationColumns) h += std::string(",") + kMetricNames[k];
    return h;
}

/// comparison.csv (APE mean±std per comparison column) and ablation_l1.csv.
inline void write_ablation(const std::filesystem::path& dir, const std::vector<AblationResult>& results) {
    std::filesystem::create_directories(dir);
    std::ofstream cmp(dir / "comparison.csv", std::ios::trunc);
    cmp << ablation_csv_header() << '\n';
    for (const auto& r : results) {
        cmp << r.label;
        for (auto k : kAblationColumns) cmp << ',' << fmt_cohort(r.evaluation.ape.cohort[k]);
        cmp << '\n';
    }
    std::ofstream l1(dir / "ablation_l1.csv", std::ios::trunc);
    l1 << "row,target_l1\n";
    for (const auto& r : results) l1 << r.label << ',' << fmt_cohort(r.evaluation.l1) << '\n';
    if (!cmp || !l1) throw std::runtime_error("cannot write ablation results in " + dir.string());
}

}  // namespace pfmda
