#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "pfmda/errors.hpp"
#include "pfmda/tensor.hpp"

namespace pfmda {

// Doses are fractions of the prescription; a mask value > 0.5 marks membership.

struct DVHCurve {
    std::string structure;
    std::vector<double> dose_bins;        // bin edges, uniform over [0, 1]
    std::vector<double> volume_fraction;  // fraction of structure with dose >= edge
};

namespace detail {

inline std::vector<double> masked_values(const Tensor& dose, const Tensor& mask, const char* op) {
    if (dose.shape() != mask.shape())
        throw DimensionError(std::string(op) + ": dose " + shape_str(dose.shape()) + " vs mask " +
                             shape_str(mask.shape()));
    std::vector<double> out;
    for (std::size_t i = 0; i < dose.numel(); ++i)
        if (mask[i] > 0.5) out.push_back(dose[i]);
    if (out.empty()) throw ContractError(std::string(op) + ": empty structure mask");
    return out;
}

}  // namespace detail

inline DVHCurve dvh(const Tensor& dose, const Tensor& mask, std::string structure = {}, std::size_t bins = 256) {
    if (bins == 0) throw ContractError("dvh: bin count must be positive");
    auto values = detail::masked_values(dose, mask, "dvh");
    std::sort(values.begin(), values.end());
    DVHCurve c;
    c.structure = std::move(structure);
    c.dose_bins.resize(bins + 1);
    c.volume_fraction.resize(bins + 1);
    const double n = static_cast<double>(values.size());
    for (std::size_t k = 0; k <= bins; ++k) {
        const double t = static_cast<double>(k) / static_cast<double>(bins);
        const auto first = std::lower_bound(values.begin(), values.end(), t);
        c.dose_bins[k] = t;
        c.volume_fraction[k] = static_cast<double>(values.end() - first) / n;
    }
    return c;
}

/// Dx: the largest dose received by at least x% of the PTV, i.e. element
/// ceil(x·n/100) (1-indexed) of the PTV doses sorted descending.
inline double dose_at_volume(const Tensor& dose, const Tensor& ptv, double x_percent) {
    if (!(x_percent > 0.0 && x_percent <= 100.0)) throw ContractError("dose_at_volume: x must lie in (0, 100]");
    auto values = detail::masked_values(dose, ptv, "dose_at_volume");
    std::sort(values.begin(), values.end(), std::greater<>());
    const double n = static_cast<double>(values.size());
    // The tolerance absorbs representation error in x·n/100 for integral ranks.
    auto rank = static_cast<std::size_t>(std::ceil(x_percent * n / 100.0 - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, values.size());
    return values[rank - 1];
}

/// Vx: percent of the structure receiving at least `level`.
inline double volume_at_dose(const Tensor& dose, const Tensor& structure, double level) {
    const auto values = detail::masked_values(dose, structure, "volume_at_dose");
    const auto hits = std::count_if(values.begin(), values.end(), [&](double d) { return d >= level; });
    return 100.0 * static_cast<double>(hits) / static_cast<double>(values.size());
}

inline double mean_dose(const Tensor& dose, const Tensor& structure) {
    const auto values = detail::masked_values(dose, structure, "mean_dose");
    double s = 0.0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
}

/// (D2 − D98) / D50.
inline double homogeneity_index(const Tensor& dose, const Tensor& ptv) {
    const double d50 = dose_at_volume(dose, ptv, 50.0);
    if (d50 == 0.0) throw UndefinedMetricError("homogeneity_index: D50 is zero");
    return (dose_at_volume(dose, ptv, 2.0) - dose_at_volume(dose, ptv, 98.0)) / d50;
}

/// Paddick conformity: TV_PIV² / (TV · PIV), PIV = pixels with dose >= threshold.
inline double conformality_index(const Tensor& dose, const Tensor& ptv, double threshold = 0.95) {
    if (dose.shape() != ptv.shape()) throw DimensionError("conformality_index: dose/PTV shape mismatch");
    std::size_t tv = 0, piv = 0, both = 0;
    for (std::size_t i = 0; i < dose.numel(); ++i) {
        const bool in_tv = ptv[i] > 0.5;
        const bool in_piv = dose[i] >= threshold;
        tv += in_tv;
        piv += in_piv;
        both += in_tv && in_piv;
    }
    if (tv == 0) throw ContractError("conformality_index: empty PTV");
    if (piv == 0) return 0.0;
    const double b = static_cast<double>(both);
    return b * b / (static_cast<double>(tv) * static_cast<double>(piv));
}

inline constexpr std::array<const char*, 7> kMetricNames{"HI", "CI", "D98", "D95", "Dmean", "V40", "V50"};

/// PTV metrics (HI, CI, D98, D95) and OAR metrics (Dmean, V40, V50).
struct DoseMetrics {
    double hi = 0.0;
    double ci = 0.0;
    double d98 = 0.0;
    double d95 = 0.0;
    double dmean = 0.0;
    double v40 = 0.0;
    double v50 = 0.0;

    std::array<double, 7> as_array() const { return {hi, ci, d98, d95, dmean, v40, v50}; }
};

inline DoseMetrics compute_metrics(const Tensor& dose, const Tensor& ptv, const Tensor& oars) {
    DoseMetrics m;
    m.hi = homogeneity_index(dose, ptv);
    m.ci = conformality_index(dose, ptv);
    m.d98 = dose_at_volume(dose, ptv, 98.0);
    m.d95 = dose_at_volume(dose, ptv, 95.0);
    m.dmean = mean_dose(dose, oars);
    m.v40 = volume_at_dose(dose, oars, 0.40);
    m.v50 = volume_at_dose(dose, oars, 0.50);
    return m;
}

struct ApeValue {
    double value = 0.0;
    bool absolute_fallback = false;  // reference was zero; value is |pred − true|
};

/// |pred − true| / |true|, or |pred − true| when the reference is zero.
inline ApeValue ape(double predicted, double truth) {
    const double diff = std::abs(predicted - truth);
    if (truth == 0.0) return {diff, true};
    return {diff / std::abs(truth), false};
}

struct CohortStat {
    double mean = 0.0;
    double stddev = 0.0;  // population convention
};

inline CohortStat cohort_stat(const std::vector<double>& values) {
    if (values.empty()) throw ContractError("cohort_stat: no values");
    CohortStat s;
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size()));
    return s;
}

struct APEReport {
    std::vector<std::string> case_ids;
    std::vector<std::array<double, 7>> per_case;  // in kMetricNames order
    std::vector<std::array<bool, 7>> fallback;
    std::array<CohortStat, 7> cohort{};
    std::size_t fallback_count = 0;
};

inline APEReport ape_report(const std::vector<std::string>& ids, const std::vector<DoseMetrics>& predicted,
                            const std::vector<DoseMetrics>& truth) {
    if (ids.size() != predicted.size() || predicted.size() != truth.size() || ids.empty())
        throw ContractError("ape_report: mismatched or empty cohorts");
    APEReport r;
    r.case_ids = ids;
    for (std::size_t c = 0; c < ids.size(); ++c) {
        const auto p = predicted[c].as_array(), t = truth[c].as_array();
        std::array<double, 7> row{};
        std::array<bool, 7> flags{};
        for (std::size_t k = 0; k < 7; ++k) {
            const auto a = ape(p[k], t[k]);
            row[k] = a.value;
            flags[k] = a.absolute_fallback;
            r.fallback_count += a.absolute_fallback;
        }
        r.per_case.push_back(row);
        r.fallback.push_back(flags);
    }
    for (std::size_t k = 0; k < 7; ++k) {
        std::vector<double> column;
        for (const auto& row : r.per_case) column.push_back(row[k]);
        r.cohort[k] = cohort_stat(column);
    }
    return r;
}

}  // namespace pfmda
