#pragma once

#include "kronsmooth/types.hpp"

#include <algorithm>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace kronsmooth {

/// Flat (p, g) indices, p * G + g.
using EntrySet = std::vector<std::size_t>;

struct SplitSpec {
    std::vector<std::size_t> train_replicates;
    std::vector<std::size_t> test_replicates;

    void validate(std::size_t replicates) const {
        if (train_replicates.empty() || test_replicates.empty())
            throw std::invalid_argument("SplitSpec: train and test replicate sets must be nonempty");
        std::set<std::size_t> seen;
        for (auto i : train_replicates) seen.insert(i);
        for (auto i : test_replicates)
            if (!seen.insert(i).second) throw std::invalid_argument("SplitSpec: train and test replicates overlap");
        if (*seen.rbegin() >= replicates)
            throw std::invalid_argument("SplitSpec: replicate index out of range");
    }
};

/// Last replicate tests, the others train.
inline SplitSpec default_split(std::size_t replicates) {
    if (replicates < 2) throw std::invalid_argument("default_split: need at least two replicates");
    SplitSpec s;
    for (std::size_t r = 0; r + 1 < replicates; ++r) s.train_replicates.push_back(r);
    s.test_replicates.push_back(replicates - 1);
    return s;
}

inline ParamMatrix raw_estimate(const MeasurementTensor& x, const std::vector<std::size_t>& replicates) {
    if (replicates.empty()) throw std::invalid_argument("raw_estimate: empty replicate set");
    ParamMatrix out = ParamMatrix::Zero(static_cast<Eigen::Index>(x.treatments()), static_cast<Eigen::Index>(x.genes()));
    for (auto r : replicates) out += x.replicate(r);
    return out / static_cast<double>(replicates.size());
}

inline int sign_of(double v) { return (v > 0.0) - (v < 0.0); }

/// Signs disagree, or either is zero.
inline bool sign_mismatch(double a, double b) {
    const int sa = sign_of(a), sb = sign_of(b);
    return sa == 0 || sb == 0 || sa != sb;
}

inline EntrySet all_entries(const ParamMatrix& m) {
    EntrySet s(static_cast<std::size_t>(m.size()));
    std::iota(s.begin(), s.end(), std::size_t{0});
    return s;
}

namespace detail {
inline double flat_at(const ParamMatrix& m, std::size_t idx) {
    const auto g = static_cast<std::size_t>(m.cols());
    return m(static_cast<Eigen::Index>(idx / g), static_cast<Eigen::Index>(idx % g));
}

inline void require_same_shape(const ParamMatrix& a, const ParamMatrix& b, const char* who) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(who) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()));
}

inline double mismatch_fraction(const ParamMatrix& a, const ParamMatrix& b, const EntrySet& subset, const char* who) {
    require_same_shape(a, b, who);
    if (subset.empty()) throw std::invalid_argument(std::string(who) + ": empty subset");
    std::size_t bad = 0;
    for (auto idx : subset)
        if (sign_mismatch(flat_at(a, idx), flat_at(b, idx))) ++bad;
    return static_cast<double>(bad) / static_cast<double>(subset.size());
}
}  // namespace detail

/// Cross-replicate sign error proportion of `a` against `b` on `subset`.
inline double csep(const ParamMatrix& a, const ParamMatrix& b, const EntrySet& subset) {
    return detail::mismatch_fraction(a, b, subset, "csep");
}

inline double type_s_proportion(const ParamMatrix& est, const ParamMatrix& truth, const EntrySet& subset) {
    return detail::mismatch_fraction(est, truth, subset, "type_s_proportion");
}

/// Entries ordered by decreasing |estimate|, ties by flat index; S_k is the first k.
struct NestedFamily {
    std::vector<std::size_t> order;
    std::vector<double> magnitudes;  // |estimate| along `order`

    [[nodiscard]] EntrySet subset(std::size_t k) const { return {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k)}; }
};

inline NestedFamily nested_family(const ParamMatrix& smoothed) {
    NestedFamily f;
    f.order = all_entries(smoothed);
    std::vector<double> mag(f.order.size());
    for (auto i : f.order) mag[i] = std::abs(detail::flat_at(smoothed, i));
    std::stable_sort(f.order.begin(), f.order.end(), [&](std::size_t a, std::size_t b) { return mag[a] > mag[b]; });
    f.magnitudes.reserve(mag.size());
    for (auto i : f.order) f.magnitudes.push_back(mag[i]);
    return f;
}

struct CsepPoint {
    std::size_t subset_size = 0;
    double csep = 0.0;
    double threshold = 0.0;  // smallest |estimate| inside the subset
};

struct CsepCurve {
    std::vector<CsepPoint> points;
    std::string family = "magnitude_descending";
};

/// ~`count` log-spaced sizes from `lo` to `total`, deduplicated, strictly increasing.
inline std::vector<std::size_t> log_grid(std::size_t total, std::size_t count = 100, std::size_t lo = 10) {
    std::vector<std::size_t> out;
    if (total == 0) return out;
    lo = std::clamp<std::size_t>(lo, 1, total);
    if (count <= 1 || lo == total) return {total};
    const double a = std::log(static_cast<double>(lo)), b = std::log(static_cast<double>(total));
    for (std::size_t i = 0; i < count; ++i) {
        auto v = static_cast<std::size_t>(std::llround(std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(count - 1))));
        v = std::clamp<std::size_t>(v, 1, total);
        if (out.empty() || v > out.back()) out.push_back(v);
    }
    if (out.back() != total) out.push_back(total);
    return out;
}

/// CSEP of `smoothed` against `valid` on the nested family of `smoothed`, evaluated
/// at the sizes in `grid` (sorted, deduplicated, values outside [1, PG] dropped).
inline CsepCurve csep_curve(const ParamMatrix& smoothed, const ParamMatrix& valid, std::vector<std::size_t> grid) {
    detail::require_same_shape(smoothed, valid, "csep_curve");
    const NestedFamily fam = nested_family(smoothed);
    const std::size_t total = fam.order.size();
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    CsepCurve curve;
    std::size_t bad = 0, k = 0;
    for (std::size_t size : grid) {
        if (size == 0 || size > total) continue;
        for (; k < size; ++k)
            if (sign_mismatch(detail::flat_at(smoothed, fam.order[k]), detail::flat_at(valid, fam.order[k]))) ++bad;
        curve.points.push_back({size, static_cast<double>(bad) / static_cast<double>(size), fam.magnitudes[size - 1]});
    }
    return curve;
}

inline CsepCurve csep_curve(const ParamMatrix& smoothed, const ParamMatrix& valid) {
    return csep_curve(smoothed, valid, log_grid(static_cast<std::size_t>(smoothed.size())));
}

struct ErrorControlResult {
    double target_v = 0.0;
    double csep_threshold = 0.0;  // target_v / 2
    std::size_t selected_size = 0;
    double selected_threshold = 0.0;
    double achieved_csep = 0.0;
};

/// Largest subset of the family with CSEP <= target_v / 2; twice the expected CSEP
/// bounds the type S proportion, so that subset certifies `target_v`.
inline ErrorControlResult control_subset(const CsepCurve& curve, double target_v) {
    if (!(target_v > 0.0 && target_v < 1.0)) throw std::invalid_argument("control_subset: target_v must lie in (0, 1)");
    ErrorControlResult res;
    res.target_v = target_v;
    res.csep_threshold = target_v / 2.0;
    for (const auto& pt : curve.points)
        if (pt.csep <= res.csep_threshold && pt.subset_size >= res.selected_size) {
            res.selected_size = pt.subset_size;
            res.selected_threshold = pt.threshold;
            res.achieved_csep = pt.csep;
        }
    return res;
}

struct TypeSPoint {
    double threshold = 0.0;
    std::size_t subset_size = 0;
    double type_s = 0.0;
};

inline std::vector<TypeSPoint> type_s_threshold_curve(const ParamMatrix& est, const ParamMatrix& truth,
                                                      const std::vector<double>& thresholds) {
    detail::require_same_shape(est, truth, "type_s_threshold_curve");
    std::vector<TypeSPoint> out;
    for (double t : thresholds) {
        std::size_t n = 0, bad = 0;
        for (Eigen::Index i = 0; i < est.size(); ++i) {
            const double e = est.data()[i];
            if (std::abs(e) > t) {
                ++n;
                if (sign_mismatch(e, truth.data()[i])) ++bad;
            }
        }
        if (n > 0) out.push_back({t, n, static_cast<double>(bad) / static_cast<double>(n)});
    }
    return out;
}

/// Thresholds at the |est| quantiles, so that the curve spans all subset sizes.
inline std::vector<double> magnitude_thresholds(const ParamMatrix& est, std::size_t count = 100) {
    std::vector<double> mags(est.data(), est.data() + est.size());
    for (double& m : mags) m = std::abs(m);
    std::sort(mags.begin(), mags.end());
    std::vector<double> out;
    if (mags.empty()) return out;
    out.push_back(0.0);
    for (std::size_t i = 1; i < count; ++i) {
        const double q = mags[std::min(mags.size() - 1, i * mags.size() / count)];
        if (q > out.back()) out.push_back(q);
    }
    return out;
}

/// Pearson correlation per treatment row; nullopt for rows with zero variance.
inline std::vector<std::optional<double>> per_perturbation_correlation(const ParamMatrix& est, const ParamMatrix& truth) {
    detail::require_same_shape(est, truth, "per_perturbation_correlation");
    if (est.cols() < 2) throw std::invalid_argument("per_perturbation_correlation: need at least two genes");
    std::vector<std::optional<double>> out;
    for (Eigen::Index p = 0; p < est.rows(); ++p) {
        const Vector a = est.row(p).transpose().array() - est.row(p).mean();
        const Vector b = truth.row(p).transpose().array() - truth.row(p).mean();
        const double sa = a.squaredNorm(), sb = b.squaredNorm();
        if (!(sa > 0.0) || !(sb > 0.0)) {
            out.emplace_back(std::nullopt);
            continue;
        }
        out.emplace_back(a.dot(b) / std::sqrt(sa * sb));
    }
    return out;
}

/// The |S| largest-magnitude entries of `est` (same ordering as nested_family).
inline EntrySet top_entries(const ParamMatrix& est, std::size_t count) {
    const NestedFamily f = nested_family(est);
    return f.subset(std::min(count, f.order.size()));
}

}  // namespace kronsmooth
