#pragma once

#include "kronsmooth/kernels.hpp"
#include "kronsmooth/rng.hpp"

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace kronsmooth {

struct GroundTruth {
    ParamMatrix theta_star;  // P x G
    Matrix z_star;           // P x L
    Matrix v_star;           // G x L, orthonormal columns
};

enum class SimDesign { iid_r1, iid_r2, batch_effects };
enum class EmbeddingMode { informative, uninformative };

inline std::string to_string(SimDesign d) {
    switch (d) {
        case SimDesign::iid_r1: return "iid_r1";
        case SimDesign::iid_r2: return "iid_r2";
        case SimDesign::batch_effects: return "batch_effects";
    }
    return "";
}

inline SimDesign sim_design_from_string(const std::string& s) {
    if (s == "iid_r1") return SimDesign::iid_r1;
    if (s == "iid_r2") return SimDesign::iid_r2;
    if (s == "batch_effects") return SimDesign::batch_effects;
    throw std::invalid_argument("unknown design '" + s + "' (expected iid_r1, iid_r2 or batch_effects)");
}

inline std::string to_string(EmbeddingMode m) { return m == EmbeddingMode::informative ? "informative" : "uninformative"; }

inline EmbeddingMode embedding_mode_from_string(const std::string& s) {
    if (s == "informative") return EmbeddingMode::informative;
    if (s == "uninformative") return EmbeddingMode::uninformative;
    throw std::invalid_argument("unknown embedding mode '" + s + "' (expected informative or uninformative)");
}

struct SimConfig {
    std::size_t p = 50, g = 200, rank = 5, replicates = 2;
    SimDesign design = SimDesign::iid_r2;
    double noise_sd = 1.0;
    std::size_t batch_rank = 10;
    double batch_scale = 1.0 / (2.0 * std::sqrt(10.0));
    EmbeddingMode embedding_mode = EmbeddingMode::informative;
    std::uint64_t seed = 0;

    void validate() const {
        if (p == 0 || g == 0 || rank == 0 || replicates == 0)
            throw std::invalid_argument("SimConfig: dimensions must be positive");
        if (!(noise_sd > 0.0)) throw std::invalid_argument("SimConfig: noise_sd must be positive");
        if (rank > std::min(p, g)) throw std::invalid_argument("SimConfig: rank exceeds min(p, g)");
        if (design == SimDesign::batch_effects && batch_rank == 0)
            throw std::invalid_argument("SimConfig: batch_rank must be >= 1");
        if (!(batch_scale >= 0.0)) throw std::invalid_argument("SimConfig: batch_scale must be >= 0");
    }
};

/// Desk-scale stand-in for a real z-score matrix: rank 20 (capped by the shape),
/// singular values decaying by 0.75, scaled to unit root-mean-square entry.
inline ParamMatrix synthetic_base(std::size_t p, std::size_t g, std::uint64_t seed) {
    const auto pp = static_cast<Eigen::Index>(p), gg = static_cast<Eigen::Index>(g);
    const Eigen::Index r = std::min<Eigen::Index>({20, pp, gg});
    Rng ru(seed, "base_u"), rv(seed, "base_v");
    const Matrix u = random_orthonormal(pp, r, ru);
    const Matrix w = random_orthonormal(gg, r, rv);
    Vector s(r);
    for (Eigen::Index k = 0; k < r; ++k) s(k) = std::pow(0.75, static_cast<double>(k));
    ParamMatrix base = u * s.asDiagonal() * w.transpose();
    const double rms = std::sqrt(base.squaredNorm() / static_cast<double>(base.size()));
    return base / rms;
}

/// Top-`rank` principal components of `base` (scores and loadings), or, without a
/// base, standard-normal loadings and a random orthonormal gene basis.
/// Loading columns are sign-normalised so their largest-|.| entry is positive.
inline GroundTruth make_ground_truth(const std::optional<ParamMatrix>& base, std::size_t p, std::size_t g, std::size_t rank,
                                     std::uint64_t seed) {
    if (rank == 0 || rank > std::min(p, g)) throw std::invalid_argument("make_ground_truth: rank exceeds min(p, g)");
    const auto l = static_cast<Eigen::Index>(rank);
    GroundTruth gt;
    if (base) {
        if (base->rows() != static_cast<Eigen::Index>(p) || base->cols() != static_cast<Eigen::Index>(g))
            throw std::invalid_argument("make_ground_truth: base shape does not match (p, g)");
        Eigen::BDCSVD<Matrix> svd(*base, Eigen::ComputeThinU | Eigen::ComputeThinV);
        gt.z_star = svd.matrixU().leftCols(l) * svd.singularValues().head(l).asDiagonal();
        gt.v_star = svd.matrixV().leftCols(l);
        for (Eigen::Index k = 0; k < l; ++k) {
            Eigen::Index at;
            gt.v_star.col(k).cwiseAbs().maxCoeff(&at);
            if (gt.v_star(at, k) < 0) {
                gt.v_star.col(k) *= -1.0;
                gt.z_star.col(k) *= -1.0;
            }
        }
    } else {
        Rng rz(seed, "truth_z"), rv(seed, "truth_v");
        gt.z_star = rz.normal_matrix(static_cast<Eigen::Index>(p), l);
        gt.v_star = random_orthonormal(static_cast<Eigen::Index>(g), l, rv);
    }
    gt.theta_star = gt.z_star * gt.v_star.transpose();
    return gt;
}

inline MeasurementTensor simulate_iid(const GroundTruth& gt, std::size_t replicates, double noise_sd, std::uint64_t seed) {
    if (replicates == 0) throw std::invalid_argument("simulate_iid: need at least one replicate");
    const auto p = static_cast<std::size_t>(gt.theta_star.rows()), g = static_cast<std::size_t>(gt.theta_star.cols());
    MeasurementTensor x(replicates, p, g);
    for (std::size_t r = 0; r < replicates; ++r) {
        Rng rng(seed, "noise", r);
        x.set_replicate(r, gt.theta_star + noise_sd * rng.normal_matrix(gt.theta_star.rows(), gt.theta_star.cols()));
    }
    return x;
}

/// X^(r) = theta* + batch_scale * Zc^(r) Vc^(r)^T + noise_sd * N(0, 1), with
/// fresh P x batch_rank and G x batch_rank standard-normal factors per replicate.
inline MeasurementTensor simulate_batch_effects(const GroundTruth& gt, std::size_t replicates, const SimConfig& cfg) {
    if (cfg.batch_rank == 0) throw std::invalid_argument("simulate_batch_effects: batch_rank must be >= 1");
    const Eigen::Index p = gt.theta_star.rows(), g = gt.theta_star.cols();
    const auto b = static_cast<Eigen::Index>(cfg.batch_rank);
    MeasurementTensor x(replicates, static_cast<std::size_t>(p), static_cast<std::size_t>(g));
    for (std::size_t r = 0; r < replicates; ++r) {
        Rng rz(cfg.seed, "batch_z", r), rv(cfg.seed, "batch_v", r), rn(cfg.seed, "noise", r);
        const Matrix zc = rz.normal_matrix(p, b);
        const Matrix vc = rv.normal_matrix(g, b);
        const Matrix noise = rn.normal_matrix(p, g);
        x.set_replicate(r, gt.theta_star + cfg.batch_scale * zc * vc.transpose() + cfg.noise_sd * noise);
    }
    return x;
}

inline std::size_t design_replicates(const SimConfig& cfg) {
    switch (cfg.design) {
        case SimDesign::iid_r1: return 1;
        case SimDesign::iid_r2: return cfg.replicates;
        case SimDesign::batch_effects: return cfg.replicates;
    }
    return cfg.replicates;
}

inline MeasurementTensor simulate(const GroundTruth& gt, const SimConfig& cfg) {
    cfg.validate();
    if (cfg.design == SimDesign::batch_effects) return simulate_batch_effects(gt, design_replicates(cfg), cfg);
    return simulate_iid(gt, design_replicates(cfg), cfg.noise_sd, cfg.seed);
}

inline EmbeddingMatrix make_embeddings(const GroundTruth& gt, EmbeddingMode mode, std::uint64_t seed, Eigen::Index dims = 10) {
    if (mode == EmbeddingMode::informative) return {gt.z_star};
    Rng rng(seed, "embedding");
    return {rng.normal_matrix(gt.z_star.rows(), dims)};
}

struct MannWhitneyResult {
    double z = 0.0;
    double u = 0.0;
    bool degenerate = false;
};

/// Normal approximation to the Mann-Whitney U statistic with midranks and the
/// tie-corrected variance, no continuity correction. z > 0 when `a` tends larger.
inline MannWhitneyResult mann_whitney_z(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("mann_whitney_z: both samples must be nonempty");
    const std::size_t m = a.size(), n = b.size(), total = m + n;
    std::vector<std::pair<double, bool>> pooled;
    pooled.reserve(total);
    for (double v : a) pooled.emplace_back(v, true);
    for (double v : b) pooled.emplace_back(v, false);
    std::sort(pooled.begin(), pooled.end(), [](const auto& x, const auto& y) { return x.first < y.first; });

    double rank_sum_a = 0.0, tie_term = 0.0;
    for (std::size_t i = 0; i < total;) {
        std::size_t j = i;
        while (j < total && pooled[j].first == pooled[i].first) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t t = i; t < j; ++t)
            if (pooled[t].second) rank_sum_a += midrank;
        const double tcount = static_cast<double>(j - i);
        tie_term += tcount * tcount * tcount - tcount;
        i = j;
    }
    const double md = static_cast<double>(m), nd = static_cast<double>(n), nt = static_cast<double>(total);
    MannWhitneyResult res;
    res.u = rank_sum_a - md * (md + 1.0) / 2.0;
    const double var = md * nd / 12.0 * ((nt + 1.0) - (total > 1 ? tie_term / (nt * (nt - 1.0)) : 0.0));
    if (!(var > 0.0)) {
        res.degenerate = true;
        return res;
    }
    res.z = (res.u - md * nd / 2.0) / std::sqrt(var);
    return res;
}

/// z-score matrix (P x G) from per-treatment cells x genes expression tables
/// against a shared control table.
inline Matrix mann_whitney_z_matrix(const std::vector<Matrix>& treated, const Matrix& control) {
    if (treated.empty()) throw std::invalid_argument("mann_whitney_z_matrix: no treatments");
    const Eigen::Index g = control.cols();
    Matrix out(static_cast<Eigen::Index>(treated.size()), g);
    for (std::size_t p = 0; p < treated.size(); ++p) {
        if (treated[p].cols() != g) throw std::invalid_argument("mann_whitney_z_matrix: gene count mismatch");
        for (Eigen::Index j = 0; j < g; ++j) {
            const Vector ta = treated[p].col(j), cb = control.col(j);
            out(static_cast<Eigen::Index>(p), j) =
                mann_whitney_z(std::span<const double>(ta.data(), static_cast<std::size_t>(ta.size())),
                               std::span<const double>(cb.data(), static_cast<std::size_t>(cb.size())))
                    .z;
        }
    }
    return out;
}

}  // namespace kronsmooth
