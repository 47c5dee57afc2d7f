#pragma once

#include "kronsmooth/kron.hpp"
#include "kronsmooth/rng.hpp"

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

namespace kronsmooth {

/// Which side of the random mask trains the factorization. The mask marks
/// `holdout_fraction` of the entries; `fit_on_large` trains on the unmarked
/// entries and scores the marked ones, `fit_on_small` does the opposite.
enum class MaskOrientation { fit_on_large, fit_on_small };

inline std::string to_string(MaskOrientation m) { return m == MaskOrientation::fit_on_large ? "fit_on_large" : "fit_on_small"; }

inline MaskOrientation mask_orientation_from_string(const std::string& s) {
    if (s == "fit_on_large") return MaskOrientation::fit_on_large;
    if (s == "fit_on_small") return MaskOrientation::fit_on_small;
    throw std::invalid_argument("unknown mask orientation '" + s + "'");
}

struct AlsSettings {
    int max_sweeps = 50;
    double tolerance = 1e-6;  // relative change of the training loss
};

struct AlsResult {
    Matrix row_factors;  // n x L
    Matrix col_factors;  // m x L
    double train_loss = 0.0;
    int sweeps = 0;
};

/// Alternating least squares on the observed entries of `x` (mask true = observed),
/// initialised from the truncated SVD of the zero-filled matrix.
inline AlsResult als_complete(const Matrix& x, const std::vector<bool>& observed, int rank, const AlsSettings& cfg = {}) {
    const Eigen::Index n = x.rows(), m = x.cols(), l = rank;
    Matrix filled = Matrix::Zero(n, m);
    std::vector<std::vector<Eigen::Index>> row_obs(static_cast<std::size_t>(n)), col_obs(static_cast<std::size_t>(m));
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < m; ++j)
            if (observed[static_cast<std::size_t>(i * m + j)]) {
                filled(i, j) = x(i, j);
                row_obs[static_cast<std::size_t>(i)].push_back(j);
                col_obs[static_cast<std::size_t>(j)].push_back(i);
            }
    Eigen::BDCSVD<Matrix> svd(filled, Eigen::ComputeThinU | Eigen::ComputeThinV);
    AlsResult res;
    res.row_factors = svd.matrixU().leftCols(l) * svd.singularValues().head(l).asDiagonal();
    res.col_factors = svd.matrixV().leftCols(l);

    auto solve_side = [l](const Matrix& fixed, const std::vector<Eigen::Index>& idx, auto value_at) -> Vector {
        Matrix a = Matrix::Zero(l, l);
        Vector b = Vector::Zero(l);
        for (Eigen::Index j : idx) {
            a.selfadjointView<Eigen::Lower>().rankUpdate(fixed.row(j).transpose());
            b += value_at(j) * fixed.row(j).transpose();
        }
        a = a.selfadjointView<Eigen::Lower>();
        Eigen::LLT<Matrix> llt(a);
        if (llt.info() == Eigen::Success) return llt.solve(b);
        return a.completeOrthogonalDecomposition().solve(b);
    };
    auto loss = [&] {
        double s = 0.0;
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j : row_obs[static_cast<std::size_t>(i)]) {
                const double e = x(i, j) - res.row_factors.row(i).dot(res.col_factors.row(j));
                s += e * e;
            }
        return s;
    };

    double prev = loss();
    for (int sweep = 1; sweep <= cfg.max_sweeps; ++sweep) {
        for (Eigen::Index i = 0; i < n; ++i)
            res.row_factors.row(i) =
                solve_side(res.col_factors, row_obs[static_cast<std::size_t>(i)], [&](Eigen::Index j) { return x(i, j); })
                    .transpose();
        for (Eigen::Index j = 0; j < m; ++j)
            res.col_factors.row(j) =
                solve_side(res.row_factors, col_obs[static_cast<std::size_t>(j)], [&](Eigen::Index i) { return x(i, j); })
                    .transpose();
        const double cur = loss();
        res.sweeps = sweep;
        const bool done = prev <= 0.0 || std::abs(prev - cur) <= cfg.tolerance * prev;
        prev = cur;
        if (done) break;
    }
    res.train_loss = prev;
    return res;
}

struct RankSelectSettings {
    std::vector<int> candidates;  // empty: 1..min(100, min(RP, G) - 1)
    double holdout_fraction = 0.1;
    std::uint64_t seed = 0;
    MaskOrientation orientation = MaskOrientation::fit_on_large;
    AlsSettings als{};
    int patience = 5;             // stop after this many ranks without a new minimum; 0 = try all
    double tie_tolerance = 1e-12; // losses within tol * |X_fit|^2 of the minimum count as tied
};

struct RankSelectionResult {
    int selected_rank = 0;
    std::vector<int> candidate_ranks;   // ranks actually evaluated, in order
    std::vector<double> heldout_losses; // aligned with candidate_ranks
    std::uint64_t mask_seed = 0;
};

inline std::vector<int> default_rank_candidates(Eigen::Index rows, Eigen::Index cols) {
    const int top = static_cast<int>(std::min<Eigen::Index>(100, std::min(rows, cols) - 1));
    std::vector<int> out;
    for (int l = 1; l <= top; ++l) out.push_back(l);
    return out;
}

/// Boolean mask over the RP*G entries with exactly round(fraction * N) entries set.
inline std::vector<bool> random_mask(std::size_t entries, double fraction, std::uint64_t seed) {
    std::vector<std::size_t> idx(entries);
    for (std::size_t i = 0; i < entries; ++i) idx[i] = i;
    Rng rng(seed, "rank_mask");
    rng.shuffle(idx);
    auto marked = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(entries)));
    marked = std::clamp<std::size_t>(marked, 1, entries - 1);
    std::vector<bool> mask(entries, false);
    for (std::size_t i = 0; i < marked; ++i) mask[idx[i]] = true;
    return mask;
}

inline RankSelectionResult select_rank(const MeasurementTensor& x, const RankSelectSettings& cfg = {}) {
    const Matrix xm = reshape_to_matrix(x);
    const Eigen::Index n = xm.rows(), m = xm.cols();
    if (!(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0))
        throw std::invalid_argument("select_rank: holdout_fraction must lie in (0, 1)");
    std::vector<int> cands = cfg.candidates.empty() ? default_rank_candidates(n, m) : cfg.candidates;
    if (cands.empty()) throw std::invalid_argument("select_rank: no feasible candidate ranks");
    for (int c : cands)
        if (c < 1 || c >= std::min(n, m))
            throw std::invalid_argument("select_rank: candidate rank " + std::to_string(c) +
                                        " must lie in [1, min(RP, G)) = [1, " + std::to_string(std::min(n, m)) + ")");

    const std::vector<bool> mask = random_mask(static_cast<std::size_t>(n * m), cfg.holdout_fraction, cfg.seed);
    std::vector<bool> fit(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i)
        fit[i] = cfg.orientation == MaskOrientation::fit_on_large ? !mask[i] : mask[i];

    double fit_norm = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < m; ++j)
            if (fit[static_cast<std::size_t>(i * m + j)]) fit_norm += xm(i, j) * xm(i, j);
    const double tie = cfg.tie_tolerance * fit_norm;

    RankSelectionResult res;
    res.mask_seed = cfg.seed;
    double best = std::numeric_limits<double>::infinity();
    int since_best = 0;
    for (int rank : cands) {
        const AlsResult als = als_complete(xm, fit, rank, cfg.als);
        double held = 0.0;
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < m; ++j)
                if (!fit[static_cast<std::size_t>(i * m + j)]) {
                    const double e = xm(i, j) - als.row_factors.row(i).dot(als.col_factors.row(j));
                    held += e * e;
                }
        res.candidate_ranks.push_back(rank);
        res.heldout_losses.push_back(held);
        if (held < best - tie) {
            best = held;
            since_best = 0;
        } else if (++since_best >= cfg.patience && cfg.patience > 0) {
            break;
        }
        best = std::min(best, held);
    }
    for (std::size_t i = 0; i < res.heldout_losses.size(); ++i)
        if (res.heldout_losses[i] <= best + tie && (res.selected_rank == 0 || res.candidate_ranks[i] < res.selected_rank))
            res.selected_rank = res.candidate_ranks[i];
    return res;
}

}  // namespace kronsmooth
