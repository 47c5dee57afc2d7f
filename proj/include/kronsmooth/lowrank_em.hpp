#pragma once

// Low-rank smoother. For each component k (columns of the orthonormal G x L
// gene loadings V):
//   Ztilde_k ~ N(m_k 1_P, psi_k K)
//   Z^(r)_k | Ztilde ~ N(Ztilde_k, lambda_k I_P)
//   X^(r) | Z^(r) ~ N(Z^(r) V^T, tau2 I)
// The stacked replicate loadings of one component (length RP, index r*P + p)
// therefore have prior covariance lambda_k I + psi_k (1 1^T (x) K).

#include "kronsmooth/kernels.hpp"
#include "kronsmooth/kron.hpp"
#include "kronsmooth/optim.hpp"
#include "kronsmooth/parallel.hpp"
#include "kronsmooth/rank_select.hpp"

#include <optional>

namespace kronsmooth {

inline constexpr double kPositiveFloor = 1e-12;

struct LowRankModel {
    int rank = 0;
    Vector mu_prime;  // P*L, index p*L + k
    SeKernelParams kernel;
    EmbeddingMatrix embedding;
    Vector psi;
    Vector lambda_rep;
    double tau2 = 1.0;
    Matrix v;  // G x L, orthonormal columns

    [[nodiscard]] Eigen::Index treatments() const { return embedding.treatments(); }
    [[nodiscard]] Matrix kernel_matrix() const { return se_kernel(embedding, kernel); }

    /// Prior mean of the treatment loadings as a P x L matrix.
    [[nodiscard]] Matrix mean_matrix() const {
        return Eigen::Map<const RowMajorMatrix>(mu_prime.data(), treatments(), rank);
    }

    void validate(const MeasurementTensor& x) const {
        const auto p = static_cast<Eigen::Index>(x.treatments());
        const auto g = static_cast<Eigen::Index>(x.genes());
        if (rank < 1) throw std::invalid_argument("LowRankModel: rank must be >= 1");
        if (embedding.treatments() != p)
            throw std::invalid_argument("LowRankModel: embedding has " + std::to_string(embedding.treatments()) +
                                        " rows, data has " + std::to_string(p) + " treatments");
        if (v.rows() != g || v.cols() != rank) throw std::invalid_argument("LowRankModel: V shape mismatch");
        if (mu_prime.size() != p * rank || psi.size() != rank || lambda_rep.size() != rank)
            throw std::invalid_argument("LowRankModel: parameter length mismatch");
        if ((psi.array() <= 0).any() || (lambda_rep.array() <= 0).any() || !(tau2 > 0))
            throw std::invalid_argument("LowRankModel: variances must be positive");
        kernel.validate();
    }
};

/// Broadcast a per-component constant into the P*L mean layout.
inline Vector broadcast_mean(const Vector& per_component, Eigen::Index treatments) {
    const Eigen::Index l = per_component.size();
    Vector out(treatments * l);
    for (Eigen::Index p = 0; p < treatments; ++p) out.segment(p * l, l) = per_component;
    return out;
}

struct PosteriorMoments {
    std::size_t replicates = 0;
    Matrix mean;  // RP x L, row r*P + p
    BlockKroneckerMatrix precision_blocks;
    BlockKroneckerMatrix covariance_blocks;

    /// Stacked mean, index (r*P + p)*L + k.
    [[nodiscard]] Vector flat_mean() const {
        RowMajorMatrix rm = mean;
        return Eigen::Map<const Vector>(rm.data(), rm.size());
    }
};

struct Loadings {
    std::size_t replicates = 0;
    Matrix z_hat;  // RP x L
    Matrix v;      // G x L
};

/// Rank-L truncated SVD of the RP x G view: z_hat = U diag(e), V.
inline Loadings init_loadings(const MeasurementTensor& x, int rank) {
    const Matrix xm = reshape_to_matrix(x);
    if (rank < 1 || rank > std::min(xm.rows(), xm.cols()))
        throw std::invalid_argument("init_loadings: rank " + std::to_string(rank) + " exceeds min(RP, G)");
    Eigen::BDCSVD<Matrix> svd(xm, Eigen::ComputeThinU | Eigen::ComputeThinV);
    Loadings out;
    out.replicates = x.replicates();
    out.z_hat = svd.matrixU().leftCols(rank) * svd.singularValues().head(rank).asDiagonal();
    out.v = svd.matrixV().leftCols(rank);
    return out;
}

/// Average over replicates of Z^(r) V^T.
inline ParamMatrix pca_from_loadings(const Loadings& ld) {
    const auto p = ld.z_hat.rows() / static_cast<Eigen::Index>(ld.replicates);
    Matrix zbar = Matrix::Zero(p, ld.z_hat.cols());
    for (std::size_t r = 0; r < ld.replicates; ++r) zbar += ld.z_hat.middleRows(static_cast<Eigen::Index>(r) * p, p);
    zbar /= static_cast<double>(ld.replicates);
    return zbar * ld.v.transpose();
}

inline ParamMatrix pca_estimate(const MeasurementTensor& x, int rank) { return pca_from_loadings(init_loadings(x, rank)); }

// ---------------------------------------------------------------------------
// Prior objective over the replicate loadings.

/// Per-component statistics of a Gaussian belief N(mean, cov) over the RP-vector
/// Z_k, expressed in the replicate-mean / within-replicate basis.
struct ComponentStats {
    Vector rep_mean;     // P: average over replicates of the mean
    Matrix mean_block;   // P x P: (1/R) sum_{r,s} cov[r, s]
    double rest = 0.0;   // tr(cov) - tr(mean_block) + sum_r |mean_r - rep_mean|^2
};

struct PriorStats {
    std::size_t replicates = 0;
    Eigen::Index treatments = 0;
    std::vector<ComponentStats> comps;
};

/// `cov` may be null (point estimate, as for the initial SVD loadings).
inline PriorStats make_prior_stats(const Matrix& mean, std::size_t replicates, const BlockKroneckerMatrix* cov) {
    PriorStats st;
    st.replicates = replicates;
    st.treatments = mean.rows() / static_cast<Eigen::Index>(replicates);
    const Eigen::Index p = st.treatments;
    const double r = static_cast<double>(replicates);
    for (Eigen::Index k = 0; k < mean.cols(); ++k) {
        ComponentStats c;
        c.rep_mean = Vector::Zero(p);
        for (std::size_t i = 0; i < replicates; ++i) c.rep_mean += mean.col(k).segment(static_cast<Eigen::Index>(i) * p, p);
        c.rep_mean /= r;
        c.mean_block = Matrix::Zero(p, p);
        for (std::size_t i = 0; i < replicates; ++i)
            c.rest += (mean.col(k).segment(static_cast<Eigen::Index>(i) * p, p) - c.rep_mean).squaredNorm();
        if (cov) {
            const Matrix& s = cov->blocks[static_cast<std::size_t>(k)];
            for (std::size_t a = 0; a < replicates; ++a)
                for (std::size_t b = 0; b < replicates; ++b)
                    c.mean_block += s.block(static_cast<Eigen::Index>(a) * p, static_cast<Eigen::Index>(b) * p, p, p);
            c.mean_block /= r;
            c.rest += s.trace() - c.mean_block.trace();
        }
        st.comps.push_back(std::move(c));
    }
    return st;
}

struct PriorParams {
    Vector mu_prime;  // P*L
    SeKernelParams kernel;
    Vector psi;
    Vector lambda_rep;
};

struct PriorEvaluation {
    double value = 0.0;
    Vector component_values;
    Vector means;     // per-component constant prior mean used
    Vector gradient;  // (log alpha, log psi, log lambda)
};

/// sum_k E[log N(Z_k; m_k 1, lambda_k I + psi_k 11^T (x) K)] under the beliefs in `st`.
/// When `fixed_means` is null the per-component mean m_k is set to its maximiser.
/// `extra_noise` is added to every lambda_k (used for the marginal likelihood).
inline PriorEvaluation evaluate_prior(const PriorStats& st, const KernelGeometry& geo, const EmbeddingMatrix& emb,
                                      const SeKernelParams& kernel, const Vector& psi, const Vector& lambda,
                                      const Vector* fixed_means, bool want_grad, double extra_noise = 0.0) {
    constexpr double log2pi = 1.8378770664093454836;
    const Eigen::Index p = st.treatments;
    const auto l = static_cast<Eigen::Index>(st.comps.size());
    const double r = static_cast<double>(st.replicates);
    const Matrix k = se_kernel(emb, kernel);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(k);
    if (eig.info() != Eigen::Success) throw NonFiniteError("evaluate_prior: kernel eigendecomposition failed");
    const Matrix& q = eig.eigenvectors();
    const Vector& kev = eig.eigenvalues();
    const Vector q1 = q.transpose() * Vector::Ones(p);

    PriorEvaluation out;
    out.component_values.resize(l);
    out.means.resize(l);
    std::vector<Matrix> wsum(static_cast<std::size_t>(l));
    Vector dpsi(l), dlam(l);
    parallel_for(static_cast<std::size_t>(l), [&](std::size_t kk) {
        const auto ki = static_cast<Eigen::Index>(kk);
        const ComponentStats& c = st.comps[kk];
        const double lam = lambda(ki) + extra_noise;
        const double ps = psi(ki);
        const Vector e = (lam + r * ps * kev.array()).matrix();
        if ((e.array() <= 0.0).any() || !(lam > 0.0))
            throw NotPositiveDefinite("prior covariance is not positive definite", static_cast<int>(kk));
        const Vector einv = e.cwiseInverse();
        const Vector qm = q.transpose() * c.rep_mean;
        double m;
        if (fixed_means) {
            m = (*fixed_means)(ki);
        } else {
            m = q1.cwiseProduct(einv).dot(qm) / q1.cwiseProduct(einv).dot(q1);
        }
        const Vector qd = qm - m * q1;
        const Matrix qsq = q.transpose() * c.mean_block * q;
        // A0 in the eigenbasis: Q^T S00 Q + R qd qd^T
        const double tr_term = qsq.diagonal().cwiseProduct(einv).sum() + r * qd.cwiseProduct(qd).dot(einv);
        const double value = -0.5 * (r * static_cast<double>(p) * log2pi + e.array().log().sum() +
                                     static_cast<double>(p) * (r - 1.0) * std::log(lam) + tr_term + c.rest / lam);
        out.component_values(ki) = value;
        out.means(ki) = m;
        if (want_grad) {
            Matrix a0 = qsq + r * qd * qd.transpose();
            // W0 = M^-1 A0 M^-1 - M^-1, in the eigenbasis then rotated back.
            Matrix w = einv.asDiagonal() * a0 * einv.asDiagonal();
            w.diagonal() -= einv;
            const Matrix w0 = q * w * q.transpose();
            dlam(ki) = 0.5 * lambda(ki) *
                       (w.trace() - static_cast<double>(p) * (r - 1.0) / lam + c.rest / (lam * lam));
            dpsi(ki) = 0.5 * ps * r * w0.cwiseProduct(k).sum();
            wsum[kk] = (0.5 * r * ps) * w0;
        }
    });
    out.value = out.component_values.sum();
    if (want_grad) {
        Matrix wtot = Matrix::Zero(p, p);
        for (const auto& w : wsum) wtot += w;
        const Vector dalpha = geo.contract_dlog_alpha(wtot, k, kernel.alpha);
        out.gradient.resize(dalpha.size() + 2 * l);
        out.gradient << dalpha, dpsi, dlam;
    }
    return out;
}

struct PriorFitSettings {
    AscentSettings ascent{.max_iterations = 200, .relative_tolerance = 1e-10, .gradient_tolerance = 1e-8};
};

struct PriorFitResult {
    PriorParams params;
    double initial_objective = 0.0;
    double final_objective = 0.0;
    int iterations = 0;
};

namespace detail {

inline Vector pack_prior(const SeKernelParams& kernel, const Vector& psi, const Vector& lambda) {
    Vector t(kernel.alpha.size() + psi.size() + lambda.size());
    t << kernel.alpha.array().log().matrix(), psi.array().log().matrix(), lambda.array().log().matrix();
    return t;
}

inline void unpack_prior(const Vector& t, SeKernelParams& kernel, Vector& psi, Vector& lambda) {
    const Eigen::Index na = kernel.alpha.size(), l = psi.size();
    kernel.alpha = t.head(na).array().exp();
    psi = t.segment(na, l).array().exp();
    lambda = t.tail(l).array().exp();
}

/// Maximises the prior objective from the given starting point. The returned
/// objective is at least the objective at `start` (with its own means).
inline PriorFitResult fit_prior(const PriorStats& st, const EmbeddingMatrix& emb, const PriorParams& start,
                                const PriorFitSettings& cfg) {
    const KernelGeometry geo(emb, start.kernel.mode);
    const auto l = static_cast<Eigen::Index>(st.comps.size());
    Vector start_means(l);
    for (Eigen::Index k = 0; k < l; ++k) start_means(k) = start.mu_prime(k);  // constant over treatments
    const double incoming =
        evaluate_prior(st, geo, emb, start.kernel, start.psi, start.lambda_rep, &start_means, false).value;

    SeKernelParams kernel = start.kernel;
    Vector psi = start.psi, lambda = start.lambda_rep;
    const Objective obj = [&](const Vector& t, Vector& grad) {
        unpack_prior(t, kernel, psi, lambda);
        try {
            PriorEvaluation ev = evaluate_prior(st, geo, emb, kernel, psi, lambda, nullptr, true);
            grad = std::move(ev.gradient);
            return ev.value;
        } catch (const NotPositiveDefinite&) {
            grad.setZero(t.size());
            return -std::numeric_limits<double>::infinity();
        }
    };
    AscentResult ar = maximize(obj, pack_prior(start.kernel, start.psi, start.lambda_rep), cfg.ascent);
    unpack_prior(ar.x, kernel, psi, lambda);
    const PriorEvaluation final_ev = evaluate_prior(st, geo, emb, kernel, psi, lambda, nullptr, false);

    PriorFitResult res;
    res.initial_objective = incoming;
    res.iterations = ar.iterations;
    if (final_ev.value >= incoming) {
        res.params = {broadcast_mean(final_ev.means, st.treatments), kernel, psi, lambda};
        res.final_objective = final_ev.value;
    } else {
        res.params = start;
        res.final_objective = incoming;
    }
    if (!std::isfinite(res.final_objective)) throw NonFiniteError("prior fit: non-finite objective");
    return res;
}

}  // namespace detail

struct InitPriorSettings {
    LengthscaleMode mode = LengthscaleMode::single;
    double jitter = 1e-6;
    PriorFitSettings fit{};
};

/// Moment-based starting values for (alpha, psi, lambda) from point loadings.
inline PriorParams initial_prior_guess(const Matrix& z_hat, std::size_t replicates, const EmbeddingMatrix& emb,
                                       const InitPriorSettings& cfg) {
    const Eigen::Index p = z_hat.rows() / static_cast<Eigen::Index>(replicates);
    const Eigen::Index l = z_hat.cols();
    const double r = static_cast<double>(replicates);
    PriorParams g;
    g.kernel.mode = cfg.mode;
    g.kernel.jitter = cfg.jitter;
    g.kernel.sigma = Vector::Ones(p);
    g.kernel.alpha = default_alpha(emb, cfg.mode);
    g.psi.resize(l);
    g.lambda_rep.resize(l);
    Vector means(l);
    for (Eigen::Index k = 0; k < l; ++k) {
        const Vector col = z_hat.col(k);
        const double mean = col.mean();
        const double tot = std::max(kPositiveFloor, (col.array() - mean).square().sum() / std::max(1.0, double(col.size()) - 1.0));
        means(k) = mean;
        if (replicates >= 2) {
            Vector rep_mean = Vector::Zero(p);
            for (std::size_t i = 0; i < replicates; ++i) rep_mean += col.segment(static_cast<Eigen::Index>(i) * p, p);
            rep_mean /= r;
            double within = 0.0;
            for (std::size_t i = 0; i < replicates; ++i)
                within += (col.segment(static_cast<Eigen::Index>(i) * p, p) - rep_mean).squaredNorm();
            const double lam = std::max(kPositiveFloor, within / (static_cast<double>(p) * (r - 1.0)));
            const double between =
                (rep_mean.array() - rep_mean.mean()).square().sum() / std::max(1.0, double(p) - 1.0);
            g.lambda_rep(k) = std::max(lam, 1e-3 * tot);
            g.psi(k) = std::max(between - lam / r, 0.1 * tot);
        } else {
            g.lambda_rep(k) = 0.5 * tot;
            g.psi(k) = 0.5 * tot;
        }
    }
    g.mu_prime = broadcast_mean(means, p);
    return g;
}

/// Fits (mu', K, psi, lambda) to point loadings by maximising their prior density.
inline PriorFitResult init_prior(const Matrix& z_hat, std::size_t replicates, const EmbeddingMatrix& emb,
                                 const InitPriorSettings& cfg = {}) {
    if (z_hat.rows() != emb.treatments() * static_cast<Eigen::Index>(replicates))
        throw std::invalid_argument("init_prior: loadings rows != R * embedding rows");
    const PriorStats st = make_prior_stats(z_hat, replicates, nullptr);
    return detail::fit_prior(st, emb, initial_prior_guess(z_hat, replicates, emb, cfg), cfg.fit);
}

/// log p(z_hat) under the given prior parameters (mean taken from mu_prime).
inline double prior_log_density(const Matrix& z_hat, std::size_t replicates, const EmbeddingMatrix& emb,
                                const PriorParams& prm) {
    const PriorStats st = make_prior_stats(z_hat, replicates, nullptr);
    const KernelGeometry geo(emb, prm.kernel.mode);
    Vector means(prm.psi.size());
    for (Eigen::Index k = 0; k < means.size(); ++k) means(k) = prm.mu_prime(k);
    return evaluate_prior(st, geo, emb, prm.kernel, prm.psi, prm.lambda_rep, &means, false).value;
}

/// Gradient of prior_log_density w.r.t. (log alpha, log psi, log lambda) at the
/// profiled mean; equals the fixed-mean gradient when mu_prime is already optimal.
inline Vector prior_log_density_gradient(const Matrix& z_hat, std::size_t replicates, const EmbeddingMatrix& emb,
                                         const PriorParams& prm) {
    const PriorStats st = make_prior_stats(z_hat, replicates, nullptr);
    const KernelGeometry geo(emb, prm.kernel.mode);
    Vector means(prm.psi.size());
    for (Eigen::Index k = 0; k < means.size(); ++k) means(k) = prm.mu_prime(k);
    return evaluate_prior(st, geo, emb, prm.kernel, prm.psi, prm.lambda_rep, &means, true).gradient;
}

inline PriorParams prior_params_of(const LowRankModel& m) { return {m.mu_prime, m.kernel, m.psi, m.lambda_rep}; }

// ---------------------------------------------------------------------------
// EM steps.

/// Prior covariance lambda I + psi (1 1^T (x) K) of one component's RP-vector.
inline Matrix component_prior_covariance(const Matrix& k, std::size_t replicates, double psi, double lambda) {
    const Eigen::Index p = k.rows();
    const auto r = static_cast<Eigen::Index>(replicates);
    Matrix c(r * p, r * p);
    for (Eigen::Index a = 0; a < r; ++a)
        for (Eigen::Index b = 0; b < r; ++b) c.block(a * p, b * p, p, p) = psi * k;
    c.diagonal().array() += lambda;
    return c;
}

inline PosteriorMoments e_step(const MeasurementTensor& x, const LowRankModel& model) {
    model.validate(x);
    const auto p = static_cast<Eigen::Index>(x.treatments());
    const auto l = static_cast<Eigen::Index>(model.rank);
    const auto rp = static_cast<Eigen::Index>(x.replicates()) * p;
    const Matrix y = x.matrix_view() * model.v;  // RP x L
    const Matrix k = model.kernel_matrix();
    const Matrix mean_pl = model.mean_matrix();
    const double inv_tau2 = 1.0 / model.tau2;

    PosteriorMoments out;
    out.replicates = x.replicates();
    out.precision_blocks.blocks.resize(static_cast<std::size_t>(l));
    parallel_for(static_cast<std::size_t>(l), [&](std::size_t kk) {
        const auto ki = static_cast<Eigen::Index>(kk);
        const Matrix c = component_prior_covariance(k, x.replicates(), model.psi(ki), model.lambda_rep(ki));
        Matrix xi = spd_inverse(c, static_cast<int>(kk));
        xi.diagonal().array() += inv_tau2;
        out.precision_blocks.blocks[kk] = std::move(xi);
    });
    out.covariance_blocks = block_kron_inverse(out.precision_blocks);
    out.mean.resize(rp, l);
    for (Eigen::Index ki = 0; ki < l; ++ki) {
        Vector prior(rp);
        for (std::size_t r = 0; r < x.replicates(); ++r) prior.segment(static_cast<Eigen::Index>(r) * p, p) = mean_pl.col(ki);
        out.mean.col(ki) = prior + inv_tau2 * (out.covariance_blocks.blocks[static_cast<std::size_t>(ki)] * (y.col(ki) - prior));
    }
    return out;
}

struct MStepPriorSettings {
    PriorFitSettings fit{.ascent = {.max_iterations = 50, .relative_tolerance = 1e-10, .gradient_tolerance = 1e-8}};
};

/// Expected prior log-likelihood under the posterior moments, at the model's own parameters.
inline double expected_prior_loglik(const PosteriorMoments& mom, const LowRankModel& model) {
    const PriorStats st = make_prior_stats(mom.mean, mom.replicates, &mom.covariance_blocks);
    const KernelGeometry geo(model.embedding, model.kernel.mode);
    Vector means(model.rank);
    for (Eigen::Index k = 0; k < model.rank; ++k) means(k) = model.mu_prime(k);
    return evaluate_prior(st, geo, model.embedding, model.kernel, model.psi, model.lambda_rep, &means, false).value;
}

inline PriorFitResult m_step_prior(const PosteriorMoments& mom, const LowRankModel& model,
                                   const MStepPriorSettings& cfg = {}) {
    if (mom.mean.cols() != model.rank || mom.mean.rows() != model.treatments() * static_cast<Eigen::Index>(mom.replicates))
        throw std::invalid_argument("m_step_prior: moments do not match model dimensions");
    const PriorStats st = make_prior_stats(mom.mean, mom.replicates, &mom.covariance_blocks);
    return detail::fit_prior(st, model.embedding, prior_params_of(model), cfg.fit);
}

/// Orthogonal Procrustes update: V = U W^T for the SVD U S W^T of X^T mu_hat.
inline Matrix m_step_v(const MeasurementTensor& x, const PosteriorMoments& mom) {
    const Matrix m = x.matrix_view().transpose() * mom.mean;  // G x L
    Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    return svd.matrixU() * svd.matrixV().transpose();
}

/// Procrustes objective sum (X - mu_hat V^T)^2.
inline double procrustes_objective(const MeasurementTensor& x, const PosteriorMoments& mom, const Matrix& v) {
    return (x.matrix_view() - mom.mean * v.transpose()).squaredNorm();
}

inline double m_step_tau(const MeasurementTensor& x, const PosteriorMoments& mom, const Matrix& v) {
    const double n = static_cast<double>(x.size());
    const double t = (procrustes_objective(x, mom, v) + mom.covariance_blocks.trace()) / n;
    if (!(t > kPositiveFloor)) {
        warn("tau^2 update hit the floor 1e-12 (exact fit)");
        return kPositiveFloor;
    }
    return t;
}

/// Exact log p(X) with all latent loadings integrated out.
inline double marginal_loglik(const MeasurementTensor& x, const LowRankModel& model) {
    model.validate(x);
    constexpr double log2pi = 1.8378770664093454836;
    const Matrix y = x.matrix_view() * model.v;
    const double perp = (x.matrix_view() - y * model.v.transpose()).squaredNorm();
    const PriorStats st = make_prior_stats(y, x.replicates(), nullptr);
    const KernelGeometry geo(model.embedding, model.kernel.mode);
    Vector means(model.rank);
    for (Eigen::Index k = 0; k < model.rank; ++k) means(k) = model.mu_prime(k);
    const double in_span =
        evaluate_prior(st, geo, model.embedding, model.kernel, model.psi, model.lambda_rep, &means, false, model.tau2).value;
    const double rp = static_cast<double>(x.replicates() * x.treatments());
    const double off = static_cast<double>(x.genes()) - model.rank;
    const double v = in_span - 0.5 * (rp * off * (log2pi + std::log(model.tau2)) + perp / model.tau2);
    if (!std::isfinite(v)) throw NonFiniteError("marginal_loglik: non-finite value");
    return v;
}

/// E[theta | X] = E[Ztilde | X] V^T. Given Ztilde, the projected replicates
/// y_k^(r) = (X^(r) V)_k are N(Ztilde_k, (lambda_k + tau2) I), so each component
/// is a GP regression on the replicate average.
inline ParamMatrix smoothed_loadings_and_estimate(const MeasurementTensor& x, const LowRankModel& model,
                                                  Matrix* loadings_out) {
    model.validate(x);
    const auto p = static_cast<Eigen::Index>(x.treatments());
    const Matrix y = x.matrix_view() * model.v;
    Matrix ybar = Matrix::Zero(p, model.rank);
    for (std::size_t r = 0; r < x.replicates(); ++r) ybar += y.middleRows(static_cast<Eigen::Index>(r) * p, p);
    ybar /= static_cast<double>(x.replicates());
    const Matrix k = model.kernel_matrix();
    const Matrix mean_pl = model.mean_matrix();
    Matrix z(p, model.rank);
    parallel_for(static_cast<std::size_t>(model.rank), [&](std::size_t kk) {
        const auto ki = static_cast<Eigen::Index>(kk);
        Matrix c = model.psi(ki) * k;
        c.diagonal().array() += (model.lambda_rep(ki) + model.tau2) / static_cast<double>(x.replicates());
        Eigen::LLT<Matrix> llt(c);
        if (llt.info() != Eigen::Success)
            throw NotPositiveDefinite("smoothed_estimate: conditioning matrix is singular", static_cast<int>(kk));
        z.col(ki) = mean_pl.col(ki) + model.psi(ki) * (k * llt.solve(ybar.col(ki) - mean_pl.col(ki)));
    });
    if (loadings_out) *loadings_out = z;
    return z * model.v.transpose();
}

inline ParamMatrix smoothed_estimate(const MeasurementTensor& x, const LowRankModel& model) {
    return smoothed_loadings_and_estimate(x, model, nullptr);
}

// ---------------------------------------------------------------------------

struct EmSettings {
    std::optional<int> rank;  // skip rank selection when set
    RankSelectSettings rank_select{};
    InitPriorSettings init{};
    MStepPriorSettings m_step{};
    int max_iterations = 200;
    double tolerance = 1e-6;  // relative change of the marginal log-likelihood
};

struct EmFitResult {
    LowRankModel model;
    std::optional<RankSelectionResult> rank_selection;
    Loadings initial_loadings;
    std::vector<double> loglik_trace;  // entry 0 is after initialisation
    int iterations = 0;
    bool converged = false;

    /// The estimator obtained by stopping right after the SVD initialisation.
    [[nodiscard]] ParamMatrix early_stop_estimate() const { return pca_from_loadings(initial_loadings); }
};

inline EmFitResult fit_em(const MeasurementTensor& x, const EmbeddingMatrix& emb, const EmSettings& cfg = {}) {
    if (emb.treatments() != static_cast<Eigen::Index>(x.treatments()))
        throw std::invalid_argument("fit_em: embeddings are " + std::to_string(emb.treatments()) + " x " +
                                    std::to_string(emb.dims()) + " but data has " + std::to_string(x.treatments()) +
                                    " treatments");
    EmFitResult res;
    int rank = 0;
    if (cfg.rank) {
        rank = *cfg.rank;
    } else {
        res.rank_selection = select_rank(x, cfg.rank_select);
        rank = res.rank_selection->selected_rank;
    }
    res.initial_loadings = init_loadings(x, rank);
    const PriorFitResult prior = init_prior(res.initial_loadings.z_hat, x.replicates(), emb, cfg.init);

    LowRankModel& m = res.model;
    m.rank = rank;
    m.embedding = emb;
    m.mu_prime = prior.params.mu_prime;
    m.kernel = prior.params.kernel;
    m.psi = prior.params.psi;
    m.lambda_rep = prior.params.lambda_rep;
    m.v = res.initial_loadings.v;
    const double resid = (x.matrix_view() - res.initial_loadings.z_hat * m.v.transpose()).squaredNorm();
    const double dof = static_cast<double>(x.replicates() * x.treatments()) *
                       std::max(1.0, static_cast<double>(x.genes()) - rank);
    m.tau2 = std::max(kPositiveFloor, resid / dof);

    double ll = marginal_loglik(x, m);
    res.loglik_trace.push_back(ll);
    for (int it = 1; it <= cfg.max_iterations; ++it) {
        const PosteriorMoments mom = e_step(x, m);
        const PriorFitResult upd = m_step_prior(mom, m, cfg.m_step);
        m.mu_prime = upd.params.mu_prime;
        m.kernel = upd.params.kernel;
        m.psi = upd.params.psi;
        m.lambda_rep = upd.params.lambda_rep;
        m.v = m_step_v(x, mom);
        m.tau2 = m_step_tau(x, mom, m.v);
        const double next = marginal_loglik(x, m);
        res.loglik_trace.push_back(next);
        res.iterations = it;
        const double change = std::abs(next - ll) / std::max(1.0, std::abs(next));
        ll = next;
        if (change < cfg.tolerance) {
            res.converged = true;
            break;
        }
    }
    return res;
}

}  // namespace kronsmooth
