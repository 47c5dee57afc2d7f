#pragma once

// Smoother with identity gene covariance and per-treatment diagonal noise:
//   theta_g ~ N(mu_g, K),  x_g^(r) | theta_g ~ N(theta_g, diag(lambda)).

#include "kronsmooth/kernels.hpp"
#include "kronsmooth/kron.hpp"
#include "kronsmooth/optim.hpp"

namespace kronsmooth {

struct DiagModelParams {
    SeKernelParams kernel;
    EmbeddingMatrix embedding;
    ParamMatrix mu;
    Vector lambda_noise;

    void validate(const MeasurementTensor& x) const {
        kernel.validate();
        const auto p = static_cast<Eigen::Index>(x.treatments());
        const auto g = static_cast<Eigen::Index>(x.genes());
        if (embedding.treatments() != p || kernel.sigma.size() != p || lambda_noise.size() != p)
            throw std::invalid_argument("DiagModelParams: treatment dimension mismatch with data");
        if (mu.rows() != p || mu.cols() != g) throw std::invalid_argument("DiagModelParams: mu shape mismatch");
        if ((lambda_noise.array() <= 0.0).any()) throw std::invalid_argument("DiagModelParams: lambda must be positive");
    }
};

/// Across-replicate mean, P x G.
inline Matrix replicate_mean(const MeasurementTensor& x) {
    const auto p = static_cast<Eigen::Index>(x.treatments());
    Matrix mean = Matrix::Zero(p, static_cast<Eigen::Index>(x.genes()));
    const auto view = x.matrix_view();
    for (std::size_t r = 0; r < x.replicates(); ++r) mean += view.middleRows(static_cast<Eigen::Index>(r) * p, p);
    return mean / static_cast<double>(x.replicates());
}

inline ParamMatrix posterior_mean_diag(const MeasurementTensor& x, const DiagModelParams& params) {
    params.validate(x);
    const Matrix k = se_kernel(params.embedding, params.kernel);
    Matrix c = k;
    c.diagonal() += params.lambda_noise / static_cast<double>(x.replicates());
    Eigen::LLT<Matrix> llt(c);
    if (llt.info() != Eigen::Success)
        throw NotPositiveDefinite("posterior_mean_diag: K + diag(lambda)/R is not positive definite");
    const Matrix resid = replicate_mean(x) - params.mu;
    return params.mu + k * llt.solve(resid);
}

namespace detail {

// Sufficient statistics of the replicated data in the replicate-mean / within-replicate basis.
struct DiagStats {
    std::size_t r = 0, p = 0, g = 0;
    Matrix a0;        // R (xbar - mu)(xbar - mu)^T
    Vector within;    // per treatment: sum_{r,g} (x_rpg - xbar_pg)^2

    DiagStats(const MeasurementTensor& x, const Matrix& mu) : r(x.replicates()), p(x.treatments()), g(x.genes()) {
        const Matrix xbar = replicate_mean(x);
        const Matrix d = xbar - mu;
        a0 = static_cast<double>(r) * d * d.transpose();
        within = Vector::Zero(static_cast<Eigen::Index>(p));
        const auto view = x.matrix_view();
        const auto pp = static_cast<Eigen::Index>(p);
        for (std::size_t rr = 0; rr < r; ++rr)
            within += (view.middleRows(static_cast<Eigen::Index>(rr) * pp, pp) - xbar).rowwise().squaredNorm();
    }
};

struct DiagLayout {
    Eigen::Index p, n_alpha;
    [[nodiscard]] Eigen::Index size() const { return 2 * p + n_alpha; }
};

inline Vector pack_diag(const DiagModelParams& m) {
    const Eigen::Index p = m.kernel.sigma.size(), na = m.kernel.alpha.size();
    Vector t(2 * p + na);
    t << m.kernel.sigma.array().log().matrix(), m.kernel.alpha.array().log().matrix(),
        m.lambda_noise.array().log().matrix();
    return t;
}

inline void unpack_diag(const Vector& t, DiagModelParams& m) {
    const Eigen::Index p = m.kernel.sigma.size(), na = m.kernel.alpha.size();
    m.kernel.sigma = t.head(p).array().exp();
    m.kernel.alpha = t.segment(p, na).array().exp();
    m.lambda_noise = t.tail(p).array().exp();
}

// Log-likelihood and gradient w.r.t. (log sigma, log alpha, log lambda).
inline double diag_loglik_grad(const DiagStats& st, const KernelGeometry& geo, const DiagModelParams& m,
                               Vector* grad) {
    constexpr double log2pi = 1.8378770664093454836;
    const double r = static_cast<double>(st.r), g = static_cast<double>(st.g);
    const Matrix k = se_kernel(m.embedding, m.kernel);
    Matrix mm = r * k;
    mm.diagonal() += m.lambda_noise;
    Eigen::LLT<Matrix> llt(mm);
    if (llt.info() != Eigen::Success) throw NotPositiveDefinite("diag marginal covariance is not positive definite");
    const Matrix minv = llt.solve(Matrix::Identity(mm.rows(), mm.cols()));
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const double quad = minv.cwiseProduct(st.a0).sum();
    const double within = (st.within.array() / m.lambda_noise.array()).sum();
    const double value = -0.5 * (g * r * static_cast<double>(st.p) * log2pi + g * logdet +
                                 g * (r - 1.0) * m.lambda_noise.array().log().sum() + quad + within);
    if (grad) {
        const Matrix w0 = minv * st.a0 * minv - g * minv;
        const Eigen::Index p = k.rows();
        grad->resize(2 * p + m.kernel.alpha.size());
        const Matrix wk = w0.cwiseProduct(k);
        grad->head(p) = r * wk.rowwise().sum();
        grad->segment(p, m.kernel.alpha.size()) = 0.5 * r * geo.contract_dlog_alpha(w0, k, m.kernel.alpha);
        for (Eigen::Index i = 0; i < p; ++i) {
            const double lam = m.lambda_noise(i);
            (*grad)(p + m.kernel.alpha.size() + i) =
                lam * 0.5 * (w0(i, i) - g * (r - 1.0) / lam + st.within(i) / (lam * lam));
        }
    }
    return value;
}

}  // namespace detail

/// Exact marginal log-likelihood over theta, summed over genes.
inline double marginal_loglik_diag(const MeasurementTensor& x, const DiagModelParams& params) {
    params.validate(x);
    const detail::DiagStats st(x, params.mu);
    const KernelGeometry geo(params.embedding, params.kernel.mode);
    const double v = detail::diag_loglik_grad(st, geo, params, nullptr);
    if (!std::isfinite(v)) throw NonFiniteError("marginal_loglik_diag: non-finite value");
    return v;
}

/// Gradient of marginal_loglik_diag w.r.t. (log sigma, log alpha, log lambda), in that order.
inline Vector marginal_loglik_diag_gradient(const MeasurementTensor& x, const DiagModelParams& params) {
    params.validate(x);
    const detail::DiagStats st(x, params.mu);
    const KernelGeometry geo(params.embedding, params.kernel.mode);
    Vector g;
    detail::diag_loglik_grad(st, geo, params, &g);
    return g;
}

struct DiagFitSettings {
    LengthscaleMode mode = LengthscaleMode::ard;
    double jitter = 1e-6;
    AscentSettings ascent{};
};

struct DiagFitResult {
    DiagModelParams params;
    double initial_loglik = 0.0;
    double final_loglik = 0.0;
    int iterations = 0;
    bool converged = false;
    double gradient_norm = 0.0;
    std::vector<double> trace;
};

/// Method-of-moments starting point: sigma from the per-treatment spread,
/// alpha = 1, lambda from replicate differences (R >= 2) or total variance.
inline DiagModelParams initial_diag_params(const MeasurementTensor& x, const EmbeddingMatrix& emb,
                                           const DiagFitSettings& cfg) {
    const auto p = static_cast<Eigen::Index>(x.treatments());
    const auto g = static_cast<Eigen::Index>(x.genes());
    DiagModelParams m;
    m.embedding = emb;
    m.mu = ParamMatrix::Zero(p, g);
    m.kernel.mode = cfg.mode;
    m.kernel.jitter = cfg.jitter;
    m.kernel.alpha = Vector::Ones(cfg.mode == LengthscaleMode::single ? 1 : emb.dims());
    m.kernel.sigma.resize(p);
    m.lambda_noise.resize(p);
    const auto view = x.matrix_view();
    const double floor = 1e-6;
    for (Eigen::Index i = 0; i < p; ++i) {
        double sum = 0.0, sq = 0.0;
        const double n = static_cast<double>(x.replicates() * x.genes());
        for (std::size_t r = 0; r < x.replicates(); ++r)
            for (Eigen::Index j = 0; j < g; ++j) {
                const double v = view(static_cast<Eigen::Index>(r) * p + i, j);
                sum += v;
                sq += v * v;
            }
        const double var = std::max(floor, (sq - sum * sum / n) / std::max(1.0, n - 1.0));
        m.kernel.sigma(i) = std::sqrt(var);
        if (x.replicates() >= 2) {
            double dsum = 0.0, dsq = 0.0;
            for (Eigen::Index j = 0; j < g; ++j) {
                const double d = (view(i, j) - view(p + i, j)) / std::sqrt(2.0);
                dsum += d;
                dsq += d * d;
            }
            const double gn = static_cast<double>(g);
            m.lambda_noise(i) = std::max(floor, (dsq - dsum * dsum / gn) / std::max(1.0, gn - 1.0));
        } else {
            m.lambda_noise(i) = var;
        }
    }
    return m;
}

inline DiagFitResult fit_diag(const MeasurementTensor& x, const EmbeddingMatrix& emb, const DiagFitSettings& cfg = {}) {
    if (emb.treatments() != static_cast<Eigen::Index>(x.treatments()))
        throw std::invalid_argument("fit_diag: embeddings have " + std::to_string(emb.treatments()) +
                                    " rows but data has " + std::to_string(x.treatments()) + " treatments");
    DiagModelParams model = initial_diag_params(x, emb, cfg);
    const detail::DiagStats st(x, model.mu);
    const KernelGeometry geo(emb, cfg.mode);
    DiagModelParams work = model;
    int evals = 0;
    const Objective obj = [&](const Vector& t, Vector& grad) {
        ++evals;
        detail::unpack_diag(t, work);
        try {
            return detail::diag_loglik_grad(st, geo, work, &grad);
        } catch (const NotPositiveDefinite&) {
            grad.setZero(t.size());
            return -std::numeric_limits<double>::infinity();
        }
    };
    AscentResult ar;
    try {
        ar = maximize(obj, detail::pack_diag(model), cfg.ascent);
    } catch (const NonFiniteError& e) {
        throw NonFiniteError(std::string("fit_diag: ") + e.what());
    }
    detail::unpack_diag(ar.x, model);
    DiagFitResult res;
    res.params = model;
    res.initial_loglik = ar.initial_value;
    res.final_loglik = ar.value;
    res.iterations = ar.iterations;
    res.converged = ar.converged;
    res.gradient_norm = ar.gradient_norm;
    res.trace = std::move(ar.trace);
    return res;
}

inline Vector ard_report(const DiagModelParams& params) {
    if (params.kernel.mode != LengthscaleMode::ard)
        throw std::invalid_argument("ard_report: model uses a single lengthscale");
    return params.kernel.alpha;
}

}  // namespace kronsmooth
