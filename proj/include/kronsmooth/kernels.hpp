#pragma once

#include "kronsmooth/types.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace kronsmooth {

enum class LengthscaleMode { single, ard };

inline std::string to_string(LengthscaleMode m) { return m == LengthscaleMode::single ? "single" : "ard"; }

inline LengthscaleMode lengthscale_mode_from_string(const std::string& s) {
    if (s == "single") return LengthscaleMode::single;
    if (s == "ard") return LengthscaleMode::ard;
    throw std::invalid_argument("unknown lengthscale mode '" + s + "' (expected single or ard)");
}

/// Squared-exponential kernel parameters. `alpha` has length 1 in single mode
/// and length H in ARD mode.
struct SeKernelParams {
    Vector sigma;
    LengthscaleMode mode = LengthscaleMode::single;
    Vector alpha = Vector::Ones(1);
    double jitter = 1e-6;

    void validate() const {
        if ((sigma.array() <= 0.0).any()) throw std::invalid_argument("SeKernelParams: sigma must be positive");
        if (alpha.size() == 0 || (alpha.array() <= 0.0).any())
            throw std::invalid_argument("SeKernelParams: alpha must be positive");
        if (mode == LengthscaleMode::single && alpha.size() != 1)
            throw std::invalid_argument("SeKernelParams: single mode needs exactly one alpha");
        if (!(jitter >= 0.0)) throw std::invalid_argument("SeKernelParams: jitter must be >= 0");
    }
};

/// P x H user-supplied embedding coordinates.
struct EmbeddingMatrix {
    Matrix data;

    [[nodiscard]] Eigen::Index treatments() const { return data.rows(); }
    [[nodiscard]] Eigen::Index dims() const { return data.cols(); }
};

inline EmbeddingMatrix rescale_embeddings(const EmbeddingMatrix& emb, const SeKernelParams& params) {
    if (params.mode == LengthscaleMode::single) {
        if (params.alpha.size() != 1) throw std::invalid_argument("rescale_embeddings: single mode needs one alpha");
        return {emb.data * params.alpha(0)};
    }
    if (params.alpha.size() != emb.dims())
        throw std::invalid_argument("rescale_embeddings: ARD alpha length " + std::to_string(params.alpha.size()) +
                                    " != embedding dimension " + std::to_string(emb.dims()));
    return {emb.data * params.alpha.asDiagonal()};
}

/// K_pq = sigma_p sigma_q exp(-|Y_p - Y_q|^2), Y the rescaled embeddings,
/// plus jitter * sigma_p^2 on the diagonal. Only the lower triangle is computed.
inline Matrix se_kernel(const EmbeddingMatrix& emb, const SeKernelParams& params) {
    const Eigen::Index p = emb.treatments();
    if (params.sigma.size() != p)
        throw std::invalid_argument("se_kernel: sigma length " + std::to_string(params.sigma.size()) +
                                    " != treatments " + std::to_string(p));
    const Matrix y = rescale_embeddings(emb, params).data;
    Matrix k(p, p);
    for (Eigen::Index i = 0; i < p; ++i) {
        k(i, i) = params.sigma(i) * params.sigma(i) * (1.0 + params.jitter);
        for (Eigen::Index j = 0; j < i; ++j) {
            const double d2 = (y.row(i) - y.row(j)).squaredNorm();
            if (!std::isfinite(d2)) throw NonFiniteError("se_kernel: non-finite embedding distance");
            k(i, j) = params.sigma(i) * params.sigma(j) * std::exp(-d2);
            k(j, i) = k(i, j);
        }
    }
    return k;
}

/// Pairwise squared differences of the unscaled embeddings, one P x P matrix
/// per lengthscale parameter (a single summed matrix in single mode).
struct KernelGeometry {
    std::vector<Matrix> sq_diffs;

    KernelGeometry(const EmbeddingMatrix& emb, LengthscaleMode mode) {
        const Eigen::Index p = emb.treatments();
        const Eigen::Index h = emb.dims();
        const Eigen::Index n = mode == LengthscaleMode::single ? 1 : h;
        sq_diffs.assign(static_cast<std::size_t>(n), Matrix::Zero(p, p));
        for (Eigen::Index c = 0; c < h; ++c) {
            Matrix& d = sq_diffs[static_cast<std::size_t>(mode == LengthscaleMode::single ? 0 : c)];
            for (Eigen::Index i = 0; i < p; ++i)
                for (Eigen::Index j = 0; j < i; ++j) {
                    const double diff = emb.data(i, c) - emb.data(j, c);
                    d(i, j) += diff * diff;
                    d(j, i) = d(i, j);
                }
        }
    }

    /// dK/dlog(alpha_i) given the kernel matrix already built with these alphas.
    [[nodiscard]] Matrix dkernel_dlog_alpha(const Matrix& k, const Vector& alpha, std::size_t i) const {
        const double a2 = alpha(static_cast<Eigen::Index>(i)) * alpha(static_cast<Eigen::Index>(i));
        Matrix out = (-2.0 * a2) * sq_diffs[i].cwiseProduct(k);
        out.diagonal().setZero();
        return out;
    }

    /// sum_{pq} W_pq dK_pq/dlog(alpha_i) for all i, without forming dK.
    [[nodiscard]] Vector contract_dlog_alpha(const Matrix& w, const Matrix& k, const Vector& alpha) const {
        Vector out(static_cast<Eigen::Index>(sq_diffs.size()));
        const Matrix wk = w.cwiseProduct(k);
        for (std::size_t i = 0; i < sq_diffs.size(); ++i) {
            const double a2 = alpha(static_cast<Eigen::Index>(i)) * alpha(static_cast<Eigen::Index>(i));
            out(static_cast<Eigen::Index>(i)) = -2.0 * a2 * wk.cwiseProduct(sq_diffs[i]).sum();
        }
        return out;
    }
};

/// alpha such that alpha^2 * median squared distance = 1 (per coordinate in ARD
/// mode, divided across the H coordinates). Falls back to 1 for degenerate geometry.
inline Vector default_alpha(const EmbeddingMatrix& emb, LengthscaleMode mode) {
    const KernelGeometry geo(emb, mode);
    const Eigen::Index p = emb.treatments();
    const double share = mode == LengthscaleMode::single ? 1.0 : static_cast<double>(emb.dims());
    Vector alpha(static_cast<Eigen::Index>(geo.sq_diffs.size()));
    for (std::size_t i = 0; i < geo.sq_diffs.size(); ++i) {
        std::vector<double> d;
        for (Eigen::Index a = 0; a < p; ++a)
            for (Eigen::Index b = 0; b < a; ++b)
                if (geo.sq_diffs[i](a, b) > 0.0) d.push_back(geo.sq_diffs[i](a, b));
        double a = 1.0;
        if (!d.empty()) {
            std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
            a = 1.0 / std::sqrt(share * d[d.size() / 2]);
        }
        alpha(static_cast<Eigen::Index>(i)) = a;
    }
    return alpha;
}

}  // namespace kronsmooth
