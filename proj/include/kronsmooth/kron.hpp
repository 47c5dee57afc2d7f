#pragma once

#include "kronsmooth/types.hpp"

#include <string>

namespace kronsmooth {

/// Copy of the RP x G view (row r*P + p).
inline Matrix reshape_to_matrix(const MeasurementTensor& x) { return x.matrix_view(); }

inline MeasurementTensor reshape_to_tensor(const Matrix& m, std::size_t replicates) {
    if (replicates == 0 || m.rows() % static_cast<Eigen::Index>(replicates) != 0)
        throw std::invalid_argument("reshape_to_tensor: row count is not a multiple of the replicate count");
    MeasurementTensor out(replicates, static_cast<std::size_t>(m.rows()) / replicates,
                          static_cast<std::size_t>(m.cols()));
    out.matrix_view() = m;
    return out;
}

/// (A (x) B) x without forming the product. x is indexed i*n + j with i over A's axis.
inline Vector kron_matvec(const Matrix& a, const Matrix& b, const Vector& x) {
    if (a.rows() != a.cols() || b.rows() != b.cols())
        throw std::invalid_argument("kron_matvec: factors must be square");
    const Eigen::Index m = a.rows(), n = b.rows();
    if (x.size() != m * n)
        throw std::invalid_argument("kron_matvec: vector length " + std::to_string(x.size()) + " != " +
                                    std::to_string(m) + "*" + std::to_string(n));
    Eigen::Map<const RowMajorMatrix> xm(x.data(), m, n);
    RowMajorMatrix y = a * xm * b.transpose();
    return Eigen::Map<const Vector>(y.data(), m * n);
}

/// Dense A (x) B; used by tests and small oracles only.
inline Matrix kron_dense(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j)
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
}

inline Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// Inverse of an SPD matrix through a Cholesky factorization.
inline Matrix spd_inverse(const Matrix& m, int component = -1) {
    Eigen::LLT<Matrix> llt(symmetrized(m));
    if (llt.info() != Eigen::Success) {
        std::string where = component >= 0 ? " (component " + std::to_string(component) + ")" : "";
        throw NotPositiveDefinite("matrix is not positive definite" + where, component);
    }
    Matrix inv = llt.solve(Matrix::Identity(m.rows(), m.cols()));
    return symmetrized(inv);
}

/// Block-wise inverse: (sum_k Xi_k (x) e_k e_k^T)^-1 = sum_k Xi_k^-1 (x) e_k e_k^T.
inline BlockKroneckerMatrix block_kron_inverse(const BlockKroneckerMatrix& s) {
    BlockKroneckerMatrix out;
    out.blocks.reserve(s.blocks.size());
    for (std::size_t k = 0; k < s.blocks.size(); ++k) {
        const Matrix& b = s.blocks[k];
        if (b.rows() != b.cols() || b.rows() != s.block_size())
            throw std::invalid_argument("block_kron_inverse: blocks must be square and equal-sized");
        out.blocks.push_back(spd_inverse(b, static_cast<int>(k)));
    }
    return out;
}

}  // namespace kronsmooth
