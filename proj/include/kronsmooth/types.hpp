#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <iostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kronsmooth {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// P x G matrix of treatment-by-gene effects (estimates, truths, prior means).
using ParamMatrix = Matrix;

/// Raised when a symmetric factorization fails. `component()` is the block index
/// when the failure is attributable to one block, otherwise -1.
class NotPositiveDefinite : public std::runtime_error {
public:
    NotPositiveDefinite(const std::string& what, int component = -1)
        : std::runtime_error(what), component_(component) {}
    [[nodiscard]] int component() const noexcept { return component_; }

private:
    int component_;
};

/// Raised when an objective or intermediate becomes NaN/inf.
class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using WarningSink = std::function<void(const std::string&)>;

inline WarningSink& warning_sink() {
    static WarningSink sink = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
    return sink;
}

inline void warn(const std::string& msg) {
    if (warning_sink()) warning_sink()(msg);
}

/// R x P x G array of per-replicate measurements, stored row-major over (r, p, g)
/// so that the RP x G view with row r*P + p aliases the same memory.
class MeasurementTensor {
public:
    MeasurementTensor() = default;

    MeasurementTensor(std::size_t replicates, std::size_t treatments, std::size_t genes, double fill = 0.0)
        : r_(replicates), p_(treatments), g_(genes), data_(replicates * treatments * genes, fill) {
        if (r_ == 0 || p_ == 0 || g_ == 0)
            throw std::invalid_argument("MeasurementTensor: all dimensions must be >= 1");
    }

    [[nodiscard]] std::size_t replicates() const noexcept { return r_; }
    [[nodiscard]] std::size_t treatments() const noexcept { return p_; }
    [[nodiscard]] std::size_t genes() const noexcept { return g_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t r, std::size_t p, std::size_t g) { return data_[(r * p_ + p) * g_ + g]; }
    double operator()(std::size_t r, std::size_t p, std::size_t g) const { return data_[(r * p_ + p) * g_ + g]; }

    [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
    [[nodiscard]] std::span<double> data() noexcept { return data_; }

    /// RP x G row-major view, row index r*P + p.
    [[nodiscard]] Eigen::Map<const RowMajorMatrix> matrix_view() const {
        return {data_.data(), static_cast<Eigen::Index>(r_ * p_), static_cast<Eigen::Index>(g_)};
    }
    [[nodiscard]] Eigen::Map<RowMajorMatrix> matrix_view() {
        return {data_.data(), static_cast<Eigen::Index>(r_ * p_), static_cast<Eigen::Index>(g_)};
    }

    /// P x G slice for one replicate.
    [[nodiscard]] Matrix replicate(std::size_t r) const {
        if (r >= r_) throw std::out_of_range("MeasurementTensor::replicate: index out of range");
        return matrix_view().middleRows(static_cast<Eigen::Index>(r * p_), static_cast<Eigen::Index>(p_));
    }

    void set_replicate(std::size_t r, const Matrix& slice) {
        if (r >= r_) throw std::out_of_range("MeasurementTensor::set_replicate: index out of range");
        if (slice.rows() != static_cast<Eigen::Index>(p_) || slice.cols() != static_cast<Eigen::Index>(g_))
            throw std::invalid_argument("MeasurementTensor::set_replicate: slice shape mismatch");
        matrix_view().middleRows(static_cast<Eigen::Index>(r * p_), static_cast<Eigen::Index>(p_)) = slice;
    }

    [[nodiscard]] bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    /// Replicates listed in `indices`, in that order.
    [[nodiscard]] MeasurementTensor select(std::span<const std::size_t> indices) const {
        if (indices.empty()) throw std::invalid_argument("MeasurementTensor::select: empty replicate set");
        MeasurementTensor out(indices.size(), p_, g_);
        for (std::size_t i = 0; i < indices.size(); ++i) out.set_replicate(i, replicate(indices[i]));
        return out;
    }

    friend bool operator==(const MeasurementTensor&, const MeasurementTensor&) = default;

private:
    std::size_t r_ = 0, p_ = 0, g_ = 0;
    std::vector<double> data_;
};

/// Sum_k blocks[k] (x) e_k e_k^T. Row index of the represented matrix is i*L + k,
/// with i indexing the block (replicate x treatment) axis and k the component.
struct BlockKroneckerMatrix {
    std::vector<Matrix> blocks;

    [[nodiscard]] std::size_t components() const noexcept { return blocks.size(); }
    [[nodiscard]] Eigen::Index block_size() const { return blocks.empty() ? 0 : blocks.front().rows(); }

    [[nodiscard]] Matrix dense() const {
        const Eigen::Index n = block_size();
        const auto l = static_cast<Eigen::Index>(blocks.size());
        Matrix out = Matrix::Zero(n * l, n * l);
        for (Eigen::Index k = 0; k < l; ++k)
            for (Eigen::Index i = 0; i < n; ++i)
                for (Eigen::Index j = 0; j < n; ++j) out(i * l + k, j * l + k) = blocks[k](i, j);
        return out;
    }

    [[nodiscard]] double trace() const {
        double t = 0.0;
        for (const auto& b : blocks) t += b.trace();
        return t;
    }
};

}  // namespace kronsmooth
