#pragma once

// Portable random streams.
//
// Each stream is an std::mt19937_64 engine whose 64-bit seed is
//   splitmix64(splitmix64(seed) ^ fnv1a64(tag)) ^ splitmix64(stream + 1)
// Uniforms take the top 53 bits of one engine output; normals use the
// Box-Muller transform on two uniforms (both outputs are used, cosine first).
// Matrices are filled row by row. None of the std distributions are used,
// so draws are identical across standard library implementations.

#include "kronsmooth/types.hpp"

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace kronsmooth {

constexpr std::uint64_t splitmix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

constexpr std::uint64_t stream_key(std::uint64_t seed, std::string_view tag, std::uint64_t stream) {
    return splitmix64(splitmix64(seed) ^ fnv1a64(tag)) ^ splitmix64(stream + 1);
}

class Rng {
public:
    Rng(std::uint64_t seed, std::string_view tag, std::uint64_t stream = 0) : engine_(stream_key(seed, tag, stream)) {}

    std::uint64_t bits() { return engine_(); }

    /// [0, 1)
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double rad = std::sqrt(-2.0 * std::log(u1));
        constexpr double two_pi = 6.283185307179586476925;
        spare_ = rad * std::sin(two_pi * u2);
        has_spare_ = true;
        return rad * std::cos(two_pi * u2);
    }

    /// Uniform integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t v;
        do v = engine_();
        while (v >= limit);
        return v % n;
    }

    Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols) {
        Matrix m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal();
        return m;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Random G x L matrix with orthonormal columns: QR of a Gaussian matrix with
/// the signs fixed so that R has a positive diagonal.
inline Matrix random_orthonormal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    if (cols > rows) throw std::invalid_argument("random_orthonormal: more columns than rows");
    const Matrix a = rng.normal_matrix(rows, cols);
    Eigen::HouseholderQR<Matrix> qr(a);
    Matrix q = qr.householderQ() * Matrix::Identity(rows, cols);
    const Matrix r = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < cols; ++j)
        if (r(j, j) < 0) q.col(j) *= -1.0;
    return q;
}

}  // namespace kronsmooth
