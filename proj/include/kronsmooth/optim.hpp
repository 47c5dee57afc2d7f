#pragma once

#include "kronsmooth/types.hpp"

#include <deque>
#include <string>

namespace kronsmooth {

struct AscentSettings {
    int max_iterations = 2000;
    double relative_tolerance = 1e-8;  // on |f_new - f_old| / max(1, |f|)
    double gradient_tolerance = 1e-6;  // on max |g_i|, relative to max(1, |f|)
    int history = 8;
    double lower_bound = std::log(1e-12);
    double upper_bound = std::log(1e12);
};

struct AscentResult {
    Vector x;
    double value = 0.0;
    double initial_value = 0.0;
    double gradient_norm = 0.0;
    int iterations = 0;
    bool converged = false;
    std::vector<double> trace;
};

/// Objective returns f(x) and writes the gradient into `grad`.
using Objective = std::function<double(const Vector& x, Vector& grad)>;

/// Monotone L-BFGS ascent with Armijo backtracking and box clamping.
/// Every accepted iterate has f >= the previous one.
inline AscentResult maximize(const Objective& f, Vector x0, const AscentSettings& s = {}) {
    auto clamp = [&](Vector v) { return v.cwiseMax(s.lower_bound).cwiseMin(s.upper_bound).eval(); };
    AscentResult res;
    res.x = clamp(std::move(x0));
    Vector g(res.x.size());
    double fx = f(res.x, g);
    if (!std::isfinite(fx) || !g.allFinite())
        throw NonFiniteError("maximize: non-finite objective at iteration 0");
    res.initial_value = fx;
    res.trace.push_back(fx);

    std::deque<Vector> s_hist, y_hist;
    auto scale = [&](double v) { return std::max(1.0, std::abs(v)); };

    Vector g_new(res.x.size());
    for (int it = 1; it <= s.max_iterations; ++it) {
        // Components pinned at a bound with the gradient pushing outward are inactive.
        Vector g_eff = g;
        for (Eigen::Index i = 0; i < g.size(); ++i)
            if ((res.x(i) <= s.lower_bound && g(i) < 0) || (res.x(i) >= s.upper_bound && g(i) > 0)) g_eff(i) = 0;
        res.gradient_norm = g_eff.size() ? g_eff.cwiseAbs().maxCoeff() : 0.0;
        if (res.gradient_norm <= s.gradient_tolerance * scale(fx)) {
            res.converged = true;
            break;
        }

        // Two-loop recursion on the negated objective, expressed as an ascent direction.
        Vector q = g_eff;
        const std::size_t m = s_hist.size();
        std::vector<double> a(m), rho(m);
        for (std::size_t j = m; j-- > 0;) {
            rho[j] = 1.0 / y_hist[j].dot(s_hist[j]);
            a[j] = rho[j] * s_hist[j].dot(q);
            q -= a[j] * y_hist[j];
        }
        if (m > 0) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
        for (std::size_t j = 0; j < m; ++j) {
            const double b = rho[j] * y_hist[j].dot(q);
            q += (a[j] - b) * s_hist[j];
        }
        Vector dir = q;
        if (dir.dot(g_eff) <= 0.0 || !dir.allFinite()) {
            dir = g_eff;
            s_hist.clear();
            y_hist.clear();
        }
        double step = m == 0 ? std::min(1.0, 1.0 / std::max(1e-12, dir.cwiseAbs().maxCoeff())) : 1.0;

        bool accepted = false;
        Vector x_new;
        double f_new = fx;
        for (int bt = 0; bt < 60; ++bt) {
            x_new = clamp(res.x + step * dir);
            f_new = f(x_new, g_new);
            if (std::isfinite(f_new) && g_new.allFinite() && f_new >= fx + 1e-4 * g_eff.dot(x_new - res.x)) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted || f_new < fx) {
            res.converged = true;  // no ascent direction left at working precision
            break;
        }
        const Vector sv = x_new - res.x;
        const Vector yv = g - g_new;  // curvature of -f
        if (sv.dot(yv) > 1e-12 * sv.norm() * yv.norm()) {
            s_hist.push_back(sv);
            y_hist.push_back(yv);
            if (static_cast<int>(s_hist.size()) > s.history) {
                s_hist.pop_front();
                y_hist.pop_front();
            }
        }
        const double change = std::abs(f_new - fx) / scale(fx);
        res.x = x_new;
        fx = f_new;
        g = g_new;
        res.iterations = it;
        res.trace.push_back(fx);
        if (change < s.relative_tolerance) {
            res.converged = true;
            break;
        }
    }
    res.value = fx;
    double gmax = 0.0;
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        const bool pinned = (res.x(i) <= s.lower_bound && g(i) < 0) || (res.x(i) >= s.upper_bound && g(i) > 0);
        if (!pinned) gmax = std::max(gmax, std::abs(g(i)));
    }
    res.gradient_norm = gmax;
    return res;
}

}  // namespace kronsmooth
