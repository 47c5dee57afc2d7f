#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace kronsmooth;

TEST(Maximize, ConcaveQuadratic) {
    Vector c(3);
    c << 0.5, -1.0, 2.0;
    const Objective f = [&](const Vector& x, Vector& g) {
        g = -(x - c);
        g(1) *= 10.0;
        return -0.5 * (x - c).squaredNorm() - 4.5 * (x(1) - c(1)) * (x(1) - c(1));
    };
    AscentSettings s;
    s.relative_tolerance = 0;
    s.gradient_tolerance = 1e-10;
    const AscentResult r = maximize(f, Vector::Zero(3), s);
    EXPECT_TRUE(r.converged);
    EXPECT_LE((r.x - c).cwiseAbs().maxCoeff(), 1e-8);
    for (std::size_t i = 1; i < r.trace.size(); ++i) EXPECT_GE(r.trace[i], r.trace[i - 1]);
    EXPECT_EQ(r.trace.front(), r.initial_value);
    EXPECT_EQ(r.trace.back(), r.value);
}

TEST(Maximize, Rosenbrock) {
    const Objective f = [](const Vector& x, Vector& g) {
        const double a = 1 - x(0), b = x(1) - x(0) * x(0);
        g.resize(2);
        g(0) = 2 * a + 400 * x(0) * b;
        g(1) = -200 * b;
        return -(a * a + 100 * b * b);
    };
    AscentSettings s;
    s.relative_tolerance = 0;
    s.gradient_tolerance = 1e-10;
    const AscentResult r = maximize(f, Vector::Constant(2, -1.2), s);
    EXPECT_NEAR(r.x(0), 1.0, 1e-6);
    EXPECT_NEAR(r.x(1), 1.0, 1e-6);
}

TEST(Maximize, RespectsBox) {
    // Increasing in x: the optimum sits on the upper bound.
    const Objective f = [](const Vector& x, Vector& g) {
        g = Vector::Ones(1);
        return x(0);
    };
    AscentSettings s;
    s.lower_bound = -1;
    s.upper_bound = 2;
    const AscentResult r = maximize(f, Vector::Zero(1), s);
    EXPECT_DOUBLE_EQ(r.x(0), 2.0);
    EXPECT_TRUE(r.converged);
    EXPECT_DOUBLE_EQ(r.gradient_norm, 0.0);
}

TEST(Maximize, NonFiniteStartThrows) {
    const Objective f = [](const Vector&, Vector& g) {
        g = Vector::Zero(1);
        return std::numeric_limits<double>::quiet_NaN();
    };
    EXPECT_THROW(maximize(f, Vector::Zero(1)), NonFiniteError);
}

TEST(Maximize, BacktracksAwayFromInfeasibleRegion) {
    // -inf beyond x = 1; maximum of -(x-3)^2 restricted to x < 1 approaches the wall.
    const Objective f = [](const Vector& x, Vector& g) {
        g.resize(1);
        if (x(0) >= 1.0) {
            g(0) = 0;
            return -std::numeric_limits<double>::infinity();
        }
        g(0) = -2 * (x(0) - 3);
        return -(x(0) - 3) * (x(0) - 3);
    };
    const AscentResult r = maximize(f, Vector::Zero(1));
    EXPECT_LT(r.x(0), 1.0);
    EXPECT_GT(r.x(0), 0.9);
    EXPECT_TRUE(std::isfinite(r.value));
}

TEST(GoldenSection, FindsParabolaPeak) {
    EXPECT_NEAR(oracle::golden_section_max([](double t) { return -(t - 0.3) * (t - 0.3); }, -5, 5), 0.3, 1e-9);
}
