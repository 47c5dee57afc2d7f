#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace kronsmooth;

namespace {

DiagModelParams random_params(Eigen::Index p, Eigen::Index g, Eigen::Index h, LengthscaleMode mode, Rng& rng) {
    DiagModelParams m;
    m.embedding = {rng.normal_matrix(p, h)};
    m.kernel.mode = mode;
    m.kernel.sigma = (0.5 + rng.normal_matrix(p, 1).array().abs()).matrix();
    m.kernel.alpha = mode == LengthscaleMode::single ? Vector::Constant(1, 0.3 + rng.uniform())
                                                      : Vector((0.3 + rng.normal_matrix(h, 1).array().abs()).matrix());
    m.mu = 0.3 * rng.normal_matrix(p, g);
    m.lambda_noise = (0.2 + rng.normal_matrix(p, 1).array().abs()).matrix();
    return m;
}

MeasurementTensor random_tensor(std::size_t r, std::size_t p, std::size_t g, Rng& rng) {
    MeasurementTensor x(r, p, g);
    for (double& v : x.data()) v = rng.normal();
    return x;
}

/// theta_g ~ N(mu_g, K), replicates add diag(lambda) noise.
MeasurementTensor sample_diag(const DiagModelParams& m, std::size_t replicates, Rng& rng) {
    const Matrix k = se_kernel(m.embedding, m.kernel);
    const Matrix lk = Eigen::LLT<Matrix>(k).matrixL();
    const Eigen::Index p = m.mu.rows(), g = m.mu.cols();
    const Matrix theta = m.mu + lk * rng.normal_matrix(p, g);
    MeasurementTensor x(replicates, static_cast<std::size_t>(p), static_cast<std::size_t>(g));
    for (std::size_t r = 0; r < replicates; ++r)
        x.set_replicate(r, theta + m.lambda_noise.cwiseSqrt().asDiagonal() * rng.normal_matrix(p, g));
    return x;
}

}  // namespace

TEST(PosteriorMeanDiag, ScalarShrinkageWithIdentityKernel) {
    // Embedding points far apart: K is exactly the identity.
    DiagModelParams m;
    m.embedding = {100.0 * Matrix::Identity(3, 3)};
    m.kernel.sigma = Vector::Ones(3);
    m.kernel.jitter = 0.0;
    m.mu = Matrix::Zero(3, 4);
    m.lambda_noise = Vector::Ones(3);
    Rng rng(1, "diag");
    const MeasurementTensor x = random_tensor(1, 3, 4, rng);
    EXPECT_EQ(se_kernel(m.embedding, m.kernel), Matrix::Identity(3, 3));
    EXPECT_LE(oracle::inf_norm(posterior_mean_diag(x, m) - x.replicate(0) / 2.0), 1e-15);
}

TEST(PosteriorMeanDiag, NoiselessLimitReturnsReplicateMean) {
    Rng rng(2, "diag");
    DiagModelParams m = random_params(4, 3, 2, LengthscaleMode::single, rng);
    m.lambda_noise = Vector::Constant(4, 1e-12);
    const MeasurementTensor x = random_tensor(2, 4, 3, rng);
    EXPECT_LE(oracle::inf_norm(posterior_mean_diag(x, m) - replicate_mean(x)), 1e-6);
}

TEST(PosteriorMeanDiag, MatchesDenseConditioning) {
    Rng rng(3, "diag");
    for (int trial = 0; trial < 5; ++trial) {
        const DiagModelParams m = random_params(4, 3, 2, trial % 2 ? LengthscaleMode::ard : LengthscaleMode::single, rng);
        const MeasurementTensor x = random_tensor(2, 4, 3, rng);
        const oracle::DenseDiag d = oracle::dense_diag(m, 2);
        const oracle::Conditional c = oracle::condition(d.mean_theta, d.mean_x, d.cov_theta, d.cov_theta_x, d.cov_x, oracle::flat(x));
        const Matrix got = posterior_mean_diag(x, m);
        for (Eigen::Index p = 0; p < 4; ++p)
            for (Eigen::Index g = 0; g < 3; ++g) EXPECT_NEAR(got(p, g), c.mean(p * 3 + g), 1e-8);
    }
}

TEST(PosteriorMeanDiag, OneDimensionalShrinkageLiesBetween) {
    DiagModelParams m;
    m.embedding = {Matrix::Zero(1, 1)};
    m.kernel.sigma = Vector::Constant(1, 1.5);
    m.kernel.jitter = 0.0;
    m.mu = Matrix::Constant(1, 1, 0.5);
    m.lambda_noise = Vector::Constant(1, 2.0);
    MeasurementTensor x(2, 1, 1);
    x(0, 0, 0) = 3.0;
    x(1, 0, 0) = 4.0;
    const double got = posterior_mean_diag(x, m)(0, 0);
    // Conjugate normal: mu + k/(k + lambda/R) (xbar - mu).
    const double expect = 0.5 + 2.25 / (2.25 + 1.0) * (3.5 - 0.5);
    EXPECT_NEAR(got, expect, 1e-14);
    EXPECT_GT(got, 0.5);
    EXPECT_LT(got, 3.5);
}

TEST(PosteriorMeanDiag, ApproachesMeanAsReplicatesGrow) {
    Rng rng(4, "diag");
    const DiagModelParams m = random_params(3, 2, 2, LengthscaleMode::single, rng);
    const Matrix base = rng.normal_matrix(3, 2);
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t r : {1u, 10u, 1000u}) {
        MeasurementTensor x(r, 3, 2);
        for (std::size_t i = 0; i < r; ++i) x.set_replicate(i, base);
        const double gap = (posterior_mean_diag(x, m) - base).norm();
        EXPECT_LT(gap, prev);
        prev = gap;
    }
    EXPECT_LT(prev, 1e-2);
}

TEST(PosteriorMeanDiag, LinearInReplicateMean) {
    Rng rng(5, "diag");
    DiagModelParams m = random_params(4, 3, 2, LengthscaleMode::single, rng);
    m.mu.setZero();
    const MeasurementTensor a = random_tensor(2, 4, 3, rng), b = random_tensor(2, 4, 3, rng);
    MeasurementTensor c(2, 4, 3);
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] = 2.0 * a.data()[i] - 3.0 * b.data()[i];
    EXPECT_LE(oracle::inf_norm(posterior_mean_diag(c, m) - 2.0 * posterior_mean_diag(a, m) + 3.0 * posterior_mean_diag(b, m)), 1e-12);
}

TEST(MarginalLoglikDiag, OneDimensionalDensity) {
    DiagModelParams m;
    m.embedding = {Matrix::Zero(1, 1)};
    m.kernel.sigma = Vector::Ones(1);
    m.kernel.jitter = 0.0;
    m.mu = Matrix::Zero(1, 1);
    m.lambda_noise = Vector::Ones(1);
    const MeasurementTensor x(1, 1, 1, 0.0);
    EXPECT_NEAR(marginal_loglik_diag(x, m), -1.2655121234846454, 1e-14);
}

TEST(MarginalLoglikDiag, MatchesDenseLogDensity) {
    Rng rng(6, "diag");
    for (int trial = 0; trial < 6; ++trial) {
        const std::size_t r = 1 + static_cast<std::size_t>(trial % 3);
        const DiagModelParams m = random_params(4, 3, 2, trial % 2 ? LengthscaleMode::ard : LengthscaleMode::single, rng);
        const MeasurementTensor x = random_tensor(r, 4, 3, rng);
        const oracle::DenseDiag d = oracle::dense_diag(m, r);
        EXPECT_NEAR(marginal_loglik_diag(x, m), oracle::gaussian_logpdf(oracle::flat(x), d.mean_x, d.cov_x), 1e-8);
    }
}

TEST(MarginalLoglikDiag, InvariantToReplicateOrder) {
    Rng rng(7, "diag");
    const DiagModelParams m = random_params(4, 5, 2, LengthscaleMode::single, rng);
    const MeasurementTensor x = random_tensor(3, 4, 5, rng);
    const std::vector<std::size_t> perm{2, 0, 1};
    EXPECT_NEAR(marginal_loglik_diag(x, m), marginal_loglik_diag(x.select(perm), m), 1e-10);
}

TEST(MarginalLoglikDiag, SumsOverGenes) {
    Rng rng(8, "diag");
    const DiagModelParams m = random_params(3, 4, 2, LengthscaleMode::single, rng);
    const MeasurementTensor x = random_tensor(2, 3, 4, rng);
    double sum = 0.0;
    for (std::size_t g = 0; g < 4; ++g) {
        MeasurementTensor xg(2, 3, 1);
        for (std::size_t r = 0; r < 2; ++r)
            for (std::size_t p = 0; p < 3; ++p) xg(r, p, 0) = x(r, p, g);
        DiagModelParams mg = m;
        mg.mu = m.mu.col(static_cast<Eigen::Index>(g));
        sum += marginal_loglik_diag(xg, mg);
    }
    EXPECT_NEAR(marginal_loglik_diag(x, m), sum, 1e-10);
}

TEST(MarginalLoglikDiag, GradientMatchesFiniteDifferences) {
    Rng rng(9, "diag");
    for (int trial = 0; trial < 5; ++trial) {
        const LengthscaleMode mode = trial % 2 ? LengthscaleMode::ard : LengthscaleMode::single;
        const DiagModelParams m = random_params(5, 6, 3, mode, rng);
        const MeasurementTensor x = random_tensor(2, 5, 6, rng);
        const Vector analytic = marginal_loglik_diag_gradient(x, m);
        const Vector t0 = detail::pack_diag(m);
        const Vector numeric = oracle::central_difference(
            [&](const Vector& t) {
                DiagModelParams mt = m;
                detail::unpack_diag(t, mt);
                return marginal_loglik_diag(x, mt);
            },
            t0);
        EXPECT_LE(oracle::max_relative_error(analytic, numeric), 1e-4) << "trial " << trial;
    }
}

TEST(MarginalLoglikDiag, ValidatesShapes) {
    Rng rng(10, "diag");
    DiagModelParams m = random_params(3, 2, 2, LengthscaleMode::single, rng);
    EXPECT_THROW(marginal_loglik_diag(random_tensor(1, 4, 2, rng), m), std::invalid_argument);
    m.lambda_noise(0) = -1;
    EXPECT_THROW(marginal_loglik_diag(random_tensor(1, 3, 2, rng), m), std::invalid_argument);
}

TEST(FitDiag, AscendsFromInitialization) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed, "fitdiag");
        const DiagModelParams truth = random_params(8, 40, 2, LengthscaleMode::ard, rng);
        const MeasurementTensor x = sample_diag(truth, 2, rng);
        const DiagFitResult fit = fit_diag(x, truth.embedding);
        EXPECT_GE(fit.final_loglik, fit.initial_loglik);
        EXPECT_NEAR(fit.final_loglik, marginal_loglik_diag(x, fit.params), 1e-8 * std::abs(fit.final_loglik));
        for (std::size_t i = 1; i < fit.trace.size(); ++i) EXPECT_GE(fit.trace[i], fit.trace[i - 1]);
    }
}

TEST(FitDiag, RecoversLengthscale) {
    std::vector<double> ratios;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed, "recover");
        DiagModelParams truth;
        truth.embedding = {rng.normal_matrix(20, 2)};
        truth.kernel.sigma = Vector::Ones(20);
        truth.kernel.alpha = Vector::Constant(1, 0.7);
        truth.mu = Matrix::Zero(20, 500);
        truth.lambda_noise = Vector::Constant(20, 0.5);
        const MeasurementTensor x = sample_diag(truth, 2, rng);
        DiagFitSettings cfg;
        cfg.mode = LengthscaleMode::single;
        const DiagFitResult fit = fit_diag(x, truth.embedding, cfg);
        ratios.push_back(fit.params.kernel.alpha(0) / 0.7);
    }
    std::sort(ratios.begin(), ratios.end());
    const double median = 0.5 * (ratios[4] + ratios[5]);
    EXPECT_GT(median, 0.5);
    EXPECT_LT(median, 2.0);
}

TEST(FitDiag, RelevanceOrdering) {
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed, "relevance");
        DiagModelParams truth;
        truth.embedding = {rng.normal_matrix(20, 3)};
        truth.kernel.mode = LengthscaleMode::ard;
        truth.kernel.sigma = Vector::Ones(20);
        truth.kernel.alpha = Vector(3);
        truth.kernel.alpha << 3.0, 0.3, 0.3;  // coordinate 1 separates treatments completely
        truth.mu = Matrix::Zero(20, 200);
        truth.lambda_noise = Vector::Constant(20, 0.5);
        const MeasurementTensor x = sample_diag(truth, 2, rng);
        const Vector a = ard_report(fit_diag(x, truth.embedding).params);
        Eigen::Index best;
        a.maxCoeff(&best);
        wins += best == 0;
    }
    EXPECT_GE(wins, 8);
}

TEST(ArdReport, RoundTripAndPermutation) {
    DiagModelParams m;
    m.kernel.mode = LengthscaleMode::ard;
    m.kernel.alpha = Vector(3);
    m.kernel.alpha << 0.25, 0.31, 0.63;
    EXPECT_EQ(ard_report(m), m.kernel.alpha);
    m.kernel.mode = LengthscaleMode::single;
    EXPECT_THROW(ard_report(m), std::invalid_argument);

    Rng rng(11, "perm");
    DiagModelParams truth = random_params(10, 60, 3, LengthscaleMode::ard, rng);
    const MeasurementTensor x = sample_diag(truth, 2, rng);
    const Vector a = ard_report(fit_diag(x, truth.embedding).params);
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(3);
    perm.indices() << 2, 0, 1;
    const EmbeddingMatrix permuted{truth.embedding.data * perm};
    const Vector b = ard_report(fit_diag(x, permuted).params);
    const Vector expect = perm.transpose() * a;
    for (Eigen::Index i = 0; i < 3; ++i) EXPECT_NEAR(b(i), expect(i), 1e-3 * expect(i));
}

TEST(FitDiag, DimensionMismatchNamesShapes) {
    Rng rng(12, "mismatch");
    const MeasurementTensor x = random_tensor(2, 4, 3, rng);
    try {
        fit_diag(x, EmbeddingMatrix{Matrix::Zero(5, 2)});
        FAIL();
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find('5'), std::string::npos);
        EXPECT_NE(msg.find('4'), std::string::npos);
    }
}

TEST(FitDiag, OneHotEmbeddingsGiveOneCoefficientPerColumn) {
    Rng rng(13, "onehot");
    Matrix onehot = Matrix::Zero(9, 3);
    for (Eigen::Index i = 0; i < 9; ++i) onehot(i, i % 3) = 1.0;
    const MeasurementTensor x = random_tensor(2, 9, 30, rng);
    EXPECT_EQ(ard_report(fit_diag(x, EmbeddingMatrix{onehot}).params).size(), 3);
}
