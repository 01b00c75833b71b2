#include "marketgan/factor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace marketgan::factor {
namespace {

CoefficientSet make_coeffs(std::vector<double> a, std::vector<std::vector<double>> b, std::vector<double> s) {
    CoefficientSet c;
    const auto N = static_cast<Eigen::Index>(a.size());
    const auto K = static_cast<Eigen::Index>(b.front().size());
    c.alpha = Eigen::Map<Vector>(a.data(), N);
    c.sigma = Eigen::Map<Vector>(s.data(), N);
    c.beta.resize(N, K);
    for (Eigen::Index i = 0; i < N; ++i) {
        for (Eigen::Index k = 0; k < K; ++k) c.beta(i, k) = b[i][k];
    }
    return c;
}

TEST(Ols, NoiselessFit) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n01;
    Matrix f(40, 1), r(40, 1);
    for (int t = 0; t < 40; ++t) {
        f(t, 0) = n01(rng);
        r(t, 0) = 2.0 * f(t, 0);
    }
    const auto c = ols(r, f);
    EXPECT_NEAR(c.beta(0, 0), 2.0, 1e-12);
    EXPECT_NEAR(c.alpha(0), 0.0, 1e-12);
    EXPECT_NEAR(c.sigma(0), 0.0, 1e-12);
}

TEST(Ols, ThreePointHandCase) {
    Matrix f(3, 1), r(3, 1);
    f << 1, 2, 3;
    r << 1, 2, 4;
    const auto c = ols(r, f);
    EXPECT_NEAR(c.alpha(0), -2.0 / 3.0, 1e-14);
    EXPECT_NEAR(c.beta(0, 0), 1.5, 1e-14);
    // residuals (1/6, -1/3, 1/6), one degree of freedom
    EXPECT_NEAR(c.sigma(0), std::sqrt(1.0 / 36 + 1.0 / 9 + 1.0 / 36), 1e-14);
}

TEST(Ols, ConstantFactorIsSingular) {
    Matrix f = Matrix::Constant(10, 1, 0.3);
    Matrix r = Matrix::Random(10, 2);
    EXPECT_THROW(ols(r, f), SingularDesignError);
    Matrix f2(10, 2);
    f2.col(0) = Vector::LinSpaced(10, 0.0, 1.0);
    f2.col(1) = 3.0 * f2.col(0);
    EXPECT_THROW(ols(r, f2), SingularDesignError);
    EXPECT_THROW(rolling_ols(r, f, 5), SingularDesignError);
}

TEST(RollingOls, WindowAlignmentAndLookAhead) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n01;
    const int T = 60, N = 3, K = 2;
    Matrix f(T, K), r(T, N);
    for (int t = 0; t < T; ++t) {
        for (int k = 0; k < K; ++k) f(t, k) = n01(rng);
        for (int i = 0; i < N; ++i) r(t, i) = n01(rng);
    }
    const std::size_t w = 20;
    const auto rc = rolling_ols(r, f, w);
    EXPECT_EQ(rc.first, w - 1);
    EXPECT_EQ(rc.end(), static_cast<std::size_t>(T));
    EXPECT_FALSE(rc.has(w - 2));
    const auto direct = ols(r.middleRows(30 - w + 1, w), f.middleRows(30 - w + 1, w));
    EXPECT_TRUE(rc.at(30).beta.isApprox(direct.beta, 1e-12));
    // Changing the future leaves date 30 untouched.
    Matrix r2 = r;
    r2.row(31).setConstant(100.0);
    const auto rc2 = rolling_ols(r2, f, w);
    EXPECT_EQ(rc2.at(30).alpha, rc.at(30).alpha);
    EXPECT_NE(rc2.at(31).alpha, rc.at(31).alpha);
}

TEST(RollingOls, RejectsMissingValues) {
    Matrix f = Matrix::Random(10, 1), r = Matrix::Random(10, 1);
    r(3, 0) = std::nan("");
    EXPECT_THROW(rolling_ols(r, f, 5), std::invalid_argument);
}

TEST(RollingOls, RecoversConstantCoefficientsWithinStandardErrors) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n01;
    const int T = 1000;
    const double a = 0.0004, b = 1.3, s = 0.01, vf = 0.012;
    Matrix f(T, 1), r(T, 1);
    for (int t = 0; t < T; ++t) {
        f(t, 0) = vf * n01(rng);
        r(t, 0) = a + b * f(t, 0) + s * n01(rng);
    }
    const auto rc = rolling_ols(r, f, 252);
    const double se_beta = s / (std::sqrt(252.0) * vf);
    const double se_alpha = s / std::sqrt(252.0);
    for (std::size_t t = rc.first; t < rc.end(); t += 50) {
        EXPECT_LT(std::abs(rc.at(t).beta(0, 0) - b), 4.5 * se_beta) << t;
        EXPECT_LT(std::abs(rc.at(t).alpha(0) - a), 4.5 * se_alpha) << t;
        EXPECT_LT(std::abs(rc.at(t).sigma(0) - s), 4.5 * s / std::sqrt(2.0 * 250)) << t;
    }
}

TEST(FactorCovariance, HandCases) {
    Matrix fw(2, 1);
    fw << 0.1, -0.1;  // sample variance 0.02
    const auto rank1 = factor_covariance(make_coeffs({0, 0}, {{1}, {1}}, {0, 0}), fw);
    EXPECT_NEAR(rank1(0, 1), 0.02, 1e-15);
    EXPECT_NEAR(rank1(1, 1), 0.02, 1e-15);

    const auto diag = factor_covariance(make_coeffs({0, 0}, {{0}, {0}}, {0.3, 0.4}), fw);
    EXPECT_DOUBLE_EQ(diag(0, 0), 0.09);
    EXPECT_DOUBLE_EQ(diag(1, 1), 0.16);
    EXPECT_EQ(diag(0, 1), 0.0);

    Matrix fw2(2, 1);
    fw2 << std::sqrt(0.005), -std::sqrt(0.005);  // sample variance 0.01
    const auto hand = factor_covariance(make_coeffs({0, 0}, {{1}, {2}}, {0.1, 0.2}), fw2);
    EXPECT_NEAR(hand(0, 0), 0.02, 1e-15);
    EXPECT_NEAR(hand(0, 1), 0.02, 1e-15);
    EXPECT_NEAR(hand(1, 0), 0.02, 1e-15);
    EXPECT_NEAR(hand(1, 1), 0.08, 1e-15);
}

TEST(FactorCovariance, SymmetricPositiveSemidefinite) {
    std::mt19937_64 rng(4);
    for (int rep = 0; rep < 20; ++rep) {
        const int N = 6, K = 3;
        CoefficientSet c;
        c.alpha = Vector::Zero(N);
        c.beta = Matrix::Random(N, K);
        c.sigma = Vector::Random(N).cwiseAbs();
        if (rep % 2 == 0) c.sigma(0) = 0.0;
        const Matrix fw = Matrix::Random(30, K);
        const Matrix s = factor_covariance(c, fw);
        EXPECT_EQ((s - s.transpose()).norm(), 0.0);
        const double min_eig = Eigen::SelfAdjointEigenSolver<Matrix>(s).eigenvalues().minCoeff();
        EXPECT_GE(min_eig, -1e-10 * s.trace());
    }
}

TEST(Assemble, HandArithmetic) {
    const auto c = make_coeffs({0.001}, {{1.2}}, {0.02});
    Vector f(1), e(1);
    f << 0.01;
    e << -0.5;
    EXPECT_NEAR(assemble_returns(c, f, e)(0), 0.003, 1e-15);
    EXPECT_THROW(assemble_returns(c, Vector::Zero(2), e), std::invalid_argument);
}

TEST(Bootstrap, ZeroSigmaRowsAreDeterministic) {
    const auto c = make_coeffs({0.001, -0.002}, {{1.0, 0.5}, {0.2, -0.3}}, {0.0, 0.0});
    Vector f(2);
    f << 0.01, -0.02;
    const Matrix draws = bootstrap_generate(c, f, 50, 9);
    for (int s = 0; s < 50; ++s) {
        EXPECT_DOUBLE_EQ(draws(s, 0), 0.001 + 1.0 * 0.01 + 0.5 * -0.02);
        EXPECT_DOUBLE_EQ(draws(s, 1), -0.002 + 0.2 * 0.01 - 0.3 * -0.02);
    }
}

TEST(Bootstrap, DeterministicPerSeed) {
    const auto c = make_coeffs({0.0, 0.0}, {{1.0}, {0.5}}, {0.1, 0.2});
    Vector f(1);
    f << 0.01;
    EXPECT_EQ(bootstrap_generate(c, f, 100, 5), bootstrap_generate(c, f, 100, 5));
    EXPECT_NE(bootstrap_generate(c, f, 100, 5), bootstrap_generate(c, f, 100, 6));
}

TEST(Bootstrap, MonteCarloMomentsMatchAnalytic) {
    const auto c = make_coeffs({0.001, -0.0005, 0.0}, {{1.1}, {0.7}, {-0.4}}, {0.02, 0.01, 0.03});
    Vector f(1);
    f << 0.015;
    const std::size_t n = 1000000;
    const Matrix draws = bootstrap_generate(c, f, n, 77);
    const Vector mean = draws.colwise().mean().transpose();
    const Vector expected = c.alpha + c.beta * f;
    for (int i = 0; i < 3; ++i) EXPECT_LT(std::abs(mean(i) - expected(i)), 4.0 * c.sigma(i) / std::sqrt(double(n)));
    const Matrix centered = draws.rowwise() - mean.transpose();
    const Matrix cov = centered.transpose() * centered / double(n - 1);
    const Matrix target = c.sigma.array().square().matrix().asDiagonal();
    EXPECT_LT((cov - target).norm() / target.norm(), 0.01);
}

TEST(Bootstrap, ResidualsIndependentTotalsFollowFactor) {
    // Varying F across draws: total correlation matches the factor-implied value.
    const auto c = make_coeffs({0.0, 0.0}, {{1.0}, {2.0}}, {0.01, 0.02});
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n01;
    const int n = 100000;
    Matrix r(n, 2), resid(n, 2);
    Matrix fs(n, 1);
    for (int s = 0; s < n; ++s) {
        Vector f(1);
        f << 0.01 * n01(rng);
        fs(s, 0) = f(0);
        r.row(s) = bootstrap_generate(c, f, 1, 1000 + s).row(0);
        resid.row(s) = r.row(s) - (c.alpha + c.beta * f).transpose();
    }
    auto corr = [](const Matrix& x) {
        const Matrix cx = x.rowwise() - x.colwise().mean();
        const Matrix cov = cx.transpose() * cx;
        return cov(0, 1) / std::sqrt(cov(0, 0) * cov(1, 1));
    };
    EXPECT_LT(std::abs(corr(resid)), 4.0 / std::sqrt(double(n)));
    const Matrix implied = factor_covariance(c, fs);
    const double rho = implied(0, 1) / std::sqrt(implied(0, 0) * implied(1, 1));
    EXPECT_NEAR(corr(r), rho, 0.01);
}

} // namespace
} // namespace marketgan::factor
