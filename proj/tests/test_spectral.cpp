#include "qenv/spectral.hpp"

#include "generators.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <limits>

using namespace qenv;

TEST(Svd, ReconstructsAndIsOrthogonal) {
    gen::for_all(50, 1, [](gen::Gen &g, int) {
        const Index r = g.integer(1, 7), c = g.integer(1, 7);
        const Matrix X = g.matrix(r, c);
        const Svd f = svd(X);
        ASSERT_EQ(f.U.rows(), r);
        ASSERT_EQ(f.U.cols(), r);
        ASSERT_EQ(f.V.rows(), c);
        ASSERT_EQ(f.V.cols(), c);
        ASSERT_EQ(f.sigma.size(), std::min(r, c));
        EXPECT_LT((compose(f, f.sigma) - X).norm(), 1e-12 * std::max(1.0, X.norm()));
        EXPECT_LT((f.U.transpose() * f.U - Matrix::Identity(r, r)).norm(), 1e-12);
        EXPECT_LT((f.V.transpose() * f.V - Matrix::Identity(c, c)).norm(), 1e-12);
        for (Index i = 1; i < f.sigma.size(); ++i)
            EXPECT_GE(f.sigma(i - 1), f.sigma(i));
        EXPECT_GE(f.sigma.minCoeff(), 0.0);
    });
}

TEST(Svd, SignConventionLargestEntryPositive) {
    gen::for_all(30, 2, [](gen::Gen &g, int) {
        const Matrix X = g.matrix(g.integer(1, 6), g.integer(1, 6));
        const Svd f = svd(X);
        for (Index k = 0; k < f.sigma.size(); ++k) {
            Index best = 0;
            f.U.col(k).cwiseAbs().maxCoeff(&best);
            EXPECT_GT(f.U(best, k), 0.0);
        }
    });
}

TEST(Svd, DeterministicAcrossCalls) {
    gen::Gen g(3);
    const Matrix X = g.matrix(5, 4);
    const Svd a = svd(X), b = svd(X);
    EXPECT_EQ(a.U, b.U);
    EXPECT_EQ(a.V, b.V);
    EXPECT_EQ(a.sigma, b.sigma);
}

TEST(Svd, SingularValuesMatchEigenOracle) {
    gen::for_all(40, 4, [](gen::Gen &g, int) {
        const Matrix X = g.matrix(g.integer(1, 6), g.integer(1, 6));
        const Vector s = singular_values(X);
        const Vector o = oracle::singular_values(X);
        EXPECT_LT((s - o).cwiseAbs().maxCoeff(), 1e-7);
    });
}

TEST(Svd, RejectsBadInput) {
    Matrix X = Matrix::Ones(2, 2);
    X(0, 1) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(svd(X), std::invalid_argument);
    X(0, 1) = std::numeric_limits<double>::infinity();
    EXPECT_THROW(singular_values(X), std::invalid_argument);
    EXPECT_THROW(svd(Matrix(0, 3)), std::invalid_argument);
}

TEST(Svd, ZeroMatrix) {
    const Svd f = svd(Matrix::Zero(3, 2));
    EXPECT_EQ(f.sigma, Vector::Zero(2));
    EXPECT_EQ(numerical_rank(f.sigma), 0);
}

TEST(NumericalRank, RelativeCutoff) {
    Vector s(2);
    s << 1.0, 1e-7;
    EXPECT_EQ(numerical_rank(s), 1);
    s << 1.0, 1e-5;
    EXPECT_EQ(numerical_rank(s), 2);
    // the cutoff never drops below kRankTol in absolute terms
    s << 1e-3, 5e-7;
    EXPECT_EQ(numerical_rank(s), 1);
    s << 1e4, 2e-3;
    EXPECT_EQ(numerical_rank(s), 1);
    s << 1e4, 2e-2;
    EXPECT_EQ(numerical_rank(s), 2);
    EXPECT_EQ(numerical_rank(Vector()), 0);
}

TEST(NumericalRank, LowRankProducts) {
    gen::for_all(20, 5, [](gen::Gen &g, int) {
        const int K = g.integer(1, 4);
        const Matrix X = g.matrix(7, K) * g.matrix(K, 6);
        EXPECT_EQ(numerical_rank(X), K);
    });
}

TEST(NuclearNorm, MatchesTraceSqrtOracle) {
    gen::for_all(30, 6, [](gen::Gen &g, int) {
        const Matrix X = g.matrix(g.integer(1, 6), g.integer(1, 6), 2.0);
        EXPECT_NEAR(nuclear_norm(X), oracle::nuclear_norm(X), 1e-8 * std::max(1.0, X.norm()));
    });
}

TEST(Lifting, IdentityMapReturnsInput) {
    gen::for_all(20, 7, [](gen::Gen &g, int) {
        const Matrix X = g.matrix(g.integer(1, 6), g.integer(1, 6));
        const Matrix Y = lift_spectral_map([](const Vector &s) { return s; }, X);
        EXPECT_LT((X - Y).norm(), 1e-12 * std::max(1.0, X.norm()));
    });
}

TEST(Lifting, ValueOnSpectrum) {
    gen::Gen g(8);
    const Vector s = (Vector(3) << 3.0, 2.0, 0.5).finished();
    const Matrix X = g.with_spectrum(4, 3, s);
    const double sum = lift_spectral([](const Vector &v) { return v.sum(); }, X);
    EXPECT_NEAR(sum, 5.5, 1e-12);
}

TEST(Lifting, LengthMismatchThrows) {
    const Matrix X = Matrix::Identity(3, 3);
    EXPECT_THROW(lift_spectral_map([](const Vector &s) { return Vector(s.head(2)); }, X), std::invalid_argument);
}

TEST(SortAbs, RestoreInvertsSort) {
    gen::for_all(50, 9, [](gen::Gen &g, int) {
        const Vector x = g.awkward_vector(g.integer(0, 8));
        const SortedAbsVector s = sort_abs(x);
        for (Index i = 1; i < s.values.size(); ++i)
            EXPECT_GE(s.values(i - 1), s.values(i));
        EXPECT_EQ(s.restore(s.values), x);
    });
}

TEST(SortAbs, TiesKeepOriginalOrder) {
    const Vector x = (Vector(4) << 1.0, -2.0, 2.0, -1.0).finished();
    const SortedAbsVector s = sort_abs(x);
    EXPECT_EQ(s.permutation, (std::vector<Index>{1, 2, 0, 3}));
    EXPECT_EQ(s.values, (Vector(4) << 2.0, 2.0, 1.0, 1.0).finished());
    EXPECT_THROW(s.restore(Vector::Zero(3)), std::invalid_argument);
}
