#include "qenv/certificates.hpp"
#include "qenv/solvers.hpp"

#include "generators.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace qenv;

namespace {

ProblemInstance identity_instance(double c, const Matrix &X0, const Vector &eps) {
    const LinearOp op = LinearOp::scaled_identity(X0.rows(), X0.cols(), c);
    Vector b = op.apply(X0) + eps;
    return ProblemInstance{op, b, GroundTruth{X0, eps, numerical_rank(X0)}, {}};
}

ProblemInstance gaussian_instance(std::uint64_t seed, Index m, Index n, int K, double noise) {
    const RngSeed s{seed, 1};
    LinearOp op = gen_gaussian_op(m, n, n, 1.0 / std::sqrt(double(m)), s);
    op = op.scaled(0.95 / op.norm());
    const Matrix X0 = gen_low_rank(n, n, K, 1.0, s.with_stream(2));
    return gen_instance(op, X0, NoiseStd{noise}, s.with_stream(3));
}

// Operator scaling entry (i, j) of X by d(i, j); its lower restricted
// isometry constant is 1 - min d^2 for every K (attained at e_i e_j^T).
LinearOp diagonal_op(const Matrix &d) {
    const Vector v = d.reshaped();
    return LinearOp(Matrix(v.asDiagonal()), d.rows(), d.cols());
}

int verdict_rank(Verdict v) {
    switch (v) {
    case Verdict::certified_global:
        return 3;
    case Verdict::certified_unique_lowrank:
        return 2;
    case Verdict::inconclusive:
        return 1;
    case Verdict::refuted:
        break;
    }
    return 0;
}

} // namespace

TEST(ComputeZ, Examples) {
    gen::Gen g(41);
    const Matrix X0 = g.matrix(3, 1) * g.matrix(1, 4);
    const ProblemInstance inst = identity_instance(0.9, X0, Vector::Zero(12));
    EXPECT_LT((compute_Z(inst, Matrix::Zero(3, 4)) - inst.op.adjoint(inst.b)).norm(), 1e-15);
    EXPECT_LT((compute_Z(inst, X0) - X0).norm(), 1e-14);

    const ProblemInstance zero{LinearOp(Matrix::Zero(5, 12), 3, 4), Vector::Zero(5), std::nullopt, {}};
    const Matrix X = g.matrix(3, 4);
    EXPECT_EQ(compute_Z(zero, X), X);
}

TEST(Subdiff, MuRankExamples) {
    gen::Gen g(42);
    const Matrix X = g.with_spectrum(4, 3, (Vector(3) << 3.0, 2.0, 1.5).finished());
    const SubdiffResult a = in_subdiff_G({X, X, Regularizer::mu_rank(1.0)});
    EXPECT_TRUE(a.member);
    EXPECT_LT(a.residual, 1e-12);

    const Matrix W = g.with_spectrum(4, 3, (Vector(3) << 0.9, 0.5, 0.0).finished());
    EXPECT_TRUE(in_subdiff_G({Matrix::Zero(4, 3), W, Regularizer::mu_rank(1.0)}).member);
    const Matrix big = g.with_spectrum(4, 3, (Vector(3) << 1.1, 0.5, 0.0).finished());
    EXPECT_FALSE(in_subdiff_G({Matrix::Zero(4, 3), big, Regularizer::mu_rank(1.0)}).member);

    // 0 < sigma < sqrt(mu) requires w = sqrt(mu)
    const Matrix U = g.orthogonal(3), V = g.orthogonal(3);
    const Matrix Xs = U * Vector((Vector(3) << 2.0, 0.5, 0.0).finished()).asDiagonal() * V.transpose();
    const Matrix Ws = U * Vector((Vector(3) << 2.0, 1.0, 0.3).finished()).asDiagonal() * V.transpose();
    EXPECT_TRUE(in_subdiff_G({Xs, Ws, Regularizer::mu_rank(1.0)}).member);
    const Matrix Wbad = U * Vector((Vector(3) << 2.0, 0.5, 0.3).finished()).asDiagonal() * V.transpose();
    EXPECT_FALSE(in_subdiff_G({Xs, Wbad, Regularizer::mu_rank(1.0)}).member);
    EXPECT_THROW(in_subdiff_G({Xs, Matrix::Zero(2, 3), Regularizer::mu_rank(1.0)}), std::invalid_argument);
}

TEST(Subdiff, FixedRankRequiresMatchingLeadingValues) {
    gen::Gen g(43);
    const Matrix U = g.orthogonal(4), V = g.orthogonal(4);
    auto M = [&](double a, double b, double c, double d) {
        return Matrix(U * Vector((Vector(4) << a, b, c, d).finished()).asDiagonal() * V.transpose());
    };
    const Regularizer reg = Regularizer::fixed_rank(2);
    const Matrix X = M(3.0, 2.0, 0.0, 0.0);
    EXPECT_TRUE(in_subdiff_G({X, M(3.0, 2.0, 1.5, 0.5), reg}).member);
    EXPECT_TRUE(in_subdiff_G({X, M(3.0, 2.0, 2.0, 0.0), reg}).member);
    EXPECT_FALSE(in_subdiff_G({X, M(3.0, 2.5, 1.0, 0.0), reg}).member);
    EXPECT_FALSE(in_subdiff_G({X, M(3.0, 2.5, 1.0, 0.0), reg}, SubdiffMode::values_only).member);
    // tail above the K-th value
    EXPECT_FALSE(in_subdiff_G({X, M(3.0, 2.0, 2.5, 0.0), reg}).member);
    // rank above K is outside the domain
    EXPECT_FALSE(in_subdiff_G({M(3.0, 2.0, 1.0, 0.0), M(3.0, 2.0, 1.0, 0.0), reg}).member);
}

TEST(Subdiff, AlignedModeDetectsRotatedFrames) {
    gen::Gen g(44);
    const Vector s = (Vector(3) << 3.0, 2.0, 0.0).finished();
    const Matrix X = g.with_spectrum(3, 3, s);
    const Matrix W = g.with_spectrum(3, 3, (Vector(3) << 3.0, 2.0, 0.5).finished());
    const Regularizer reg = Regularizer::fixed_rank(2);
    const SubdiffResult aligned = in_subdiff_G({X, W, reg});
    EXPECT_FALSE(aligned.member);
    EXPECT_GT(aligned.alignment_residual, 1e-3);
    EXPECT_TRUE(in_subdiff_G({X, W, reg}, SubdiffMode::values_only).member);
}

TEST(Subdiff, LiftedVectorSubgradientsAreMembers) {
    gen::for_all(60, 45, [](gen::Gen &g, int trial) {
        const Index n = g.integer(2, 5);
        const double mu = g.uniform(0.3, 2.0);
        const double t = std::sqrt(mu);
        Vector x = Vector::Zero(n), w = Vector::Zero(n);
        const int r = g.integer(0, static_cast<int>(n) - 1);
        // repeated values inside a block exercise the rotation freedom
        const double rep = g.uniform(1.05, 2.0) * t;
        for (int i = 0; i < r; ++i)
            x(i) = (i < 2) ? rep : g.uniform(0.2, 0.9) * t;
        std::sort(x.data(), x.data() + n, std::greater<>());
        for (Index i = 0; i < n; ++i)
            w(i) = x(i) >= t ? x(i) : (x(i) > 0 ? t : g.uniform(0.0, t));
        const Matrix U = g.orthogonal(n), V = g.orthogonal(n);
        const Matrix X = U * x.asDiagonal() * V.transpose();
        Matrix W = U * w.asDiagonal() * V.transpose();
        if (trial % 2 == 0 && r >= 2) {
            // rotate the repeated block of both frames consistently
            Matrix Q = Matrix::Identity(n, n);
            Q.topLeftCorner(2, 2) = g.orthogonal(2);
            const Matrix U2 = U * Q, V2 = V * Q;
            EXPECT_LT((U2 * x.asDiagonal() * V2.transpose() - X).norm(), 1e-12);
            W = U2 * w.asDiagonal() * V2.transpose();
        }
        const SubdiffResult res = in_subdiff_G({X, W, Regularizer::mu_rank(mu)});
        EXPECT_TRUE(res.member) << res.residual;
    });
}

TEST(Stationarity, TrivialZeroProblem) {
    const ProblemInstance inst{LinearOp::scaled_identity(2, 3, 0.5), Vector::Zero(6), std::nullopt, {}};
    for (const Regularizer &reg : {Regularizer::mu_rank(1.0), Regularizer::fixed_rank(1), Regularizer::nuclear(0.1)}) {
        const StationarityReport rep = check_stationary(inst, Matrix::Zero(2, 3), reg);
        EXPECT_TRUE(rep.passed);
        EXPECT_EQ(rep.fixed_point_residual, 0.0);
    }
}

TEST(Stationarity, PerturbedSolutionFails) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const ProblemInstance inst = gaussian_instance(300 + seed, 120, 6, 2, 0.05);
        const Regularizer reg = Regularizer::mu_rank(0.2);
        SolveConfig cfg;
        cfg.tol = 1e-11;
        cfg.max_iter = 50000;
        const SolveResult res = solve_fbs(inst, reg, cfg);
        ASSERT_TRUE(res.converged);
        EXPECT_TRUE(check_stationary(inst, res.X, reg, 1e-7).passed);
        gen::Gen g(seed);
        Matrix D = g.matrix(6, 6);
        D *= 0.1 / D.norm();
        EXPECT_FALSE(check_stationary(inst, res.X + D, reg, 1e-7).passed);
    }
}

TEST(Stationarity, RefutationIsBackedByDescent) {
    // When the membership test fails, a step along the forward-backward
    // direction strictly lowers R_reg.
    int refuted = 0;
    gen::for_all(40, 46, [&](gen::Gen &g, int trial) {
        const ProblemInstance inst = gaussian_instance(400 + trial, 60, 5, 2, 0.1);
        const Regularizer reg = trial % 2 ? Regularizer::mu_rank(g.uniform(0.05, 0.5)) : Regularizer::fixed_rank(2);
        Matrix X = g.matrix(5, 5, 0.5);
        if (trial % 2 == 0)
            X = compose(svd(X), (Vector(5) << 1.0, 0.5, 0.0, 0.0, 0.0).finished());
        if (in_subdiff_G({X, compute_Z(inst, X), reg}).member)
            return;
        ++refuted;
        const ProxParams p(2.1);
        const Matrix step = X - 2.0 / p.rho * inst.op.adjoint(inst.op.apply(X) - inst.b);
        const Matrix dir = reg_prox_matrix(step, reg, p) - X;
        const double f0 = objective_value(inst, reg, X);
        double best = f0;
        for (double s = 1.0; s > 1e-6; s *= 0.5)
            best = std::min(best, objective_value(inst, reg, X + s * dir));
        EXPECT_LT(best, f0);
    });
    EXPECT_GT(refuted, 30);
}

TEST(Delta, ExactForScaledIdentity) {
    for (int K : {1, 2, 5}) {
        const DeltaEstimate d = estimate_delta(LinearOp::scaled_identity(4, 4, 0.9), K, 2, RngSeed{1, 0});
        EXPECT_NEAR(d.delta, 0.19, 1e-15);
        EXPECT_EQ(d.provenance, DeltaProvenance::exact);
    }
    EXPECT_THROW(estimate_delta(LinearOp::scaled_identity(2, 2, 0.5), 0, 1, RngSeed{}), std::invalid_argument);
}

TEST(Delta, PathologicalOperatorIsNearOne) {
    const DeltaEstimate d = estimate_delta(pathological_instance().op, 1, 4, RngSeed{2, 0});
    EXPECT_GE(d.delta, 0.99);
    EXPECT_LE(d.delta, 1.0 + 1e-12);
    EXPECT_EQ(d.provenance, DeltaProvenance::lower_bound);
}

TEST(Delta, DiagonalOperatorFindsTrueConstant) {
    gen::for_all(10, 47, [](gen::Gen &g, int) {
        Matrix d(3, 4);
        for (Index i = 0; i < d.size(); ++i)
            d.data()[i] = g.uniform(0.5, 0.95);
        const double exact = 1.0 - d.cwiseAbs2().minCoeff();
        const DeltaEstimate est = estimate_delta(diagonal_op(d), 2, 6, RngSeed{3, 0});
        EXPECT_LE(est.delta, exact + 1e-9);
        EXPECT_GT(est.delta, exact - 0.05);
    });
}

TEST(Delta, AddingRowsDoesNotRaiseEstimate) {
    gen::for_all(8, 48, [](gen::Gen &g, int) {
        const Matrix A = g.matrix(20, 16, 0.25);
        const Matrix extra = g.matrix(10, 16, 0.25);
        Matrix stacked(30, 16);
        stacked << A, extra;
        const double base = estimate_delta(LinearOp(A, 4, 4), 1, 6, RngSeed{5, 0}).delta;
        const double more = estimate_delta(LinearOp(stacked, 4, 4), 1, 6, RngSeed{5, 0}).delta;
        EXPECT_LE(more, base + 1e-6);
    });
}

TEST(Delta, EstimateNeverBelowFeasibleRatio) {
    // 1 - delta_hat is the smallest Rayleigh quotient found; any random low
    // rank matrix gives a quotient at least as large.
    gen::Gen g(49);
    const LinearOp op(g.matrix(25, 25, 0.2), 5, 5);
    const double d = estimate_delta(op, 2, 4, RngSeed{6, 0}).delta;
    for (int t = 0; t < 200; ++t) {
        const Matrix X = g.matrix(5, 2) * g.matrix(2, 5);
        EXPECT_GE(op.apply(X).squaredNorm() / X.squaredNorm(), 1.0 - d - 1e-9);
    }
}

TEST(Theorems, MuRankIntervalArithmetic) {
    const auto [lo, hi] = murank_interval(1.0, 0.19);
    EXPECT_DOUBLE_EQ(lo, 0.81);
    EXPECT_NEAR(hi, 1.2345679012345678, 1e-15);
    EXPECT_TRUE(murank_interval_clear((Vector(2) << 5.0, 0.1).finished(), 1.0, 0.19));
    EXPECT_FALSE(murank_interval_clear((Vector(2) << 5.0, 1.0).finished(), 1.0, 0.19));
    EXPECT_FALSE(murank_interval_clear((Vector(2) << 5.0, 0.81).finished(), 1.0, 0.19));
    EXPECT_FALSE(murank_interval_clear((Vector(1) << 5.0).finished(), 1.0, 1.0));
    EXPECT_THROW(murank_interval(1.0, 1.0), std::invalid_argument);
}

TEST(Theorems, FixedRankGapArithmetic) {
    const Vector s = (Vector(3) << 3.0, 3.0, 0.1).finished();
    EXPECT_TRUE(fixedrank_gap_holds(s, 2, 0.19));
    EXPECT_FALSE(fixedrank_gap_holds(s, 2, 0.5));
    EXPECT_FALSE(fixedrank_gap_holds((Vector(3) << 3.0, 3.0, 1.9).finished(), 2, 0.19));
    EXPECT_TRUE(fixedrank_gap_holds((Vector(3) << 3.0, 3.0, 1.8).finished(), 2, 0.19) == (1.8 < 0.62 * 3.0));
}

TEST(Theorems, ErrorBoundConstant) {
    EXPECT_DOUBLE_EQ(error_bound_constant(0.75), 4.0);
    EXPECT_DOUBLE_EQ(error_bound_constant(0.0), 2.0);
    EXPECT_THROW(error_bound_constant(1.0), std::invalid_argument);
}

TEST(Theorems, VerdictGating) {
    using detail::gate_verdict;
    const auto ex = DeltaProvenance::exact, lb = DeltaProvenance::lower_bound;
    EXPECT_EQ(gate_verdict(false, true, true, true, ex), Verdict::refuted);
    EXPECT_EQ(gate_verdict(true, true, false, true, ex), Verdict::inconclusive);
    EXPECT_EQ(gate_verdict(true, true, true, true, ex), Verdict::certified_global);
    EXPECT_EQ(gate_verdict(true, true, true, false, ex), Verdict::certified_unique_lowrank);
    EXPECT_EQ(gate_verdict(true, false, true, true, ex), Verdict::inconclusive);
    EXPECT_EQ(gate_verdict(true, true, true, true, lb), Verdict::inconclusive);
    EXPECT_EQ(gate_verdict(true, false, true, true, lb), Verdict::refuted);
}

TEST(Theorems, NoiseFreeIdentityConstructionIsCertified) {
    gen::for_all(5, 50, [](gen::Gen &g, int) {
        const double mu = 1.0;
        // sigma_K(X0) well above sqrt(mu)/0.81
        const Matrix X0 = g.with_spectrum(6, 6, (Vector(2) << 4.0, 2.5).finished());
        const ProblemInstance inst = identity_instance(0.9, X0, Vector::Zero(36));
        const SolveResult res = solve_fbs(inst, Regularizer::mu_rank(mu));
        ASSERT_TRUE(res.converged);
        EXPECT_LT((res.X - X0).norm(), 1e-7);
        const DeltaEstimate d = estimate_delta(inst.op, 4, 1, RngSeed{});
        const CertificateReport rep = check_theorem_murank(inst, res.X, mu, d.delta, d.provenance);
        EXPECT_EQ(rep.verdict, Verdict::certified_global) << rep.to_text();
        EXPECT_TRUE(rep.certified());
        EXPECT_TRUE(rep.conditions.at("e41_interval_clear"));
        EXPECT_TRUE(rep.conditions.at("cond222_fit"));

        // the same point with a lower-bound delta cannot certify
        EXPECT_EQ(check_theorem_murank(inst, res.X, mu, d.delta, DeltaProvenance::lower_bound).verdict,
                  Verdict::inconclusive);
    });
}

TEST(Theorems, NonStationaryPointIsRefuted) {
    gen::Gen g(51);
    const Matrix X0 = g.with_spectrum(4, 4, (Vector(1) << 3.0).finished());
    const ProblemInstance inst = identity_instance(0.9, X0, Vector::Zero(16));
    const CertificateReport rep = check_theorem_murank(inst, X0 + 0.1 * g.matrix(4, 4), 1.0, 0.19,
                                                       DeltaProvenance::exact);
    EXPECT_EQ(rep.verdict, Verdict::refuted);
    const CertificateReport fr = check_theorem_fixedrank(inst, g.matrix(4, 4), 1, 0.19, DeltaProvenance::exact);
    EXPECT_EQ(fr.verdict, Verdict::refuted);
}

TEST(Theorems, FixedRankNoisyIdentityConstruction) {
    gen::for_all(5, 52, [](gen::Gen &g, int) {
        const double delta = 0.19;
        Vector eps = g.vector(25);
        eps *= 0.1 / eps.norm();
        const double need = 5.0 / std::pow(1.0 - 2.0 * delta, 1.5) * 0.1;
        const Matrix X0 = g.with_spectrum(5, 5, (Vector(2) << 3.0 * need, 1.5 * need).finished());
        const ProblemInstance inst = identity_instance(0.9, X0, eps);
        const SolveResult res = solve_fbs(inst, Regularizer::fixed_rank(2));
        ASSERT_TRUE(res.converged);
        const CertificateReport rep = check_theorem_fixedrank(inst, res.X, 2, delta, DeltaProvenance::exact);
        EXPECT_EQ(rep.verdict, Verdict::certified_global) << rep.to_text();
        const NoiseRegimeReport nr = check_noise_regime(inst, std::nullopt, 2, delta, &res.X);
        EXPECT_TRUE(nr.conditions.at("sigmaK_bound_thm63"));
        EXPECT_TRUE(nr.conditions.at("error_bound"));

        // delta >= 1/2 makes the gap condition unusable
        EXPECT_EQ(check_theorem_fixedrank(inst, res.X, 2, 0.5, DeltaProvenance::exact).verdict,
                  Verdict::inconclusive);
    });
}

TEST(Theorems, VerdictMonotoneInDelta) {
    gen::for_all(10, 53, [](gen::Gen &g, int) {
        const Matrix X0 = g.with_spectrum(5, 5, (Vector(2) << 3.0, g.uniform(1.0, 2.0)).finished());
        Vector eps = g.vector(25);
        eps *= g.uniform(0.0, 0.3) / eps.norm();
        const ProblemInstance inst = identity_instance(0.9, X0, eps);
        const double mu = g.uniform(0.3, 1.5);
        const SolveResult res = solve_fbs(inst, Regularizer::mu_rank(mu));
        int prev = 4;
        for (double c = 0.99; c > 0.3; c -= 0.03) {
            const double delta = 1.0 - c * c;
            const int v = verdict_rank(check_theorem_murank(inst, res.X, mu, delta, DeltaProvenance::exact).verdict);
            EXPECT_LE(v, prev);
            prev = v;
        }
    });
}

TEST(Theorems, StationaryPairsSatisfyCurvatureInequality) {
    int pairs = 0;
    gen::for_all(6, 54, [&](gen::Gen &g, int trial) {
        Matrix d(5, 5);
        for (Index i = 0; i < d.size(); ++i)
            d.data()[i] = g.uniform(0.6, 0.95);
        const double delta = 1.0 - d.cwiseAbs2().minCoeff();
        const LinearOp op = diagonal_op(d);
        const Matrix X0 = g.matrix(5, 1) * g.matrix(1, 5);
        const ProblemInstance inst{op, op.apply(X0) + g.vector(25, 0.3), std::nullopt, {}};
        const Regularizer reg = Regularizer::mu_rank(g.uniform(0.2, 1.0));
        const auto sols = solve_multistart(inst, reg, {}, 6, RngSeed{static_cast<std::uint64_t>(trial), 9});
        const int K = 2;
        for (std::size_t i = 0; i < sols.size(); ++i)
            for (std::size_t j = i + 1; j < sols.size(); ++j) {
                if (!sols[i].converged || !sols[j].converged || sols[i].rank_of_X + sols[j].rank_of_X > 2 * K)
                    continue;
                const Matrix D = sols[j].X - sols[i].X;
                const double lhs = ((sols[j].Z - sols[i].Z).array() * D.array()).sum();
                EXPECT_LE(lhs, delta * D.squaredNorm() + 1e-9);
                ++pairs;
            }
    });
    EXPECT_GT(pairs, 0);
}

TEST(NoiseRegime, Reports) {
    gen::Gen g(55);
    const Matrix X0 = g.with_spectrum(4, 4, (Vector(1) << 3.0).finished());
    const ProblemInstance clean = identity_instance(0.9, X0, Vector::Zero(16));
    const NoiseRegimeReport r = check_noise_regime(clean, 1.0, std::nullopt, 0.19);
    EXPECT_TRUE(r.conditions.at("noise_bound_thm52"));
    EXPECT_EQ(r.noise_norm, 0.0);
    EXPECT_NEAR(r.sigma_K, 3.0, 1e-12);
    // sigma_K > (1/0.81 + 0.81) * 1 = 2.0446
    EXPECT_TRUE(r.conditions.at("sigmaK_bound_thm52"));
    EXPECT_NE(r.to_text().find("noise_bound_thm52=true"), std::string::npos);

    ProblemInstance bare = clean;
    bare.truth.reset();
    EXPECT_THROW(check_noise_regime(bare, 1.0, std::nullopt, 0.19), std::invalid_argument);
    EXPECT_THROW(check_noise_regime(clean, 1.0, 5, 0.19), std::invalid_argument);
}

TEST(Report, TextBlockIsKeyValue) {
    CertificateReport rep;
    rep.sigma_Z = (Vector(2) << 2.0, 0.5).finished();
    rep.conditions["e41_interval_clear"] = true;
    const std::string text = rep.to_text();
    EXPECT_NE(text.find("verdict=inconclusive\n"), std::string::npos);
    EXPECT_NE(text.find("sigma_Z=2;0.5\n"), std::string::npos);
    EXPECT_NE(text.find("e41_interval_clear=true\n"), std::string::npos);
    EXPECT_NE(text.find("delta_provenance=lower_bound\n"), std::string::npos);
}
