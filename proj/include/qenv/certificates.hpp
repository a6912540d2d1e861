#pragma once

// Stationarity tests and checkers for the uniqueness / global optimality
// conditions of the envelope-regularized recovery problems, plus estimation
// of the lower restricted isometry constant.
//
// A point X is stationary for  Q2(f)(X) + |A X - b|^2  iff
//   Z = (I - A^* A) X + A^* b  lies in dG(X),  G = Q2(f)/2 + |.|^2/2.
// For spectral f this is tested in the SVD frame of X: Z must be
// simultaneously diagonalizable with X and its aligned spectrum must lie in
// the vector subdifferential.

#include "qenv/envelopes.hpp"
#include "qenv/problem.hpp"
#include "qenv/spectral.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace qenv {

/// Z = (I - A^* A) X + A^* b.
inline Matrix compute_Z(const ProblemInstance &inst, const Matrix &X) {
    return X - inst.op.adjoint(inst.op.apply(X)) + inst.op.adjoint(inst.b);
}

// ---------------------------------------------------------------------------
// Subdifferential membership

struct SubgradientQuery {
    Matrix X;
    Matrix W;
    Regularizer reg;
};

enum class SubdiffMode {
    /// W must share the singular frame of X (up to rotations inside blocks
    /// of repeated singular values) and its aligned spectrum must belong to
    /// the vector subdifferential.
    aligned,
    /// Only the sorted spectra are compared; for FixedRank this is the test
    /// sigma_j(W) = sigma_j(X), j <= K.
    values_only,
};

struct SubdiffResult {
    bool member = false;
    double residual = 0.0;
    double alignment_residual = 0.0;
    double value_residual = 0.0;
};

/// Default absolute tolerance for membership tests at X.
inline double default_subdiff_tol(const Matrix &X) { return 1e-7 * std::max(1.0, X.norm()); }

namespace detail {

// Residual of w in dg(x) for sorted x whose entries at index >= r are zero.
inline double vector_subdiff_residual(const Vector &x, const Vector &w, int r,
                                      const Regularizer &reg) {
    const Index n = x.size();
    double res = 0.0;
    auto bump = [&](double v) { res = std::max(res, v); };
    std::visit(
        [&](const auto &p) {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, MuRank>) {
                const double t = std::sqrt(p.mu);
                for (Index i = 0; i < n; ++i) {
                    if (i >= r)
                        bump(std::max(0.0, std::abs(w(i)) - t - 1e-9));
                    else if (x(i) >= t)
                        bump(std::abs(w(i) - x(i)));
                    else
                        bump(std::abs(w(i) - t));
                }
            } else if constexpr (std::is_same_v<T, FixedRank>) {
                const Index K = p.k;
                if (r > K) {
                    // outside the domain of the envelope: dG is empty
                    res = std::numeric_limits<double>::infinity();
                    return;
                }
                const double cap = K <= n ? (K - 1 < r ? x(K - 1) : 0.0) : 0.0;
                for (Index i = 0; i < n; ++i) {
                    if (i < r)
                        bump(std::abs(w(i) - x(i)));
                    else
                        bump(std::max(0.0, std::abs(w(i)) - cap));
                }
            } else {
                const double half = 0.5 * p.lambda;
                for (Index i = 0; i < n; ++i) {
                    if (i < r)
                        bump(std::abs(w(i) - x(i) - half));
                    else
                        bump(std::max(0.0, std::abs(w(i)) - half));
                }
            }
        },
        reg.get());
    return res;
}

} // namespace detail

inline SubdiffResult in_subdiff_G(const SubgradientQuery &q, SubdiffMode mode = SubdiffMode::aligned,
                                  std::optional<double> tol = std::nullopt) {
    const Matrix &X = q.X;
    const Matrix &W = q.W;
    if (X.rows() != W.rows() || X.cols() != W.cols())
        throw std::invalid_argument("in_subdiff_G: shape mismatch");
    q.reg.check_shape(X.rows(), X.cols());
    const double tolerance = tol.value_or(default_subdiff_tol(X));

    SubdiffResult out;
    if (mode == SubdiffMode::values_only) {
        Vector x = singular_values(X);
        const Vector w = singular_values(W);
        const int r = numerical_rank(x);
        x.tail(x.size() - r).setZero();
        if (const auto *fr = std::get_if<FixedRank>(&q.reg.get())) {
            // sigma_j(W) = sigma_j(X) for j <= K
            if (r > fr->k) {
                out.value_residual = std::numeric_limits<double>::infinity();
            } else {
                const Index K = std::min<Index>(fr->k, x.size());
                out.value_residual = (w.head(K) - x.head(K)).cwiseAbs().maxCoeff();
            }
        } else {
            out.value_residual = detail::vector_subdiff_residual(x, w, r, q.reg);
        }
        out.residual = out.value_residual;
        out.member = out.residual <= tolerance;
        return out;
    }

    const Svd f = svd(X);
    const Index n1 = X.rows(), n2 = X.cols();
    const Index n = f.sigma.size();
    const int r = numerical_rank(f.sigma);
    const Matrix D = f.U.transpose() * W * f.V;

    // Blocks of (numerically) equal non-zero singular values.
    const double group_tol = 1e-8 * std::max(1.0, f.sigma(0));
    std::vector<std::pair<Index, Index>> groups;
    for (Index i = 0; i < r;) {
        Index j = i + 1;
        while (j < r && f.sigma(j - 1) - f.sigma(j) <= group_tol)
            ++j;
        groups.emplace_back(i, j);
        i = j;
    }

    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> allowed =
        Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(n1, n2, false);
    allowed.bottomRightCorner(n1 - r, n2 - r).setConstant(true);
    for (auto [a, b] : groups)
        allowed.block(a, a, b - a, b - a).setConstant(true);

    double off = 0.0;
    for (Index j = 0; j < n2; ++j)
        for (Index i = 0; i < n1; ++i)
            if (!allowed(i, j))
                off += D(i, j) * D(i, j);

    Vector w = Vector::Zero(n);
    for (auto [a, b] : groups) {
        const Index len = b - a;
        const Matrix B = D.block(a, a, len, len);
        off += 0.5 * (B - B.transpose()).squaredNorm();
        if (len == 1) {
            w(a) = B(0, 0);
        } else {
            Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (B + B.transpose()));
            const Vector ev = es.eigenvalues().reverse();
            w.segment(a, len) = ev;
        }
    }
    if (r < n) {
        const Matrix tail = D.bottomRightCorner(n1 - r, n2 - r);
        w.tail(n - r) = singular_values(tail);
    }

    Vector x = f.sigma;
    x.tail(n - r).setZero();
    out.alignment_residual = std::sqrt(off);
    out.value_residual = detail::vector_subdiff_residual(x, w, r, q.reg);
    out.residual = std::max(out.alignment_residual, out.value_residual);
    out.member = out.residual <= tolerance;
    return out;
}

// ---------------------------------------------------------------------------
// Stationarity

struct StationarityReport {
    /// Residual of Z in dG(X).
    double subdiff_residual = 0.0;
    /// |X - prox(X - 2 A^*(A X - b)/rho)| at rho = 2.1.
    double fixed_point_residual = 0.0;
    bool passed = false;
};

inline constexpr double kCertificateRho = 2.1;

/// Two independent stationarity residuals; passes when both are at most
/// tol * max(1, |X|).
inline StationarityReport check_stationary(const ProblemInstance &inst, const Matrix &X,
                                           const Regularizer &reg, double tol = 1e-7) {
    StationarityReport rep;
    const double scale = std::max(1.0, X.norm());
    const Matrix Z = compute_Z(inst, X);
    rep.subdiff_residual = in_subdiff_G({X, Z, reg}, SubdiffMode::aligned, tol * scale).residual;

    const ProxParams p(std::max(kCertificateRho, 1.05 * 2.0 * inst.op.norm() * inst.op.norm()));
    const Matrix grad = inst.op.adjoint(inst.op.apply(X) - inst.b);
    const Matrix step = X - 2.0 * grad / p.rho;
    rep.fixed_point_residual = (X - reg_prox_matrix(step, reg, p)).norm();
    rep.passed = rep.subdiff_residual <= tol * scale && rep.fixed_point_residual <= tol * scale;
    return rep;
}

// ---------------------------------------------------------------------------
// Lower restricted isometry constant

enum class DeltaProvenance {
    /// Operator is c times the vectorization map: delta = 1 - c^2.
    exact,
    /// Heuristic search; the returned value never exceeds the true constant.
    lower_bound,
};

inline std::string to_string(DeltaProvenance p) {
    return p == DeltaProvenance::exact ? "exact" : "lower_bound";
}

struct DeltaEstimate {
    double delta;
    DeltaProvenance provenance;
};

namespace detail {

// Dense matrix of L -> A(L R) for fixed R (K x n2), acting on vec(L).
inline Matrix left_factor_map(const LinearOp &op, const Matrix &R) {
    const Index n1 = op.n1(), n2 = op.n2(), K = R.rows();
    Matrix B = Matrix::Zero(op.m(), n1 * K);
    for (Index k = 0; k < K; ++k)
        for (Index j = 0; j < n2; ++j)
            B.middleCols(k * n1, n1) += R(k, j) * op.dense().middleCols(j * n1, n1);
    return B;
}

// Dense matrix of R -> A(L R) for fixed L (n1 x K), acting on vec(R).
inline Matrix right_factor_map(const LinearOp &op, const Matrix &L) {
    const Index n1 = op.n1(), n2 = op.n2(), K = L.cols();
    Matrix B(op.m(), K * n2);
    for (Index j = 0; j < n2; ++j)
        B.middleCols(j * K, K) = op.dense().middleCols(j * n1, n1) * L;
    return B;
}

inline Matrix orthonormal_columns(const Matrix &M) {
    Eigen::HouseholderQR<Matrix> qr(M);
    return qr.householderQ() * Matrix::Identity(M.rows(), M.cols());
}

} // namespace detail

/// Estimates delta_K^- where 1 - delta_K^- = inf |A X|^2 / |X|^2 over
/// non-zero X of rank <= K.
///
/// Exact for c times the vectorization map. Otherwise the Rayleigh quotient
/// is minimized over factorizations X = L R by alternating exact
/// minimization: with R having orthonormal rows, the best L is the bottom
/// eigenvector of the restricted Gram matrix, and symmetrically for R. The
/// smallest quotient found over `restarts` random starts bounds the infimum
/// from above, so the returned delta is a lower bound.
inline DeltaEstimate estimate_delta(const LinearOp &op, int K, int restarts, RngSeed seed) {
    if (K < 1)
        throw std::invalid_argument("estimate_delta: K must be at least 1");
    if (auto c = op.identity_scale())
        return {1.0 - (*c) * (*c), DeltaProvenance::exact};

    const Index n1 = op.n1(), n2 = op.n2();
    const Index k = std::min<Index>(K, std::min(n1, n2));
    double best = std::numeric_limits<double>::infinity();
    for (int s = 0; s < std::max(1, restarts); ++s) {
        auto rng = seed.with_stream(static_cast<std::uint64_t>(s)).engine();
        Matrix R = detail::gaussian_matrix(k, n2, 1.0, rng);
        R = detail::orthonormal_columns(R.transpose()).transpose();
        double ratio = std::numeric_limits<double>::infinity();
        for (int it = 0; it < 500; ++it) {
            const Matrix BL = detail::left_factor_map(op, R);
            Eigen::SelfAdjointEigenSolver<Matrix> el(BL.transpose() * BL);
            const Matrix L = detail::orthonormal_columns(el.eigenvectors().col(0).reshaped(n1, k));
            const Matrix BR = detail::right_factor_map(op, L);
            Eigen::SelfAdjointEigenSolver<Matrix> er(BR.transpose() * BR);
            const double next = std::max(er.eigenvalues()(0), 0.0);
            R = detail::orthonormal_columns(er.eigenvectors().col(0).reshaped(k, n2).transpose())
                    .transpose();
            const bool stalled = ratio - next <= 1e-12 * std::max(ratio, 1e-300);
            ratio = std::min(ratio, next);
            if (stalled || ratio == 0.0)
                break;
        }
        best = std::min(best, ratio);
    }
    return {1.0 - best, DeltaProvenance::lower_bound};
}

// ---------------------------------------------------------------------------
// Theorem checks

enum class Verdict {
    certified_unique_lowrank,
    certified_global,
    refuted,
    inconclusive,
};

inline std::string to_string(Verdict v) {
    switch (v) {
    case Verdict::certified_unique_lowrank:
        return "certified_unique_lowrank";
    case Verdict::certified_global:
        return "certified_global";
    case Verdict::refuted:
        return "refuted";
    case Verdict::inconclusive:
        break;
    }
    return "inconclusive";
}

struct CertificateReport {
    double stationarity_residual = 0.0;
    double fixed_point_residual = 0.0;
    Vector sigma_Z;
    double delta_estimate = 0.0;
    DeltaProvenance provenance = DeltaProvenance::lower_bound;
    std::map<std::string, bool> conditions;
    Verdict verdict = Verdict::inconclusive;

    bool certified() const {
        return verdict == Verdict::certified_global || verdict == Verdict::certified_unique_lowrank;
    }

    /// Flat key=value block, one entry per line.
    std::string to_text() const {
        std::ostringstream out;
        out.precision(17);
        out << "verdict=" << to_string(verdict) << '\n';
        out << "stationarity_residual=" << stationarity_residual << '\n';
        out << "fixed_point_residual=" << fixed_point_residual << '\n';
        out << "delta_estimate=" << delta_estimate << '\n';
        out << "delta_provenance=" << to_string(provenance) << '\n';
        out << "sigma_Z=";
        for (Index i = 0; i < sigma_Z.size(); ++i)
            out << (i ? ";" : "") << sigma_Z(i);
        out << '\n';
        for (const auto &[k, v] : conditions)
            out << k << '=' << (v ? "true" : "false") << '\n';
        return out.str();
    }
};

/// Clearance interval for the mu*rank certificate:
/// [(1 - delta) sqrt(mu), sqrt(mu) / (1 - delta)]. Requires delta < 1.
inline std::pair<double, double> murank_interval(double mu, double delta) {
    if (!(delta < 1.0))
        throw std::invalid_argument("murank_interval: delta must be below 1");
    const double t = std::sqrt(mu);
    return {(1.0 - delta) * t, t / (1.0 - delta)};
}

/// True when no singular value of Z lies in the closed clearance interval.
inline bool murank_interval_clear(const Vector &sigma_Z, double mu, double delta) {
    if (!(delta < 1.0))
        return false;
    const auto [lo, hi] = murank_interval(mu, delta);
    for (Index i = 0; i < sigma_Z.size(); ++i)
        if (sigma_Z(i) >= lo && sigma_Z(i) <= hi)
            return false;
    return true;
}

/// sigma_{K+1}(Z) < (1 - 2 delta) sigma_K(Z); false when delta >= 1/2.
inline bool fixedrank_gap_holds(const Vector &sigma_Z, int K, double delta) {
    if (!(delta < 0.5) || K < 1 || K > sigma_Z.size())
        return false;
    const double next = K < sigma_Z.size() ? sigma_Z(K) : 0.0;
    return next < (1.0 - 2.0 * delta) * sigma_Z(K - 1);
}

/// Constant in |X_B - X0| <= c |eps|: c = 2 / sqrt(1 - delta).
inline double error_bound_constant(double delta) {
    if (!(delta < 1.0))
        throw std::invalid_argument("error_bound_constant: delta must be below 1");
    return 2.0 / std::sqrt(1.0 - delta);
}

namespace detail {

inline Verdict gate_verdict(bool stationary, bool hypothesis, bool usable, bool global_extra,
                            DeltaProvenance prov) {
    if (!stationary)
        return Verdict::refuted;
    if (!usable)
        return Verdict::inconclusive;
    if (prov == DeltaProvenance::lower_bound)
        // Every hypothesis only gets harder as delta grows, so a failure at
        // the lower bound is a failure at the true value.
        return hypothesis ? Verdict::inconclusive : Verdict::refuted;
    if (!hypothesis)
        return Verdict::inconclusive;
    return global_extra ? Verdict::certified_global : Verdict::certified_unique_lowrank;
}

} // namespace detail

/// Unique-low-rank and global optimality certificate for a stationary point
/// of the mu*rank envelope problem. delta2K is delta_{2K}^- for some K with
/// rank(X) <= K.
inline CertificateReport check_theorem_murank(const ProblemInstance &inst, const Matrix &X, double mu,
                                              double delta2K, DeltaProvenance prov) {
    const Regularizer reg = Regularizer::mu_rank(mu);
    CertificateReport rep;
    const StationarityReport st = check_stationary(inst, X, reg);
    rep.stationarity_residual = st.subdiff_residual;
    rep.fixed_point_residual = st.fixed_point_residual;
    rep.sigma_Z = singular_values(compute_Z(inst, X));
    rep.delta_estimate = delta2K;
    rep.provenance = prov;

    const bool clear = murank_interval_clear(rep.sigma_Z, mu, delta2K);
    const bool fit_ok = data_fit(inst, X) <= mu;
    const bool norm_ok = inst.op.norm() < 1.0;
    rep.conditions["e41_interval_clear"] = clear;
    rep.conditions["cond222_fit"] = fit_ok;
    rep.conditions["op_norm_below_one"] = norm_ok;
    rep.verdict = detail::gate_verdict(st.passed, clear, delta2K < 1.0, fit_ok && norm_ok, prov);
    return rep;
}

/// Uniqueness certificate for a stationary point of the fixed-rank envelope
/// problem; with |A| < 1 it also certifies the unique global minimizer.
inline CertificateReport check_theorem_fixedrank(const ProblemInstance &inst, const Matrix &X, int K,
                                                 double delta2K, DeltaProvenance prov) {
    const Regularizer reg = Regularizer::fixed_rank(K);
    CertificateReport rep;
    const bool low_rank = numerical_rank(X) <= K;
    const StationarityReport st = check_stationary(inst, X, reg);
    rep.stationarity_residual = st.subdiff_residual;
    rep.fixed_point_residual = st.fixed_point_residual;
    rep.sigma_Z = singular_values(compute_Z(inst, X));
    rep.delta_estimate = delta2K;
    rep.provenance = prov;

    const bool gap = fixedrank_gap_holds(rep.sigma_Z, K, delta2K);
    const bool norm_ok = inst.op.norm() < 1.0;
    rep.conditions["e4fix567_gap"] = gap;
    rep.conditions["op_norm_below_one"] = norm_ok;
    rep.verdict = detail::gate_verdict(st.passed && low_rank, gap, delta2K < 0.5, norm_ok, prov);
    return rep;
}

struct Inequality {
    std::string name;
    double lhs;
    double rhs;
    bool holds;
    /// rhs - lhs for "<=" / "<" bounds, lhs - rhs for ">" bounds.
    double margin;
};

struct NoiseRegimeReport {
    double noise_norm = 0.0;
    double sigma_K = 0.0;
    std::optional<double> error_bound_constant;
    std::vector<Inequality> checks;
    std::map<std::string, bool> conditions;

    std::string to_text() const {
        std::ostringstream out;
        out.precision(17);
        out << "noise_norm=" << noise_norm << '\n' << "sigma_K=" << sigma_K << '\n';
        if (error_bound_constant)
            out << "error_bound_constant=" << *error_bound_constant << '\n';
        for (const auto &c : checks)
            out << c.name << '=' << (c.holds ? "true" : "false") << " lhs=" << c.lhs
                << " rhs=" << c.rhs << " margin=" << c.margin << '\n';
        return out.str();
    }
};

/// Evaluates the a-priori noise hypotheses for the ground truth stored in
/// `inst` and, when a solution is supplied, the promised error bound.
/// `mu` enables the mu*rank hypotheses; K defaults to the ground-truth rank.
inline NoiseRegimeReport check_noise_regime(const ProblemInstance &inst, std::optional<double> mu,
                                            std::optional<int> K, double delta2K,
                                            const Matrix *solution = nullptr) {
    if (!inst.truth)
        throw std::invalid_argument("check_noise_regime: instance has no ground truth");
    const GroundTruth &gt = *inst.truth;
    const int k = K.value_or(gt.K0);
    const Vector s0 = singular_values(gt.X0);
    if (k < 1 || k > s0.size())
        throw std::invalid_argument("check_noise_regime: K out of range");

    NoiseRegimeReport rep;
    rep.noise_norm = gt.eps.norm();
    rep.sigma_K = s0(k - 1);
    const double e = rep.noise_norm;
    auto add = [&](std::string name, double lhs, double rhs, bool strict_greater) {
        Inequality q{std::move(name), lhs, rhs, false, 0.0};
        if (strict_greater) {
            q.holds = lhs > rhs;
            q.margin = lhs - rhs;
        } else {
            q.holds = lhs <= rhs;
            q.margin = rhs - lhs;
        }
        rep.conditions[q.name] = q.holds;
        rep.checks.push_back(std::move(q));
    };

    const double one_minus = 1.0 - delta2K;
    if (mu) {
        const double t = std::sqrt(*mu);
        if (one_minus > 0) {
            add("noise_bound_thm52", e, std::pow(one_minus, 1.5) * t / 3.0, false);
            add("sigmaK_bound_thm52", rep.sigma_K, (1.0 / one_minus + one_minus) * t, true);
        } else {
            rep.conditions["noise_bound_thm52"] = false;
            rep.conditions["sigmaK_bound_thm52"] = false;
        }
    }
    if (delta2K < 0.5)
        add("sigmaK_bound_thm63", rep.sigma_K, 5.0 / std::pow(1.0 - 2.0 * delta2K, 1.5) * e, true);
    else
        rep.conditions["sigmaK_bound_thm63"] = false;

    if (one_minus > 0) {
        rep.error_bound_constant = error_bound_constant(delta2K);
        if (solution)
            add("error_bound", (*solution - gt.X0).norm(), *rep.error_bound_constant * e, false);
    }
    return rep;
}

} // namespace qenv
