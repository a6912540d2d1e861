#pragma once

// Minimization of  R_reg(X) = Q2(f)(X) + |A X - b|^2  by forward-backward
// splitting and ADMM, lambda bisection for the nuclear norm, and an
// alternating least squares oracle for the best rank-K fit.

#include "qenv/certificates.hpp"
#include "qenv/envelopes.hpp"
#include "qenv/parallel.hpp"
#include "qenv/problem.hpp"
#include "qenv/spectral.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace qenv {

enum class Algorithm { fbs, admm };

struct SolveConfig {
    double rho = 2.1;
    int max_iter = 10000;
    double tol = 1e-9;
    /// Zero matrix when empty.
    std::optional<Matrix> init;
    Algorithm algorithm = Algorithm::fbs;
    double admm_penalty = 3.0;
};

struct SolveResult {
    Matrix X;
    Matrix Z;
    int iterations = 0;
    bool converged = false;
    /// R_reg at the initial point followed by one entry per iteration.
    std::vector<double> objective_trace;
    /// |X - prox(X - 2 A^*(A X - b)/rho)| at the returned X.
    double fixed_point_residual = 0.0;
    int rank_of_X = 0;
};

/// R_reg(X) = Q2(f)(X) + |A X - b|^2.
inline double objective_value(const ProblemInstance &inst, const Regularizer &reg, const Matrix &X) {
    return reg_value_matrix(X, reg) + data_fit(inst, X);
}

/// mu*rank(X), the indicator of rank <= K, or lambda*|X|_*, plus the fit.
inline double unrelaxed_objective(const ProblemInstance &inst, const Regularizer &reg, const Matrix &X) {
    const Vector s = singular_values(X);
    const int r = numerical_rank(s);
    const double fit = data_fit(inst, X);
    return std::visit(
        [&](const auto &p) -> double {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, MuRank>)
                return p.mu * r + fit;
            else if constexpr (std::is_same_v<T, FixedRank>)
                return r > p.k ? std::numeric_limits<double>::infinity() : fit;
            else
                return p.lambda * s.sum() + fit;
        },
        reg.get());
}

namespace detail {

inline void validate_solve(const ProblemInstance &inst, const SolveConfig &cfg, double step_rho) {
    const double nrm = inst.op.norm();
    if (!(nrm < 1.0))
        throw std::domain_error("solver requires |A| < 1; call normalize() on the instance first");
    if (!(step_rho > std::max(2.0, 2.0 * nrm * nrm)) || !std::isfinite(step_rho))
        throw std::invalid_argument("rho must exceed max(2, 2|A|^2)");
    if (cfg.max_iter < 1)
        throw std::invalid_argument("max_iter must be at least 1");
    if (!(cfg.tol > 0))
        throw std::invalid_argument("tol must be positive");
    if (inst.b.size() != inst.op.m())
        throw std::invalid_argument("b length does not match the operator");
    if (cfg.init && (cfg.init->rows() != inst.op.n1() || cfg.init->cols() != inst.op.n2()))
        throw std::invalid_argument("init has the wrong shape");
}

inline Matrix initial_point(const ProblemInstance &inst, const SolveConfig &cfg) {
    return cfg.init ? *cfg.init : Matrix::Zero(inst.op.n1(), inst.op.n2());
}

inline void finish(const ProblemInstance &inst, SolveResult &res, double fp_residual) {
    res.Z = compute_Z(inst, res.X);
    res.fixed_point_residual = fp_residual;
    res.rank_of_X = numerical_rank(res.X);
}

// Forward-backward iteration with an arbitrary spectral prox.
// prox(Y) -> SpectralPoint, value(SpectralPoint) -> regularizer value.
template <class Prox, class Value>
SolveResult run_fbs(const ProblemInstance &inst, const SolveConfig &cfg, Prox &&prox, Value &&value,
                    const Vector &init_sigma) {
    const double rho = cfg.rho;
    SolveResult res;
    res.X = initial_point(inst, cfg);
    res.objective_trace.push_back(value(SpectralPoint{res.X, init_sigma}) + data_fit(inst, res.X));

    auto forward = [&](const Matrix &X) -> Matrix {
        return X - (2.0 / rho) * inst.op.adjoint(inst.op.apply(X) - inst.b);
    };

    for (int k = 1; k <= cfg.max_iter; ++k) {
        SpectralPoint next = prox(forward(res.X));
        const double step = (next.X - res.X).norm();
        const double scale = std::max(1.0, res.X.norm());
        res.objective_trace.push_back(value(next) + data_fit(inst, next.X));
        res.X = std::move(next.X);
        res.iterations = k;
        if (step <= cfg.tol * scale) {
            res.converged = true;
            break;
        }
    }
    const double fp = (res.X - prox(forward(res.X)).X).norm();
    finish(inst, res, fp);
    return res;
}

inline SolveResult fbs_with_reg(const ProblemInstance &inst, const Regularizer &reg, const SolveConfig &cfg) {
    reg.check_shape(inst.op.n1(), inst.op.n2());
    validate_solve(inst, cfg, cfg.rho);
    const ProxParams p(cfg.rho);
    const Matrix X0 = initial_point(inst, cfg);
    return run_fbs(
        inst, cfg, [&](const Matrix &Y) { return reg_prox_spectral(Y, reg, p); },
        [&](const SpectralPoint &sp) { return reg_value_vector(sp.sigma, reg); }, singular_values(X0));
}

// Plain gradient descent on the fit (lambda = 0).
inline SolveResult fbs_least_squares(const ProblemInstance &inst, const SolveConfig &cfg) {
    validate_solve(inst, cfg, cfg.rho);
    return run_fbs(
        inst, cfg, [](const Matrix &Y) { return SpectralPoint{Y, Vector()}; },
        [](const SpectralPoint &) { return 0.0; }, Vector());
}

} // namespace detail

/// Forward-backward splitting:
///   Xhat = X_k - 2 A^*(A X_k - b) / rho,   X_{k+1} = prox(Xhat).
/// Stops when |X_{k+1} - X_k| <= tol * max(1, |X_k|). Requires |A| < 1.
inline SolveResult solve_fbs(const ProblemInstance &inst, const Regularizer &reg, const SolveConfig &cfg = {}) {
    return detail::fbs_with_reg(inst, reg, cfg);
}

/// ADMM on  Q2(f)(Y) + |A X - b|^2  subject to X = Y, scaled dual form with
/// fixed penalty beta = admm_penalty. Returns the Y iterate. May fail to
/// converge on non-convex problems; this is reported, not raised.
inline SolveResult solve_admm(const ProblemInstance &inst, const Regularizer &reg, const SolveConfig &cfg = {}) {
    reg.check_shape(inst.op.n1(), inst.op.n2());
    detail::validate_solve(inst, cfg, cfg.rho);
    const double beta = cfg.admm_penalty;
    if (!(beta > 0) || !std::isfinite(beta))
        throw std::invalid_argument("admm_penalty must be positive");
    // The Y-update is an envelope prox with weight beta/2 and needs beta > 2
    // for the non-convex penalties.
    if (!std::holds_alternative<Nuclear>(reg.get()) && !(beta > 2.0))
        throw std::invalid_argument("admm_penalty must exceed 2 for envelope penalties");

    const Index n1 = inst.op.n1(), n2 = inst.op.n2();
    const Matrix &Ad = inst.op.dense();
    Matrix system = 2.0 * Ad.transpose() * Ad;
    system.diagonal().array() += beta;
    Eigen::LLT<Matrix> llt(system);
    if (llt.info() != Eigen::Success)
        throw NumericalError("solve_admm: X-update system is not positive definite");
    const Vector rhs0 = 2.0 * Ad.transpose() * inst.b;

    auto prox = [&](const Matrix &V) -> SpectralPoint {
        if (const auto *nuc = std::get_if<Nuclear>(&reg.get())) {
            const Svd f = svd(V);
            Vector s = prox_nuclear_vec(f.sigma, nuc->lambda / beta);
            return {compose(f, s), std::move(s)};
        }
        return reg_prox_spectral(V, reg, ProxParams(beta));
    };

    SolveResult res;
    Matrix Y = detail::initial_point(inst, cfg);
    Matrix U = Matrix::Zero(n1, n2);
    res.objective_trace.push_back(objective_value(inst, reg, Y));
    for (int k = 1; k <= cfg.max_iter; ++k) {
        const Vector x = llt.solve(rhs0 + beta * (Y - U).reshaped());
        const Matrix X = x.reshaped(n1, n2);
        SpectralPoint next = prox(X + U);
        U += X - next.X;
        const double primal = (X - next.X).norm();
        const double dual = beta * (next.X - Y).norm();
        Y = std::move(next.X);
        res.objective_trace.push_back(reg_value_vector(next.sigma, reg) + data_fit(inst, Y));
        res.iterations = k;
        const double scale = std::max(1.0, Y.norm());
        if (primal <= cfg.tol * scale && dual <= cfg.tol * scale) {
            res.converged = true;
            break;
        }
    }
    res.X = std::move(Y);
    const ProxParams p(cfg.rho);
    const Matrix fwd = res.X - (2.0 / cfg.rho) * inst.op.adjoint(inst.op.apply(res.X) - inst.b);
    detail::finish(inst, res, (res.X - reg_prox_matrix(fwd, reg, p)).norm());
    return res;
}

/// Dispatches on cfg.algorithm.
inline SolveResult solve(const ProblemInstance &inst, const Regularizer &reg, const SolveConfig &cfg = {}) {
    return cfg.algorithm == Algorithm::admm ? solve_admm(inst, reg, cfg) : solve_fbs(inst, reg, cfg);
}

/// Runs `starts` solves: start 0 from cfg.init (zero by default), start i > 0
/// from an i.i.d. Gaussian matrix scaled to the norm of A^* b, drawn from
/// stream i of `seed`. Results are in start order.
inline std::vector<SolveResult> solve_multistart(const ProblemInstance &inst, const Regularizer &reg,
                                                 const SolveConfig &cfg, int starts, RngSeed seed) {
    if (starts < 1)
        throw std::invalid_argument("starts must be at least 1");
    const double scale = inst.op.adjoint(inst.b).norm();
    std::vector<SolveConfig> cfgs(static_cast<std::size_t>(starts), cfg);
    for (int i = 1; i < starts; ++i) {
        auto rng = seed.with_stream(static_cast<std::uint64_t>(i)).engine();
        Matrix G = detail::gaussian_matrix(inst.op.n1(), inst.op.n2(), 1.0, rng);
        cfgs[static_cast<std::size_t>(i)].init = G * (scale / std::max(G.norm(), 1e-300));
    }
    std::vector<SolveResult> out(static_cast<std::size_t>(starts));
    parallel_for(out.size(), [&](std::size_t i) { out[i] = solve(inst, reg, cfgs[i]); });
    return out;
}

// ---------------------------------------------------------------------------
// Nuclear-norm lambda bisection

struct BisectionProbe {
    double lambda;
    int rank;
    double data_fit;
    bool converged;
};

class BracketError : public std::runtime_error {
public:
    BracketError(const std::string &msg, std::vector<BisectionProbe> probes)
        : std::runtime_error(msg), probes_(std::move(probes)) {}
    const std::vector<BisectionProbe> &probes() const { return probes_; }

private:
    std::vector<BisectionProbe> probes_;
};

struct BisectionResult {
    double lambda;
    SolveResult result;
    std::vector<BisectionProbe> probes;
};

/// Searches for the smallest lambda whose nuclear-norm solution has rank at
/// most K_target, bisecting [lo, hi] down to width hi * 1e-3. Every probe is
/// logged; the returned lambda is the smallest probed value whose solution
/// satisfies the rank bound, so no monotonicity in lambda is assumed for
/// the answer's validity.
inline BisectionResult solve_nuclear_bisection(const ProblemInstance &inst, int K_target,
                                               std::pair<double, double> bracket, const SolveConfig &cfg = {}) {
    auto [lo, hi] = bracket;
    if (!(lo >= 0) || !(hi > lo) || !std::isfinite(hi))
        throw std::invalid_argument("bisection bracket must satisfy 0 <= lo < hi");
    if (K_target < 0)
        throw std::invalid_argument("K_target must be non-negative");

    std::vector<BisectionProbe> probes;
    auto run = [&](double lambda) {
        SolveResult r = lambda > 0 ? solve_fbs(inst, Regularizer::nuclear(lambda), cfg)
                                   : detail::fbs_least_squares(inst, cfg);
        probes.push_back({lambda, r.rank_of_X, data_fit(inst, r.X), r.converged});
        return r;
    };

    const Index full = std::min(inst.op.n1(), inst.op.n2());
    if (K_target >= full) {
        SolveResult r = run(lo);
        return {lo, std::move(r), std::move(probes)};
    }

    SolveResult best = run(hi);
    if (best.rank_of_X > K_target)
        throw BracketError("bisection bracket invalid: rank " + std::to_string(best.rank_of_X) +
                               " at lambda_hi exceeds target " + std::to_string(K_target),
                           probes);
    double best_lambda = hi;
    const double width = hi * 1e-3;
    while (hi - lo > width) {
        const double mid = 0.5 * (lo + hi);
        SolveResult r = run(mid);
        if (r.rank_of_X <= K_target) {
            hi = mid;
            best_lambda = mid;
            best = std::move(r);
        } else {
            lo = mid;
        }
    }
    if (best.rank_of_X > K_target)
        throw BracketError("bisection produced a solution above the target rank", probes);
    return {best_lambda, std::move(best), std::move(probes)};
}

// ---------------------------------------------------------------------------
// Best rank-K fit

struct RankOracleResult {
    Matrix X;
    double data_fit = 0.0;
    /// |X| exceeded 1e6 during the search: the infimum is likely not attained.
    bool norm_blowup = false;
    /// Eckart-Young closed form (operator is c times the vectorization map).
    bool exact = false;
    int iterations = 0;
};

inline constexpr double kBlowupNorm = 1e6;

namespace detail {

inline Vector lstsq(const Matrix &B, const Vector &b) {
    return B.completeOrthogonalDecomposition().solve(b);
}

struct AlsState {
    Matrix L;
    Matrix R;
    double res;
};

inline double als_residual(const ProblemInstance &inst, const Matrix &L, const Matrix &R) {
    return (inst.op.apply(L * R) - inst.b).squaredNorm();
}

inline AlsState als_sweep(const ProblemInstance &inst, const Matrix &R) {
    const Index n1 = inst.op.n1(), n2 = inst.op.n2(), K = R.rows();
    const Matrix L = lstsq(left_factor_map(inst.op, R), inst.b).reshaped(n1, K);
    Matrix Rn = lstsq(right_factor_map(inst.op, L), inst.b).reshaped(K, n2);
    AlsState s{L, std::move(Rn), 0.0};
    // column-wise balancing |L_k| = |R_k|
    for (Index k = 0; k < K; ++k) {
        const double a = s.L.col(k).norm(), c = s.R.row(k).norm();
        if (a > 0 && c > 0) {
            const double t = std::sqrt(c / a);
            s.L.col(k) *= t;
            s.R.row(k) /= t;
        }
    }
    s.res = als_residual(inst, s.L, s.R);
    return s;
}

// Best rank-K approximation of X in factored form, L = U sqrt(S),
// R = sqrt(S) V^T. Empty when X has numerical rank below K.
inline std::optional<AlsState> retract_rank(const ProblemInstance &inst, const Matrix &X, Index K) {
    const Svd f = svd(X);
    if (!(f.sigma(K - 1) > 1e-12 * std::max(1.0, f.sigma(0))))
        return std::nullopt;
    const Vector root = f.sigma.head(K).cwiseSqrt();
    AlsState s{f.U.leftCols(K) * root.asDiagonal(), root.asDiagonal() * f.V.leftCols(K).transpose(), 0.0};
    s.res = als_residual(inst, s.L, s.R);
    return s;
}

// One ALS run. After each sweep, the move between consecutive sweep outputs
// is repeated with a factor found by backtracking from twice the last
// accepted one, retracted to rank K, and kept if it lowers the residual.
// Runs whose infimum lies at infinity thus reach large norms in few sweeps.
inline RankOracleResult als_run(const ProblemInstance &inst, int K, std::mt19937_64 &rng) {
    Matrix R0 = gaussian_matrix(K, inst.op.n2(), 1.0, rng);
    AlsState cur = als_sweep(inst, R0);
    Matrix X_prev = cur.L * cur.R;
    const double floor = 1e-28 * std::max(1.0, inst.b.squaredNorm());
    double s = 1.0;
    RankOracleResult out;
    int it = 1;
    for (; it < 5000; ++it) {
        const double prev = cur.res;
        cur = als_sweep(inst, cur.R);
        const Matrix X_now = cur.L * cur.R;
        // backtrack from the current factor until the extrapolation helps
        bool accepted = false;
        for (; s >= 1.0; s *= 0.5) {
            auto e = retract_rank(inst, X_now + s * (X_now - X_prev), K);
            if (e && e->res < cur.res) {
                cur = std::move(*e);
                accepted = true;
                break;
            }
        }
        s = accepted ? 2.0 * s : 1.0;
        X_prev = X_now;
        if ((cur.L * cur.R).norm() > kBlowupNorm) {
            out.norm_blowup = true;
            break;
        }
        if (cur.res <= floor)
            break;
        if (std::abs(prev - cur.res) < 1e-12 * std::max(prev, 1e-300))
            break;
    }
    out.X = cur.L * cur.R;
    out.data_fit = cur.res;
    out.iterations = it;
    return out;
}

} // namespace detail

/// Best rank-K least-squares fit. For c times the vectorization map this is
/// the truncated SVD of reshape(b)/c; otherwise alternating least squares
/// on X = L R, best of `restarts` random starts. The heuristic result's fit
/// is an upper bound on the true minimum.
inline RankOracleResult best_rank_K_oracle(const ProblemInstance &inst, int K, int restarts, RngSeed seed) {
    if (K < 1)
        throw std::invalid_argument("best_rank_K_oracle: K must be at least 1");
    const Index n1 = inst.op.n1(), n2 = inst.op.n2();
    const Index k = std::min<Index>(K, std::min(n1, n2));

    if (auto c = inst.op.identity_scale(); c && *c != 0.0) {
        const Matrix Y = inst.b.reshaped(n1, n2) / *c;
        const Svd f = svd(Y);
        Vector s = f.sigma;
        s.tail(s.size() - k).setZero();
        RankOracleResult out;
        out.X = compose(f, s);
        out.data_fit = data_fit(inst, out.X);
        out.exact = true;
        return out;
    }

    std::optional<RankOracleResult> best;
    for (int r = 0; r < std::max(1, restarts); ++r) {
        auto rng = seed.with_stream(static_cast<std::uint64_t>(r)).engine();
        RankOracleResult cand = detail::als_run(inst, static_cast<int>(k), rng);
        if (!best || cand.data_fit < best->data_fit)
            best = std::move(cand);
    }
    return *best;
}

// ---------------------------------------------------------------------------
// Attainment diagnostics

struct AttainmentReport {
    int solution_rank = 0;
    double solution_fit = 0.0;
    /// Oracle fit and blow-up flag for K = 1 .. min(n1, n2) - 1.
    std::vector<double> oracle_fit;
    std::vector<bool> oracle_blowup;
    /// Some rank-K fit infimum (K below full rank) appears not to be attained.
    bool non_attainment = false;
    /// The solution may be presented as a global minimizer.
    bool minimizer_claim_allowed = true;

    std::string to_text() const {
        std::ostringstream out;
        out.precision(17);
        out << "solution_rank=" << solution_rank << '\n' << "solution_fit=" << solution_fit << '\n';
        for (std::size_t i = 0; i < oracle_fit.size(); ++i)
            out << "oracle_rank" << i + 1 << "_fit=" << oracle_fit[i]
                << " blowup=" << (oracle_blowup[i] ? "true" : "false") << '\n';
        out << "non_attainment=" << (non_attainment ? "true" : "false") << '\n';
        out << "minimizer_claim_allowed=" << (minimizer_claim_allowed ? "true" : "false") << '\n';
        return out.str();
    }
};

/// Probes whether the best low-rank fits are attained. When some rank-K
/// oracle diverges in norm while lowering the residual, that rank class has
/// no minimizer and the solver output is not reported as a global one.
inline AttainmentReport diagnose_attainment(const ProblemInstance &inst, const Matrix &X, int restarts,
                                            RngSeed seed) {
    AttainmentReport rep;
    rep.solution_rank = numerical_rank(X);
    rep.solution_fit = data_fit(inst, X);
    const int full = static_cast<int>(std::min(inst.op.n1(), inst.op.n2()));
    for (int K = 1; K < full; ++K) {
        const RankOracleResult o = best_rank_K_oracle(inst, K, restarts, seed.with_stream(1000u + K));
        rep.oracle_fit.push_back(o.data_fit);
        rep.oracle_blowup.push_back(o.norm_blowup);
        if (o.norm_blowup)
            rep.non_attainment = true;
    }
    rep.minimizer_claim_allowed = !rep.non_attainment;
    return rep;
}

} // namespace qenv
