#pragma once

// Quadratic envelopes of the rank penalty and the fixed-rank indicator,
// their proximal maps, and the nuclear norm for comparison.
//
// Conventions: the envelope Q2(f) is taken with curvature 2, so that
// Q2(f)(x) + |x|^2 is the l.s.c. convex envelope of f(x) + |x|^2. Proximal
// maps use weight rho/2:
//
//   prox(y) = argmin_x  Q2(f)(x) + (rho/2) |x - y|^2,   rho > 2.
//
// All vector functions are absolutely symmetric; matrix versions act on
// singular values.

#include "qenv/spectral.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <variant>

namespace qenv {

struct MuRank {
    double mu;
};
struct FixedRank {
    int k;
};
struct Nuclear {
    double lambda;
};

/// Tagged choice of penalty.
class Regularizer {
public:
    using Variant = std::variant<MuRank, FixedRank, Nuclear>;

    static Regularizer mu_rank(double mu) {
        if (!(mu > 0) || !std::isfinite(mu))
            throw std::invalid_argument("mu must be positive and finite");
        return Regularizer(MuRank{mu});
    }
    static Regularizer fixed_rank(int k) {
        if (k < 1)
            throw std::invalid_argument("k must be at least 1");
        return Regularizer(FixedRank{k});
    }
    static Regularizer nuclear(double lambda) {
        if (!(lambda > 0) || !std::isfinite(lambda))
            throw std::invalid_argument("lambda must be positive and finite");
        return Regularizer(Nuclear{lambda});
    }

    const Variant &get() const { return v_; }

    /// "murank", "fixedrank" or "nuclear".
    std::string kind_name() const {
        return std::visit(
            [](const auto &r) -> std::string {
                using T = std::decay_t<decltype(r)>;
                if constexpr (std::is_same_v<T, MuRank>)
                    return "murank";
                else if constexpr (std::is_same_v<T, FixedRank>)
                    return "fixedrank";
                else
                    return "nuclear";
            },
            v_);
    }

    /// mu, K or lambda as a double.
    double param() const {
        return std::visit(
            [](const auto &r) -> double {
                using T = std::decay_t<decltype(r)>;
                if constexpr (std::is_same_v<T, MuRank>)
                    return r.mu;
                else if constexpr (std::is_same_v<T, FixedRank>)
                    return static_cast<double>(r.k);
                else
                    return r.lambda;
            },
            v_);
    }

    /// Checks K against the matrix shape.
    void check_shape(Index n1, Index n2) const {
        if (const auto *fr = std::get_if<FixedRank>(&v_)) {
            if (fr->k > std::min(n1, n2))
                throw std::invalid_argument("k exceeds min(n1, n2)");
        }
    }

private:
    explicit Regularizer(Variant v) : v_(v) {}
    Variant v_;
};

struct ProxParams {
    double rho;

    explicit ProxParams(double rho_) : rho(rho_) {
        if (!(rho > 2.0) || !std::isfinite(rho))
            throw std::invalid_argument("rho must be finite and strictly greater than 2");
    }
};

// ---------------------------------------------------------------------------
// Values

/// r_mu(sigma) = mu - max(sqrt(mu) - sigma, 0)^2
inline double r_mu(double sigma, double mu) {
    const double gap = std::max(std::sqrt(mu) - sigma, 0.0);
    return mu - gap * gap;
}

/// Q2(mu * card)(x) = sum_j r_mu(|x_j|).
inline double q2_mucard_value(const Vector &x, double mu) {
    double acc = 0.0;
    for (Index i = 0; i < x.size(); ++i)
        acc += r_mu(std::abs(x(i)), mu);
    return acc;
}

/// Q2(iota_K)(x), iota_K the indicator of card(x) <= K.
///
/// With z = |x| sorted non-increasing and T = sum_{i>K} z_i, the value is
/// max_{s>=0} g(s) where
///   g(s) = -sum_{i<=K} (max(z_i, s) - z_i)^2 + sum_{i>K} (2 s z_i - z_i^2).
/// g is concave; its maximizer solves sum_{i<=K, z_i<s} (s - z_i) = T, which
/// is linear between consecutive z_i and is found by a sweep.
inline double q2_iotaK_value(const Vector &x, int K) {
    const Index n = x.size();
    if (K < 1)
        throw std::invalid_argument("q2_iotaK_value: K must be at least 1");
    if (K >= n)
        return 0.0;
    const Vector z = sort_abs(x).values;
    const double tail = z.tail(n - K).sum();
    if (tail == 0.0)
        return 0.0;

    // j = number of head entries strictly below s, taken from the smallest.
    double s = 0.0;
    double head_sum = 0.0;
    for (int j = 1; j <= K; ++j) {
        head_sum += z(K - j);
        s = (tail + head_sum) / j;
        if (j == K || s <= z(K - j - 1))
            break;
    }

    double g = 0.0;
    for (Index i = 0; i < K; ++i) {
        const double d = std::max(z(i), s) - z(i);
        g -= d * d;
    }
    for (Index i = K; i < n; ++i)
        g += 2.0 * s * z(i) - z(i) * z(i);
    return g;
}

// ---------------------------------------------------------------------------
// Proximal maps

namespace detail {

// Three-case scalar map of the mu*card envelope prox for a non-negative
// input a, with sqrt(mu) replaced by a generic threshold t.
inline double mucard_prox_scalar(double a, double t, double rho) {
    if (a >= t)
        return a;
    if (a <= 2.0 * t / rho)
        return 0.0;
    return (rho * a - 2.0 * t) / (rho - 2.0);
}

} // namespace detail

/// Entrywise prox of Q2(mu * card) with weight rho/2.
inline Vector prox_q2_mucard(const Vector &y, double mu, ProxParams p) {
    const double t = std::sqrt(mu);
    Vector out(y.size());
    for (Index i = 0; i < y.size(); ++i) {
        const double a = std::abs(y(i));
        const double v = detail::mucard_prox_scalar(a, t, p.rho);
        out(i) = y(i) < 0 ? -v : v;
    }
    return out;
}

/// Prox of Q2(iota_K) with weight rho/2.
///
/// The envelope is the dual function max_{mu>=0} Q2(mu card)(x) - K mu, so
/// the prox is the mu*card prox at the saddle threshold t* = sqrt(mu*). The
/// threshold is the root of the non-increasing function
///   psi(t) = sum_i min(1, x_i(t) / t) - K,
/// where x_i(t) is the three-case mu*card map with threshold t. Between
/// consecutive breakpoints {a_i, rho a_i / 2} psi has the form alpha + beta/t,
/// so the root is located by a sweep and solved exactly on its segment.
inline Vector prox_q2_iotaK(const Vector &y, int K, ProxParams p) {
    if (K < 1)
        throw std::invalid_argument("prox_q2_iotaK: K must be at least 1");
    const Index n = y.size();
    if (K >= n)
        return y;

    const SortedAbsVector sorted = sort_abs(y);
    const Vector &a = sorted.values;
    const Index card = (a.array() > 0.0).count();
    if (card <= K)
        return y;

    const double rho = p.rho;
    auto psi = [&](double t) {
        double acc = 0.0;
        for (Index i = 0; i < card; ++i) {
            if (a(i) >= t)
                acc += 1.0;
            else if (a(i) > 2.0 * t / rho)
                acc += (rho * a(i) / t - 2.0) / (rho - 2.0);
        }
        return acc - K;
    };

    std::vector<double> breaks;
    breaks.reserve(static_cast<std::size_t>(2 * card));
    for (Index i = 0; i < card; ++i) {
        breaks.push_back(a(i));
        breaks.push_back(rho * a(i) / 2.0);
    }
    std::sort(breaks.begin(), breaks.end());
    breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());

    // psi > 0 below the smallest breakpoint (every non-zero entry is above t)
    // and tends to -K, so a sign change exists.
    double t_star = breaks.back();
    double lo = breaks.front();
    if (psi(lo) <= 0.0) {
        t_star = lo;
    } else {
        for (std::size_t j = 1; j < breaks.size(); ++j) {
            const double hi = breaks[j];
            const double psi_hi = psi(hi);
            if (psi_hi > 0.0) {
                lo = hi;
                continue;
            }
            if (psi_hi == 0.0) {
                t_star = hi;
                break;
            }
            // Segment (lo, hi): classify entries at the midpoint.
            const double mid = 0.5 * (lo + hi);
            double alpha = -static_cast<double>(K);
            double beta = 0.0;
            for (Index i = 0; i < card; ++i) {
                if (a(i) >= mid) {
                    alpha += 1.0;
                } else if (a(i) > 2.0 * mid / rho) {
                    alpha -= 2.0 / (rho - 2.0);
                    beta += rho * a(i) / (rho - 2.0);
                }
            }
            t_star = alpha < 0.0 ? std::clamp(-beta / alpha, lo, hi) : hi;
            break;
        }
    }

    Vector x(n);
    for (Index i = 0; i < n; ++i)
        x(i) = detail::mucard_prox_scalar(a(i), t_star, rho);
    return sorted.restore(x);
}

/// Soft thresholding: sign(y_i) max(|y_i| - tau, 0).
inline Vector prox_nuclear_vec(const Vector &y, double tau) {
    if (!(tau > 0))
        throw std::invalid_argument("prox_nuclear_vec: tau must be positive");
    Vector out(y.size());
    for (Index i = 0; i < y.size(); ++i) {
        const double v = std::max(std::abs(y(i)) - tau, 0.0);
        out(i) = y(i) < 0 ? -v : v;
    }
    return out;
}

struct HardThresholdResult {
    Vector x;
    /// Some |y_i| lies within 1e-12 of the threshold, where every value in
    /// [0, thr] is optimal; 0 was chosen.
    bool ambiguous = false;
};

/// Keeps entries with |y_i| > thr and zeroes the rest.
inline HardThresholdResult hard_threshold_vec(const Vector &y, double thr) {
    if (!(thr > 0))
        throw std::invalid_argument("hard_threshold_vec: thr must be positive");
    HardThresholdResult out{Vector::Zero(y.size()), false};
    for (Index i = 0; i < y.size(); ++i) {
        const double a = std::abs(y(i));
        if (std::abs(a - thr) <= 1e-12) {
            out.ambiguous = true;
            continue;
        }
        if (a > thr)
            out.x(i) = y(i);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Regularizer dispatch

/// Value of the (relaxed) regularizer on a spectrum or any vector.
inline double reg_value_vector(const Vector &x, const Regularizer &reg) {
    return std::visit(
        [&](const auto &r) -> double {
            using T = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<T, MuRank>)
                return q2_mucard_value(x, r.mu);
            else if constexpr (std::is_same_v<T, FixedRank>)
                return q2_iotaK_value(x, r.k);
            else
                return r.lambda * x.cwiseAbs().sum();
        },
        reg.get());
}

/// Vector prox matching the regularizer. For Nuclear(lambda) the soft
/// threshold is lambda / rho.
inline Vector reg_prox_vector(const Vector &y, const Regularizer &reg, ProxParams p) {
    return std::visit(
        [&](const auto &r) -> Vector {
            using T = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<T, MuRank>)
                return prox_q2_mucard(y, r.mu, p);
            else if constexpr (std::is_same_v<T, FixedRank>)
                return prox_q2_iotaK(y, r.k, p);
            else
                return prox_nuclear_vec(y, r.lambda / p.rho);
        },
        reg.get());
}

/// Matrix prox together with the spectrum of its output.
struct SpectralPoint {
    Matrix X;
    Vector sigma;
};

inline SpectralPoint reg_prox_spectral(const Matrix &X, const Regularizer &reg, ProxParams p) {
    reg.check_shape(X.rows(), X.cols());
    const Svd f = svd(X);
    Vector s = reg_prox_vector(f.sigma, reg, p);
    return {compose(f, s), std::move(s)};
}

inline Matrix reg_prox_matrix(const Matrix &X, const Regularizer &reg, ProxParams p) {
    return reg_prox_spectral(X, reg, p).X;
}

inline double reg_value_matrix(const Matrix &X, const Regularizer &reg) {
    reg.check_shape(X.rows(), X.cols());
    return reg_value_vector(singular_values(X), reg);
}

} // namespace qenv
