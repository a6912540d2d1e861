#pragma once

// Dense spectral primitives: SVD with a fixed sign convention, lifting of
// absolutely symmetric vector functions to matrices, and sorting by
// magnitude.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace qenv {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Relative cutoff used wherever an exact rank is needed:
/// rank(X) = #{i : sigma_i > kRankTol * max(sigma_1, 1)}.
inline constexpr double kRankTol = 1e-6;

/// Raised when a decomposition fails to produce a usable result.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Full singular value decomposition X = U * diag(sigma) * V^T, where U is
/// n1 x n1, V is n2 x n2 and sigma has min(n1, n2) non-increasing entries.
struct Svd {
    Matrix U;
    Vector sigma;
    Matrix V;
};

namespace detail {

// Flip a column so its entry of largest magnitude is positive (lowest index
// wins ties). Returns true if a flip happened.
inline bool normalize_column_sign(Eigen::Ref<Vector> col) {
    Index best = 0;
    double best_abs = -1.0;
    for (Index i = 0; i < col.size(); ++i) {
        const double a = std::abs(col(i));
        if (a > best_abs) {
            best_abs = a;
            best = i;
        }
    }
    if (col.size() > 0 && col(best) < 0) {
        col = -col;
        return true;
    }
    return false;
}

inline void require_finite(const Matrix &X, const char *what) {
    if (!X.allFinite())
        throw std::invalid_argument(std::string(what) + ": non-finite entries");
}

} // namespace detail

/// SVD with a deterministic sign convention: for each singular triplet the
/// entry of largest magnitude in the left singular vector is positive.
inline Svd svd(const Matrix &X) {
    detail::require_finite(X, "svd");
    const Index n1 = X.rows(), n2 = X.cols();
    if (n1 == 0 || n2 == 0)
        throw std::invalid_argument("svd: empty matrix");

    Eigen::JacobiSVD<Matrix> dec(X, Eigen::ComputeFullU | Eigen::ComputeFullV);
    if (dec.info() != Eigen::Success)
        throw NumericalError("svd: decomposition did not converge");

    Svd out{dec.matrixU(), dec.singularValues(), dec.matrixV()};
    if (!out.U.allFinite() || !out.V.allFinite() || !out.sigma.allFinite())
        throw NumericalError("svd: non-finite factors");

    const Index n = out.sigma.size();
    for (Index i = 0; i < n; ++i) {
        if (detail::normalize_column_sign(out.U.col(i)))
            out.V.col(i) = -out.V.col(i);
    }
    // Null-space columns carry no coupling; normalize them independently.
    for (Index i = n; i < n1; ++i)
        detail::normalize_column_sign(out.U.col(i));
    for (Index i = n; i < n2; ++i)
        detail::normalize_column_sign(out.V.col(i));
    return out;
}

inline Vector singular_values(const Matrix &X) {
    detail::require_finite(X, "singular_values");
    Eigen::JacobiSVD<Matrix> dec(X);
    if (dec.info() != Eigen::Success)
        throw NumericalError("singular_values: decomposition did not converge");
    return dec.singularValues();
}

inline int numerical_rank(const Vector &sigma) {
    if (sigma.size() == 0)
        return 0;
    const double cutoff = kRankTol * std::max(sigma.maxCoeff(), 1.0);
    return static_cast<int>((sigma.array() > cutoff).count());
}

inline int numerical_rank(const Matrix &X) {
    return numerical_rank(singular_values(X));
}

inline double nuclear_norm(const Matrix &X) { return singular_values(X).sum(); }

/// U * diag(s) * V^T using the leading min(n1, n2) singular vectors.
inline Matrix compose(const Svd &f, const Vector &s) {
    const Index n = f.sigma.size();
    if (s.size() != n)
        throw std::invalid_argument("compose: spectrum length mismatch");
    return f.U.leftCols(n) * s.asDiagonal() * f.V.leftCols(n).transpose();
}

/// Evaluates an absolutely symmetric vector function on sigma(X).
template <class F>
double lift_spectral(F &&f_on_vector, const Matrix &X) {
    return f_on_vector(singular_values(X));
}

/// Applies an absolutely symmetric vector map to the spectrum of X while
/// keeping the singular vectors: U * diag(g(sigma(X))) * V^T.
template <class G>
Matrix lift_spectral_map(G &&g_on_vector, const Svd &f) {
    Vector mapped = g_on_vector(f.sigma);
    if (mapped.size() != f.sigma.size())
        throw std::invalid_argument(
            "lift_spectral_map: vector map changed the spectrum length");
    return compose(f, mapped);
}

template <class G>
Matrix lift_spectral_map(G &&g_on_vector, const Matrix &X) {
    return lift_spectral_map(std::forward<G>(g_on_vector), svd(X));
}

/// Magnitudes sorted non-increasing, with the bookkeeping to undo the sort.
/// input(permutation[k]) == signs(permutation[k]) * values(k).
struct SortedAbsVector {
    Vector values;
    std::vector<Index> permutation;
    Vector signs;

    /// Places sorted-order entries back at their original positions and
    /// reapplies the signs.
    Vector restore(const Vector &sorted_values) const {
        if (sorted_values.size() != values.size())
            throw std::invalid_argument("SortedAbsVector::restore: length mismatch");
        Vector out(values.size());
        for (Index k = 0; k < values.size(); ++k) {
            const Index i = permutation[static_cast<std::size_t>(k)];
            out(i) = signs(i) * sorted_values(k);
        }
        return out;
    }
};

inline SortedAbsVector sort_abs(const Vector &x) {
    const Index n = x.size();
    SortedAbsVector out;
    out.permutation.resize(static_cast<std::size_t>(n));
    std::iota(out.permutation.begin(), out.permutation.end(), Index{0});
    std::stable_sort(out.permutation.begin(), out.permutation.end(),
                     [&](Index a, Index b) { return std::abs(x(a)) > std::abs(x(b)); });
    out.values.resize(n);
    out.signs.resize(n);
    for (Index k = 0; k < n; ++k)
        out.values(k) = std::abs(x(out.permutation[static_cast<std::size_t>(k)]));
    for (Index i = 0; i < n; ++i)
        out.signs(i) = x(i) < 0 ? -1.0 : 1.0;
    return out;
}

} // namespace qenv
