#pragma once

// Measurement operators, problem instances, normalization and synthetic
// generators.

#include "qenv/envelopes.hpp"
#include "qenv/spectral.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <utility>
#include <variant>

namespace qenv {

/// Dense linear map from n1 x n2 matrices to R^m acting on the column-major
/// vectorization of its argument.
class LinearOp {
public:
    LinearOp(Matrix dense, Index n1, Index n2) : dense_(std::move(dense)), n1_(n1), n2_(n2) {
        if (n1 < 1 || n2 < 1 || dense_.rows() < 1)
            throw std::invalid_argument("LinearOp: dimensions must be positive");
        if (dense_.cols() != n1 * n2)
            throw std::invalid_argument("LinearOp: dense matrix must have n1*n2 columns");
        detail::require_finite(dense_, "LinearOp");
        Eigen::BDCSVD<Matrix> dec(dense_);
        norm_ = dec.singularValues().size() > 0 ? dec.singularValues()(0) : 0.0;
        detect_identity_scale();
    }

    static LinearOp scaled_identity(Index n1, Index n2, double c) {
        return LinearOp(c * Matrix::Identity(n1 * n2, n1 * n2), n1, n2);
    }

    Index m() const { return dense_.rows(); }
    Index n1() const { return n1_; }
    Index n2() const { return n2_; }
    const Matrix &dense() const { return dense_; }

    /// Spectral norm of the dense representation.
    double norm() const { return norm_; }

    /// c if the operator is exactly c times the vectorization map.
    std::optional<double> identity_scale() const { return identity_scale_; }

    Vector apply(const Matrix &X) const {
        if (X.rows() != n1_ || X.cols() != n2_)
            throw std::invalid_argument("LinearOp::apply: shape mismatch");
        return dense_ * X.reshaped();
    }

    Matrix adjoint(const Vector &y) const {
        if (y.size() != m())
            throw std::invalid_argument("LinearOp::adjoint: length mismatch");
        Vector v = dense_.transpose() * y;
        return v.reshaped(n1_, n2_);
    }

    LinearOp scaled(double c) const { return LinearOp(c * dense_, n1_, n2_); }

private:
    void detect_identity_scale() {
        if (dense_.rows() != dense_.cols())
            return;
        const double c = dense_(0, 0);
        for (Index j = 0; j < dense_.cols(); ++j)
            for (Index i = 0; i < dense_.rows(); ++i)
                if (dense_(i, j) != (i == j ? c : 0.0))
                    return;
        identity_scale_ = c;
    }

    Matrix dense_;
    Index n1_;
    Index n2_;
    double norm_ = 0.0;
    std::optional<double> identity_scale_;
};

struct GroundTruth {
    Matrix X0;
    Vector eps;
    int K0 = 0;
};

/// Scaling applied by normalize(): op and b were multiplied by `scale`.
struct Normalization {
    double scale = 1.0;
    std::optional<double> original_param;
};

struct ProblemInstance {
    LinearOp op;
    Vector b;
    std::optional<GroundTruth> truth;
    Normalization normalization;
};

inline double data_fit(const ProblemInstance &inst, const Matrix &X) {
    return (inst.op.apply(X) - inst.b).squaredNorm();
}

/// Data fit expressed in the units of the instance before normalization.
inline double original_data_fit(const ProblemInstance &inst, const Matrix &X) {
    const double c = inst.normalization.scale;
    return data_fit(inst, X) / (c * c);
}

struct NormalizedProblem {
    ProblemInstance instance;
    Regularizer reg;
};

/// Rescales (op, b) by c = 0.99/|A| when |A| >= 1 so that the envelope theory
/// applies, with mu and lambda multiplied by c^2. Minimizers of the
/// unrelaxed objective are unchanged (the objective is scaled by c^2).
inline NormalizedProblem normalize(const ProblemInstance &inst, const Regularizer &reg) {
    const double nrm = inst.op.norm();
    if (!(nrm > 0))
        throw std::invalid_argument("normalize: zero operator");
    if (nrm < 1.0)
        return {inst, reg};

    const double c = 0.99 / nrm;
    ProblemInstance out{inst.op.scaled(c), c * inst.b, inst.truth, inst.normalization};
    out.normalization.scale = inst.normalization.scale * c;
    out.normalization.original_param = reg.param();
    Regularizer r = std::visit(
        [&](const auto &v) -> Regularizer {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, MuRank>)
                return Regularizer::mu_rank(v.mu * c * c);
            else if constexpr (std::is_same_v<T, FixedRank>)
                return Regularizer::fixed_rank(v.k);
            else
                return Regularizer::nuclear(v.lambda * c * c);
        },
        reg.get());
    return {std::move(out), r};
}

// ---------------------------------------------------------------------------
// Seeding

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Stream i of a base seed uses engine seed base ^ splitmix64(i).
struct RngSeed {
    std::uint64_t base = 0;
    std::uint64_t stream = 0;

    std::mt19937_64 engine() const { return std::mt19937_64(base ^ splitmix64(stream)); }
    RngSeed with_stream(std::uint64_t s) const { return {base, s}; }
};

namespace detail {

inline Matrix gaussian_matrix(Index rows, Index cols, double std_dev, std::mt19937_64 &rng) {
    if (std_dev < 0)
        throw std::invalid_argument("standard deviation must be non-negative");
    Matrix out = Matrix::Zero(rows, cols);
    if (std_dev == 0)
        return out;
    std::normal_distribution<double> dist(0.0, std_dev);
    for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i)
            out(i, j) = dist(rng);
    return out;
}

} // namespace detail

/// Operator with i.i.d. N(0, std^2) entries in its dense representation.
inline LinearOp gen_gaussian_op(Index m, Index n1, Index n2, double std_dev, RngSeed seed) {
    if (m < 1 || n1 < 1 || n2 < 1)
        throw std::invalid_argument("gen_gaussian_op: dimensions must be positive");
    auto rng = seed.engine();
    return LinearOp(detail::gaussian_matrix(m, n1 * n2, std_dev, rng), n1, n2);
}

/// Product of n1 x K and K x n2 factors with i.i.d. N(0, std^2) entries.
inline Matrix gen_low_rank(Index n1, Index n2, Index K, double std_dev, RngSeed seed) {
    if (K < 1 || K > std::min(n1, n2))
        throw std::invalid_argument("gen_low_rank: K must be in [1, min(n1, n2)]");
    auto rng = seed.engine();
    const Matrix L = detail::gaussian_matrix(n1, K, std_dev, rng);
    const Matrix R = detail::gaussian_matrix(K, n2, std_dev, rng);
    return L * R;
}

struct NoiseStd {
    double std_dev;
};
/// Gaussian direction rescaled to an exact Euclidean norm.
struct NoiseNorm {
    double norm;
};
using NoiseSpec = std::variant<NoiseStd, NoiseNorm>;

inline Vector gen_noise(Index m, const NoiseSpec &noise, RngSeed seed) {
    auto rng = seed.engine();
    if (const auto *s = std::get_if<NoiseStd>(&noise))
        return detail::gaussian_matrix(m, 1, s->std_dev, rng).col(0);
    const double target = std::get<NoiseNorm>(noise).norm;
    if (target < 0)
        throw std::invalid_argument("noise norm must be non-negative");
    if (target == 0)
        return Vector::Zero(m);
    Vector dir = detail::gaussian_matrix(m, 1, 1.0, rng).col(0);
    return dir * (target / dir.norm());
}

/// b = A X0 + eps with the ground truth recorded.
inline ProblemInstance gen_instance(const LinearOp &op, const Matrix &X0, const NoiseSpec &noise,
                                    RngSeed seed) {
    Vector eps = gen_noise(op.m(), noise, seed);
    Vector b = op.apply(X0) + eps;
    GroundTruth gt{X0, std::move(eps), numerical_rank(X0)};
    return ProblemInstance{op, std::move(b), std::move(gt), {}};
}

/// Least-squares fit restricted to matrices whose range lies in Ran X0.
/// Minimum-norm coefficients are used when the restricted system is rank
/// deficient.
inline Matrix range_oracle_solution(const LinearOp &op, const Vector &b, const Matrix &X0) {
    const Svd f = svd(X0);
    const int r = numerical_rank(f.sigma);
    const Index n1 = op.n1(), n2 = op.n2();
    if (r == 0)
        return Matrix::Zero(n1, n2);
    const Matrix Q = f.U.leftCols(r);
    // vec(Q C) = (I_{n2} kron Q) vec(C)
    Matrix restricted(op.m(), r * n2);
    for (Index j = 0; j < n2; ++j)
        restricted.middleCols(j * r, r) = op.dense().middleCols(j * n1, n1) * Q;
    const Vector c = restricted.completeOrthogonalDecomposition().solve(b);
    return Q * c.reshaped(r, n2);
}

/// 2 x 2 instance A(X) = (x12, x21, x22), b = (1, 1, 0): the infimum of the
/// rank-1 residual is 0 and is not attained.
inline ProblemInstance pathological_instance() {
    Matrix dense = Matrix::Zero(3, 4);
    // column-major vec(X) = (x11, x21, x12, x22)
    dense(0, 2) = 1.0;
    dense(1, 1) = 1.0;
    dense(2, 3) = 1.0;
    Vector b(3);
    b << 1.0, 1.0, 0.0;
    return ProblemInstance{LinearOp(std::move(dense), 2, 2), std::move(b), std::nullopt, {}};
}

} // namespace qenv
