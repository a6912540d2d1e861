// Recovers a rank-2 matrix from 75 Gaussian measurements with the
// mu*rank envelope and the nuclear norm, and prints both errors.

#include "qenv/qenv.hpp"

#include <cstdio>

int main() {
    using namespace qenv;
    const RngSeed seed{kDefaultSeed, 0};
    const LinearOp op = gen_gaussian_op(75, 10, 10, 1.0 / std::sqrt(75.0), seed.with_stream(1));
    const Matrix X0 = gen_low_rank(10, 10, 2, 1.0, seed.with_stream(2));
    const ProblemInstance inst = gen_instance(op, X0, NoiseStd{0.1}, seed.with_stream(3));

    const double s2 = singular_values(X0)(1);
    const NormalizedProblem env = normalize(inst, Regularizer::mu_rank(0.25 * s2 * s2));
    const SolveResult a = solve_fbs(env.instance, env.reg);
    std::printf("envelope: rank %d  fit %.6g  |X - X0| %.6g  (%d iterations)\n", a.rank_of_X,
                original_data_fit(env.instance, a.X), (a.X - X0).norm(), a.iterations);

    const NormalizedProblem nuc = normalize(inst, Regularizer::nuclear(1.0));
    const double hi = 2.02 * singular_values(nuc.instance.op.adjoint(nuc.instance.b))(0);
    const BisectionResult b = solve_nuclear_bisection(nuc.instance, 2, {0.0, hi});
    std::printf("nuclear:  rank %d  fit %.6g  |X - X0| %.6g  (lambda %.6g, %zu probes)\n", b.result.rank_of_X,
                original_data_fit(nuc.instance, b.result.X), (b.result.X - X0).norm(), b.lambda,
                b.probes.size());
    return 0;
}
