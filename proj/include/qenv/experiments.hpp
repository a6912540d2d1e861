#pragma once

// Seeded synthetic studies: rank versus data fit over regularization grids,
// fit and ground-truth distance over noise levels, and entrywise bias over
// repeated noise draws. All outputs are CSV.

#include "qenv/certificates.hpp"
#include "qenv/io.hpp"
#include "qenv/parallel.hpp"
#include "qenv/problem.hpp"
#include "qenv/solvers.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace qenv {

enum class Preset { fig1, fig2, fig3 };
enum class Scale { desk, paper };

inline constexpr std::uint64_t kDefaultSeed = 20240001;

struct SweepSpec {
    Index m = 75;
    Index n1 = 10;
    Index n2 = 10;
    /// Entry standard deviation of the operator; 0 means 1/sqrt(m).
    double op_std = 0.0;
    int K0 = 2;
    double gt_std = 1.0;
    /// Entrywise noise standard deviation for the rank/fit sweep.
    double noise_std = 0.1;
    /// Exact noise norms for the noise sweep.
    std::vector<double> noise_levels;
    /// Exact noise norm for the bias study.
    double noise_norm = 0.5;
    int instances = 100;
    /// Regularization grids in original units; empty selects the default
    /// 100-point log grid over [1e-3, 1e2] * |A^* b|_2.
    std::vector<double> mu_grid;
    std::vector<double> lambda_grid;
    std::uint64_t seed = kDefaultSeed;
    int delta_restarts = 4;
    SolveConfig solve;
    std::string output_path;

    double effective_op_std() const { return op_std > 0 ? op_std : 1.0 / std::sqrt(static_cast<double>(m)); }

    void validate() const {
        if (m < 1 || n1 < 1 || n2 < 1)
            throw std::invalid_argument("sweep: dimensions must be positive");
        if (K0 < 1 || K0 > std::min(n1, n2))
            throw std::invalid_argument("sweep: K0 must be in [1, min(n1, n2)]");
        if (op_std < 0 || !(gt_std > 0) || noise_std < 0 || noise_norm < 0)
            throw std::invalid_argument("sweep: standard deviations and norms must be non-negative");
        if (instances < 1)
            throw std::invalid_argument("sweep: instances must be at least 1");
        for (double v : noise_levels)
            if (!(v >= 0))
                throw std::invalid_argument("sweep: noise levels must be non-negative");
        for (const auto *g : {&mu_grid, &lambda_grid})
            for (double v : *g)
                if (!(v > 0))
                    throw std::invalid_argument("sweep: grid values must be positive");
    }
};

/// Default settings for each study. Desk scale: m = 75, 10 x 10, K0 = 2,
/// noise norms in steps of 0.25; paper scale: m = 300, 20 x 20, K0 = 4,
/// steps of 0.5.
inline SweepSpec preset_spec(Preset p, Scale s) {
    SweepSpec spec;
    const bool paper = s == Scale::paper;
    spec.m = paper ? 300 : 75;
    spec.n1 = spec.n2 = paper ? 20 : 10;
    spec.K0 = paper ? 4 : 2;
    const double step = paper ? 0.5 : 0.25;
    spec.noise_norm = paper ? 1.0 : 0.5;
    if (p == Preset::fig2)
        for (int i = 0; i <= 10; ++i)
            spec.noise_levels.push_back(step * i);
    return spec;
}

struct RunRecord {
    std::string reg_kind;
    double reg_param = 0.0;
    double noise_norm = 0.0;
    std::uint64_t seed = 0;
    int rank = 0;
    double data_fit = 0.0;
    double gt_dist = 0.0;
    int iters = 0;
    bool converged = false;
    std::string verdict;

    bool operator==(const RunRecord &) const = default;
};

/// Operator, ground truth and the instance for one noise draw.
struct SyntheticSetup {
    LinearOp op;
    Matrix X0;
};

inline SyntheticSetup make_setup(const SweepSpec &spec) {
    const RngSeed base{spec.seed, 0};
    LinearOp op = gen_gaussian_op(spec.m, spec.n1, spec.n2, spec.effective_op_std(), base.with_stream(1));
    Matrix X0 = gen_low_rank(spec.n1, spec.n2, spec.K0, spec.gt_std, base.with_stream(2));
    return {std::move(op), std::move(X0)};
}

/// n log-spaced points from lo to hi inclusive.
inline std::vector<double> log_grid(double lo, double hi, int n) {
    if (!(lo > 0) || !(hi >= lo) || n < 1)
        throw std::invalid_argument("log_grid: need 0 < lo <= hi and n >= 1");
    std::vector<double> g(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double t = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
        g[static_cast<std::size_t>(i)] = lo * std::pow(hi / lo, t);
    }
    return g;
}

inline double spectral_norm(const Matrix &X) { return singular_values(X)(0); }

namespace detail {

inline RunRecord make_record(const ProblemInstance &inst, const std::string &kind, double param,
                             double noise, std::uint64_t seed, const SolveResult &r) {
    RunRecord rec;
    rec.reg_kind = kind;
    rec.reg_param = param;
    rec.noise_norm = noise;
    rec.seed = seed;
    rec.rank = r.rank_of_X;
    rec.data_fit = original_data_fit(inst, r.X);
    rec.gt_dist = inst.truth ? (r.X - inst.truth->X0).norm() : 0.0;
    rec.iters = r.iterations;
    rec.converged = r.converged;
    rec.verdict = "na";
    return rec;
}

// Lazily computed delta estimates keyed by K, for one operator.
class DeltaCache {
public:
    DeltaCache(const LinearOp &op, int restarts, RngSeed seed) : op_(op), restarts_(restarts), seed_(seed) {}

    DeltaEstimate get(int K) {
        auto it = cache_.find(K);
        if (it == cache_.end())
            it = cache_.emplace(K, estimate_delta(op_, K, restarts_, seed_.with_stream(500u + K))).first;
        return it->second;
    }

private:
    const LinearOp &op_;
    int restarts_;
    RngSeed seed_;
    std::map<int, DeltaEstimate> cache_;
};

inline double nuclear_bracket_hi(const ProblemInstance &inst) {
    // At lambda >= 2 |A^* b|_2 the origin is the minimizer.
    return 2.0 * spectral_norm(inst.op.adjoint(inst.b)) * 1.01 + 1e-12;
}

} // namespace detail

/// Rank versus data fit: one FBS solve from zero per grid value for the
/// mu*rank envelope and for the nuclear norm. Records are ordered murank
/// grid first, then nuclear grid.
inline std::vector<RunRecord> run_rank_vs_fit(const SweepSpec &spec) {
    spec.validate();
    const SyntheticSetup setup = make_setup(spec);
    const RngSeed base{spec.seed, 0};
    const ProblemInstance inst = gen_instance(setup.op, setup.X0, NoiseStd{spec.noise_std}, base.with_stream(3));

    const double scale = spectral_norm(inst.op.adjoint(inst.b));
    const auto mu_grid = spec.mu_grid.empty() ? log_grid(1e-3 * scale, 1e2 * scale, 100) : spec.mu_grid;
    const auto lambda_grid =
        spec.lambda_grid.empty() ? log_grid(1e-3 * scale, 1e2 * scale, 100) : spec.lambda_grid;

    struct Job {
        bool nuclear;
        double param;
    };
    std::vector<Job> jobs;
    for (double mu : mu_grid)
        jobs.push_back({false, mu});
    for (double lambda : lambda_grid)
        jobs.push_back({true, lambda});

    std::vector<RunRecord> records(jobs.size());
    std::vector<std::optional<NormalizedProblem>> problems(jobs.size());
    std::vector<Matrix> solutions(jobs.size());
    parallel_for(jobs.size(), [&](std::size_t i) {
        const Job &j = jobs[i];
        const Regularizer reg = j.nuclear ? Regularizer::nuclear(j.param) : Regularizer::mu_rank(j.param);
        NormalizedProblem np = normalize(inst, reg);
        const SolveResult r = solve_fbs(np.instance, np.reg, spec.solve);
        records[i] = detail::make_record(np.instance, reg.kind_name(), j.param, inst.truth->eps.norm(), spec.seed, r);
        solutions[i] = r.X;
        problems[i] = std::move(np);
    });

    // Certificates, sequentially so the delta cache is filled in a fixed order.
    const NormalizedProblem ref = normalize(inst, Regularizer::mu_rank(1.0));
    detail::DeltaCache deltas(ref.instance.op, spec.delta_restarts, base);
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (jobs[i].nuclear)
            continue;
        const NormalizedProblem &np = *problems[i];
        const int K = std::max(1, records[i].rank);
        const DeltaEstimate d = deltas.get(2 * K);
        const double mu = std::get<MuRank>(np.reg.get()).mu;
        records[i].verdict =
            to_string(check_theorem_murank(np.instance, solutions[i], mu, d.delta, d.provenance).verdict);
    }
    return records;
}

/// Fit and ground-truth distance over exact noise norms: the fixed-rank
/// envelope with K = K0 against the nuclear norm with the smallest lambda
/// (by bisection) giving rank K0. A failed bracket yields a nuclear record
/// with verdict "bracket_error".
inline std::vector<RunRecord> run_noise_sweep(const SweepSpec &spec) {
    spec.validate();
    if (spec.noise_levels.empty())
        throw std::invalid_argument("noise sweep: noise_levels must be non-empty");
    const SyntheticSetup setup = make_setup(spec);
    const RngSeed base{spec.seed, 0};
    const std::size_t L = spec.noise_levels.size();

    std::vector<RunRecord> records(2 * L);
    parallel_for(L, [&](std::size_t i) {
        const double level = spec.noise_levels[i];
        const ProblemInstance inst = gen_instance(setup.op, setup.X0, NoiseNorm{level}, base.with_stream(3));
        const NormalizedProblem np = normalize(inst, Regularizer::fixed_rank(spec.K0));

        const SolveResult env = solve_fbs(np.instance, np.reg, spec.solve);
        RunRecord re = detail::make_record(np.instance, "fixedrank", spec.K0, level, spec.seed, env);
        const DeltaEstimate d = estimate_delta(np.instance.op, 2 * spec.K0, spec.delta_restarts, base.with_stream(7));
        re.verdict = to_string(check_theorem_fixedrank(np.instance, env.X, spec.K0, d.delta, d.provenance).verdict);
        records[2 * i] = re;

        const double c2 = np.instance.normalization.scale * np.instance.normalization.scale;
        try {
            const BisectionResult bis = solve_nuclear_bisection(
                np.instance, spec.K0, {0.0, detail::nuclear_bracket_hi(np.instance)}, spec.solve);
            records[2 * i + 1] =
                detail::make_record(np.instance, "nuclear", bis.lambda / c2, level, spec.seed, bis.result);
        } catch (const BracketError &) {
            RunRecord bad;
            bad.reg_kind = "nuclear";
            bad.noise_norm = level;
            bad.seed = spec.seed;
            bad.data_fit = std::nan("");
            bad.gt_dist = std::nan("");
            bad.verdict = "bracket_error";
            records[2 * i + 1] = bad;
        }
    });
    return records;
}

struct BiasSummary {
    int instances = 0;
    double noise_norm = 0.0;
    Matrix mean_env, sd_env, mean_nuc, sd_nuc;
    /// Fraction of entries whose mean lies within 2 sd / sqrt(N) of 0.
    double coverage_env = 0.0;
    double coverage_nuc = 0.0;
    /// Average over entries of |mean|.
    double mean_abs_bias_env = 0.0;
    double mean_abs_bias_nuc = 0.0;
    int bracket_failures = 0;
};

namespace detail {

inline void entry_stats(const std::vector<Matrix> &samples, Matrix &mean, Matrix &sd) {
    const std::size_t N = samples.size();
    mean = Matrix::Zero(samples[0].rows(), samples[0].cols());
    for (const auto &s : samples)
        mean += s;
    mean /= static_cast<double>(N);
    sd = Matrix::Zero(mean.rows(), mean.cols());
    if (N < 2)
        return;
    for (const auto &s : samples)
        sd.array() += (s - mean).array().square();
    sd = (sd / static_cast<double>(N - 1)).cwiseSqrt();
}

inline double coverage(const Matrix &mean, const Matrix &sd, std::size_t N) {
    const double root = std::sqrt(static_cast<double>(N));
    const auto inside = (mean.array().abs() <= 2.0 * sd.array() / root).count();
    return static_cast<double>(inside) / static_cast<double>(mean.size());
}

} // namespace detail

/// Entrywise mean and standard deviation of X - X0 over `instances` noise
/// draws of fixed norm, for the fixed-rank envelope (K = K0) and the
/// nuclear norm at the smallest lambda giving rank K0.
inline BiasSummary run_bias_experiment(const SweepSpec &spec) {
    spec.validate();
    const SyntheticSetup setup = make_setup(spec);
    const RngSeed base{spec.seed, 0};
    const auto N = static_cast<std::size_t>(spec.instances);

    std::vector<Matrix> env(N), nuc(N);
    std::vector<char> failed(N, 0);
    parallel_for(N, [&](std::size_t i) {
        const ProblemInstance inst =
            gen_instance(setup.op, setup.X0, NoiseNorm{spec.noise_norm}, base.with_stream(100 + i));
        const NormalizedProblem np = normalize(inst, Regularizer::fixed_rank(spec.K0));
        env[i] = solve_fbs(np.instance, np.reg, spec.solve).X - setup.X0;
        try {
            const BisectionResult bis = solve_nuclear_bisection(
                np.instance, spec.K0, {0.0, detail::nuclear_bracket_hi(np.instance)}, spec.solve);
            nuc[i] = bis.result.X - setup.X0;
        } catch (const BracketError &) {
            failed[i] = 1;
            nuc[i] = -setup.X0;
        }
    });

    BiasSummary out;
    out.instances = spec.instances;
    out.noise_norm = spec.noise_norm;
    for (char f : failed)
        out.bracket_failures += f;
    detail::entry_stats(env, out.mean_env, out.sd_env);
    detail::entry_stats(nuc, out.mean_nuc, out.sd_nuc);
    out.coverage_env = detail::coverage(out.mean_env, out.sd_env, N);
    out.coverage_nuc = detail::coverage(out.mean_nuc, out.sd_nuc, N);
    out.mean_abs_bias_env = out.mean_env.cwiseAbs().mean();
    out.mean_abs_bias_nuc = out.mean_nuc.cwiseAbs().mean();
    return out;
}

// ---------------------------------------------------------------------------
// CSV output

inline constexpr const char *kRecordHeader =
    "reg_kind,reg_param,noise_norm,seed,rank,data_fit,gt_dist,iters,converged,verdict";
inline constexpr const char *kBiasHeader = "row,col,mean_env,sd_env,mean_nuc,sd_nuc";

inline void write_records(std::ostream &out, const std::vector<RunRecord> &records) {
    using io::format_double;
    out << kRecordHeader << '\n';
    for (const auto &r : records)
        out << r.reg_kind << ',' << format_double(r.reg_param) << ',' << format_double(r.noise_norm) << ','
            << r.seed << ',' << r.rank << ',' << format_double(r.data_fit) << ',' << format_double(r.gt_dist)
            << ',' << r.iters << ',' << (r.converged ? "true" : "false") << ',' << r.verdict << '\n';
}

inline std::vector<RunRecord> read_records(std::istream &in) {
    std::string line;
    if (!std::getline(in, line) || line != kRecordHeader)
        throw io::FormatError("line 1: expected record header");
    std::vector<RunRecord> out;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty())
            continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ','))
            f.push_back(cell);
        if (f.size() != 10)
            throw io::FormatError("line " + std::to_string(lineno) + ": expected 10 fields");
        try {
            RunRecord r;
            r.reg_kind = f[0];
            r.reg_param = io::parse_double(f[1]);
            r.noise_norm = io::parse_double(f[2]);
            r.seed = std::stoull(f[3]);
            r.rank = std::stoi(f[4]);
            r.data_fit = io::parse_double(f[5]);
            r.gt_dist = io::parse_double(f[6]);
            r.iters = std::stoi(f[7]);
            if (f[8] != "true" && f[8] != "false")
                throw io::FormatError("converged must be true or false");
            r.converged = f[8] == "true";
            r.verdict = f[9];
            out.push_back(std::move(r));
        } catch (const std::exception &e) {
            throw io::FormatError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline void emit_csv(const std::vector<RunRecord> &records, const std::string &path) {
    auto f = io::detail::open_out(path);
    write_records(f, records);
    if (!f)
        throw std::runtime_error("write to '" + path + "' failed");
}

inline std::vector<RunRecord> load_csv(const std::string &path) {
    auto f = io::detail::open_in(path);
    return read_records(f);
}

/// Same data with one column group per regularizer kind, in order of first
/// appearance: <kind>_reg_param, <kind>_noise_norm, <kind>_rank,
/// <kind>_data_fit, <kind>_gt_dist. Shorter groups are padded with empty
/// cells.
inline void write_plot_data(std::ostream &out, const std::vector<RunRecord> &records) {
    std::vector<std::string> kinds;
    std::map<std::string, std::vector<const RunRecord *>> groups;
    for (const auto &r : records) {
        if (!groups.count(r.reg_kind))
            kinds.push_back(r.reg_kind);
        groups[r.reg_kind].push_back(&r);
    }
    static const char *cols[] = {"reg_param", "noise_norm", "rank", "data_fit", "gt_dist"};
    bool first = true;
    for (const auto &k : kinds)
        for (const char *c : cols) {
            out << (first ? "" : ",") << k << '_' << c;
            first = false;
        }
    out << '\n';
    std::size_t rows = 0;
    for (const auto &[k, g] : groups)
        rows = std::max(rows, g.size());
    for (std::size_t i = 0; i < rows; ++i) {
        first = true;
        for (const auto &k : kinds) {
            const auto &g = groups[k];
            for (int c = 0; c < 5; ++c) {
                if (!first)
                    out << ',';
                first = false;
                if (i >= g.size())
                    continue;
                const RunRecord &r = *g[i];
                switch (c) {
                case 0: out << io::format_double(r.reg_param); break;
                case 1: out << io::format_double(r.noise_norm); break;
                case 2: out << r.rank; break;
                case 3: out << io::format_double(r.data_fit); break;
                default: out << io::format_double(r.gt_dist); break;
                }
            }
        }
        out << '\n';
    }
}

inline void emit_plot_data(const std::vector<RunRecord> &records, const std::string &path) {
    auto f = io::detail::open_out(path);
    write_plot_data(f, records);
    if (!f)
        throw std::runtime_error("write to '" + path + "' failed");
}

inline void write_bias_csv(std::ostream &out, const BiasSummary &s) {
    using io::format_double;
    out << kBiasHeader << '\n';
    for (Index j = 0; j < s.mean_env.cols(); ++j)
        for (Index i = 0; i < s.mean_env.rows(); ++i)
            out << i << ',' << j << ',' << format_double(s.mean_env(i, j)) << ',' << format_double(s.sd_env(i, j))
                << ',' << format_double(s.mean_nuc(i, j)) << ',' << format_double(s.sd_nuc(i, j)) << '\n';
}

inline void emit_bias_csv(const BiasSummary &s, const std::string &path) {
    auto f = io::detail::open_out(path);
    write_bias_csv(f, s);
    if (!f)
        throw std::runtime_error("write to '" + path + "' failed");
}

/// Aggregate lines printed after a bias run.
inline std::string bias_summary_text(const BiasSummary &s) {
    std::ostringstream out;
    out.precision(17);
    out << "instances=" << s.instances << '\n'
        << "noise_norm=" << s.noise_norm << '\n'
        << "coverage_env=" << s.coverage_env << '\n'
        << "coverage_nuc=" << s.coverage_nuc << '\n'
        << "mean_abs_bias_env=" << s.mean_abs_bias_env << '\n'
        << "mean_abs_bias_nuc=" << s.mean_abs_bias_nuc << '\n'
        << "bracket_failures=" << s.bracket_failures << '\n';
    return out.str();
}

} // namespace qenv
