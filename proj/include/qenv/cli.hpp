#pragma once

// Command-line front end. run() holds all logic so it can be exercised
// in-process; tools/qenv.cpp only forwards argv.
//
// Precedence: built-in defaults < --config file < command-line flags.
// Exit codes: 0 success, 1 usage or input error, 2 numerical failure
// (non-convergence under --strict, failed decompositions).

#include "qenv/certificates.hpp"
#include "qenv/experiments.hpp"
#include "qenv/io.hpp"
#include "qenv/problem.hpp"
#include "qenv/solvers.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace qenv::cli {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Option names accepted both as --flags and as config-file keys.
inline const std::vector<std::string> &known_keys() {
    static const std::vector<std::string> keys = {
        "instance", "op",       "x0",   "x",       "reg",  "mu",   "k",  "lambda", "rho",
        "tol",      "max-iter", "restarts", "seed", "out", "preset", "scale", "strict",
        "algorithm", "m",       "n1",   "n2",      "k0",   "noise"};
    return keys;
}

struct ConfigEntry {
    std::string value;
    /// Line in the config file, 0 for command-line flags.
    int line = 0;
};

using RawConfig = std::map<std::string, ConfigEntry>;

inline std::string trim(const std::string &s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
        return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

/// Parses `key = value` lines; `#` starts a comment, later keys win.
/// "max_iter" is accepted as a spelling of "max-iter".
inline RawConfig parse_config(const std::string &text) {
    RawConfig out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos)
            line.erase(hash);
        line = trim(line);
        if (line.empty())
            continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        std::replace(key.begin(), key.end(), '_', '-');
        if (key.empty() || value.empty())
            throw UsageError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        if (std::find(known_keys().begin(), known_keys().end(), key) == known_keys().end())
            throw UsageError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        out[key] = {value, lineno};
    }
    return out;
}

/// Fully resolved settings.
struct Options {
    std::string subcommand;
    std::string instance, op, x0, x, out;
    std::string reg;
    std::optional<double> mu, lambda;
    std::optional<int> k;
    double rho = 2.1;
    double tol = 1e-9;
    int max_iter = 10000;
    int restarts = 4;
    std::uint64_t seed = kDefaultSeed;
    std::string preset;
    std::string scale = "desk";
    bool strict = false;
    std::string algorithm = "fbs";
    int m = 75, n1 = 10, n2 = 10, k0 = 2;
    double noise = 0.1;

    /// key=value lines for every setting, defaults included.
    std::string to_text() const {
        std::ostringstream s;
        s.precision(17);
        auto opt = [](const auto &v) {
            std::ostringstream t;
            t.precision(17);
            if (v)
                t << *v;
            else
                t << "unset";
            return t.str();
        };
        s << "config.subcommand=" << subcommand << '\n'
          << "config.instance=" << instance << '\n'
          << "config.op=" << op << '\n'
          << "config.x0=" << x0 << '\n'
          << "config.x=" << x << '\n'
          << "config.out=" << out << '\n'
          << "config.reg=" << reg << '\n'
          << "config.mu=" << opt(mu) << '\n'
          << "config.k=" << opt(k) << '\n'
          << "config.lambda=" << opt(lambda) << '\n'
          << "config.rho=" << rho << '\n'
          << "config.tol=" << tol << '\n'
          << "config.max-iter=" << max_iter << '\n'
          << "config.restarts=" << restarts << '\n'
          << "config.seed=" << seed << '\n'
          << "config.preset=" << preset << '\n'
          << "config.scale=" << scale << '\n'
          << "config.strict=" << (strict ? "true" : "false") << '\n'
          << "config.algorithm=" << algorithm << '\n'
          << "config.m=" << m << '\n'
          << "config.n1=" << n1 << '\n'
          << "config.n2=" << n2 << '\n'
          << "config.k0=" << k0 << '\n'
          << "config.noise=" << noise << '\n';
        return s.str();
    }
};

namespace detail {

inline std::string where(const std::string &key, const ConfigEntry &e) {
    return e.line > 0 ? "config line " + std::to_string(e.line) + ": " + key : "--" + key;
}

inline double to_double(const std::string &key, const ConfigEntry &e) {
    try {
        return io::parse_double(e.value);
    } catch (const std::exception &) {
        throw UsageError(where(key, e) + ": '" + e.value + "' is not a number");
    }
}

inline long long to_int(const std::string &key, const ConfigEntry &e) {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(e.value, &pos);
        if (pos != e.value.size())
            throw std::invalid_argument(e.value);
        return v;
    } catch (const std::exception &) {
        throw UsageError(where(key, e) + ": '" + e.value + "' is not an integer");
    }
}

inline bool to_bool(const std::string &key, const ConfigEntry &e) {
    if (e.value == "true" || e.value == "1" || e.value == "yes")
        return true;
    if (e.value == "false" || e.value == "0" || e.value == "no")
        return false;
    throw UsageError(where(key, e) + ": expected true or false");
}

inline void range_error(const std::string &key, const ConfigEntry &e, const std::string &what) {
    throw UsageError(where(key, e) + ": out of range (" + what + ")");
}

inline void one_of(const std::string &key, const ConfigEntry &e, std::initializer_list<const char *> allowed) {
    for (const char *a : allowed)
        if (e.value == a)
            return;
    std::string list;
    for (const char *a : allowed)
        list += (list.empty() ? "" : "|") + std::string(a);
    throw UsageError(where(key, e) + ": expected one of " + list);
}

} // namespace detail

/// Converts raw values into Options, validating ranges and naming the
/// offending key on error.
inline Options resolve(const std::string &subcommand, const RawConfig &raw) {
    using namespace detail;
    Options o;
    o.subcommand = subcommand;
    for (const auto &[key, e] : raw) {
        if (key == "instance") o.instance = e.value;
        else if (key == "op") o.op = e.value;
        else if (key == "x0") o.x0 = e.value;
        else if (key == "x") o.x = e.value;
        else if (key == "out") o.out = e.value;
        else if (key == "reg") {
            one_of(key, e, {"murank", "fixedrank", "nuclear"});
            o.reg = e.value;
        } else if (key == "mu") {
            const double v = to_double(key, e);
            if (!(v > 0) || !std::isfinite(v))
                range_error(key, e, "mu must be positive");
            o.mu = v;
        } else if (key == "lambda") {
            const double v = to_double(key, e);
            if (!(v > 0) || !std::isfinite(v))
                range_error(key, e, "lambda must be positive");
            o.lambda = v;
        } else if (key == "k") {
            const auto v = to_int(key, e);
            if (v < 1 || v > 1'000'000)
                range_error(key, e, "k must be at least 1");
            o.k = static_cast<int>(v);
        } else if (key == "rho") {
            o.rho = to_double(key, e);
            if (!(o.rho > 2) || !std::isfinite(o.rho))
                range_error(key, e, "rho must exceed 2");
        } else if (key == "tol") {
            o.tol = to_double(key, e);
            if (!(o.tol > 0) || !std::isfinite(o.tol))
                range_error(key, e, "tol must be positive");
        } else if (key == "max-iter") {
            const auto v = to_int(key, e);
            if (v < 1 || v > 100'000'000)
                range_error(key, e, "max-iter must be at least 1");
            o.max_iter = static_cast<int>(v);
        } else if (key == "restarts") {
            const auto v = to_int(key, e);
            if (v < 1 || v > 1'000'000)
                range_error(key, e, "restarts must be at least 1");
            o.restarts = static_cast<int>(v);
        } else if (key == "seed") {
            const auto v = to_int(key, e);
            if (v < 0)
                range_error(key, e, "seed must be non-negative");
            o.seed = static_cast<std::uint64_t>(v);
        } else if (key == "preset") {
            one_of(key, e, {"paper-fig1", "paper-fig2", "paper-fig3"});
            o.preset = e.value;
        } else if (key == "scale") {
            one_of(key, e, {"desk", "paper"});
            o.scale = e.value;
        } else if (key == "strict") {
            o.strict = to_bool(key, e);
        } else if (key == "algorithm") {
            one_of(key, e, {"fbs", "admm"});
            o.algorithm = e.value;
        } else if (key == "m" || key == "n1" || key == "n2" || key == "k0") {
            const auto v = to_int(key, e);
            if (v < 1 || v > 100'000)
                range_error(key, e, key + " must be positive");
            (key == "m" ? o.m : key == "n1" ? o.n1 : key == "n2" ? o.n2 : o.k0) = static_cast<int>(v);
        } else if (key == "noise") {
            o.noise = to_double(key, e);
            if (!(o.noise >= 0) || !std::isfinite(o.noise))
                range_error(key, e, "noise must be non-negative");
        } else {
            throw UsageError("unknown option '" + key + "'");
        }
    }
    return o;
}

namespace detail {

inline void require(bool cond, const std::string &msg) {
    if (!cond)
        throw UsageError(msg);
}

inline Regularizer regularizer_from(const Options &o) {
    require(!o.reg.empty(), "--reg: required (murank|fixedrank|nuclear)");
    if (o.reg == "murank") {
        require(o.mu.has_value(), "--mu: required for --reg murank");
        return Regularizer::mu_rank(*o.mu);
    }
    if (o.reg == "fixedrank") {
        require(o.k.has_value(), "--k: required for --reg fixedrank");
        return Regularizer::fixed_rank(*o.k);
    }
    require(o.lambda.has_value(), "--lambda: required for --reg nuclear");
    return Regularizer::nuclear(*o.lambda);
}

inline SolveConfig solve_config(const Options &o) {
    SolveConfig c;
    c.rho = o.rho;
    c.tol = o.tol;
    c.max_iter = o.max_iter;
    c.algorithm = o.algorithm == "admm" ? Algorithm::admm : Algorithm::fbs;
    return c;
}

inline ProblemInstance load_instance_opt(const Options &o) {
    require(!o.instance.empty(), "--instance: required");
    return io::load_instance(o.instance);
}

inline int cmd_solve(const Options &o, std::ostream &out, std::ostream &err) {
    const ProblemInstance inst = load_instance_opt(o);
    const Regularizer reg = regularizer_from(o);
    const NormalizedProblem np = normalize(inst, reg);
    const SolveResult r = solve(np.instance, np.reg, solve_config(o));

    std::ostringstream rep;
    rep.precision(17);
    rep << "converged=" << (r.converged ? "true" : "false") << '\n'
        << "iterations=" << r.iterations << '\n'
        << "rank=" << r.rank_of_X << '\n'
        << "objective=" << objective_value(np.instance, np.reg, r.X) << '\n'
        << "data_fit=" << data_fit(inst, r.X) << '\n'
        << "fixed_point_residual=" << r.fixed_point_residual << '\n'
        << "normalization_scale=" << np.instance.normalization.scale << '\n';
    if (inst.truth)
        rep << "gt_dist=" << (r.X - inst.truth->X0).norm() << '\n';
    out << rep.str();
    if (!o.out.empty()) {
        io::save_matrix(o.out, r.X);
        auto f = io::detail::open_out(o.out + ".report");
        f << rep.str();
    }
    if (!r.converged) {
        err << "warning: solver did not converge in " << r.iterations << " iterations\n";
        if (o.strict)
            return 2;
    }
    return 0;
}

inline int cmd_certify(const Options &o, std::ostream &out, std::ostream &) {
    const ProblemInstance inst = load_instance_opt(o);
    require(!o.x.empty(), "--x: required (solution matrix file)");
    const Matrix X = io::load_matrix(o.x);
    require(X.rows() == inst.op.n1() && X.cols() == inst.op.n2(), "--x: shape does not match the instance");
    const Regularizer reg = regularizer_from(o);
    const NormalizedProblem np = normalize(inst, reg);
    const RngSeed seed{o.seed, 0};

    CertificateReport rep;
    int K = 0;
    if (o.reg == "murank") {
        K = std::max(1, numerical_rank(X));
        const DeltaEstimate d = estimate_delta(np.instance.op, 2 * K, o.restarts, seed);
        rep = check_theorem_murank(np.instance, X, std::get<MuRank>(np.reg.get()).mu, d.delta, d.provenance);
    } else if (o.reg == "fixedrank") {
        K = *o.k;
        const DeltaEstimate d = estimate_delta(np.instance.op, 2 * K, o.restarts, seed);
        rep = check_theorem_fixedrank(np.instance, X, K, d.delta, d.provenance);
    } else {
        throw UsageError("--reg: certificates exist for murank and fixedrank only");
    }
    out << rep.to_text();
    if (np.instance.truth) {
        std::optional<double> mu;
        if (o.reg == "murank")
            mu = std::get<MuRank>(np.reg.get()).mu;
        const NoiseRegimeReport nr = check_noise_regime(
            np.instance, mu, std::min<int>(K, static_cast<int>(std::min(inst.op.n1(), inst.op.n2()))),
            rep.delta_estimate, &X);
        out << nr.to_text();
    }
    return 0;
}

inline int cmd_lrip(const Options &o, std::ostream &out, std::ostream &) {
    require(!o.op.empty() || !o.instance.empty(), "--op: required (or --instance)");
    require(o.k.has_value(), "--k: required");
    const LinearOp op = !o.op.empty() ? io::load_operator(o.op) : io::load_instance(o.instance).op;
    const DeltaEstimate d = estimate_delta(op, *o.k, o.restarts, RngSeed{o.seed, 0});
    out.precision(17);
    out << "delta=" << d.delta << '\n' << "provenance=" << to_string(d.provenance) << '\n';
    return 0;
}

inline SweepSpec sweep_spec(const Options &o, Preset p) {
    static const char *names[] = {"paper-fig1", "paper-fig2", "paper-fig3"};
    if (!o.preset.empty() && o.preset != names[static_cast<int>(p)])
        throw UsageError("--preset: '" + o.preset + "' does not match subcommand " + o.subcommand);
    SweepSpec spec = preset_spec(p, o.scale == "paper" ? Scale::paper : Scale::desk);
    spec.seed = o.seed;
    spec.delta_restarts = o.restarts;
    spec.solve = solve_config(o);
    spec.solve.algorithm = Algorithm::fbs;
    spec.output_path = !o.out.empty() ? o.out : std::string(names[static_cast<int>(p)]) + "-" + o.scale + ".csv";
    return spec;
}

inline std::string plot_path(const std::string &csv) {
    const auto dot = csv.rfind(".csv");
    return (dot != std::string::npos && dot + 4 == csv.size() ? csv.substr(0, dot) : csv) + ".plot.csv";
}

inline int finish_sweep(const Options &o, const SweepSpec &spec, const std::vector<RunRecord> &rec,
                        std::ostream &out, std::ostream &err) {
    emit_csv(rec, spec.output_path);
    emit_plot_data(rec, plot_path(spec.output_path));
    int unconverged = 0;
    for (const auto &r : rec)
        unconverged += r.converged ? 0 : 1;
    out << "records=" << rec.size() << '\n'
        << "unconverged=" << unconverged << '\n'
        << "csv=" << spec.output_path << '\n'
        << "plot_csv=" << plot_path(spec.output_path) << '\n';
    if (unconverged > 0) {
        err << "warning: " << unconverged << " solves did not converge\n";
        if (o.strict)
            return 2;
    }
    return 0;
}

inline int cmd_gen(const Options &o, std::ostream &out, std::ostream &) {
    require(!o.out.empty(), "--out: required");
    const RngSeed base{o.seed, 0};
    const LinearOp op = !o.op.empty()
                            ? io::load_operator(o.op)
                            : gen_gaussian_op(o.m, o.n1, o.n2, 1.0 / std::sqrt(static_cast<double>(o.m)),
                                              base.with_stream(1));
    Matrix X0;
    if (!o.x0.empty()) {
        X0 = io::load_matrix(o.x0);
        require(X0.rows() == op.n1() && X0.cols() == op.n2(), "--x0: shape does not match the operator");
    } else {
        require(o.k0 <= std::min(op.n1(), op.n2()), "--k0: exceeds min(n1, n2)");
        X0 = gen_low_rank(op.n1(), op.n2(), o.k0, 1.0, base.with_stream(2));
    }
    const ProblemInstance inst = gen_instance(op, X0, NoiseStd{o.noise}, base.with_stream(3));
    io::save_instance(o.out, inst);
    out << "wrote=" << o.out << '\n';
    return 0;
}

} // namespace detail

/// Runs the CLI on argv-style arguments (args[0] is the program name).
inline int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
    CLI::App app{"Low-rank recovery with quadratic-envelope regularization"};
    app.require_subcommand(1);
    app.fallthrough();

    std::map<std::string, std::string> flag_values;
    for (const auto &key : known_keys()) {
        if (key == "strict")
            continue;
        app.add_option("--" + key, flag_values[key]);
    }
    bool strict_flag = false;
    app.add_flag("--strict", strict_flag, "Treat non-convergence as an error");
    std::string config_path;
    app.add_option("--config", config_path, "File of key = value lines");

    static const std::vector<std::pair<std::string, std::string>> subs = {
        {"solve", "Solve an instance"},
        {"certify", "Check optimality certificates for a solution"},
        {"lrip", "Estimate the lower restricted isometry constant"},
        {"sweep-rank", "Rank versus data fit sweep"},
        {"sweep-noise", "Noise-level sweep"},
        {"bias", "Entrywise bias over repeated noise draws"},
        {"gen", "Generate a synthetic instance"}};
    for (const auto &[name, desc] : subs)
        app.add_subcommand(name, desc);

    std::vector<std::string> rev(args.rbegin(), args.rend());
    if (!rev.empty())
        rev.pop_back();
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp &) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError &e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }

    try {
        RawConfig raw;
        if (!config_path.empty()) {
            std::ifstream f(config_path);
            if (!f)
                throw UsageError("--config: cannot read '" + config_path + "'");
            std::stringstream ss;
            ss << f.rdbuf();
            raw = parse_config(ss.str());
        }
        for (const auto &key : known_keys()) {
            if (key == "strict")
                continue;
            if (app.count("--" + key) > 0)
                raw[key] = {flag_values[key], 0};
        }
        if (strict_flag)
            raw["strict"] = {"true", 0};

        const std::string sub = app.get_subcommands().front()->get_name();
        const Options o = resolve(sub, raw);
        out << o.to_text();

        if (sub == "solve")
            return detail::cmd_solve(o, out, err);
        if (sub == "certify")
            return detail::cmd_certify(o, out, err);
        if (sub == "lrip")
            return detail::cmd_lrip(o, out, err);
        if (sub == "gen")
            return detail::cmd_gen(o, out, err);
        if (sub == "bias") {
            const SweepSpec spec = detail::sweep_spec(o, Preset::fig3);
            const BiasSummary s = run_bias_experiment(spec);
            emit_bias_csv(s, spec.output_path);
            out << bias_summary_text(s) << "csv=" << spec.output_path << '\n';
            return 0;
        }
        const Preset p = sub == "sweep-rank" ? Preset::fig1 : Preset::fig2;
        const SweepSpec spec = detail::sweep_spec(o, p);
        const auto rec = p == Preset::fig1 ? run_rank_vs_fit(spec) : run_noise_sweep(spec);
        return detail::finish_sweep(o, spec, rec, out, err);
    } catch (const NumericalError &e) {
        err << "numerical error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception &e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

inline int run(int argc, char **argv, std::ostream &out, std::ostream &err) {
    return run(std::vector<std::string>(argv, argv + argc), out, err);
}

} // namespace qenv::cli
