#pragma once

// Plain-text CSV formats for matrices, operators and problem instances.
//
//   # matrix <rows> <cols>
//   <rows lines of comma-separated values>
//
//   # operator <m> <n1> <n2> column-major
//   <m lines of n1*n2 values>
//
// An instance file is an operator block followed by
//
//   # b
//   <m lines, one value each>
//   # X0            (optional)
//   # matrix ...
//   # eps           (optional, requires X0)
//   <m lines>
//
// Values are written with 17 significant digits so they read back exactly.

#include "qenv/problem.hpp"

#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace qenv::io {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline double parse_double(const std::string &s) {
    const char *begin = s.c_str();
    char *end = nullptr;
    const double v = std::strtod(begin, &end);
    while (end && (*end == ' ' || *end == '\t' || *end == '\r'))
        ++end;
    if (end == begin || (end && *end != '\0'))
        throw FormatError("not a number: '" + s + "'");
    return v;
}

namespace detail {

// Line reader that tracks line numbers for diagnostics.
class LineReader {
public:
    explicit LineReader(std::istream &in) : in_(in) {}

    bool next(std::string &line) {
        while (std::getline(in_, line)) {
            ++lineno_;
            if (!line.empty() && line.back() == '\r')
                line.pop_back();
            if (!line.empty())
                return true;
        }
        return false;
    }

    std::string expect(const char *what) {
        std::string line;
        if (!next(line))
            fail(std::string("unexpected end of file, expected ") + what);
        return line;
    }

    [[noreturn]] void fail(const std::string &msg) const {
        throw FormatError("line " + std::to_string(lineno_) + ": " + msg);
    }

    int lineno() const { return lineno_; }

private:
    std::istream &in_;
    int lineno_ = 0;
};

inline std::vector<std::string> split_header(const std::string &line) {
    std::istringstream ss(line);
    std::vector<std::string> out;
    std::string tok;
    while (ss >> tok)
        out.push_back(tok);
    return out;
}

inline Index parse_dim(const LineReader &r, const std::string &tok) {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(tok, &pos);
        if (pos != tok.size() || v < 1)
            throw std::invalid_argument(tok);
        return static_cast<Index>(v);
    } catch (const std::exception &) {
        r.fail("invalid dimension '" + tok + "'");
    }
}

inline std::vector<double> parse_row(const LineReader &r, const std::string &line) {
    std::vector<double> vals;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        try {
            vals.push_back(parse_double(cell));
        } catch (const FormatError &e) {
            r.fail(e.what());
        }
    }
    return vals;
}

inline Matrix read_rows(LineReader &r, Index rows, Index cols) {
    Matrix out(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        const auto vals = parse_row(r, r.expect("matrix row"));
        if (static_cast<Index>(vals.size()) != cols)
            r.fail("expected " + std::to_string(cols) + " values, got " +
                   std::to_string(vals.size()));
        for (Index j = 0; j < cols; ++j)
            out(i, j) = vals[static_cast<std::size_t>(j)];
    }
    return out;
}

inline void write_rows(std::ostream &out, const Matrix &M) {
    for (Index i = 0; i < M.rows(); ++i) {
        for (Index j = 0; j < M.cols(); ++j) {
            if (j)
                out << ',';
            out << format_double(M(i, j));
        }
        out << '\n';
    }
}

inline Matrix read_matrix_block(LineReader &r, const std::string &header) {
    const auto tok = split_header(header);
    if (tok.size() != 4 || tok[0] != "#" || tok[1] != "matrix")
        r.fail("expected '# matrix <rows> <cols>'");
    const Index rows = parse_dim(r, tok[2]);
    const Index cols = parse_dim(r, tok[3]);
    return read_rows(r, rows, cols);
}

inline LinearOp read_operator_block(LineReader &r, const std::string &header) {
    const auto tok = split_header(header);
    if (tok.size() != 6 || tok[0] != "#" || tok[1] != "operator")
        r.fail("expected '# operator <m> <n1> <n2> column-major'");
    if (tok[5] != "column-major")
        r.fail("unsupported vectorization order '" + tok[5] + "'");
    const Index m = parse_dim(r, tok[2]);
    const Index n1 = parse_dim(r, tok[3]);
    const Index n2 = parse_dim(r, tok[4]);
    return LinearOp(read_rows(r, m, n1 * n2), n1, n2);
}

inline Vector read_column(LineReader &r, Index m) {
    Vector v(m);
    for (Index i = 0; i < m; ++i) {
        const auto vals = parse_row(r, r.expect("vector entry"));
        if (vals.size() != 1)
            r.fail("expected a single value");
        v(i) = vals[0];
    }
    return v;
}

inline std::ofstream open_out(const std::string &path) {
    std::ofstream f(path);
    if (!f)
        throw std::runtime_error("cannot open '" + path + "' for writing");
    return f;
}

inline std::ifstream open_in(const std::string &path) {
    std::ifstream f(path);
    if (!f)
        throw std::runtime_error("cannot open '" + path + "' for reading");
    return f;
}

} // namespace detail

inline void write_matrix(std::ostream &out, const Matrix &M) {
    out << "# matrix " << M.rows() << ' ' << M.cols() << '\n';
    detail::write_rows(out, M);
}

inline Matrix read_matrix(std::istream &in) {
    detail::LineReader r(in);
    return detail::read_matrix_block(r, r.expect("'# matrix' header"));
}

inline void write_operator(std::ostream &out, const LinearOp &op) {
    out << "# operator " << op.m() << ' ' << op.n1() << ' ' << op.n2() << " column-major\n";
    detail::write_rows(out, op.dense());
}

inline LinearOp read_operator(std::istream &in) {
    detail::LineReader r(in);
    return detail::read_operator_block(r, r.expect("'# operator' header"));
}

inline void write_instance(std::ostream &out, const ProblemInstance &inst) {
    write_operator(out, inst.op);
    out << "# b\n";
    for (Index i = 0; i < inst.b.size(); ++i)
        out << format_double(inst.b(i)) << '\n';
    if (inst.truth) {
        out << "# X0\n";
        write_matrix(out, inst.truth->X0);
        out << "# eps\n";
        for (Index i = 0; i < inst.truth->eps.size(); ++i)
            out << format_double(inst.truth->eps(i)) << '\n';
    }
}

inline ProblemInstance read_instance(std::istream &in) {
    detail::LineReader r(in);
    LinearOp op = detail::read_operator_block(r, r.expect("'# operator' header"));
    if (r.expect("'# b'") != "# b")
        r.fail("expected '# b'");
    Vector b = detail::read_column(r, op.m());
    ProblemInstance inst{std::move(op), std::move(b), std::nullopt, {}};

    std::string line;
    if (!r.next(line))
        return inst;
    if (line != "# X0")
        r.fail("expected '# X0' or end of file");
    Matrix X0 = detail::read_matrix_block(r, r.expect("'# matrix' header"));
    if (X0.rows() != inst.op.n1() || X0.cols() != inst.op.n2())
        r.fail("X0 shape does not match the operator");
    Vector eps = inst.b - inst.op.apply(X0);
    if (r.next(line)) {
        if (line != "# eps")
            r.fail("expected '# eps'");
        eps = detail::read_column(r, inst.op.m());
    }
    const int K0 = numerical_rank(X0);
    inst.truth = GroundTruth{std::move(X0), std::move(eps), K0};
    return inst;
}

inline void save_matrix(const std::string &path, const Matrix &M) {
    auto f = detail::open_out(path);
    write_matrix(f, M);
}
inline Matrix load_matrix(const std::string &path) {
    auto f = detail::open_in(path);
    return read_matrix(f);
}
inline void save_operator(const std::string &path, const LinearOp &op) {
    auto f = detail::open_out(path);
    write_operator(f, op);
}
inline LinearOp load_operator(const std::string &path) {
    auto f = detail::open_in(path);
    return read_operator(f);
}
inline void save_instance(const std::string &path, const ProblemInstance &inst) {
    auto f = detail::open_out(path);
    write_instance(f, inst);
}
inline ProblemInstance load_instance(const std::string &path) {
    auto f = detail::open_in(path);
    return read_instance(f);
}

} // namespace qenv::io
