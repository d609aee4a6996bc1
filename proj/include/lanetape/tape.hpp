#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lanetape {

class TapeError : public std::runtime_error {
public:
    explicit TapeError(const std::string& what) : std::runtime_error(what) {}
};

// Evaluation-time failure (domain violation, stale state, size mismatch).
// `node` is the tape position that failed; `lane` is >= 0 for batched runs.
class EvalError : public std::runtime_error {
public:
    EvalError(const std::string& what, std::size_t node, long lane = -1)
        : std::runtime_error(what + " at node " + std::to_string(node) +
                             (lane >= 0 ? " lane " + std::to_string(lane) : "")),
          node_(node),
          lane_(lane) {}
    std::size_t node() const noexcept { return node_; }
    long lane() const noexcept { return lane_; }

private:
    std::size_t node_;
    long lane_;
};

enum class OpCode : std::uint8_t {
    Const,
    Input,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    PowInt,
    MaxZero,    // max(x, 0); derivative 0 at x == 0
    SelectGe,   // (d >= 0 ? x : y); adjoint flows only to the taken branch
};

constexpr int arity(OpCode op) noexcept {
    switch (op) {
        case OpCode::Const:
        case OpCode::Input: return 0;
        case OpCode::Neg:
        case OpCode::Exp:
        case OpCode::Log:
        case OpCode::Sqrt:
        case OpCode::Sin:
        case OpCode::Cos:
        case OpCode::PowInt:
        case OpCode::MaxZero: return 1;
        case OpCode::Add:
        case OpCode::Sub:
        case OpCode::Mul:
        case OpCode::Div: return 2;
        case OpCode::SelectGe: return 3;
    }
    return -1;
}

constexpr const char* op_name(OpCode op) noexcept {
    switch (op) {
        case OpCode::Const: return "const";
        case OpCode::Input: return "input";
        case OpCode::Add: return "add";
        case OpCode::Sub: return "sub";
        case OpCode::Mul: return "mul";
        case OpCode::Div: return "div";
        case OpCode::Neg: return "neg";
        case OpCode::Exp: return "exp";
        case OpCode::Log: return "log";
        case OpCode::Sqrt: return "sqrt";
        case OpCode::Sin: return "sin";
        case OpCode::Cos: return "cos";
        case OpCode::PowInt: return "pow_int";
        case OpCode::MaxZero: return "max_zero";
        case OpCode::SelectGe: return "select_ge";
    }
    return "?";
}

// Position of a node in a tape. Operands of node i always have index < i.
struct VarId {
    std::uint32_t index = 0;
    friend bool operator==(VarId a, VarId b) noexcept { return a.index == b.index; }
};

// One recorded operation. `literal` holds the constant value (Const), the
// input's default value (Input), or the integer exponent (PowInt).
struct TapeNode {
    OpCode op = OpCode::Const;
    std::array<std::uint32_t, 3> arg{0, 0, 0};
    double literal = 0.0;
};

enum class InputKind { Parameter, Random };

// x^n by squaring; n may be negative (checked for base 0 by callers).
inline double pow_by_int(double base, long long n) noexcept {
    bool invert = n < 0;
    unsigned long long e = invert ? static_cast<unsigned long long>(-n)
                                  : static_cast<unsigned long long>(n);
    double acc = 1.0, p = base;
    while (e) {
        if (e & 1u) acc *= p;
        p *= p;
        e >>= 1;
    }
    return invert ? 1.0 / acc : acc;
}

// Append-only record of a scalar program F : R^(M+N) -> R^m. Node order is
// topological by construction; replay with fixed inputs is deterministic.
// Build with one writer, then share freely: a tape is never mutated by
// evaluation.
class Tape {
public:
    VarId new_input(InputKind kind, double initial) {
        VarId id = append(TapeNode{OpCode::Input, {0, 0, 0}, initial});
        (kind == InputKind::Parameter ? param_inputs_ : random_inputs_).push_back(id.index);
        return id;
    }

    VarId constant(double value) { return append(TapeNode{OpCode::Const, {0, 0, 0}, value}); }

    VarId record(OpCode op, std::span<const VarId> args, double literal = 0.0) {
        if (op == OpCode::Input)
            throw TapeError("record: inputs must be created with new_input");
        const int want = arity(op);
        if (static_cast<int>(args.size()) != want)
            throw TapeError(std::string("record: ") + op_name(op) + " expects " +
                            std::to_string(want) + " args, got " + std::to_string(args.size()));
        TapeNode node{op, {0, 0, 0}, literal};
        for (std::size_t i = 0; i < args.size(); ++i) {
            if (args[i].index >= nodes_.size())
                throw TapeError(std::string("record: ") + op_name(op) + " arg " +
                                std::to_string(i) + " (node " + std::to_string(args[i].index) +
                                ") is not before node " + std::to_string(nodes_.size()));
            node.arg[i] = args[i].index;
        }
        return append(node);
    }

    VarId add(VarId a, VarId b) { return record2(OpCode::Add, a, b); }
    VarId sub(VarId a, VarId b) { return record2(OpCode::Sub, a, b); }
    VarId mul(VarId a, VarId b) { return record2(OpCode::Mul, a, b); }
    VarId div(VarId a, VarId b) { return record2(OpCode::Div, a, b); }
    VarId neg(VarId a) { return record1(OpCode::Neg, a); }
    VarId exp(VarId a) { return record1(OpCode::Exp, a); }
    VarId log(VarId a) { return record1(OpCode::Log, a); }
    VarId sqrt(VarId a) { return record1(OpCode::Sqrt, a); }
    VarId sin(VarId a) { return record1(OpCode::Sin, a); }
    VarId cos(VarId a) { return record1(OpCode::Cos, a); }
    VarId max_zero(VarId a) { return record1(OpCode::MaxZero, a); }

    VarId pow_int(VarId a, int exponent) {
        const std::array<VarId, 1> args{a};
        return record(OpCode::PowInt, args, static_cast<double>(exponent));
    }

    // (a >= b ? x : y), recorded as the difference a-b plus a 3-arg select so
    // every opcode keeps arity <= 3.
    VarId select_ge(VarId a, VarId b, VarId x, VarId y) {
        VarId d = sub(a, b);
        const std::array<VarId, 3> args{d, x, y};
        return record(OpCode::SelectGe, args);
    }

    void mark_output(VarId v) {
        if (v.index >= nodes_.size()) throw TapeError("mark_output: unknown node");
        outputs_.push_back(v.index);
    }

    const std::vector<TapeNode>& nodes() const noexcept { return nodes_; }
    const std::vector<std::uint32_t>& param_inputs() const noexcept { return param_inputs_; }
    const std::vector<std::uint32_t>& random_inputs() const noexcept { return random_inputs_; }
    const std::vector<std::uint32_t>& outputs() const noexcept { return outputs_; }

    std::size_t num_params() const noexcept { return param_inputs_.size(); }
    std::size_t num_randoms() const noexcept { return random_inputs_.size(); }
    std::size_t num_outputs() const noexcept { return outputs_.size(); }
    std::size_t size() const noexcept { return nodes_.size(); }

    // Line-oriented text form: header lines for the input/output index lists,
    // then one node per line `<index> <opcode> <args...> [literal]`.
    void dump(std::ostream& os) const {
        auto list = [&os](const char* tag, const std::vector<std::uint32_t>& ids) {
            os << tag << ':';
            for (auto i : ids) os << ' ' << i;
            os << '\n';
        };
        list("params", param_inputs_);
        list("randoms", random_inputs_);
        list("outputs", outputs_);
        char buf[32];
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const TapeNode& n = nodes_[i];
            os << i << ' ' << op_name(n.op);
            for (int a = 0; a < arity(n.op); ++a) os << ' ' << n.arg[a];
            if (n.op == OpCode::Const || n.op == OpCode::Input) {
                std::snprintf(buf, sizeof buf, "%.17g", n.literal);
                os << ' ' << buf;
            } else if (n.op == OpCode::PowInt) {
                os << ' ' << static_cast<long long>(n.literal);
            }
            os << '\n';
        }
    }

private:
    VarId append(TapeNode node) {
        nodes_.push_back(node);
        return VarId{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }
    VarId record1(OpCode op, VarId a) {
        const std::array<VarId, 1> args{a};
        return record(op, args);
    }
    VarId record2(OpCode op, VarId a, VarId b) {
        const std::array<VarId, 2> args{a, b};
        return record(op, args);
    }

    std::vector<TapeNode> nodes_;
    std::vector<std::uint32_t> param_inputs_;
    std::vector<std::uint32_t> random_inputs_;
    std::vector<std::uint32_t> outputs_;
};

// Per-node values kept from a forward pass; required by reverse_seeded.
struct EvalState {
    const Tape* tape = nullptr;
    std::vector<double> values;
};

namespace detail {

inline void check_domain_scalar(const TapeNode& n, const double* values, std::size_t i) {
    switch (n.op) {
        case OpCode::Div:
            if (values[n.arg[1]] == 0.0) throw EvalError("division by zero", i);
            break;
        case OpCode::Log:
            if (values[n.arg[0]] <= 0.0) throw EvalError("log of non-positive value", i);
            break;
        case OpCode::Sqrt:
            if (values[n.arg[0]] < 0.0) throw EvalError("sqrt of negative value", i);
            break;
        case OpCode::PowInt:
            if (values[n.arg[0]] == 0.0 && n.literal < 0.0)
                throw EvalError("zero base with negative integer exponent", i);
            break;
        default: break;
    }
}

}  // namespace detail

// Forward replay. Returns the m output values; `state` keeps every node value
// for a subsequent reverse sweep.
inline std::vector<double> forward_eval(const Tape& tape, std::span<const double> params,
                                        std::span<const double> randoms, EvalState& state) {
    if (params.size() != tape.num_params())
        throw EvalError("forward_eval: expected " + std::to_string(tape.num_params()) +
                            " parameter values, got " + std::to_string(params.size()),
                        0);
    if (randoms.size() != tape.num_randoms())
        throw EvalError("forward_eval: expected " + std::to_string(tape.num_randoms()) +
                            " random values, got " + std::to_string(randoms.size()),
                        0);
    state.tape = &tape;
    state.values.assign(tape.size(), 0.0);
    double* v = state.values.data();
    for (std::size_t i = 0; i < tape.param_inputs().size(); ++i)
        v[tape.param_inputs()[i]] = params[i];
    for (std::size_t i = 0; i < tape.random_inputs().size(); ++i)
        v[tape.random_inputs()[i]] = randoms[i];

    const auto& nodes = tape.nodes();
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const TapeNode& n = nodes[i];
        switch (n.op) {
            case OpCode::Const: v[i] = n.literal; break;
            case OpCode::Input: break;  // already seeded (or default if caller chose)
            case OpCode::Add: v[i] = v[n.arg[0]] + v[n.arg[1]]; break;
            case OpCode::Sub: v[i] = v[n.arg[0]] - v[n.arg[1]]; break;
            case OpCode::Mul: v[i] = v[n.arg[0]] * v[n.arg[1]]; break;
            case OpCode::Div:
                detail::check_domain_scalar(n, v, i);
                v[i] = v[n.arg[0]] / v[n.arg[1]];
                break;
            case OpCode::Neg: v[i] = -v[n.arg[0]]; break;
            case OpCode::Exp: v[i] = std::exp(v[n.arg[0]]); break;
            case OpCode::Log:
                detail::check_domain_scalar(n, v, i);
                v[i] = std::log(v[n.arg[0]]);
                break;
            case OpCode::Sqrt:
                detail::check_domain_scalar(n, v, i);
                v[i] = std::sqrt(v[n.arg[0]]);
                break;
            case OpCode::Sin: v[i] = std::sin(v[n.arg[0]]); break;
            case OpCode::Cos: v[i] = std::cos(v[n.arg[0]]); break;
            case OpCode::PowInt:
                detail::check_domain_scalar(n, v, i);
                v[i] = pow_by_int(v[n.arg[0]], static_cast<long long>(n.literal));
                break;
            case OpCode::MaxZero: v[i] = v[n.arg[0]] > 0.0 ? v[n.arg[0]] : 0.0; break;
            case OpCode::SelectGe: v[i] = v[n.arg[0]] >= 0.0 ? v[n.arg[1]] : v[n.arg[2]]; break;
        }
    }

    std::vector<double> out(tape.num_outputs());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[tape.outputs()[i]];
    return out;
}

/// forward_eval without keeping state.
inline std::vector<double> forward_eval(const Tape& tape, std::span<const double> params,
                                        std::span<const double> randoms) {
    EvalState scratch;
    return forward_eval(tape, params, randoms, scratch);
}

// Seeded reverse sweep: one backward pass accumulating adjoints
// sum_i lambda_i * d y_i / d x. Local partials are recomputed from the stored
// forward values, never stored at record time. Returns the adjoints of all
// inputs, parameters first (M entries) then randoms (N entries).
inline std::vector<double> reverse_seeded(const Tape& tape, const EvalState& state,
                                          std::span<const double> lambda) {
    if (state.tape != &tape || state.values.size() != tape.size())
        throw EvalError("reverse_seeded: state does not belong to this tape", 0);
    if (lambda.size() != tape.num_outputs())
        throw EvalError("reverse_seeded: lambda size " + std::to_string(lambda.size()) +
                            " != output count " + std::to_string(tape.num_outputs()),
                        0);
    if (tape.num_outputs() == 0) throw EvalError("reverse_seeded: tape has no outputs", 0);

    const double* v = state.values.data();
    std::vector<double> adj(tape.size(), 0.0);
    for (std::size_t i = 0; i < lambda.size(); ++i) adj[tape.outputs()[i]] += lambda[i];

    const auto& nodes = tape.nodes();
    for (std::size_t i = nodes.size(); i-- > 0;) {
        const TapeNode& n = nodes[i];
        const double bar = adj[i];
        switch (n.op) {
            case OpCode::Const:
            case OpCode::Input: break;
            case OpCode::Add:
                adj[n.arg[0]] += bar;
                adj[n.arg[1]] += bar;
                break;
            case OpCode::Sub:
                adj[n.arg[0]] += bar;
                adj[n.arg[1]] -= bar;
                break;
            case OpCode::Mul:
                adj[n.arg[0]] += bar * v[n.arg[1]];
                adj[n.arg[1]] += bar * v[n.arg[0]];
                break;
            case OpCode::Div: {
                const double b = v[n.arg[1]];
                adj[n.arg[0]] += bar / b;
                adj[n.arg[1]] -= bar * v[i] / b;  // v[i] = a/b
                break;
            }
            case OpCode::Neg: adj[n.arg[0]] -= bar; break;
            case OpCode::Exp: adj[n.arg[0]] += bar * v[i]; break;
            case OpCode::Log: adj[n.arg[0]] += bar / v[n.arg[0]]; break;
            case OpCode::Sqrt:
                // d sqrt at 0 taken as 0: the truncated-variance composition
                // max_zero -> sqrt must produce pathwise derivative 0, not inf*0.
                if (v[i] > 0.0) adj[n.arg[0]] += bar * 0.5 / v[i];
                break;
            case OpCode::Sin: adj[n.arg[0]] += bar * std::cos(v[n.arg[0]]); break;
            case OpCode::Cos: adj[n.arg[0]] -= bar * std::sin(v[n.arg[0]]); break;
            case OpCode::PowInt: {
                const long long e = static_cast<long long>(n.literal);
                if (e != 0)
                    adj[n.arg[0]] += bar * static_cast<double>(e) * pow_by_int(v[n.arg[0]], e - 1);
                break;
            }
            case OpCode::MaxZero:
                if (v[n.arg[0]] > 0.0) adj[n.arg[0]] += bar;
                break;
            case OpCode::SelectGe:
                adj[v[n.arg[0]] >= 0.0 ? n.arg[1] : n.arg[2]] += bar;
                break;
        }
    }

    std::vector<double> result;
    result.reserve(tape.num_params() + tape.num_randoms());
    for (auto i : tape.param_inputs()) result.push_back(adj[i]);
    for (auto i : tape.random_inputs()) result.push_back(adj[i]);
    return result;
}

// Central differences of lambda . y in each parameter input, randoms held
// fixed. The verification oracle for reverse_seeded.
inline std::vector<double> finite_diff_gradient(const Tape& tape, std::span<const double> params,
                                                std::span<const double> randoms,
                                                std::span<const double> lambda, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_diff_gradient: h must be > 0");
    if (lambda.size() != tape.num_outputs())
        throw EvalError("finite_diff_gradient: lambda size mismatch", 0);
    std::vector<double> x(params.begin(), params.end());
    std::vector<double> grad(tape.num_params());
    EvalState scratch;
    auto weighted = [&](const std::vector<double>& p) {
        const auto y = forward_eval(tape, p, randoms, scratch);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += lambda[i] * y[i];
        return s;
    };
    for (std::size_t j = 0; j < x.size(); ++j) {
        const double saved = x[j];
        x[j] = saved + h;
        const double up = weighted(x);
        x[j] = saved - h;
        const double down = weighted(x);
        x[j] = saved;
        grad[j] = (up - down) / (2.0 * h);
    }
    return grad;
}

}  // namespace lanetape
