#pragma once

#include <cstring>
#include <span>
#include <vector>

#include "lanetape/tape.hpp"

namespace lanetape {

class Kernel;

// Forward node values for one batch, node-major: slot [node * c + lane].
// Produced by forward_batch; consumed by the store-mode reverse sweep.
struct BatchState {
    const Kernel* kernel = nullptr;
    std::vector<double> values;
};

// Immutable batch interpreter over a frozen copy of a tape. One call handles
// c paths at once (c = lane_width); lanes never interact, so results per lane
// are bitwise equal to the scalar replay of that path's inputs up to libm
// vectorization. All methods are const and safe to share across threads.
//
// Lane layouts are row-major with lanes contiguous: parameter j of lane l
// sits at param_lanes[j * c + l]; likewise randoms (N rows), outputs (m rows)
// and adjoints (M + N rows, parameters first).
class Kernel {
public:
    // Snapshots `tape`. The tape may keep growing afterwards; this kernel
    // replays the state it saw. lane_width must be 1, 4 or 8.
    static Kernel freeze(const Tape& tape, int lane_width) {
        if (tape.num_outputs() == 0)
            throw TapeError("freeze: tape has no outputs marked");
        if (lane_width != 1 && lane_width != 4 && lane_width != 8)
            throw TapeError("freeze: lane_width must be 1, 4 or 8, got " +
                            std::to_string(lane_width));
        Kernel k;
        k.nodes_ = tape.nodes();
        k.param_idx_ = tape.param_inputs();
        k.random_idx_ = tape.random_inputs();
        k.output_idx_ = tape.outputs();
        k.lanes_ = lane_width;
        return k;
    }

    int lane_width() const noexcept { return lanes_; }
    std::size_t size() const noexcept { return nodes_.size(); }
    std::size_t num_params() const noexcept { return param_idx_.size(); }
    std::size_t num_randoms() const noexcept { return random_idx_.size(); }
    std::size_t num_outputs() const noexcept { return output_idx_.size(); }

    // Bytes one BatchState occupies once filled.
    std::size_t state_bytes() const noexcept { return nodes_.size() * lanes_ * sizeof(double); }

    // Bytes of stored forward state needed to cover `paths` paths.
    std::size_t store_bytes(std::size_t paths) const noexcept {
        const std::size_t c = static_cast<std::size_t>(lanes_);
        return ((paths + c - 1) / c) * state_bytes();
    }

    // One forward pass over c paths. Every node value lands in `state`, which
    // doubles as reusable scratch when the caller does not keep it.
    void forward_batch(std::span<const double> param_lanes, std::span<const double> random_lanes,
                       std::span<double> output_lanes, BatchState& state) const {
        check_rows("forward_batch params", param_lanes.size(), param_idx_.size());
        check_rows("forward_batch randoms", random_lanes.size(), random_idx_.size());
        check_rows("forward_batch outputs", output_lanes.size(), output_idx_.size());
        state.kernel = this;
        state.values.resize(nodes_.size() * static_cast<std::size_t>(lanes_));
        switch (lanes_) {
            case 1: forward_impl<1>(param_lanes.data(), random_lanes.data(), state.values.data()); break;
            case 4: forward_impl<4>(param_lanes.data(), random_lanes.data(), state.values.data()); break;
            case 8: forward_impl<8>(param_lanes.data(), random_lanes.data(), state.values.data()); break;
        }
        gather_rows(state.values.data(), output_idx_, output_lanes.data());
    }

    // Reverse sweep from a stored forward pass (store mode). `adj` is the
    // per-node accumulator, reused across calls; it is resized and zeroed
    // here. Adjoint lanes come back parameters first, then randoms.
    void reverse_batch(const BatchState& state, std::span<const double> lambda_lanes,
                       std::span<double> adjoint_lanes, std::vector<double>& adj) const {
        if (state.kernel != this ||
            state.values.size() != nodes_.size() * static_cast<std::size_t>(lanes_))
            throw EvalError("reverse_batch: state does not belong to this kernel", 0);
        check_rows("reverse_batch lambda", lambda_lanes.size(), output_idx_.size());
        check_rows("reverse_batch adjoints", adjoint_lanes.size(),
                   param_idx_.size() + random_idx_.size());
        adj.assign(state.values.size(), 0.0);
        switch (lanes_) {
            case 1: reverse_impl<1>(state.values.data(), lambda_lanes.data(), adj.data()); break;
            case 4: reverse_impl<4>(state.values.data(), lambda_lanes.data(), adj.data()); break;
            case 8: reverse_impl<8>(state.values.data(), lambda_lanes.data(), adj.data()); break;
        }
        gather_rows(adj.data(), param_idx_, adjoint_lanes.data());
        gather_rows(adj.data(), random_idx_,
                    adjoint_lanes.data() + param_idx_.size() * static_cast<std::size_t>(lanes_));
    }

    // Recompute-mode reverse sweep: replays the forward pass into `state`
    // first, then runs the same sweep as above. Adjoints are bitwise equal
    // to the store-mode path because the replay is the identical code.
    void reverse_batch(std::span<const double> param_lanes, std::span<const double> random_lanes,
                       std::span<const double> lambda_lanes, std::span<double> adjoint_lanes,
                       BatchState& state, std::vector<double>& adj) const {
        check_rows("reverse_batch params", param_lanes.size(), param_idx_.size());
        check_rows("reverse_batch randoms", random_lanes.size(), random_idx_.size());
        state.kernel = this;
        state.values.resize(nodes_.size() * static_cast<std::size_t>(lanes_));
        switch (lanes_) {
            case 1: forward_impl<1>(param_lanes.data(), random_lanes.data(), state.values.data()); break;
            case 4: forward_impl<4>(param_lanes.data(), random_lanes.data(), state.values.data()); break;
            case 8: forward_impl<8>(param_lanes.data(), random_lanes.data(), state.values.data()); break;
        }
        reverse_batch(state, lambda_lanes, adjoint_lanes, adj);
    }

private:
    void check_rows(const char* what, std::size_t got, std::size_t rows) const {
        const std::size_t want = rows * static_cast<std::size_t>(lanes_);
        if (got != want)
            throw EvalError(std::string(what) + ": expected " + std::to_string(want) +
                                " doubles (" + std::to_string(rows) + " rows x " +
                                std::to_string(lanes_) + " lanes), got " + std::to_string(got),
                            0);
    }

    void gather_rows(const double* buf, const std::vector<std::uint32_t>& idx, double* out) const {
        const std::size_t c = static_cast<std::size_t>(lanes_);
        for (std::size_t r = 0; r < idx.size(); ++r)
            std::memcpy(out + r * c, buf + idx[r] * c, c * sizeof(double));
    }

    template <int C>
    void forward_impl(const double* params, const double* randoms, double* v) const {
        for (std::size_t j = 0; j < param_idx_.size(); ++j)
            std::memcpy(v + param_idx_[j] * C, params + j * C, C * sizeof(double));
        for (std::size_t j = 0; j < random_idx_.size(); ++j)
            std::memcpy(v + random_idx_[j] * C, randoms + j * C, C * sizeof(double));

        const TapeNode* nodes = nodes_.data();
        const std::size_t n = nodes_.size();
        for (std::size_t i = 0; i < n; ++i) {
            const TapeNode& nd = nodes[i];
            double* out = v + i * C;
            const double* a = v + nd.arg[0] * C;
            const double* b = v + nd.arg[1] * C;
            switch (nd.op) {
                case OpCode::Const:
                    for (int l = 0; l < C; ++l) out[l] = nd.literal;
                    break;
                case OpCode::Input: break;
                case OpCode::Add:
                    for (int l = 0; l < C; ++l) out[l] = a[l] + b[l];
                    break;
                case OpCode::Sub:
                    for (int l = 0; l < C; ++l) out[l] = a[l] - b[l];
                    break;
                case OpCode::Mul:
                    for (int l = 0; l < C; ++l) out[l] = a[l] * b[l];
                    break;
                case OpCode::Div:
                    for (int l = 0; l < C; ++l)
                        if (b[l] == 0.0) throw EvalError("division by zero", i, l);
                    for (int l = 0; l < C; ++l) out[l] = a[l] / b[l];
                    break;
                case OpCode::Neg:
                    for (int l = 0; l < C; ++l) out[l] = -a[l];
                    break;
                case OpCode::Exp:
                    for (int l = 0; l < C; ++l) out[l] = std::exp(a[l]);
                    break;
                case OpCode::Log:
                    for (int l = 0; l < C; ++l)
                        if (a[l] <= 0.0) throw EvalError("log of non-positive value", i, l);
                    for (int l = 0; l < C; ++l) out[l] = std::log(a[l]);
                    break;
                case OpCode::Sqrt:
                    for (int l = 0; l < C; ++l)
                        if (a[l] < 0.0) throw EvalError("sqrt of negative value", i, l);
                    for (int l = 0; l < C; ++l) out[l] = std::sqrt(a[l]);
                    break;
                case OpCode::Sin:
                    for (int l = 0; l < C; ++l) out[l] = std::sin(a[l]);
                    break;
                case OpCode::Cos:
                    for (int l = 0; l < C; ++l) out[l] = std::cos(a[l]);
                    break;
                case OpCode::PowInt: {
                    const long long e = static_cast<long long>(nd.literal);
                    if (e < 0)
                        for (int l = 0; l < C; ++l)
                            if (a[l] == 0.0)
                                throw EvalError("zero base with negative integer exponent", i, l);
                    for (int l = 0; l < C; ++l) out[l] = pow_by_int(a[l], e);
                    break;
                }
                case OpCode::MaxZero:
                    for (int l = 0; l < C; ++l) out[l] = a[l] > 0.0 ? a[l] : 0.0;
                    break;
                case OpCode::SelectGe: {
                    const double* x = v + nd.arg[1] * C;
                    const double* y = v + nd.arg[2] * C;
                    for (int l = 0; l < C; ++l) out[l] = a[l] >= 0.0 ? x[l] : y[l];
                    break;
                }
            }
        }
    }

    template <int C>
    void reverse_impl(const double* v, const double* lambda, double* adj) const {
        for (std::size_t o = 0; o < output_idx_.size(); ++o) {
            double* dst = adj + output_idx_[o] * C;
            const double* src = lambda + o * C;
            for (int l = 0; l < C; ++l) dst[l] += src[l];
        }

        const TapeNode* nodes = nodes_.data();
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            const TapeNode& nd = nodes[i];
            const double* bar = adj + i * C;
            const double* va = v + nd.arg[0] * C;
            const double* vb = v + nd.arg[1] * C;
            const double* vi = v + i * C;
            double* da = adj + nd.arg[0] * C;
            double* db = adj + nd.arg[1] * C;
            switch (nd.op) {
                case OpCode::Const:
                case OpCode::Input: break;
                case OpCode::Add:
                    for (int l = 0; l < C; ++l) da[l] += bar[l];
                    for (int l = 0; l < C; ++l) db[l] += bar[l];
                    break;
                case OpCode::Sub:
                    for (int l = 0; l < C; ++l) da[l] += bar[l];
                    for (int l = 0; l < C; ++l) db[l] -= bar[l];
                    break;
                case OpCode::Mul:
                    // arg[0] == arg[1] (squares) must see both contributions,
                    // hence the two passes instead of one fused loop.
                    for (int l = 0; l < C; ++l) da[l] += bar[l] * vb[l];
                    for (int l = 0; l < C; ++l) db[l] += bar[l] * va[l];
                    break;
                case OpCode::Div:
                    for (int l = 0; l < C; ++l) da[l] += bar[l] / vb[l];
                    for (int l = 0; l < C; ++l) db[l] -= bar[l] * vi[l] / vb[l];
                    break;
                case OpCode::Neg:
                    for (int l = 0; l < C; ++l) da[l] -= bar[l];
                    break;
                case OpCode::Exp:
                    for (int l = 0; l < C; ++l) da[l] += bar[l] * vi[l];
                    break;
                case OpCode::Log:
                    for (int l = 0; l < C; ++l) da[l] += bar[l] / va[l];
                    break;
                case OpCode::Sqrt:
                    // derivative at 0 taken as 0 (matches the scalar sweep)
                    for (int l = 0; l < C; ++l) da[l] += vi[l] > 0.0 ? bar[l] * 0.5 / vi[l] : 0.0;
                    break;
                case OpCode::Sin:
                    for (int l = 0; l < C; ++l) da[l] += bar[l] * std::cos(va[l]);
                    break;
                case OpCode::Cos:
                    for (int l = 0; l < C; ++l) da[l] -= bar[l] * std::sin(va[l]);
                    break;
                case OpCode::PowInt: {
                    const long long e = static_cast<long long>(nd.literal);
                    if (e != 0)
                        for (int l = 0; l < C; ++l)
                            da[l] += bar[l] * static_cast<double>(e) * pow_by_int(va[l], e - 1);
                    break;
                }
                case OpCode::MaxZero:
                    for (int l = 0; l < C; ++l) da[l] += va[l] > 0.0 ? bar[l] : 0.0;
                    break;
                case OpCode::SelectGe: {
                    double* dx = adj + nd.arg[1] * C;
                    double* dy = adj + nd.arg[2] * C;
                    for (int l = 0; l < C; ++l) dx[l] += va[l] >= 0.0 ? bar[l] : 0.0;
                    for (int l = 0; l < C; ++l) dy[l] += va[l] >= 0.0 ? 0.0 : bar[l];
                    break;
                }
            }
        }
    }

    std::vector<TapeNode> nodes_;
    std::vector<std::uint32_t> param_idx_;
    std::vector<std::uint32_t> random_idx_;
    std::vector<std::uint32_t> output_idx_;
    int lanes_ = 1;
};

}  // namespace lanetape
