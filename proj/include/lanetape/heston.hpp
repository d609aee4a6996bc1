#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lanetape/tape.hpp"

namespace lanetape {

// Model constants and state. mu and s0 enter programs as plain constants;
// kappa, theta, xi, rho and v0 are differentiable parameters.
struct HestonParams {
    double mu = 0.0;
    double kappa = 1.0;
    double theta = 0.04;
    double xi = 0.5;
    double rho = -0.7;
    double v0 = 0.04;
    double s0 = 100.0;
};

inline void validate(const HestonParams& p) {
    auto bad = [](const std::string& what) {
        throw std::invalid_argument("HestonParams: " + what);
    };
    if (!(p.s0 > 0.0)) bad("s0 must be > 0");
    if (!(p.v0 >= 0.0)) bad("v0 must be >= 0");
    if (!(p.theta >= 0.0)) bad("theta must be >= 0");
    if (!(p.kappa >= 0.0)) bad("kappa must be >= 0");
    if (!(p.xi >= 0.0)) bad("xi must be >= 0");
    if (!(std::fabs(p.rho) < 1.0)) bad("rho must satisfy |rho| < 1");
    if (!std::isfinite(p.mu)) bad("mu must be finite");
}

// Piecewise-constant leverage surface on a rectangular grid. Lookup takes
// the cell whose lower-left node is <= (t, S), clamped to the grid, so the
// surface extends flat beyond the outermost nodes.
struct LeverageGrid {
    std::vector<double> t_nodes;  // strictly ascending
    std::vector<double> s_nodes;  // strictly ascending
    std::vector<double> values;   // t-major, t_nodes.size() * s_nodes.size()

    std::size_t rows() const noexcept { return t_nodes.size(); }
    std::size_t cols() const noexcept { return s_nodes.size(); }
    std::size_t size() const noexcept { return values.size(); }
    double at(std::size_t row, std::size_t col) const { return values[row * cols() + col]; }
};

inline void validate(const LeverageGrid& g) {
    auto bad = [](const std::string& what) {
        throw std::invalid_argument("LeverageGrid: " + what);
    };
    if (g.t_nodes.empty() || g.s_nodes.empty()) bad("node lists must be non-empty");
    for (std::size_t i = 1; i < g.t_nodes.size(); ++i)
        if (!(g.t_nodes[i] > g.t_nodes[i - 1])) bad("t_nodes must be strictly ascending");
    for (std::size_t i = 1; i < g.s_nodes.size(); ++i)
        if (!(g.s_nodes[i] > g.s_nodes[i - 1])) bad("s_nodes must be strictly ascending");
    if (g.values.size() != g.t_nodes.size() * g.s_nodes.size())
        bad("values must hold t_nodes x s_nodes entries");
    for (double v : g.values)
        if (!std::isfinite(v) || v < 0.0) bad("values must be finite and >= 0");
}

// Largest i with nodes[i] <= x, clamped to 0 from below.
inline std::size_t floor_index(const std::vector<double>& nodes, double x) {
    auto it = std::upper_bound(nodes.begin(), nodes.end(), x);
    return it == nodes.begin() ? 0 : static_cast<std::size_t>(it - nodes.begin() - 1);
}

inline std::size_t leverage_row_index(const LeverageGrid& g, double t) {
    return floor_index(g.t_nodes, t);
}
inline std::size_t leverage_col_index(const LeverageGrid& g, double s) {
    return floor_index(g.s_nodes, s);
}
inline double leverage_value(const LeverageGrid& g, double t, double s) {
    return g.at(leverage_row_index(g, t), leverage_col_index(g, s));
}

// Undiscounted vanilla payoff observed at a step boundary.
struct Instrument {
    enum class Kind { Call, Put };
    Kind kind = Kind::Call;
    double strike = 100.0;
    std::size_t maturity_step = 1;  // payoff reads S after this many steps
};

struct McSettings {
    std::size_t paths = 0;
    std::size_t steps = 0;
    double dt = 0.0;
    std::uint64_t seed = 0;
};

inline void validate(const McSettings& mc) {
    if (mc.paths == 0) throw std::invalid_argument("mc: paths must be > 0");
    if (mc.steps == 0) throw std::invalid_argument("mc: steps must be > 0");
    if (!(mc.dt > 0.0)) throw std::invalid_argument("mc: dt must be > 0");
}

struct ModelSpec {
    HestonParams heston;
    LeverageGrid grid;
    std::vector<Instrument> instruments;
    McSettings mc;
};

inline void validate(const ModelSpec& s) {
    validate(s.heston);
    validate(s.grid);
    validate(s.mc);
    if (s.instruments.empty()) throw std::invalid_argument("instruments: list must be non-empty");
    for (std::size_t i = 0; i < s.instruments.size(); ++i) {
        const Instrument& ins = s.instruments[i];
        if (!(ins.strike > 0.0))
            throw std::invalid_argument("instruments[" + std::to_string(i) +
                                        "]: strike must be > 0");
        if (ins.maturity_step == 0 || ins.maturity_step > s.mc.steps)
            throw std::invalid_argument("instruments[" + std::to_string(i) +
                                        "]: maturity_step must be in [1, steps]");
    }
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
    ModelSpec s;
    const auto& h = j.at("heston");
    s.heston.kappa = h.at("kappa").get<double>();
    s.heston.theta = h.at("theta").get<double>();
    s.heston.xi = h.at("xi").get<double>();
    s.heston.rho = h.at("rho").get<double>();
    s.heston.v0 = h.at("v0").get<double>();
    s.heston.s0 = h.at("s0").get<double>();
    s.heston.mu = h.at("mu").get<double>();

    const auto& g = j.at("grid");
    s.grid.t_nodes = g.at("t_nodes").get<std::vector<double>>();
    s.grid.s_nodes = g.at("s_nodes").get<std::vector<double>>();
    for (const auto& row : g.at("values")) {
        auto r = row.get<std::vector<double>>();
        if (r.size() != s.grid.s_nodes.size())
            throw std::invalid_argument("grid: every values row needs one entry per s_node");
        s.grid.values.insert(s.grid.values.end(), r.begin(), r.end());
    }

    for (const auto& ji : j.at("instruments")) {
        Instrument ins;
        const std::string kind = ji.at("kind").get<std::string>();
        if (kind == "call")
            ins.kind = Instrument::Kind::Call;
        else if (kind == "put")
            ins.kind = Instrument::Kind::Put;
        else
            throw std::invalid_argument("instruments: kind must be \"call\" or \"put\"");
        ins.strike = ji.at("strike").get<double>();
        ins.maturity_step = ji.at("maturity_step").get<std::size_t>();
        s.instruments.push_back(ins);
    }

    const auto& mc = j.at("mc");
    s.mc.paths = mc.at("paths").get<std::size_t>();
    s.mc.steps = mc.at("steps").get<std::size_t>();
    s.mc.dt = mc.at("dt").get<double>();
    s.mc.seed = mc.at("seed").get<std::uint64_t>();

    validate(s);
    return s;
}

inline nlohmann::ordered_json to_json(const ModelSpec& s) {
    nlohmann::ordered_json j;
    j["heston"] = {{"kappa", s.heston.kappa}, {"theta", s.heston.theta}, {"xi", s.heston.xi},
                   {"rho", s.heston.rho},     {"v0", s.heston.v0},       {"s0", s.heston.s0},
                   {"mu", s.heston.mu}};
    j["grid"]["t_nodes"] = s.grid.t_nodes;
    j["grid"]["s_nodes"] = s.grid.s_nodes;
    auto& rows = j["grid"]["values"];
    rows = nlohmann::ordered_json::array();
    for (std::size_t r = 0; r < s.grid.rows(); ++r) {
        std::vector<double> row(s.grid.values.begin() + r * s.grid.cols(),
                                s.grid.values.begin() + (r + 1) * s.grid.cols());
        rows.push_back(row);
    }
    j["instruments"] = nlohmann::ordered_json::array();
    for (const auto& ins : s.instruments)
        j["instruments"].push_back(
            {{"kind", ins.kind == Instrument::Kind::Call ? "call" : "put"},
             {"strike", ins.strike},
             {"maturity_step", ins.maturity_step}});
    j["mc"] = {{"paths", s.mc.paths},
               {"steps", s.mc.steps},
               {"dt", s.mc.dt},
               {"seed", s.mc.seed}};
    return j;
}

inline ModelSpec load_model_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config file: " + path);
    nlohmann::json j;
    in >> j;
    return model_spec_from_json(j);
}

// Differentiable parameter vector: [kappa, theta, xi, rho, v0, L row-major].
inline constexpr std::size_t heston_free_params = 5;

inline std::vector<double> pack_params(const HestonParams& p, const LeverageGrid& g) {
    std::vector<double> x{p.kappa, p.theta, p.xi, p.rho, p.v0};
    x.insert(x.end(), g.values.begin(), g.values.end());
    return x;
}

// Rebuilds (params, grid) from a packed vector, keeping mu/s0 and the grid
// nodes from the base objects.
inline void unpack_params(std::span<const double> x, HestonParams& p, LeverageGrid& g) {
    if (x.size() != heston_free_params + g.size())
        throw std::invalid_argument("unpack_params: packed size mismatch");
    p.kappa = x[0];
    p.theta = x[1];
    p.xi = x[2];
    p.rho = x[3];
    p.v0 = x[4];
    std::copy(x.begin() + heston_free_params, x.end(), g.values.begin());
}

struct HestonProgram {
    Tape tape;
    std::vector<double> initial_params;  // packed truth the tape was built at
    std::size_t steps = 0;
    double dt = 0.0;
};

// Records the full simulation as one tape: log-Euler for S, full-truncation
// Euler for V, piecewise-constant leverage via select chains over S (the time
// row is fixed per step at record time), payoffs through max_zero. Random
// inputs are ordered (dZ1, dZ2) per step; outputs follow instrument order.
inline HestonProgram record_heston_program(const HestonParams& p, const LeverageGrid& g,
                                           const std::vector<Instrument>& instruments,
                                           std::size_t steps, double dt) {
    validate(p);
    validate(g);
    if (steps == 0) throw std::invalid_argument("record_heston_program: steps must be > 0");
    if (!(dt > 0.0)) throw std::invalid_argument("record_heston_program: dt must be > 0");
    if (instruments.empty())
        throw std::invalid_argument("record_heston_program: no instruments");
    for (const auto& ins : instruments)
        if (ins.maturity_step == 0 || ins.maturity_step > steps)
            throw std::invalid_argument("record_heston_program: maturity_step out of range");

    HestonProgram prog;
    prog.steps = steps;
    prog.dt = dt;
    prog.initial_params = pack_params(p, g);
    Tape& T = prog.tape;

    const VarId kappa = T.new_input(InputKind::Parameter, p.kappa);
    const VarId theta = T.new_input(InputKind::Parameter, p.theta);
    const VarId xi = T.new_input(InputKind::Parameter, p.xi);
    const VarId rho = T.new_input(InputKind::Parameter, p.rho);
    const VarId v0 = T.new_input(InputKind::Parameter, p.v0);
    std::vector<VarId> lev(g.size());
    for (std::size_t i = 0; i < g.size(); ++i)
        lev[i] = T.new_input(InputKind::Parameter, g.values[i]);

    std::vector<VarId> z;
    z.reserve(2 * steps);
    for (std::size_t k = 0; k < 2 * steps; ++k) z.push_back(T.new_input(InputKind::Random, 0.0));

    const VarId one = T.constant(1.0);
    const VarId c_dt = T.constant(dt);
    const VarId c_sqrt_dt = T.constant(std::sqrt(dt));
    const VarId c_mu_dt = T.constant(p.mu * dt);
    const VarId c_half_dt = T.constant(0.5 * dt);
    std::vector<VarId> s_node_c(g.cols());
    for (std::size_t j = 1; j < g.cols(); ++j) s_node_c[j] = T.constant(g.s_nodes[j]);

    // sqrt(1 - rho^2) * sqrt(dt), hoisted out of the step loop
    const VarId rho_comp = T.mul(T.sqrt(T.sub(one, T.mul(rho, rho))), c_sqrt_dt);

    VarId S = T.constant(p.s0);
    VarId V = v0;
    std::vector<VarId> s_at(steps + 1);
    s_at[0] = S;

    for (std::size_t k = 0; k < steps; ++k) {
        const VarId Vp = T.max_zero(V);
        const std::size_t row = leverage_row_index(g, static_cast<double>(k) * dt);
        VarId L = lev[row * g.cols()];
        for (std::size_t j = 1; j < g.cols(); ++j)
            L = T.select_ge(S, s_node_c[j], lev[row * g.cols() + j], L);

        const VarId sqrtV = T.sqrt(Vp);
        const VarId dWv = T.mul(c_sqrt_dt, z[2 * k]);
        const VarId dWs = T.add(T.mul(rho, dWv), T.mul(rho_comp, z[2 * k + 1]));

        const VarId L2 = T.mul(L, L);
        const VarId drift = T.sub(c_mu_dt, T.mul(c_half_dt, T.mul(Vp, L2)));
        const VarId diffusion = T.mul(T.mul(sqrtV, L), dWs);
        S = T.mul(S, T.exp(T.add(drift, diffusion)));

        const VarId mean_rev = T.mul(T.mul(kappa, T.sub(theta, Vp)), c_dt);
        const VarId vol_of_vol = T.mul(T.mul(xi, sqrtV), dWv);
        V = T.add(V, T.add(mean_rev, vol_of_vol));

        s_at[k + 1] = S;
    }

    for (const auto& ins : instruments) {
        const VarId strike = T.constant(ins.strike);
        const VarId s_mat = s_at[ins.maturity_step];
        const VarId pay = ins.kind == Instrument::Kind::Call
                              ? T.max_zero(T.sub(s_mat, strike))
                              : T.max_zero(T.sub(strike, s_mat));
        T.mark_output(pay);
    }
    return prog;
}

inline HestonProgram record_heston_program(const ModelSpec& s) {
    return record_heston_program(s.heston, s.grid, s.instruments, s.mc.steps, s.mc.dt);
}

// Straight-line scalar simulator over the identical scheme. This is the
// reference the tape is checked against and the baseline cost(F) is measured
// on, so it must stay free of any tape machinery. Leverage rows are resolved
// per step up front and instruments are bucketed by maturity; per path the
// work is the step recursion plus one payoff evaluation per instrument.
class HestonSimulator {
public:
    HestonSimulator(const HestonParams& p, const LeverageGrid& g,
                    const std::vector<Instrument>& instruments, std::size_t steps, double dt)
        : p_(p), grid_(g), instruments_(instruments), steps_(steps), dt_(dt) {
        validate(p);
        validate(g);
        if (steps == 0 || !(dt > 0.0))
            throw std::invalid_argument("HestonSimulator: steps and dt must be positive");
        sqrt_dt_ = std::sqrt(dt);
        mu_dt_ = p.mu * dt;
        half_dt_ = 0.5 * dt;
        refresh_params();

        row_offset_.resize(steps);
        for (std::size_t k = 0; k < steps; ++k)
            row_offset_[k] =
                leverage_row_index(g, static_cast<double>(k) * dt) * g.cols();

        // instrument indices bucketed by maturity step: ids in
        // [bucket_[k], bucket_[k+1]) mature after step k+1
        std::vector<std::size_t> order(instruments.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return instruments[a].maturity_step < instruments[b].maturity_step;
        });
        bucket_.assign(steps + 1, 0);
        by_maturity_ = order;
        for (std::size_t i = 0; i < order.size(); ++i) {
            const std::size_t mk = instruments[order[i]].maturity_step;
            if (mk == 0 || mk > steps)
                throw std::invalid_argument("HestonSimulator: maturity_step out of range");
            bucket_[mk] = i + 1;
        }
        for (std::size_t k = 1; k <= steps; ++k) bucket_[k] = std::max(bucket_[k], bucket_[k - 1]);
    }

    std::size_t num_randoms() const noexcept { return 2 * steps_; }
    std::size_t num_outputs() const noexcept { return instruments_.size(); }

    // Overrides the differentiable parameters with a packed vector.
    void set_params(std::span<const double> x) {
        unpack_params(x, p_, grid_);
        validate(p_);
        refresh_params();
    }

    // One path: draws holds 2*steps standard normals, payoffs gets one
    // undiscounted value per instrument in instrument order.
    void simulate_path(std::span<const double> draws, std::span<double> payoffs) const {
        const double* s_nodes = grid_.s_nodes.data();
        const double* lv = grid_.values.data();
        const std::size_t cols = grid_.cols();

        double S = p_.s0;
        double V = p_.v0;
        std::size_t next = 0;
        for (std::size_t k = 0; k < steps_; ++k) {
            const double Vp = V > 0.0 ? V : 0.0;
            const double* row = lv + row_offset_[k];
            std::size_t col = 0;
            for (std::size_t j = cols; j-- > 1;)
                if (S >= s_nodes[j]) {
                    col = j;
                    break;
                }
            const double L = row[col];

            const double sqrtV = std::sqrt(Vp);
            const double dWv = sqrt_dt_ * draws[2 * k];
            const double dWs = p_.rho * dWv + rho_comp_ * draws[2 * k + 1];

            const double drift = mu_dt_ - half_dt_ * (Vp * (L * L));
            const double diffusion = (sqrtV * L) * dWs;
            S = S * std::exp(drift + diffusion);

            const double mean_rev = (p_.kappa * (p_.theta - Vp)) * dt_;
            const double vol_of_vol = (p_.xi * sqrtV) * dWv;
            V = V + (mean_rev + vol_of_vol);

            for (; next < bucket_[k + 1]; ++next) {
                const std::size_t i = by_maturity_[next];
                const Instrument& ins = instruments_[i];
                const double intrinsic =
                    ins.kind == Instrument::Kind::Call ? S - ins.strike : ins.strike - S;
                payoffs[i] = intrinsic > 0.0 ? intrinsic : 0.0;
            }
        }
    }

private:
    void refresh_params() {
        rho_comp_ = std::sqrt(1.0 - p_.rho * p_.rho) * sqrt_dt_;
    }

    HestonParams p_;
    LeverageGrid grid_;
    std::vector<Instrument> instruments_;
    std::size_t steps_;
    double dt_;
    double sqrt_dt_ = 0.0;
    double mu_dt_ = 0.0;
    double half_dt_ = 0.0;
    double rho_comp_ = 0.0;
    std::vector<std::size_t> row_offset_;
    std::vector<std::size_t> by_maturity_;
    std::vector<std::size_t> bucket_;
};

}  // namespace lanetape
