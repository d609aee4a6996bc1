#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "lanetape/expectation.hpp"
#include "lanetape/heston.hpp"
#include "lanetape/rng.hpp"
#include "support/oracles.hpp"

using namespace lanetape;
using testsupport::rel_err;

namespace {

ModelSpec small_spec() {
    return load_model_spec(std::string(LANETAPE_CONFIG_DIR) + "/heston_small.json");
}

}  // namespace

TEST_CASE("leverage lookup clamps to the grid") {
    LeverageGrid g;
    g.t_nodes = {0.0, 0.5};
    g.s_nodes = {90.0, 100.0, 110.0};
    g.values = {1.0, 2.0, 3.0, 4.0, 5.0, 6.0};
    validate(g);

    CHECK(leverage_row_index(g, -0.1) == 0);
    CHECK(leverage_row_index(g, 0.0) == 0);
    CHECK(leverage_row_index(g, 0.49) == 0);
    CHECK(leverage_row_index(g, 0.5) == 1);
    CHECK(leverage_row_index(g, 7.0) == 1);

    CHECK(leverage_col_index(g, 89.0) == 0);
    CHECK(leverage_col_index(g, 90.0) == 0);
    CHECK(leverage_col_index(g, 99.9) == 0);
    CHECK(leverage_col_index(g, 100.0) == 1);
    CHECK(leverage_col_index(g, 110.0) == 2);
    CHECK(leverage_col_index(g, 1e6) == 2);

    CHECK(leverage_value(g, 0.25, 104.0) == 2.0);
    CHECK(leverage_value(g, 0.75, 112.0) == 6.0);
    CHECK(leverage_value(g, -1.0, 1.0) == 1.0);
}

TEST_CASE("one desk-checked euler step") {
    // dt = 0.25, one step, grid row [1.2 at S >= 0-side, 0.8 at S >= 95]
    HestonParams p;
    p.mu = 0.02;
    p.kappa = 1.5;
    p.theta = 0.04;
    p.xi = 0.5;
    p.rho = -0.6;
    p.v0 = 0.09;
    p.s0 = 100.0;
    LeverageGrid g;
    g.t_nodes = {0.0};
    g.s_nodes = {90.0, 95.0};
    g.values = {1.2, 0.8};
    const double dt = 0.25;
    const std::vector<Instrument> ins{{Instrument::Kind::Call, 85.0, 2},
                                      {Instrument::Kind::Put, 95.0, 1}};
    const std::vector<double> draws{0.3, -0.5, -1.1, 0.7};

    // step 1 by hand: S = 100 sits in the upper cell, L = 0.8
    const double sq_dt = std::sqrt(0.25);
    double Vp = 0.09;
    double L = 0.8;
    double sqrtV = std::sqrt(0.09);
    double dWv = sq_dt * 0.3;
    double rho_comp = std::sqrt(1.0 - 0.36) * sq_dt;
    double dWs = -0.6 * dWv + rho_comp * -0.5;
    double drift = 0.02 * 0.25 - 0.125 * (Vp * (L * L));
    double S1 = 100.0 * std::exp(drift + (sqrtV * L) * dWs);
    double V1 = 0.09 + ((1.5 * (0.04 - Vp)) * 0.25 + (0.5 * sqrtV) * dWv);
    const double put1 = std::max(95.0 - S1, 0.0);
    REQUIRE(S1 < 95.0);  // the second step must fall back to the lower cell

    // step 2 by hand: L = 1.2 now
    Vp = V1 > 0.0 ? V1 : 0.0;
    L = 1.2;
    sqrtV = std::sqrt(Vp);
    dWv = sq_dt * -1.1;
    dWs = -0.6 * dWv + rho_comp * 0.7;
    drift = 0.02 * 0.25 - 0.125 * (Vp * (L * L));
    const double S2 = S1 * std::exp(drift + (sqrtV * L) * dWs);
    const double call2 = std::max(S2 - 85.0, 0.0);

    auto prog = record_heston_program(p, g, ins, 2, dt);
    CHECK(prog.tape.num_params() == 5 + 2);
    CHECK(prog.tape.num_randoms() == 4);
    CHECK(prog.tape.num_outputs() == 2);
    auto out = forward_eval(prog.tape, prog.initial_params, draws);
    CHECK_THAT(out[0], Catch::Matchers::WithinRel(call2, 1e-14));
    CHECK_THAT(out[1], Catch::Matchers::WithinRel(put1, 1e-14));

    HestonSimulator sim(p, g, ins, 2, dt);
    std::vector<double> pay(2);
    sim.simulate_path(draws, pay);
    CHECK_THAT(pay[0], Catch::Matchers::WithinRel(call2, 1e-14));
    CHECK_THAT(pay[1], Catch::Matchers::WithinRel(put1, 1e-14));
}

TEST_CASE("recorded program shape follows the model") {
    auto spec = small_spec();
    auto prog = record_heston_program(spec);
    CHECK(prog.tape.num_params() == heston_free_params + spec.grid.size());
    CHECK(prog.tape.num_randoms() == 2 * spec.mc.steps);
    CHECK(prog.tape.num_outputs() == spec.instruments.size());
    CHECK(prog.initial_params == pack_params(spec.heston, spec.grid));
    CHECK(prog.steps == spec.mc.steps);
    CHECK(prog.dt == spec.mc.dt);
}

TEST_CASE("tape replay agrees with the scalar simulator path by path") {
    auto spec = small_spec();
    auto prog = record_heston_program(spec);
    HestonSimulator sim(spec.heston, spec.grid, spec.instruments, spec.mc.steps, spec.mc.dt);

    PhiloxNormalSource src(spec.mc.seed, prog.tape.num_randoms());
    std::vector<double> draws(prog.tape.num_randoms());
    std::vector<double> pay(spec.instruments.size());

    SECTION("at the recorded parameters") {
        for (std::uint64_t path = 0; path < 96; ++path) {
            src.fill(path, draws);
            auto out = forward_eval(prog.tape, prog.initial_params, draws);
            sim.simulate_path(draws, pay);
            for (std::size_t i = 0; i < pay.size(); ++i) {
                INFO("path " << path << " instrument " << i);
                CHECK(rel_err(out[i], pay[i]) < 1e-13);
            }
        }
    }

    SECTION("at perturbed parameters") {
        std::vector<double> x = prog.initial_params;
        x[0] *= 1.1;   // kappa
        x[1] *= 0.9;   // theta
        x[2] *= 1.2;   // xi
        x[3] = -0.5;   // rho
        x[4] *= 1.15;  // v0
        for (std::size_t j = heston_free_params; j < x.size(); ++j) x[j] *= 1.07;
        sim.set_params(x);
        for (std::uint64_t path = 0; path < 96; ++path) {
            src.fill(path, draws);
            auto out = forward_eval(prog.tape, x, draws);
            sim.simulate_path(draws, pay);
            for (std::size_t i = 0; i < pay.size(); ++i) {
                INFO("path " << path << " instrument " << i);
                CHECK(rel_err(out[i], pay[i]) < 1e-13);
            }
        }
    }
}

TEST_CASE("batched replay agrees with the scalar simulator") {
    auto spec = small_spec();
    auto prog = record_heston_program(spec);
    HestonSimulator sim(spec.heston, spec.grid, spec.instruments, spec.mc.steps, spec.mc.dt);
    const std::size_t N = prog.tape.num_randoms(), m = spec.instruments.size();
    const int c = 4;

    Kernel k = Kernel::freeze(prog.tape, c);
    std::vector<double> param_lanes(k.num_params() * c);
    for (std::size_t j = 0; j < k.num_params(); ++j)
        for (int l = 0; l < c; ++l) param_lanes[j * c + l] = prog.initial_params[j];

    PhiloxNormalSource src(77, N);
    std::vector<double> draws(N), rand_lanes(N * c), out_lanes(m * c), pay(m);
    for (int l = 0; l < c; ++l) {
        src.fill(l, draws);
        for (std::size_t r = 0; r < N; ++r) rand_lanes[r * c + l] = draws[r];
    }
    BatchState state;
    k.forward_batch(param_lanes, rand_lanes, out_lanes, state);
    for (int l = 0; l < c; ++l) {
        src.fill(l, draws);
        sim.simulate_path(draws, pay);
        for (std::size_t i = 0; i < m; ++i) CHECK(rel_err(out_lanes[i * c + l], pay[i]) < 1e-13);
    }
}

TEST_CASE("discretized spot is a martingale and parity holds") {
    HestonParams p;
    p.mu = 0.05;
    p.kappa = 1.5;
    p.theta = 0.04;
    p.xi = 0.5;
    p.rho = -0.6;
    p.v0 = 0.09;
    p.s0 = 100.0;
    LeverageGrid g;
    g.t_nodes = {0.0, 0.5};
    g.s_nodes = {80.0, 100.0, 120.0};
    g.values = {1.25, 1.0, 0.85, 1.3, 1.05, 0.9};
    const std::size_t steps = 8;
    const double dt = 0.125;
    // the near-zero strike call reads off E[S_T] itself
    const std::vector<Instrument> ins{{Instrument::Kind::Call, 100.0, steps},
                                      {Instrument::Kind::Put, 100.0, steps},
                                      {Instrument::Kind::Call, 1e-3, steps}};
    auto prog = record_heston_program(p, g, ins, steps, dt);

    MCConfig cfg;
    cfg.paths = 20000;
    cfg.seed = 1609;
    cfg.lane_width = 4;
    auto r = estimate_means(prog.tape, prog.initial_params, cfg);

    const double forward = 100.0 * std::exp(0.05 * 1.0);
    INFO("E[S_T] estimate " << r.means[2] + 1e-3 << " +- " << r.std_errors[2]);
    CHECK(std::fabs(r.means[2] + 1e-3 - forward) < 3.5 * r.std_errors[2]);

    // per-path call - put == S - K exactly, so the means obey parity up to
    // summation rounding, far below the 1e-2-scale statistical error
    const double lhs = r.means[0] - r.means[1];
    const double rhs = (r.means[2] + 1e-3) - 100.0;
    CHECK(rel_err(lhs, rhs) < 1e-8);
}

TEST_CASE("flat unit leverage with zero vol-of-vol prices like black-scholes") {
    HestonParams p;
    p.mu = 0.0;
    p.kappa = 1.0;
    p.theta = 0.04;
    p.xi = 0.0;
    p.rho = 0.0;
    p.v0 = 0.04;
    p.s0 = 100.0;
    LeverageGrid g;
    g.t_nodes = {0.0};
    g.s_nodes = {100.0};
    g.values = {1.0};
    const std::size_t steps = 4;
    const double dt = 0.0625;  // T = 0.25
    auto prog = record_heston_program(p, g, {{Instrument::Kind::Call, 100.0, steps}}, steps, dt);

    MCConfig cfg;
    cfg.paths = 32768;
    cfg.seed = 271828;
    cfg.lane_width = 4;
    auto r = estimate_means(prog.tape, prog.initial_params, cfg);

    const double ref = testsupport::bs_call_undiscounted(100.0, 100.0, 0.2, 0.25, 0.0);
    INFO("mc " << r.means[0] << " +- " << r.std_errors[0] << " vs closed form " << ref);
    CHECK(std::fabs(r.means[0] - ref) < 4.0 * r.std_errors[0]);
}

TEST_CASE("model spec json round trip") {
    auto spec = small_spec();
    const auto j1 = to_json(spec);
    auto back = model_spec_from_json(j1);
    const auto j2 = to_json(back);
    CHECK(j1.dump(2) == j2.dump(2));
    CHECK(back.grid.values == spec.grid.values);
    CHECK(back.instruments.size() == spec.instruments.size());
    CHECK(back.mc.seed == spec.mc.seed);
}

TEST_CASE("model spec validation rejects bad fields") {
    auto base = to_json(small_spec());

    auto mutated = [&](auto&& edit) {
        nlohmann::json j = nlohmann::json::parse(base.dump());
        edit(j);
        return j;
    };

    CHECK_THROWS_AS(model_spec_from_json(mutated([](auto& j) { j["heston"]["rho"] = 1.0; })),
                    std::invalid_argument);
    CHECK_THROWS_AS(model_spec_from_json(mutated([](auto& j) { j["heston"]["s0"] = 0.0; })),
                    std::invalid_argument);
    CHECK_THROWS_AS(model_spec_from_json(mutated([](auto& j) { j["heston"]["v0"] = -0.1; })),
                    std::invalid_argument);
    CHECK_THROWS_AS(
        model_spec_from_json(mutated([](auto& j) { j["grid"]["s_nodes"] = {100.0, 100.0}; })),
        std::invalid_argument);
    CHECK_THROWS_AS(
        model_spec_from_json(mutated([](auto& j) { j["grid"]["values"][0] = {1.0}; })),
        std::invalid_argument);
    CHECK_THROWS_AS(
        model_spec_from_json(mutated([](auto& j) { j["grid"]["values"][0][0] = -1.0; })),
        std::invalid_argument);
    CHECK_THROWS_AS(
        model_spec_from_json(mutated([](auto& j) { j["instruments"][0]["kind"] = "swap"; })),
        std::invalid_argument);
    CHECK_THROWS_AS(
        model_spec_from_json(mutated([](auto& j) { j["instruments"][0]["strike"] = 0.0; })),
        std::invalid_argument);
    CHECK_THROWS_AS(
        model_spec_from_json(mutated([](auto& j) { j["instruments"][0]["maturity_step"] = 0; })),
        std::invalid_argument);
    CHECK_THROWS_AS(model_spec_from_json(mutated(
                        [](auto& j) { j["instruments"][0]["maturity_step"] = 100000; })),
                    std::invalid_argument);
    CHECK_THROWS_AS(model_spec_from_json(mutated([](auto& j) { j["instruments"].clear(); })),
                    std::invalid_argument);
    CHECK_THROWS_AS(model_spec_from_json(mutated([](auto& j) { j["mc"]["paths"] = 0; })),
                    std::invalid_argument);
    CHECK_THROWS_AS(model_spec_from_json(mutated([](auto& j) { j["mc"]["dt"] = 0.0; })),
                    std::invalid_argument);
    CHECK_THROWS_AS(model_spec_from_json(mutated([](auto& j) { j.erase("heston"); })),
                    nlohmann::json::exception);
}

TEST_CASE("packed parameter vector round trips") {
    auto spec = small_spec();
    auto x = pack_params(spec.heston, spec.grid);
    REQUIRE(x.size() == heston_free_params + spec.grid.size());

    HestonParams p2 = spec.heston;
    p2.kappa = p2.theta = p2.xi = p2.rho = p2.v0 = 0.0;
    LeverageGrid g2 = spec.grid;
    std::fill(g2.values.begin(), g2.values.end(), 0.0);
    unpack_params(x, p2, g2);
    CHECK(p2.kappa == spec.heston.kappa);
    CHECK(p2.theta == spec.heston.theta);
    CHECK(p2.xi == spec.heston.xi);
    CHECK(p2.rho == spec.heston.rho);
    CHECK(p2.v0 == spec.heston.v0);
    CHECK(g2.values == spec.grid.values);
    CHECK(p2.mu == spec.heston.mu);
    CHECK(p2.s0 == spec.heston.s0);

    CHECK_THROWS_AS(unpack_params(std::vector<double>(3), p2, g2), std::invalid_argument);
}

TEST_CASE("program recording validates its arguments") {
    auto spec = small_spec();
    CHECK_THROWS_AS(record_heston_program(spec.heston, spec.grid, spec.instruments, 0, 0.25),
                    std::invalid_argument);
    CHECK_THROWS_AS(record_heston_program(spec.heston, spec.grid, spec.instruments, 4, 0.0),
                    std::invalid_argument);
    CHECK_THROWS_AS(record_heston_program(spec.heston, spec.grid, {}, 4, 0.25),
                    std::invalid_argument);
    CHECK_THROWS_AS(record_heston_program(spec.heston, spec.grid,
                                          {{Instrument::Kind::Call, 100.0, 5}}, 4, 0.25),
                    std::invalid_argument);
}
