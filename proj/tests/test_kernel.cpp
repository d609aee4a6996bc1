#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <vector>

#include "lanetape/kernel.hpp"
#include "lanetape/tape.hpp"
#include "support/oracles.hpp"

using namespace lanetape;

namespace {

struct ScalarRun {
    std::vector<double> outputs;
    std::vector<double> adjoints;
};

ScalarRun scalar_reference(const Tape& tape, std::span<const double> params,
                           std::span<const double> randoms, std::span<const double> lambda) {
    EvalState state;
    ScalarRun run;
    run.outputs = forward_eval(tape, params, randoms, state);
    run.adjoints = reverse_seeded(tape, state, lambda);
    return run;
}

// rows-major with lanes contiguous: slot [row * c + lane]
std::vector<double> to_lanes(const std::vector<std::vector<double>>& per_lane, std::size_t rows,
                             int c) {
    std::vector<double> out(rows * static_cast<std::size_t>(c));
    for (std::size_t r = 0; r < rows; ++r)
        for (int l = 0; l < c; ++l) out[r * c + l] = per_lane[l][r];
    return out;
}

}  // namespace

TEST_CASE("freeze validates outputs and lane width") {
    Tape t;
    const VarId p = t.new_input(InputKind::Parameter, 1.0);
    CHECK_THROWS_AS(Kernel::freeze(t, 4), TapeError);
    t.mark_output(t.exp(p));
    CHECK_THROWS_AS(Kernel::freeze(t, 0), TapeError);
    CHECK_THROWS_AS(Kernel::freeze(t, 2), TapeError);
    CHECK_THROWS_AS(Kernel::freeze(t, 16), TapeError);
    for (int c : {1, 4, 8}) CHECK(Kernel::freeze(t, c).lane_width() == c);
}

TEST_CASE("freeze snapshots the tape at that moment") {
    Tape t;
    const VarId p = t.new_input(InputKind::Parameter, 2.0);
    t.mark_output(t.mul(p, p));
    Kernel k = Kernel::freeze(t, 1);
    // grow the tape afterwards; the kernel must not see it
    t.mark_output(t.add(p, p));
    CHECK(k.num_outputs() == 1);
    BatchState state;
    std::vector<double> out(1);
    k.forward_batch(std::vector<double>{3.0}, std::vector<double>{}, out, state);
    CHECK(out[0] == 9.0);
}

TEST_CASE("every lane reproduces the scalar replay bitwise") {
    std::mt19937_64 rng(4242);
    std::uniform_real_distribution<double> lam(-2.0, 2.0);
    for (int c : {1, 4, 8}) {
        for (int rep = 0; rep < 12; ++rep) {
            auto prog = testsupport::make_random_program(rng, 4, 3, 30, 2);
            const Tape& tape = prog.tape;
            const std::size_t M = tape.num_params(), N = tape.num_randoms(),
                              m = tape.num_outputs();

            std::vector<std::vector<double>> lane_params(c), lane_randoms(c), lane_lambda(c);
            std::uniform_real_distribution<double> pval(0.6, 1.8), rval(-1.4, 1.4);
            for (int l = 0; l < c; ++l) {
                for (std::size_t j = 0; j < M; ++j) lane_params[l].push_back(pval(rng));
                for (std::size_t j = 0; j < N; ++j) lane_randoms[l].push_back(rval(rng));
                for (std::size_t j = 0; j < m; ++j) lane_lambda[l].push_back(lam(rng));
            }

            Kernel k = Kernel::freeze(tape, c);
            BatchState state;
            std::vector<double> out(m * c), adjl((M + N) * c), adj;
            k.forward_batch(to_lanes(lane_params, M, c), to_lanes(lane_randoms, N, c), out,
                            state);
            k.reverse_batch(state, to_lanes(lane_lambda, m, c), adjl, adj);

            for (int l = 0; l < c; ++l) {
                auto ref = scalar_reference(tape, lane_params[l], lane_randoms[l],
                                            lane_lambda[l]);
                for (std::size_t j = 0; j < m; ++j) {
                    INFO("c=" << c << " rep=" << rep << " lane=" << l << " output=" << j);
                    CHECK(out[j * c + l] == ref.outputs[j]);
                }
                for (std::size_t j = 0; j < M + N; ++j) {
                    INFO("c=" << c << " rep=" << rep << " lane=" << l << " adjoint=" << j);
                    CHECK(adjl[j * c + l] == ref.adjoints[j]);
                }
            }
        }
    }
}

TEST_CASE("permuting lanes permutes results bitwise") {
    std::mt19937_64 rng(555);
    auto prog = testsupport::make_random_program(rng, 3, 2, 25, 1);
    const Tape& tape = prog.tape;
    const int c = 4;
    const std::size_t M = 3, N = 2;

    std::vector<std::vector<double>> params(c), randoms(c), lambda(c, {1.0});
    std::uniform_real_distribution<double> pval(0.6, 1.8), rval(-1.4, 1.4);
    for (int l = 0; l < c; ++l) {
        for (std::size_t j = 0; j < M; ++j) params[l].push_back(pval(rng));
        for (std::size_t j = 0; j < N; ++j) randoms[l].push_back(rval(rng));
    }

    Kernel k = Kernel::freeze(tape, c);
    auto run = [&](const std::array<int, 4>& order) {
        std::vector<std::vector<double>> p(c), r(c), lm(c);
        for (int l = 0; l < c; ++l) {
            p[l] = params[order[l]];
            r[l] = randoms[order[l]];
            lm[l] = lambda[order[l]];
        }
        BatchState state;
        std::vector<double> out(c), adjl((M + N) * c), adj;
        k.forward_batch(to_lanes(p, M, c), to_lanes(r, N, c), out, state);
        k.reverse_batch(state, to_lanes(lm, 1, c), adjl, adj);
        return std::pair{out, adjl};
    };

    auto [out_id, adj_id] = run({0, 1, 2, 3});
    auto [out_pm, adj_pm] = run({2, 0, 3, 1});
    const std::array<int, 4> inv{1, 3, 0, 2};  // lane holding original path l
    for (int l = 0; l < c; ++l) {
        CHECK(out_pm[inv[l]] == out_id[l]);
        for (std::size_t j = 0; j < M + N; ++j)
            CHECK(adj_pm[j * c + inv[l]] == adj_id[j * c + l]);
    }
}

TEST_CASE("recompute-mode reverse equals store-mode reverse bitwise") {
    std::mt19937_64 rng(808);
    for (int c : {1, 4, 8}) {
        auto prog = testsupport::make_random_program(rng, 5, 4, 35, 2);
        const Tape& tape = prog.tape;
        const std::size_t M = tape.num_params(), N = tape.num_randoms(), m = tape.num_outputs();

        std::vector<std::vector<double>> params(c), randoms(c), lambda(c);
        std::uniform_real_distribution<double> pval(0.6, 1.8), rval(-1.4, 1.4), lam(-2.0, 2.0);
        for (int l = 0; l < c; ++l) {
            for (std::size_t j = 0; j < M; ++j) params[l].push_back(pval(rng));
            for (std::size_t j = 0; j < N; ++j) randoms[l].push_back(rval(rng));
            for (std::size_t j = 0; j < m; ++j) lambda[l].push_back(lam(rng));
        }
        const auto pl = to_lanes(params, M, c), rl = to_lanes(randoms, N, c),
                   ll = to_lanes(lambda, m, c);

        Kernel k = Kernel::freeze(tape, c);
        BatchState stored, scratch;
        std::vector<double> out(m * c), adj_store((M + N) * c), adj_recompute((M + N) * c), adj;
        k.forward_batch(pl, rl, out, stored);
        k.reverse_batch(stored, ll, adj_store, adj);
        k.reverse_batch(pl, rl, ll, adj_recompute, scratch, adj);
        CHECK(adj_store == adj_recompute);
        CHECK(scratch.values == stored.values);
    }
}

TEST_CASE("batched domain errors report node and lane") {
    Tape t;
    const VarId a = t.new_input(InputKind::Parameter, 1.0);
    const VarId b = t.new_input(InputKind::Parameter, 1.0);
    const VarId q = t.div(a, b);
    t.mark_output(q);
    Kernel k = Kernel::freeze(t, 4);

    // lane 2 of parameter row 1 is the zero divisor
    std::vector<double> params{1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0};
    std::vector<double> out(4);
    BatchState state;
    try {
        k.forward_batch(params, std::vector<double>{}, out, state);
        FAIL("expected EvalError");
    } catch (const EvalError& e) {
        CHECK(e.node() == q.index);
        CHECK(e.lane() == 2);
        CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("lane 2"));
    }
}

TEST_CASE("batch calls validate span sizes and state ownership") {
    Tape t;
    const VarId p = t.new_input(InputKind::Parameter, 1.0);
    t.mark_output(t.exp(p));
    Kernel k4 = Kernel::freeze(t, 4);
    Kernel k8 = Kernel::freeze(t, 8);

    BatchState state;
    std::vector<double> out4(4), adjl(4), adj;
    CHECK_THROWS_AS(k4.forward_batch(std::vector<double>(3), std::vector<double>{}, out4, state),
                    EvalError);
    CHECK_THROWS_AS(k4.forward_batch(std::vector<double>(4), std::vector<double>(4), out4, state),
                    EvalError);
    CHECK_THROWS_AS(k4.forward_batch(std::vector<double>(4), std::vector<double>{},
                                     std::span<double>(out4.data(), 2), state),
                    EvalError);

    k4.forward_batch(std::vector<double>(4, 1.0), std::vector<double>{}, out4, state);
    CHECK_THROWS_AS(k4.reverse_batch(state, std::vector<double>(8, 1.0), adjl, adj), EvalError);
    CHECK_THROWS_AS(k4.reverse_batch(state, std::vector<double>(4, 1.0),
                                     std::span<double>(adjl.data(), 2), adj),
                    EvalError);
    // a state filled by one kernel is rejected by another
    std::vector<double> out8(8), adjl8(8);
    CHECK_THROWS_AS(k8.reverse_batch(state, std::vector<double>(8, 1.0), adjl8, adj), EvalError);
    CHECK_NOTHROW(k4.reverse_batch(state, std::vector<double>(4, 1.0), adjl, adj));
}

TEST_CASE("state and store sizes follow the node count") {
    Tape t;
    const VarId p = t.new_input(InputKind::Parameter, 1.0);
    t.mark_output(t.exp(t.mul(p, p)));  // 3 nodes total
    Kernel k = Kernel::freeze(t, 4);
    CHECK(k.state_bytes() == 3u * 4u * sizeof(double));
    CHECK(k.store_bytes(1) == k.state_bytes());
    CHECK(k.store_bytes(4) == k.state_bytes());
    CHECK(k.store_bytes(5) == 2 * k.state_bytes());
    CHECK(k.store_bytes(101) == 26 * k.state_bytes());
}
