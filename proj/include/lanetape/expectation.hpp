#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lanetape/kernel.hpp"
#include "lanetape/parallel.hpp"
#include "lanetape/rng.hpp"
#include "lanetape/tape.hpp"

namespace lanetape {

enum class MemoryMode { Recompute, Store };

inline const char* memory_mode_name(MemoryMode m) noexcept {
    return m == MemoryMode::Store ? "store" : "recompute";
}

// Monte Carlo execution settings. `paths` and `seed` define the sample;
// everything else steers how the batches are run, not what they compute.
struct MCConfig {
    std::size_t paths = 0;
    std::uint64_t seed = 0;
    bool antithetic = false;
    int lane_width = 4;
    int worker_threads = 1;
    MemoryMode memory_mode = MemoryMode::Recompute;
    // Step 2 draws a disjoint path set instead of replaying step 1's.
    // Removes the correlation between the lambda estimate and the pathwise
    // derivatives at twice the forward cost. Recompute mode only.
    bool fresh_step2_paths = false;
    // Store mode refuses to start if the kept forward states would exceed
    // this many bytes.
    std::size_t store_limit_bytes = std::size_t{3} << 30;
};

using Targets = std::vector<double>;

// Explicit finite sample space: `scenarios` rows of `num_randoms` draws,
// uniformly weighted. Lets callers pin the exact randoms instead of drawing
// them from a seed.
struct SampleSpace {
    std::size_t scenarios = 0;
    std::size_t num_randoms = 0;
    std::vector<double> draws;  // scenario-major, scenarios * num_randoms

    std::span<const double> row(std::size_t s) const {
        return {draws.data() + s * num_randoms, num_randoms};
    }
};

struct MeansResult {
    std::vector<double> means;       // m
    std::vector<double> std_errors;  // m, standard error of each mean
    std::size_t paths = 0;
};

struct GradientReport {
    double G = 0.0;
    std::vector<double> means;   // m
    std::vector<double> lambda;  // m, means - targets
    std::vector<double> grad;    // M, d G / d parameter
    std::size_t paths = 0;
    std::string mode;  // "recompute" or "store"
    std::uint64_t seed = 0;

    std::string to_json(int indent = 2) const {
        nlohmann::ordered_json j;
        j["G"] = G;
        j["means"] = means;
        j["lambda"] = lambda;
        j["grad"] = grad;
        j["paths"] = paths;
        j["mode"] = mode;
        j["seed"] = seed;
        return j.dump(indent);
    }
};

// Adapts a SampleSpace to the path-indexed draw interface.
class SampleSpaceSource final : public PathDrawSource {
public:
    explicit SampleSpaceSource(const SampleSpace& space) : space_(&space) {
        if (space.draws.size() != space.scenarios * space.num_randoms)
            throw std::invalid_argument("SampleSpace: draws size does not match dimensions");
    }
    std::size_t dimension() const noexcept override { return space_->num_randoms; }
    void fill(std::uint64_t path, std::span<double> out) const override {
        if (path >= space_->scenarios)
            throw std::out_of_range("SampleSpaceSource: path beyond scenario count");
        auto r = space_->row(path);
        std::copy(r.begin(), r.end(), out.begin());
    }

private:
    const SampleSpace* space_;
};

namespace detail {

// Deterministic accumulation scheme shared by both passes: every batch owns
// a slot in a partial-sum table (lanes added in ascending order), and the
// table is reduced in ascending batch order after all workers finished. The
// result is bitwise independent of worker_threads.
struct BatchSums {
    std::size_t batches = 0;
    std::size_t width = 0;          // values per batch
    std::vector<double> partials;   // batches * width

    BatchSums(std::size_t b, std::size_t w) : batches(b), width(w), partials(b * w, 0.0) {}

    std::vector<double> reduce() const {
        std::vector<double> total(width, 0.0);
        for (std::size_t b = 0; b < batches; ++b)
            for (std::size_t k = 0; k < width; ++k) total[k] += partials[b * width + k];
        return total;
    }
};

inline std::size_t batch_count(std::size_t paths, int lanes) {
    const std::size_t c = static_cast<std::size_t>(lanes);
    return (paths + c - 1) / c;
}

// Fills the lane-major random block for batch b. Paths past the end of the
// sample replicate the last valid path; those lanes are excluded from every
// accumulation but must still evaluate cleanly.
inline void fill_random_lanes(const PathDrawSource& src, std::uint64_t path_offset,
                              std::size_t paths, std::size_t b, int lanes,
                              std::vector<double>& path_buf, std::vector<double>& rand_lanes) {
    const std::size_t c = static_cast<std::size_t>(lanes);
    const std::size_t base = b * c;
    const std::size_t used = std::min(c, paths - base);
    const std::size_t n = path_buf.size();
    for (std::size_t l = 0; l < c; ++l) {
        const std::size_t p = base + std::min(l, used - 1);
        src.fill(path_offset + p, path_buf);
        for (std::size_t r = 0; r < n; ++r) rand_lanes[r * c + l] = path_buf[r];
    }
}

struct ForwardPassResult {
    std::vector<double> sum;        // m, ascending-order total of outputs
    std::vector<double> sumsq;      // m, same for squared outputs
    std::vector<BatchState> states; // per batch when keep_states
};

inline ForwardPassResult forward_pass(const Kernel& kernel, std::span<const double> params,
                                      const PathDrawSource& src, std::uint64_t path_offset,
                                      std::size_t paths, int workers, bool keep_states) {
    if (paths == 0) throw std::invalid_argument("forward_pass: paths must be > 0");
    if (src.dimension() != kernel.num_randoms())
        throw std::invalid_argument("forward_pass: draw source dimension " +
                                    std::to_string(src.dimension()) + " != tape randoms " +
                                    std::to_string(kernel.num_randoms()));
    const int c = kernel.lane_width();
    const std::size_t m = kernel.num_outputs();
    const std::size_t batches = batch_count(paths, c);

    BatchSums sums(batches, m), sumsqs(batches, m);
    ForwardPassResult result;
    if (keep_states) result.states.resize(batches);

    std::vector<double> param_lanes(kernel.num_params() * c);
    for (std::size_t j = 0; j < kernel.num_params(); ++j)
        for (int l = 0; l < c; ++l) param_lanes[j * c + l] = params[j];

    parallel_for(batches, workers, [&](std::size_t begin, std::size_t end) {
        std::vector<double> path_buf(kernel.num_randoms());
        std::vector<double> rand_lanes(kernel.num_randoms() * c);
        std::vector<double> out_lanes(m * c);
        BatchState scratch;
        for (std::size_t b = begin; b < end; ++b) {
            fill_random_lanes(src, path_offset, paths, b, c, path_buf, rand_lanes);
            BatchState& state = keep_states ? result.states[b] : scratch;
            kernel.forward_batch(param_lanes, rand_lanes, out_lanes, state);
            const std::size_t used = std::min<std::size_t>(c, paths - b * c);
            for (std::size_t o = 0; o < m; ++o) {
                double s = 0.0, s2 = 0.0;
                for (std::size_t l = 0; l < used; ++l) {
                    const double y = out_lanes[o * c + l];
                    s += y;
                    s2 += y * y;
                }
                sums.partials[b * m + o] = s;
                sumsqs.partials[b * m + o] = s2;
            }
        }
    });

    result.sum = sums.reduce();
    result.sumsq = sumsqs.reduce();
    return result;
}

// Reverse sweep over all batches with a fixed outer weight vector; returns
// the ascending-order total of the parameter adjoints. When `states` is
// non-null the sweep reads stored forward values; otherwise it recomputes
// them from the draws.
inline std::vector<double> reverse_pass(const Kernel& kernel, std::span<const double> params,
                                        const PathDrawSource& src, std::uint64_t path_offset,
                                        std::size_t paths, int workers,
                                        std::span<const double> lambda,
                                        std::vector<BatchState>* states) {
    const int c = kernel.lane_width();
    const std::size_t m = kernel.num_outputs();
    const std::size_t M = kernel.num_params();
    const std::size_t batches = batch_count(paths, c);
    if (states && states->size() != batches)
        throw std::invalid_argument("reverse_pass: stored state count mismatch");

    BatchSums adj_sums(batches, M);

    std::vector<double> param_lanes(M * c);
    for (std::size_t j = 0; j < M; ++j)
        for (int l = 0; l < c; ++l) param_lanes[j * c + l] = params[j];
    std::vector<double> lambda_lanes(m * c);
    for (std::size_t o = 0; o < m; ++o)
        for (int l = 0; l < c; ++l) lambda_lanes[o * c + l] = lambda[o];

    parallel_for(batches, workers, [&](std::size_t begin, std::size_t end) {
        std::vector<double> path_buf(kernel.num_randoms());
        std::vector<double> rand_lanes(kernel.num_randoms() * c);
        std::vector<double> adjoint_lanes((M + kernel.num_randoms()) * c);
        BatchState scratch;
        std::vector<double> adj;
        for (std::size_t b = begin; b < end; ++b) {
            if (states) {
                kernel.reverse_batch((*states)[b], lambda_lanes, adjoint_lanes, adj);
            } else {
                fill_random_lanes(src, path_offset, paths, b, c, path_buf, rand_lanes);
                kernel.reverse_batch(param_lanes, rand_lanes, lambda_lanes, adjoint_lanes,
                                     scratch, adj);
            }
            const std::size_t used = std::min<std::size_t>(c, paths - b * c);
            for (std::size_t j = 0; j < M; ++j) {
                double s = 0.0;
                for (std::size_t l = 0; l < used; ++l) s += adjoint_lanes[j * c + l];
                adj_sums.partials[b * M + j] = s;
            }
        }
    });

    return adj_sums.reduce();
}

inline MeansResult means_from_sums(const ForwardPassResult& fwd, std::size_t paths) {
    const std::size_t m = fwd.sum.size();
    MeansResult r;
    r.paths = paths;
    r.means.resize(m);
    r.std_errors.resize(m);
    const double p = static_cast<double>(paths);
    for (std::size_t o = 0; o < m; ++o) {
        const double mean = fwd.sum[o] / p;
        r.means[o] = mean;
        if (paths > 1) {
            const double var = std::max(0.0, (fwd.sumsq[o] - p * mean * mean) / (p - 1.0));
            r.std_errors[o] = std::sqrt(var / p);
        } else {
            r.std_errors[o] = 0.0;
        }
    }
    return r;
}

}  // namespace detail

// Plain Monte Carlo estimate of E[y_i] for every output.
inline MeansResult estimate_means(const Kernel& kernel, std::span<const double> params,
                                  const PathDrawSource& src, std::size_t paths,
                                  int workers = 1) {
    auto fwd = detail::forward_pass(kernel, params, src, 0, paths, workers, false);
    return detail::means_from_sums(fwd, paths);
}

inline MeansResult estimate_means(const Tape& tape, std::span<const double> params,
                                  const MCConfig& cfg) {
    Kernel kernel = Kernel::freeze(tape, cfg.lane_width);
    PhiloxNormalSource src(cfg.seed, tape.num_randoms(), cfg.antithetic);
    return estimate_means(kernel, params, src, cfg.paths, cfg.worker_threads);
}

inline MeansResult estimate_means(const Tape& tape, std::span<const double> params,
                                  const SampleSpace& space, int lane_width = 1,
                                  int workers = 1) {
    Kernel kernel = Kernel::freeze(tape, lane_width);
    SampleSpaceSource src(space);
    return estimate_means(kernel, params, src, space.scenarios, workers);
}

// Gradient of G(x) = 1/2 sum_i (E[y_i] - C_i)^2 in two passes over one path
// set. Pass 1 estimates the means; the residuals lambda_i = E[y_i] - C_i are
// then frozen, and pass 2 averages the pathwise reverse sweeps seeded with
// lambda. Both passes replay the same draws unless fresh_step2_paths is set.
inline GradientReport gradient_of_G(const Kernel& kernel, std::span<const double> params,
                                    std::span<const double> targets, const PathDrawSource& src,
                                    const MCConfig& cfg) {
    if (targets.size() != kernel.num_outputs())
        throw std::invalid_argument("gradient_of_G: " + std::to_string(targets.size()) +
                                    " targets for " + std::to_string(kernel.num_outputs()) +
                                    " outputs");
    const bool store = cfg.memory_mode == MemoryMode::Store;
    if (store && cfg.fresh_step2_paths)
        throw std::invalid_argument(
            "gradient_of_G: fresh_step2_paths replays nothing, so stored forward state "
            "cannot be used; switch to recompute mode");
    if (store) {
        const std::size_t need = kernel.store_bytes(cfg.paths);
        if (need > cfg.store_limit_bytes)
            throw std::invalid_argument(
                "gradient_of_G: store mode needs " + std::to_string(need >> 20) +
                " MiB of forward state, limit is " + std::to_string(cfg.store_limit_bytes >> 20) +
                " MiB; raise store_limit_bytes or use recompute mode");
    }

    auto fwd = detail::forward_pass(kernel, params, src, 0, cfg.paths, cfg.worker_threads, store);
    auto means = detail::means_from_sums(fwd, cfg.paths);

    GradientReport report;
    report.paths = cfg.paths;
    report.mode = memory_mode_name(cfg.memory_mode);
    report.seed = cfg.seed;
    report.means = means.means;
    report.lambda.resize(targets.size());
    report.G = 0.0;
    for (std::size_t o = 0; o < targets.size(); ++o) {
        report.lambda[o] = report.means[o] - targets[o];
        report.G += 0.5 * report.lambda[o] * report.lambda[o];
    }

    const std::uint64_t offset2 = cfg.fresh_step2_paths ? cfg.paths : 0;
    auto adj_total = detail::reverse_pass(kernel, params, src, offset2, cfg.paths,
                                          cfg.worker_threads, report.lambda,
                                          store ? &fwd.states : nullptr);
    report.grad.resize(adj_total.size());
    for (std::size_t j = 0; j < adj_total.size(); ++j)
        report.grad[j] = adj_total[j] / static_cast<double>(cfg.paths);
    return report;
}

inline GradientReport gradient_of_G(const Tape& tape, std::span<const double> params,
                                    std::span<const double> targets, const MCConfig& cfg) {
    Kernel kernel = Kernel::freeze(tape, cfg.lane_width);
    PhiloxNormalSource src(cfg.seed, tape.num_randoms(), cfg.antithetic);
    return gradient_of_G(kernel, params, targets, src, cfg);
}

// Same computation over an explicit uniformly weighted scenario set.
inline GradientReport gradient_of_G(const Tape& tape, std::span<const double> params,
                                    std::span<const double> targets, const SampleSpace& space,
                                    int lane_width = 1, int workers = 1,
                                    MemoryMode mode = MemoryMode::Recompute) {
    Kernel kernel = Kernel::freeze(tape, lane_width);
    SampleSpaceSource src(space);
    MCConfig cfg;
    cfg.paths = space.scenarios;
    cfg.seed = 0;
    cfg.lane_width = lane_width;
    cfg.worker_threads = workers;
    cfg.memory_mode = mode;
    return gradient_of_G(kernel, params, targets, src, cfg);
}

// Central differences of G itself under common random numbers: every
// evaluation replays the same seed, so the quotient differentiates a smooth
// deterministic function of the parameters.
inline std::vector<double> finite_diff_gradient_of_G(const Tape& tape,
                                                     std::span<const double> params,
                                                     std::span<const double> targets,
                                                     const MCConfig& cfg, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_diff_gradient_of_G: h must be > 0");
    Kernel kernel = Kernel::freeze(tape, cfg.lane_width);
    PhiloxNormalSource src(cfg.seed, tape.num_randoms(), cfg.antithetic);
    auto G_at = [&](std::span<const double> p) {
        auto means = estimate_means(kernel, p, src, cfg.paths, cfg.worker_threads);
        double g = 0.0;
        for (std::size_t o = 0; o < targets.size(); ++o) {
            const double l = means.means[o] - targets[o];
            g += 0.5 * l * l;
        }
        return g;
    };
    std::vector<double> x(params.begin(), params.end());
    std::vector<double> grad(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) {
        const double saved = x[j];
        x[j] = saved + h;
        const double up = G_at(x);
        x[j] = saved - h;
        const double down = G_at(x);
        x[j] = saved;
        grad[j] = (up - down) / (2.0 * h);
    }
    return grad;
}

// A program of the form g(E[f(x, w)], x): one tape holding the inner and
// outer sections with a single marked expectation node between them. On the
// flat tape the marked node is a plain pass-through, so ordinary replay
// computes the no-expectation composition and composite semantics live
// entirely in expected_backward_ad.
struct CompositeProgram {
    Tape tape;
    static constexpr std::uint32_t no_expect = ~std::uint32_t{0};
    std::uint32_t expect_node = no_expect;

    bool has_expectation() const noexcept { return expect_node != no_expect; }

    // Inserts the expectation operator over `v`. At most one per program.
    VarId mark_expectation(VarId v) {
        if (has_expectation())
            throw TapeError("mark_expectation: program already has an expectation node");
        VarId zero = tape.constant(0.0);
        VarId node = tape.add(v, zero);
        expect_node = node.index;
        return node;
    }
};

struct ExpectedBackwardResult {
    double value = 0.0;            // scenario mean of the output
    std::vector<double> gradient;  // M entries, d value / d parameter
};

// Single backward sweep through an expectation: forward values are vectors
// over the scenario set, the expectation node broadcasts the scenario mean,
// and its reverse rule feeds the mean adjoint back to the argument. The
// gradient comes out as the scenario mean of the parameter adjoints. Written
// against the raw node list on purpose; it shares no evaluation machinery
// with the kernel path it cross-checks.
inline ExpectedBackwardResult expected_backward_ad(const CompositeProgram& prog,
                                                   std::span<const double> params,
                                                   const SampleSpace& space) {
    const Tape& tape = prog.tape;
    if (!prog.has_expectation())
        throw TapeError("expected_backward_ad: program has no expectation node");
    if (tape.num_outputs() != 1)
        throw TapeError("expected_backward_ad: program must have exactly one output");
    if (params.size() != tape.num_params())
        throw EvalError("expected_backward_ad: parameter count mismatch", 0);
    if (space.num_randoms != tape.num_randoms())
        throw EvalError("expected_backward_ad: scenario width mismatch", 0);
    if (space.scenarios == 0)
        throw std::invalid_argument("expected_backward_ad: empty sample space");

    const std::size_t S = space.scenarios;
    const auto& nodes = tape.nodes();
    std::vector<double> val(nodes.size() * S, 0.0);
    auto row = [&](std::size_t i) { return val.data() + i * S; };

    for (std::size_t j = 0; j < tape.param_inputs().size(); ++j) {
        double* r = row(tape.param_inputs()[j]);
        for (std::size_t s = 0; s < S; ++s) r[s] = params[j];
    }
    for (std::size_t j = 0; j < tape.random_inputs().size(); ++j) {
        double* r = row(tape.random_inputs()[j]);
        for (std::size_t s = 0; s < S; ++s) r[s] = space.draws[s * space.num_randoms + j];
    }

    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const TapeNode& n = nodes[i];
        double* out = row(i);
        if (i == prog.expect_node) {
            const double* a = row(n.arg[0]);
            double mean = 0.0;
            for (std::size_t s = 0; s < S; ++s) mean += a[s];
            mean /= static_cast<double>(S);
            for (std::size_t s = 0; s < S; ++s) out[s] = mean;
            continue;
        }
        const double* a = row(n.arg[0]);
        const double* b = row(n.arg[1]);
        switch (n.op) {
            case OpCode::Const:
                for (std::size_t s = 0; s < S; ++s) out[s] = n.literal;
                break;
            case OpCode::Input: break;
            case OpCode::Add:
                for (std::size_t s = 0; s < S; ++s) out[s] = a[s] + b[s];
                break;
            case OpCode::Sub:
                for (std::size_t s = 0; s < S; ++s) out[s] = a[s] - b[s];
                break;
            case OpCode::Mul:
                for (std::size_t s = 0; s < S; ++s) out[s] = a[s] * b[s];
                break;
            case OpCode::Div:
                for (std::size_t s = 0; s < S; ++s) {
                    if (b[s] == 0.0) throw EvalError("division by zero", i, static_cast<long>(s));
                    out[s] = a[s] / b[s];
                }
                break;
            case OpCode::Neg:
                for (std::size_t s = 0; s < S; ++s) out[s] = -a[s];
                break;
            case OpCode::Exp:
                for (std::size_t s = 0; s < S; ++s) out[s] = std::exp(a[s]);
                break;
            case OpCode::Log:
                for (std::size_t s = 0; s < S; ++s) {
                    if (a[s] <= 0.0)
                        throw EvalError("log of non-positive value", i, static_cast<long>(s));
                    out[s] = std::log(a[s]);
                }
                break;
            case OpCode::Sqrt:
                for (std::size_t s = 0; s < S; ++s) {
                    if (a[s] < 0.0)
                        throw EvalError("sqrt of negative value", i, static_cast<long>(s));
                    out[s] = std::sqrt(a[s]);
                }
                break;
            case OpCode::Sin:
                for (std::size_t s = 0; s < S; ++s) out[s] = std::sin(a[s]);
                break;
            case OpCode::Cos:
                for (std::size_t s = 0; s < S; ++s) out[s] = std::cos(a[s]);
                break;
            case OpCode::PowInt: {
                const long long e = static_cast<long long>(n.literal);
                for (std::size_t s = 0; s < S; ++s) {
                    if (e < 0 && a[s] == 0.0)
                        throw EvalError("zero base with negative integer exponent", i,
                                        static_cast<long>(s));
                    out[s] = pow_by_int(a[s], e);
                }
                break;
            }
            case OpCode::MaxZero:
                for (std::size_t s = 0; s < S; ++s) out[s] = a[s] > 0.0 ? a[s] : 0.0;
                break;
            case OpCode::SelectGe: {
                const double* x = row(n.arg[1]);
                const double* y = row(n.arg[2]);
                for (std::size_t s = 0; s < S; ++s) out[s] = a[s] >= 0.0 ? x[s] : y[s];
                break;
            }
        }
    }

    std::vector<double> adj(nodes.size() * S, 0.0);
    auto arow = [&](std::size_t i) { return adj.data() + i * S; };
    {
        double* seed = arow(tape.outputs()[0]);
        for (std::size_t s = 0; s < S; ++s) seed[s] = 1.0;
    }

    for (std::size_t i = nodes.size(); i-- > 0;) {
        const TapeNode& n = nodes[i];
        const double* bar = arow(i);
        if (i == prog.expect_node) {
            double mean = 0.0;
            for (std::size_t s = 0; s < S; ++s) mean += bar[s];
            mean /= static_cast<double>(S);
            double* da = arow(n.arg[0]);
            for (std::size_t s = 0; s < S; ++s) da[s] += mean;
            continue;
        }
        const double* va = row(n.arg[0]);
        const double* vb = row(n.arg[1]);
        const double* vi = row(i);
        double* da = arow(n.arg[0]);
        double* db = arow(n.arg[1]);
        switch (n.op) {
            case OpCode::Const:
            case OpCode::Input: break;
            case OpCode::Add:
                for (std::size_t s = 0; s < S; ++s) da[s] += bar[s];
                for (std::size_t s = 0; s < S; ++s) db[s] += bar[s];
                break;
            case OpCode::Sub:
                for (std::size_t s = 0; s < S; ++s) da[s] += bar[s];
                for (std::size_t s = 0; s < S; ++s) db[s] -= bar[s];
                break;
            case OpCode::Mul:
                for (std::size_t s = 0; s < S; ++s) da[s] += bar[s] * vb[s];
                for (std::size_t s = 0; s < S; ++s) db[s] += bar[s] * va[s];
                break;
            case OpCode::Div:
                for (std::size_t s = 0; s < S; ++s) da[s] += bar[s] / vb[s];
                for (std::size_t s = 0; s < S; ++s) db[s] -= bar[s] * vi[s] / vb[s];
                break;
            case OpCode::Neg:
                for (std::size_t s = 0; s < S; ++s) da[s] -= bar[s];
                break;
            case OpCode::Exp:
                for (std::size_t s = 0; s < S; ++s) da[s] += bar[s] * vi[s];
                break;
            case OpCode::Log:
                for (std::size_t s = 0; s < S; ++s) da[s] += bar[s] / va[s];
                break;
            case OpCode::Sqrt:
                for (std::size_t s = 0; s < S; ++s)
                    da[s] += vi[s] > 0.0 ? bar[s] * 0.5 / vi[s] : 0.0;
                break;
            case OpCode::Sin:
                for (std::size_t s = 0; s < S; ++s) da[s] += bar[s] * std::cos(va[s]);
                break;
            case OpCode::Cos:
                for (std::size_t s = 0; s < S; ++s) da[s] -= bar[s] * std::sin(va[s]);
                break;
            case OpCode::PowInt: {
                const long long e = static_cast<long long>(n.literal);
                if (e != 0)
                    for (std::size_t s = 0; s < S; ++s)
                        da[s] += bar[s] * static_cast<double>(e) * pow_by_int(va[s], e - 1);
                break;
            }
            case OpCode::MaxZero:
                for (std::size_t s = 0; s < S; ++s) da[s] += va[s] > 0.0 ? bar[s] : 0.0;
                break;
            case OpCode::SelectGe: {
                double* dx = arow(n.arg[1]);
                double* dy = arow(n.arg[2]);
                for (std::size_t s = 0; s < S; ++s) dx[s] += va[s] >= 0.0 ? bar[s] : 0.0;
                for (std::size_t s = 0; s < S; ++s) dy[s] += va[s] >= 0.0 ? 0.0 : bar[s];
                break;
            }
        }
    }

    ExpectedBackwardResult result;
    const double* y = row(tape.outputs()[0]);
    for (std::size_t s = 0; s < S; ++s) result.value += y[s];
    result.value /= static_cast<double>(S);
    result.gradient.resize(tape.num_params());
    for (std::size_t j = 0; j < tape.num_params(); ++j) {
        const double* dj = arow(tape.param_inputs()[j]);
        double g = 0.0;
        for (std::size_t s = 0; s < S; ++s) g += dj[s];
        result.gradient[j] = g / static_cast<double>(S);
    }
    return result;
}

}  // namespace lanetape
