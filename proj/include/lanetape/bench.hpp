#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lanetape/expectation.hpp"
#include "lanetape/heston.hpp"

namespace lanetape {

struct TimerSpec {
    int reps = 5;      // timed repetitions; the median is reported
    int warmups = 1;   // untimed leading runs
    // one repetition re-runs the body until at least this much time passed,
    // keeping short bodies well above the clock resolution
    double min_duration_sec = 0.05;
};

namespace detail {

inline double now_sec() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace detail

// Seconds per call of `body`, median over spec.reps repetitions after
// spec.warmups unmeasured calls. Each repetition loops the body adaptively
// until min_duration_sec elapsed.
template <typename F>
double time_median_sec(F&& body, const TimerSpec& spec) {
    if (spec.reps < 1 || spec.warmups < 0)
        throw std::invalid_argument("time_median_sec: bad repetition counts");
    for (int w = 0; w < spec.warmups; ++w) body();

    std::vector<double> samples;
    samples.reserve(spec.reps);
    for (int r = 0; r < spec.reps; ++r) {
        long calls = 0;
        const double start = detail::now_sec();
        double elapsed = 0.0;
        do {
            body();
            ++calls;
            elapsed = detail::now_sec() - start;
        } while (elapsed < spec.min_duration_sec);
        samples.push_back(elapsed / static_cast<double>(calls));
    }
    std::sort(samples.begin(), samples.end());
    return samples[samples.size() / 2];
}

// Measured per-path costs and their ratios against the scalar baseline.
// cost_F is seconds per evaluation of the hand-written simulator; cost_Fv
// and cost_Rv are seconds per path through the batch kernel (forward pass,
// and reverse sweep from stored state). total_ratio is the full two-pass
// gradient in recompute mode divided by paths * cost_F.
struct BenchReport {
    std::string label;
    int lane_width = 1;
    int worker_threads = 1;
    std::size_t steps = 0;
    std::size_t m = 0;      // outputs
    std::size_t M = 0;      // parameters
    std::size_t paths = 0;
    double cost_F = 0.0;
    double cost_Fv = 0.0;
    double cost_Rv = 0.0;
    double kf_over_c = 0.0;
    double kr_over_c = 0.0;
    double total_ratio = 0.0;
    // step-2-only costs backing the store/recompute comparison
    double cost_step2_store = 0.0;
    double cost_step2_recompute = 0.0;
    std::string timestamp;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["label"] = label;
        j["lane_width"] = lane_width;
        j["worker_threads"] = worker_threads;
        j["steps"] = steps;
        j["m"] = m;
        j["M"] = M;
        j["paths"] = paths;
        j["cost_F"] = cost_F;
        j["cost_Fv"] = cost_Fv;
        j["cost_Rv"] = cost_Rv;
        j["kf_over_c"] = kf_over_c;
        j["kr_over_c"] = kr_over_c;
        j["total_ratio"] = total_ratio;
        j["cost_step2_store"] = cost_step2_store;
        j["cost_step2_recompute"] = cost_step2_recompute;
        j["timestamp"] = timestamp;
        return j;
    }
};

inline std::string utc_timestamp() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct BenchConfig {
    std::string label;
    int lane_width = 4;
    int worker_threads = 1;
    TimerSpec timer;
    // stored-state measurements fall back to a path subset if the full set
    // would exceed this
    std::size_t store_limit_bytes = std::size_t{3} << 30;
};

// Measures every coefficient on one model shape. Draws are materialized up
// front so no generator work pollutes the timed regions; the identity
// total_ratio ~= 2 * kf_over_c + kr_over_c then holds up to bookkeeping
// overhead because the timed pipelines are the ones the gradient itself runs.
inline BenchReport measure_coefficients(const ModelSpec& spec, const BenchConfig& cfg) {
    validate(spec);
    HestonProgram prog = record_heston_program(spec);
    const Kernel kernel = Kernel::freeze(prog.tape, cfg.lane_width);
    HestonSimulator sim(spec.heston, spec.grid, spec.instruments, spec.mc.steps, spec.mc.dt);

    const std::size_t paths = spec.mc.paths;
    const std::size_t N = prog.tape.num_randoms();
    const std::size_t m = prog.tape.num_outputs();
    const PhiloxNormalSource philox(spec.mc.seed, N);
    const BufferDrawSource draws = BufferDrawSource::materialize(philox, paths);

    BenchReport rep;
    rep.label = cfg.label;
    rep.lane_width = cfg.lane_width;
    rep.worker_threads = cfg.worker_threads;
    rep.steps = spec.mc.steps;
    rep.m = m;
    rep.M = prog.tape.num_params();
    rep.paths = paths;
    rep.timestamp = utc_timestamp();

    // scalar baseline: every path through the hand-written simulator
    {
        std::vector<double> path_buf(N), payoffs(m);
        double sink = 0.0;
        const double sec = time_median_sec(
            [&] {
                for (std::size_t p = 0; p < paths; ++p) {
                    draws.fill(p, path_buf);
                    sim.simulate_path(path_buf, payoffs);
                    sink += payoffs[0];
                }
            },
            cfg.timer);
        rep.cost_F = sec / static_cast<double>(paths);
        if (!std::isfinite(sink)) throw std::runtime_error("bench: baseline produced non-finite");
    }

    const std::vector<double>& params = prog.initial_params;
    double sink = 0.0;

    // vectorized forward pass, the same pipeline gradient_of_G runs in step 1
    {
        const double sec = time_median_sec(
            [&] {
                sink += detail::forward_pass(kernel, params, draws, 0, paths,
                                             cfg.worker_threads, false)
                            .sum[0];
            },
            cfg.timer);
        rep.cost_Fv = sec / static_cast<double>(paths);
    }

    // reverse sweep from stored state; capped to a path subset when the
    // state would not fit
    {
        std::size_t store_paths = paths;
        if (kernel.store_bytes(store_paths) > cfg.store_limit_bytes) {
            const std::size_t batches_fit =
                std::max<std::size_t>(1, cfg.store_limit_bytes / kernel.state_bytes());
            store_paths =
                std::min(paths, batches_fit * static_cast<std::size_t>(kernel.lane_width()));
        }
        auto stored = detail::forward_pass(kernel, params, draws, 0, store_paths,
                                           cfg.worker_threads, true);
        const std::vector<double> lambda(m, 1.0);
        const double store_sec = time_median_sec(
            [&] {
                sink += detail::reverse_pass(kernel, params, draws, 0, store_paths,
                                             cfg.worker_threads, lambda, &stored.states)[0];
            },
            cfg.timer);
        rep.cost_Rv = store_sec / static_cast<double>(store_paths);
        rep.cost_step2_store = rep.cost_Rv;

        const double recompute_sec = time_median_sec(
            [&] {
                sink += detail::reverse_pass(kernel, params, draws, 0, store_paths,
                                             cfg.worker_threads, lambda, nullptr)[0];
            },
            cfg.timer);
        rep.cost_step2_recompute = recompute_sec / static_cast<double>(store_paths);
    }

    // full two-pass gradient, recompute mode
    {
        MCConfig mc;
        mc.paths = paths;
        mc.seed = spec.mc.seed;
        mc.lane_width = cfg.lane_width;
        mc.worker_threads = cfg.worker_threads;
        mc.memory_mode = MemoryMode::Recompute;
        const Targets zeros(m, 0.0);
        const double sec = time_median_sec(
            [&] { sink += gradient_of_G(kernel, params, zeros, draws, mc).G; }, cfg.timer);
        rep.total_ratio = sec / (static_cast<double>(paths) * rep.cost_F);
    }
    if (!std::isfinite(sink)) throw std::runtime_error("bench: kernel produced non-finite");

    rep.kf_over_c = rep.cost_Fv / rep.cost_F;
    rep.kr_over_c = rep.cost_Rv / rep.cost_F;
    return rep;
}

inline void write_bench_csv_header(std::ostream& os) {
    os << "label,lane_width,threads,steps,m,M,paths,cost_F,cost_Fv,cost_Rv,"
          "kf_over_c,kr_over_c,total_ratio\n";
}

inline void write_bench_csv_row(std::ostream& os, const BenchReport& r) {
    char buf[32];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        os << buf;
    };
    os << r.label << ',' << r.lane_width << ',' << r.worker_threads << ',' << r.steps << ','
       << r.m << ',' << r.M << ',' << r.paths << ',';
    num(r.cost_F);
    os << ',';
    num(r.cost_Fv);
    os << ',';
    num(r.cost_Rv);
    os << ',';
    num(r.kf_over_c);
    os << ',';
    num(r.kr_over_c);
    os << ',';
    num(r.total_ratio);
    os << '\n';
}

inline void write_bench_csv(std::ostream& os, std::span<const BenchReport> reports) {
    write_bench_csv_header(os);
    for (const auto& r : reports) write_bench_csv_row(os, r);
}

// Reads rows written by write_bench_csv. Lines starting with '#' are
// artifact headers and skipped; the column header is validated.
inline std::vector<BenchReport> parse_bench_csv(std::istream& is) {
    std::vector<BenchReport> out;
    std::string line;
    bool saw_header = false;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!saw_header) {
            if (line.rfind("label,", 0) != 0)
                throw std::invalid_argument("bench csv: missing column header");
            saw_header = true;
            continue;
        }
        std::istringstream ss(line);
        std::string field;
        auto next = [&] {
            if (!std::getline(ss, field, ','))
                throw std::invalid_argument("bench csv: short row");
            return field;
        };
        BenchReport r;
        r.label = next();
        r.lane_width = std::stoi(next());
        r.worker_threads = std::stoi(next());
        r.steps = std::stoull(next());
        r.m = std::stoull(next());
        r.M = std::stoull(next());
        r.paths = std::stoull(next());
        r.cost_F = std::stod(next());
        r.cost_Fv = std::stod(next());
        r.cost_Rv = std::stod(next());
        r.kf_over_c = std::stod(next());
        r.kr_over_c = std::stod(next());
        r.total_ratio = std::stod(next());
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace lanetape
