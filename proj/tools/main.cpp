// Command line front end: gradcheck, price, bench and calibrate over a JSON
// model config. Flags override file values; the effective config is echoed
// into every artifact so a result file identifies the run that made it.
//
// Exit codes: 0 success, 1 validation or usage error, 2 numerical error.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "lanetape/lanetape.hpp"

namespace lt = lanetape;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_validation = 1;
constexpr int exit_numerical = 2;

struct CommonOpts {
    std::string config_path;
    std::string out_dir = ".";
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> paths;
    int lane_width = 4;
    int threads = 1;
    std::string memory_mode = "recompute";
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "model config JSON")->required();
    cmd->add_option("--out-dir", o.out_dir, "directory for output artifacts");
    cmd->add_option("--seed", o.seed, "override mc.seed");
    cmd->add_option("--paths", o.paths, "override mc.paths");
    cmd->add_option("--lane-width", o.lane_width, "kernel lanes per batch (1, 4 or 8)");
    cmd->add_option("--threads", o.threads, "worker threads");
    cmd->add_option("--memory-mode", o.memory_mode, "reverse sweep mode: recompute or store")
        ->check(CLI::IsMember({"recompute", "store"}));
}

lt::ModelSpec load_spec(const CommonOpts& o) {
    lt::ModelSpec spec = lt::load_model_spec(o.config_path);
    if (o.seed) spec.mc.seed = *o.seed;
    if (o.paths) spec.mc.paths = *o.paths;
    lt::validate(spec);
    return spec;
}

lt::MCConfig mc_config(const lt::ModelSpec& spec, const CommonOpts& o) {
    lt::MCConfig cfg;
    cfg.paths = spec.mc.paths;
    cfg.seed = spec.mc.seed;
    cfg.lane_width = o.lane_width;
    cfg.worker_threads = o.threads;
    cfg.memory_mode =
        o.memory_mode == "store" ? lt::MemoryMode::Store : lt::MemoryMode::Recompute;
    return cfg;
}

nlohmann::ordered_json effective_config(const char* command, const lt::ModelSpec& spec,
                                        const CommonOpts& o) {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["model"] = lt::to_json(spec);
    j["run"] = {{"lane_width", o.lane_width},
                {"worker_threads", o.threads},
                {"memory_mode", o.memory_mode}};
    return j;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::invalid_argument("cannot write " + path.string());
    out << text;
    std::cout << "wrote " << path.string() << "\n";
}

std::filesystem::path prepare_out_dir(const CommonOpts& o) {
    std::filesystem::path dir(o.out_dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// JSON artifact: the echoed config first, then the report fields.
std::string with_config_header(const nlohmann::ordered_json& config,
                               const nlohmann::ordered_json& body) {
    nlohmann::ordered_json j;
    j["config"] = config;
    for (const auto& [key, value] : body.items()) j[key] = value;
    return j.dump(2) + "\n";
}

std::string csv_config_header(const nlohmann::ordered_json& config) {
    return "# config: " + config.dump() + "\n";
}

void require_finite(std::span<const double> xs, const char* what) {
    for (double x : xs)
        if (!std::isfinite(x))
            throw lt::EvalError(std::string(what) + ": non-finite result", 0);
}

const std::array<std::string, lt::heston_free_params> scalar_names{"kappa", "theta", "xi",
                                                                   "rho", "v0"};

std::vector<std::string> param_names(const lt::LeverageGrid& g) {
    std::vector<std::string> names(scalar_names.begin(), scalar_names.end());
    for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c)
            names.push_back("L_" + std::to_string(r) + "_" + std::to_string(c));
    return names;
}

// --- gradcheck ---------------------------------------------------------

struct GradcheckOpts {
    CommonOpts common;
    // balances truncation against roundoff: variance-path parameters carry
    // enough curvature that 1e-5 is already truncation-limited
    double fd_h = 3e-7;
    double tolerance = 1e-6;
};

int run_gradcheck(const GradcheckOpts& o) {
    const lt::ModelSpec spec = load_spec(o.common);
    const lt::MCConfig cfg = mc_config(spec, o.common);
    lt::HestonProgram prog = lt::record_heston_program(spec);

    // Self-contained targets: 90% of the model means at the config
    // parameters, so the residuals are nonzero but deterministic.
    auto means = lt::estimate_means(prog.tape, prog.initial_params, cfg);
    require_finite(means.means, "gradcheck means");
    lt::Targets targets(means.means.size());
    for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = 0.9 * means.means[i];

    const auto report = lt::gradient_of_G(prog.tape, prog.initial_params, targets, cfg);
    require_finite(report.grad, "gradcheck gradient");
    const auto fd = lt::finite_diff_gradient_of_G(prog.tape, prog.initial_params, targets, cfg,
                                                  o.fd_h);
    require_finite(fd, "gradcheck finite differences");

    double max_rel = 0.0;
    std::vector<double> rel(report.grad.size());
    for (std::size_t j = 0; j < report.grad.size(); ++j) {
        const double denom = std::max(std::fabs(report.grad[j]), 1e-8);
        rel[j] = std::fabs(report.grad[j] - fd[j]) / denom;
        max_rel = std::max(max_rel, rel[j]);
    }
    const bool pass = max_rel <= o.tolerance;

    nlohmann::ordered_json body;
    body["h"] = o.fd_h;
    body["tolerance"] = o.tolerance;
    body["max_rel_err"] = max_rel;
    body["pass"] = pass;
    body["G"] = report.G;
    body["grad"] = report.grad;
    body["fd_grad"] = fd;
    body["rel_err"] = rel;
    const auto dir = prepare_out_dir(o.common);
    write_text_file(dir / "gradcheck.json",
                    with_config_header(effective_config("gradcheck", spec, o.common), body));

    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", max_rel);
    std::cout << "gradcheck: max rel err " << buf << " over " << report.grad.size()
              << " parameters, tolerance " << o.tolerance << " -> "
              << (pass ? "PASS" : "FAIL") << "\n";
    return pass ? exit_ok : exit_validation;
}

// --- price -------------------------------------------------------------

int run_price(const CommonOpts& o) {
    const lt::ModelSpec spec = load_spec(o);
    const lt::MCConfig cfg = mc_config(spec, o);
    lt::HestonProgram prog = lt::record_heston_program(spec);
    const auto means = lt::estimate_means(prog.tape, prog.initial_params, cfg);
    require_finite(means.means, "price means");

    nlohmann::ordered_json body;
    body["means"] = means.means;
    body["std_errors"] = means.std_errors;
    body["paths"] = means.paths;
    body["seed"] = spec.mc.seed;
    const auto dir = prepare_out_dir(o);
    write_text_file(dir / "price.json",
                    with_config_header(effective_config("price", spec, o), body));

    for (std::size_t i = 0; i < means.means.size(); ++i)
        std::cout << "instrument " << i << ": mean " << means.means[i] << " (se "
                  << means.std_errors[i] << ")\n";
    return exit_ok;
}

// --- bench -------------------------------------------------------------

struct BenchOpts {
    CommonOpts common;
    std::string label = "heston";
    int reps = 5;
    int warmups = 1;
};

int run_bench(const BenchOpts& o) {
    const lt::ModelSpec spec = load_spec(o.common);
    lt::BenchConfig cfg;
    cfg.label = o.label;
    cfg.lane_width = o.common.lane_width;
    cfg.worker_threads = o.common.threads;
    cfg.timer.reps = std::max(o.reps, 5);
    cfg.timer.warmups = std::max(o.warmups, 1);

    const lt::BenchReport rep = lt::measure_coefficients(spec, cfg);
    const auto config = effective_config("bench", spec, o.common);

    const auto dir = prepare_out_dir(o.common);
    write_text_file(dir / "bench.json", with_config_header(config, rep.to_json()));
    std::ostringstream csv;
    csv << csv_config_header(config);
    lt::write_bench_csv(csv, std::span<const lt::BenchReport>(&rep, 1));
    write_text_file(dir / "bench.csv", csv.str());

    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "bench %s: kf/c %.3f kr/c %.3f total %.3f (lane_width %d)\n",
                  rep.label.c_str(), rep.kf_over_c, rep.kr_over_c, rep.total_ratio,
                  rep.lane_width);
    std::cout << buf;
    return exit_ok;
}

// --- calibrate ---------------------------------------------------------

struct CalibrateOpts {
    CommonOpts common;
    std::string free_params = "kappa,theta";
    std::vector<std::string> init;  // name=value overrides for free scalars
    double init_factor = 1.5;
    std::size_t max_iters = 500;
    double g_rel_tol = 1e-10;
    double initial_step = 1.0;
};

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(tok);
    return out;
}

int run_calibrate(const CalibrateOpts& o) {
    const lt::ModelSpec spec = load_spec(o.common);
    const lt::MCConfig cfg = mc_config(spec, o.common);
    lt::HestonProgram prog = lt::record_heston_program(spec);
    const std::vector<double>& truth = prog.initial_params;
    const std::size_t M = truth.size();
    const auto names = param_names(spec.grid);

    // frozen at truth unless named in --free
    lt::Bounds bounds{std::vector<double>(truth.begin(), truth.end()),
                      std::vector<double>(truth.begin(), truth.end())};
    const std::array<std::pair<double, double>, lt::heston_free_params> scalar_box{
        {{1e-3, 25.0}, {1e-5, 4.0}, {0.0, 5.0}, {-0.995, 0.995}, {1e-5, 4.0}}};
    std::vector<bool> is_free(M, false);
    for (const auto& tok : split_csv(o.free_params)) {
        bool matched = false;
        for (std::size_t j = 0; j < lt::heston_free_params; ++j)
            if (tok == scalar_names[j]) {
                bounds.lo[j] = scalar_box[j].first;
                bounds.hi[j] = scalar_box[j].second;
                is_free[j] = true;
                matched = true;
            }
        if (tok == "leverage") {
            for (std::size_t j = lt::heston_free_params; j < M; ++j) {
                bounds.lo[j] = 1e-3;
                bounds.hi[j] = 10.0;
                is_free[j] = true;
            }
            matched = true;
        }
        if (!matched)
            throw std::invalid_argument(
                "calibrate: unknown --free token '" + tok +
                "' (expected kappa, theta, xi, rho, v0 or leverage)");
    }
    if (std::none_of(is_free.begin(), is_free.end(), [](bool b) { return b; }))
        throw std::invalid_argument("calibrate: --free selected no parameters");

    // start: free parameters perturbed off the truth, then optional overrides
    std::vector<double> x0(truth.begin(), truth.end());
    for (std::size_t j = 0; j < M; ++j)
        if (is_free[j]) x0[j] = truth[j] * o.init_factor;
    for (const auto& kv : o.init) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("calibrate: --init expects name=value, got '" + kv + "'");
        const std::string name = kv.substr(0, eq);
        const double value = std::stod(kv.substr(eq + 1));
        const auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end())
            throw std::invalid_argument("calibrate: unknown parameter '" + name + "'");
        x0[static_cast<std::size_t>(it - names.begin())] = value;
    }
    bounds.project(x0);

    const lt::Targets targets = lt::synthetic_targets(prog.tape, truth, cfg);

    lt::Objective objective;
    objective.value_and_grad = [&](std::span<const double> x) {
        return lt::gradient_of_G(prog.tape, x, targets, cfg);
    };
    objective.value = [&](std::span<const double> x) {
        const auto m = lt::estimate_means(prog.tape, x, cfg);
        double G = 0.0;
        for (std::size_t i = 0; i < targets.size(); ++i) {
            const double l = m.means[i] - targets[i];
            G += 0.5 * l * l;
        }
        return G;
    };

    lt::OptimizerConfig opt;
    opt.max_iters = o.max_iters;
    opt.g_rel_tol = o.g_rel_tol;
    opt.initial_step = o.initial_step;
    // Heston parameters span several orders of magnitude; descend in
    // truth-scaled coordinates so no single parameter dominates the metric.
    opt.scales.resize(M);
    for (std::size_t j = 0; j < M; ++j)
        opt.scales[j] = std::max(std::abs(truth[j]), 1e-2);
    const lt::CalibrationResult res = lt::gradient_descent(objective, x0, bounds, opt);
    require_finite(res.params, "calibrate parameters");

    const auto config = effective_config("calibrate", spec, o.common);
    nlohmann::ordered_json body;
    body["converged"] = res.converged;
    body["stop_reason"] = res.stop_reason;
    body["iters"] = res.iters;
    body["G"] = res.G;
    body["targets"] = targets;
    nlohmann::ordered_json fitted, truth_j, start_j;
    for (std::size_t j = 0; j < M; ++j) {
        if (!is_free[j]) continue;
        fitted[names[j]] = res.params[j];
        truth_j[names[j]] = truth[j];
        start_j[names[j]] = x0[j];
    }
    body["fitted"] = fitted;
    body["truth"] = truth_j;
    body["start"] = start_j;

    const auto dir = prepare_out_dir(o.common);
    write_text_file(dir / "calibrate.json", with_config_header(config, body));
    std::ostringstream csv;
    csv << csv_config_header(config);
    res.trajectory.write_csv(csv, names);
    write_text_file(dir / "trajectory.csv", csv.str());

    std::cout << "calibrate: " << res.stop_reason << " after " << res.iters << " iterations, G "
              << res.G << "\n";
    for (std::size_t j = 0; j < M; ++j)
        if (is_free[j])
            std::cout << "  " << names[j] << ": " << res.params[j] << " (truth " << truth[j]
                      << ")\n";
    return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tape-based Monte Carlo gradients for Heston SLV calibration"};
    app.require_subcommand(1);

    GradcheckOpts gc;
    CLI::App* gradcheck = app.add_subcommand(
        "gradcheck", "compare the two-pass gradient against central differences");
    add_common(gradcheck, gc.common);
    gradcheck->add_option("--fd-h", gc.fd_h, "central difference step");
    gradcheck->add_option("--tolerance", gc.tolerance, "max relative error to pass");

    CommonOpts pr;
    CLI::App* price = app.add_subcommand("price", "estimate instrument means");
    add_common(price, pr);

    BenchOpts be;
    CLI::App* bench = app.add_subcommand("bench", "measure per-path cost coefficients");
    add_common(bench, be.common);
    bench->add_option("--label", be.label, "row label for the CSV");
    bench->add_option("--reps", be.reps, "timed repetitions (min 5)");
    bench->add_option("--warmups", be.warmups, "untimed warmup runs (min 1)");

    CalibrateOpts ca;
    CLI::App* calibrate =
        app.add_subcommand("calibrate", "recover parameters from synthetic targets");
    add_common(calibrate, ca.common);
    calibrate->add_option("--free", ca.free_params,
                          "comma list of kappa,theta,xi,rho,v0,leverage to calibrate");
    calibrate->add_option("--init", ca.init, "name=value starting overrides");
    calibrate->add_option("--init-factor", ca.init_factor,
                          "multiplicative perturbation for free starting values");
    calibrate->add_option("--max-iters", ca.max_iters, "iteration cap");
    calibrate->add_option("--g-rel-tol", ca.g_rel_tol, "stop when G <= tol * G(start)");
    calibrate->add_option("--initial-step", ca.initial_step, "first line search step");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_validation;
    }

    try {
        if (gradcheck->parsed()) return run_gradcheck(gc);
        if (price->parsed()) return run_price(pr);
        if (bench->parsed()) return run_bench(be);
        if (calibrate->parsed()) return run_calibrate(ca);
        std::cerr << "no subcommand given\n";
        return exit_validation;
    } catch (const lt::EvalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return exit_numerical;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return exit_validation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_validation;
    }
}
