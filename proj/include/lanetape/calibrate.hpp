#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "lanetape/expectation.hpp"

namespace lanetape {

// Box constraints; lo[j] == hi[j] freezes parameter j at that value.
struct Bounds {
    std::vector<double> lo;
    std::vector<double> hi;

    void check(std::size_t n) const {
        if (lo.size() != n || hi.size() != n)
            throw std::invalid_argument("Bounds: need lo/hi entries for every parameter");
        for (std::size_t j = 0; j < n; ++j)
            if (!(lo[j] <= hi[j]))
                throw std::invalid_argument("Bounds: lo > hi at index " + std::to_string(j));
    }

    void project(std::span<double> x) const {
        for (std::size_t j = 0; j < x.size(); ++j)
            x[j] = std::min(std::max(x[j], lo[j]), hi[j]);
    }

    static Bounds unconstrained(std::size_t n) {
        const double inf = std::numeric_limits<double>::infinity();
        return Bounds{std::vector<double>(n, -inf), std::vector<double>(n, inf)};
    }
};

struct OptimizerConfig {
    std::size_t max_iters = 500;
    double initial_step = 1.0;
    double armijo_c = 1e-4;     // required fraction of the predicted decrease
    double backtrack = 0.5;     // step shrink factor inside the line search
    double step_growth = 2.0;   // accepted step is re-tried larger next iter
    double min_step = 1e-16;    // line search gives up below this
    double g_tol = 0.0;         // stop when G <= g_tol
    double g_rel_tol = 0.0;     // stop when G <= g_rel_tol * G(start)
    double grad_tol = 0.0;      // stop when the projected gradient norm <= grad_tol
    // Per-parameter descent scaling (empty = all ones). Descending in the
    // rescaled coordinates x_j / scales[j] evens out curvature when
    // parameters live on very different magnitudes; iterates, gradients and
    // the trajectory stay in the original coordinates.
    std::vector<double> scales;
};

struct TrajectoryPoint {
    std::size_t iter = 0;
    double G = 0.0;
    double grad_norm = 0.0;  // projected gradient norm at this iterate
    double step = 0.0;       // step accepted to reach this iterate (0 at start)
    std::vector<double> params;
};

struct Trajectory {
    std::vector<TrajectoryPoint> points;

    // CSV: iter,G,grad_norm,step,<one column per parameter>. Column names
    // default to p0..p{M-1} when none are given.
    void write_csv(std::ostream& os, std::span<const std::string> param_names = {}) const {
        const std::size_t n = points.empty() ? param_names.size() : points.front().params.size();
        os << "iter,G,grad_norm,step";
        for (std::size_t j = 0; j < n; ++j) {
            os << ',';
            if (j < param_names.size())
                os << param_names[j];
            else
                os << 'p' << j;
        }
        os << '\n';
        char buf[32];
        auto num = [&](double v) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            os << buf;
        };
        for (const auto& pt : points) {
            os << pt.iter << ',';
            num(pt.G);
            os << ',';
            num(pt.grad_norm);
            os << ',';
            num(pt.step);
            for (double p : pt.params) {
                os << ',';
                num(p);
            }
            os << '\n';
        }
    }
};

struct CalibrationResult {
    std::vector<double> params;
    double G = 0.0;
    std::vector<double> grad;
    std::size_t iters = 0;
    bool converged = false;
    std::string stop_reason;  // g_tol | g_rel_tol | grad_tol | max_iters | line_search_failed
    Trajectory trajectory;
};

// Objective callbacks. `value` is the forward-only evaluation used inside
// the line search; `value_and_grad` pays for the reverse sweep as well. Both
// must evaluate under common random numbers or the line search sees noise
// instead of descent.
struct Objective {
    std::function<GradientReport(std::span<const double>)> value_and_grad;
    std::function<double(std::span<const double>)> value;
};

// Projected gradient descent with Armijo backtracking. Candidate steps are
// x_t = P(x - t D g) with D = diag(scales^2), the metric induced by the
// coordinate rescaling x_j / scales[j]; acceptance requires
//   G(x_t) <= G(x) - armijo_c * <g, x - x_t>.
// The accepted t is grown by step_growth for the next iteration.
inline CalibrationResult gradient_descent(const Objective& objective,
                                          std::span<const double> x0, const Bounds& bounds,
                                          const OptimizerConfig& cfg) {
    const std::size_t n = x0.size();
    bounds.check(n);
    if (!objective.value_and_grad || !objective.value)
        throw std::invalid_argument("gradient_descent: objective callbacks must be set");
    if (!(cfg.initial_step > 0.0) || !(cfg.backtrack > 0.0) || !(cfg.backtrack < 1.0))
        throw std::invalid_argument("gradient_descent: bad step configuration");
    if (!cfg.scales.empty() && cfg.scales.size() != n)
        throw std::invalid_argument("gradient_descent: scales size mismatch");
    std::vector<double> s2(n, 1.0);
    for (std::size_t j = 0; j < cfg.scales.size(); ++j) {
        if (!(cfg.scales[j] > 0.0) || !std::isfinite(cfg.scales[j]))
            throw std::invalid_argument("gradient_descent: scales must be positive");
        s2[j] = cfg.scales[j] * cfg.scales[j];
    }

    CalibrationResult res;
    std::vector<double> x(x0.begin(), x0.end());
    bounds.project(x);

    GradientReport rep = objective.value_and_grad(x);
    double G0 = rep.G;
    double step = cfg.initial_step;
    double last_accepted = 0.0;

    auto projected_norm = [&](const std::vector<double>& xi, const std::vector<double>& g) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double pj = std::min(std::max(xi[j] - g[j], bounds.lo[j]), bounds.hi[j]);
            const double d = xi[j] - pj;
            s += d * d;
        }
        return std::sqrt(s);
    };

    for (std::size_t iter = 0;; ++iter) {
        const double gnorm = projected_norm(x, rep.grad);
        res.trajectory.points.push_back({iter, rep.G, gnorm, last_accepted, x});

        if (cfg.g_tol > 0.0 && rep.G <= cfg.g_tol) {
            res.converged = true;
            res.stop_reason = "g_tol";
        } else if (cfg.g_rel_tol > 0.0 && rep.G <= cfg.g_rel_tol * G0) {
            res.converged = true;
            res.stop_reason = "g_rel_tol";
        } else if (cfg.grad_tol > 0.0 && gnorm <= cfg.grad_tol) {
            res.converged = true;
            res.stop_reason = "grad_tol";
        } else if (iter >= cfg.max_iters) {
            res.converged = false;
            res.stop_reason = "max_iters";
        }
        if (!res.stop_reason.empty()) {
            res.params = x;
            res.G = rep.G;
            res.grad = rep.grad;
            res.iters = iter;
            return res;
        }

        double t = step;
        std::vector<double> xt(n);
        bool accepted = false;
        while (t >= cfg.min_step) {
            for (std::size_t j = 0; j < n; ++j) xt[j] = x[j] - t * s2[j] * rep.grad[j];
            bounds.project(xt);
            double predicted = 0.0;
            for (std::size_t j = 0; j < n; ++j) predicted += rep.grad[j] * (x[j] - xt[j]);
            const double Gt = objective.value(xt);
            if (Gt <= rep.G - cfg.armijo_c * predicted && predicted > 0.0) {
                accepted = true;
                break;
            }
            t *= cfg.backtrack;
        }
        if (!accepted) {
            res.params = x;
            res.G = rep.G;
            res.grad = rep.grad;
            res.iters = iter;
            res.converged = false;
            res.stop_reason = "line_search_failed";
            return res;
        }

        x = xt;
        last_accepted = t;
        step = t * cfg.step_growth;
        rep = objective.value_and_grad(x);
    }
}

// Calibration targets manufactured from a known parameter vector: the mean
// estimates at the truth under the same seed the calibration will use, so
// the objective's global minimum is exactly zero at the truth.
inline Targets synthetic_targets(const Tape& tape, std::span<const double> truth,
                                 const MCConfig& cfg) {
    return estimate_means(tape, truth, cfg).means;
}

}  // namespace lanetape
