#pragma once

// Optimality-criteria (OC) density update, the SIMP optimization loop and
// the volume-matched threshold binarization used as the baseline filter.

#include "cnnto/error.hpp"
#include "cnnto/fem.hpp"
#include "cnnto/io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace cnnto {

struct OcParams {
    double move_limit = 0.2;
    double eta = 0.5;
    double volume_fraction = 0.5;
    int max_iters = 40;
    double convergence_tol = 0.01;  // on max |x_new - x|

    void validate() const {
        require(move_limit > 0.0 && move_limit <= 1.0, "OcParams: move_limit must be in (0, 1]");
        require(eta > 0.0 && eta <= 1.0, "OcParams: eta must be in (0, 1]");
        require(volume_fraction > 0.0 && volume_fraction < 1.0,
                "OcParams: volume_fraction must be in (0, 1)");
        require(max_iters >= 0, "OcParams: max_iters must be >= 0");
        require(convergence_tol > 0.0, "OcParams: convergence_tol must be > 0");
    }
};

struct TraceRecord {
    int iteration = 0;
    double compliance = 0.0;
    double volume = 0.0;
    double linf_change = 0.0;
};

struct OptimizationTrace {
    std::vector<TraceRecord> records;
    std::map<int, DensityField> snapshots;

    const TraceRecord& initial() const { return records.front(); }
    const TraceRecord& final() const { return records.back(); }
    int updates() const { return records.empty() ? 0 : records.back().iteration; }
};

inline std::string trace_to_csv(const OptimizationTrace& trace) {
    std::string s = "iter,compliance,volume,linf_change\n";
    for (const auto& r : trace.records) {
        s += std::to_string(r.iteration) + ',' + format_double(r.compliance) + ',' +
             format_double(r.volume) + ',' + format_double(r.linf_change) + '\n';
    }
    return s;
}

inline void write_trace_csv(const std::filesystem::path& path, const OptimizationTrace& trace) {
    auto out = open_for_write(path);
    out << trace_to_csv(trace);
}

namespace detail {

inline void check_oc_inputs(const DensityField& density, const SensitivityField& sens, double x_min) {
    if (sens.values.rows() != density.values.rows() || sens.values.cols() != density.values.cols())
        throw InputError("oc_update: sensitivity shape does not match density");
    bool any_negative = false;
    for (int i = 0; i < sens.size(); ++i) {
        const double s = sens[i];
        if (!std::isfinite(s)) throw InputError("oc_update: non-finite sensitivity");
        if (s > 0.0) throw InputError("oc_update: compliance sensitivities must be <= 0");
        any_negative |= s < 0.0;
    }
    if (!any_negative)
        throw DegenerateInputError("oc_update: sensitivity field is all zero, B_i is undefined");
    for (int i = 0; i < density.size(); ++i) {
        const double x = density[i];
        if (!(x >= x_min - 1e-12 && x <= 1.0 + 1e-12))
            throw InputError("oc_update: density outside [x_min, 1]");
    }
}

}  // namespace detail

/// The OC update for a fixed multiplier:
/// x_new = clamp(x (-dc/dx / lambda)^eta, max(x_min, x - m), min(1, x + m)).
inline DensityField oc_apply(const DensityField& density, const SensitivityField& sens, double lambda,
                             const OcParams& params, double x_min) {
    DensityField out(density.values, false);
    for (int i = 0; i < density.size(); ++i) {
        const double x = density[i];
        const double lo = std::max(x_min, x - params.move_limit);
        const double hi = std::min(1.0, x + params.move_limit);
        const double b = -sens[i] / lambda;
        out[i] = std::clamp(x * std::pow(b, params.eta), lo, hi);
    }
    return out;
}

/// Lagrange multiplier that makes the updated volume hit `target_volume`.
/// Bisection runs in log space on [1e-10, 1e10] (widened if needed) and
/// stops once the bracket is tight to machine precision.
inline double bisect_lambda(const DensityField& density, const SensitivityField& sens,
                            const OcParams& params, double x_min, double target_volume) {
    detail::check_oc_inputs(density, sens, x_min);
    const double n = density.size();
    const double tol = 1e-4 * n;
    auto volume_at = [&](double lambda) { return oc_apply(density, sens, lambda, params, x_min).volume(); };

    double lo = 1e-10;
    double hi = 1e10;
    for (int k = 0; k < 20 && volume_at(lo) < target_volume - tol; ++k) lo *= 1e-10;
    for (int k = 0; k < 20 && volume_at(hi) > target_volume + tol; ++k) hi *= 1e10;
    if (volume_at(lo) < target_volume - tol || volume_at(hi) > target_volume + tol)
        throw BracketError("bisect_lambda: volume target " + std::to_string(target_volume) +
                           " cannot be bracketed (inconsistent volume fraction and move limit)");

    // volume is non-increasing in lambda
    for (int it = 0; it < 200; ++it) {
        const double mid = std::sqrt(lo) * std::sqrt(hi);
        if (!(mid > lo && mid < hi)) break;
        if (volume_at(mid) > target_volume) lo = mid;
        else hi = mid;
    }
    const double lambda = std::sqrt(lo) * std::sqrt(hi);
    const double v = volume_at(lambda);
    if (!(std::abs(v - target_volume) <= tol))
        throw BracketError("bisect_lambda: final volume misses target by " +
                           std::to_string(std::abs(v - target_volume)));
    return lambda;
}

inline double bisect_lambda(const DensityField& density, const SensitivityField& sens,
                            const OcParams& params, double x_min) {
    return bisect_lambda(density, sens, params, x_min, params.volume_fraction * density.size());
}

inline DensityField oc_update(const DensityField& density, const SensitivityField& sens,
                              const OcParams& params, double x_min, double target_volume) {
    const double lambda = bisect_lambda(density, sens, params, x_min, target_volume);
    return oc_apply(density, sens, lambda, params, x_min);
}

inline DensityField oc_update(const DensityField& density, const SensitivityField& sens,
                              const OcParams& params, double x_min) {
    return oc_update(density, sens, params, x_min, params.volume_fraction * density.size());
}

struct LoopOptions {
    std::set<int> snapshot_iterations;
    bool snapshot_all = false;
    bool snapshot_final = false;
    /// Volume the OC update enforces; defaults to volume_fraction * N.
    std::optional<double> target_volume;
};

struct LoopResult {
    DensityField density;
    OptimizationTrace trace;
};

namespace detail {

template <class E>
[[noreturn]] void rethrow_with_context(const E& e, int iteration) {
    throw E("iteration " + std::to_string(iteration) + ": " + e.what());
}

}  // namespace detail

/// Shared OC loop. `sensitivity` maps (x, u) to dc/dx; the FEM solve is
/// always run so the trace carries the true compliance of every iterate.
template <class SensitivityFn>
LoopResult run_oc_loop(const FemProblem& problem, const OcParams& params, const DensityField& initial,
                       SensitivityFn&& sensitivity, const LoopOptions& options = {}) {
    params.validate();
    problem.validate();
    if (!initial.matches(problem.mesh)) throw InputError("initial density shape does not match mesh");
    const double target = options.target_volume.value_or(params.volume_fraction * initial.size());

    LoopResult result{initial, {}};
    DensityField& x = result.density;
    double change = 0.0;
    for (int k = 0;; ++k) {
        try {
            const DisplacementField u = problem.solve(x);
            result.trace.records.push_back({k, compliance(u, problem.bc), x.volume(), change});
            if (options.snapshot_all || options.snapshot_iterations.count(k)) result.trace.snapshots[k] = x;
            if (k >= params.max_iters || (k > 0 && change < params.convergence_tol)) break;
            DensityField next =
                oc_update(x, sensitivity(static_cast<const DensityField&>(x), u), params,
                          problem.material.x_min, target);
            change = (next.values - x.values).cwiseAbs().maxCoeff();
            x = std::move(next);
        } catch (const SingularSystemError& e) {
            detail::rethrow_with_context(e, k);
        } catch (const SolverError& e) {
            detail::rethrow_with_context(e, k);
        } catch (const DegenerateInputError& e) {
            detail::rethrow_with_context(e, k);
        } catch (const BracketError& e) {
            detail::rethrow_with_context(e, k);
        }
    }
    if (options.snapshot_final) result.trace.snapshots[result.trace.updates()] = x;
    return result;
}

inline LoopResult run_simp(const FemProblem& problem, const OcParams& params, const DensityField& initial,
                           const LoopOptions& options = {}) {
    const double target = options.target_volume.value_or(params.volume_fraction * initial.size());
    if (std::abs(initial.volume() - target) > 1e-3 * initial.size())
        throw InputError("run_simp: initial volume " + std::to_string(initial.volume()) +
                         " differs from the volume target " + std::to_string(target));
    return run_oc_loop(
        problem, params, initial,
        [&](const DensityField& x, const DisplacementField& u) {
            return compliance_sensitivity(x, u, problem.mesh, problem.material);
        },
        options);
}

inline DensityField uniform_density(const GridMesh& mesh, double value) { return DensityField(mesh, value); }

/// x >= L -> 1, x < L -> 0.
inline DensityField threshold_binarize(const DensityField& density, double threshold) {
    require(threshold > 0.0 && threshold <= 1.0, "threshold_binarize: L must be in (0, 1]");
    DensityField out(density.values, true);
    for (int i = 0; i < out.size(); ++i) out[i] = density[i] >= threshold ? 1.0 : 0.0;
    return out;
}

/// Threshold whose binarization comes closest to `target_volume` elements.
/// Candidates are the distinct positive density values, plus the empty
/// selection when max x < 1. Ties go to the smaller threshold.
inline double choose_threshold(const DensityField& density, double target_volume) {
    const int n = density.size();
    require(n > 0, "choose_threshold: empty field");
    require(target_volume > 0.0 && target_volume <= n, "choose_threshold: target must be in (0, N]");
    std::vector<double> v(density.values.data(), density.values.data() + n);
    std::sort(v.begin(), v.end());
    double best_l = 1.0;  // all-zero field: nothing to select
    double best_err = 0.0;
    bool have = false;
    for (int i = 0; i < n; ++i) {
        if (i > 0 && v[i] == v[i - 1]) continue;
        if (!(v[i] > 0.0) || v[i] > 1.0) continue;
        const double count = n - i;  // elements with x >= v[i]
        const double err = std::abs(count - target_volume);
        if (!have || err < best_err) {
            best_err = err;
            best_l = v[i];
            have = true;
        }
    }
    // selecting nothing, possible only when some L in (max x, 1] exists
    if (have && v.back() < 1.0 && target_volume < best_err) best_l = std::nextafter(v.back(), 2.0);
    return best_l;
}

} // namespace cnnto
