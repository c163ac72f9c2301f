#pragma once

// End-to-end pipelines: SIMP baseline, CNN-TO, warm-started SIMP, and the
// comparison / appendix experiments built on them.
//
// ExperimentConfig JSON (version 1). Every key is optional:
//   {
//     "version": 1,
//     "problem": {"preset": "cantilever-left-clamp-tip-load", "nelx": 32, "nely": 16,
//                 "bc_file": "bc.json"},
//     "material": {"e0": 1, "nu": 0.3, "penal": 3, "x_min": 0.001},
//     "oc": {"move_limit": 0.2, "eta": 0.5, "volume_fraction": 0.5, "convergence_tol": 0.01},
//     "max_iters": 40,
//     "filter": {"connectivity": 8, "max_hole_area": 4, "peninsula_neighbor_threshold": 2,
//                "peninsula_passes": 1, "peninsula_fixpoint": true},
//     "dataset": {"count": 10000, "n_bars_range": [1, 4], "extra_bars_range": [0, 2],
//                 "width_range": [0.75, 2.0], "max_resample": 100},
//     "training": {"channel_multiplier": 0.125, "epochs": 20, "batch_size": 16,
//                  "learning_rate": 5e-5, "normalize_labels": true},
//     "model": "model.bin",
//     "seed": 0,
//     "output_dir": "out"
//   }
// bc_file, when given, replaces the preset's boundary conditions. The
// CNNTO_OUTPUT_DIR environment variable overrides output_dir.

#include "cnnto/cnn.hpp"
#include "cnnto/dataset.hpp"
#include "cnnto/error.hpp"
#include "cnnto/fem.hpp"
#include "cnnto/io.hpp"
#include "cnnto/morph.hpp"
#include "cnnto/simp.hpp"
#include "cnnto/version.hpp"

#include "json.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace cnnto {

inline constexpr const char* kOutputDirEnv = "CNNTO_OUTPUT_DIR";

struct DatasetSettings {
    int count = 10000;
    std::pair<int, int> n_bars_range{1, 4};
    std::pair<int, int> extra_bars_range{0, 2};
    std::pair<double, double> width_range{0.75, 2.0};
    int max_resample = 100;
};

struct TrainingSettings {
    double channel_multiplier = 0.125;
    int epochs = 20;
    int batch_size = 16;
    double learning_rate = 5e-5;
    bool normalize_labels = true;
};

struct ExperimentConfig {
    std::string preset = kCantileverPreset;
    int nelx = 32;
    int nely = 16;
    std::optional<std::filesystem::path> bc_file;
    MaterialParams material;
    OcParams oc;
    FilterConfig filter;
    DatasetSettings dataset;
    TrainingSettings training;
    std::optional<std::filesystem::path> model;
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "out";

    void validate() const {
        require(nelx >= 1 && nely >= 1, "config: nelx and nely must be >= 1");
        material.validate();
        oc.validate();
        filter.validate();
        require(dataset.count >= 1, "config: dataset.count must be >= 1");
        require(training.channel_multiplier > 0.0, "config: training.channel_multiplier must be > 0");
        require(training.epochs >= 0 && training.batch_size >= 1, "config: bad training epochs/batch_size");
        require(training.learning_rate > 0.0, "config: training.learning_rate must be > 0");
        if (bc_file) require(std::filesystem::exists(*bc_file), "config: bc_file '" + bc_file->string() + "' not found");
        if (model) require(std::filesystem::exists(*model), "config: model '" + model->string() + "' not found");
    }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
    require(j.is_object(), "config: " + where + " must be an object");
    for (const auto& [key, value] : j.items())
        require(allowed.count(key) > 0, "config: unknown key '" + key + "' in " + where);
}

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

/// Relative paths inside the config resolve against `base_dir`.
inline ExperimentConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
    ExperimentConfig c;
    auto resolve = [&](const std::string& p) {
        const std::filesystem::path path(p);
        return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
    };
    try {
        detail::reject_unknown_keys(j,
                                    {"version", "problem", "material", "oc", "max_iters", "filter", "dataset",
                                     "training", "model", "seed", "output_dir"},
                                    "config");
        const int version = j.value("version", 1);
        require(version == 1, "config: unsupported version " + std::to_string(version));
        if (j.contains("problem")) {
            const auto& p = j.at("problem");
            detail::reject_unknown_keys(p, {"preset", "nelx", "nely", "bc_file"}, "problem");
            detail::read_key(p, "preset", c.preset);
            detail::read_key(p, "nelx", c.nelx);
            detail::read_key(p, "nely", c.nely);
            if (p.contains("bc_file")) c.bc_file = resolve(p.at("bc_file").get<std::string>());
        }
        if (j.contains("material")) {
            const auto& m = j.at("material");
            detail::reject_unknown_keys(m, {"e0", "nu", "penal", "x_min"}, "material");
            detail::read_key(m, "e0", c.material.e0);
            detail::read_key(m, "nu", c.material.nu);
            detail::read_key(m, "penal", c.material.penal);
            detail::read_key(m, "x_min", c.material.x_min);
        }
        if (j.contains("oc")) {
            const auto& o = j.at("oc");
            detail::reject_unknown_keys(o, {"move_limit", "eta", "volume_fraction", "convergence_tol"}, "oc");
            detail::read_key(o, "move_limit", c.oc.move_limit);
            detail::read_key(o, "eta", c.oc.eta);
            detail::read_key(o, "volume_fraction", c.oc.volume_fraction);
            detail::read_key(o, "convergence_tol", c.oc.convergence_tol);
        }
        detail::read_key(j, "max_iters", c.oc.max_iters);
        if (j.contains("filter")) {
            const auto& f = j.at("filter");
            detail::reject_unknown_keys(f,
                                        {"connectivity", "max_hole_area", "peninsula_neighbor_threshold",
                                         "peninsula_passes", "peninsula_fixpoint"},
                                        "filter");
            detail::read_key(f, "connectivity", c.filter.connectivity);
            detail::read_key(f, "max_hole_area", c.filter.max_hole_area);
            detail::read_key(f, "peninsula_neighbor_threshold", c.filter.peninsula_neighbor_threshold);
            detail::read_key(f, "peninsula_passes", c.filter.peninsula_passes);
            detail::read_key(f, "peninsula_fixpoint", c.filter.peninsula_fixpoint);
        }
        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            detail::reject_unknown_keys(d, {"count", "n_bars_range", "extra_bars_range", "width_range", "max_resample"},
                                        "dataset");
            detail::read_key(d, "count", c.dataset.count);
            detail::read_key(d, "n_bars_range", c.dataset.n_bars_range);
            detail::read_key(d, "extra_bars_range", c.dataset.extra_bars_range);
            detail::read_key(d, "width_range", c.dataset.width_range);
            detail::read_key(d, "max_resample", c.dataset.max_resample);
        }
        if (j.contains("training")) {
            const auto& t = j.at("training");
            detail::reject_unknown_keys(
                t, {"channel_multiplier", "epochs", "batch_size", "learning_rate", "normalize_labels"}, "training");
            detail::read_key(t, "channel_multiplier", c.training.channel_multiplier);
            detail::read_key(t, "epochs", c.training.epochs);
            detail::read_key(t, "batch_size", c.training.batch_size);
            detail::read_key(t, "learning_rate", c.training.learning_rate);
            detail::read_key(t, "normalize_labels", c.training.normalize_labels);
        }
        if (j.contains("model")) c.model = resolve(j.at("model").get<std::string>());
        detail::read_key(j, "seed", c.seed);
        if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("config: ") + e.what());
    }
    return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j = {
        {"version", 1},
        {"problem", {{"preset", c.preset}, {"nelx", c.nelx}, {"nely", c.nely}}},
        {"material", {{"e0", c.material.e0}, {"nu", c.material.nu}, {"penal", c.material.penal},
                      {"x_min", c.material.x_min}}},
        {"oc", {{"move_limit", c.oc.move_limit}, {"eta", c.oc.eta}, {"volume_fraction", c.oc.volume_fraction},
                {"convergence_tol", c.oc.convergence_tol}}},
        {"max_iters", c.oc.max_iters},
        {"filter", {{"connectivity", c.filter.connectivity}, {"max_hole_area", c.filter.max_hole_area},
                    {"peninsula_neighbor_threshold", c.filter.peninsula_neighbor_threshold},
                    {"peninsula_passes", c.filter.peninsula_passes},
                    {"peninsula_fixpoint", c.filter.peninsula_fixpoint}}},
        {"dataset", {{"count", c.dataset.count}, {"n_bars_range", c.dataset.n_bars_range},
                     {"extra_bars_range", c.dataset.extra_bars_range}, {"width_range", c.dataset.width_range},
                     {"max_resample", c.dataset.max_resample}}},
        {"training", {{"channel_multiplier", c.training.channel_multiplier}, {"epochs", c.training.epochs},
                      {"batch_size", c.training.batch_size}, {"learning_rate", c.training.learning_rate},
                      {"normalize_labels", c.training.normalize_labels}}},
        {"seed", c.seed},
        {"output_dir", c.output_dir.string()},
    };
    if (c.bc_file) j["problem"]["bc_file"] = c.bc_file->string();
    if (c.model) j["model"] = c.model->string();
    return j;
}

inline ExperimentConfig read_config(const std::filesystem::path& path) {
    auto in = open_for_read(path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError("config '" + path.string() + "': " + e.what());
    }
    return config_from_json(j, path.parent_path());
}

/// output_dir after the environment override.
inline std::filesystem::path resolved_output_dir(const ExperimentConfig& c) {
    if (const char* env = std::getenv(kOutputDirEnv); env && *env) return env;
    return c.output_dir;
}

inline FemProblem make_problem(const ExperimentConfig& c) {
    GridMesh mesh(c.nelx, c.nely);
    BoundaryConditions bc = c.bc_file ? read_bc_json(*c.bc_file) : bc_preset(c.preset, mesh);
    FemProblem p{mesh, c.material, std::move(bc)};
    p.validate();
    return p;
}

inline FilterConfig make_filter_config(const ExperimentConfig& c, const FemProblem& problem) {
    FilterConfig f = c.filter;
    f.anchor_elements = anchor_elements(problem.mesh, problem.bc);
    return f;
}

inline GenConfig make_gen_config(const ExperimentConfig& c) {
    GenConfig g;
    g.problem = make_problem(c);
    g.bc_preset = c.bc_file ? "file:" + c.bc_file->string() : c.preset;
    g.rng_seed = c.seed;
    g.n_bars_range = c.dataset.n_bars_range;
    g.extra_bars_range = c.dataset.extra_bars_range;
    g.width_range = c.dataset.width_range;
    g.max_resample = c.dataset.max_resample;
    return g;
}

inline TrainConfig make_train_config(const ExperimentConfig& c) {
    TrainConfig t;
    t.learning_rate = c.training.learning_rate;
    t.epochs = c.training.epochs;
    t.batch_size = c.training.batch_size;
    t.seed = c.seed;
    t.normalize_labels = c.training.normalize_labels;
    return t;
}

/// Snapshot iterations written for every run: 0, 5 and the final one.
inline LoopOptions default_loop_options() {
    LoopOptions o;
    o.snapshot_iterations = {0, 5};
    o.snapshot_final = true;
    return o;
}

struct MethodResult {
    std::string method;
    DensityField continuous;      // last OC iterate
    DensityField binary;          // after threshold (and morph filter, for CNN-TO)
    OptimizationTrace trace;
    double threshold = 0.0;
    std::optional<FilterReport> filter_report;
    double postfilter_compliance = 0.0;  // binary field solved with void at x_min
    double wall_time_s = 0.0;
};

inline double binary_compliance(const FemProblem& problem, const DensityField& binary) {
    return problem.compliance_of(problem.lifted(binary));
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// CNN-estimated sensitivities, clamped to <= 0 before they reach the OC update.
inline SensitivityField cnn_sensitivity(const Model& model, const DensityField& x) {
    SensitivityField s = forward(model.spec, model.params, x);
    s.values = s.values.cwiseMin(0.0);
    return s;
}

/// CNN-TO: OC iterations driven by network sensitivities (FEM only for the
/// trace), threshold to V_f*N, then the morphological filter pipeline.
inline MethodResult run_cnn_to(const ExperimentConfig& config, const Model& model,
                               const LoopOptions& options = default_loop_options()) {
    const auto t0 = std::chrono::steady_clock::now();
    const FemProblem problem = make_problem(config);
    require(model.spec.height == problem.mesh.nely && model.spec.width == problem.mesh.nelx,
            "run_cnn_to: model input " + std::to_string(model.spec.height) + "x" + std::to_string(model.spec.width) +
                " does not match the mesh " + std::to_string(problem.mesh.nely) + "x" +
                std::to_string(problem.mesh.nelx));
    const int n = problem.mesh.element_count();
    LoopResult loop = run_oc_loop(
        problem, config.oc, uniform_density(problem.mesh, config.oc.volume_fraction),
        [&](const DensityField& x, const DisplacementField&) { return cnn_sensitivity(model, x); }, options);

    MethodResult r;
    r.method = "cnn";
    r.threshold = choose_threshold(loop.density, config.oc.volume_fraction * n);
    auto [filtered, report] =
        apply_filter_pipeline(threshold_binarize(loop.density, r.threshold), make_filter_config(config, problem));
    r.continuous = std::move(loop.density);
    r.trace = std::move(loop.trace);
    r.binary = std::move(filtered);
    r.filter_report = report;
    r.postfilter_compliance = binary_compliance(problem, r.binary);
    r.wall_time_s = detail::seconds_since(t0);
    return r;
}

/// SIMP then the threshold filter. The threshold targets `paired_volume`
/// when given (the CNN-TO post-filter volume), V_f*N otherwise.
inline MethodResult run_simp_baseline(const ExperimentConfig& config, std::optional<double> paired_volume = std::nullopt,
                                      const LoopOptions& options = default_loop_options()) {
    const auto t0 = std::chrono::steady_clock::now();
    const FemProblem problem = make_problem(config);
    const int n = problem.mesh.element_count();
    LoopResult loop = run_simp(problem, config.oc, uniform_density(problem.mesh, config.oc.volume_fraction), options);
    MethodResult r;
    r.method = "simp";
    const double target = paired_volume.value_or(config.oc.volume_fraction * n);
    require(target > 0.0, "run_simp_baseline: paired volume must be > 0");
    r.threshold = choose_threshold(loop.density, target);
    r.binary = threshold_binarize(loop.density, r.threshold);
    r.continuous = std::move(loop.density);
    r.trace = std::move(loop.trace);
    r.postfilter_compliance = binary_compliance(problem, r.binary);
    r.wall_time_s = detail::seconds_since(t0);
    return r;
}

struct ChangeSummary {
    double linf = 0.0;       // max |x_final - x_start|
    double mean_abs = 0.0;
    int flipped = 0;         // elements whose 0.5-rounded value differs
};

inline ChangeSummary change_summary(const DensityField& from, const DensityField& to) {
    require(from.values.rows() == to.values.rows() && from.values.cols() == to.values.cols(),
            "change_summary: shape mismatch");
    ChangeSummary s;
    const Eigen::MatrixXd d = (to.values - from.values).cwiseAbs();
    s.linf = d.size() ? d.maxCoeff() : 0.0;
    s.mean_abs = d.size() ? d.mean() : 0.0;
    for (int i = 0; i < from.size(); ++i) s.flipped += (from[i] >= 0.5) != (to[i] >= 0.5);
    return s;
}

struct WarmStartResult {
    DensityField start;  // the lifted warm-start field
    DensityField density;
    OptimizationTrace trace;
    ChangeSummary change;
};

/// SIMP started from a binary field (void lifted to x_min). The volume
/// target is the lifted field's own volume, so the start is feasible.
inline WarmStartResult warm_start_simp(const ExperimentConfig& config, const DensityField& initial,
                                       const LoopOptions& options = default_loop_options()) {
    const FemProblem problem = make_problem(config);
    require(initial.matches(problem.mesh), "warm_start_simp: initial field does not match the mesh");
    WarmStartResult r;
    r.start = problem.lifted(initial);
    LoopOptions o = options;
    o.target_volume = r.start.volume();
    LoopResult loop = run_simp(problem, config.oc, r.start, o);
    r.density = std::move(loop.density);
    r.trace = std::move(loop.trace);
    r.change = change_summary(r.start, r.density);
    return r;
}

inline nlohmann::json change_summary_to_json(const ChangeSummary& s) {
    return {{"linf", s.linf}, {"mean_abs", s.mean_abs}, {"flipped_elements", s.flipped}};
}

inline nlohmann::json method_summary_json(const MethodResult& r, const std::string& trace_file) {
    nlohmann::json j = {
        {"method", r.method},
        {"initial_compliance", r.trace.initial().compliance},
        {"final_prefilter_compliance", r.trace.final().compliance},
        {"postfilter_compliance", r.postfilter_compliance},
        {"postfilter_volume", r.binary.volume()},
        {"threshold", r.threshold},
        {"iterations", r.trace.updates()},
        {"wall_time_s", r.wall_time_s},
        {"trace", trace_file},
    };
    if (r.trace.records.size() > 5) j["compliance_after_5_updates"] = r.trace.records[5].compliance;
    if (r.filter_report) j["filter_report"] = filter_report_to_json(*r.filter_report);
    return j;
}

/// Writes trace.csv, density_{k}.{pgm,csv} for every snapshot and the final
/// binary result as density.{pgm,csv} into `dir`.
inline void write_method_outputs(const std::filesystem::path& dir, const MethodResult& r) {
    write_trace_csv(dir / "trace.csv", r.trace);
    for (const auto& [k, snap] : r.trace.snapshots) {
        write_density_pgm(dir / ("density_" + std::to_string(k) + ".pgm"), snap);
        write_density_csv(dir / ("density_" + std::to_string(k) + ".csv"), snap);
    }
    write_density_pgm(dir / "density.pgm", r.binary);
    write_density_csv(dir / "density.csv", r.binary);
    if (r.filter_report) {
        auto out = open_for_write(dir / "filter_report.json");
        out << filter_report_to_json(*r.filter_report).dump(2) << '\n';
    }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    auto out = open_for_write(path);
    out << j.dump(2) << '\n';
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    auto out = open_for_write(path);
    out << text;
}

inline nlohmann::json run_header(const ExperimentConfig& config) {
    return {{"toolkit_version", kToolkitVersion}, {"seed", config.seed}, {"config", config_to_json(config)}};
}

struct ComparisonReport {
    MethodResult simp;
    MethodResult cnn;
    double compliance_ratio_cnn_to_simp = 0.0;  // post-filter
    bool cnn_within_125_percent = false;        // informational only
    bool cnn_ahead_after_5_updates = false;     // informational only
    nlohmann::json json;
    std::string table;
};

inline std::string format_fixed(double v, int precision = 4) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(precision);
    os << v;
    return os.str();
}

/// CNN-TO first, then SIMP thresholded to the CNN-TO post-filter volume.
inline ComparisonReport compare(const ExperimentConfig& config, const Model& model) {
    ComparisonReport rep;
    rep.cnn = run_cnn_to(config, model);
    rep.simp = run_simp_baseline(config, rep.cnn.binary.volume() > 0.0 ? std::optional(rep.cnn.binary.volume())
                                                                          : std::nullopt);
    rep.compliance_ratio_cnn_to_simp = rep.cnn.postfilter_compliance / rep.simp.postfilter_compliance;
    rep.cnn_within_125_percent = rep.cnn.postfilter_compliance <= 1.25 * rep.simp.postfilter_compliance;
    if (rep.cnn.trace.records.size() > 5 && rep.simp.trace.records.size() > 5)
        rep.cnn_ahead_after_5_updates = rep.cnn.trace.records[5].compliance < rep.simp.trace.records[5].compliance;

    rep.json = run_header(config);
    rep.json["initial_compliance"] = rep.simp.trace.initial().compliance;
    rep.json["methods"] = {method_summary_json(rep.simp, "simp/trace.csv"), method_summary_json(rep.cnn, "cnn/trace.csv")};
    rep.json["cnn_to_simp_postfilter_ratio"] = rep.compliance_ratio_cnn_to_simp;
    rep.json["quality_gate_cnn_le_1_25_simp"] = rep.cnn_within_125_percent;
    rep.json["cnn_below_simp_after_5_updates"] = rep.cnn_ahead_after_5_updates;

    std::ostringstream t;
    t << "                         initial      SIMP    CNN-TO\n";
    t << "compliance (continuous)  " << format_fixed(rep.simp.trace.initial().compliance) << "  "
      << format_fixed(rep.simp.trace.final().compliance) << "  " << format_fixed(rep.cnn.trace.final().compliance)
      << '\n';
    t << "compliance (filtered)    " << "       -  " << format_fixed(rep.simp.postfilter_compliance) << "  "
      << format_fixed(rep.cnn.postfilter_compliance) << '\n';
    t << "volume (filtered)        " << "       -  " << format_fixed(rep.simp.binary.volume(), 0) << "  "
      << format_fixed(rep.cnn.binary.volume(), 0) << '\n';
    t << "iterations               " << "       -  " << rep.simp.trace.updates() << "  " << rep.cnn.trace.updates()
      << '\n';
    t << "wall time [s]            " << "       -  " << format_fixed(rep.simp.wall_time_s, 3) << "  "
      << format_fixed(rep.cnn.wall_time_s, 3) << '\n';
    t << "CNN-TO <= 1.25 x SIMP (filtered): " << (rep.cnn_within_125_percent ? "yes" : "no") << '\n';
    rep.table = t.str();
    return rep;
}

inline void write_comparison(const std::filesystem::path& dir, const ComparisonReport& rep) {
    write_method_outputs(dir / "simp", rep.simp);
    write_method_outputs(dir / "cnn", rep.cnn);
    write_json(dir / "report.json", rep.json);
    write_text(dir / "report.txt", rep.table);
}

/// One row of the cross-filter table.
struct CrossFilterEntry {
    std::string method;
    std::string filter;  // "threshold" or "morphological"
    double volume = 0.0;
    double volume_delta = 0.0;  // vs V_f * N
    double compliance = 0.0;
};

/// Both methods' continuous results under both filter families, each
/// thresholded towards V_f*N first.
inline std::vector<CrossFilterEntry> cross_filter_table(const ExperimentConfig& config, const MethodResult& simp,
                                                        const MethodResult& cnn) {
    const FemProblem problem = make_problem(config);
    const double target = config.oc.volume_fraction * problem.mesh.element_count();
    const FilterConfig fc = make_filter_config(config, problem);
    std::vector<CrossFilterEntry> rows;
    for (const MethodResult* r : {&simp, &cnn}) {
        const DensityField thr = threshold_binarize(r->continuous, choose_threshold(r->continuous, target));
        const DensityField morph = apply_filter_pipeline(thr, fc).first;
        for (const auto& [name, field] : {std::pair{"threshold", &thr}, std::pair{"morphological", &morph}})
            rows.push_back({r->method, name, field->volume(), field->volume() - target,
                            binary_compliance(problem, *field)});
    }
    return rows;
}

inline nlohmann::json cross_filter_json(const std::vector<CrossFilterEntry>& rows) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows)
        j.push_back({{"method", r.method}, {"filter", r.filter}, {"volume", r.volume},
                     {"volume_delta", r.volume_delta}, {"compliance", r.compliance}});
    return j;
}

inline std::string cross_filter_text(const std::vector<CrossFilterEntry>& rows) {
    std::ostringstream t;
    t << "method  filter          volume  delta    compliance\n";
    for (const auto& r : rows) {
        std::string m = r.method, f = r.filter;
        m.resize(8, ' ');
        f.resize(16, ' ');
        t << m << f << format_fixed(r.volume, 0) << "     " << format_fixed(r.volume_delta, 0) << "     "
          << format_fixed(r.compliance) << '\n';
    }
    return t.str();
}

/// Outcome of the same-model reproducibility check.
struct ReproducibilityResult {
    bool identical = false;
    int differing_elements = 0;
    MethodResult first;
};

inline ReproducibilityResult repeat_cnn_to(const ExperimentConfig& config, const Model& model) {
    ReproducibilityResult r;
    r.first = run_cnn_to(config, model);
    const MethodResult second = run_cnn_to(config, model);
    for (int i = 0; i < r.first.binary.size(); ++i) r.differing_elements += r.first.binary[i] != second.binary[i];
    r.identical = r.first.binary == second.binary && r.first.continuous.values == second.continuous.values;
    return r;
}

} // namespace cnnto
