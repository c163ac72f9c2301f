// Acceptance suite: runs the twelve criteria and prints one PASS/FAIL line
// each. Exit status is 0 when every criterion passes or is listed with
// --known-failure (those still print FAIL).

#include "cnnto/driver.hpp"
#include "fixtures.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <set>

namespace {

using namespace cnnto;
namespace fs = std::filesystem;

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Shared {
    fs::path workdir;
    std::optional<Dataset> dataset;  // 1000 samples, seed 1 (first 500 train the model)
    std::optional<Model> model;
    std::optional<MethodResult> cnn;
};

double seconds(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os.precision(precision);
    os << v;
    return os.str();
}

ExperimentConfig section4_config() {
    ExperimentConfig c;  // 32x16 cantilever, V_f 0.5, p 3, 40 iterations
    c.seed = 1;
    return c;
}

Outcome c1_adjoint(Shared&) {
    const auto t0 = std::chrono::steady_clock::now();
    GridMesh mesh(4, 4);
    FemProblem p{mesh, MaterialParams{}, cantilever_left_clamp_tip_load(mesh)};
    Rng rng(2024);
    DensityField x(mesh);
    for (int i = 0; i < x.size(); ++i) x[i] = rng.uniform(0.3, 1.0);
    const auto a = p.analyze(x);
    double worst = 0.0;
    for (int i = 0; i < x.size(); ++i) {
        const double h = 1e-6;
        DensityField xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        const double fd = (p.compliance_of(xp) - p.compliance_of(xm)) / (2 * h);
        worst = std::max(worst, std::abs(a.sensitivity[i] - fd) / std::abs(fd));
    }
    const double t = seconds(t0);
    return {worst <= 1e-4 && t < 5.0, "max rel err " + fmt(worst) + ", " + fmt(t, 3) + " s"};
}

Outcome c2_simp_ratio(Shared&) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto c = section4_config();
    const auto problem = make_problem(c);
    const auto r = run_simp(problem, c.oc, uniform_density(problem.mesh, 0.5));
    const double ratio = r.trace.initial().compliance / r.trace.final().compliance;
    const double t = seconds(t0);
    return {ratio >= 4.0 && r.trace.updates() <= 40 && t < 60.0,
            "c0 " + fmt(r.trace.initial().compliance, 6) + " -> " + fmt(r.trace.final().compliance, 6) +
                ", ratio " + fmt(ratio) + " after " + std::to_string(r.trace.updates()) + " iterations, " +
                fmt(t, 3) + " s"};
}

Outcome c3_volume(Shared&) {
    const auto c = section4_config();
    const auto problem = make_problem(c);
    const auto r = run_simp(problem, c.oc, uniform_density(problem.mesh, 0.5));
    const double n = problem.mesh.element_count();
    double worst = 0.0;
    for (const auto& rec : r.trace.records) worst = std::max(worst, std::abs(rec.volume - 0.5 * n));
    return {worst <= 1e-3 * n, "max |V - 0.5N| = " + fmt(worst) + " over " + std::to_string(r.trace.records.size()) +
                                   " iterates (bound " + fmt(1e-3 * n) + ")"};
}

Outcome c4_scale_invariance(Shared&) {
    Rng rng(4);
    OcParams params;
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
        GridMesh mesh(rng.uniform_int(2, 12), rng.uniform_int(2, 12));
        DensityField x(mesh);
        SensitivityField s{Eigen::MatrixXd(mesh.nely, mesh.nelx)};
        for (int i = 0; i < x.size(); ++i) {
            x[i] = rng.uniform(1e-3, 1.0);
            s.values.data()[i] = -std::exp(rng.uniform(-6.0, 2.0));
        }
        const double target = x.volume();
        const auto base = oc_update(x, s, params, 1e-3, target);
        for (double alpha : {1e-3, 1.0, 1e3}) {
            SensitivityField sa = s;
            sa.values *= alpha;
            worst = std::max(worst, (oc_update(x, sa, params, 1e-3, target).values - base.values).cwiseAbs().maxCoeff());
        }
    }
    return {worst <= 1e-9, "max elementwise difference " + fmt(worst)};
}

// Half sum of squared errors; the FD reference runs from the perturbed layer on.
Outcome c5_gradient_check(Shared&) {
    const auto t0 = std::chrono::steady_clock::now();
    const NetworkSpec spec = reference_network(8, 8, 1.0 / 16);
    NetworkParams params = init_params(spec, 5);
    Rng rng(5);
    DensityField x(GridMesh(8, 8));
    for (int i = 0; i < x.size(); ++i) x[i] = rng.uniform();
    RowMatrix target(64, 1);
    for (int i = 0; i < 64; ++i) target(i, 0) = rng.uniform(-1.0, 0.0);

    const RowMatrix input = density_batch({&x}, 8, 8);
    ForwardCache cache;
    const RowMatrix out = forward_batch(spec, params, input, &cache);
    const NetworkParams grads = backward(spec, params, cache, out - target);

    double gmax = 0.0;
    for (const auto& l : grads.layers) {
        for (double g : l.weights) gmax = std::max(gmax, std::abs(g));
        for (double g : l.bias) gmax = std::max(gmax, std::abs(g));
    }
    const double floor = 1e-6 * gmax;

    std::size_t checked = 0, restepped = 0, failures = 0;
    double worst = 0.0;
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
        const RowMatrix layer_in = l == 0 ? input : cache.outputs[l - 1];
        auto loss_and_masks = [&](ForwardCache* c) {
            const RowMatrix o = detail::forward_layers(spec, params, layer_in, 1, l, c);
            return 0.5 * (o - target).squaredNorm();
        };
        auto masks_flip = [&](double& slot, double eps) {
            const double v = slot;
            ForwardCache cp, cm;
            slot = v + eps;
            loss_and_masks(&cp);
            slot = v - eps;
            loss_and_masks(&cm);
            slot = v;
            for (std::size_t k = l; k < spec.layers.size(); ++k) {
                if (spec.layers[k].activation != Activation::relu) continue;
                if (((cp.outputs[k].array() > 0.0) != (cm.outputs[k].array() > 0.0)).any()) return true;
            }
            return false;
        };
        auto check = [&](double& slot, double analytic) {
            auto fd_at = [&](double eps) {
                const double v = slot;
                slot = v + eps;
                const double lp = loss_and_masks(nullptr);
                slot = v - eps;
                const double lm = loss_and_masks(nullptr);
                slot = v;
                return (lp - lm) / (2 * eps);
            };
            auto rel = [&](double fd) {
                return std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), floor});
            };
            ++checked;
            double eps = 1e-5;
            double err = rel(fd_at(eps));
            if (err > 1e-4 && masks_flip(slot, eps)) {
                // a ReLU kink inside [theta - eps, theta + eps]: shrink the step until it is kink-free
                ++restepped;
                while (eps > 1e-9 && masks_flip(slot, eps)) eps *= 0.5;
                err = rel(fd_at(eps));
            }
            worst = std::max(worst, err);
            if (err > 1e-4) ++failures;
        };
        auto& p = params.layers[l];
        for (std::size_t i = 0; i < p.weights.size(); ++i) check(p.weights[i], grads.layers[l].weights[i]);
        for (std::size_t i = 0; i < p.bias.size(); ++i) check(p.bias[i], grads.layers[l].bias[i]);
    }
    const double t = seconds(t0);
    return {failures == 0 && checked == spec.parameter_count() && t < 120.0,
            std::to_string(checked) + " parameters, " + std::to_string(failures) + " over 1e-4, max rel err " +
                fmt(worst) + ", " + std::to_string(restepped) + " re-stepped across ReLU kinks, " + fmt(t, 3) + " s"};
}

Outcome c6_shape_trace(Shared&) {
    // (channels, divisor) per row of the reference table, rows 2..19
    const int expected[18][2] = {{48, 2},   {128, 2},  {256, 4},  {256, 4},  {256, 4}, {512, 8},
                                 {512, 8},  {1024, 8}, {1024, 8}, {1024, 8}, {1024, 8}, {512, 8},
                                 {512, 4},  {256, 4},  {256, 4},  {256, 2},  {128, 2}, {48, 1}};
    const auto t = reference_network(16, 32, 1.0).shape_trace();
    int mismatches = t.size() == 19 ? 0 : 1;
    for (int i = 0; i < 18 && i < static_cast<int>(t.size()); ++i)
        mismatches += !(t[i] == Shape3{expected[i][0], 16 / expected[i][1], 32 / expected[i][1]});
    if (t.size() == 19) mismatches += !(t[18] == Shape3{1, 16, 32});
    return {mismatches == 0, "table layer 7 -> " + std::to_string(t[5].channels) + "x" + std::to_string(t[5].height) +
                                 "x" + std::to_string(t[5].width) + ", " + std::to_string(mismatches) + " mismatches"};
}

const Dataset& shared_dataset(Shared& s) {
    if (!s.dataset) s.dataset = generate_dataset(make_gen_config(section4_config()), 1000);
    return *s.dataset;
}

const Model& shared_model(Shared& s) {
    if (!s.model) {
        const auto& ds = shared_dataset(s);
        const std::vector<TrainingSample> train_set(ds.samples.begin(), ds.samples.begin() + 500);
        Model m;
        m.spec = reference_network(16, 32, 0.125);
        m.params = cnnto::train(m.spec, train_set, make_train_config(section4_config())).params;
        s.model = std::move(m);
    }
    return *s.model;
}

Outcome c7_training(Shared& s) {
    const auto& ds = shared_dataset(s);
    const std::vector<TrainingSample> train_set(ds.samples.begin(), ds.samples.begin() + 500);
    const auto t0 = std::chrono::steady_clock::now();
    Model m;
    m.spec = reference_network(16, 32, 0.125);
    const TrainConfig tc = make_train_config(section4_config());
    const auto r = cnnto::train(m.spec, train_set, tc);
    const double t = seconds(t0);
    m.params = r.params;
    save_model(s.workdir / "criterion7_model.bin", m.spec, m.params);
    s.model = m;
    const double ratio = r.loss_history.back() / r.loss_history.front();
    return {tc.epochs == 20 && ratio <= 0.5 && t < 900.0,
            "MSE " + fmt(r.loss_history.front()) + " -> " + fmt(r.loss_history.back()) + ", ratio " + fmt(ratio) +
                ", " + fmt(t, 4) + " s"};
}

Outcome c8_connectivity(Shared& s) {
    const auto& ds = shared_dataset(s);
    const auto problem = make_problem(section4_config());
    int ok = 0;
    for (const auto& sample : ds.samples) ok += support_load_connected(sample.density, problem);
    return {ok == 1000 && ds.samples.size() == 1000u,
            std::to_string(ok) + "/" + std::to_string(ds.samples.size()) + " connected"};
}

Outcome c9_filter_invariants(Shared&) {
    int violations = 0, fields = 0;
    auto audit = [&](const DensityField& f, const FilterConfig& cfg) {
        ++fields;
        const auto out = apply_filter_pipeline(f, cfg).first;
        const auto mat = label_components(out, Foreground::material, cfg.connectivity, cfg.anchor_elements);
        for (int k = 0; k < mat.count(); ++k) violations += !mat.touches_anchor[k];
        const auto voids = label_components(out, Foreground::void_, cfg.connectivity == 8 ? 4 : 8);
        for (int k = 0; k < voids.count(); ++k)
            violations += !voids.touches_boundary[k] && voids.areas[k] <= cfg.max_hole_area;
        violations += !(apply_filter_pipeline(out, cfg).first == out);
    };
    Rng rng(9);
    for (int t = 0; t < 200; ++t) {
        GridMesh mesh(32, 16);
        FilterConfig cfg;
        cfg.anchor_elements = anchor_elements(mesh, cantilever_left_clamp_tip_load(mesh));
        audit(testing::random_binary(rng, mesh, rng.uniform(0.3, 0.8)), cfg);
    }
    const auto composite = testing::composite_fixture();
    FilterConfig cfg;
    cfg.anchor_elements = anchor_elements(composite.mesh(), cantilever_left_clamp_tip_load(composite.mesh()));
    audit(composite, cfg);
    return {violations == 0, std::to_string(fields) + " fields, " + std::to_string(violations) + " violations"};
}

Outcome c10_cnn_to(Shared& s) {
    const auto c = section4_config();
    const auto rep = compare(c, shared_model(s));
    write_comparison(s.workdir / "criterion10", rep);
    s.cnn = rep.cnn;
    const auto problem = make_problem(c);
    const auto fc = make_filter_config(c, problem);
    const auto labels = label_components(rep.cnn.binary, Foreground::material, fc.connectivity, fc.anchor_elements);
    bool anchored = labels.count() > 0;
    for (int k = 0; k < labels.count(); ++k) anchored = anchored && labels.touches_anchor[k];
    const bool connected = support_load_connected(rep.cnn.binary, problem);
    const double n = problem.mesh.element_count();
    const double v = rep.cnn.binary.volume();
    const bool volume_ok = std::abs(v - 0.5 * n) <= 0.1 * 0.5 * n;
    const auto& methods = rep.json["methods"];
    const bool recorded = methods.size() == 2 && methods[0].contains("postfilter_compliance") &&
                          methods[1].contains("postfilter_compliance");
    return {anchored && connected && volume_ok && recorded && rep.cnn.trace.updates() <= 40,
            std::string("anchored ") + (anchored ? "yes" : "no") + ", support-load connected " +
                (connected ? "yes" : "no") + ", volume " + fmt(v) + " (" + fmt(100.0 * (v / (0.5 * n) - 1.0), 3) +
                "% vs 0.5N, bound 10%), compliance CNN-TO " + fmt(rep.cnn.postfilter_compliance) + " vs SIMP " +
                fmt(rep.simp.postfilter_compliance) + ", quality gate <= 1.25x: " +
                (rep.cnn_within_125_percent ? "met" : "not met")};
}

Outcome c11_reproducibility(Shared& s) {
    const auto r = repeat_cnn_to(section4_config(), shared_model(s));
    return {r.identical, std::to_string(r.differing_elements) + " differing elements"};
}

Outcome c12_warm_start(Shared& s) {
    const auto c = section4_config();
    if (!s.cnn) s.cnn = run_cnn_to(c, shared_model(s));
    const auto w = warm_start_simp(c, s.cnn->binary);
    nlohmann::json j = run_header(c);
    j["cnn_compliance"] = s.cnn->postfilter_compliance;
    j["warm_start_final_compliance"] = w.trace.final().compliance;
    j["change"] = change_summary_to_json(w.change);
    write_json(s.workdir / "criterion12" / "appendix2.json", j);
    const bool ok = w.trace.final().compliance <= s.cnn->postfilter_compliance + 1e-9;
    return {ok, "CNN-TO " + fmt(s.cnn->postfilter_compliance, 8) + ", warm-started SIMP " +
                    fmt(w.trace.final().compliance, 8) + " after " + std::to_string(w.trace.updates()) +
                    " iterations; L-inf change " + fmt(w.change.linf) + ", mean " + fmt(w.change.mean_abs) +
                    ", flipped " + std::to_string(w.change.flipped)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cnnto acceptance suite"};
    std::string workdir = "acceptance_run";
    std::set<int> known, only;
    app.add_option("--workdir", workdir, "directory for artifacts");
    app.add_option("--known-failure", known, "criterion recorded as unattainable in the decisions ledger");
    app.add_option("--only", only, "run a subset");
    CLI11_PARSE(app, argc, argv);

    Shared shared;
    shared.workdir = workdir;
    fs::create_directories(shared.workdir);

    const std::vector<std::pair<std::string, std::function<Outcome(Shared&)>>> criteria = {
        {"adjoint correctness", c1_adjoint},
        {"SIMP baseline compliance ratio", c2_simp_ratio},
        {"volume feasibility of OC iterates", c3_volume},
        {"OC scale invariance", c4_scale_invariance},
        {"CNN gradient check", c5_gradient_check},
        {"reference shape trace", c6_shape_trace},
        {"training signal", c7_training},
        {"dataset connectivity", c8_connectivity},
        {"filter invariants", c9_filter_invariants},
        {"CNN-TO end-to-end", c10_cnn_to},
        {"reproducibility", c11_reproducibility},
        {"warm start", c12_warm_start},
    };

    int unexpected = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(id)) continue;
        Outcome o;
        try {
            o = criteria[i].second(shared);
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << " (" << criteria[i].first
                  << "): " << o.detail;
        if (!o.pass && known.count(id)) std::cout << "  [known failure, see decisions ledger]";
        std::cout << std::endl;
        unexpected += !o.pass && !known.count(id);
    }
    return unexpected == 0 ? 0 : 1;
}
