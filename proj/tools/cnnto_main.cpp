// cnnto command-line driver.
//
// Exit codes: 0 ok, 1 usage, 2 input/contract violation, 3 numerical failure.

#include "cnnto/driver.hpp"

#include "CLI11.hpp"

#include <iostream>

namespace {

using namespace cnnto;
namespace fs = std::filesystem;

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
};

struct Options {
    CommonOptions common;
    std::string model;
    int count = 0;
    std::string data_file;
    std::string model_out;
    std::optional<int> epochs;
    std::optional<double> multiplier;
    std::optional<double> learning_rate;
    std::optional<int> batch_size;
    std::string method;
    std::string input;
    std::string appendix;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("--config", o.config, "ExperimentConfig JSON file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "RNG seed (recorded in every artifact)");
    cmd->add_option("--out-dir", o.out_dir, "output directory (overrides config and " + std::string(kOutputDirEnv) + ")");
}

ExperimentConfig load_config(const CommonOptions& o) {
    ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : read_config(o.config);
    if (o.seed) c.seed = *o.seed;
    c.output_dir = resolved_output_dir(c);
    if (!o.out_dir.empty()) c.output_dir = o.out_dir;
    return c;
}

Model load_model_for(const ExperimentConfig& c, const std::string& flag) {
    fs::path path = !flag.empty() ? fs::path(flag) : c.model.value_or(fs::path{});
    require(!path.empty(), "a trained model is required: pass --model or set \"model\" in the config");
    return load_model(path, GridMesh(c.nelx, c.nely));
}

int cmd_gen_data(const Options& o) {
    ExperimentConfig c = load_config(o.common);
    if (o.count > 0) c.dataset.count = o.count;
    c.validate();
    const fs::path file = o.data_file.empty() ? c.output_dir / "dataset.bin" : fs::path(o.data_file);
    std::cerr << "generating " << c.dataset.count << " samples (" << c.nely << "x" << c.nelx << ", seed " << c.seed
              << ")\n";
    const Dataset ds = generate_dataset(make_gen_config(c), c.dataset.count);
    write_dataset(file, ds);
    std::cout << "wrote " << file.string() << "  samples=" << ds.samples.size()
              << "  mean_material_fraction=" << ds.header["mean_material_fraction"].get<double>() << '\n';
    return 0;
}

int cmd_train(const Options& o) {
    ExperimentConfig c = load_config(o.common);
    if (o.epochs) c.training.epochs = *o.epochs;
    if (o.multiplier) c.training.channel_multiplier = *o.multiplier;
    if (o.learning_rate) c.training.learning_rate = *o.learning_rate;
    if (o.batch_size) c.training.batch_size = *o.batch_size;
    c.validate();
    const Dataset ds = read_dataset(o.data_file);
    const NetworkSpec spec = reference_network(ds.mesh.nely, ds.mesh.nelx, c.training.channel_multiplier);
    std::cerr << "training " << spec.parameter_count() << " parameters on " << ds.samples.size() << " samples\n";
    const TrainResult r = train(spec, ds.samples, make_train_config(c));
    const fs::path model_path = o.model_out.empty() ? c.output_dir / "model.bin" : fs::path(o.model_out);
    save_model(model_path, spec, r.params);

    auto csv = open_for_write(c.output_dir / "loss.csv");
    csv << "epoch,mean_mse\n";
    for (std::size_t e = 0; e < r.loss_history.size(); ++e) csv << e + 1 << ',' << format_double(r.loss_history[e]) << '\n';
    nlohmann::json report = run_header(c);
    report["dataset"] = o.data_file;
    report["model"] = model_path.string();
    report["parameter_count"] = spec.parameter_count();
    report["loss_history"] = r.loss_history;
    if (!r.loss_history.empty())
        report["final_over_first_loss"] = r.loss_history.back() / r.loss_history.front();
    write_json(c.output_dir / "train_report.json", report);
    std::cout << "wrote " << model_path.string();
    if (!r.loss_history.empty())
        std::cout << "  loss " << r.loss_history.front() << " -> " << r.loss_history.back();
    std::cout << '\n';
    return 0;
}

int cmd_optimize(const Options& o) {
    ExperimentConfig c = load_config(o.common);
    c.validate();
    MethodResult r;
    if (o.method == "simp") {
        r = run_simp_baseline(c);
    } else {
        r = run_cnn_to(c, load_model_for(c, o.model));
    }
    write_method_outputs(c.output_dir, r);
    nlohmann::json report = run_header(c);
    report["result"] = method_summary_json(r, "trace.csv");
    write_json(c.output_dir / "report.json", report);
    std::cout << o.method << ": compliance " << r.trace.initial().compliance << " -> " << r.trace.final().compliance
              << " (filtered " << r.postfilter_compliance << ", volume " << r.binary.volume() << ") after "
              << r.trace.updates() << " iterations\n";
    return 0;
}

int cmd_filter(const Options& o) {
    ExperimentConfig c = load_config(o.common);
    c.validate();
    const FemProblem problem = make_problem(c);
    DensityField field = read_density_csv(o.input);
    require(field.matches(problem.mesh), "filter: input is " + std::to_string(field.nely()) + "x" +
                                             std::to_string(field.nelx()) + ", config mesh is " +
                                             std::to_string(c.nely) + "x" + std::to_string(c.nelx));
    nlohmann::json report = run_header(c);
    report["input"] = o.input;
    if (!field.binary) {
        const double l = choose_threshold(field, c.oc.volume_fraction * field.size());
        field = threshold_binarize(field, l);
        report["threshold"] = l;
    }
    auto [out, fr] = apply_filter_pipeline(field, make_filter_config(c, problem));
    write_density_pgm(c.output_dir / "density.pgm", out);
    write_density_csv(c.output_dir / "density.csv", out);
    report["filter_report"] = filter_report_to_json(fr);
    report["compliance"] = out.volume() > 0 ? nlohmann::json(binary_compliance(problem, out)) : nlohmann::json();
    write_json(c.output_dir / "filter_report.json", report);
    std::cout << "volume " << fr.initial_volume << " -> " << fr.final_volume << '\n';
    return 0;
}

int cmd_compare(const Options& o) {
    ExperimentConfig c = load_config(o.common);
    c.validate();
    const ComparisonReport rep = compare(c, load_model_for(c, o.model));
    write_comparison(c.output_dir, rep);
    std::cout << rep.table;
    return 0;
}

int cmd_repro(const Options& o) {
    ExperimentConfig c = load_config(o.common);
    c.validate();
    const Model model = load_model_for(c, o.model);
    nlohmann::json report = run_header(c);
    report["experiment"] = o.appendix;
    if (o.appendix == "appendix1") {
        const MethodResult cnn = run_cnn_to(c, model);
        const MethodResult simp = run_simp_baseline(c);
        const auto rows = cross_filter_table(c, simp, cnn);
        report["rows"] = cross_filter_json(rows);
        write_json(c.output_dir / "appendix1.json", report);
        write_text(c.output_dir / "appendix1.txt", cross_filter_text(rows));
        std::cout << cross_filter_text(rows);
        return 0;
    }
    if (o.appendix == "appendix2") {
        const MethodResult cnn = run_cnn_to(c, model);
        const WarmStartResult w = warm_start_simp(c, cnn.binary);
        write_trace_csv(c.output_dir / "warm_start_trace.csv", w.trace);
        write_density_pgm(c.output_dir / "warm_start.pgm", w.density);
        write_density_csv(c.output_dir / "warm_start.csv", w.density);
        report["cnn_compliance"] = cnn.postfilter_compliance;
        report["warm_start_final_compliance"] = w.trace.final().compliance;
        report["iterations"] = w.trace.updates();
        report["change"] = change_summary_to_json(w.change);
        write_json(c.output_dir / "appendix2.json", report);
        std::cout << "CNN-TO compliance " << cnn.postfilter_compliance << ", warm-started SIMP "
                  << w.trace.final().compliance << ", L-inf change " << w.change.linf << ", flipped "
                  << w.change.flipped << '\n';
        return 0;
    }
    const ReproducibilityResult r = repeat_cnn_to(c, model);
    report["identical"] = r.identical;
    report["differing_elements"] = r.differing_elements;
    write_json(c.output_dir / "appendix3.json", report);
    std::cout << (r.identical ? "identical" : "DIFFERENT") << " (" << r.differing_elements
              << " differing elements)\n";
    return r.identical ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CNN-surrogate topology optimization toolkit", "cnnto"};
    app.set_version_flag("--version", std::string(kToolkitVersion));
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    Options o;
    auto* gen = app.add_subcommand("gen-data", "generate a bar-system training dataset");
    add_common(gen, o.common);
    gen->add_option("--count", o.count, "number of samples (default: config dataset.count)")->check(CLI::PositiveNumber);
    gen->add_option("--file", o.data_file, "dataset file (default: <out-dir>/dataset.bin)");

    auto* tr = app.add_subcommand("train", "train the sensitivity surrogate");
    add_common(tr, o.common);
    tr->add_option("--data", o.data_file, "dataset file")->required()->check(CLI::ExistingFile);
    tr->add_option("--model-out", o.model_out, "model file (default: <out-dir>/model.bin)");
    tr->add_option("--epochs", o.epochs);
    tr->add_option("--multiplier", o.multiplier, "channel multiplier");
    tr->add_option("--lr", o.learning_rate, "Adam learning rate");
    tr->add_option("--batch-size", o.batch_size);

    auto* opt = app.add_subcommand("optimize", "run SIMP or CNN-TO");
    add_common(opt, o.common);
    opt->add_option("--method", o.method)->required()->check(CLI::IsMember({"simp", "cnn"}));
    opt->add_option("--model", o.model, "trained model (cnn method)");

    auto* flt = app.add_subcommand("filter", "threshold (if needed) and morphologically filter a density CSV");
    add_common(flt, o.common);
    flt->add_option("--input", o.input, "density CSV")->required()->check(CLI::ExistingFile);

    auto* cmp = app.add_subcommand("compare", "CNN-TO vs SIMP with paired-volume thresholding");
    add_common(cmp, o.common);
    cmp->add_option("--model", o.model, "trained model");

    auto* rep = app.add_subcommand("repro", "appendix experiments");
    add_common(rep, o.common);
    rep->add_option("experiment", o.appendix)
        ->required()
        ->check(CLI::IsMember({"appendix1", "appendix2", "appendix3"}));
    rep->add_option("--model", o.model, "trained model");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(o);
        if (tr->parsed()) return cmd_train(o);
        if (opt->parsed()) return cmd_optimize(o);
        if (flt->parsed()) return cmd_filter(o);
        if (cmp->parsed()) return cmd_compare(o);
        return cmd_repro(o);
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 3;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 3;
    }
}
