// noisyquant: theory sweeps, model/data generation, calibration,
// evaluation and layer-type ablation for uniform-noise-assisted
// post-training activation quantization.
#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "noisyquant/calibrate.hpp"
#include "noisyquant/manifest.hpp"
#include "noisyquant/model.hpp"
#include "noisyquant/tensor.hpp"
#include "noisyquant/theory.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void save_tensor_atomic(const fs::path& path, const nq::Tensor2D& t) {
    const fs::path tmp = path.string() + ".tmp";
    nq::save_tensor(tmp, t);
    fs::rename(tmp, path);
}

std::vector<double> make_grid(double lo, double hi, double step) {
    if (!(step > 0.0) || lo > hi) throw nq::ConfigError("invalid grid bounds/step");
    std::vector<double> g;
    for (double v = lo; v <= hi + step * 1e-9; v += step) g.push_back(v);
    return g;
}

json load_json_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw nq::IoError("cannot open " + path.string());
    try {
        json j;
        f >> j;
        return j;
    } catch (const json::exception& e) {
        throw nq::IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

std::vector<nq::Tensor2D> load_data_dir(const fs::path& dir) {
    std::vector<fs::path> files;
    if (!fs::is_directory(dir)) throw nq::IoError("data directory not found: " + dir.string());
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".t2d") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw nq::IoError("no .t2d batches in " + dir.string());
    std::vector<nq::Tensor2D> batches;
    for (const auto& f : files) batches.push_back(nq::load_tensor(f));
    return batches;
}

std::string qe_reports_csv(const std::vector<nq::QEReport>& reports) {
    std::ostringstream os;
    os.precision(17);
    os << "layer,layer_type,bits_w,bits_a,n,input_qe,input_qe_noisy,D,output_qe,"
          "output_qe_noisy,drop_pct\n";
    for (const auto& r : reports)
        os << r.layer << "," << r.layer_type << "," << r.bits_w << "," << r.bits_a << "," << r.n
           << "," << r.input_qe << "," << r.input_qe_noisy << "," << r.d << "," << r.output_qe
           << "," << r.output_qe_noisy << "," << r.drop_pct << "\n";
    return os.str();
}

void finish_manifest(nq::RunManifest& man, const nq::WallClock& clock, const fs::path& out_dir) {
    man.wall_clock_s = clock.seconds();
    man.save(out_dir / "manifest.json");
}

// ---- command implementations (driven by a resolved JSON config so a
// manifest can replay them verbatim) ----

void run_verify_theory(const json& cfg) {
    nq::WallClock clock;
    const fs::path out_dir = cfg.at("out_dir").get<std::string>();
    fs::create_directories(out_dir);
    const double b = cfg.at("b");
    const double x_fixed = cfg.at("x");
    const double n_fixed = cfg.at("n");
    const uint64_t seed = cfg.at("seed");
    const size_t elements = cfg.at("elements");
    const size_t instances = cfg.at("instances");
    const std::string which = cfg.at("which");

    nq::RunManifest man;
    man.command = "verify-theory";
    man.config = cfg;
    man.seed = seed;

    if (which == "n" || which == "both") {
        if (!(x_fixed >= 0.0 && x_fixed <= b))
            throw nq::FeasibilityError("verify-theory: x must lie in [0, b]");
        const auto grid = make_grid(cfg.at("n_lo"), cfg.at("n_hi"), cfg.at("n_step"));
        const auto curve = nq::theory::sweep_n(x_fixed, b, grid, elements, instances, seed);
        curve.save_csv((out_dir / "sweep_n.csv").string());
        man.add_output(out_dir / "sweep_n.csv");
    }
    if (which == "x" || which == "both") {
        if (!(n_fixed > 0.0 && n_fixed <= 2.0 * b))
            throw nq::FeasibilityError("verify-theory: n must lie in (0, 2b]");
        const auto grid = make_grid(cfg.at("x_lo"), cfg.at("x_hi"), cfg.at("x_step"));
        const auto curve = nq::theory::sweep_x(n_fixed, b, grid, elements, instances, seed);
        curve.save_csv((out_dir / "sweep_x.csv").string());
        man.add_output(out_dir / "sweep_x.csv");
    }
    finish_manifest(man, clock, out_dir);
}

void run_gen_model(const json& cfg) {
    nq::WallClock clock;
    const fs::path out_dir = cfg.at("out_dir").get<std::string>();
    nq::ModelDims dims = nq::ModelDims::from_json(cfg.at("dims"));
    const uint64_t seed = cfg.at("seed");
    nq::Model model = nq::gen_model(dims, seed);
    nq::save_model(model, out_dir);

    nq::RunManifest man;
    man.command = "gen-model";
    man.config = cfg;
    man.seed = seed;
    for (const auto& e : fs::directory_iterator(out_dir))
        if (e.path().filename() != "manifest.json") man.add_output(e.path());
    finish_manifest(man, clock, out_dir);
}

void run_gen_data(const json& cfg) {
    nq::WallClock clock;
    const fs::path out_dir = cfg.at("out_dir").get<std::string>();
    fs::create_directories(out_dir);
    nq::Model model = nq::load_model(cfg.at("model").get<std::string>());
    const uint64_t seed = cfg.at("seed");
    const size_t count = cfg.at("count");
    const auto batches = nq::gen_data(model.dims, count, seed);

    nq::RunManifest man;
    man.command = "gen-data";
    man.config = cfg;
    man.seed = seed;
    for (size_t i = 0; i < batches.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "batch_%04zu.t2d", i);
        save_tensor_atomic(out_dir / name, batches[i]);
        man.add_output(out_dir / name);
    }
    finish_manifest(man, clock, out_dir);
}

nq::CalibConfig calib_config_from_json(const json& cfg) {
    return nq::CalibConfig::from_json(cfg.at("calib"));
}

void run_calibrate(const json& cfg) {
    nq::WallClock clock;
    const fs::path out_dir = cfg.at("out_dir").get<std::string>();
    fs::create_directories(out_dir);
    nq::Model model = nq::load_model(cfg.at("model").get<std::string>());
    auto data = load_data_dir(cfg.at("data").get<std::string>());
    const nq::CalibConfig cc = calib_config_from_json(cfg);
    if (data.size() > cc.calib_samples) data.resize(cc.calib_samples);
    const nq::CalibResult result = nq::calibrate(model, data, cc);
    nq::write_file_atomic(out_dir / "calib.json", result.to_json().dump(2) + "\n");

    nq::RunManifest man;
    man.command = "calibrate";
    man.config = cfg;
    man.seed = cc.seed;
    man.add_output(out_dir / "calib.json");
    finish_manifest(man, clock, out_dir);
}

void write_eval_outputs(const nq::EvalMetrics& metrics, const fs::path& out_dir,
                        nq::RunManifest& man, const std::string& prefix = "") {
    const fs::path metrics_path = out_dir / (prefix + "metrics.json");
    nq::write_file_atomic(metrics_path, metrics.to_json().dump(2) + "\n");
    man.add_output(metrics_path);
    const fs::path csv_path = out_dir / (prefix + "qe_reports.csv");
    nq::write_file_atomic(csv_path, qe_reports_csv(metrics.layer_reports));
    man.add_output(csv_path);
    for (const auto& r : metrics.layer_reports) {
        const std::string stem = prefix + "hist_" + r.layer;
        r.input_hist.save_csv((out_dir / (stem + "_input.csv")).string());
        r.input_noisy_hist.save_csv((out_dir / (stem + "_input_noisy.csv")).string());
        r.output_hist.save_csv((out_dir / (stem + "_output.csv")).string());
        r.output_noisy_hist.save_csv((out_dir / (stem + "_output_noisy.csv")).string());
        for (const char* suffix : {"_input.csv", "_input_noisy.csv", "_output.csv", "_output_noisy.csv"})
            man.add_output(out_dir / (stem + suffix));
    }
}

void run_evaluate(const json& cfg) {
    nq::WallClock clock;
    const fs::path out_dir = cfg.at("out_dir").get<std::string>();
    fs::create_directories(out_dir);
    nq::Model model = nq::load_model(cfg.at("model").get<std::string>());
    const auto data = load_data_dir(cfg.at("data").get<std::string>());
    const nq::CalibResult calib =
        nq::CalibResult::from_json(load_json_file(cfg.at("calib_file").get<std::string>()));
    nq::apply_calibration(model, calib);
    const nq::EvalMetrics metrics = nq::evaluate(model, data);

    nq::RunManifest man;
    man.command = "evaluate";
    man.config = cfg;
    man.seed = calib.config.seed;
    write_eval_outputs(metrics, out_dir, man);
    finish_manifest(man, clock, out_dir);
}

void run_ablate(const json& cfg) {
    nq::WallClock clock;
    const fs::path out_dir = cfg.at("out_dir").get<std::string>();
    fs::create_directories(out_dir);
    const nq::Model base_model = nq::load_model(cfg.at("model").get<std::string>());
    const auto data = load_data_dir(cfg.at("data").get<std::string>());
    const nq::CalibResult calib =
        nq::CalibResult::from_json(load_json_file(cfg.at("calib_file").get<std::string>()));

    nq::RunManifest man;
    man.command = "ablate";
    man.config = cfg;
    man.seed = calib.config.seed;

    struct Pattern {
        std::string name;
        std::map<std::string, bool> enable;
    };
    const std::vector<Pattern> patterns = {
        {"none", {{"qkv", false}, {"proj", false}, {"fc1", false}, {"fc2", false}}},
        {"qkv", {{"qkv", true}, {"proj", false}, {"fc1", false}, {"fc2", false}}},
        {"proj", {{"qkv", false}, {"proj", true}, {"fc1", false}, {"fc2", false}}},
        {"fc1", {{"qkv", false}, {"proj", false}, {"fc1", true}, {"fc2", false}}},
        {"fc2", {{"qkv", false}, {"proj", false}, {"fc1", false}, {"fc2", true}}},
        {"all", {{"qkv", true}, {"proj", true}, {"fc1", true}, {"fc2", true}}},
    };

    std::ostringstream csv;
    csv.precision(17);
    csv << "pattern,output_mse_quant,output_mse_noisy,agreement_quant,agreement_noisy\n";
    for (const auto& pat : patterns) {
        nq::Model model = base_model;
        nq::CalibConfig cc = calib.config;
        cc.enable = pat.enable;
        auto calib_data = data;
        if (calib_data.size() > cc.calib_samples) calib_data.resize(cc.calib_samples);
        nq::calibrate(model, calib_data, cc);
        const nq::EvalMetrics metrics = nq::evaluate(model, data);
        write_eval_outputs(metrics, out_dir, man, pat.name + "_");
        csv << pat.name << "," << metrics.output_mse_quant << "," << metrics.output_mse_noisy
            << "," << metrics.agreement_quant << "," << metrics.agreement_noisy << "\n";
    }
    nq::write_file_atomic(out_dir / "ablation.csv", csv.str());
    man.add_output(out_dir / "ablation.csv");
    finish_manifest(man, clock, out_dir);
}

void dispatch(const std::string& command, const json& cfg) {
    if (command == "verify-theory")
        run_verify_theory(cfg);
    else if (command == "gen-model")
        run_gen_model(cfg);
    else if (command == "gen-data")
        run_gen_data(cfg);
    else if (command == "calibrate")
        run_calibrate(cfg);
    else if (command == "evaluate")
        run_evaluate(cfg);
    else if (command == "ablate")
        run_ablate(cfg);
    else
        throw nq::ConfigError("unknown command in manifest: " + command);
}

// Overlay: defaults < --config file < explicit flags.
json merge_config(const json& defaults, const std::string& config_path, const json& explicit_flags) {
    json out = defaults;
    if (!config_path.empty()) {
        std::ifstream f(config_path);
        if (!f) throw nq::IoError("cannot open config file: " + config_path);
        json file_cfg;
        try {
            f >> file_cfg;
        } catch (const json::exception& e) {
            throw nq::ConfigError(std::string("malformed config JSON: ") + e.what());
        }
        out.merge_patch(file_cfg);
    }
    out.merge_patch(explicit_flags);
    return out;
}

std::map<std::string, bool> parse_noise_layers(const std::string& csv) {
    std::map<std::string, bool> enable = {
        {"qkv", false}, {"proj", false}, {"fc1", false}, {"fc2", false}};
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        if (!enable.count(item)) throw nq::ConfigError("unknown layer type in --noise-layers: " + item);
        enable[item] = true;
    }
    return enable;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"NoisyQuant post-training activation quantization toolkit"};
    app.require_subcommand(1);

    std::string config_path;

    // verify-theory
    auto* vt = app.add_subcommand("verify-theory", "Closed-form vs empirical delta sweeps");
    double vt_b = 1.0, vt_x = 0.1, vt_n = 1.4;
    double vt_n_lo = 0.1, vt_n_hi = 1.9, vt_n_step = 0.1;
    double vt_x_lo = 0.0, vt_x_hi = 0.6, vt_x_step = 0.05;
    uint64_t vt_seed = 0;
    size_t vt_elements = 20, vt_instances = 10;
    std::string vt_which = "both", vt_out = "theory_out";
    vt->add_option("--b", vt_b, "half bin width");
    vt->add_option("--x", vt_x, "fixed bin-center distance for the n sweep");
    vt->add_option("--n", vt_n, "fixed noise half-range for the x sweep");
    vt->add_option("--n-lo", vt_n_lo)->group("grids");
    vt->add_option("--n-hi", vt_n_hi)->group("grids");
    vt->add_option("--n-step", vt_n_step)->group("grids");
    vt->add_option("--x-lo", vt_x_lo)->group("grids");
    vt->add_option("--x-hi", vt_x_hi)->group("grids");
    vt->add_option("--x-step", vt_x_step)->group("grids");
    vt->add_option("--elements", vt_elements, "snapshot elements per instance");
    vt->add_option("--instances", vt_instances, "independent noise instances");
    vt->add_option("--which", vt_which)->check(CLI::IsMember({"n", "x", "both"}));
    vt->add_option("--seed", vt_seed);
    vt->add_option("--out-dir", vt_out);
    vt->add_option("--config", config_path, "JSON config merged under explicit flags");

    // gen-model
    auto* gm = app.add_subcommand("gen-model", "Generate a random encoder-block model bundle");
    size_t gm_tokens = 16, gm_width = 64, gm_mlp = 256, gm_heads = 4, gm_classes = 10;
    uint64_t gm_seed = 0;
    std::string gm_out = "model";
    gm->add_option("--tokens", gm_tokens);
    gm->add_option("--width", gm_width);
    gm->add_option("--mlp", gm_mlp);
    gm->add_option("--heads", gm_heads);
    gm->add_option("--classes", gm_classes);
    gm->add_option("--seed", gm_seed);
    gm->add_option("--out-dir", gm_out);
    gm->add_option("--config", config_path, "JSON config merged under explicit flags");

    // gen-data
    auto* gd = app.add_subcommand("gen-data", "Generate Gaussian input batches for a model");
    std::string gd_model = "model", gd_out = "data";
    size_t gd_count = 8;
    uint64_t gd_seed = 0;
    gd->add_option("--model", gd_model)->required();
    gd->add_option("--count", gd_count);
    gd->add_option("--seed", gd_seed);
    gd->add_option("--out-dir", gd_out);
    gd->add_option("--config", config_path, "JSON config merged under explicit flags");

    // calibrate
    auto* cal = app.add_subcommand("calibrate", "Fit quantizers and search noise ranges");
    std::string cal_model = "model", cal_data = "data", cal_out = "calib";
    int cal_bits_w = 6, cal_bits_a = 6;
    std::string cal_fitter = "percentile", cal_objective = "closed_form";
    std::string cal_noise_layers = "qkv,proj,fc1,fc2";
    double cal_pct = 99.9;
    uint64_t cal_seed = 0;
    size_t cal_samples = 8;
    cal->add_option("--model", cal_model)->required();
    cal->add_option("--data", cal_data)->required();
    cal->add_option("--out-dir", cal_out);
    cal->add_option("--bits-w", cal_bits_w);
    cal->add_option("--bits-a", cal_bits_a);
    cal->add_option("--fitter", cal_fitter)
        ->check(CLI::IsMember({"minmax", "percentile", "scale_search", "twin"}));
    cal->add_option("--percentile", cal_pct);
    cal->add_option("--objective", cal_objective)
        ->check(CLI::IsMember({"closed_form", "empirical"}));
    cal->add_option("--noise-layers", cal_noise_layers, "comma list of layer types to noise");
    cal->add_option("--seed", cal_seed);
    cal->add_option("--calib-samples", cal_samples);
    cal->add_option("--config", config_path, "JSON config merged under explicit flags");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Run fp/quant/noisyquant and report errors");
    std::string ev_model = "model", ev_data = "data", ev_calib = "calib/calib.json",
                ev_out = "eval";
    ev->add_option("--model", ev_model)->required();
    ev->add_option("--data", ev_data)->required();
    ev->add_option("--calib", ev_calib)->required();
    ev->add_option("--out-dir", ev_out);
    ev->add_option("--config", config_path, "JSON config merged under explicit flags");

    // ablate
    auto* ab = app.add_subcommand("ablate", "Layer-type enable-pattern ablation");
    std::string ab_model = "model", ab_data = "data", ab_calib = "calib/calib.json",
                ab_out = "ablate";
    ab->add_option("--model", ab_model)->required();
    ab->add_option("--data", ab_data)->required();
    ab->add_option("--calib", ab_calib)->required();
    ab->add_option("--out-dir", ab_out);
    ab->add_option("--config", config_path, "JSON config merged under explicit flags");

    // replay
    auto* rp = app.add_subcommand("replay", "Re-run a command from its manifest");
    std::string rp_manifest;
    std::string rp_out_override;
    rp->add_option("--manifest", rp_manifest)->required();
    rp->add_option("--out-dir", rp_out_override, "override the output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (vt->parsed()) {
            json flags = {{"b", vt_b},         {"x", vt_x},
                          {"n", vt_n},         {"n_lo", vt_n_lo},
                          {"n_hi", vt_n_hi},   {"n_step", vt_n_step},
                          {"x_lo", vt_x_lo},   {"x_hi", vt_x_hi},
                          {"x_step", vt_x_step}, {"elements", vt_elements},
                          {"instances", vt_instances}, {"which", vt_which},
                          {"seed", vt_seed},   {"out_dir", vt_out}};
            run_verify_theory(merge_config(flags, config_path, json::object()));
        } else if (gm->parsed()) {
            json cfg = {{"dims",
                         {{"tokens", gm_tokens},
                          {"width", gm_width},
                          {"mlp", gm_mlp},
                          {"heads", gm_heads},
                          {"classes", gm_classes}}},
                        {"seed", gm_seed},
                        {"out_dir", gm_out}};
            run_gen_model(merge_config(cfg, config_path, json::object()));
        } else if (gd->parsed()) {
            json cfg = {{"model", gd_model}, {"count", gd_count}, {"seed", gd_seed},
                        {"out_dir", gd_out}};
            run_gen_data(merge_config(cfg, config_path, json::object()));
        } else if (cal->parsed()) {
            json calib_cfg = {{"bits_w", cal_bits_w},
                              {"bits_a", cal_bits_a},
                              {"fitter", cal_fitter},
                              {"percentile", cal_pct},
                              {"objective", cal_objective},
                              {"enable", parse_noise_layers(cal_noise_layers)},
                              {"seed", cal_seed},
                              {"calib_samples", cal_samples}};
            json cfg = {{"model", cal_model}, {"data", cal_data}, {"out_dir", cal_out},
                        {"calib", calib_cfg}};
            run_calibrate(merge_config(cfg, config_path, json::object()));
        } else if (ev->parsed()) {
            json cfg = {{"model", ev_model}, {"data", ev_data}, {"calib_file", ev_calib},
                        {"out_dir", ev_out}};
            run_evaluate(merge_config(cfg, config_path, json::object()));
        } else if (ab->parsed()) {
            json cfg = {{"model", ab_model}, {"data", ab_data}, {"calib_file", ab_calib},
                        {"out_dir", ab_out}};
            run_ablate(merge_config(cfg, config_path, json::object()));
        } else if (rp->parsed()) {
            nq::RunManifest man = nq::RunManifest::load(rp_manifest);
            json cfg = man.config;
            if (!rp_out_override.empty()) cfg["out_dir"] = rp_out_override;
            dispatch(man.command, cfg);
        }
    } catch (const nq::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const nq::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const nq::FeasibilityError& e) {
        std::cerr << "feasibility error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
