// kronsmooth command-line pipeline: simulate -> rank-select -> fit -> smooth -> evaluate -> control.
//
// Every command reads an optional JSON config (--config) whose keys can be
// overridden with --param key=value (value parsed as JSON, else taken as a string).
// Exit codes: 0 success, 2 usage/validation error, 1 runtime failure.

#include "kronsmooth/io.hpp"
#include "kronsmooth.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using kronsmooth::io::json;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CommonOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = ".";
    unsigned threads = 1;
    std::vector<std::string> params;
};

json load_config(const CommonOptions& opt) {
    json cfg = json::object();
    if (!opt.config_path.empty()) {
        if (!fs::exists(opt.config_path)) throw UsageError("config file not found: " + opt.config_path);
        cfg = kronsmooth::io::read_json(opt.config_path);
        if (!cfg.is_object()) throw UsageError("config must be a JSON object");
        // Resolve relative paths against the config file's directory.
        cfg["__base_dir"] = fs::absolute(opt.config_path).parent_path().string();
    }
    for (const auto& kv : opt.params) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) throw UsageError("--param expects key=value, got '" + kv + "'");
        const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
        json parsed = json::parse(value, nullptr, false);
        cfg[key] = parsed.is_discarded() ? json(value) : parsed;
    }
    if (opt.seed) cfg["seed"] = *opt.seed;
    return cfg;
}

fs::path resolve(const json& cfg, const std::string& p) {
    fs::path path(p);
    if (path.is_relative() && cfg.contains("__base_dir")) {
        const fs::path candidate = fs::path(cfg["__base_dir"].get<std::string>()) / path;
        if (fs::exists(candidate) || !fs::exists(path)) return candidate;
    }
    return path;
}

/// Effective config without internal keys; this is what gets hashed.
json public_config(const json& cfg, const std::string& command) {
    json out = cfg;
    out.erase("__base_dir");
    out["command"] = command;
    return out;
}

template <class T>
T get_or(const json& cfg, const std::string& key, T fallback) {
    if (!cfg.contains(key)) return fallback;
    try {
        return cfg.at(key).get<T>();
    } catch (const json::exception& e) {
        throw UsageError("config key '" + key + "': " + e.what());
    }
}

std::uint64_t require_seed(const json& cfg) {
    if (!cfg.contains("seed")) throw UsageError("a seed is required (--seed or config key 'seed')");
    return get_or<std::uint64_t>(cfg, "seed", 0);
}

struct Provenance {
    std::string hash;
    std::uint64_t seed = 0;
    [[nodiscard]] std::string comment() const { return kronsmooth::io::provenance_comment(hash, seed); }
    [[nodiscard]] json to_json(const std::string& command) const {
        return {{"config_hash", hash}, {"seed", seed}, {"command", command}, {"format_version", kronsmooth::io::kFormatVersion}};
    }
};

Provenance provenance_of(const json& cfg, const std::string& command) {
    return {kronsmooth::io::config_hash(public_config(cfg, command)), get_or<std::uint64_t>(cfg, "seed", 0)};
}

fs::path prepare_out(const CommonOptions& opt) {
    const fs::path out(opt.out_dir);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec || !fs::is_directory(out)) throw std::runtime_error("cannot create output directory " + out.string());
    const fs::path probe = out / ".kronsmooth_write_test";
    {
        std::ofstream t(probe);
        if (!t) throw std::runtime_error("output directory is not writable: " + out.string());
    }
    fs::remove(probe, ec);
    return out;
}

// --------------------------------------------------------------------------
// Data loading

struct LoadedData {
    kronsmooth::MeasurementTensor x;
    std::optional<fs::path> embeddings;
    std::optional<fs::path> truth;
};

LoadedData load_data(const json& cfg) {
    if (!cfg.contains("data")) throw UsageError("config key 'data' is required (manifest path or list of replicate CSVs)");
    const json& d = cfg.at("data");
    std::vector<fs::path> files;
    LoadedData out;
    if (d.is_string()) {
        const fs::path manifest = resolve(cfg, d.get<std::string>());
        if (!fs::exists(manifest)) throw UsageError("data manifest not found: " + manifest.string());
        const json m = kronsmooth::io::read_json(manifest);
        const fs::path dir = manifest.parent_path();
        for (const auto& f : m.at("files").at("replicates")) files.push_back(dir / f.get<std::string>());
        out.embeddings = dir / m.at("files").at("embeddings").get<std::string>();
        out.truth = dir / m.at("files").at("ground_truth").get<std::string>();
    } else if (d.is_array()) {
        for (const auto& f : d) files.push_back(resolve(cfg, f.get<std::string>()));
    } else {
        throw UsageError("config key 'data' must be a string or an array");
    }
    for (const auto& f : files)
        if (!fs::exists(f)) throw UsageError("replicate file not found: " + f.string());
    out.x = kronsmooth::io::read_replicates(files);
    if (cfg.contains("embeddings")) out.embeddings = resolve(cfg, cfg.at("embeddings").get<std::string>());
    if (cfg.contains("truth")) out.truth = resolve(cfg, cfg.at("truth").get<std::string>());
    return out;
}

std::vector<std::size_t> replicate_list(const json& cfg, const std::string& key, std::size_t replicates) {
    std::vector<std::size_t> out;
    if (cfg.contains(key)) {
        out = cfg.at(key).get<std::vector<std::size_t>>();
    } else {
        for (std::size_t r = 0; r < replicates; ++r) out.push_back(r);
    }
    if (out.empty()) throw UsageError("'" + key + "' must not be empty");
    for (auto r : out)
        if (r >= replicates) throw UsageError("'" + key + "' index " + std::to_string(r) + " out of range (R = " + std::to_string(replicates) + ")");
    return out;
}

std::string shape(Eigen::Index r, Eigen::Index c) { return std::to_string(r) + "x" + std::to_string(c); }

kronsmooth::EmbeddingMatrix load_embeddings(const LoadedData& d) {
    if (!d.embeddings) throw UsageError("config key 'embeddings' is required");
    if (!fs::exists(*d.embeddings)) throw UsageError("embeddings file not found: " + d.embeddings->string());
    kronsmooth::EmbeddingMatrix emb{kronsmooth::io::read_matrix_csv(*d.embeddings)};
    if (emb.treatments() != static_cast<Eigen::Index>(d.x.treatments()))
        throw UsageError("embeddings shape " + shape(emb.treatments(), emb.dims()) + " does not match data shape " +
                         std::to_string(d.x.replicates()) + "x" + shape(static_cast<Eigen::Index>(d.x.treatments()),
                                                                         static_cast<Eigen::Index>(d.x.genes())) +
                         " (embedding rows must equal treatments)");
    return emb;
}

kronsmooth::RankSelectSettings rank_settings(const json& cfg) {
    kronsmooth::RankSelectSettings s;
    s.candidates = get_or<std::vector<int>>(cfg, "candidates", {});
    s.holdout_fraction = get_or<double>(cfg, "holdout_fraction", s.holdout_fraction);
    s.seed = get_or<std::uint64_t>(cfg, "seed", 0);
    s.orientation = kronsmooth::mask_orientation_from_string(get_or<std::string>(cfg, "mask_orientation", "fit_on_large"));
    s.patience = get_or<int>(cfg, "patience", s.patience);
    s.als.max_sweeps = get_or<int>(cfg, "als_sweeps", s.als.max_sweeps);
    return s;
}

json rank_selection_json(const kronsmooth::RankSelectionResult& r) {
    return {{"selected_rank", r.selected_rank}, {"candidate_ranks", r.candidate_ranks},
            {"heldout_losses", r.heldout_losses}, {"mask_seed", r.mask_seed}};
}

// --------------------------------------------------------------------------
// Commands

int cmd_simulate(const CommonOptions& opt) {
    using namespace kronsmooth;
    const json cfg = load_config(opt);
    SimConfig sc;
    sc.seed = require_seed(cfg);
    sc.p = get_or<std::size_t>(cfg, "p", sc.p);
    sc.g = get_or<std::size_t>(cfg, "g", sc.g);
    sc.rank = get_or<std::size_t>(cfg, "rank", sc.rank);
    sc.replicates = get_or<std::size_t>(cfg, "replicates", sc.replicates);
    try {
        sc.design = sim_design_from_string(get_or<std::string>(cfg, "design", to_string(sc.design)));
        sc.embedding_mode = embedding_mode_from_string(get_or<std::string>(cfg, "embedding_mode", to_string(sc.embedding_mode)));
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    sc.noise_sd = get_or<double>(cfg, "noise_sd", sc.design == SimDesign::batch_effects ? 1.5 : 1.0);
    sc.batch_rank = get_or<std::size_t>(cfg, "batch_rank", sc.batch_rank);
    sc.batch_scale = get_or<double>(cfg, "batch_scale", sc.batch_scale);
    const auto emb_dims = get_or<Eigen::Index>(cfg, "embedding_dims", 10);
    const std::string base_kind = get_or<std::string>(cfg, "base", "synthetic");
    try {
        sc.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const fs::path out = prepare_out(opt);
    const Provenance prov = provenance_of(cfg, "simulate");

    std::optional<ParamMatrix> base;
    if (base_kind == "synthetic") {
        base = synthetic_base(sc.p, sc.g, sc.seed);
    } else if (base_kind != "none") {
        const fs::path bp = resolve(cfg, base_kind);
        if (!fs::exists(bp)) throw UsageError("base matrix not found: " + bp.string());
        base = io::read_matrix_csv(bp);
    }
    const GroundTruth gt = make_ground_truth(base, sc.p, sc.g, sc.rank, sc.seed);
    const MeasurementTensor x = simulate(gt, sc);
    const EmbeddingMatrix emb = make_embeddings(gt, sc.embedding_mode, sc.seed, emb_dims);

    json files = {{"replicates", json::array()}};
    for (std::size_t r = 0; r < x.replicates(); ++r) {
        const std::string name = "replicate_" + std::to_string(r + 1) + ".csv";
        io::write_matrix_csv(out / name, x.replicate(r), prov.comment());
        files["replicates"].push_back(name);
    }
    io::write_matrix_csv(out / "ground_truth.csv", gt.theta_star, prov.comment());
    io::write_matrix_csv(out / "z_star.csv", gt.z_star, prov.comment());
    io::write_matrix_csv(out / "v_star.csv", gt.v_star, prov.comment());
    io::write_matrix_csv(out / "embeddings.csv", emb.data, prov.comment());
    files["ground_truth"] = "ground_truth.csv";
    files["z_star"] = "z_star.csv";
    files["v_star"] = "v_star.csv";
    files["embeddings"] = "embeddings.csv";

    const json sim = {{"p", sc.p}, {"g", sc.g}, {"rank", sc.rank}, {"replicates", x.replicates()},
                      {"design", to_string(sc.design)}, {"noise_sd", sc.noise_sd}, {"batch_rank", sc.batch_rank},
                      {"batch_scale", sc.batch_scale}, {"embedding_mode", to_string(sc.embedding_mode)},
                      {"embedding_dims", emb.dims()}, {"base", base_kind}, {"seed", sc.seed}};
    json manifest = {{"format_version", io::kFormatVersion}, {"provenance", prov.to_json("simulate")},
                     {"sim_config", sim}, {"files", files},
                     {"formats", {{"matrices", "headerless CSV, one row per treatment, '#' lines are comments"}}}};
    io::write_json(out / "manifest.json", manifest);
    return 0;
}

int cmd_rank_select(const CommonOptions& opt) {
    using namespace kronsmooth;
    const json cfg = load_config(opt);
    require_seed(cfg);
    const LoadedData d = load_data(cfg);
    const auto reps = replicate_list(cfg, "replicates", d.x.replicates());
    const fs::path out = prepare_out(opt);
    const Provenance prov = provenance_of(cfg, "rank-select");
    RankSelectSettings rs;
    try {
        rs = rank_settings(cfg);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const RankSelectionResult res = select_rank(d.x.select(reps), rs);
    json doc = rank_selection_json(res);
    doc["format_version"] = io::kFormatVersion;
    doc["provenance"] = prov.to_json("rank-select");
    io::write_json(out / "rank_selection.json", doc);
    return 0;
}

int cmd_fit(const CommonOptions& opt) {
    using namespace kronsmooth;
    const json cfg = load_config(opt);
    const std::uint64_t seed = require_seed(cfg);
    const LoadedData d = load_data(cfg);
    const EmbeddingMatrix emb = load_embeddings(d);
    const auto reps = replicate_list(cfg, "train_replicates", d.x.replicates());
    const MeasurementTensor x = d.x.select(reps);
    const std::string model_kind = get_or<std::string>(cfg, "model", "lowrank");
    const fs::path out = prepare_out(opt);
    const Provenance prov = provenance_of(cfg, "fit");

    json report = {{"format_version", io::kFormatVersion}, {"provenance", prov.to_json("fit")}, {"model", model_kind},
                   {"train_replicates", reps}};
    if (model_kind == "lowrank") {
        EmSettings es;
        es.rank_select = rank_settings(cfg);
        es.rank_select.seed = seed;
        if (cfg.contains("rank")) es.rank = get_or<int>(cfg, "rank", 1);
        es.init.mode = lengthscale_mode_from_string(get_or<std::string>(cfg, "lengthscale_mode", "single"));
        es.init.jitter = get_or<double>(cfg, "jitter", es.init.jitter);
        es.max_iterations = get_or<int>(cfg, "max_iterations", es.max_iterations);
        es.tolerance = get_or<double>(cfg, "tolerance", es.tolerance);
        const EmFitResult fit = fit_em(x, emb, es);
        json model = io::model_to_json(fit.model);
        model["provenance"] = prov.to_json("fit");
        io::write_json(out / "model.json", model);
        report["iterations"] = fit.iterations;
        report["converged"] = fit.converged;
        report["loglik_trace"] = fit.loglik_trace;
        report["final_loglik"] = fit.loglik_trace.back();
        report["selected_rank"] = fit.model.rank;
        if (fit.rank_selection) report["rank_selection"] = rank_selection_json(*fit.rank_selection);
        report["lengthscales"] = io::to_json(fit.model.kernel.alpha);
    } else if (model_kind == "diag") {
        DiagFitSettings ds;
        ds.mode = lengthscale_mode_from_string(get_or<std::string>(cfg, "lengthscale_mode", "ard"));
        ds.jitter = get_or<double>(cfg, "jitter", ds.jitter);
        ds.ascent.max_iterations = get_or<int>(cfg, "max_iterations", ds.ascent.max_iterations);
        const DiagFitResult fit = fit_diag(x, emb, ds);
        json model = io::model_to_json(fit.params);
        model["provenance"] = prov.to_json("fit");
        io::write_json(out / "model.json", model);
        report["iterations"] = fit.iterations;
        report["converged"] = fit.converged;
        report["loglik_trace"] = fit.trace;
        report["initial_loglik"] = fit.initial_loglik;
        report["final_loglik"] = fit.final_loglik;
        report["gradient_norm"] = fit.gradient_norm;
        if (ds.mode == LengthscaleMode::ard) report["ard_coefficients"] = io::to_json(ard_report(fit.params));
        else report["lengthscales"] = io::to_json(fit.params.kernel.alpha);
    } else {
        throw UsageError("unknown model '" + model_kind + "' (expected lowrank or diag)");
    }
    io::write_json(out / "fit_report.json", report);
    return 0;
}

int cmd_smooth(const CommonOptions& opt) {
    using namespace kronsmooth;
    const json cfg = load_config(opt);
    const LoadedData d = load_data(cfg);
    if (!cfg.contains("model")) throw UsageError("config key 'model' (path to model.json) is required");
    const fs::path model_path = resolve(cfg, cfg.at("model").get<std::string>());
    if (!fs::exists(model_path)) throw UsageError("model file not found: " + model_path.string());
    const auto reps = replicate_list(cfg, "replicates", d.x.replicates());
    const MeasurementTensor x = d.x.select(reps);
    const fs::path out = prepare_out(opt);
    const Provenance prov = provenance_of(cfg, "smooth");
    const json doc = io::read_json(model_path);
    const std::string kind = doc.at("model").get<std::string>();
    if (kind == "lowrank") {
        const LowRankModel m = io::lowrank_model_from_json(doc);
        if (m.v.rows() != static_cast<Eigen::Index>(x.genes()) || m.treatments() != static_cast<Eigen::Index>(x.treatments()))
            throw UsageError("model is for " + shape(m.treatments(), m.v.rows()) + " data, got " +
                             shape(static_cast<Eigen::Index>(x.treatments()), static_cast<Eigen::Index>(x.genes())));
        io::write_matrix_csv(out / "smoothed.csv", smoothed_estimate(x, m), prov.comment());
        io::write_matrix_csv(out / "pca.csv", pca_estimate(x, m.rank), prov.comment());
    } else {
        DiagModelParams m = io::diag_model_from_json(doc);
        if (m.mu.rows() != static_cast<Eigen::Index>(x.treatments()) || m.mu.cols() != static_cast<Eigen::Index>(x.genes()))
            throw UsageError("model is for " + shape(m.mu.rows(), m.mu.cols()) + " data, got " +
                             shape(static_cast<Eigen::Index>(x.treatments()), static_cast<Eigen::Index>(x.genes())));
        io::write_matrix_csv(out / "smoothed.csv", posterior_mean_diag(x, m), prov.comment());
    }
    std::vector<std::size_t> all(x.replicates());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    io::write_matrix_csv(out / "raw.csv", raw_estimate(x, all), prov.comment());
    return 0;
}

int cmd_evaluate(const CommonOptions& opt) {
    using namespace kronsmooth;
    const json cfg = load_config(opt);
    if (!cfg.contains("estimates") || !cfg.at("estimates").is_object() || cfg.at("estimates").empty())
        throw UsageError("config key 'estimates' must map estimator names to CSV paths");
    const double target_v = get_or<double>(cfg, "target_v", 0.10);
    if (!(target_v > 0.0 && target_v < 1.0)) throw UsageError("target_v must lie in (0, 1)");

    ParamMatrix valid;
    std::optional<fs::path> truth_path;
    if (cfg.contains("valid")) {
        valid = io::read_matrix_csv(resolve(cfg, cfg.at("valid").get<std::string>()));
        if (cfg.contains("truth")) truth_path = resolve(cfg, cfg.at("truth").get<std::string>());
    } else {
        const LoadedData d = load_data(cfg);
        const SplitSpec def = d.x.replicates() >= 2 ? default_split(d.x.replicates()) : SplitSpec{};
        std::vector<std::size_t> test = cfg.contains("test_replicates") ? replicate_list(cfg, "test_replicates", d.x.replicates())
                                                                        : def.test_replicates;
        if (test.empty()) throw UsageError("evaluate needs a sign-valid estimate: 'valid' or >= 2 replicates");
        valid = raw_estimate(d.x, test);
        truth_path = d.truth;
        if (get_or<bool>(cfg, "simulation", true) == false) truth_path.reset();
    }
    std::optional<ParamMatrix> truth;
    if (truth_path && fs::exists(*truth_path)) truth = io::read_matrix_csv(*truth_path);
    const fs::path out = prepare_out(opt);
    const Provenance prov = provenance_of(cfg, "evaluate");
    const auto grid_count = get_or<std::size_t>(cfg, "grid_count", 100);
    const auto grid_min = get_or<std::size_t>(cfg, "grid_min", 10);

    json summary = {{"format_version", io::kFormatVersion}, {"provenance", prov.to_json("evaluate")},
                    {"target_v", target_v}, {"simulation_mode", truth.has_value()}, {"estimators", json::object()}};
    for (const auto& [name, path] : cfg.at("estimates").items()) {
        const ParamMatrix est = io::read_matrix_csv(resolve(cfg, path.get<std::string>()));
        if (est.rows() != valid.rows() || est.cols() != valid.cols())
            throw UsageError("estimate '" + name + "' has shape " + shape(est.rows(), est.cols()) +
                             " but the sign-valid estimate has shape " + shape(valid.rows(), valid.cols()));
        const CsepCurve curve = csep_curve(est, valid, log_grid(static_cast<std::size_t>(est.size()), grid_count, grid_min));
        const ErrorControlResult ctl = control_subset(curve, target_v);
        io::write_curve_csv(out / ("curve_" + name + ".csv"), curve, prov.comment());
        json cj = io::control_to_json(ctl);
        cj["format_version"] = io::kFormatVersion;
        cj["provenance"] = prov.to_json("evaluate");
        cj["estimator"] = name;
        io::write_json(out / ("control_" + name + ".json"), cj);
        json entry = {{"control", io::control_to_json(ctl)}};
        if (truth) {
            if (truth->rows() != est.rows() || truth->cols() != est.cols())
                throw UsageError("ground truth shape " + shape(truth->rows(), truth->cols()) + " does not match estimates");
            const auto ts = type_s_threshold_curve(est, *truth, magnitude_thresholds(est, grid_count));
            const auto corr = per_perturbation_correlation(est, *truth);
            io::write_type_s_csv(out / ("type_s_" + name + ".csv"), ts, prov.comment());
            io::write_correlation_csv(out / ("correlation_" + name + ".csv"), corr, prov.comment());
            std::vector<double> vals;
            for (const auto& c : corr)
                if (c) vals.push_back(*c);
            std::sort(vals.begin(), vals.end());
            if (!vals.empty()) {
                const std::size_t n = vals.size();
                entry["median_correlation"] = n % 2 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
            }
            if (ctl.selected_size > 0)
                entry["selected_type_s"] = type_s_proportion(est, *truth, top_entries(est, ctl.selected_size));
        }
        summary["estimators"][name] = entry;
    }
    io::write_json(out / "evaluate_report.json", summary);
    return 0;
}

int cmd_control(const CommonOptions& opt) {
    using namespace kronsmooth;
    const json cfg = load_config(opt);
    if (!cfg.contains("curve")) throw UsageError("config key 'curve' (path to a curve CSV) is required");
    const fs::path cp = resolve(cfg, cfg.at("curve").get<std::string>());
    if (!fs::exists(cp)) throw UsageError("curve file not found: " + cp.string());
    const double target_v = get_or<double>(cfg, "target_v", 0.10);
    if (!(target_v > 0.0 && target_v < 1.0)) throw UsageError("target_v must lie in (0, 1)");
    const fs::path out = prepare_out(opt);
    const Provenance prov = provenance_of(cfg, "control");
    json doc = io::control_to_json(control_subset(io::read_curve_csv(cp), target_v));
    doc["format_version"] = io::kFormatVersion;
    doc["provenance"] = prov.to_json("control");
    io::write_json(out / "control.json", doc);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kronsmooth: Kronecker-structured GP smoothing with data-splitting error control"};
    app.require_subcommand(1);
    CommonOptions opt;
    using Handler = int (*)(const CommonOptions&);
    const std::vector<std::tuple<std::string, std::string, Handler>> commands = {
        {"simulate", "generate semi-synthetic replicates, ground truth and embeddings", cmd_simulate},
        {"rank-select", "choose the latent rank by held-out matrix completion", cmd_rank_select},
        {"fit", "fit the low-rank (EM) or diagonal smoother", cmd_fit},
        {"smooth", "write smoothed, PCA and raw estimates for a fitted model", cmd_smooth},
        {"evaluate", "CSEP curves, error control, and simulation metrics", cmd_evaluate},
        {"control", "select the largest subset meeting a type S target from a curve", cmd_control},
    };
    std::map<CLI::App*, Handler> handlers;
    for (const auto& [name, desc, fn] : commands) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", opt.config_path, "JSON config file");
        sub->add_option("--seed", opt.seed, "random seed (u64)");
        sub->add_option("--out", opt.out_dir, "output directory");
        sub->add_option("--threads", opt.threads, "worker threads (1 = bitwise reproducible)")->check(CLI::PositiveNumber);
        sub->add_option("--param", opt.params, "override a config key: key=value");
        handlers[sub] = fn;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    kronsmooth::set_num_threads(opt.threads);
    for (const auto& [sub, fn] : handlers) {
        if (!sub->parsed()) continue;
        try {
            return fn(opt);
        } catch (const UsageError& e) {
            std::cerr << "error: " << e.what() << '\n';
            return 2;
        } catch (const std::invalid_argument& e) {
            std::cerr << "error: " << e.what() << '\n';
            return 2;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << '\n';
            return 1;
        }
    }
    return 2;
}
