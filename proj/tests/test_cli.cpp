#include "kronsmooth/io.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>

namespace fs = std::filesystem;
using kronsmooth::io::json;

namespace {

const fs::path& root() {
    static const fs::path dir = [] {
        const fs::path d = fs::temp_directory_path() / "kronsmooth_test_cli";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

struct CliRun {
    int code = -1;
    std::string err;
};

CliRun run(const std::string& args) {
    const fs::path err = root() / "stderr.txt";
    const std::string cmd = std::string(KS_CLI_PATH) + " " + args + " > /dev/null 2> " + err.string();
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(err);
    r.err.assign(std::istreambuf_iterator<char>(in), {});
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void write_json_file(const fs::path& p, const json& j) {
    std::ofstream out(p);
    out << j.dump(2);
}

std::map<std::string, std::string> dir_contents(const fs::path& d) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::directory_iterator(d)) out[e.path().filename().string()] = slurp(e.path());
    return out;
}

/// Small simulated dataset shared by the pipeline tests.
const fs::path& small_sim() {
    static const fs::path dir = [] {
        const fs::path d = root() / "sim_small";
        const CliRun r = run("simulate --seed 5 --out " + d.string() + " --param p=12 --param g=30 --param rank=2");
        EXPECT_EQ(r.code, 0) << r.err;
        return d;
    }();
    return dir;
}

}  // namespace

TEST(CliSimulate, ByteIdenticalAcrossRuns) {
    const fs::path a = root() / "det_a", b = root() / "det_b", c = root() / "det_c";
    const std::string common = " --param p=10 --param g=20 --param rank=2 --seed 17 --out ";
    ASSERT_EQ(run("simulate" + common + a.string()).code, 0);
    ASSERT_EQ(run("simulate" + common + b.string()).code, 0);
    ASSERT_EQ(run("simulate --param p=10 --param g=20 --param rank=2 --seed 18 --out " + c.string()).code, 0);
    const auto ca = dir_contents(a), cb = dir_contents(b), cc = dir_contents(c);
    EXPECT_EQ(ca, cb);
    EXPECT_NE(ca.at("replicate_1.csv"), cc.at("replicate_1.csv"));
    for (const char* f : {"replicate_1.csv", "replicate_2.csv", "ground_truth.csv", "embeddings.csv", "manifest.json"})
        EXPECT_TRUE(ca.count(f)) << f;
}

TEST(CliSimulate, BatchManifestRecordsScale) {
    const fs::path d = root() / "batch";
    const CliRun r = run("simulate --seed 1 --out " + d.string() + " --param p=50 --param g=200 --param design=batch_effects");
    ASSERT_EQ(r.code, 0) << r.err;
    const json m = kronsmooth::io::read_json(d / "manifest.json");
    EXPECT_NEAR(m.at("sim_config").at("batch_scale").get<double>(), 0.158114, 1e-6);
    EXPECT_EQ(m.at("sim_config").at("noise_sd").get<double>(), 1.5);
    EXPECT_EQ(m.at("provenance").at("seed").get<std::uint64_t>(), 1u);
    EXPECT_EQ(m.at("provenance").at("config_hash").get<std::string>().size(), 16u);
}

TEST(CliSimulate, ConfigFileAndOverrides) {
    const fs::path cfg = root() / "sim_cfg.json", d = root() / "from_cfg";
    write_json_file(cfg, {{"p", 8}, {"g", 15}, {"rank", 2}, {"seed", 3}, {"design", "iid_r1"}});
    ASSERT_EQ(run("simulate --config " + cfg.string() + " --out " + d.string()).code, 0);
    const json m = kronsmooth::io::read_json(d / "manifest.json");
    EXPECT_EQ(m.at("sim_config").at("replicates").get<int>(), 1);
    EXPECT_EQ(m.at("sim_config").at("seed").get<int>(), 3);
    ASSERT_EQ(run("simulate --config " + cfg.string() + " --seed 4 --out " + d.string()).code, 0);
    EXPECT_EQ(kronsmooth::io::read_json(d / "manifest.json").at("sim_config").at("seed").get<int>(), 4);
}

TEST(CliErrors, ExitCodes) {
    const std::string out = " --out " + (root() / "errs").string();
    EXPECT_EQ(run("simulate --seed 1 --param design=nonsense" + out).code, 2);
    EXPECT_EQ(run("simulate" + out).code, 2);
    EXPECT_EQ(run("frobnicate").code, 2);
    EXPECT_EQ(run("").code, 2);
    EXPECT_EQ(run("simulate --seed 1 --param nokeyvalue" + out).code, 2);
    EXPECT_EQ(run("simulate --seed 1 --config /nonexistent/cfg.json" + out).code, 2);
    EXPECT_EQ(run("simulate --seed 1 --threads 0" + out).code, 2);
    EXPECT_EQ(run("fit --seed 1" + out).code, 2);
    EXPECT_EQ(run("evaluate" + out).code, 2);
    EXPECT_EQ(run("control" + out).code, 2);
    const CliRun unwritable = run("simulate --seed 1 --param p=5 --param g=6 --param rank=1 --out /proc/kronsmooth_nope");
    EXPECT_EQ(unwritable.code, 1);
    EXPECT_NE(unwritable.err.find("/proc/kronsmooth_nope"), std::string::npos);
}

TEST(CliPipeline, FitSmoothEvaluate) {
    const fs::path sim = small_sim();
    const fs::path fit1 = root() / "fit1", fit2 = root() / "fit2", sm = root() / "smooth", ev = root() / "eval";
    const std::string fit_args = " --seed 9 --param data=" + (sim / "manifest.json").string() +
                                 " --param rank=2 --param max_iterations=15 --param train_replicates=[0]";
    CliRun r = run("fit" + fit_args + " --out " + fit1.string());
    ASSERT_EQ(r.code, 0) << r.err;
    ASSERT_EQ(run("fit" + fit_args + " --out " + fit2.string()).code, 0);
    EXPECT_EQ(slurp(fit1 / "model.json"), slurp(fit2 / "model.json"));

    const json report = kronsmooth::io::read_json(fit1 / "fit_report.json");
    const auto trace = report.at("loglik_trace").get<std::vector<double>>();
    ASSERT_GE(trace.size(), 2u);
    for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_GE(trace[i], trace[i - 1] - 1e-6);
    EXPECT_EQ(report.at("selected_rank").get<int>(), 2);
    EXPECT_EQ(report.at("provenance").at("seed").get<int>(), 9);

    r = run("smooth --seed 9 --param data=" + (sim / "manifest.json").string() + " --param model=" +
            (fit1 / "model.json").string() + " --param replicates=[0] --out " + sm.string());
    ASSERT_EQ(r.code, 0) << r.err;
    for (const char* f : {"smoothed.csv", "raw.csv", "pca.csv"}) {
        ASSERT_TRUE(fs::exists(sm / f)) << f;
        EXPECT_EQ(slurp(sm / f).rfind("# kronsmooth format_version=1 config_hash=", 0), 0u) << f;
    }

    const fs::path cfg = root() / "eval_cfg.json";
    write_json_file(cfg, {{"data", (sim / "manifest.json").string()},
                          {"estimates", {{"smoothed", (sm / "smoothed.csv").string()}, {"raw", (sm / "raw.csv").string()},
                                         {"pca", (sm / "pca.csv").string()}}},
                          {"target_v", 0.10},
                          {"seed", 9}});
    r = run("evaluate --config " + cfg.string() + " --out " + ev.string());
    ASSERT_EQ(r.code, 0) << r.err;
    for (const char* name : {"smoothed", "raw", "pca"}) {
        const std::string n(name);
        const json ctl = kronsmooth::io::read_json(ev / ("control_" + n + ".json"));
        EXPECT_EQ(ctl.at("csep_threshold").get<double>(), 0.05);
        EXPECT_LE(ctl.at("achieved_csep").get<double>(), 0.05);
        EXPECT_TRUE(fs::exists(ev / ("curve_" + n + ".csv")));
        EXPECT_TRUE(fs::exists(ev / ("type_s_" + n + ".csv")));
        EXPECT_TRUE(fs::exists(ev / ("correlation_" + n + ".csv")));
    }
    const json summary = kronsmooth::io::read_json(ev / "evaluate_report.json");
    EXPECT_TRUE(summary.at("simulation_mode").get<bool>());

    // control from a curve file reproduces the evaluate result
    const fs::path ctl_dir = root() / "control";
    r = run("control --seed 9 --param curve=" + (ev / "curve_smoothed.csv").string() + " --param target_v=0.1 --out " +
            ctl_dir.string());
    ASSERT_EQ(r.code, 0) << r.err;
    const json a = kronsmooth::io::read_json(ctl_dir / "control.json");
    const json b = kronsmooth::io::read_json(ev / "control_smoothed.json");
    EXPECT_EQ(a.at("selected_size"), b.at("selected_size"));
    EXPECT_EQ(a.at("achieved_csep"), b.at("achieved_csep"));
}

TEST(CliEvaluate, IdenticalInputsSelectEverything) {
    const fs::path sim = small_sim(), ev = root() / "eval_same";
    const std::string truth = (sim / "ground_truth.csv").string();
    const CliRun r = run("evaluate --seed 0 --param valid=" + truth + " --param estimates='{\"same\":\"" + truth +
                      "\"}' --out " + ev.string());
    ASSERT_EQ(r.code, 0) << r.err;
    const json ctl = kronsmooth::io::read_json(ev / "control_same.json");
    EXPECT_EQ(ctl.at("selected_size").get<int>(), 12 * 30);
    EXPECT_EQ(ctl.at("achieved_csep").get<double>(), 0.0);
    EXPECT_FALSE(fs::exists(ev / "type_s_same.csv"));
}

TEST(CliEvaluate, ShapeMismatchIsValidationError) {
    const fs::path sim = small_sim(), other = root() / "sim_other";
    ASSERT_EQ(run("simulate --seed 2 --out " + other.string() + " --param p=5 --param g=6 --param rank=1").code, 0);
    const CliRun r = run("evaluate --seed 0 --param valid=" + (sim / "ground_truth.csv").string() + " --param estimates='{\"x\":\"" +
                      (other / "ground_truth.csv").string() + "\"}' --out " + (root() / "eval_bad").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("5x6"), std::string::npos);
    EXPECT_NE(r.err.find("12x30"), std::string::npos);
}

TEST(CliFit, EmbeddingMismatchNamesShapes) {
    const fs::path sim = small_sim(), emb = root() / "bad_emb.csv";
    kronsmooth::io::write_matrix_csv(emb, kronsmooth::Matrix::Ones(7, 3));
    const CliRun r = run("fit --seed 1 --param data='[\"" + (sim / "replicate_1.csv").string() + "\"]' --param embeddings=" +
                      emb.string() + " --out " + (root() / "fit_bad").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("7x3"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("1x12x30"), std::string::npos) << r.err;
}

TEST(CliFit, DiagOneHotReportsThreeArdCoefficients) {
    const fs::path d = root() / "onehot";
    fs::create_directories(d);
    kronsmooth::Matrix emb = kronsmooth::Matrix::Zero(9, 3);
    for (int p = 0; p < 9; ++p) emb(p, p % 3) = 1.0;
    kronsmooth::io::write_matrix_csv(d / "emb.csv", emb);
    kronsmooth::Rng rng(4, "onehot");
    for (int r = 0; r < 2; ++r) kronsmooth::io::write_matrix_csv(d / ("x" + std::to_string(r) + ".csv"), rng.normal_matrix(9, 20));
    write_json_file(d / "cfg.json", {{"data", {"x0.csv", "x1.csv"}}, {"embeddings", "emb.csv"}, {"model", "diag"}, {"seed", 1}});
    const CliRun r = run("fit --config " + (d / "cfg.json").string() + " --out " + (d / "out").string());
    ASSERT_EQ(r.code, 0) << r.err;
    const json report = kronsmooth::io::read_json(d / "out" / "fit_report.json");
    EXPECT_EQ(report.at("ard_coefficients").size(), 3u);
    const auto trace = report.at("loglik_trace").get<std::vector<double>>();
    for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_GE(trace[i], trace[i - 1]);
    const CliRun s = run("smooth --config " + (d / "cfg.json").string() + " --param model=out/model.json --out " +
                      (d / "sm").string());
    ASSERT_EQ(s.code, 0) << s.err;
    EXPECT_TRUE(fs::exists(d / "sm" / "smoothed.csv"));
    EXPECT_FALSE(fs::exists(d / "sm" / "pca.csv"));
}

TEST(CliRankSelect, WritesSelection) {
    const fs::path sim = small_sim(), out = root() / "ranks";
    const CliRun r = run("rank-select --seed 3 --param data=" + (sim / "manifest.json").string() + " --out " + out.string());
    ASSERT_EQ(r.code, 0) << r.err;
    const json j = kronsmooth::io::read_json(out / "rank_selection.json");
    EXPECT_GE(j.at("selected_rank").get<int>(), 1);
    EXPECT_EQ(j.at("candidate_ranks").size(), j.at("heldout_losses").size());
}

TEST(CliThreads, MultiThreadMatchesSingleThread) {
    const fs::path sim = small_sim();
    const std::string args = "fit --seed 9 --param data=" + (sim / "manifest.json").string() +
                             " --param rank=2 --param max_iterations=5";
    ASSERT_EQ(run(args + " --threads 1 --out " + (root() / "t1").string()).code, 0);
    ASSERT_EQ(run(args + " --threads 3 --out " + (root() / "t3").string()).code, 0);
    const auto a = kronsmooth::io::lowrank_model_from_json(kronsmooth::io::read_json(root() / "t1" / "model.json"));
    const auto b = kronsmooth::io::lowrank_model_from_json(kronsmooth::io::read_json(root() / "t3" / "model.json"));
    EXPECT_LE((a.v - b.v).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LE((a.psi - b.psi).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_NEAR(a.tau2, b.tau2, 1e-9);
}
