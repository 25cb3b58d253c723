#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "traject/ingest.hpp"
#include "traject/pipeline.hpp"

#include "util.hpp"

using Catch::Matchers::ContainsSubstring;

namespace {

#ifndef TRAJECT_CLI_PATH
#error "TRAJECT_CLI_PATH must name the CLI binary (set by the test CMakeLists)"
#endif

const std::string& cli_path() {
    static const std::string path = TRAJECT_CLI_PATH;
    return path;
}

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

RunResult run_cli(const testutil::TempDir& dir, const std::string& args) {
    static int counter = 0;
    const std::string out_path = dir.file("cli_stdout_" + std::to_string(counter));
    const std::string err_path = dir.file("cli_stderr_" + std::to_string(counter));
    ++counter;

    const std::string cmd = cli_path() + " " + args + " >" + out_path + " 2>" + err_path;
    const int rc = std::system(cmd.c_str());
    RunResult r;
    REQUIRE(rc != -1);
    REQUIRE(WIFEXITED(rc));
    r.code = WEXITSTATUS(rc);
    r.out = testutil::read_file(out_path);
    r.err = testutil::read_file(err_path);
    return r;
}

// Small synthetic input set written through the CLI itself.
std::string make_inputs(const testutil::TempDir& dir, const std::string& name, int seed = 11,
                        const std::string& noise = "0.05") {
    const std::string prefix = dir.file(name);
    const RunResult r = run_cli(dir, "synth --classes 3 --per-class 40 --dim 16 --curve-modes 4 "
                                     "--noise " + noise + " --slides-per-class 3 --seed " +
                                         std::to_string(seed) + " --out " + prefix);
    REQUIRE(r.code == 0);
    return prefix;
}

std::string input_args(const std::string& prefix) {
    return "--embeddings " + prefix + ".emb1 --manifest " + prefix + ".manifest.csv --spec " +
           prefix + ".spec.json";
}

} // namespace

TEST_CASE("help and usage errors use the documented exit codes") {
    testutil::TempDir dir;

    const RunResult help = run_cli(dir, "--help");
    REQUIRE(help.code == 0);
    REQUIRE_THAT(help.out, ContainsSubstring("fidelity") && ContainsSubstring("synth"));

    REQUIRE(run_cli(dir, "").code == 2);
    REQUIRE(run_cli(dir, "frobnicate").code == 2);
    REQUIRE(run_cli(dir, "fidelity").code == 2);
    REQUIRE(run_cli(dir, "fidelity --bogus-flag x").code == 2);
}

TEST_CASE("synth writes the four output files") {
    testutil::TempDir dir;
    const std::string prefix = dir.file("toy");
    const RunResult r = run_cli(dir, "synth --classes 3 --per-class 40 --dim 16 --curve-modes 4 "
                                     "--noise 0.05 --slides-per-class 3 --seed 11 --out " +
                                         prefix);
    REQUIRE(r.code == 0);
    REQUIRE_THAT(r.out, ContainsSubstring("120 points") &&
                            ContainsSubstring("attainable tau ceiling"));

    REQUIRE(std::filesystem::exists(prefix + ".emb1"));
    REQUIRE(std::filesystem::exists(prefix + ".manifest.csv"));
    REQUIRE(std::filesystem::exists(prefix + ".spec.json"));
    REQUIRE(std::filesystem::exists(prefix + ".latent.csv"));

    const std::string latent = testutil::read_file(prefix + ".latent.csv");
    REQUIRE(latent.rfind("patch_id,latent_s\n", 0) == 0);

    const traject::Matrix x = traject::ingest::load_embeddings(prefix + ".emb1");
    REQUIRE(x.rows() == 120);
    REQUIRE(x.cols() == 16);
}

TEST_CASE("fidelity runs end to end and is thread-count invariant") {
    testutil::TempDir dir;
    const std::string prefix = make_inputs(dir, "toy");
    const std::string report = dir.file("rep.json");
    const std::string base = "fidelity " + input_args(prefix) +
                             " --k 10 --n-dcs 4 --trust-k 4 --id-subsample 100 --per-class 40"
                             " --seed 1 --out " + report;

    const RunResult r = run_cli(dir, base);
    REQUIRE(r.code == 0);
    REQUIRE_THAT(r.out, ContainsSubstring("tau: ") && ContainsSubstring("report: "));

    const nlohmann::json j = nlohmann::json::parse(testutil::read_file(report));
    REQUIRE(j["schema"] == "traject-fidelity-report/v1");
    const double tau = j["tau"].get<double>();
    REQUIRE(tau >= -1.0);
    REQUIRE(tau <= 1.0);
    REQUIRE(j["pseudotime_csv"].get<std::string>() == dir.file("rep.pseudotime.csv"));
    REQUIRE(std::filesystem::exists(dir.file("rep.pseudotime.csv")));

    SECTION("reports are identical across worker pool sizes") {
        REQUIRE(run_cli(dir, "--threads 1 " + base).code == 0);
        const std::string one = testutil::read_file(report);
        REQUIRE(run_cli(dir, "--threads 4 " + base).code == 0);
        REQUIRE(testutil::read_file(report) == one);
    }
    SECTION("fixed root index is honored") {
        const RunResult rr = run_cli(dir, base + " --root index:0");
        REQUIRE(rr.code == 0);
        const nlohmann::json jr = nlohmann::json::parse(testutil::read_file(report));
        REQUIRE(jr["root"]["policy"] == "index");
        REQUIRE(jr["root"]["sample_row"] == 0);
    }
    SECTION("malformed root spec is a usage error") {
        const RunResult rr = run_cli(dir, base + " --root nearest");
        REQUIRE(rr.code == 2);
        REQUIRE_THAT(rr.err, ContainsSubstring("--root must be"));
    }
}

TEST_CASE("preset subcommands enable their statistics sections") {
    testutil::TempDir dir;
    const std::string prefix = make_inputs(dir, "toy");
    const std::string common = input_args(prefix) +
                               " --k 10 --n-dcs 4 --trust-k 4 --id-subsample 100 --per-class 40"
                               " --seed 1 --out ";

    SECTION("permtest") {
        const std::string report = dir.file("perm.json");
        const RunResult r = run_cli(dir, "permtest " + common + report);
        REQUIRE(r.code == 0);
        REQUIRE_THAT(r.out, ContainsSubstring("permutation: true ordering rank"));
        const nlohmann::json j = nlohmann::json::parse(testutil::read_file(report));
        REQUIRE_FALSE(j["permutation"].is_null());
        REQUIRE(j["permutation"]["n_orderings"] == 6);
        REQUIRE(j["bootstrap"].is_null());
    }
    SECTION("null") {
        const std::string report = dir.file("null.json");
        const RunResult r = run_cli(dir, "null " + common + report + " --null-reps 30");
        REQUIRE(r.code == 0);
        REQUIRE_THAT(r.out, ContainsSubstring("null: mean"));
        const nlohmann::json j = nlohmann::json::parse(testutil::read_file(report));
        REQUIRE_FALSE(j["null"].is_null());
        REQUIRE(j["null"]["reps"] == 30);
    }
    SECTION("bootstrap") {
        const std::string report = dir.file("boot.json");
        const RunResult r = run_cli(dir, "bootstrap " + common + report + " --bootstrap-iters 5");
        REQUIRE(r.code == 0);
        REQUIRE_THAT(r.out, ContainsSubstring("ci: ["));
        const nlohmann::json j = nlohmann::json::parse(testutil::read_file(report));
        REQUIRE_FALSE(j["bootstrap"].is_null());
        REQUIRE(j["bootstrap"]["iterations"] == 5);
        REQUIRE(j["bootstrap"]["point_estimate"].get<double>() == j["tau"].get<double>());
    }
}

TEST_CASE("missing inputs exit with the usage code and name the stage") {
    testutil::TempDir dir;
    const std::string prefix = make_inputs(dir, "toy");
    const RunResult r = run_cli(dir, "fidelity --embeddings " + prefix + ".emb1 --manifest " +
                                         dir.file("absent.csv") + " --spec " + prefix +
                                         ".spec.json --k 10 --out " + dir.file("rep.json"));
    REQUIRE(r.code == 2);
    REQUIRE_THAT(r.err, ContainsSubstring("error:") && ContainsSubstring("stage ingest"));
}

TEST_CASE("disconnected embedding graphs exit with the analysis code") {
    testutil::TempDir dir;

    traject::Matrix x(40, 4);
    std::vector<traject::ingest::PatchRecord> records(40);
    for (int i = 0; i < 40; ++i) {
        const bool second = i >= 20;
        x(i, 0) = second ? 0.5 * (i - 20) : 100.0;
        x(i, 1) = second ? 100.0 : 0.5 * i;
        x(i, 2) = second ? 0.0 : 1.0;
        x(i, 3) = second ? 1.0 : 0.0;
        records[static_cast<std::size_t>(i)].patch_id = "p" + std::to_string(i);
        records[static_cast<std::size_t>(i)].slide_id = second ? "s1" : "s0";
        records[static_cast<std::size_t>(i)].class_label = second ? "late" : "early";
    }
    traject::ingest::ProgressionSpec spec;
    spec.name = "two_islands";
    spec.classes = {"early", "late"};

    traject::ingest::save_embeddings(dir.file("emb.bin"), x);
    traject::ingest::save_manifest(dir.file("manifest.csv"), records);
    traject::ingest::save_progression_spec(dir.file("spec.json"), spec);

    const RunResult r = run_cli(dir, "fidelity --embeddings " + dir.file("emb.bin") +
                                         " --manifest " + dir.file("manifest.csv") + " --spec " +
                                         dir.file("spec.json") +
                                         " --k 3 --n-dcs 3 --per-class 20 --out " +
                                         dir.file("rep.json"));
    REQUIRE(r.code == 1);
    REQUIRE_THAT(r.err, ContainsSubstring("error:") && ContainsSubstring("connected components"));
}

TEST_CASE("id subcommand estimates dimension from a file") {
    testutil::TempDir dir;
    const std::string prefix = make_inputs(dir, "toy");
    const std::string report = dir.file("id.json");
    const RunResult r =
        run_cli(dir, "id --embeddings " + prefix + ".emb1 --subsample 100 --out " + report);
    REQUIRE(r.code == 0);
    REQUIRE_THAT(r.out, ContainsSubstring("intrinsic dimension:"));
    const nlohmann::json j = nlohmann::json::parse(testutil::read_file(report));
    REQUIRE(j["schema"] == "traject-id-report/v1");
    REQUIRE(j["n_rows"] == 120);
}

TEST_CASE("sweep subcommand reports failed grid points") {
    testutil::TempDir dir;
    const std::string prefix = make_inputs(dir, "toy");
    const std::string report = dir.file("sweep.json");
    const RunResult r = run_cli(dir, "sweep " + input_args(prefix) +
                                         " --k-grid 8,200 --n-dcs 4 --trust-k 4"
                                         " --id-subsample 100 --per-class 40 --seed 1 --out " +
                                         report);
    REQUIRE(r.code == 0);
    REQUIRE_THAT(r.out, ContainsSubstring("2 grid points, 1 failed"));
    REQUIRE(std::filesystem::exists(dir.file("sweep.sweep.csv")));
    const nlohmann::json j = nlohmann::json::parse(testutil::read_file(report));
    REQUIRE(j["schema"] == "traject-sweep-report/v1");
    REQUIRE(j["points"].size() == 2);
}

TEST_CASE("emergence subcommand tracks layers") {
    testutil::TempDir dir;
    const std::string first = make_inputs(dir, "toy");
    const std::string second = make_inputs(dir, "toy2", 12);
    const std::string report = dir.file("em.json");

    const RunResult r = run_cli(dir, "emergence --manifest " + first + ".manifest.csv --spec " +
                                         first + ".spec.json --layer 0.5:" + first +
                                         ".emb1 --layer 1:" + second +
                                         ".emb1 --k 8 --n-dcs 4 --id-subsample 100"
                                         " --per-class 40 --seed 1 --out " +
                                         report);
    REQUIRE(r.code == 0);
    REQUIRE_THAT(r.out, ContainsSubstring("depth 0.5: tau") && ContainsSubstring("report: "));
    REQUIRE(std::filesystem::exists(dir.file("em.emergence.csv")));
    const nlohmann::json j = nlohmann::json::parse(testutil::read_file(report));
    REQUIRE(j["schema"] == "traject-emergence-report/v1");
    REQUIRE(j["layers"].size() == 2);

    const RunResult bad = run_cli(dir, "emergence --manifest " + first + ".manifest.csv --spec " +
                                           first + ".spec.json --layer abc:" + first +
                                           ".emb1 --out " + report);
    REQUIRE(bad.code == 2);
    REQUIRE_THAT(bad.err, ContainsSubstring("is not a number"));
}

TEST_CASE("probe subcommand writes the few-shot report") {
    testutil::TempDir dir;
    const std::string prefix = make_inputs(dir, "toy", 11, "0");
    const std::string report = dir.file("probe.json");
    const RunResult r = run_cli(dir, "probe " + input_args(prefix) +
                                         " --shots 5 --trials 3 --per-class 40 --seed 2 --out " +
                                         report);
    REQUIRE(r.code == 0);
    REQUIRE_THAT(r.out, ContainsSubstring("mean macro-F1:") &&
                            ContainsSubstring("over 3 trials"));
    const nlohmann::json j = nlohmann::json::parse(testutil::read_file(report));
    REQUIRE(j["schema"] == "traject-probe-report/v1");
    REQUIRE(j["shots"] == 5);
    REQUIRE(j["per_trial_f1"].size() == 3);
}

TEST_CASE("compare and correlate join reports into tables") {
    testutil::TempDir dir;

    // Handwritten single-cell reports plus a table covering more models.
    nlohmann::json fid;
    fid["schema"] = "traject-fidelity-report/v1";
    fid["model"] = "mA";
    fid["cohort"] = "c1";
    fid["tau"] = 0.42;
    testutil::write_file(dir.file("fid.json"), fid.dump(2));

    nlohmann::json prb;
    prb["schema"] = "traject-probe-report/v1";
    prb["model"] = "mA";
    prb["cohort"] = "c1";
    prb["mean_f1"] = 0.9;
    testutil::write_file(dir.file("prb.json"), prb.dump(2));

    const std::string table_out = dir.file("table.json");
    const RunResult cmp = run_cli(dir, "compare " + dir.file("fid.json") + " " +
                                           dir.file("prb.json") + " --out " + table_out);
    REQUIRE(cmp.code == 0);
    REQUIRE_THAT(cmp.out, ContainsSubstring("tau:") && ContainsSubstring("table: "));
    const nlohmann::json jt = nlohmann::json::parse(testutil::read_file(table_out));
    REQUIRE(jt["schema"] == "traject-table/v1");
    REQUIRE(jt["models"] == nlohmann::json::array({"mA"}));

    // Correlation protocols need a fuller table: 4 models over 3 cohorts.
    nlohmann::json full;
    full["schema"] = "traject-table/v1";
    full["models"] = {"m1", "m2", "m3", "m4"};
    full["cohorts"] = {"c1", "c2", "c3"};
    full["tau"] = {{0.8, 0.7, 0.6}, {0.6, 0.5, 0.5}, {0.4, 0.6, 0.4}, {0.2, 0.1, 0.3}};
    full["f1"] = {{0.9, 0.8, 0.5}, {0.7, 0.6, 0.6}, {0.8, 0.7, 0.4}, {0.5, 0.4, 0.3}};
    testutil::write_file(dir.file("full.json"), full.dump(2));

    const std::string corr_out = dir.file("corr.json");
    const RunResult cor = run_cli(dir, "correlate " + dir.file("full.json") +
                                           " --protocol within --out " + corr_out);
    REQUIRE(cor.code == 0);
    REQUIRE_THAT(cor.out, ContainsSubstring("protocol: within_disease") &&
                              ContainsSubstring("mean rho:"));
    const nlohmann::json jc = nlohmann::json::parse(testutil::read_file(corr_out));
    REQUIRE(jc["schema"] == "traject-correlation-report/v1");
    REQUIRE(jc["rho"].size() == 3);
    REQUIRE(jc["rho"][0].get<double>() == 0.8);
    REQUIRE(jc["rho"][1].get<double>() == 1.0);

    const RunResult dup = run_cli(dir, "compare " + dir.file("fid.json") + " " +
                                           dir.file("fid.json"));
    REQUIRE(dup.code == 2);
    REQUIRE_THAT(dup.err, ContainsSubstring("duplicate tau cell"));
}
