#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bridgeseg/checkpoint.hpp"
#include "bridgeseg/data.hpp"
#include "bridgeseg/eval.hpp"

using namespace bridgeseg;
using Catch::Matchers::ContainsSubstring;

namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

CliResult run_cli(const std::string& args, const std::string& env_prefix = "") {
    static int counter = 0;
    fs::path base = fs::temp_directory_path() / ("bridgeseg_cli_io_" + std::to_string(counter++));
    fs::path out_file = base.string() + ".out";
    fs::path err_file = base.string() + ".err";
    std::string cmd = env_prefix + (env_prefix.empty() ? "" : " ") + BRIDGESEG_CLI_PATH + " " +
                      args + " >" + out_file.string() + " 2>" + err_file.string();
    int rc = std::system(cmd.c_str());
    CliResult res;
    res.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    res.out = slurp_file(out_file);
    res.err = slurp_file(err_file);
    fs::remove(out_file);
    fs::remove(err_file);
    return res;
}

fs::path scratch_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("bridgeseg_cli_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
    REQUIRE(out.good());
}

const char* kDataConfig =
    "data.classes = 3\n"
    "data.latent_dim = 4\n"
    "data.d1 = 6\n"
    "data.d2 = 5\n"
    "data.points_per_scene = 8\n"
    "data.train_scenes = 6\n"
    "data.val_scenes = 3\n"
    "data.test_scenes = 3\n"
    "data.sigma_latent = 0.6\n"
    "data.seed = 11\n";

const char* kTrainConfig =
    "train.steps = 5\n"
    "train.batch_size = 4\n"
    "train.eval_every = 2\n"
    "net.hidden_dims = 8\n"
    "net.feat_dim = 6\n"
    "net.proj_dim = 4\n";

// One tiny dataset + config pair shared by the CLI tests in this TU.
struct CliFixture {
    fs::path root = scratch_dir("fixture");
    fs::path data = root / "data";
    fs::path data_cfg = root / "data.cfg";
    fs::path train_cfg = root / "train.cfg";

    CliFixture() {
        write_text(data_cfg, kDataConfig);
        write_text(train_cfg, kTrainConfig);
        CliResult gen = run_cli("gen-data --out " + data.string() + " --config " +
                                data_cfg.string());
        REQUIRE(gen.code == 0);
    }
};

CliFixture& fixture() {
    static CliFixture f;
    return f;
}

} // namespace

TEST_CASE("gen-data writes the nine-file dataset layout", "[cli]") {
    CliFixture& f = fixture();
    std::vector<std::string> expect;
    for (const char* d : {"S", "B", "T"})
        for (const char* s : {"train", "val", "test"})
            expect.push_back(std::string(d) + "_" + s + ".bin");
    for (const std::string& name : expect)
        REQUIRE(fs::exists(f.data / name));
    REQUIRE(fs::exists(f.data / "manifest.json"));

    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(f.data)) {
        (void)e;
        ++files;
    }
    REQUIRE(files == 10);
}

TEST_CASE("gen-data is byte-deterministic under an explicit seed", "[cli]") {
    CliFixture& f = fixture();
    fs::path a = scratch_dir("gen_a");
    fs::path b = scratch_dir("gen_b");
    std::string args = " --config " + f.data_cfg.string() + " --seed 7";
    REQUIRE(run_cli("gen-data --out " + a.string() + args).code == 0);
    REQUIRE(run_cli("gen-data --out " + b.string() + args).code == 0);
    for (const auto& e : fs::directory_iterator(a)) {
        fs::path name = e.path().filename();
        REQUIRE(slurp_file(a / name) == slurp_file(b / name));
    }
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("cli flags usage errors as exit code 2", "[cli]") {
    REQUIRE(run_cli("gen-data").code == 2);                 // missing --out
    REQUIRE(run_cli("trian").code == 2);                    // unknown subcommand
    REQUIRE(run_cli("").code == 2);                         // no subcommand
    REQUIRE(run_cli("--help").code == 0);
    CliFixture& f = fixture();
    CliResult bad = run_cli("gen-data --out /tmp/bridgeseg_bad --config " +
                            f.data_cfg.string() + " --set data.classs=4");
    REQUIRE(bad.code == 2);
    REQUIRE_THAT(bad.err, ContainsSubstring("data.classs"));
}

TEST_CASE("the threads env var is validated", "[cli]") {
    CliFixture& f = fixture();
    fs::path out = scratch_dir("gen_threads");
    std::string args =
        "gen-data --out " + out.string() + " --config " + f.data_cfg.string();
    REQUIRE(run_cli(args, "BRIDGESEG_THREADS=nope").code == 2);
    REQUIRE(run_cli(args, "BRIDGESEG_THREADS=2").code == 0);
    fs::remove_all(out);
}

TEST_CASE("train writes reconstructible run artifacts", "[cli]") {
    CliFixture& f = fixture();
    fs::path out1 = scratch_dir("train_a");
    fs::path out2 = scratch_dir("train_b");
    std::string base = "train --data " + f.data.string() + " --config " +
                       f.train_cfg.string() + " --method lsb ";
    REQUIRE(run_cli(base + "--out " + out1.string()).code == 0);
    REQUIRE(run_cli(base + "--out " + out2.string()).code == 0);

    fs::path run1 = out1 / "lsb_seed1";
    fs::path run2 = out2 / "lsb_seed1";
    for (const char* name : {"metrics.csv", "summary.json", "checkpoint_best.lsbp",
                             "checkpoint_final.lsbp"}) {
        REQUIRE(fs::exists(run1 / name));
        REQUIRE(fs::exists(run2 / name));
    }

    // Identical args give identical artifacts, wall clock aside.
    REQUIRE(slurp_file(run1 / "metrics.csv") == slurp_file(run2 / "metrics.csv"));
    REQUIRE(slurp_file(run1 / "checkpoint_final.lsbp") ==
            slurp_file(run2 / "checkpoint_final.lsbp"));
    nlohmann::json s1 = nlohmann::json::parse(slurp_file(run1 / "summary.json"));
    nlohmann::json s2 = nlohmann::json::parse(slurp_file(run2 / "summary.json"));
    s1.erase("wall_clock_sec");
    s2.erase("wall_clock_sec");
    REQUIRE(s1 == s2);

    // The summary echoes the effective config, overrides included.
    REQUIRE(s1["config"]["train.steps"] == "5");
    REQUIRE(s1["config"]["net.feat_dim"] == "6");
    REQUIRE(s1["config"]["loss.lambda_c"].get<std::string>().substr(0, 1) == "4");

    fs::remove_all(out2);
}

TEST_CASE("zeroed loss weights reproduce the seg-only ablation", "[cli]") {
    CliFixture& f = fixture();
    fs::path out_w = scratch_dir("train_weights0");
    fs::path out_a = scratch_dir("train_ablation");
    std::string base = "train --data " + f.data.string() + " --config " +
                       f.train_cfg.string() + " --method lsb ";
    REQUIRE(run_cli(base + "--out " + out_w.string() +
                    " --set loss.lambda_c=0 --set loss.lambda_a=0")
                .code == 0);
    REQUIRE(run_cli(base + "--out " + out_a.string() +
                    " --set ablation.use_con=false --set ablation.use_ali=false")
                .code == 0);

    // Same optimization trajectory, so the final nets are bit-identical.
    REQUIRE(slurp_file(out_w / "lsb_seed1" / "checkpoint_final.lsbp") ==
            slurp_file(out_a / "lsb_seg_only_seed1" / "checkpoint_final.lsbp"));
    fs::remove_all(out_w);
    fs::remove_all(out_a);
}

TEST_CASE("eval scores checkpoints and rejects mismatched data", "[cli]") {
    CliFixture& f = fixture();
    fs::path out = scratch_dir("eval_runs");
    REQUIRE(run_cli("train --data " + f.data.string() + " --config " +
                    f.train_cfg.string() + " --method lsb --out " + out.string())
                .code == 0);
    fs::path ckpt = out / "lsb_seed1" / "checkpoint_best.lsbp";

    fs::path j1 = out / "eval1.json";
    fs::path j2 = out / "eval2.json";
    std::string base = "eval --checkpoint " + ckpt.string() + " --data " + f.data.string();
    CliResult r1 = run_cli(base + " --split val --domain T --out " + j1.string());
    REQUIRE(r1.code == 0);
    REQUIRE_THAT(r1.out, ContainsSubstring("mIoU"));
    REQUIRE(run_cli(base + " --split val --domain T --out " + j2.string()).code == 0);
    REQUIRE(slurp_file(j1) == slurp_file(j2));

    nlohmann::json j = nlohmann::json::parse(slurp_file(j1));
    REQUIRE(j["domain"] == "T");
    REQUIRE(j["miou"].get<double>() >= 0.0);
    REQUIRE(j["miou"].get<double>() <= 100.0);

    // Source-side routing works on the same checkpoint, and the bound
    // diagnostics attach on request.
    CliResult rs = run_cli(base + " --split test --domain S --out " +
                           (out / "eval_s.json").string() + " --bound");
    REQUIRE(rs.code == 0);
    REQUIRE_THAT(rs.out, ContainsSubstring("modality gap"));
    nlohmann::json js = nlohmann::json::parse(slurp_file(out / "eval_s.json"));
    REQUIRE(js.contains("bound"));

    // A dataset with different feature dims is refused with both shapes named.
    fs::path other = scratch_dir("eval_other_data");
    REQUIRE(run_cli("gen-data --out " + other.string() + " --config " + f.data_cfg.string() +
                    " --set data.d2=7")
                .code == 0);
    CliResult bad = run_cli("eval --checkpoint " + ckpt.string() + " --data " +
                            other.string() + " --split val --domain T");
    REQUIRE(bad.code == 2);
    REQUIRE_THAT(bad.err, ContainsSubstring("5"));
    REQUIRE_THAT(bad.err, ContainsSubstring("7"));

    fs::remove_all(out);
    fs::remove_all(other);
}

TEST_CASE("oracle training generalizes from its own train split", "[cli][slow]") {
    CliFixture& f = fixture();
    fs::path out = scratch_dir("oracle_runs");
    REQUIRE(run_cli("train --data " + f.data.string() + " --config " +
                    f.train_cfg.string() +
                    " --method oracle --set train.steps=120 --seeds 1,2,3 --out " +
                    out.string())
                .code == 0);

    // Overfitting direction: train-split mIoU at least matches test mIoU on
    // average across seeds.
    Dataset ds = read_dataset(f.data);
    double mean_train = 0.0, mean_test = 0.0;
    for (int seed = 1; seed <= 3; ++seed) {
        fs::path ckpt = out / ("oracle_seed" + std::to_string(seed)) / "checkpoint_best.lsbp";
        NamedTensors records = read_checkpoint_raw(ckpt);
        ParamSet net = paramset_from_checkpoint(records, "target", Role::Target, ckpt.string());
        net.spec.activation = activation_from_checkpoint(records, ckpt.string());
        mean_train += eval_split_miou(net, ds.split(Domain::T, Split::Train), 2).miou_percent;
        mean_test += eval_split_miou(net, ds.split(Domain::T, Split::Test), 2).miou_percent;
    }
    REQUIRE(mean_train / 3.0 >= mean_test / 3.0);

    // Keep the runs for the report test below.
    REQUIRE(fs::exists(out / "oracle_seed2" / "summary.json"));
}

TEST_CASE("report renders a markdown table with the best method bolded", "[cli]") {
    CliFixture& f = fixture();
    fs::path runs = scratch_dir("report_runs");
    std::string base = "train --data " + f.data.string() + " --config " +
                       f.train_cfg.string() + " --out " + runs.string();
    REQUIRE(run_cli(base + " --method lsb --seeds 1,2").code == 0);
    REQUIRE(run_cli(base + " --method source_only --seeds 1,2").code == 0);

    CliResult rep = run_cli("report --runs " + runs.string());
    REQUIRE(rep.code == 0);
    REQUIRE_THAT(rep.out, ContainsSubstring("| method |"));
    REQUIRE_THAT(rep.out, ContainsSubstring("C3_k4_d6x5_seed11"));
    REQUIRE_THAT(rep.out, ContainsSubstring("±"));
    REQUIRE_THAT(rep.out, ContainsSubstring("**"));
    REQUIRE_THAT(rep.out, ContainsSubstring("| lsb |"));
    REQUIRE_THAT(rep.out, ContainsSubstring("| source_only |"));

    // Exactly one bolded cell in the single benchmark column.
    std::size_t bolds = 0;
    for (std::size_t pos = rep.out.find("**"); pos != std::string::npos;
         pos = rep.out.find("**", pos + 2))
        ++bolds;
    REQUIRE(bolds == 2);

    fs::remove_all(runs);
}

TEST_CASE("report flags schema and empty-input errors", "[cli]") {
    fs::path runs = scratch_dir("report_bad");
    CliResult empty = run_cli("report --runs " + runs.string());
    REQUIRE(empty.code == 2);
    REQUIRE_THAT(empty.err, ContainsSubstring("no summary.json"));

    write_text(runs / "summary.json",
               "{\"label\": \"lsb\", \"benchmark_id\": \"b\", \"test\": {\"miou\": 1.0}}\n");
    CliResult bad = run_cli("report --runs " + runs.string());
    REQUIRE(bad.code == 2);
    REQUIRE_THAT(bad.err, ContainsSubstring("summary.json"));
    REQUIRE_THAT(bad.err, ContainsSubstring("seed"));
    fs::remove_all(runs);
}

TEST_CASE("a poisoned dataset aborts training with exit code 3", "[cli]") {
    CliFixture& f = fixture();
    fs::path data = scratch_dir("nan_data");
    REQUIRE(run_cli("gen-data --out " + data.string() + " --config " + f.data_cfg.string())
                .code == 0);

    // Overwrite the first feature float of S_train with a quiet NaN; the
    // 22-byte header precedes the first scene's modality-1 block.
    fs::path bin = data / "S_train.bin";
    std::string bytes = slurp_file(bin);
    REQUIRE(bytes.size() > 26);
    bytes[22] = '\x00';
    bytes[23] = '\x00';
    bytes[24] = '\xc0';
    bytes[25] = '\x7f';
    std::ofstream(bin, std::ios::binary).write(bytes.data(),
                                               static_cast<std::streamsize>(bytes.size()));

    CliResult r = run_cli("train --data " + data.string() + " --config " +
                          f.train_cfg.string() + " --method lsb --out " +
                          (data / "runs").string());
    REQUIRE(r.code == 3);
    REQUIRE_THAT(r.err, ContainsSubstring("numeric abort"));
    fs::remove_all(data);
}
