#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bridgeseg/checkpoint.hpp"
#include "bridgeseg/config.hpp"
#include "bridgeseg/data.hpp"
#include "bridgeseg/errors.hpp"
#include "bridgeseg/eval.hpp"
#include "bridgeseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace bridgeseg;

namespace {

// BRIDGESEG_THREADS caps internal parallelism. Every current code path is
// single-threaded, so the cap only has to be validated; the default of 1
// keeps runs bit-reproducible if parallel kernels ever appear.
std::size_t thread_cap_from_env() {
    const char* v = std::getenv("BRIDGESEG_THREADS");
    if (!v || !*v) return 1;
    char* end = nullptr;
    long n = std::strtol(v, &end, 10);
    if (!end || *end != '\0' || n < 1)
        throw ConfigError(std::string("BRIDGESEG_THREADS='") + v +
                          "' is not a positive integer");
    return static_cast<std::size_t>(n);
}

KeyValueConfig load_config(const std::string& path, const std::vector<std::string>& sets) {
    KeyValueConfig kv =
        path.empty() ? KeyValueConfig() : KeyValueConfig::from_file(path);
    for (const std::string& s : sets) kv.set(s);
    return kv;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> out;
    std::string cur;
    std::istringstream ss(text);
    while (std::getline(ss, cur, ',')) {
        try {
            std::size_t used = 0;
            unsigned long long v = std::stoull(cur, &used);
            if (used != cur.size()) throw std::invalid_argument(cur);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError("--seeds: '" + cur + "' is not a seed");
        }
    }
    if (out.empty()) throw ConfigError("--seeds: empty list");
    return out;
}

// "lsb (w/o con)" -> "lsb_w_o_con"; keeps run directories unique per
// (method, ablation signature) and shell-friendly.
std::string sanitize_label(const std::string& label) {
    std::string out;
    for (char c : label) {
        if (std::isalnum(static_cast<unsigned char>(c)))
            out += c;
        else if (!out.empty() && out.back() != '_')
            out += '_';
    }
    while (!out.empty() && out.back() == '_') out.pop_back();
    return out;
}

int cmd_gen_data(const std::string& out_dir, const std::string& config_path,
                 const std::vector<std::string>& sets, std::int64_t seed_override) {
    KeyValueConfig kv = load_config(config_path, sets);
    if (seed_override >= 0)
        kv.set("data.seed", std::to_string(seed_override));
    BenchmarkSpec spec = benchmark_spec_from_config(kv);
    // Mirror of the tolerance in cmd_train: a shared experiment config may
    // carry training keys; they are validated but do not affect generation.
    (void)run_config_from_config(kv);
    kv.require_all_consumed();

    Dataset ds = generate_benchmark(spec);
    write_dataset(ds, out_dir);
    std::printf("wrote %s (%s)\n", out_dir.c_str(), benchmark_id(spec).c_str());
    std::printf("%s\n", detail::spec_to_manifest(spec).dump(2).c_str());
    return 0;
}

int cmd_train(const std::string& data_dir, const std::string& out_dir,
              const std::string& config_path, const std::string& method,
              const std::vector<std::string>& sets, const std::string& seeds_text) {
    Dataset ds = read_dataset(data_dir);
    KeyValueConfig kv = load_config(config_path, sets);
    if (!method.empty()) kv.set("train.method", method);
    RunConfig cfg = run_config_from_config(kv);
    // A shared experiment config may carry the generator's data.* section;
    // consume (and validate) it, but the dataset directory stays authoritative.
    (void)benchmark_spec_from_config(kv);
    kv.require_all_consumed();

    std::vector<std::uint64_t> seeds =
        seeds_text.empty() ? std::vector<std::uint64_t>{cfg.seed} : parse_seed_list(seeds_text);
    for (std::uint64_t seed : seeds) {
        cfg.seed = seed;
        std::string run_id = sanitize_label(cfg.label()) + "_seed" + std::to_string(seed);
        RunArtifacts art = run_training(ds, cfg, fs::path(out_dir) / run_id, data_dir);
        std::printf("%s seed %llu: test mIoU %.2f -> %s\n", cfg.label().c_str(),
                    static_cast<unsigned long long>(seed), art.test_miou_tgt,
                    art.out_dir.string().c_str());
    }
    return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir,
             const std::string& split_name, const std::string& domain_name,
             bool with_bound, std::string out_path) {
    Dataset ds = read_dataset(data_dir);
    NamedTensors records = read_checkpoint_raw(checkpoint_path);
    Activation act = activation_from_checkpoint(records, checkpoint_path);

    Split split = split_name == "val" ? Split::Val : Split::Test;
    bool source_side = domain_name == "S";
    Domain dom = source_side ? Domain::S : Domain::T;
    int modality = source_side ? 1 : 2;

    ParamSet net = paramset_from_checkpoint(records, source_side ? "source" : "target",
                                            source_side ? Role::Source : Role::Target,
                                            checkpoint_path);
    net.spec.activation = act;
    std::size_t want = source_side ? ds.spec.d1 : ds.spec.d2;
    if (net.spec.input_dim != want)
        throw ConfigError("checkpoint expects " + std::to_string(net.spec.input_dim) +
                          "-dim inputs but modality " + std::to_string(modality) + " of " +
                          data_dir + " has " + std::to_string(want) + " dims");
    if (net.spec.num_classes != ds.spec.classes)
        throw ConfigError("checkpoint has " + std::to_string(net.spec.num_classes) +
                          " classes but " + data_dir + " has " +
                          std::to_string(ds.spec.classes));

    IouReport rep = eval_split_miou(net, ds.split(dom, split), modality);
    for (std::size_t c = 0; c < rep.per_class.size(); ++c) {
        if (rep.included[c])
            std::printf("class %zu IoU %.4f\n", c, rep.per_class[c]);
        else
            std::printf("class %zu absent\n", c);
    }
    std::printf("mIoU %.2f (%s %s, %zu scenes)\n", rep.miou_percent, domain_name.c_str(),
                split_name.c_str(), ds.split(dom, split).scenes.size());

    nlohmann::json j;
    j["checkpoint"] = checkpoint_path;
    j["data"] = data_dir;
    j["domain"] = domain_name;
    j["split"] = split_name;
    j["miou"] = rep.miou_percent;
    j["per_class_iou"] = rep.per_class;
    j["included"] = rep.included;

    if (with_bound) {
        ParamSet src = paramset_from_checkpoint(records, "source", Role::Source,
                                                checkpoint_path);
        ParamSet tgt = paramset_from_checkpoint(records, "target", Role::Target,
                                                checkpoint_path);
        src.spec.activation = act;
        tgt.spec.activation = act;
        BoundReport bound = bound_report(src, tgt, ds);
        j["bound"] = bound.to_json();
        std::printf("%s", bound.to_markdown().c_str());
    }

    if (out_path.empty())
        out_path = (fs::path(checkpoint_path).parent_path() /
                    ("eval_" + domain_name + "_" + split_name + ".json"))
                       .string();
    detail::spit(out_path, j.dump(2) + "\n");
    std::printf("wrote %s\n", out_path.c_str());
    return 0;
}

struct CellStats {
    std::vector<double> mious;
    std::vector<std::uint64_t> seeds;
};

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_path) {
    // label -> benchmark_id -> per-seed test mIoU
    std::map<std::string, std::map<std::string, CellStats>> table;
    std::vector<std::string> benchmarks;

    for (const std::string& dir : run_dirs) {
        if (!fs::exists(dir)) throw ConfigError(dir + ": no such run directory");
        for (const auto& entry : fs::recursive_directory_iterator(dir)) {
            if (!entry.is_regular_file() || entry.path().filename() != "summary.json")
                continue;
            std::string file = entry.path().string();
            nlohmann::json j = nlohmann::json::parse(detail::slurp(file), nullptr, true, true);
            for (const char* key : {"label", "seed", "benchmark_id"})
                if (!j.contains(key))
                    throw FormatError(file + ": summary is missing '" + std::string(key) + "'");
            if (!j.contains("test") || !j["test"].contains("miou"))
                throw FormatError(file + ": summary is missing 'test.miou'");
            std::string label = j["label"].get<std::string>();
            std::string bench = j["benchmark_id"].get<std::string>();
            std::uint64_t seed = j["seed"].get<std::uint64_t>();
            CellStats& cell = table[label][bench];
            if (std::find(cell.seeds.begin(), cell.seeds.end(), seed) != cell.seeds.end())
                throw ConfigError(file + ": duplicate run (label '" + label + "', seed " +
                                  std::to_string(seed) + ", benchmark " + bench + ")");
            cell.seeds.push_back(seed);
            cell.mious.push_back(j["test"]["miou"].get<double>());
            if (std::find(benchmarks.begin(), benchmarks.end(), bench) == benchmarks.end())
                benchmarks.push_back(bench);
        }
    }
    if (table.empty())
        throw ConfigError("no summary.json found under the given run directories");
    std::sort(benchmarks.begin(), benchmarks.end());

    // Table 1 ordering: reference methods first, LSB rows last.
    std::vector<std::string> labels;
    for (const auto& [label, cells] : table) labels.push_back(label);
    auto rank = [](const std::string& l) {
        if (l == "oracle") return 0;
        if (l == "source_only") return 1;
        if (l == "pl") return 2;
        return 3;
    };
    std::sort(labels.begin(), labels.end(), [&](const std::string& a, const std::string& b) {
        return std::pair(rank(a), a) < std::pair(rank(b), b);
    });

    auto mean_of = [](const std::vector<double>& xs) {
        double s = 0.0;
        for (double x : xs) s += x;
        return s / static_cast<double>(xs.size());
    };
    auto std_of = [&](const std::vector<double>& xs) {
        double m = mean_of(xs);
        double s = 0.0;
        for (double x : xs) s += (x - m) * (x - m);
        return std::sqrt(s / static_cast<double>(xs.size()));
    };

    // Best non-oracle mean per benchmark column gets bolded.
    std::map<std::string, std::pair<std::string, double>> best;
    for (const std::string& label : labels) {
        if (label == "oracle") continue;
        for (const auto& [bench, cell] : table[label]) {
            double m = mean_of(cell.mious);
            auto it = best.find(bench);
            if (it == best.end() || m > it->second.second) best[bench] = {label, m};
        }
    }

    std::string md = "| method |";
    for (const std::string& b : benchmarks) md += " " + b + " |";
    md += "\n|---|";
    for (std::size_t i = 0; i < benchmarks.size(); ++i) md += "---|";
    md += "\n";
    char buf[64];
    for (const std::string& label : labels) {
        md += "| " + label + " |";
        for (const std::string& b : benchmarks) {
            auto it = table[label].find(b);
            if (it == table[label].end()) {
                md += " - |";
                continue;
            }
            std::snprintf(buf, sizeof buf, "%.2f ± %.2f", mean_of(it->second.mious),
                          std_of(it->second.mious));
            std::string cell = buf;
            if (best.count(b) && best[b].first == label) cell = "**" + cell + "**";
            md += " " + cell + " |";
        }
        md += "\n";
    }

    std::printf("%s", md.c_str());
    if (!out_path.empty()) {
        detail::spit(out_path, md);
        std::printf("wrote %s\n", out_path.c_str());
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale cross-modal adaptation workbench: synthetic benchmarks, "
                 "bridged dual-branch training, evaluation and reports"};
    app.require_subcommand(1);

    std::string gen_out, gen_config;
    std::vector<std::string> gen_sets;
    std::int64_t gen_seed = -1;
    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic benchmark");
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--config", gen_config, "key=value config file with data.* keys")
        ->check(CLI::ExistingFile);
    gen->add_option("--seed", gen_seed, "override data.seed");
    gen->add_option("--set", gen_sets, "override one config key, e.g. data.classes=5");

    std::string tr_data, tr_out, tr_config, tr_method, tr_seeds;
    std::vector<std::string> tr_sets;
    CLI::App* train = app.add_subcommand("train", "train one method on a dataset");
    train->add_option("--data", tr_data, "dataset directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    train->add_option("--out", tr_out, "directory that receives one subdirectory per run")
        ->required();
    train->add_option("--config", tr_config, "key=value config file with train.* keys")
        ->check(CLI::ExistingFile);
    train->add_option("--method", tr_method, "lsb | oracle | source_only | pl");
    train->add_option("--set", tr_sets, "override one config key, e.g. loss.lambda_c=0");
    train->add_option("--seeds", tr_seeds, "comma-separated seeds, run sequentially");

    std::string ev_ckpt, ev_data, ev_split = "test", ev_domain = "T", ev_out;
    bool ev_bound = false;
    CLI::App* ev = app.add_subcommand("eval", "score a checkpoint on a dataset split");
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")
        ->required()
        ->check(CLI::ExistingFile);
    ev->add_option("--data", ev_data, "dataset directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    ev->add_option("--split", ev_split, "val | test")
        ->check(CLI::IsMember({"val", "test"}));
    ev->add_option("--domain", ev_domain, "S (source net, modality 1) or T (target net, modality 2)")
        ->check(CLI::IsMember({"S", "T"}));
    ev->add_flag("--bound", ev_bound, "also print the error-bound diagnostics");
    ev->add_option("--out", ev_out, "JSON output path (default: next to the checkpoint)");

    std::vector<std::string> rp_dirs;
    std::string rp_out;
    CLI::App* rp = app.add_subcommand("report", "aggregate run summaries into a markdown table");
    rp->add_option("--runs", rp_dirs, "directories scanned recursively for summary.json")
        ->required();
    rp->add_option("--out", rp_out, "also write the table to this file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        (void)thread_cap_from_env();
        if (gen->parsed()) return cmd_gen_data(gen_out, gen_config, gen_sets, gen_seed);
        if (train->parsed())
            return cmd_train(tr_data, tr_out, tr_config, tr_method, tr_sets, tr_seeds);
        if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_split, ev_domain, ev_bound, ev_out);
        if (rp->parsed()) return cmd_report(rp_dirs, rp_out);
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric abort: %s\n", e.what());
        return 3;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
