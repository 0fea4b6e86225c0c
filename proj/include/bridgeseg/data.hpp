#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "bridgeseg/config.hpp"
#include "bridgeseg/errors.hpp"
#include "bridgeseg/rng.hpp"
#include "bridgeseg/tensor.hpp"

namespace bridgeseg {

enum class Domain : std::uint8_t { S = 0, B = 1, T = 2 };
enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };

inline const char* domain_name(Domain d) {
    switch (d) {
        case Domain::S: return "S";
        case Domain::B: return "B";
        default: return "T";
    }
}

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        default: return "test";
    }
}

inline Domain domain_from_name(const std::string& s) {
    if (s == "S") return Domain::S;
    if (s == "B") return Domain::B;
    if (s == "T") return Domain::T;
    throw ConfigError("unknown domain '" + s + "' (expected S, B or T)");
}

inline Split split_from_name(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw ConfigError("unknown split '" + s + "' (expected train, val or test)");
}

inline bool domain_has_m1(Domain d) { return d != Domain::T; }
inline bool domain_has_m2(Domain d) { return d != Domain::S; }

// Shape of a synthetic paired-modality benchmark. Points carry a latent
// class-anchored vector; two fixed nonlinear maps render it into modality 1
// and modality 2. Domains differ by class priors and a latent mean shift, so
// the source/target gap is controllable.
struct BenchmarkSpec {
    std::size_t classes = 4;
    std::size_t latent_dim = 8;
    std::size_t d1 = 12;
    std::size_t d2 = 10;
    std::size_t points_per_scene = 64;
    std::size_t train_scenes = 200;
    std::size_t val_scenes = 100;
    std::size_t test_scenes = 100;
    // Indexed by Domain. The default geometry places the bridge roughly
    // between source and target in latent space and skews the class priors
    // in opposite directions, so cross-domain transfer is hard enough for
    // the bridge losses to matter but not hopeless.
    std::array<std::vector<double>, 3> priors{std::vector<double>{0.4, 0.3, 0.2, 0.1},
                                              std::vector<double>{0.25, 0.25, 0.25, 0.25},
                                              std::vector<double>{0.1, 0.2, 0.3, 0.4}};
    std::array<std::vector<double>, 3> deltas{std::vector<double>(8, 0.0),
                                              std::vector<double>(8, 1.15),
                                              std::vector<double>(8, 1.45)};
    double sigma_latent = 0.7;
    double sigma_m1 = 0.05;
    double sigma_m2 = 0.15;
    std::uint64_t seed = 1;

    std::size_t scenes_in(Split s) const {
        switch (s) {
            case Split::Train: return train_scenes;
            case Split::Val: return val_scenes;
            default: return test_scenes;
        }
    }

    bool operator==(const BenchmarkSpec&) const = default;

    void validate() const {
        if (classes < 2) throw ConfigError("BenchmarkSpec: need at least 2 classes");
        if (latent_dim < 1 || d1 < 1 || d2 < 1)
            throw ConfigError("BenchmarkSpec: dims must be >= 1");
        if (points_per_scene < 1) throw ConfigError("BenchmarkSpec: empty scenes");
        if (train_scenes < 1 || val_scenes < 1 || test_scenes < 1)
            throw ConfigError("BenchmarkSpec: every split needs at least one scene");
        if (sigma_latent < 0 || sigma_m1 < 0 || sigma_m2 < 0)
            throw ConfigError("BenchmarkSpec: noise scales must be >= 0");
        for (std::size_t d = 0; d < 3; ++d) {
            if (priors[d].size() != classes)
                throw ConfigError(std::string("BenchmarkSpec: prior for domain ") +
                                  domain_name(static_cast<Domain>(d)) + " has " +
                                  std::to_string(priors[d].size()) + " entries, expected " +
                                  std::to_string(classes));
            double sum = 0.0;
            for (double p : priors[d]) {
                if (p < 0) throw ConfigError("BenchmarkSpec: negative prior entry");
                sum += p;
            }
            if (std::abs(sum - 1.0) > 1e-12)
                throw ConfigError(std::string("BenchmarkSpec: prior for domain ") +
                                  domain_name(static_cast<Domain>(d)) +
                                  " sums to " + std::to_string(sum));
            if (deltas[d].size() != latent_dim)
                throw ConfigError(std::string("BenchmarkSpec: delta for domain ") +
                                  domain_name(static_cast<Domain>(d)) + " has " +
                                  std::to_string(deltas[d].size()) + " entries, expected " +
                                  std::to_string(latent_dim));
        }
    }
};

// One scene: per-point features in whichever modalities the domain carries,
// plus labels. Labels are stored for every domain but the trainer may only
// read them where labels_trainer_visible is set (source scenes, and target
// scenes explicitly unlocked for the oracle).
struct Scene {
    Domain domain = Domain::S;
    std::uint32_t n = 0;
    std::vector<float> m1; // n x d1 row-major, empty when the modality is absent
    std::vector<float> m2; // n x d2 row-major
    std::vector<std::uint16_t> labels;
    bool labels_trainer_visible = false;

    bool has_m1() const { return !m1.empty(); }
    bool has_m2() const { return !m2.empty(); }

    const std::vector<std::uint16_t>& labels_for_training() const {
        if (!labels_trainer_visible)
            throw LabelSecrecyError(std::string("ground-truth labels of domain ") +
                                    domain_name(domain) + " are hidden from the trainer");
        return labels;
    }

    // Metrics only. Never feed these into a loss for B/T.
    const std::vector<std::uint16_t>& labels_for_eval() const { return labels; }
};

struct SplitData {
    std::vector<Scene> scenes;
    std::size_t total_points() const {
        std::size_t n = 0;
        for (const Scene& s : scenes) n += s.n;
        return n;
    }
};

struct Dataset {
    BenchmarkSpec spec;
    std::array<std::array<SplitData, 3>, 3> parts; // [domain][split]

    const SplitData& split(Domain d, Split s) const {
        return parts[static_cast<std::size_t>(d)][static_cast<std::size_t>(s)];
    }
    SplitData& split(Domain d, Split s) {
        return parts[static_cast<std::size_t>(d)][static_cast<std::size_t>(s)];
    }

    // Makes ground truth of one domain visible to the trainer. Only the
    // oracle baseline may call this, on its own copy of the dataset.
    void unlock_labels(Domain d) {
        for (auto& sp : parts[static_cast<std::size_t>(d)])
            for (Scene& sc : sp.scenes) sc.labels_trainer_visible = true;
    }
};

// ---- generation ----

namespace detail {

struct ModalityMap {
    std::vector<double> a; // out_dim x latent_dim
    std::vector<double> b; // out_dim
};

inline ModalityMap draw_map(std::size_t out_dim, std::size_t k, Rng& rng) {
    ModalityMap m;
    m.a.resize(out_dim * k);
    m.b.resize(out_dim);
    double scale = 1.0 / std::sqrt(static_cast<double>(k));
    for (double& v : m.a) v = rng.next_normal() * scale;
    for (double& v : m.b) v = rng.next_normal() * 0.1;
    return m;
}

inline void render(const ModalityMap& map, const std::vector<double>& z, double sigma,
                   Rng& rng, float* out) {
    std::size_t k = z.size();
    std::size_t d = map.b.size();
    for (std::size_t j = 0; j < d; ++j) {
        double pre = map.b[j];
        for (std::size_t i = 0; i < k; ++i) pre += map.a[j * k + i] * z[i];
        out[j] = static_cast<float>(std::tanh(pre) + sigma * rng.next_normal());
    }
}

} // namespace detail

// Per point: class c ~ prior of the domain, latent z = anchor_c + delta_dom +
// sigma_latent * eps, then x_m = tanh(A_m z + b_m) + sigma_m * eps_m. Class
// anchors and the two modality maps are drawn once per benchmark, shared by
// every domain; bridge scenes render both modalities from the same z. Each
// scene has its own derived RNG key, so the output is reproducible point for
// point regardless of generation order.
inline Dataset generate_benchmark(const BenchmarkSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.spec = spec;

    std::size_t k = spec.latent_dim;
    Rng anchor_rng(derive_key(spec.seed, "anchors"));
    std::vector<std::vector<double>> anchors(spec.classes, std::vector<double>(k));
    for (auto& mu : anchors)
        for (double& v : mu) v = anchor_rng.next_normal();
    Rng map1_rng(derive_key(spec.seed, "map.m1"));
    Rng map2_rng(derive_key(spec.seed, "map.m2"));
    detail::ModalityMap map1 = detail::draw_map(spec.d1, k, map1_rng);
    detail::ModalityMap map2 = detail::draw_map(spec.d2, k, map2_rng);

    for (std::size_t di = 0; di < 3; ++di) {
        Domain dom = static_cast<Domain>(di);
        const std::vector<double>& prior = spec.priors[di];
        const std::vector<double>& delta = spec.deltas[di];
        for (std::size_t si = 0; si < 3; ++si) {
            Split sp = static_cast<Split>(si);
            std::string tag = std::string("scene.") + domain_name(dom) + "." + split_name(sp);
            SplitData& out = ds.split(dom, sp);
            out.scenes.resize(spec.scenes_in(sp));
            for (std::size_t scene_idx = 0; scene_idx < out.scenes.size(); ++scene_idx) {
                Scene& sc = out.scenes[scene_idx];
                sc.domain = dom;
                sc.n = static_cast<std::uint32_t>(spec.points_per_scene);
                sc.labels.resize(sc.n);
                sc.labels_trainer_visible = dom == Domain::S;
                if (domain_has_m1(dom)) sc.m1.resize(sc.n * spec.d1);
                if (domain_has_m2(dom)) sc.m2.resize(sc.n * spec.d2);
                Rng rng(derive_key(spec.seed, tag, scene_idx));
                std::vector<double> z(k);
                for (std::uint32_t i = 0; i < sc.n; ++i) {
                    double u = rng.next_uniform();
                    std::size_t c = spec.classes - 1;
                    double cum = 0.0;
                    for (std::size_t j = 0; j < spec.classes; ++j) {
                        cum += prior[j];
                        if (u < cum) {
                            c = j;
                            break;
                        }
                    }
                    sc.labels[i] = static_cast<std::uint16_t>(c);
                    for (std::size_t j = 0; j < k; ++j)
                        z[j] = anchors[c][j] + delta[j] + spec.sigma_latent * rng.next_normal();
                    if (domain_has_m1(dom))
                        detail::render(map1, z, spec.sigma_m1, rng, sc.m1.data() + i * spec.d1);
                    if (domain_has_m2(dom))
                        detail::render(map2, z, spec.sigma_m2, rng, sc.m2.data() + i * spec.d2);
                }
            }
        }
    }
    return ds;
}

// ---- binary persistence ----

namespace detail {

inline void put_u8(std::string& b, std::uint8_t v) { b.push_back(static_cast<char>(v)); }
inline void put_u16(std::string& b, std::uint16_t v) {
    b.push_back(static_cast<char>(v & 0xff));
    b.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& b, float v) { put_u32(b, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::string& b, double v) { put_u64(b, std::bit_cast<std::uint64_t>(v)); }

// Cursor over an in-memory file image; all reads are bounds-checked.
struct ByteReader {
    const std::string& buf;
    std::string context;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size())
            throw FormatError(context + ": unexpected end of file at byte " +
                              std::to_string(pos) + " (wanted " + std::to_string(n) +
                              " more of " + std::to_string(buf.size()) + ")");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf[pos++]);
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

inline std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(path.string() + ": cannot open for reading");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return buf;
}

inline void spit(const std::filesystem::path& path, const std::string& buf) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(path.string() + ": cannot open for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw FormatError(path.string() + ": write failed");
}

} // namespace detail

inline std::filesystem::path split_file_path(const std::filesystem::path& dir, Domain d,
                                             Split s) {
    return dir / (std::string(domain_name(d)) + "_" + split_name(s) + ".bin");
}

namespace detail {

inline std::string encode_split(const BenchmarkSpec& spec, Domain dom,
                                const SplitData& split) {
    std::string buf;
    buf += "HMUD";
    put_u16(buf, 1); // version
    put_u8(buf, static_cast<std::uint8_t>(dom));
    put_u32(buf, static_cast<std::uint32_t>(split.scenes.size()));
    put_u32(buf, static_cast<std::uint32_t>(spec.points_per_scene));
    put_u16(buf, static_cast<std::uint16_t>(spec.classes));
    put_u16(buf, static_cast<std::uint16_t>(spec.d1));
    put_u16(buf, static_cast<std::uint16_t>(spec.d2));
    std::uint8_t mask = 0;
    if (domain_has_m1(dom)) mask |= 1;
    if (domain_has_m2(dom)) mask |= 2;
    put_u8(buf, mask);
    for (const Scene& sc : split.scenes) {
        if (sc.n != spec.points_per_scene)
            throw ContractError("encode_split: scene has " + std::to_string(sc.n) +
                                " points, spec says " +
                                std::to_string(spec.points_per_scene));
        for (float v : sc.m1) put_f32(buf, v);
        for (float v : sc.m2) put_f32(buf, v);
        for (std::uint16_t y : sc.labels) put_u16(buf, y);
    }
    return buf;
}

inline SplitData decode_split(const std::string& buf, const std::string& context,
                              const BenchmarkSpec& spec, Domain expected_dom,
                              std::size_t expected_scenes) {
    ByteReader r{buf, context};
    if (r.bytes(4) != "HMUD") throw FormatError(context + ": bad magic, not a dataset file");
    std::uint16_t version = r.u16();
    if (version != 1)
        throw FormatError(context + ": unsupported version " + std::to_string(version));
    std::uint8_t dom_tag = r.u8();
    if (dom_tag != static_cast<std::uint8_t>(expected_dom))
        throw FormatError(context + ": domain tag " + std::to_string(dom_tag) +
                          " does not match expected domain " + domain_name(expected_dom));
    std::uint32_t scene_count = r.u32();
    std::uint32_t n = r.u32();
    std::uint16_t c = r.u16();
    std::uint16_t d1 = r.u16();
    std::uint16_t d2 = r.u16();
    std::uint8_t mask = r.u8();
    if (scene_count != expected_scenes)
        throw FormatError(context + ": " + std::to_string(scene_count) +
                          " scenes, manifest says " + std::to_string(expected_scenes));
    if (n != spec.points_per_scene || c != spec.classes || d1 != spec.d1 || d2 != spec.d2)
        throw FormatError(context + ": header dims (N=" + std::to_string(n) + ", C=" +
                          std::to_string(c) + ", d1=" + std::to_string(d1) + ", d2=" +
                          std::to_string(d2) + ") do not match the manifest");
    bool has1 = mask & 1, has2 = mask & 2;
    if (has1 != domain_has_m1(expected_dom) || has2 != domain_has_m2(expected_dom))
        throw FormatError(context + ": modality mask " + std::to_string(mask) +
                          " is wrong for domain " + domain_name(expected_dom));
    std::size_t scene_bytes = (has1 ? std::size_t{n} * d1 * 4 : 0) +
                              (has2 ? std::size_t{n} * d2 * 4 : 0) + std::size_t{n} * 2;
    std::size_t expected_size = r.pos + scene_count * scene_bytes;
    if (buf.size() != expected_size)
        throw FormatError(context + ": truncated or oversized file (expected " +
                          std::to_string(expected_size) + " bytes, got " +
                          std::to_string(buf.size()) + ")");
    SplitData out;
    out.scenes.resize(scene_count);
    for (Scene& sc : out.scenes) {
        sc.domain = expected_dom;
        sc.n = n;
        sc.labels_trainer_visible = expected_dom == Domain::S;
        if (has1) {
            sc.m1.resize(std::size_t{n} * d1);
            for (float& v : sc.m1) v = r.f32();
        }
        if (has2) {
            sc.m2.resize(std::size_t{n} * d2);
            for (float& v : sc.m2) v = r.f32();
        }
        sc.labels.resize(n);
        for (std::uint16_t& y : sc.labels) {
            y = r.u16();
            if (y >= c)
                throw FormatError(context + ": label " + std::to_string(y) +
                                  " out of range for " + std::to_string(c) + " classes");
        }
    }
    return out;
}

inline nlohmann::json spec_to_manifest(const BenchmarkSpec& spec) {
    nlohmann::json j;
    j["format"] = "paired-modality-benchmark";
    j["format_version"] = 1;
    j["seed"] = spec.seed;
    j["classes"] = spec.classes;
    j["latent_dim"] = spec.latent_dim;
    j["d1"] = spec.d1;
    j["d2"] = spec.d2;
    j["points_per_scene"] = spec.points_per_scene;
    j["scenes"] = {{"train", spec.train_scenes},
                   {"val", spec.val_scenes},
                   {"test", spec.test_scenes}};
    j["sigma_latent"] = spec.sigma_latent;
    j["sigma_m1"] = spec.sigma_m1;
    j["sigma_m2"] = spec.sigma_m2;
    for (std::size_t d = 0; d < 3; ++d) {
        const char* name = domain_name(static_cast<Domain>(d));
        j["priors"][name] = spec.priors[d];
        j["deltas"][name] = spec.deltas[d];
    }
    return j;
}

inline BenchmarkSpec spec_from_manifest(const nlohmann::json& j, const std::string& context) {
    try {
        if (j.at("format_version").get<int>() != 1)
            throw FormatError(context + ": unsupported manifest version");
        BenchmarkSpec spec;
        spec.seed = j.at("seed").get<std::uint64_t>();
        spec.classes = j.at("classes").get<std::size_t>();
        spec.latent_dim = j.at("latent_dim").get<std::size_t>();
        spec.d1 = j.at("d1").get<std::size_t>();
        spec.d2 = j.at("d2").get<std::size_t>();
        spec.points_per_scene = j.at("points_per_scene").get<std::size_t>();
        spec.train_scenes = j.at("scenes").at("train").get<std::size_t>();
        spec.val_scenes = j.at("scenes").at("val").get<std::size_t>();
        spec.test_scenes = j.at("scenes").at("test").get<std::size_t>();
        spec.sigma_latent = j.at("sigma_latent").get<double>();
        spec.sigma_m1 = j.at("sigma_m1").get<double>();
        spec.sigma_m2 = j.at("sigma_m2").get<double>();
        for (std::size_t d = 0; d < 3; ++d) {
            const char* name = domain_name(static_cast<Domain>(d));
            spec.priors[d] = j.at("priors").at(name).get<std::vector<double>>();
            spec.deltas[d] = j.at("deltas").at(name).get<std::vector<double>>();
        }
        spec.validate();
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(context + ": bad manifest: " + e.what());
    }
}

} // namespace detail

// Benchmark description from a key-value config. Shift vectors accept either
// a full comma list or a single value that is broadcast across the latent
// dimension; priors must always list every class.
inline BenchmarkSpec benchmark_spec_from_config(const KeyValueConfig& kv) {
    BenchmarkSpec spec;
    spec.classes = kv.get_count("data.classes", spec.classes);
    spec.latent_dim = kv.get_count("data.latent_dim", spec.latent_dim);
    spec.d1 = kv.get_count("data.d1", spec.d1);
    spec.d2 = kv.get_count("data.d2", spec.d2);
    spec.points_per_scene = kv.get_count("data.points_per_scene", spec.points_per_scene);
    spec.train_scenes = kv.get_count("data.train_scenes", spec.train_scenes);
    spec.val_scenes = kv.get_count("data.val_scenes", spec.val_scenes);
    spec.test_scenes = kv.get_count("data.test_scenes", spec.test_scenes);
    spec.sigma_latent = kv.get_double("data.sigma_latent", spec.sigma_latent);
    spec.sigma_m1 = kv.get_double("data.sigma_m1", spec.sigma_m1);
    spec.sigma_m2 = kv.get_double("data.sigma_m2", spec.sigma_m2);
    spec.seed = kv.get_u64("data.seed", spec.seed);
    if (spec.classes != 4) {
        // The built-in prior defaults are sized for four classes; a different
        // class count must spell its priors out.
        for (auto& p : spec.priors) p.assign(spec.classes, 1.0 / static_cast<double>(spec.classes));
    }
    if (spec.latent_dim != 8)
        for (std::size_t d = 0; d < 3; ++d)
            spec.deltas[d].assign(spec.latent_dim, spec.deltas[d].empty() ? 0.0 : spec.deltas[d][0]);
    const char* prior_keys[3] = {"data.priors_s", "data.priors_b", "data.priors_t"};
    const char* delta_keys[3] = {"data.delta_s", "data.delta_b", "data.delta_t"};
    for (std::size_t d = 0; d < 3; ++d) {
        spec.priors[d] = kv.get_double_list(prior_keys[d], spec.priors[d]);
        std::vector<double> delta = kv.get_double_list(delta_keys[d], spec.deltas[d]);
        if (delta.size() == 1) delta.assign(spec.latent_dim, delta[0]);
        spec.deltas[d] = delta;
    }
    spec.validate();
    return spec;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw FormatError(dir.string() + ": cannot create directory: " + ec.message());
    detail::spit(dir / "manifest.json", detail::spec_to_manifest(ds.spec).dump(2) + "\n");
    for (std::size_t di = 0; di < 3; ++di)
        for (std::size_t si = 0; si < 3; ++si) {
            Domain d = static_cast<Domain>(di);
            Split s = static_cast<Split>(si);
            detail::spit(split_file_path(dir, d, s),
                         detail::encode_split(ds.spec, d, ds.split(d, s)));
        }
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
    std::filesystem::path manifest_path = dir / "manifest.json";
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(detail::slurp(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(manifest_path.string() + ": invalid JSON: " + e.what());
    }
    Dataset ds;
    ds.spec = detail::spec_from_manifest(manifest, manifest_path.string());
    for (std::size_t di = 0; di < 3; ++di)
        for (std::size_t si = 0; si < 3; ++si) {
            Domain d = static_cast<Domain>(di);
            Split s = static_cast<Split>(si);
            std::filesystem::path p = split_file_path(dir, d, s);
            ds.split(d, s) = detail::decode_split(detail::slurp(p), p.string(), ds.spec, d,
                                                  ds.spec.scenes_in(s));
        }
    return ds;
}

// ---- batching ----

// Scenes of one domain stacked for a training step.
struct Batch {
    Domain domain = Domain::S;
    std::vector<const Scene*> scenes;

    std::size_t total_points() const {
        std::size_t n = 0;
        for (const Scene* s : scenes) n += s->n;
        return n;
    }

    std::vector<std::size_t> sizes() const {
        std::vector<std::size_t> out;
        out.reserve(scenes.size());
        for (const Scene* s : scenes) out.push_back(s->n);
        return out;
    }

    Tensor stack_m1() const { return stack(1); }
    Tensor stack_m2() const { return stack(2); }

    // Concatenated ground-truth labels; throws unless the domain's labels are
    // trainer-visible.
    std::vector<std::size_t> train_labels() const {
        std::vector<std::size_t> out;
        out.reserve(total_points());
        for (const Scene* s : scenes)
            for (std::uint16_t y : s->labels_for_training()) out.push_back(y);
        return out;
    }

    std::vector<std::size_t> eval_labels() const {
        std::vector<std::size_t> out;
        out.reserve(total_points());
        for (const Scene* s : scenes)
            for (std::uint16_t y : s->labels_for_eval()) out.push_back(y);
        return out;
    }

private:
    Tensor stack(int which) const {
        if (scenes.empty()) throw ContractError("Batch: no scenes");
        const std::vector<float>& first =
            which == 1 ? scenes.front()->m1 : scenes.front()->m2;
        if (first.empty())
            throw ContractError(std::string("Batch: domain ") + domain_name(domain) +
                                " has no modality-" + std::to_string(which) + " features");
        std::size_t dim = first.size() / scenes.front()->n;
        Tensor out(total_points(), dim);
        std::size_t row = 0;
        for (const Scene* s : scenes) {
            const std::vector<float>& src = which == 1 ? s->m1 : s->m2;
            if (src.size() != std::size_t{s->n} * dim)
                throw ContractError("Batch: inconsistent feature dims across scenes");
            for (std::size_t i = 0; i < src.size(); ++i)
                out.data()[row * dim + i] = static_cast<double>(src[i]);
            row += s->n;
        }
        return out;
    }
};

// Uniform-without-replacement epoch sampler: each epoch is a fresh
// deterministic shuffle of the scene indices; batches may straddle epoch
// boundaries.
class BatchSampler {
public:
    BatchSampler(const SplitData& split, std::uint64_t key) : split_(&split), rng_(key) {
        if (split.scenes.empty()) throw ContractError("BatchSampler: empty split");
    }

    Batch next(std::size_t batch_size) {
        if (batch_size == 0) throw ContractError("BatchSampler: batch_size must be positive");
        if (batch_size > split_->scenes.size())
            throw ContractError("BatchSampler: batch_size " + std::to_string(batch_size) +
                                " exceeds split size " +
                                std::to_string(split_->scenes.size()));
        Batch b;
        b.domain = split_->scenes.front().domain;
        while (b.scenes.size() < batch_size) {
            if (pos_ == order_.size()) refill();
            b.scenes.push_back(&split_->scenes[order_[pos_++]]);
        }
        return b;
    }

private:
    void refill() {
        order_.resize(split_->scenes.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        rng_.shuffle(order_);
        pos_ = 0;
    }

    const SplitData* split_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

// Single-scene helper used by evaluation code.
inline Batch single_scene_batch(const Scene& sc) {
    Batch b;
    b.domain = sc.domain;
    b.scenes.push_back(&sc);
    return b;
}

} // namespace bridgeseg
