// Command-line surface wiring data generation, classifier building, encoder
// planting, inference, training, evaluation and robustness sweeps into
// reproducible runs. Exit codes: 0 success, 1 data/runtime error, 2 usage or
// configuration error. Every command resolves all parameters up front and
// records them in <out>/config.snapshot before finishing.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dseg/corruption.hpp"
#include "dseg/dataio.hpp"
#include "dseg/error.hpp"
#include "dseg/metrics.hpp"
#include "dseg/ops.hpp"
#include "dseg/pipeline.hpp"
#include "dseg/rng.hpp"
#include "dseg/serialize.hpp"
#include "dseg/textbank.hpp"

namespace fs = std::filesystem;
using namespace dseg;

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

long long parse_ll(const std::string& s, const std::string& what) {
    std::size_t pos = 0;
    long long v = 0;
    try {
        v = std::stoll(s, &pos);
    } catch (const std::exception&) {
        throw ConfigError(what + ": not an integer: '" + s + "'");
    }
    if (pos != s.size()) throw ConfigError(what + ": not an integer: '" + s + "'");
    return v;
}

std::uint64_t parse_u64(const std::string& s, const std::string& what) {
    std::size_t pos = 0;
    std::uint64_t v = 0;
    try {
        v = std::stoull(s, &pos);
    } catch (const std::exception&) {
        throw ConfigError(what + ": not an unsigned integer: '" + s + "'");
    }
    if (pos != s.size() || s[0] == '-')
        throw ConfigError(what + ": not an unsigned integer: '" + s + "'");
    return v;
}

double parse_double(const std::string& s, const std::string& what) {
    std::size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw ConfigError(what + ": not a number: '" + s + "'");
    }
    if (pos != s.size()) throw ConfigError(what + ": not a number: '" + s + "'");
    return v;
}

// Comma-separated class ids; an empty string parses to an empty list.
std::vector<int> parse_id_list(const std::string& text, const std::string& what) {
    std::vector<int> ids;
    if (text.empty()) return ids;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        ids.push_back(static_cast<int>(parse_ll(item, what)));
    return ids;
}

std::string join_ints(const std::vector<int>& ids) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(ids[i]);
    }
    return out;
}

void check_ids(const std::vector<int>& ids, int k, const std::string& what) {
    std::vector<bool> used(static_cast<std::size_t>(k), false);
    for (int id : ids) {
        if (id < 0 || id >= k)
            throw ConfigError(what + ": class id " + std::to_string(id) +
                              " outside 0.." + std::to_string(k - 1));
        if (used[static_cast<std::size_t>(id)])
            throw ConfigError(what + ": duplicate class id " + std::to_string(id));
        used[static_cast<std::size_t>(id)] = true;
    }
}

std::vector<int> complement_ids(const std::vector<int>& ids, int k) {
    std::vector<bool> in(static_cast<std::size_t>(k), false);
    for (int id : ids) in[static_cast<std::size_t>(id)] = true;
    std::vector<int> rest;
    for (int c = 0; c < k; ++c)
        if (!in[static_cast<std::size_t>(c)]) rest.push_back(c);
    return rest;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create directory " + dir.string());
}

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// The resolved-parameter record every command leaves behind.
void write_snapshot(const fs::path& out_dir, const KeyValues& kv) {
    const fs::path path = out_dir / "config.snapshot";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& [key, value] : kv) out << key << '=' << value << '\n';
    if (!out.good()) throw DataError("write failed: " + path.string());
}

// Commands that iterate a dataset refuse manifests with zero image entries
// before any other validation runs.
void require_images(const std::string& manifest_path) {
    const DatasetManifest man =
        parse_manifest_text(read_text_file(manifest_path), manifest_path);
    if (man.pairs.empty()) throw ConfigError("no images in manifest " + manifest_path);
}

// Split resolution shared by train and eval: explicit flags override the
// manifest's seen/unseen marks; giving both flags requires an exact partition.
SplitSpec resolve_split(const DatasetManifest& man,
                        const std::optional<std::string>& seen_flag,
                        const std::optional<std::string>& unseen_flag) {
    const int k = static_cast<int>(man.classes.size());
    SplitSpec split;
    if (seen_flag && unseen_flag) {
        split.seen = parse_id_list(*seen_flag, "--seen");
        split.unseen = parse_id_list(*unseen_flag, "--unseen");
        check_ids(split.seen, k, "--seen");
        check_ids(split.unseen, k, "--unseen");
        for (int s : split.seen)
            for (int u : split.unseen)
                if (s == u)
                    throw ConfigError("--seen and --unseen overlap on class " +
                                      std::to_string(s));
        if (split.seen.size() + split.unseen.size() != static_cast<std::size_t>(k))
            throw ConfigError("--seen and --unseen together must cover every class");
    } else if (seen_flag) {
        split.seen = parse_id_list(*seen_flag, "--seen");
        check_ids(split.seen, k, "--seen");
        split.unseen = complement_ids(split.seen, k);
    } else if (unseen_flag) {
        split.unseen = parse_id_list(*unseen_flag, "--unseen");
        check_ids(split.unseen, k, "--unseen");
        split.seen = complement_ids(split.unseen, k);
    } else {
        split = man.split();
    }
    split.validate(k);
    return split;
}

// Non-background rows of a bank as a K x d matrix.
Matrix text_rows(const ClassifierBank& bank) {
    const int k = static_cast<int>(bank.names.size());
    Matrix rows(k, bank.dim());
    for (int r = 0; r < k; ++r)
        for (int c = 0; c < bank.dim(); ++c) rows.at(r, c) = bank.embeddings.at(r, c);
    return rows;
}

void check_bank_matches(const ClassifierBank& bank, const DatasetManifest& man) {
    if (bank.names != man.class_names())
        throw ConfigError("bank class names do not match the manifest classes");
}

// ---------------------------------------------------------------------------
// gendata

struct GendataArgs {
    std::string out;
    std::uint64_t seed = 0;
    int count = 24;
};

void cmd_gendata(const GendataArgs& a) {
    if (a.count < 1) throw ConfigError("--count must be at least 1");
    const SceneSpec spec = benchmark_scene_spec();
    gen_dataset(spec, a.count, hash_combine(a.seed, "data"), a.out);
    write_snapshot(a.out, {{"command", "gendata"},
                           {"out", a.out},
                           {"seed", std::to_string(a.seed)},
                           {"count", std::to_string(a.count)}});
    std::cout << "wrote " << a.count << " scenes to " << a.out << " (manifest.txt)\n";
}

// ---------------------------------------------------------------------------
// bank

struct BankArgs {
    std::string manifest;
    std::string out;
    std::uint64_t seed = 0;
    int dim = 32;
    bool background = false;
};

void cmd_bank(const BankArgs& a) {
    if (a.dim < 2) throw ConfigError("--dim must be at least 2");
    const DatasetManifest man = load_manifest(a.manifest);
    ToyTextEncoder enc;
    enc.dim = a.dim;
    enc.seed = hash_combine(a.seed, "text");
    const ClassifierBank bank =
        build_bank(man.class_names(), PromptTemplateSet::defaults(), enc,
                   a.background, hash_combine(a.seed, "background"));
    ensure_dir(a.out);
    const fs::path bank_path = fs::path(a.out) / "bank.bin";
    save_bank(bank, bank_path.string());
    write_snapshot(a.out, {{"command", "bank"},
                           {"manifest", a.manifest},
                           {"out", a.out},
                           {"seed", std::to_string(a.seed)},
                           {"dim", std::to_string(a.dim)},
                           {"background", a.background ? "1" : "0"}});
    std::cout << "wrote bank with " << bank.rows() << " rows (dim " << bank.dim()
              << ") to " << bank_path.string() << '\n';
}

// ---------------------------------------------------------------------------
// plant

struct PlantArgs {
    std::string manifest;
    std::string bank;
    std::string out;
    std::uint64_t seed = 0;
};

void cmd_plant(const PlantArgs& a) {
    const DatasetManifest man = load_manifest(a.manifest);
    const ClassifierBank bank = load_bank(a.bank);
    check_bank_matches(bank, man);
    BackboneShape shape;
    shape.channels = {12, 24};  // receptive field 5: thin boundary mixing ring
    shape.d_emb = bank.dim();
    const PlantedEncoder enc = plant_encoder(man.prototypes(), text_rows(bank),
                                             shape, hash_combine(a.seed, "plant"));
    ensure_dir(a.out);
    const fs::path enc_path = fs::path(a.out) / "encoder.bin";
    save_encoder(enc, enc_path.string());
    write_snapshot(a.out, {{"command", "plant"},
                           {"manifest", a.manifest},
                           {"bank", a.bank},
                           {"out", a.out},
                           {"seed", std::to_string(a.seed)}});
    std::cout << "planted encoder over " << man.classes.size() << " prototypes to "
              << enc_path.string() << '\n';
}

// ---------------------------------------------------------------------------
// infer

struct InferArgs {
    std::string manifest;
    std::string encoder;
    std::string bank;
    std::string out;
    double tau = 0.07;
};

std::string numbered(const char* prefix, std::size_t i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%05zu.%s", prefix, i, ext);
    return buf;
}

void cmd_infer(const InferArgs& a) {
    if (a.tau <= 0.0) throw ConfigError("--tau must be positive");
    require_images(a.manifest);
    const LoadedDataset ds = load_dataset(a.manifest);
    const PlantedEncoder enc = load_encoder(a.encoder);
    const ClassifierBank bank = load_bank(a.bank);
    const DenseHead dense = convert_to_dense(enc.head);

    const fs::path labels_dir = fs::path(a.out) / "labelmaps";
    const fs::path conf_dir = fs::path(a.out) / "confidence";
    ensure_dir(labels_dir);
    ensure_dir(conf_dir);
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        const Tensor4& img = ds.images[i];
        const Segmentation seg =
            segment(img, enc.backbone, dense, bank, a.tau, img.h, img.w);
        write_labels(seg.labels, (labels_dir / numbered("pred", i, "pgm")).string());
        // Confidence rendered as grayscale: the chosen-class probability in
        // all three channels.
        Tensor4 vis(1, 3, img.h, img.w);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < img.h; ++y)
                for (int x = 0; x < img.w; ++x)
                    vis.at(0, c, y, x) = seg.confidence.at(0, 0, y, x);
        write_image(vis, (conf_dir / numbered("conf", i, "ppm")).string());
    }
    write_snapshot(a.out, {{"command", "infer"},
                           {"manifest", a.manifest},
                           {"encoder", a.encoder},
                           {"bank", a.bank},
                           {"out", a.out},
                           {"tau", fmt_double(a.tau)}});
    std::cout << "wrote " << ds.images.size()
              << " predictions and confidence maps to " << a.out << '\n';
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string manifest;
    std::string encoder;
    std::string bank;
    std::string out;
    std::optional<std::string> config;
    std::optional<std::uint64_t> seed;
    std::optional<double> tau;
    std::optional<std::string> seen;
    std::optional<std::string> unseen;
    bool annotation_free = false;
};

// Config files share the manifest's key=value shape. Keys written by the
// snapshot for the record only (paths, command) are skipped on read so a
// snapshot is itself a valid --config.
void apply_config_line(TrainConfig& cfg, const std::string& key,
                       const std::string& value, const std::string& where) {
    auto bad = [&](const char* what) {
        return ConfigError(where + ": " + what + std::string(" for key '") + key + "'");
    };
    if (key == "command" || key == "manifest" || key == "encoder" ||
        key == "bank" || key == "out")
        return;
    if (key == "guided_iters")
        cfg.guided_iters = static_cast<int>(parse_ll(value, where));
    else if (key == "self_iters")
        cfg.self_iters = static_cast<int>(parse_ll(value, where));
    else if (key == "lr")
        cfg.lr = parse_double(value, where);
    else if (key == "momentum")
        cfg.momentum = parse_double(value, where);
    else if (key == "batch_size")
        cfg.batch_size = static_cast<int>(parse_ll(value, where));
    else if (key == "seed")
        cfg.seed = parse_u64(value, where);
    else if (key == "tau")
        cfg.tau = parse_double(value, where);
    else if (key == "share_floor")
        cfg.share_floor = parse_double(value, where);
    else if (key == "drift_interval")
        cfg.drift_interval = static_cast<int>(parse_ll(value, where));
    else if (key == "participation_bar")
        cfg.participation_bar = parse_double(value, where);
    else if (key == "share_ema")
        cfg.share_ema = parse_double(value, where);
    else if (key == "probe_count")
        cfg.probe_count = static_cast<int>(parse_ll(value, where));
    else if (key == "probe_interval")
        cfg.probe_interval = static_cast<int>(parse_ll(value, where));
    else if (key == "setting") {
        if (value == "transductive")
            cfg.setting.kind = SettingKind::Transductive;
        else if (value == "annotation_free") {
            cfg.setting.kind = SettingKind::AnnotationFree;
            cfg.setting.seen.clear();
        } else
            throw bad("unknown setting");
    } else if (key == "seen")
        cfg.setting.seen = parse_id_list(value, where);
    else
        throw bad("unknown key");
}

void apply_config_file(TrainConfig& cfg, const std::string& path) {
    const std::string text = read_text_file(path);
    std::stringstream ss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const std::string where = "config " + path + " line " + std::to_string(line_no);
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key=value");
        apply_config_line(cfg, line.substr(0, eq), line.substr(eq + 1), where);
    }
}

KeyValues train_snapshot(const TrainArgs& a, const TrainConfig& cfg) {
    KeyValues kv = {{"command", "train"}, {"manifest", a.manifest},
                    {"encoder", a.encoder}, {"bank", a.bank}, {"out", a.out}};
    kv.emplace_back("guided_iters", std::to_string(cfg.guided_iters));
    kv.emplace_back("self_iters", std::to_string(cfg.self_iters));
    kv.emplace_back("lr", fmt_double(cfg.lr));
    kv.emplace_back("momentum", fmt_double(cfg.momentum));
    kv.emplace_back("batch_size", std::to_string(cfg.batch_size));
    kv.emplace_back("seed", std::to_string(cfg.seed));
    kv.emplace_back("tau", fmt_double(cfg.tau));
    kv.emplace_back("share_floor", fmt_double(cfg.share_floor));
    kv.emplace_back("drift_interval", std::to_string(cfg.drift_interval));
    kv.emplace_back("participation_bar", fmt_double(cfg.participation_bar));
    kv.emplace_back("share_ema", fmt_double(cfg.share_ema));
    kv.emplace_back("probe_count", std::to_string(cfg.probe_count));
    kv.emplace_back("probe_interval", std::to_string(cfg.probe_interval));
    kv.emplace_back("setting", cfg.setting.kind == SettingKind::Transductive
                                   ? "transductive"
                                   : "annotation_free");
    if (cfg.setting.kind == SettingKind::Transductive)
        kv.emplace_back("seen", join_ints(cfg.setting.seen));
    return kv;
}

void cmd_train(const TrainArgs& a) {
    require_images(a.manifest);
    const LoadedDataset ds = load_dataset(a.manifest);
    const PlantedEncoder enc = load_encoder(a.encoder);
    const ClassifierBank bank = load_bank(a.bank);
    check_bank_matches(bank, ds.manifest);
    const int k = static_cast<int>(ds.manifest.classes.size());

    TrainConfig cfg;
    if (a.config) apply_config_file(cfg, *a.config);
    if (a.seed) cfg.seed = *a.seed;
    if (a.tau) cfg.tau = *a.tau;
    if (a.annotation_free) {
        cfg.setting.kind = SettingKind::AnnotationFree;
        cfg.setting.seen.clear();
    }
    if (a.seen || a.unseen) {
        if (a.annotation_free)
            throw ConfigError("--seen/--unseen contradict --annotation-free");
        cfg.setting.kind = SettingKind::Transductive;
        const SplitSpec split = resolve_split(ds.manifest, a.seen, a.unseen);
        cfg.setting.seen = split.seen;
    }
    if (cfg.setting.kind == SettingKind::Transductive && cfg.setting.seen.empty()) {
        const SplitSpec man_split = ds.manifest.split();
        if (man_split.unseen.empty())
            throw ConfigError(
                "transductive setting needs a seen/unseen split: pass --seen or "
                "--unseen, or mark unseen classes in the manifest");
        cfg.setting.seen = man_split.seen;
    }
    cfg.validate(k);

    const FrozenPredictor teacher{enc.backbone, convert_to_dense(enc.head), cfg.tau};
    const TrainResult result = run(cfg, ds.images, ds.labels, teacher, bank);
    for (const std::string& w : result.warnings) std::cerr << "warning: " << w << '\n';

    ensure_dir(a.out);
    save_target_model(result.model, (fs::path(a.out) / "model.bin").string());
    write_train_log_csv(result.log, k, (fs::path(a.out) / "log.csv").string());
    write_snapshot(a.out, train_snapshot(a, cfg));
    std::cout << "guided best " << format_percent(result.guided_best)
              << ", final best " << format_percent(result.final_best) << ", phase "
              << phase_name(result.final_phase) << " (model.bin, log.csv in "
              << a.out << ")\n";
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string manifest;
    std::string pred;
    std::string out;
    std::optional<std::string> seen;
    std::optional<std::string> unseen;
};

void cmd_eval(const EvalArgs& a) {
    require_images(a.manifest);
    const DatasetManifest man = load_manifest(a.manifest);
    const SplitSpec split = resolve_split(man, a.seen, a.unseen);
    const int k = static_cast<int>(man.classes.size());

    std::vector<std::string> pred_paths;
    std::vector<std::string> missing;
    for (std::size_t i = 0; i < man.pairs.size(); ++i) {
        const fs::path p = fs::path(a.pred) / numbered("pred", i, "pgm");
        pred_paths.push_back(p.string());
        if (!fs::exists(p)) missing.push_back(p.string());
    }
    if (!missing.empty()) {
        for (const std::string& p : missing)
            std::cerr << "missing prediction: " << p << '\n';
        throw DataError(std::to_string(missing.size()) + " predictions missing under " +
                        a.pred);
    }

    ConfusionMatrix cm(k);
    for (std::size_t i = 0; i < man.pairs.size(); ++i) {
        const LabelMap gt =
            read_labels((fs::path(man.base_dir) / man.pairs[i].second).string());
        const LabelMap pred = read_labels(pred_paths[i]);
        if (pred.h != gt.h || pred.w != gt.w)
            throw DataError("prediction size mismatch for " + pred_paths[i]);
        accumulate(cm, pred, gt, man.ignore_index);
    }

    const MetricsReport report = compute_report(cm, split);
    ensure_dir(a.out);
    write_report_csv(report, (fs::path(a.out) / "metrics.csv").string());
    write_confusion_csv(cm, (fs::path(a.out) / "cm.csv").string());
    KeyValues kv = {{"command", "eval"}, {"manifest", a.manifest},
                    {"pred", a.pred},    {"out", a.out},
                    {"seen", join_ints(split.seen)}, {"unseen", join_ints(split.unseen)}};
    write_snapshot(a.out, kv);
    std::cout << "miou_seen=" << format_percent(report.miou_seen)
              << " miou_unseen=" << format_percent(report.miou_unseen)
              << " miou=" << format_percent(report.miou_all)
              << " hiou=" << format_percent(report.hiou) << '\n';
}

// ---------------------------------------------------------------------------
// corrupt

struct CorruptArgs {
    std::string manifest;
    std::string encoder;
    std::string bank;
    std::string out;
    std::uint64_t seed = 0;
    double tau = 0.07;
    std::optional<std::string> kinds;
    std::optional<std::string> levels;
};

void cmd_corrupt(const CorruptArgs& a) {
    if (a.tau <= 0.0) throw ConfigError("--tau must be positive");
    std::vector<CorruptionKind> kinds = all_corruption_kinds();
    if (a.kinds) {
        kinds.clear();
        std::stringstream ss(*a.kinds);
        std::string item;
        while (std::getline(ss, item, ','))
            kinds.push_back(corruption_from_name(item));
        if (kinds.empty()) throw ConfigError("--kinds: empty list");
    }
    std::vector<int> levels = {1, 2, 3, 4, 5};
    if (a.levels) {
        levels = parse_id_list(*a.levels, "--levels");
        if (levels.empty()) throw ConfigError("--levels: empty list");
    }

    require_images(a.manifest);
    const LoadedDataset ds = load_dataset(a.manifest);
    const PlantedEncoder enc = load_encoder(a.encoder);
    const ClassifierBank bank = load_bank(a.bank);
    const SweepTable table =
        sweep(ds.images, ds.labels, enc.backbone, convert_to_dense(enc.head), bank,
              a.tau, kinds, levels, hash_combine(a.seed, "corrupt"));

    ensure_dir(a.out);
    write_sweep_csv(table, (fs::path(a.out) / "robustness.csv").string());
    std::vector<std::string> kind_names;
    for (CorruptionKind kind : kinds) kind_names.emplace_back(corruption_name(kind));
    std::string kinds_str;
    for (std::size_t i = 0; i < kind_names.size(); ++i)
        kinds_str += (i ? "," : "") + kind_names[i];
    write_snapshot(a.out, {{"command", "corrupt"},
                           {"manifest", a.manifest},
                           {"encoder", a.encoder},
                           {"bank", a.bank},
                           {"out", a.out},
                           {"seed", std::to_string(a.seed)},
                           {"tau", fmt_double(a.tau)},
                           {"kinds", kinds_str},
                           {"levels", join_ints(table.levels)}});
    std::cout << "clean miou " << format_percent(table.clean_miou) << "; swept "
              << kinds.size() << " kinds x " << table.levels.size()
              << " levels -> robustness.csv\n";
}

// ---------------------------------------------------------------------------
// report

struct ReportArgs {
    std::string out;
    std::vector<std::string> inputs;
};

void cmd_report(const ReportArgs& a) {
    if (a.inputs.empty()) throw ConfigError("report needs at least one metrics file");
    // Keys in first-file order; later files may add new ones at the end.
    std::vector<std::string> keys;
    std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>>
        runs;
    for (const std::string& input : a.inputs) {
        const std::string text = read_text_file(input);
        std::stringstream ss(text);
        std::string line;
        std::vector<std::pair<std::string, std::string>> values;
        int line_no = 0;
        while (std::getline(ss, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            const std::size_t comma = line.find(',');
            if (comma == std::string::npos)
                throw DataError(input + " line " + std::to_string(line_no) +
                                ": expected name,value");
            const std::string key = line.substr(0, comma);
            values.emplace_back(key, line.substr(comma + 1));
            if (std::find(keys.begin(), keys.end(), key) == keys.end())
                keys.push_back(key);
        }
        runs.emplace_back(input, std::move(values));
    }

    ensure_dir(a.out);
    const fs::path path = fs::path(a.out) / "report.csv";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << "run";
    for (const std::string& key : keys) out << ',' << key;
    out << '\n';
    for (const auto& [label, values] : runs) {
        out << label;
        for (const std::string& key : keys) {
            out << ',';
            for (const auto& [k2, v] : values)
                if (k2 == key) {
                    out << v;
                    break;
                }
        }
        out << '\n';
    }
    if (!out.good()) throw DataError("write failed: " + path.string());

    std::string inputs_str;
    for (std::size_t i = 0; i < a.inputs.size(); ++i)
        inputs_str += (i ? "," : "") + a.inputs[i];
    write_snapshot(a.out, {{"command", "report"},
                           {"out", a.out},
                           {"inputs", inputs_str}});
    std::cout << "merged " << a.inputs.size() << " metric files -> " << path.string()
              << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"zero-shot dense prediction toolkit"};
    app.require_subcommand(1);

    GendataArgs gen;
    CLI::App* gen_cmd = app.add_subcommand(
        "gendata", "render the default shape benchmark (6 classes, 2 unseen)");
    gen_cmd->add_option("--out", gen.out, "output dataset directory")->required();
    gen_cmd->add_option("--seed", gen.seed, "master seed");
    gen_cmd->add_option("--count", gen.count, "number of scenes (default 24)");

    BankArgs bank;
    CLI::App* bank_cmd = app.add_subcommand(
        "bank", "build the frozen text classifier bank for a dataset's classes");
    bank_cmd->add_option("--manifest", bank.manifest, "dataset manifest")->required();
    bank_cmd->add_option("--out", bank.out, "output directory for bank.bin")->required();
    bank_cmd->add_option("--seed", bank.seed, "master seed");
    bank_cmd->add_option("--dim", bank.dim, "embedding width (default 32)");
    bank_cmd->add_flag("--background", bank.background,
                       "append a trainable background row");

    PlantArgs plant;
    CLI::App* plant_cmd = app.add_subcommand(
        "plant", "solve a frozen encoder that maps class colors near their text rows");
    plant_cmd->add_option("--manifest", plant.manifest, "dataset manifest")->required();
    plant_cmd->add_option("--bank", plant.bank, "bank.bin with the class rows")
        ->required();
    plant_cmd->add_option("--out", plant.out, "output directory for encoder.bin")
        ->required();
    plant_cmd->add_option("--seed", plant.seed, "master seed");

    InferArgs infer;
    CLI::App* infer_cmd = app.add_subcommand(
        "infer", "zero-shot dense prediction: label maps plus confidence maps");
    infer_cmd->add_option("--manifest", infer.manifest, "dataset manifest")->required();
    infer_cmd->add_option("--encoder", infer.encoder, "encoder.bin")->required();
    infer_cmd->add_option("--bank", infer.bank, "bank.bin")->required();
    infer_cmd->add_option("--out", infer.out, "output run directory")->required();
    infer_cmd->add_option("--tau", infer.tau, "cosine temperature (default 0.07)");

    TrainArgs train;
    std::string train_config, train_seen, train_unseen;
    std::uint64_t train_seed = 0;
    double train_tau = 0.07;
    CLI::App* train_cmd = app.add_subcommand(
        "train", "guided then self-training of a target net under the frozen bank");
    train_cmd->add_option("--manifest", train.manifest, "dataset manifest")->required();
    train_cmd->add_option("--encoder", train.encoder, "frozen encoder.bin")->required();
    train_cmd->add_option("--bank", train.bank, "bank.bin")->required();
    train_cmd->add_option("--out", train.out, "output run directory")->required();
    CLI::Option* train_config_opt =
        train_cmd->add_option("--config", train_config, "key=value config file");
    CLI::Option* train_seed_opt =
        train_cmd->add_option("--seed", train_seed, "master seed (overrides config)");
    CLI::Option* train_tau_opt =
        train_cmd->add_option("--tau", train_tau, "cosine temperature");
    CLI::Option* train_seen_opt =
        train_cmd->add_option("--seen", train_seen, "comma list of seen class ids");
    CLI::Option* train_unseen_opt = train_cmd->add_option(
        "--unseen", train_unseen, "comma list of unseen class ids");
    train_cmd->add_flag("--annotation-free", train.annotation_free,
                        "train purely from the frozen predictor's labels");

    EvalArgs eval;
    std::string eval_seen, eval_unseen;
    CLI::App* eval_cmd = app.add_subcommand(
        "eval", "score predictions against a dataset's labels");
    eval_cmd->add_option("--manifest", eval.manifest, "dataset manifest")->required();
    eval_cmd->add_option("--pred", eval.pred, "directory with pred_*.pgm files")
        ->required();
    eval_cmd->add_option("--out", eval.out, "output run directory")->required();
    CLI::Option* eval_seen_opt =
        eval_cmd->add_option("--seen", eval_seen, "comma list of seen class ids");
    CLI::Option* eval_unseen_opt =
        eval_cmd->add_option("--unseen", eval_unseen, "comma list of unseen class ids");

    CorruptArgs corrupt;
    std::string corrupt_kinds, corrupt_levels;
    CLI::App* corrupt_cmd = app.add_subcommand(
        "corrupt", "robustness sweep of the zero-shot predictor over corruptions");
    corrupt_cmd->add_option("--manifest", corrupt.manifest, "dataset manifest")
        ->required();
    corrupt_cmd->add_option("--encoder", corrupt.encoder, "encoder.bin")->required();
    corrupt_cmd->add_option("--bank", corrupt.bank, "bank.bin")->required();
    corrupt_cmd->add_option("--out", corrupt.out, "output run directory")->required();
    corrupt_cmd->add_option("--seed", corrupt.seed, "master seed");
    corrupt_cmd->add_option("--tau", corrupt.tau, "cosine temperature");
    CLI::Option* corrupt_kinds_opt = corrupt_cmd->add_option(
        "--kinds", corrupt_kinds, "comma list of corruption names (default: all)");
    CLI::Option* corrupt_levels_opt = corrupt_cmd->add_option(
        "--levels", corrupt_levels, "comma list of levels (default: 1,2,3,4,5)");

    ReportArgs report;
    CLI::App* report_cmd = app.add_subcommand(
        "report", "merge metrics.csv files into one comparison table");
    report_cmd->add_option("--out", report.out, "output run directory")->required();
    report_cmd->add_option("inputs", report.inputs, "metrics.csv files to merge");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    }

    try {
        if (gen_cmd->parsed()) {
            cmd_gendata(gen);
        } else if (bank_cmd->parsed()) {
            cmd_bank(bank);
        } else if (plant_cmd->parsed()) {
            cmd_plant(plant);
        } else if (infer_cmd->parsed()) {
            cmd_infer(infer);
        } else if (train_cmd->parsed()) {
            if (train_config_opt->count()) train.config = train_config;
            if (train_seed_opt->count()) train.seed = train_seed;
            if (train_tau_opt->count()) train.tau = train_tau;
            if (train_seen_opt->count()) train.seen = train_seen;
            if (train_unseen_opt->count()) train.unseen = train_unseen;
            cmd_train(train);
        } else if (eval_cmd->parsed()) {
            if (eval_seen_opt->count()) eval.seen = eval_seen;
            if (eval_unseen_opt->count()) eval.unseen = eval_unseen;
            cmd_eval(eval);
        } else if (corrupt_cmd->parsed()) {
            if (corrupt_kinds_opt->count()) corrupt.kinds = corrupt_kinds;
            if (corrupt_levels_opt->count()) corrupt.levels = corrupt_levels;
            cmd_corrupt(corrupt);
        } else if (report_cmd->parsed()) {
            cmd_report(report);
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const ArgumentError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
