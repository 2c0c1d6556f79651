#include "dpe/report.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "dpe/errors.hpp"
#include "dpe/seg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dpe {

namespace {

// ---- strict JSON access -------------------------------------------------

void check_keys(const json& j, const std::string& path,
                const std::set<std::string>& allowed, std::vector<std::string>& errs) {
    if (!j.is_object()) {
        errs.push_back(path + ": expected an object");
        return;
    }
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            errs.push_back(path + ": unknown key '" + it.key() + "'");
}

template <typename T>
void get_to(const json& j, const std::string& path, const std::string& key, T& out,
            std::vector<std::string>& errs, bool required = false) {
    if (!j.is_object() || !j.contains(key)) {
        if (required) errs.push_back(path + "." + key + ": required key missing");
        return;
    }
    try {
        j.at(key).get_to(out);
    } catch (const json::exception&) {
        errs.push_back(path + "." + key + ": wrong type");
    }
}

void require_file(const std::string& p, const std::string& what,
                  std::vector<std::string>& errs) {
    if (p.empty())
        errs.push_back(what + ": required path missing");
    else if (!fs::exists(p))
        errs.push_back(what + ": no such file or directory: " + p);
}

// ---- deterministic number formatting -------------------------------------

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(12);
    os << v;
    return os.str();
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
    std::vector<std::string> errs;
    ExperimentConfig cfg;

    check_keys(j, "config",
               {"task", "dataset", "model", "schedule", "train", "acquisition",
                "class_weights", "seeds", "output_dir", "full_supervision"},
               errs);
    get_to(j, "config", "task", cfg.task, errs);
    if (cfg.task != "classify" && cfg.task != "segment")
        errs.push_back("config.task: must be 'classify' or 'segment'");

    if (j.is_object() && j.contains("dataset")) {
        const json& d = j.at("dataset");
        check_keys(d, "dataset",
                   {"kind", "classes", "count", "val_count", "dim", "height", "width",
                    "radius", "spread", "rare_fraction", "data_seed", "images", "labels",
                    "val_images", "val_labels", "paths", "val_paths", "dir", "val_dir"},
                   errs);
        DatasetSpec& ds = cfg.dataset;
        get_to(d, "dataset", "kind", ds.kind, errs, true);
        get_to(d, "dataset", "classes", ds.classes, errs);
        get_to(d, "dataset", "count", ds.count, errs);
        get_to(d, "dataset", "val_count", ds.val_count, errs);
        get_to(d, "dataset", "dim", ds.dim, errs);
        get_to(d, "dataset", "height", ds.height, errs);
        get_to(d, "dataset", "width", ds.width, errs);
        get_to(d, "dataset", "radius", ds.radius, errs);
        get_to(d, "dataset", "spread", ds.spread, errs);
        get_to(d, "dataset", "rare_fraction", ds.rare_fraction, errs);
        get_to(d, "dataset", "data_seed", ds.data_seed, errs);
        get_to(d, "dataset", "images", ds.images, errs);
        get_to(d, "dataset", "labels", ds.labels, errs);
        get_to(d, "dataset", "val_images", ds.val_images, errs);
        get_to(d, "dataset", "val_labels", ds.val_labels, errs);
        get_to(d, "dataset", "paths", ds.paths, errs);
        get_to(d, "dataset", "val_paths", ds.val_paths, errs);
        get_to(d, "dataset", "dir", ds.dir, errs);
        get_to(d, "dataset", "val_dir", ds.val_dir, errs);

        if (ds.kind == "idx") {
            require_file(ds.images, "dataset.images", errs);
            require_file(ds.labels, "dataset.labels", errs);
            require_file(ds.val_images, "dataset.val_images", errs);
            require_file(ds.val_labels, "dataset.val_labels", errs);
        } else if (ds.kind == "cifar") {
            if (ds.paths.empty()) errs.push_back("dataset.paths: required for kind cifar");
            for (const auto& p : ds.paths) require_file(p, "dataset.paths", errs);
            for (const auto& p : ds.val_paths) require_file(p, "dataset.val_paths", errs);
        } else if (ds.kind == "seg_dir") {
            require_file(ds.dir, "dataset.dir", errs);
            require_file(ds.val_dir, "dataset.val_dir", errs);
        } else if (ds.kind != "blobs" && ds.kind != "shapes") {
            errs.push_back("dataset.kind: unknown kind '" + ds.kind + "'");
        }
    } else {
        errs.push_back("config.dataset: required key missing");
    }

    if (j.is_object() && j.contains("model")) {
        const json& m = j.at("model");
        check_keys(m, "model",
                   {"ensemble_size", "beta", "l2", "arch", "hidden", "width",
                    "head_hidden", "lambda"},
                   errs);
        get_to(m, "model", "ensemble_size", cfg.model.ensemble_size, errs);
        get_to(m, "model", "beta", cfg.model.beta, errs);
        get_to(m, "model", "l2", cfg.model.l2, errs);
        get_to(m, "model", "arch", cfg.model.arch, errs);
        get_to(m, "model", "hidden", cfg.model.hidden, errs);
        get_to(m, "model", "width", cfg.model.width, errs);
        get_to(m, "model", "head_hidden", cfg.model.head_hidden, errs);
        get_to(m, "model", "lambda", cfg.model.lambda, errs);
        if (cfg.model.arch != "mlp" && cfg.model.arch != "cnn")
            errs.push_back("model.arch: must be 'mlp' or 'cnn'");
    }

    if (j.is_object() && j.contains("schedule")) {
        const json& s = j.at("schedule");
        check_keys(s, "schedule", {"kind", "b0", "rounds", "budget"}, errs);
        std::string kind = "linear";
        get_to(s, "schedule", "kind", kind, errs);
        if (kind == "linear")
            cfg.schedule.kind = GrowthSchedule::Kind::Linear;
        else if (kind == "exponential")
            cfg.schedule.kind = GrowthSchedule::Kind::Exponential;
        else
            errs.push_back("schedule.kind: must be 'linear' or 'exponential'");
        get_to(s, "schedule", "b0", cfg.schedule.b0, errs, true);
        get_to(s, "schedule", "rounds", cfg.schedule.rounds, errs, true);
        get_to(s, "schedule", "budget", cfg.schedule.budget, errs, true);
        try {
            schedule_batches(cfg.schedule);
        } catch (const ConfigError& e) {
            errs.push_back(std::string("schedule: ") + e.what());
        }
    } else if (!j.is_object() || !j.value("full_supervision", false)) {
        errs.push_back("config.schedule: required key missing");
    }

    if (j.is_object() && j.contains("train")) {
        const json& t = j.at("train");
        check_keys(t, "train",
                   {"lr0", "momentum", "batch_size", "patience", "max_epochs",
                    "lr_drop", "threads", "augment"},
                   errs);
        get_to(t, "train", "lr0", cfg.train.lr0, errs);
        get_to(t, "train", "momentum", cfg.train.momentum, errs);
        get_to(t, "train", "batch_size", cfg.train.batch_size, errs);
        get_to(t, "train", "patience", cfg.train.patience, errs);
        get_to(t, "train", "max_epochs", cfg.train.max_epochs, errs);
        get_to(t, "train", "lr_drop", cfg.train.lr_drop, errs);
        get_to(t, "train", "threads", cfg.train.threads, errs);
        get_to(t, "train", "augment", cfg.train.augment, errs);
    }

    get_to(j, "config", "acquisition", cfg.acquisition, errs);
    {
        const auto names = acquisition_names();
        if (std::find(names.begin(), names.end(), cfg.acquisition) == names.end())
            errs.push_back("config.acquisition: unknown name '" + cfg.acquisition + "'");
    }
    get_to(j, "config", "class_weights", cfg.class_weights, errs);
    if (cfg.acquisition == "var_w" && cfg.class_weights.empty())
        errs.push_back("config.class_weights: required for acquisition var_w");
    get_to(j, "config", "seeds", cfg.seeds, errs, true);
    if (cfg.seeds.empty()) errs.push_back("config.seeds: must be nonempty");
    get_to(j, "config", "output_dir", cfg.output_dir, errs);
    get_to(j, "config", "full_supervision", cfg.full_supervision, errs);

    if (!errs.empty()) {
        std::string msg = "invalid config (" + std::to_string(errs.size()) + " problems):";
        for (const std::string& e : errs) msg += "\n  - " + e;
        throw ConfigError(msg);
    }
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    return parse_config(j);
}

nlohmann::json canonical_json(const ExperimentConfig& cfg) {
    json j;
    j["task"] = cfg.task;
    const DatasetSpec& d = cfg.dataset;
    j["dataset"] = {{"kind", d.kind},       {"classes", d.classes},
                    {"count", d.count},     {"val_count", d.val_count},
                    {"dim", d.dim},         {"height", d.height},
                    {"width", d.width},     {"radius", d.radius},
                    {"spread", d.spread},   {"rare_fraction", d.rare_fraction},
                    {"data_seed", d.data_seed}, {"images", d.images},
                    {"labels", d.labels},   {"val_images", d.val_images},
                    {"val_labels", d.val_labels}, {"paths", d.paths},
                    {"val_paths", d.val_paths},   {"dir", d.dir},
                    {"val_dir", d.val_dir}};
    const ModelSpec& m = cfg.model;
    j["model"] = {{"ensemble_size", m.ensemble_size}, {"beta", m.beta},
                  {"l2", m.l2},         {"arch", m.arch},
                  {"hidden", m.hidden}, {"width", m.width},
                  {"head_hidden", m.head_hidden}, {"lambda", m.lambda}};
    j["schedule"] = {
        {"kind", cfg.schedule.kind == GrowthSchedule::Kind::Linear ? "linear"
                                                                   : "exponential"},
        {"b0", cfg.schedule.b0},
        {"rounds", cfg.schedule.rounds},
        {"budget", cfg.schedule.budget}};
    const TrainConfig& t = cfg.train;
    j["train"] = {{"lr0", t.lr0},           {"momentum", t.momentum},
                  {"batch_size", t.batch_size}, {"patience", t.patience},
                  {"max_epochs", t.max_epochs}, {"lr_drop", t.lr_drop},
                  {"threads", t.threads},   {"augment", t.augment}};
    j["acquisition"] = cfg.acquisition;
    j["class_weights"] = cfg.class_weights;
    j["full_supervision"] = cfg.full_supervision;
    // output_dir and seeds are deliberately excluded: moving the output or
    // adding seeds must not invalidate existing records
    return j;
}

std::string config_hash(const ExperimentConfig& cfg) {
    const std::string s = canonical_json(cfg).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

void save_record(const RunRecord& rec, const std::string& path) {
    json j;
    j["method"] = rec.method;
    j["seed"] = rec.seed;
    j["val_size"] = rec.val_size;
    j["config_hash"] = rec.hash;
    j["rounds"] = json::array();
    for (const RoundRow& r : rec.rounds) {
        json row = {{"round", r.round},
                    {"labeled_count", r.labeled_count},
                    {"val_metric", r.metric},
                    {"train_epochs", r.train_epochs},
                    {"seconds", r.seconds}};
        if (!r.per_class.empty()) {
            json pc = json::array();
            for (double v : r.per_class)
                pc.push_back(std::isnan(v) ? json(nullptr) : json(v));
            row["per_class_iou"] = pc;
        }
        j["rounds"].push_back(row);
    }
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write record: " + path);
    out << j.dump(2) << "\n";
}

RunRecord load_record(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open record: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError("record is not valid JSON: " + path + ": " + e.what());
    }
    RunRecord rec;
    try {
        rec.method = j.at("method").get<std::string>();
        rec.seed = j.at("seed").get<std::uint64_t>();
        rec.val_size = j.at("val_size").get<std::size_t>();
        rec.hash = j.at("config_hash").get<std::string>();
        for (const json& row : j.at("rounds")) {
            RoundRow r;
            r.round = row.at("round").get<int>();
            r.labeled_count = row.at("labeled_count").get<int>();
            r.metric = row.at("val_metric").get<double>();
            r.train_epochs = row.at("train_epochs").get<int>();
            r.seconds = row.at("seconds").get<double>();
            if (row.contains("per_class_iou"))
                for (const json& v : row.at("per_class_iou"))
                    r.per_class.push_back(v.is_null() ? std::nan("") : v.get<double>());
            rec.rounds.push_back(r);
        }
    } catch (const json::exception& e) {
        throw FormatError("malformed record " + path + ": " + e.what());
    }
    return rec;
}

namespace {

struct BuiltData {
    Dataset pool, val;
};

BuiltData build_datasets(const DatasetSpec& d) {
    BuiltData b;
    if (d.kind == "blobs") {
        b.pool = synth_blobs(d.classes, d.count, d.dim, d.data_seed, d.radius, d.spread);
        b.val = synth_blobs(d.classes, d.val_count, d.dim, derive_seed(d.data_seed, 0x7A1ULL),
                            d.radius, d.spread);
    } else if (d.kind == "shapes") {
        b.pool = synth_shapes_seg(d.count, d.height, d.width, d.data_seed, d.rare_fraction);
        b.val = synth_shapes_seg(d.val_count, d.height, d.width,
                                 derive_seed(d.data_seed, 0x7A1ULL), d.rare_fraction);
    } else if (d.kind == "idx") {
        b.pool = load_idx(d.images, d.labels);
        b.val = load_idx(d.val_images, d.val_labels);
    } else if (d.kind == "cifar") {
        b.pool = load_cifar_binary(d.paths);
        b.val = load_cifar_binary(d.val_paths);
    } else if (d.kind == "seg_dir") {
        b.pool = load_seg_pairs(d.dir, d.classes);
        b.val = load_seg_pairs(d.val_dir, d.classes);
    } else {
        throw ConfigError("unknown dataset kind: " + d.kind);
    }
    const auto stats = channel_statistics(b.pool);
    b.pool = normalize_with(b.pool, stats);
    b.val = normalize_with(b.val, stats);
    return b;
}

std::vector<LayerSpec> build_arch(const ExperimentConfig& cfg, const Dataset& pool) {
    const Tensor& x = pool.inputs.at(0);
    if (cfg.model.arch == "mlp") {
        if (x.ndim() != 1)
            throw ConfigError("mlp architecture needs vector inputs");
        return make_mlp(int(x.dim(0)), cfg.model.hidden, pool.num_classes);
    }
    if (x.ndim() != 3)
        throw ConfigError("cnn architecture needs (C,H,W) image inputs");
    return make_residual_cnn(int(x.dim(0)), pool.num_classes, cfg.model.width);
}

void write_text(const std::string& path, const std::string& body) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write: " + path);
    out << body;
}

}  // namespace

std::vector<std::string> run(const ExperimentConfig& cfg) {
    fs::create_directories(cfg.output_dir);
    const std::string hash = config_hash(cfg);
    const BuiltData data = build_datasets(cfg.dataset);
    const ClassWeights weights{cfg.class_weights};
    const ClassWeights* wptr = cfg.class_weights.empty() ? nullptr : &weights;

    std::vector<std::string> written;
    std::vector<RunRecord> records;
    for (std::uint64_t seed : cfg.seeds) {
        const std::string stem =
            cfg.acquisition + "_seed" + std::to_string(seed);
        const std::string record_path =
            (fs::path(cfg.output_dir) / ("record_" + stem + ".json")).string();
        if (fs::exists(record_path)) {
            const RunRecord prev = load_record(record_path);
            if (prev.hash != hash)
                throw ConfigError("config hash mismatch for existing record " +
                                  record_path + " (have " + prev.hash + ", config is " +
                                  hash + "); refusing to mix experiments");
        }

        RunRecord rec;
        rec.method = cfg.acquisition;
        rec.seed = seed;
        rec.val_size = data.val.size();
        rec.hash = hash;
        std::ostringstream qcsv;

        if (cfg.task == "classify") {
            const auto arch = build_arch(cfg, data.pool);
            const ModelSpec& m = cfg.model;
            DpeFactory factory = [&](std::uint64_t s) {
                return make_dpe(arch, m.ensemble_size, m.beta, s, m.l2);
            };
            if (cfg.full_supervision) {
                Dpe dpe = factory(derive_seed(seed, 0xF5ULL));
                TrainConfig tc = cfg.train;
                tc.seed = derive_seed(seed, 0xF6ULL);
                const TrainResult tr = train(dpe, data.pool, data.val, tc);
                rec.rounds.push_back({0, int(data.pool.size()), tr.best_val_accuracy,
                                      {}, tr.epochs_run, 0.0});
            } else {
                const ExperimentRecord er =
                    run_active(data.pool, data.val, cfg.schedule, cfg.acquisition,
                               factory, cfg.train, seed, wptr);
                for (const RoundRecord& r : er.rounds)
                    rec.rounds.push_back({r.round, r.labeled_count, r.val_metric, {},
                                          r.train_epochs, r.seconds});
                qcsv << "round,unit_id,score\n";
                for (const QueryEvent& q : er.query_log)
                    qcsv << q.round << "," << q.unit_id << "," << fmt(q.score) << "\n";
            }
        } else {
            const ModelSpec& m = cfg.model;
            const int in_ch = int(data.pool.inputs.at(0).dim(0));
            SegDpeFactory factory = [&](std::uint64_t s) {
                return make_seg_dpe(in_ch, m.width, m.head_hidden, data.pool.num_classes,
                                    m.ensemble_size, m.beta, m.lambda, s);
            };
            if (cfg.full_supervision) {
                SegDpe sm = factory(derive_seed(seed, 0xF5ULL));
                TrainConfig tc = cfg.train;
                tc.seed = derive_seed(seed, 0xF6ULL);
                const std::size_t px = data.pool.inputs[0].dim(1) * data.pool.inputs[0].dim(2);
                std::vector<std::vector<std::uint8_t>> all(
                    data.pool.size(), std::vector<std::uint8_t>(px, 1));
                const SegTrainResult tr = seg_train(sm, data.pool, all, data.val, tc);
                const IouResult iou = evaluate_miou(sm, data.val, tc.batch_size);
                rec.rounds.push_back({0, int(data.pool.size()), iou.mean_iou,
                                      iou.per_class, tr.epochs_run, 0.0});
            } else {
                const SegExperimentRecord er =
                    run_active_seg(data.pool, data.val, cfg.schedule, cfg.acquisition,
                                   factory, cfg.train, seed, wptr);
                for (const SegRoundRecord& r : er.rounds)
                    rec.rounds.push_back({r.round, r.labeled_crops, r.val_miou,
                                          r.per_class_iou, r.train_epochs, r.seconds});
                qcsv << "round,image_id,crop_col,crop_row,score\n";
                for (const SegQueryEvent& q : er.query_log)
                    qcsv << q.round << "," << q.image_id << "," << q.crop_col << ","
                         << q.crop_row << "," << fmt(q.score) << "\n";
            }
        }

        save_record(rec, record_path);
        written.push_back(record_path);
        const std::string qstr = qcsv.str();
        if (!qstr.empty())
            write_text((fs::path(cfg.output_dir) / ("queries_" + stem + ".csv")).string(),
                       qstr);
        records.push_back(std::move(rec));
    }

    write_text((fs::path(cfg.output_dir) / "curves.csv").string(), curves_csv(records));
    return written;
}

double two_proportion_z(double p1, double p2, std::size_t n) {
    const double phat = 0.5 * (p1 + p2);
    const double var = phat * (1.0 - phat) * (2.0 / double(n));
    if (var <= 0.0) return p1 == p2 ? 0.0 : (p1 > p2 ? 1e9 : -1e9);
    return (p1 - p2) / std::sqrt(var);
}

double two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

CompareResult compare(const std::vector<RunRecord>& a, const std::vector<RunRecord>& b) {
    if (a.empty() || b.empty()) throw ConfigError("compare: empty record set");
    CompareResult r;
    r.method_a = a[0].method;
    r.method_b = b[0].method;

    // matched schedules: every record shares one labeled_count sequence
    std::vector<int> counts;
    for (const RoundRow& row : a[0].rounds) counts.push_back(row.labeled_count);
    auto check = [&](const RunRecord& rec) {
        if (rec.rounds.size() != counts.size())
            throw ConfigError("compare: mismatched schedules (round counts differ)");
        for (std::size_t i = 0; i < counts.size(); ++i)
            if (rec.rounds[i].labeled_count != counts[i])
                throw ConfigError("compare: mismatched schedules (labeled counts differ)");
    };
    for (const RunRecord& rec : a) check(rec);
    for (const RunRecord& rec : b) check(rec);

    auto stats = [](const std::vector<const RunRecord*>& recs, std::size_t round) {
        double mean = 0.0;
        for (const RunRecord* rec : recs) mean += rec->rounds[round].metric;
        mean /= double(recs.size());
        double var = 0.0;
        for (const RunRecord* rec : recs) {
            const double d = rec->rounds[round].metric - mean;
            var += d * d;
        }
        var = recs.size() > 1 ? var / double(recs.size() - 1) : 0.0;
        return std::make_pair(mean, std::sqrt(var));
    };
    std::vector<const RunRecord*> pa, pb;
    for (const RunRecord& rec : a) pa.push_back(&rec);
    for (const RunRecord& rec : b) pb.push_back(&rec);
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const auto [ma, sa] = stats(pa, i);
        const auto [mb, sb] = stats(pb, i);
        r.per_round.push_back({counts[i], ma, sa, mb, sb});
    }
    const std::size_t last = counts.size() - 1;
    r.final_mean_a = r.per_round[last].mean_a;
    r.final_mean_b = r.per_round[last].mean_b;

    const std::size_t n_val = a[0].val_size;
    r.two_prop_z = two_proportion_z(r.final_mean_a, r.final_mean_b, n_val);
    r.two_prop_p = two_sided_p(r.two_prop_z);

    // pair by seed
    std::vector<double> diffs;
    for (const RunRecord& ra : a)
        for (const RunRecord& rb : b)
            if (ra.seed == rb.seed)
                diffs.push_back(ra.rounds[last].metric - rb.rounds[last].metric);
    if (diffs.size() < 2) {
        r.significance_available = false;
        r.message = "significance declined: insufficient replicates (" +
                    std::to_string(diffs.size()) + " paired seeds, need >= 2)";
        return r;
    }
    double mean_d = 0.0;
    for (double d : diffs) mean_d += d;
    mean_d /= double(diffs.size());
    double var_d = 0.0;
    for (double d : diffs) var_d += (d - mean_d) * (d - mean_d);
    var_d /= double(diffs.size() - 1);
    const double se = std::sqrt(var_d / double(diffs.size()));
    if (se == 0.0)
        r.paired_z = mean_d == 0.0 ? 0.0 : (mean_d > 0.0 ? 1e9 : -1e9);
    else
        r.paired_z = mean_d / se;
    r.paired_p = two_sided_p(r.paired_z);
    r.significance_available = true;
    return r;
}

std::string format_compare(const CompareResult& r) {
    std::ostringstream os;
    os << "comparison: " << r.method_a << " vs " << r.method_b << "\n";
    os << "labeled_count," << r.method_a << "_mean," << r.method_a << "_std,"
       << r.method_b << "_mean," << r.method_b << "_std\n";
    for (const MethodRoundStats& s : r.per_round)
        os << s.labeled_count << "," << fmt(s.mean_a) << "," << fmt(s.std_a) << ","
           << fmt(s.mean_b) << "," << fmt(s.std_b) << "\n";
    os << "final: " << fmt(r.final_mean_a) << " vs " << fmt(r.final_mean_b) << "\n";
    os << "two_proportion_z=" << fmt(r.two_prop_z) << " p=" << fmt(r.two_prop_p) << "\n";
    if (r.significance_available)
        os << "paired_z=" << fmt(r.paired_z) << " p=" << fmt(r.paired_p) << "\n";
    else
        os << r.message << "\n";
    return os.str();
}

std::string curves_csv(const std::vector<RunRecord>& records) {
    std::ostringstream os;
    os << "method,seed,labeled_count,metric\n";
    for (const RunRecord& rec : records)
        for (const RoundRow& row : rec.rounds)
            os << rec.method << "," << rec.seed << "," << row.labeled_count << ","
               << fmt(row.metric) << "\n";
    return os.str();
}

}  // namespace dpe
