// Command-line front end: dataset synthesis, active-learning runs, training,
// scoring, evaluation and report generation.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dpe/active_loop.hpp"
#include "dpe/data_io.hpp"
#include "dpe/ensemble.hpp"
#include "dpe/errors.hpp"
#include "dpe/report.hpp"
#include "dpe/seg.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonOpts {
    std::string config;
    std::string out = "out";
    std::int64_t seed = -1;
    int threads = -1;
    std::string acquisition;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool config_required) {
    auto* c = cmd->add_option("--config", o.config, "experiment config (JSON)");
    if (config_required) c->required();
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--seed", o.seed, "override: run only this seed");
    cmd->add_option("--threads", o.threads, "override: worker threads (0 = deterministic)");
    cmd->add_option("--acquisition", o.acquisition, "override: acquisition function");
}

dpe::ExperimentConfig load_with_overrides(const CommonOpts& o) {
    dpe::ExperimentConfig cfg = dpe::load_config(o.config);
    if (o.seed >= 0) cfg.seeds = {std::uint64_t(o.seed)};
    if (o.threads >= 0) cfg.train.threads = o.threads;
    if (!o.acquisition.empty()) cfg.acquisition = o.acquisition;
    if (!o.out.empty()) cfg.output_dir = o.out;
    return cfg;
}

dpe::Dpe train_full(const dpe::ExperimentConfig& cfg, std::vector<dpe::LayerSpec>& arch_out) {
    if (cfg.task != "classify")
        throw dpe::UsageError("train/score/eval support classification configs only");
    dpe::Dataset pool, val;
    dpe::DatasetSpec d = cfg.dataset;
    if (d.kind == "blobs") {
        pool = dpe::synth_blobs(d.classes, d.count, d.dim, d.data_seed, d.radius, d.spread);
        val = dpe::synth_blobs(d.classes, d.val_count, d.dim,
                               dpe::derive_seed(d.data_seed, 0x7A1ULL), d.radius, d.spread);
    } else if (d.kind == "idx") {
        pool = dpe::load_idx(d.images, d.labels);
        val = dpe::load_idx(d.val_images, d.val_labels);
    } else if (d.kind == "cifar") {
        pool = dpe::load_cifar_binary(d.paths);
        val = dpe::load_cifar_binary(d.val_paths);
    } else {
        throw dpe::UsageError("unsupported dataset kind for this subcommand: " + d.kind);
    }
    const auto stats = dpe::channel_statistics(pool);
    pool = dpe::normalize_with(pool, stats);
    val = dpe::normalize_with(val, stats);

    const dpe::Tensor& x = pool.inputs.at(0);
    if (cfg.model.arch == "mlp")
        arch_out = dpe::make_mlp(int(x.dim(0)), cfg.model.hidden, pool.num_classes);
    else
        arch_out = dpe::make_residual_cnn(int(x.dim(0)), pool.num_classes, cfg.model.width);

    dpe::Dpe dpe_model = dpe::make_dpe(arch_out, cfg.model.ensemble_size, cfg.model.beta,
                                       dpe::derive_seed(cfg.seeds.at(0), 0xF5ULL),
                                       cfg.model.l2);
    dpe::TrainConfig tc = cfg.train;
    tc.seed = dpe::derive_seed(cfg.seeds.at(0), 0xF6ULL);
    const dpe::TrainResult tr = dpe::train(dpe_model, pool, val, tc);
    std::cout << "trained " << tr.epochs_run << " epochs, best val accuracy "
              << tr.best_val_accuracy << " (epoch " << tr.best_epoch << ")\n";
    return dpe_model;
}

std::vector<dpe::RunRecord> load_records(const std::vector<std::string>& paths) {
    std::vector<dpe::RunRecord> recs;
    for (const std::string& p : paths) recs.push_back(dpe::load_record(p));
    return recs;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"deep probabilistic ensemble active-learning toolkit"};
    app.require_subcommand(1);

    // synth -----------------------------------------------------------------
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    CommonOpts so;
    add_common(synth, so, false);
    std::string synth_kind = "shapes";
    int synth_count = 100, synth_classes = 4, synth_dim = 2, synth_h = 24, synth_w = 32;
    synth->add_option("--kind", synth_kind, "blobs or shapes");
    synth->add_option("--count", synth_count, "number of samples");
    synth->add_option("--classes", synth_classes, "number of classes (blobs)");
    synth->add_option("--dim", synth_dim, "feature dimension (blobs)");
    synth->add_option("--height", synth_h, "image height (shapes)");
    synth->add_option("--width", synth_w, "image width (shapes)");

    // active ----------------------------------------------------------------
    auto* active = app.add_subcommand("active", "run active-learning experiments");
    CommonOpts ao;
    add_common(active, ao, true);

    // train -----------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "train on the full pool, save a checkpoint");
    CommonOpts to;
    add_common(train_cmd, to, true);

    // score -----------------------------------------------------------------
    auto* score = app.add_subcommand("score", "score the pool with a checkpoint");
    CommonOpts sco;
    add_common(score, sco, true);
    std::string score_model;
    score->add_option("--model", score_model, "checkpoint path")->required();

    // eval ------------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the validation set");
    CommonOpts eo;
    add_common(eval_cmd, eo, true);
    std::string eval_model;
    eval_cmd->add_option("--model", eval_model, "checkpoint path")->required();

    // compare ---------------------------------------------------------------
    auto* cmp = app.add_subcommand("compare", "significance tests between two record sets");
    CommonOpts co;
    add_common(cmp, co, false);
    std::vector<std::string> cmp_a, cmp_b;
    cmp->add_option("--a", cmp_a, "record files for method A")->required()->expected(-1);
    cmp->add_option("--b", cmp_b, "record files for method B")->required()->expected(-1);

    // curves ----------------------------------------------------------------
    auto* curves_cmd = app.add_subcommand("curves", "emit learning-curve CSV from records");
    CommonOpts cu;
    add_common(curves_cmd, cu, false);
    std::vector<std::string> curve_files;
    curves_cmd->add_option("--records", curve_files, "record files")->required()->expected(-1);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) {
            const std::uint64_t seed = so.seed >= 0 ? std::uint64_t(so.seed) : 1;
            fs::create_directories(so.out);
            if (synth_kind == "shapes") {
                const dpe::Dataset ds =
                    dpe::synth_shapes_seg(synth_count, synth_h, synth_w, seed);
                for (int i = 0; i < synth_count; ++i) {
                    char name[32];
                    std::snprintf(name, sizeof(name), "img%05d", i);
                    dpe::write_ppm((fs::path(so.out) / (std::string(name) + ".ppm")).string(),
                                   ds.inputs[i]);
                    dpe::write_pgm((fs::path(so.out) / (std::string(name) + ".pgm")).string(),
                                   ds.masks[i], synth_h, synth_w);
                }
                std::cout << "wrote " << synth_count << " image/mask pairs to " << so.out
                          << "\n";
            } else if (synth_kind == "blobs") {
                const dpe::Dataset ds =
                    dpe::synth_blobs(synth_classes, synth_count, synth_dim, seed);
                const std::string path = (fs::path(so.out) / "blobs.csv").string();
                std::ofstream f(path);
                for (int j = 0; j < synth_dim; ++j) f << "x" << j << ",";
                f << "label\n";
                for (int i = 0; i < synth_count; ++i) {
                    for (int j = 0; j < synth_dim; ++j) f << ds.inputs[i][j] << ",";
                    f << ds.labels[i] << "\n";
                }
                std::cout << "wrote " << path << "\n";
            } else {
                throw dpe::UsageError("synth --kind must be blobs or shapes");
            }
        } else if (*active) {
            const dpe::ExperimentConfig cfg = load_with_overrides(ao);
            const std::vector<std::string> files = dpe::run(cfg);
            for (const std::string& f : files) std::cout << f << "\n";
        } else if (*train_cmd) {
            const dpe::ExperimentConfig cfg = load_with_overrides(to);
            std::vector<dpe::LayerSpec> arch;
            const dpe::Dpe model = train_full(cfg, arch);
            fs::create_directories(to.out);
            const std::string path = (fs::path(to.out) / "model.dpe1").string();
            dpe::save(model, path);
            std::cout << "saved " << path << "\n";
        } else if (*score) {
            const dpe::ExperimentConfig cfg = load_with_overrides(sco);
            dpe::Dataset pool;
            std::vector<dpe::LayerSpec> arch;
            {
                dpe::DatasetSpec d = cfg.dataset;
                if (d.kind == "blobs")
                    pool = dpe::synth_blobs(d.classes, d.count, d.dim, d.data_seed,
                                            d.radius, d.spread);
                else if (d.kind == "idx")
                    pool = dpe::load_idx(d.images, d.labels);
                else if (d.kind == "cifar")
                    pool = dpe::load_cifar_binary(d.paths);
                else
                    throw dpe::UsageError("unsupported dataset kind for score: " + d.kind);
                pool = dpe::normalize(pool);
                const dpe::Tensor& x = pool.inputs.at(0);
                arch = cfg.model.arch == "mlp"
                           ? dpe::make_mlp(int(x.dim(0)), cfg.model.hidden, pool.num_classes)
                           : dpe::make_residual_cnn(int(x.dim(0)), pool.num_classes,
                                                    cfg.model.width);
            }
            const dpe::Dpe model = dpe::load(score_model, arch);
            const dpe::ClassWeights w{cfg.class_weights};
            const dpe::AcquisitionFn acq = dpe::acquisition_by_name(
                cfg.acquisition, cfg.class_weights.empty() ? nullptr : &w);
            fs::create_directories(sco.out);
            const std::string path = (fs::path(sco.out) / "scores.csv").string();
            std::ofstream f(path);
            f << "unit_id,score\n";
            constexpr std::size_t kChunk = 128;
            for (std::size_t start = 0; start < pool.size(); start += kChunk) {
                const std::size_t stop = std::min(pool.size(), start + kChunk);
                std::vector<std::uint32_t> idx;
                for (std::size_t i = start; i < stop; ++i) idx.push_back(std::uint32_t(i));
                const dpe::Prediction pred = dpe::predict(model, dpe::make_batch(pool, idx));
                const std::size_t K = pred.mean.dim(1);
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    dpe::PredictionSet ps;
                    for (const dpe::Tensor& p : pred.member_probs) {
                        std::vector<double> row(K);
                        for (std::size_t k = 0; k < K; ++k) row[k] = p.at2(i, k);
                        ps.probs.push_back(std::move(row));
                    }
                    f << idx[i] << "," << acq(ps) << "\n";
                }
            }
            std::cout << "wrote " << path << "\n";
        } else if (*eval_cmd) {
            const dpe::ExperimentConfig cfg = load_with_overrides(eo);
            dpe::DatasetSpec d = cfg.dataset;
            dpe::Dataset pool, val;
            if (d.kind == "blobs") {
                pool = dpe::synth_blobs(d.classes, d.count, d.dim, d.data_seed, d.radius,
                                        d.spread);
                val = dpe::synth_blobs(d.classes, d.val_count, d.dim,
                                       dpe::derive_seed(d.data_seed, 0x7A1ULL), d.radius,
                                       d.spread);
            } else if (d.kind == "idx") {
                pool = dpe::load_idx(d.images, d.labels);
                val = dpe::load_idx(d.val_images, d.val_labels);
            } else if (d.kind == "cifar") {
                pool = dpe::load_cifar_binary(d.paths);
                val = dpe::load_cifar_binary(d.val_paths);
            } else {
                throw dpe::UsageError("unsupported dataset kind for eval: " + d.kind);
            }
            const auto stats = dpe::channel_statistics(pool);
            val = dpe::normalize_with(val, stats);
            const dpe::Tensor& x = val.inputs.at(0);
            const std::vector<dpe::LayerSpec> arch =
                cfg.model.arch == "mlp"
                    ? dpe::make_mlp(int(x.dim(0)), cfg.model.hidden, val.num_classes)
                    : dpe::make_residual_cnn(int(x.dim(0)), val.num_classes, cfg.model.width);
            const dpe::Dpe model = dpe::load(eval_model, arch);
            std::cout << "val accuracy: " << dpe::evaluate_accuracy(model, val) << "\n";
        } else if (*cmp) {
            const dpe::CompareResult r =
                dpe::compare(load_records(cmp_a), load_records(cmp_b));
            std::cout << dpe::format_compare(r);
        } else if (*curves_cmd) {
            const std::string csv = dpe::curves_csv(load_records(curve_files));
            if (cu.out.empty() || cu.out == "-") {
                std::cout << csv;
            } else {
                fs::create_directories(cu.out);
                const std::string path = (fs::path(cu.out) / "curves.csv").string();
                std::ofstream f(path);
                f << csv;
                std::cout << "wrote " << path << "\n";
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
