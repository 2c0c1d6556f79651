#include "dpe/seg.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>

#include "dpe/errors.hpp"

namespace dpe {

namespace {
constexpr int kDownscale = 8;  // three stride-2 encoder stages
}

SegDpe make_seg_dpe(int in_channels, int encoder_width, int head_hidden,
                    int num_classes, int ensemble_size, double beta, double lambda,
                    std::uint64_t seed) {
    if (ensemble_size < 1) throw ConfigError("seg ensemble: E must be >= 1");
    if (ensemble_size == 2 && beta > 0.0)
        std::cerr << "warning: E=2 ensembles risk exploding KL gradients; E >= 4 recommended\n";
    SegDpe m;
    m.beta = beta;
    m.lambda = lambda;
    m.encoder = Network(make_seg_encoder(in_channels, encoder_width));
    he_initialize(m.encoder, derive_seed(seed, 0xE0CULL));
    const auto head_arch = make_seg_head(2 * encoder_width, head_hidden, num_classes, kDownscale);
    for (int e = 0; e < ensemble_size; ++e) {
        m.decoders.emplace_back(head_arch);
        he_initialize(m.decoders.back(), derive_seed(seed, 0xDEC0ULL + std::uint64_t(e)));
    }
    return m;
}

SegPrediction seg_forward(SegDpe& m, const Tensor& batch, bool training) {
    if (batch.ndim() != 4) throw ConfigError("seg_forward: expected 4D batch");
    if (batch.dim(2) % kDownscale != 0 || batch.dim(3) % kDownscale != 0)
        throw ConfigError("seg_forward: image dims must be divisible by " +
                          std::to_string(kDownscale));
    const Tensor feats = m.encoder.forward(batch, training);
    SegPrediction pred;
    for (Network& head : m.decoders)
        pred.member_probs.push_back(head.forward(feats, training));
    pred.mean = Tensor::zeros_like(pred.member_probs[0]);
    for (const Tensor& p : pred.member_probs)
        for (std::size_t j = 0; j < p.numel(); ++j) pred.mean[j] += p[j];
    for (double& v : pred.mean.vec()) v /= double(m.decoders.size());
    return pred;
}

SegSgdStates make_seg_states(SegDpe& m, double lr, double momentum) {
    SegSgdStates s{SgdState::make(m.encoder, lr, momentum), {}};
    for (Network& d : m.decoders) s.decoders.push_back(SgdState::make(d, lr, momentum));
    return s;
}

double seg_train_step(SegDpe& m, const Tensor& batch, const std::vector<int>& targets,
                      const std::vector<std::uint8_t>& mask, SegSgdStates& states) {
    const std::size_t E = m.decoders.size();
    const SegPrediction pred = seg_forward(m, batch, true);

    double loss_sum = 0.0;
    std::vector<std::vector<Tensor>> head_grads(E);
    Tensor encoder_out_grad;
    for (std::size_t e = 0; e < E; ++e) {
        const LossResult ce = cross_entropy(pred.member_probs[e], targets, &mask);
        loss_sum += ce.loss;
        Network::Grads g = m.decoders[e].backward(ce.grad);
        head_grads[e] = std::move(g.params);
        if (e == 0)
            encoder_out_grad = std::move(g.input);
        else
            for (std::size_t j = 0; j < encoder_out_grad.numel(); ++j)
                encoder_out_grad[j] += g.input[j];  // encoder sees the summed heads
    }

    if (m.beta > 0.0 && E >= 2) {
        std::vector<ParameterGroup> groups = build_groups(m.decoders);
        for (std::size_t p = 0; p < groups.size(); ++p) {
            std::vector<Tensor*> outs;
            for (std::size_t e = 0; e < E; ++e) outs.push_back(&head_grads[e][p]);
            accumulate_layer_penalty_grad(groups[p], outs, m.beta);
        }
    }

    std::vector<Tensor> enc_grads = m.encoder.backward(encoder_out_grad).params;
    if (m.lambda > 0.0) {
        auto& params = m.encoder.params();
        for (std::size_t p = 0; p < params.size(); ++p)
            for (std::size_t j = 0; j < params[p].numel(); ++j)
                enc_grads[p][j] += 2.0 * m.lambda * params[p][j];
    }

    for (std::size_t e = 0; e < E; ++e)
        sgd_step(m.decoders[e], head_grads[e], states.decoders[e]);
    sgd_step(m.encoder, enc_grads, states.encoder);
    return loss_sum / double(E);
}

namespace {

struct SegSnapshot {
    std::vector<Tensor> enc_params, enc_buffers;
    std::vector<std::vector<Tensor>> dec_params, dec_buffers;
};

SegSnapshot take_snapshot(const SegDpe& m) {
    SegSnapshot s;
    s.enc_params = m.encoder.params();
    s.enc_buffers = m.encoder.buffers();
    for (const Network& d : m.decoders) {
        s.dec_params.push_back(d.params());
        s.dec_buffers.push_back(d.buffers());
    }
    return s;
}

void restore_snapshot(SegDpe& m, const SegSnapshot& s) {
    m.encoder.params() = s.enc_params;
    m.encoder.buffers() = s.enc_buffers;
    for (std::size_t e = 0; e < m.decoders.size(); ++e) {
        m.decoders[e].params() = s.dec_params[e];
        m.decoders[e].buffers() = s.dec_buffers[e];
    }
}

}  // namespace

SegTrainResult seg_train(SegDpe& m, const Dataset& images,
                         const std::vector<std::vector<std::uint8_t>>& purchased,
                         const Dataset& val, const TrainConfig& cfg) {
    if (images.size() == 0) throw ConfigError("seg_train: no images");
    if (purchased.size() != images.size())
        throw ConfigError("seg_train: purchased mask count mismatch");
    if (val.size() == 0) throw ConfigError("seg_train: empty validation set");

    // images with at least one purchased pixel
    std::vector<std::uint32_t> usable;
    for (std::size_t i = 0; i < images.size(); ++i)
        if (std::any_of(purchased[i].begin(), purchased[i].end(),
                        [](std::uint8_t v) { return v != 0; }))
            usable.push_back(std::uint32_t(i));
    if (usable.empty()) throw ConfigError("seg_train: no labeled pixels anywhere");

    SegSgdStates states = make_seg_states(m, cfg.lr0, cfg.momentum);
    EarlyStopper stopper(cfg.patience, cfg.lr_drop, cfg.lr0);
    SegTrainResult result;
    SegSnapshot best = take_snapshot(m);

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const std::vector<std::uint32_t> order = epoch_shuffle(cfg.seed, epoch, usable.size());
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < usable.size(); start += std::size_t(cfg.batch_size)) {
            const std::size_t stop =
                std::min(usable.size(), start + std::size_t(cfg.batch_size));
            std::vector<std::uint32_t> idx;
            for (std::size_t i = start; i < stop; ++i) idx.push_back(usable[order[i]]);
            const Tensor batch = make_batch(images, idx);
            std::vector<int> targets;
            std::vector<std::uint8_t> mask;
            for (std::uint32_t i : idx) {
                const auto& gt = images.masks.at(i);
                const auto& pm = purchased[i];
                targets.insert(targets.end(), gt.begin(), gt.end());
                mask.insert(mask.end(), pm.begin(), pm.end());
            }
            loss_sum += seg_train_step(m, batch, targets, mask, states);
            ++steps;
        }

        const double miou = evaluate_miou(m, val, cfg.batch_size).mean_iou;
        const bool keep_going = stopper.observe(miou);
        if (stopper.improved_last()) {
            best = take_snapshot(m);
            result.best_epoch = epoch;
            result.best_val_miou = miou;
        }
        states.encoder.learning_rate = stopper.learning_rate();
        for (SgdState& s : states.decoders) s.learning_rate = stopper.learning_rate();
        result.log.push_back({epoch, loss_sum / double(steps), miou, stopper.learning_rate()});
        result.epochs_run = epoch;
        if (!keep_going) break;
    }
    restore_snapshot(m, best);
    return result;
}

CropGrid make_grid(int image_h, int image_w, int cols, int rows) {
    if (cols < 1 || rows < 1) throw ConfigError("make_grid: cols/rows must be >= 1");
    if (image_h < rows || image_w < cols)
        throw ConfigError("make_grid: image smaller than the grid");
    CropGrid grid{cols, rows, {}};
    const int base_h = image_h / rows, base_w = image_w / cols;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            CropRect rect;
            rect.y0 = r * base_h;
            rect.x0 = c * base_w;
            rect.h = (r == rows - 1) ? image_h - rect.y0 : base_h;
            rect.w = (c == cols - 1) ? image_w - rect.x0 : base_w;
            grid.rects.push_back(rect);
        }
    return grid;
}

double score_crop(const SegPrediction& pred, std::size_t n, const CropRect& rect,
                  const AcquisitionFn& acq) {
    const Tensor& ref = pred.member_probs.at(0);
    const std::size_t K = ref.dim(1), H = ref.dim(2), W = ref.dim(3);
    if (rect.y0 < 0 || rect.x0 < 0 || rect.h < 1 || rect.w < 1 ||
        std::size_t(rect.y0 + rect.h) > H || std::size_t(rect.x0 + rect.w) > W)
        throw ConfigError("score_crop: rect outside image");
    double total = 0.0;
    PredictionSet ps;
    ps.probs.assign(pred.member_probs.size(), std::vector<double>(K));
    for (int y = rect.y0; y < rect.y0 + rect.h; ++y)
        for (int x = rect.x0; x < rect.x0 + rect.w; ++x) {
            for (std::size_t e = 0; e < pred.member_probs.size(); ++e)
                for (std::size_t k = 0; k < K; ++k)
                    ps.probs[e][k] = pred.member_probs[e].at4(n, k, y, x);
            total += acq(ps);
        }
    return total;
}

IouResult per_class_iou(const std::vector<int>& pred, const std::vector<int>& truth,
                        int num_classes) {
    if (pred.size() != truth.size()) throw ConfigError("per_class_iou: size mismatch");
    std::vector<long long> inter(num_classes, 0), uni(num_classes, 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] == truth[i]) {
            inter[pred[i]]++;
            uni[pred[i]]++;
        } else {
            uni[pred[i]]++;
            uni[truth[i]]++;
        }
    }
    IouResult r;
    r.per_class.assign(num_classes, std::nan(""));
    double sum = 0.0;
    int present = 0;
    for (int k = 0; k < num_classes; ++k) {
        if (uni[k] == 0) continue;  // absent from both -> excluded from the mean
        r.per_class[k] = double(inter[k]) / double(uni[k]);
        sum += r.per_class[k];
        ++present;
    }
    r.mean_iou = present > 0 ? sum / present : 0.0;
    return r;
}

std::vector<int> predicted_mask(const SegPrediction& pred, std::size_t n) {
    const std::size_t K = pred.mean.dim(1), H = pred.mean.dim(2), W = pred.mean.dim(3);
    std::vector<int> out(H * W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < K; ++k)
                if (pred.mean.at4(n, k, y, x) > pred.mean.at4(n, best, y, x)) best = k;
            out[y * W + x] = int(best);
        }
    return out;
}

IouResult evaluate_miou(SegDpe& m, const Dataset& val, int batch_size) {
    std::vector<int> all_pred, all_truth;
    for (std::size_t start = 0; start < val.size(); start += std::size_t(batch_size)) {
        const std::size_t stop = std::min(val.size(), start + std::size_t(batch_size));
        std::vector<std::uint32_t> idx;
        for (std::size_t i = start; i < stop; ++i) idx.push_back(std::uint32_t(i));
        const SegPrediction pred = seg_forward(m, make_batch(val, idx), false);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const std::vector<int> pm = predicted_mask(pred, i);
            all_pred.insert(all_pred.end(), pm.begin(), pm.end());
            const auto& gt = val.masks.at(idx[i]);
            all_truth.insert(all_truth.end(), gt.begin(), gt.end());
        }
    }
    return per_class_iou(all_pred, all_truth, val.num_classes);
}

SegExperimentRecord run_active_seg(const Dataset& pool_images, const Dataset& val,
                                   const GrowthSchedule& schedule,
                                   const std::string& acquisition_name,
                                   const SegDpeFactory& factory, const TrainConfig& cfg,
                                   std::uint64_t experiment_seed,
                                   const ClassWeights* weights,
                                   int grid_cols, int grid_rows) {
    if (pool_images.size() == 0) throw ConfigError("active seg: empty pool");
    const int crops_per_image = grid_cols * grid_rows;
    const std::size_t total_crops = pool_images.size() * std::size_t(crops_per_image);
    const std::vector<int> batches = schedule_batches(schedule);
    if (std::size_t(schedule.budget) > total_crops)
        throw ConfigError("active seg: budget exceeds crop pool size");
    const bool random_acq = is_random_acquisition(acquisition_name);
    AcquisitionFn acq;
    if (!random_acq) acq = acquisition_by_name(acquisition_name, weights);

    const int H = int(pool_images.inputs[0].dim(1));
    const int W = int(pool_images.inputs[0].dim(2));
    const CropGrid grid = make_grid(H, W, grid_cols, grid_rows);

    Pool pool(total_crops);
    std::vector<std::vector<std::uint8_t>> purchased(
        pool_images.size(), std::vector<std::uint8_t>(std::size_t(H) * W, 0));

    auto reveal = [&](std::uint32_t unit) {
        const std::size_t img = unit / std::size_t(crops_per_image);
        const CropRect& r = grid.rects[unit % std::size_t(crops_per_image)];
        for (int y = r.y0; y < r.y0 + r.h; ++y)
            for (int x = r.x0; x < r.x0 + r.w; ++x)
                purchased[img][std::size_t(y) * W + x] = 1;
    };

    SegExperimentRecord record;
    record.seed = experiment_seed;
    record.acquisition = acquisition_name;
    record.val_size = val.size();

    {
        const std::vector<std::uint32_t> ids =
            sample_initial(pool, batches[0], experiment_seed);
        for (std::uint32_t id : ids) reveal(id);
        pool.mark_labeled(0, ids, std::vector<double>(ids.size(), 0.0));
    }

    for (std::size_t round = 0; round < batches.size(); ++round) {
        const auto t0 = std::chrono::steady_clock::now();
        SegDpe m = factory(derive_seed(experiment_seed, 0xA0000ULL + round));
        TrainConfig round_cfg = cfg;
        round_cfg.seed = derive_seed(experiment_seed, 0xB0000ULL + round);
        const SegTrainResult tr = seg_train(m, pool_images, purchased, val, round_cfg);
        const IouResult iou = evaluate_miou(m, val, cfg.batch_size);
        const auto t1 = std::chrono::steady_clock::now();
        record.rounds.push_back({int(round), int(pool.labeled_count()), acquisition_name,
                                 iou.mean_iou, iou.per_class, tr.epochs_run,
                                 std::chrono::duration<double>(t1 - t0).count()});
        if (round + 1 == batches.size()) break;

        const std::uint64_t round_seed = derive_seed(experiment_seed, 0xC0000ULL + round);
        std::vector<std::pair<std::uint32_t, double>> scores;
        if (random_acq) {
            for (std::uint32_t id : pool.unlabeled_ids())
                scores.emplace_back(id, random_score(id, round_seed));
        } else {
            // group unlabeled crops by image, forward each image once
            std::vector<std::vector<std::uint32_t>> by_image(pool_images.size());
            for (std::uint32_t id : pool.unlabeled_ids())
                by_image[id / std::size_t(crops_per_image)].push_back(id);
            for (std::size_t img = 0; img < pool_images.size(); ++img) {
                if (by_image[img].empty()) continue;
                const SegPrediction pred =
                    seg_forward(m, make_batch(pool_images, {std::uint32_t(img)}), false);
                for (std::uint32_t id : by_image[img]) {
                    const CropRect& r = grid.rects[id % std::size_t(crops_per_image)];
                    scores.emplace_back(id, score_crop(pred, 0, r, acq));
                }
            }
        }
        const std::vector<std::uint32_t> chosen =
            select_top_b(scores, std::size_t(batches[round + 1]));
        std::vector<double> chosen_scores;
        {
            std::vector<double> by_id(total_crops, 0.0);
            for (const auto& [id, s] : scores) by_id[id] = s;
            for (std::uint32_t id : chosen) chosen_scores.push_back(by_id[id]);
        }
        for (std::uint32_t id : chosen) reveal(id);
        pool.mark_labeled(int(round + 1), chosen, chosen_scores);
    }

    for (const QueryEvent& q : pool.query_log()) {
        const int crop = int(q.unit_id % std::uint32_t(crops_per_image));
        record.query_log.push_back({q.round, std::uint32_t(q.unit_id / std::uint32_t(crops_per_image)),
                                    crop % grid_cols, crop / grid_cols, q.score});
    }
    return record;
}

}  // namespace dpe
