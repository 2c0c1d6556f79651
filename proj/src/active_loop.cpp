#include "dpe/active_loop.hpp"

#include <algorithm>
#include <chrono>
#include <random>

#include "dpe/errors.hpp"

namespace dpe {

Pool::Pool(std::size_t size) : labeled_(size, 0) {
    if (size == 0) throw ConfigError("pool: empty");
    unlabeled_ids_.resize(size);
    for (std::size_t i = 0; i < size; ++i) unlabeled_ids_[i] = std::uint32_t(i);
}

void Pool::mark_labeled(int round, const std::vector<std::uint32_t>& ids,
                        const std::vector<double>& scores) {
    if (ids.size() != scores.size()) throw ConfigError("pool: id/score count mismatch");
    // validate the whole batch before mutating anything
    std::vector<std::uint8_t> seen = labeled_;
    for (std::uint32_t id : ids) {
        if (id >= labeled_.size()) throw ProtocolError("pool: unit id out of range");
        if (seen[id]) throw ProtocolError("pool: unit " + std::to_string(id) +
                                          " queried twice");
        seen[id] = 1;
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
        labeled_[ids[i]] = 1;
        labeled_ids_.push_back(ids[i]);
        query_log_.push_back({round, ids[i], scores[i]});
    }
    unlabeled_ids_.erase(
        std::remove_if(unlabeled_ids_.begin(), unlabeled_ids_.end(),
                       [&](std::uint32_t id) { return labeled_[id]; }),
        unlabeled_ids_.end());
}

std::vector<int> schedule_batches(const GrowthSchedule& s) {
    if (s.b0 < 1 || s.rounds < 1) throw ConfigError("schedule: b0 and rounds must be >= 1");
    std::vector<int> batches;
    if (s.kind == GrowthSchedule::Kind::Linear) {
        batches.assign(std::size_t(s.rounds), s.b0);
    } else {
        int b = s.b0;
        for (int r = 0; r < s.rounds; ++r) {
            batches.push_back(b);
            if (r >= 1) b *= 2;  // first doubling happens after round 1
        }
    }
    long long total = 0;
    for (int b : batches) total += b;
    if (total != s.budget)
        throw ConfigError("schedule: per-round batches sum to " + std::to_string(total) +
                          ", budget is " + std::to_string(s.budget));
    return batches;
}

Annotator::Annotator(std::vector<int> hidden_labels)
    : labels_(std::move(hidden_labels)), revealed_(labels_.size(), 0) {}

std::vector<std::pair<std::uint32_t, int>> Annotator::annotate(
    const std::vector<std::uint32_t>& ids) {
    for (std::uint32_t id : ids) {
        if (id >= labels_.size()) throw ProtocolError("annotator: unit id out of range");
        if (revealed_[id])
            throw ProtocolError("annotator: unit " + std::to_string(id) +
                                " already annotated");
    }
    std::vector<std::pair<std::uint32_t, int>> out;
    out.reserve(ids.size());
    for (std::uint32_t id : ids) {
        revealed_[id] = 1;
        out.emplace_back(id, labels_[id]);
    }
    return out;
}

std::vector<std::uint32_t> sample_initial(const Pool& pool, int count, std::uint64_t seed) {
    std::vector<std::uint32_t> ids = pool.unlabeled_ids();
    std::mt19937_64 rng(derive_seed(seed, 0x5EED0ULL));
    std::shuffle(ids.begin(), ids.end(), rng);
    if (std::size_t(count) > ids.size()) count = int(ids.size());
    ids.resize(std::size_t(count));
    return ids;
}

namespace {

Dataset subset(const Dataset& ds, const std::vector<std::uint32_t>& ids) {
    Dataset out;
    out.num_classes = ds.num_classes;
    out.segmentation = ds.segmentation;
    out.channel_stats = ds.channel_stats;
    for (std::uint32_t id : ids) {
        out.inputs.push_back(ds.inputs.at(id));
        if (!ds.labels.empty()) out.labels.push_back(ds.labels.at(id));
        if (!ds.masks.empty()) out.masks.push_back(ds.masks.at(id));
    }
    return out;
}

}  // namespace

ExperimentRecord run_active(const Dataset& pool_data, const Dataset& val,
                            const GrowthSchedule& schedule,
                            const std::string& acquisition_name,
                            const DpeFactory& factory, const TrainConfig& cfg,
                            std::uint64_t experiment_seed,
                            const ClassWeights* weights) {
    const std::vector<int> batches = schedule_batches(schedule);
    if (std::size_t(schedule.budget) > pool_data.size())
        throw ConfigError("active loop: budget " + std::to_string(schedule.budget) +
                          " exceeds pool size " + std::to_string(pool_data.size()));
    const bool random_acq = is_random_acquisition(acquisition_name);
    AcquisitionFn acq;
    if (!random_acq) acq = acquisition_by_name(acquisition_name, weights);

    Pool pool(pool_data.size());
    Annotator annotator(pool_data.labels);
    std::vector<int> revealed(pool_data.size(), -1);

    ExperimentRecord record;
    record.seed = experiment_seed;
    record.acquisition = acquisition_name;
    record.val_size = val.size();

    // round 0 query is uniformly random
    {
        const std::vector<std::uint32_t> ids = sample_initial(pool, batches[0], experiment_seed);
        for (const auto& [id, label] : annotator.annotate(ids)) revealed[id] = label;
        pool.mark_labeled(0, ids, std::vector<double>(ids.size(), 0.0));
    }

    Dpe dpe;
    for (std::size_t round = 0; round < batches.size(); ++round) {
        const auto t0 = std::chrono::steady_clock::now();

        Dataset labeled = subset(pool_data, pool.labeled_ids());
        for (std::size_t i = 0; i < labeled.size(); ++i)
            labeled.labels[i] = revealed[pool.labeled_ids()[i]];

        // retrain from scratch every round
        dpe = factory(derive_seed(experiment_seed, 0xA0000ULL + round));
        TrainConfig round_cfg = cfg;
        round_cfg.seed = derive_seed(experiment_seed, 0xB0000ULL + round);
        const TrainResult tr = train(dpe, labeled, val, round_cfg);

        const auto t1 = std::chrono::steady_clock::now();
        record.rounds.push_back(
            {int(round), int(pool.labeled_count()), acquisition_name,
             tr.best_val_accuracy, tr.epochs_run,
             std::chrono::duration<double>(t1 - t0).count()});

        if (round + 1 == batches.size()) break;

        // score the remaining pool and move the top b
        const std::vector<std::uint32_t>& unlabeled = pool.unlabeled_ids();
        std::vector<std::pair<std::uint32_t, double>> scores;
        scores.reserve(unlabeled.size());
        const std::uint64_t round_seed = derive_seed(experiment_seed, 0xC0000ULL + round);
        if (random_acq) {
            for (std::uint32_t id : unlabeled)
                scores.emplace_back(id, random_score(id, round_seed));
        } else {
            constexpr std::size_t kChunk = 128;
            for (std::size_t start = 0; start < unlabeled.size(); start += kChunk) {
                const std::size_t stop = std::min(unlabeled.size(), start + kChunk);
                std::vector<std::uint32_t> idx(unlabeled.begin() + start,
                                               unlabeled.begin() + stop);
                const Prediction pred = predict(dpe, make_batch(pool_data, idx));
                const std::size_t K = pred.mean.dim(1);
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    PredictionSet ps;
                    for (const Tensor& p : pred.member_probs) {
                        std::vector<double> row(K);
                        for (std::size_t k = 0; k < K; ++k) row[k] = p.at2(i, k);
                        ps.probs.push_back(std::move(row));
                    }
                    scores.emplace_back(idx[i], acq(ps));
                }
            }
        }
        const std::vector<std::uint32_t> chosen =
            select_top_b(scores, std::size_t(batches[round + 1]));
        std::vector<double> chosen_scores;
        {
            std::vector<double> by_id(pool_data.size(), 0.0);
            for (const auto& [id, s] : scores) by_id[id] = s;
            for (std::uint32_t id : chosen) chosen_scores.push_back(by_id[id]);
        }
        for (const auto& [id, label] : annotator.annotate(chosen)) revealed[id] = label;
        pool.mark_labeled(int(round + 1), chosen, chosen_scores);
    }

    record.query_log = pool.query_log();
    return record;
}

}  // namespace dpe
