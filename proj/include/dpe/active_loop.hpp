#ifndef DPE_ACTIVE_LOOP_HPP
#define DPE_ACTIVE_LOOP_HPP

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dpe/acquisition.hpp"
#include "dpe/data_io.hpp"
#include "dpe/ensemble.hpp"

namespace dpe {

struct QueryEvent {
    int round;
    std::uint32_t unit_id;
    double score;
};

// Labeled/unlabeled split with query bookkeeping. Unit ids are dense
// [0, size); the meaning of a unit (sample, crop) is the caller's.
class Pool {
public:
    explicit Pool(std::size_t size);

    std::size_t size() const { return labeled_.size(); }
    std::size_t labeled_count() const { return labeled_ids_.size(); }
    std::size_t unlabeled_count() const { return unlabeled_ids_.size(); }
    const std::vector<std::uint32_t>& labeled_ids() const { return labeled_ids_; }
    const std::vector<std::uint32_t>& unlabeled_ids() const { return unlabeled_ids_; }
    bool is_labeled(std::uint32_t id) const { return labeled_.at(id); }
    const std::vector<QueryEvent>& query_log() const { return query_log_; }

    // Moves ids from unlabeled to labeled atomically, recording scores.
    // Querying a labeled (or repeated) id is a protocol error.
    void mark_labeled(int round, const std::vector<std::uint32_t>& ids,
                      const std::vector<double>& scores);

private:
    std::vector<std::uint8_t> labeled_;
    std::vector<std::uint32_t> labeled_ids_;
    std::vector<std::uint32_t> unlabeled_ids_;
    std::vector<QueryEvent> query_log_;
};

struct GrowthSchedule {
    enum class Kind { Linear, Exponential };
    Kind kind = Kind::Linear;
    int b0 = 0;
    int rounds = 0;
    int budget = 0;
};

// Per-round query sizes. Linear: rounds copies of b0. Exponential: a random
// seed round of b0, another b0, then doubling. Inconsistent (b0, rounds,
// budget) triples are configuration errors.
std::vector<int> schedule_batches(const GrowthSchedule& s);

// Simulated oracle over pre-existing hidden labels.
class Annotator {
public:
    explicit Annotator(std::vector<int> hidden_labels);

    // Reveals labels for currently unqueried ids. Double queries are
    // protocol errors.
    std::vector<std::pair<std::uint32_t, int>> annotate(const std::vector<std::uint32_t>& ids);

    std::size_t total_units() const { return labels_.size(); }

private:
    std::vector<int> labels_;
    std::vector<std::uint8_t> revealed_;
};

struct RoundRecord {
    int round;
    int labeled_count;
    std::string acquisition;
    double val_metric;
    int train_epochs;
    double seconds;
};

struct ExperimentRecord {
    std::vector<RoundRecord> rounds;
    std::vector<QueryEvent> query_log;
    std::uint64_t seed = 0;
    std::string acquisition;
    std::size_t val_size = 0;
};

using DpeFactory = std::function<Dpe(std::uint64_t seed)>;

// Batch-mode active learning over a classification pool: random seed round,
// then train-from-scratch / score / query rounds until the budget is spent.
ExperimentRecord run_active(const Dataset& pool_data, const Dataset& val,
                            const GrowthSchedule& schedule,
                            const std::string& acquisition_name,
                            const DpeFactory& factory, const TrainConfig& cfg,
                            std::uint64_t experiment_seed,
                            const ClassWeights* weights = nullptr);

// Uniform sample of `count` unlabeled ids (the round-0 seed query).
std::vector<std::uint32_t> sample_initial(const Pool& pool, int count, std::uint64_t seed);

}  // namespace dpe

#endif
