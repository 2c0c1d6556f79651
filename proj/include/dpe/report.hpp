#ifndef DPE_REPORT_HPP
#define DPE_REPORT_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpe/active_loop.hpp"
#include "dpe/data_io.hpp"
#include "dpe/ensemble.hpp"

namespace dpe {

struct DatasetSpec {
    std::string kind;  // blobs | shapes | idx | cifar | seg_dir
    // synthetic generators
    int classes = 4;
    int count = 2000;
    int val_count = 500;
    int dim = 2;
    int height = 24, width = 32;
    double radius = 3.0, spread = 1.0;
    double rare_fraction = 0.35;
    std::uint64_t data_seed = 1;
    // file-backed datasets
    std::string images, labels, val_images, val_labels;
    std::vector<std::string> paths, val_paths;
    std::string dir, val_dir;
};

struct ModelSpec {
    int ensemble_size = 4;
    double beta = 1e-5;
    double l2 = 0.0;
    std::string arch = "mlp";  // mlp | cnn (classification)
    int hidden = 32;           // mlp hidden width
    int width = 16;            // cnn base width / segmentation encoder width
    int head_hidden = 16;      // segmentation decoder hidden width
    double lambda = 1e-4;      // segmentation encoder L2
};

struct ExperimentConfig {
    std::string task = "classify";  // classify | segment
    DatasetSpec dataset;
    ModelSpec model;
    GrowthSchedule schedule;
    TrainConfig train;
    std::string acquisition = "h_ens";
    std::vector<double> class_weights;  // required by var_w only
    std::vector<std::uint64_t> seeds;
    std::string output_dir = "out";
    bool full_supervision = false;
};

// Strict parse: unknown keys, type mismatches, missing files and inconsistent
// schedules are all collected and reported together in one ConfigError.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);

// Canonical (sorted-key) form used for hashing and provenance.
nlohmann::json canonical_json(const ExperimentConfig& cfg);

// FNV-1a over the canonical dump, as a 16-digit hex string.
std::string config_hash(const ExperimentConfig& cfg);

struct RoundRow {
    int round;
    int labeled_count;
    double metric;                  // accuracy or mIoU
    std::vector<double> per_class;  // per-class IoU (segmentation only)
    int train_epochs;
    double seconds;
};

struct RunRecord {
    std::string method;
    std::uint64_t seed = 0;
    std::size_t val_size = 0;
    std::string hash;
    std::vector<RoundRow> rounds;
};

// Executes one experiment per seed; writes record_<method>_seed<N>.json,
// queries_<method>_seed<N>.csv and curves.csv under output_dir. Returns the
// written record paths. An existing record with a different config hash for
// the same method+seed is an error.
std::vector<std::string> run(const ExperimentConfig& cfg);

RunRecord load_record(const std::string& path);
void save_record(const RunRecord& rec, const std::string& path);

struct MethodRoundStats {
    int labeled_count;
    double mean_a, std_a;
    double mean_b, std_b;
};

struct CompareResult {
    std::vector<MethodRoundStats> per_round;
    std::string method_a, method_b;
    double final_mean_a = 0.0, final_mean_b = 0.0;
    // two-proportion Z on mean final accuracies, n = validation size
    double two_prop_z = 0.0, two_prop_p = 1.0;
    // paired seed-wise mean-difference Z
    double paired_z = 0.0, paired_p = 1.0;
    bool significance_available = false;
    std::string message;
};

// Requires matched schedules (same labeled counts per round) and matched
// seed sets; pairs records by seed.
CompareResult compare(const std::vector<RunRecord>& a, const std::vector<RunRecord>& b);
std::string format_compare(const CompareResult& r);

double two_proportion_z(double p1, double p2, std::size_t n);
double two_sided_p(double z);

// One row per (record, round): method,seed,labeled_count,metric.
std::string curves_csv(const std::vector<RunRecord>& records);

}  // namespace dpe

#endif
