#ifndef DPE_ACQUISITION_HPP
#define DPE_ACQUISITION_HPP

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace dpe {

// Per-unit ensemble predictions: E probability vectors of length K.
struct PredictionSet {
    std::vector<std::vector<double>> probs;

    std::size_t ensemble_size() const { return probs.size(); }
    std::size_t num_classes() const { return probs.empty() ? 0 : probs[0].size(); }
};

struct ClassWeights {
    std::vector<double> w;
};

// Entropy of the member-mean distribution. Rank-identical to the
// entropy-of-sum form, which equals E*h_ens - E*log(E).
double h_ens(const PredictionSet& ps);

// Mean over members of each member's entropy.
double h_cat(const PredictionSet& ps);

// h_ens - h_cat, clipped at 0.
double mutual_information(const PredictionSet& ps);

// Sum over classes of the MLE variance of class probability across members.
double variance(const PredictionSet& ps);

// 1 - f_m/E with the mode of per-member argmax predictions; ties in both
// argmax and mode break toward the lowest class index.
double variation_ratios(const PredictionSet& ps);

// Class-weighted variance (w all-ones recovers variance()).
double variance_weighted(const PredictionSet& ps, const ClassWeights& w);

// Reproducible uniform score in [0,1) for the random baseline.
double random_score(std::uint32_t unit_id, std::uint64_t seed);

// The b highest-scoring unit ids; ties break toward the lowest id. A request
// larger than the pool is clamped (with a warning on stderr).
std::vector<std::uint32_t> select_top_b(
    const std::vector<std::pair<std::uint32_t, double>>& scores, std::size_t b);

// Names accepted by the CLI: random, h_ens, h_cat, mi, var, vr, var_w.
using AcquisitionFn = std::function<double(const PredictionSet&)>;
AcquisitionFn acquisition_by_name(const std::string& name, const ClassWeights* weights = nullptr);
bool is_random_acquisition(const std::string& name);
std::vector<std::string> acquisition_names();

}  // namespace dpe

#endif
