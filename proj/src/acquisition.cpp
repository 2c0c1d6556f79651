#include "dpe/acquisition.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "dpe/errors.hpp"

namespace dpe {

namespace {

double entropy(const std::vector<double>& p) {
    double h = 0.0;
    for (double v : p)
        if (v > 0.0) h -= v * std::log(v);
    return h;
}

std::vector<double> member_mean(const PredictionSet& ps) {
    if (ps.probs.empty()) throw ConfigError("prediction set: no members");
    const std::size_t k = ps.probs[0].size();
    std::vector<double> m(k, 0.0);
    for (const auto& p : ps.probs) {
        if (p.size() != k) throw ConfigError("prediction set: member length mismatch");
        for (std::size_t i = 0; i < k; ++i) m[i] += p[i];
    }
    for (double& v : m) v /= double(ps.probs.size());
    return m;
}

std::size_t argmax_lowest(const std::vector<double>& p) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < p.size(); ++i)
        if (p[i] > p[best]) best = i;
    return best;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

double h_ens(const PredictionSet& ps) { return entropy(member_mean(ps)); }

double h_cat(const PredictionSet& ps) {
    if (ps.probs.empty()) throw ConfigError("prediction set: no members");
    double sum = 0.0;
    for (const auto& p : ps.probs) sum += entropy(p);
    return sum / double(ps.probs.size());
}

double mutual_information(const PredictionSet& ps) {
    const double mi = h_ens(ps) - h_cat(ps);
    return mi < 0.0 ? 0.0 : mi;
}


namespace {

// Per-class MLE variance across members, computed in shifted form so that
// identical members yield exactly 0.
double class_variance(const PredictionSet& ps, std::size_t k) {
    const double x0 = ps.probs[0][k];
    const double E = double(ps.probs.size());
    double shift_sum = 0.0;
    for (const auto& p : ps.probs) shift_sum += p[k] - x0;
    const double mean_shift = shift_sum / E;
    double ss = 0.0;
    for (const auto& p : ps.probs) {
        const double d = (p[k] - x0) - mean_shift;
        ss += d * d;
    }
    return ss / E;
}

}  // namespace

double variance(const PredictionSet& ps) {
    const std::vector<double> m = member_mean(ps);
    double total = 0.0;
    for (std::size_t k = 0; k < m.size(); ++k) total += class_variance(ps, k);
    return total;
}

double variation_ratios(const PredictionSet& ps) {
    if (ps.probs.empty()) throw ConfigError("prediction set: no members");
    const std::size_t k = ps.probs[0].size();
    std::vector<std::size_t> counts(k, 0);
    for (const auto& p : ps.probs) counts[argmax_lowest(p)]++;
    std::size_t mode = 0;
    for (std::size_t i = 1; i < k; ++i)
        if (counts[i] > counts[mode]) mode = i;  // ties keep the lowest index
    return 1.0 - double(counts[mode]) / double(ps.probs.size());
}

double variance_weighted(const PredictionSet& ps, const ClassWeights& w) {
    const std::vector<double> m = member_mean(ps);
    if (w.w.size() != m.size())
        throw ConfigError("variance_weighted: weight length != class count");
    double total = 0.0;
    for (std::size_t k = 0; k < m.size(); ++k) {
        if (w.w[k] == 0.0) continue;
        total += w.w[k] * class_variance(ps, k);
    }
    return total;
}

double random_score(std::uint32_t unit_id, std::uint64_t seed) {
    const std::uint64_t h = splitmix64(seed ^ splitmix64(0x5151000000000000ULL + unit_id));
    return double(h >> 11) * 0x1.0p-53;
}

std::vector<std::uint32_t> select_top_b(
    const std::vector<std::pair<std::uint32_t, double>>& scores, std::size_t b) {
    if (b > scores.size()) {
        std::cerr << "warning: requested batch " << b << " exceeds pool size "
                  << scores.size() << ", clamping\n";
        b = scores.size();
    }
    std::vector<std::pair<std::uint32_t, double>> sorted = scores;
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& c) {
        if (a.second != c.second) return a.second > c.second;
        return a.first < c.first;
    });
    std::vector<std::uint32_t> out;
    out.reserve(b);
    for (std::size_t i = 0; i < b; ++i) out.push_back(sorted[i].first);
    return out;
}

AcquisitionFn acquisition_by_name(const std::string& name, const ClassWeights* weights) {
    if (name == "h_ens") return [](const PredictionSet& p) { return h_ens(p); };
    if (name == "h_cat") return [](const PredictionSet& p) { return h_cat(p); };
    if (name == "mi") return [](const PredictionSet& p) { return mutual_information(p); };
    if (name == "var") return [](const PredictionSet& p) { return variance(p); };
    if (name == "vr") return [](const PredictionSet& p) { return variation_ratios(p); };
    if (name == "var_w") {
        if (!weights) throw ConfigError("var_w acquisition needs class weights");
        ClassWeights w = *weights;
        bool any = false;
        for (double v : w.w) {
            if (v < 0.0) throw ConfigError("class weights must be nonnegative");
            if (v > 0.0) any = true;
        }
        if (!any) throw ConfigError("class weights need at least one positive entry");
        return [w](const PredictionSet& p) { return variance_weighted(p, w); };
    }
    if (name == "random")
        throw ConfigError("random acquisition is score-free; handled by the loop");
    throw ConfigError("unknown acquisition function: " + name);
}

bool is_random_acquisition(const std::string& name) { return name == "random"; }

std::vector<std::string> acquisition_names() {
    return {"random", "h_ens", "h_cat", "mi", "var", "vr", "var_w"};
}

}  // namespace dpe
