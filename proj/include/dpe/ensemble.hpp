#ifndef DPE_ENSEMBLE_HPP
#define DPE_ENSEMBLE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "dpe/data_io.hpp"
#include "dpe/kl_reg.hpp"
#include "dpe/net.hpp"

namespace dpe {

// E structurally identical members trained jointly under the cross-member
// KL penalty (beta) or, alternatively, per-member L2 (l2_coeff).
struct Dpe {
    std::vector<Network> members;
    double beta = 1e-5;
    double l2_coeff = 0.0;

    std::size_t ensemble_size() const { return members.size(); }
};

// Fresh ensemble over the given architecture; member e is He-initialized
// from seed mixed with e.
Dpe make_dpe(const std::vector<LayerSpec>& arch, int ensemble_size, double beta,
             std::uint64_t seed, double l2_coeff = 0.0);

struct TrainConfig {
    double lr0 = 0.1;
    double momentum = 0.9;
    int batch_size = 32;
    int patience = 25;
    int max_epochs = 400;
    double lr_drop = 0.1;
    std::uint64_t seed = 0;
    int threads = 0;  // 0 = single-threaded deterministic
    bool augment = false;
    AugmentPolicy augment_policy;
};

struct EpochLog {
    int epoch;
    double mean_train_loss;
    double val_accuracy;
    double learning_rate;
};

struct TrainResult {
    std::vector<EpochLog> log;
    int best_epoch = -1;
    double best_val_accuracy = 0.0;
    int epochs_run = 0;
};

// Patience-based schedule: `patience` epochs without a new best drops the
// learning rate once by lr_drop; 2*patience further epochs without a new
// best stops training.
class EarlyStopper {
public:
    EarlyStopper(int patience, double lr_drop, double lr0);

    // Feed one epoch's validation metric. Returns true while training should
    // continue past this epoch.
    bool observe(double val_metric);

    double learning_rate() const { return lr_; }
    bool improved_last() const { return improved_last_; }
    double best() const { return best_; }

private:
    int patience_;
    double lr_drop_;
    double lr_;
    double best_ = -1e300;
    int stall_ = 0;
    bool dropped_ = false;
    bool improved_last_ = false;
};

// The deterministic per-epoch shuffle shared by all members.
std::vector<std::uint32_t> epoch_shuffle(std::uint64_t seed, int epoch, std::size_t n);

// splitmix-style seed derivation (fresh models per active round, etc).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt);

// Joint training under the summed objective. Per minibatch each member
// backpropagates its own cross-entropy; the KL penalty gradient is computed
// once from all members' current parameters and added with weight beta.
// Best-validation parameters are restored on return.
TrainResult train(Dpe& dpe, const Dataset& labeled, const Dataset& val,
                  const TrainConfig& cfg);

struct Prediction {
    std::vector<Tensor> member_probs;
    Tensor mean;
};

Prediction predict(const Dpe& dpe, const Tensor& batch);

// Ensemble-mean accuracy over a classification dataset.
double evaluate_accuracy(const Dpe& dpe, const Dataset& ds, int batch_size = 64,
                         int threads = 0);

// Checkpoint I/O. Binary format: magic "DPE1", version u32=1, E u32,
// group count u32; per group a name (u16 length + UTF-8), role u8, rank u8,
// dims (u32 each) and E consecutive little-endian f32 payloads.
void save(const Dpe& dpe, const std::string& path);

// Rebuilds members over `arch` and loads all parameters and batchnorm
// buffers from the checkpoint.
Dpe load(const std::string& path, const std::vector<LayerSpec>& arch);

}  // namespace dpe

#endif
