#ifndef DPE_SEG_HPP
#define DPE_SEG_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "dpe/acquisition.hpp"
#include "dpe/active_loop.hpp"
#include "dpe/data_io.hpp"
#include "dpe/ensemble.hpp"
#include "dpe/net.hpp"

namespace dpe {

// Shared encoder (L2-regularized) with E decoder heads (KL-regularized).
struct SegDpe {
    Network encoder;
    std::vector<Network> decoders;
    double beta = 1e-4;
    double lambda = 1e-4;  // encoder L2 weight

    std::size_t ensemble_size() const { return decoders.size(); }
};

SegDpe make_seg_dpe(int in_channels, int encoder_width, int head_hidden,
                    int num_classes, int ensemble_size, double beta, double lambda,
                    std::uint64_t seed);

struct SegPrediction {
    std::vector<Tensor> member_probs;  // each (N,K,H,W) at input resolution
    Tensor mean;
};

// Encoder runs once per batch; every head consumes the same feature map.
SegPrediction seg_forward(SegDpe& m, const Tensor& batch, bool training = false);

struct SegSgdStates {
    SgdState encoder;
    std::vector<SgdState> decoders;
};
SegSgdStates make_seg_states(SegDpe& m, double lr, double momentum);

// One joint step: summed masked cross-entropy over heads, KL penalty on
// decoder groups, L2 on encoder weights. Encoder gradients from the E heads
// are summed. Returns the mean per-head CE loss.
double seg_train_step(SegDpe& m, const Tensor& batch, const std::vector<int>& targets,
                      const std::vector<std::uint8_t>& mask, SegSgdStates& states);

struct SegTrainResult {
    std::vector<EpochLog> log;  // val_accuracy field carries mIoU
    int best_epoch = -1;
    double best_val_miou = 0.0;
    int epochs_run = 0;
};

// Joint training over images with partially purchased pixel labels.
// purchased[i] marks which pixels of image i carry usable labels; images
// with no purchased pixels are skipped.
SegTrainResult seg_train(SegDpe& m, const Dataset& images,
                         const std::vector<std::vector<std::uint8_t>>& purchased,
                         const Dataset& val, const TrainConfig& cfg);

struct CropRect {
    int y0, x0, h, w;
};

struct CropGrid {
    int cols, rows;
    std::vector<CropRect> rects;  // row-major: index = row*cols + col
};

// Tiling grid of crops; the last row/column absorbs any remainder.
CropGrid make_grid(int image_h, int image_w, int cols = 4, int rows = 3);

// Sum of the per-pixel acquisition over the crop, for image n of the
// prediction. Rects outside the image are bounds errors.
double score_crop(const SegPrediction& pred, std::size_t n, const CropRect& rect,
                  const AcquisitionFn& acq);

struct IouResult {
    std::vector<double> per_class;   // NaN for classes absent from both
    double mean_iou;                 // over classes present in pred or truth
};

IouResult per_class_iou(const std::vector<int>& pred, const std::vector<int>& truth,
                        int num_classes);

// Argmax labeling from the ensemble-mean prediction of image n.
std::vector<int> predicted_mask(const SegPrediction& pred, std::size_t n);

IouResult evaluate_miou(SegDpe& m, const Dataset& val, int batch_size = 8);

struct SegQueryEvent {
    int round;
    std::uint32_t image_id;
    int crop_col, crop_row;
    double score;
};

struct SegRoundRecord {
    int round;
    int labeled_crops;
    std::string acquisition;
    double val_miou;
    std::vector<double> per_class_iou;
    int train_epochs;
    double seconds;
};

struct SegExperimentRecord {
    std::vector<SegRoundRecord> rounds;
    std::vector<SegQueryEvent> query_log;
    std::uint64_t seed = 0;
    std::string acquisition;
    std::size_t val_size = 0;
};

using SegDpeFactory = std::function<SegDpe(std::uint64_t seed)>;

// Crop-grid active segmentation: units are grid crops, labels are purchased
// per crop, models retrain from scratch every round.
SegExperimentRecord run_active_seg(const Dataset& pool_images, const Dataset& val,
                                   const GrowthSchedule& schedule,
                                   const std::string& acquisition_name,
                                   const SegDpeFactory& factory, const TrainConfig& cfg,
                                   std::uint64_t experiment_seed,
                                   const ClassWeights* weights = nullptr,
                                   int grid_cols = 4, int grid_rows = 3);

}  // namespace dpe

#endif
