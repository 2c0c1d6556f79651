#ifndef DPE_DATA_IO_HPP
#define DPE_DATA_IO_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dpe/tensor.hpp"

namespace dpe {

// In-memory dataset. Classification: one label per input. Segmentation: one
// per-pixel label mask per input (flattened H*W, row-major).
struct Dataset {
    std::vector<Tensor> inputs;              // (C,H,W) images or (D,) vectors
    std::vector<int> labels;                 // classification targets
    std::vector<std::vector<int>> masks;     // segmentation targets
    int num_classes = 0;
    std::vector<std::pair<double, double>> channel_stats;  // (mean, std) per channel
    bool segmentation = false;

    std::size_t size() const { return inputs.size(); }
};

struct AugmentPolicy {
    int pad = 4;
    double hflip_prob = 0.5;
};

// IDX (MNIST-style): big-endian, u8 image magic 0x00000803, label magic
// 0x00000801. Pixels scaled to [0,1].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// CIFAR-10 binary: 3073-byte records (1 label byte + 3x32x32 pixels).
Dataset load_cifar_binary(const std::vector<std::string>& paths);

// Directory of paired name.ppm (P6 image) / name.pgm (P5 class-index mask).
Dataset load_seg_pairs(const std::string& dir, int num_classes);

// PPM/PGM writers for fixtures and the synth CLI.
void write_ppm(const std::string& path, const Tensor& image);      // (3,H,W) in [0,1]
void write_pgm(const std::string& path, const std::vector<int>& mask, int h, int w);

// Gaussian clusters around K centers on a circle of the given radius.
Dataset synth_blobs(int num_classes, int n, int dim, std::uint64_t seed,
                    double radius = 3.0, double spread = 1.0);

// Small images of rectangles and disks over background, plus a rare class of
// tiny squares present in only a fraction of images. Class-imbalanced by
// construction. K=4: 0 background, 1 rectangle, 2 disk, 3 rare.
Dataset synth_shapes_seg(int n, int height, int width, std::uint64_t seed,
                         double rare_image_fraction = 0.35);

// Per-channel mean-std normalization. Stats are computed from `ds` itself;
// normalize_with applies previously computed stats (val/test reuse train's).
Dataset normalize(const Dataset& ds);
Dataset normalize_with(const Dataset& ds,
                       const std::vector<std::pair<double, double>>& stats);
std::vector<std::pair<double, double>> channel_statistics(const Dataset& ds);

// Reflection-pad, random-crop back to the original size, and horizontal flip
// with probability hflip_prob. Masks (when present) get the identical
// spatial transform. Returns transformed copies of the selected items.
struct AugmentedBatch {
    std::vector<Tensor> inputs;
    std::vector<std::vector<int>> masks;
};
AugmentedBatch augment(const Dataset& ds, const std::vector<std::uint32_t>& indices,
                       const AugmentPolicy& policy, std::uint64_t seed);

// Stack per-item tensors into one batch tensor with a leading N dimension.
Tensor make_batch(const std::vector<Tensor>& items);
Tensor make_batch(const Dataset& ds, const std::vector<std::uint32_t>& indices);

}  // namespace dpe

#endif
