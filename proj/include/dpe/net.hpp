#ifndef DPE_NET_HPP
#define DPE_NET_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "dpe/tensor.hpp"

namespace dpe {

enum class LayerKind : std::uint8_t {
    Conv2d,
    Linear,
    Relu,
    MaxPool2d,
    AvgPool2d,
    BatchNorm,
    Softmax,
    SkipStore,   // pushes the running activation onto the skip stack
    SkipAdd,     // pops and adds (identity residual connection)
    Upsample,    // nearest-neighbor spatial upsampling
};

const char* layer_kind_name(LayerKind k);

struct LayerSpec {
    LayerKind kind;
    int in_channels = 0;
    int out_channels = 0;
    int kw = 1, kh = 1;
    int stride = 1;
    int padding = 0;
    int scale = 1;        // upsample factor
    bool global = false;  // avgpool over the full map, output (N, C)

    static LayerSpec conv2d(int ci, int co, int k, int stride = 1, int padding = 0);
    static LayerSpec linear(int ci, int co);
    static LayerSpec relu();
    static LayerSpec maxpool2d(int k, int stride = 0);
    static LayerSpec avgpool2d(int k, int stride = 0);
    static LayerSpec global_avgpool();
    static LayerSpec batchnorm(int channels);
    static LayerSpec softmax();
    static LayerSpec skip_store();
    static LayerSpec skip_add();
    static LayerSpec upsample(int scale);
};

// Role of a trainable parameter or batchnorm buffer; drives prior selection
// and checkpoint tagging.
enum class ParamRole : std::uint8_t {
    ConvWeight = 0,
    LinearWeight = 1,
    BnWeight = 2,
    BnBias = 3,
    BnRunningMean = 4,  // buffers, not trainable
    BnRunningVar = 5,
};

struct ParamInfo {
    std::string name;
    ParamRole role;
    int layer_index;
    double prior_mu;
    double prior_var;
};

// Feed-forward network over an ordered layer list. Forward caches what
// backward needs; backward must follow a forward of the same batch.
class Network {
public:
    Network() = default;
    explicit Network(std::vector<LayerSpec> layers);

    const std::vector<LayerSpec>& layers() const { return layers_; }
    std::vector<Tensor>& params() { return params_; }
    const std::vector<Tensor>& params() const { return params_; }
    std::vector<Tensor>& buffers() { return buffers_; }
    const std::vector<Tensor>& buffers() const { return buffers_; }
    const std::vector<ParamInfo>& param_infos() const { return param_infos_; }
    const std::vector<ParamInfo>& buffer_infos() const { return buffer_infos_; }

    Tensor forward(const Tensor& input, bool training);

    struct Grads {
        std::vector<Tensor> params;  // one per trainable parameter
        Tensor input;                // gradient w.r.t. the network input
    };
    // output_grad: dLoss/dOutput for the batch last passed through forward.
    Grads backward(const Tensor& output_grad);

private:
    struct LayerCache {
        Tensor input;
        Tensor output;                    // kept for relu/softmax/batchnorm
        std::vector<std::size_t> argmax;  // maxpool winner indices
        Tensor bn_xhat;
        std::vector<double> bn_invstd;
    };

    std::vector<LayerSpec> layers_;
    std::vector<Tensor> params_;
    std::vector<Tensor> buffers_;
    std::vector<ParamInfo> param_infos_;
    std::vector<ParamInfo> buffer_infos_;
    std::vector<int> first_param_;   // per layer: index into params_, -1 if none
    std::vector<int> first_buffer_;  // per layer: index into buffers_, -1 if none
    std::vector<LayerCache> cache_;
    bool forward_done_ = false;
    bool cached_training_ = false;
};

struct LossResult {
    double loss = 0.0;
    Tensor grad;  // w.r.t. the probability tensor
};

// Mean negative log probability of the targets over unmasked positions.
// probs: (N,K) with targets of length N, or (N,K,H,W) with targets of
// length N*H*W in (n,h,w) order. A null mask means all positions count.
LossResult cross_entropy(const Tensor& probs, const std::vector<int>& targets,
                         const std::vector<std::uint8_t>* mask = nullptr);

struct SgdState {
    double learning_rate;
    double momentum;
    std::vector<Tensor> velocity;

    static SgdState make(const Network& net, double lr, double momentum);
};

// v <- momentum*v + g;  theta <- theta - lr*v
void sgd_step(Network& net, const std::vector<Tensor>& grads, SgdState& state);

// He-style initialization: conv/linear weights ~ N(0, 2/(n_o*w*h)),
// batchnorm weight=1 bias=0. Reproducible from seed; draws are snapped to
// float precision so checkpoints round-trip exactly.
void he_initialize(Network& net, std::uint64_t seed);

// Ready-made architectures.
std::vector<LayerSpec> make_mlp(int in_dim, int hidden, int num_classes);
std::vector<LayerSpec> make_residual_cnn(int in_channels, int num_classes, int base_width = 16);
std::vector<LayerSpec> make_seg_encoder(int in_channels, int width);
std::vector<LayerSpec> make_seg_head(int feat_channels, int hidden, int num_classes, int upscale);

}  // namespace dpe

#endif
