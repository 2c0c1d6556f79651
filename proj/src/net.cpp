#include "dpe/net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "dpe/errors.hpp"

namespace dpe {

namespace {
constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;  // running = (1-m)*running + m*batch
}  // namespace

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv2d: return "conv2d";
        case LayerKind::Linear: return "linear";
        case LayerKind::Relu: return "relu";
        case LayerKind::MaxPool2d: return "maxpool2d";
        case LayerKind::AvgPool2d: return "avgpool2d";
        case LayerKind::BatchNorm: return "batchnorm";
        case LayerKind::Softmax: return "softmax";
        case LayerKind::SkipStore: return "skip_store";
        case LayerKind::SkipAdd: return "skip_add";
        case LayerKind::Upsample: return "upsample";
    }
    return "?";
}

LayerSpec LayerSpec::conv2d(int ci, int co, int k, int stride, int padding) {
    if (ci < 1 || co < 1 || k < 1) throw ConfigError("conv2d: channels and kernel must be >= 1");
    LayerSpec s;
    s.kind = LayerKind::Conv2d;
    s.in_channels = ci;
    s.out_channels = co;
    s.kw = s.kh = k;
    s.stride = stride;
    s.padding = padding;
    return s;
}

LayerSpec LayerSpec::linear(int ci, int co) {
    if (ci < 1 || co < 1) throw ConfigError("linear: dims must be >= 1");
    LayerSpec s;
    s.kind = LayerKind::Linear;
    s.in_channels = ci;
    s.out_channels = co;
    return s;
}

LayerSpec LayerSpec::relu() {
    LayerSpec s;
    s.kind = LayerKind::Relu;
    return s;
}

LayerSpec LayerSpec::maxpool2d(int k, int stride) {
    LayerSpec s;
    s.kind = LayerKind::MaxPool2d;
    s.kw = s.kh = k;
    s.stride = stride > 0 ? stride : k;
    return s;
}

LayerSpec LayerSpec::avgpool2d(int k, int stride) {
    LayerSpec s;
    s.kind = LayerKind::AvgPool2d;
    s.kw = s.kh = k;
    s.stride = stride > 0 ? stride : k;
    return s;
}

LayerSpec LayerSpec::global_avgpool() {
    LayerSpec s;
    s.kind = LayerKind::AvgPool2d;
    s.global = true;
    return s;
}

LayerSpec LayerSpec::batchnorm(int channels) {
    if (channels < 1) throw ConfigError("batchnorm: channels must be >= 1");
    LayerSpec s;
    s.kind = LayerKind::BatchNorm;
    s.in_channels = s.out_channels = channels;
    return s;
}

LayerSpec LayerSpec::softmax() {
    LayerSpec s;
    s.kind = LayerKind::Softmax;
    return s;
}

LayerSpec LayerSpec::skip_store() {
    LayerSpec s;
    s.kind = LayerKind::SkipStore;
    return s;
}

LayerSpec LayerSpec::skip_add() {
    LayerSpec s;
    s.kind = LayerKind::SkipAdd;
    return s;
}

LayerSpec LayerSpec::upsample(int scale) {
    if (scale < 1) throw ConfigError("upsample: scale must be >= 1");
    LayerSpec s;
    s.kind = LayerKind::Upsample;
    s.scale = scale;
    return s;
}

Network::Network(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {
    first_param_.assign(layers_.size(), -1);
    first_buffer_.assign(layers_.size(), -1);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& l = layers_[i];
        std::string base = "l" + std::to_string(i);
        switch (l.kind) {
            case LayerKind::Conv2d: {
                first_param_[i] = static_cast<int>(params_.size());
                params_.emplace_back(std::vector<std::size_t>{
                    (std::size_t)l.out_channels, (std::size_t)l.in_channels,
                    (std::size_t)l.kh, (std::size_t)l.kw});
                param_infos_.push_back({base + ".conv.weight", ParamRole::ConvWeight,
                                        (int)i, 0.0, 2.0 / (l.out_channels * l.kw * l.kh)});
                break;
            }
            case LayerKind::Linear: {
                first_param_[i] = static_cast<int>(params_.size());
                params_.emplace_back(std::vector<std::size_t>{
                    (std::size_t)l.out_channels, (std::size_t)l.in_channels});
                param_infos_.push_back({base + ".linear.weight", ParamRole::LinearWeight,
                                        (int)i, 0.0, 2.0 / l.out_channels});
                break;
            }
            case LayerKind::BatchNorm: {
                std::vector<std::size_t> cshape{(std::size_t)l.in_channels};
                first_param_[i] = static_cast<int>(params_.size());
                params_.emplace_back(cshape);
                param_infos_.push_back({base + ".bn.weight", ParamRole::BnWeight, (int)i, 1.0, 0.01});
                params_.emplace_back(cshape);
                param_infos_.push_back({base + ".bn.bias", ParamRole::BnBias, (int)i, 0.0, 0.01});
                first_buffer_[i] = static_cast<int>(buffers_.size());
                buffers_.emplace_back(cshape);
                buffer_infos_.push_back({base + ".bn.running_mean", ParamRole::BnRunningMean, (int)i, 0.0, 0.0});
                buffers_.emplace_back(cshape);
                buffer_infos_.push_back({base + ".bn.running_var", ParamRole::BnRunningVar, (int)i, 0.0, 0.0});
                buffers_.back().fill(1.0);
                break;
            }
            default:
                break;
        }
        if (l.kind == LayerKind::Softmax && i + 1 != layers_.size())
            throw ConfigError("softmax must be the terminal layer");
    }
    // batchnorm params start at their prior means
    for (std::size_t p = 0; p < params_.size(); ++p) {
        if (param_infos_[p].role == ParamRole::BnWeight) params_[p].fill(1.0);
    }
}

namespace {

void check_finite(const Tensor& t, std::size_t layer_index, LayerKind kind) {
    if (!t.all_finite())
        throw NumericError("non-finite activation at layer " + std::to_string(layer_index) +
                           " (" + layer_kind_name(kind) + ")");
}

Tensor conv_forward(const Tensor& in, const Tensor& w, const LayerSpec& l) {
    if (in.ndim() != 4) throw ConfigError("conv2d: expected 4D input");
    const std::size_t N = in.dim(0), Ci = in.dim(1), H = in.dim(2), W = in.dim(3);
    if ((int)Ci != l.in_channels) throw ConfigError("conv2d: input channel mismatch");
    const int s = l.stride, p = l.padding;
    const int Ho = ((int)H + 2 * p - l.kh) / s + 1;
    const int Wo = ((int)W + 2 * p - l.kw) / s + 1;
    if (Ho < 1 || Wo < 1) throw ConfigError("conv2d: input smaller than kernel");
    Tensor out({N, (std::size_t)l.out_channels, (std::size_t)Ho, (std::size_t)Wo});
    for (std::size_t n = 0; n < N; ++n)
        for (int co = 0; co < l.out_channels; ++co)
            for (int ho = 0; ho < Ho; ++ho)
                for (int wo = 0; wo < Wo; ++wo) {
                    double acc = 0.0;
                    for (std::size_t ci = 0; ci < Ci; ++ci)
                        for (int ky = 0; ky < l.kh; ++ky) {
                            const int hi = ho * s + ky - p;
                            if (hi < 0 || hi >= (int)H) continue;
                            for (int kx = 0; kx < l.kw; ++kx) {
                                const int wi = wo * s + kx - p;
                                if (wi < 0 || wi >= (int)W) continue;
                                acc += in.at4(n, ci, hi, wi) * w.at4(co, ci, ky, kx);
                            }
                        }
                    out.at4(n, co, ho, wo) = acc;
                }
    return out;
}

void conv_backward(const Tensor& in, const Tensor& w, const LayerSpec& l,
                   const Tensor& gout, Tensor& gw, Tensor& gin) {
    const std::size_t N = in.dim(0), Ci = in.dim(1), H = in.dim(2), W = in.dim(3);
    const std::size_t Ho = gout.dim(2), Wo = gout.dim(3);
    const int s = l.stride, p = l.padding;
    gw = Tensor::zeros_like(w);
    gin = Tensor::zeros_like(in);
    for (std::size_t n = 0; n < N; ++n)
        for (int co = 0; co < l.out_channels; ++co)
            for (std::size_t ho = 0; ho < Ho; ++ho)
                for (std::size_t wo = 0; wo < Wo; ++wo) {
                    const double g = gout.at4(n, co, ho, wo);
                    if (g == 0.0) continue;
                    for (std::size_t ci = 0; ci < Ci; ++ci)
                        for (int ky = 0; ky < l.kh; ++ky) {
                            const int hi = (int)ho * s + ky - p;
                            if (hi < 0 || hi >= (int)H) continue;
                            for (int kx = 0; kx < l.kw; ++kx) {
                                const int wi = (int)wo * s + kx - p;
                                if (wi < 0 || wi >= (int)W) continue;
                                gw.at4(co, ci, ky, kx) += g * in.at4(n, ci, hi, wi);
                                gin.at4(n, ci, hi, wi) += g * w.at4(co, ci, ky, kx);
                            }
                        }
                }
}

void softmax_rows(const double* in, double* out, std::size_t k, std::size_t stride) {
    double mx = in[0];
    for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, in[i * stride]);
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        out[i * stride] = std::exp(in[i * stride] - mx);
        sum += out[i * stride];
    }
    for (std::size_t i = 0; i < k; ++i) out[i * stride] /= sum;
}

}  // namespace

Tensor Network::forward(const Tensor& input, bool training) {
    cache_.assign(layers_.size(), LayerCache{});
    cached_training_ = training;
    std::vector<Tensor> skip_stack;
    Tensor x = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& l = layers_[i];
        LayerCache& c = cache_[i];
        c.input = x;
        switch (l.kind) {
            case LayerKind::Conv2d:
                x = conv_forward(x, params_[first_param_[i]], l);
                break;
            case LayerKind::Linear: {
                if (x.ndim() != 2) throw ConfigError("linear: expected 2D input");
                if ((int)x.dim(1) != l.in_channels) throw ConfigError("linear: input dim mismatch");
                const Tensor& w = params_[first_param_[i]];
                const std::size_t N = x.dim(0);
                Tensor out({N, (std::size_t)l.out_channels});
                for (std::size_t n = 0; n < N; ++n)
                    for (int o = 0; o < l.out_channels; ++o) {
                        double acc = 0.0;
                        for (int d = 0; d < l.in_channels; ++d)
                            acc += x.at2(n, d) * w.at2(o, d);
                        out.at2(n, o) = acc;
                    }
                x = std::move(out);
                break;
            }
            case LayerKind::Relu: {
                Tensor out = x;
                for (double& v : out.vec()) v = v > 0.0 ? v : 0.0;
                x = std::move(out);
                break;
            }
            case LayerKind::MaxPool2d: {
                if (x.ndim() != 4) throw ConfigError("maxpool2d: expected 4D input");
                const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
                const int s = l.stride;
                const int Ho = ((int)H - l.kh) / s + 1;
                const int Wo = ((int)W - l.kw) / s + 1;
                if (Ho < 1 || Wo < 1) throw ConfigError("maxpool2d: input smaller than kernel");
                Tensor out({N, C, (std::size_t)Ho, (std::size_t)Wo});
                c.argmax.resize(out.numel());
                std::size_t oi = 0;
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t ch = 0; ch < C; ++ch)
                        for (int ho = 0; ho < Ho; ++ho)
                            for (int wo = 0; wo < Wo; ++wo, ++oi) {
                                double best = -std::numeric_limits<double>::infinity();
                                std::size_t besti = 0;
                                for (int ky = 0; ky < l.kh; ++ky)
                                    for (int kx = 0; kx < l.kw; ++kx) {
                                        const std::size_t hi = ho * s + ky, wi = wo * s + kx;
                                        const std::size_t idx = ((n * C + ch) * H + hi) * W + wi;
                                        if (x[idx] > best) { best = x[idx]; besti = idx; }
                                    }
                                out[oi] = best;
                                c.argmax[oi] = besti;
                            }
                x = std::move(out);
                break;
            }
            case LayerKind::AvgPool2d: {
                if (x.ndim() != 4) throw ConfigError("avgpool2d: expected 4D input");
                const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
                if (l.global) {
                    Tensor out({N, C});
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t ch = 0; ch < C; ++ch) {
                            double acc = 0.0;
                            for (std::size_t h = 0; h < H; ++h)
                                for (std::size_t w2 = 0; w2 < W; ++w2)
                                    acc += x.at4(n, ch, h, w2);
                            out.at2(n, ch) = acc / double(H * W);
                        }
                    x = std::move(out);
                } else {
                    const int s = l.stride;
                    const int Ho = ((int)H - l.kh) / s + 1;
                    const int Wo = ((int)W - l.kw) / s + 1;
                    if (Ho < 1 || Wo < 1) throw ConfigError("avgpool2d: input smaller than kernel");
                    Tensor out({N, C, (std::size_t)Ho, (std::size_t)Wo});
                    const double inv = 1.0 / (l.kw * l.kh);
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t ch = 0; ch < C; ++ch)
                            for (int ho = 0; ho < Ho; ++ho)
                                for (int wo = 0; wo < Wo; ++wo) {
                                    double acc = 0.0;
                                    for (int ky = 0; ky < l.kh; ++ky)
                                        for (int kx = 0; kx < l.kw; ++kx)
                                            acc += x.at4(n, ch, ho * s + ky, wo * s + kx);
                                    out.at4(n, ch, ho, wo) = acc * inv;
                                }
                    x = std::move(out);
                }
                break;
            }
            case LayerKind::BatchNorm: {
                if (x.ndim() != 4) throw ConfigError("batchnorm: expected 4D input");
                const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
                if ((int)C != l.in_channels) throw ConfigError("batchnorm: channel mismatch");
                const Tensor& gamma = params_[first_param_[i]];
                const Tensor& beta = params_[first_param_[i] + 1];
                Tensor& rmean = buffers_[first_buffer_[i]];
                Tensor& rvar = buffers_[first_buffer_[i] + 1];
                const double M = double(N * H * W);
                Tensor out({N, C, H, W});
                c.bn_xhat = Tensor({N, C, H, W});
                c.bn_invstd.assign(C, 0.0);
                for (std::size_t ch = 0; ch < C; ++ch) {
                    double mean, var;
                    if (training) {
                        double sum = 0.0;
                        for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t h = 0; h < H; ++h)
                                for (std::size_t w2 = 0; w2 < W; ++w2)
                                    sum += x.at4(n, ch, h, w2);
                        mean = sum / M;
                        double ss = 0.0;
                        for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t h = 0; h < H; ++h)
                                for (std::size_t w2 = 0; w2 < W; ++w2) {
                                    const double d = x.at4(n, ch, h, w2) - mean;
                                    ss += d * d;
                                }
                        var = ss / M;
                        rmean[ch] = (1.0 - kBnMomentum) * rmean[ch] + kBnMomentum * mean;
                        rvar[ch] = (1.0 - kBnMomentum) * rvar[ch] + kBnMomentum * var;
                    } else {
                        mean = rmean[ch];
                        var = rvar[ch];
                    }
                    const double invstd = 1.0 / std::sqrt(var + kBnEps);
                    c.bn_invstd[ch] = invstd;
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t h = 0; h < H; ++h)
                            for (std::size_t w2 = 0; w2 < W; ++w2) {
                                const double xh = (x.at4(n, ch, h, w2) - mean) * invstd;
                                c.bn_xhat.at4(n, ch, h, w2) = xh;
                                out.at4(n, ch, h, w2) = gamma[ch] * xh + beta[ch];
                            }
                }
                x = std::move(out);
                break;
            }
            case LayerKind::Softmax: {
                Tensor out = x;
                if (x.ndim() == 2) {
                    for (std::size_t n = 0; n < x.dim(0); ++n)
                        softmax_rows(x.data() + n * x.dim(1), out.data() + n * x.dim(1), x.dim(1), 1);
                } else if (x.ndim() == 4) {
                    const std::size_t N = x.dim(0), K = x.dim(1), H = x.dim(2), W = x.dim(3);
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t h = 0; h < H; ++h)
                            for (std::size_t w2 = 0; w2 < W; ++w2) {
                                const std::size_t off = ((n * K) * H + h) * W + w2;
                                softmax_rows(x.data() + off, out.data() + off, K, H * W);
                            }
                } else {
                    throw ConfigError("softmax: expected 2D or 4D input");
                }
                x = std::move(out);
                break;
            }
            case LayerKind::SkipStore:
                skip_stack.push_back(x);
                break;
            case LayerKind::SkipAdd: {
                if (skip_stack.empty()) throw ConfigError("skip_add without skip_store");
                const Tensor& s = skip_stack.back();
                if (!s.same_shape(x)) throw ConfigError("skip_add: shape mismatch with stored skip");
                Tensor out = x;
                for (std::size_t j = 0; j < out.numel(); ++j) out[j] += s[j];
                skip_stack.pop_back();
                x = std::move(out);
                break;
            }
            case LayerKind::Upsample: {
                if (x.ndim() != 4) throw ConfigError("upsample: expected 4D input");
                const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
                const std::size_t f = (std::size_t)l.scale;
                Tensor out({N, C, H * f, W * f});
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t ch = 0; ch < C; ++ch)
                        for (std::size_t h = 0; h < H * f; ++h)
                            for (std::size_t w2 = 0; w2 < W * f; ++w2)
                                out.at4(n, ch, h, w2) = x.at4(n, ch, h / f, w2 / f);
                x = std::move(out);
                break;
            }
        }
        check_finite(x, i, l.kind);
        c.output = x;
    }
    forward_done_ = true;
    return x;
}

Network::Grads Network::backward(const Tensor& output_grad) {
    if (!forward_done_) throw UsageError("backward called before forward");
    Grads grads;
    grads.params.reserve(params_.size());
    for (const Tensor& p : params_) grads.params.push_back(Tensor::zeros_like(p));
    std::vector<Tensor> skip_grads;
    Tensor g = output_grad;
    for (std::size_t ii = layers_.size(); ii-- > 0;) {
        const LayerSpec& l = layers_[ii];
        const LayerCache& c = cache_[ii];
        if (!g.same_shape(c.output) && l.kind != LayerKind::SkipStore)
            throw ConfigError("backward: gradient shape mismatch at layer " + std::to_string(ii));
        switch (l.kind) {
            case LayerKind::Conv2d: {
                Tensor gin;
                conv_backward(c.input, params_[first_param_[ii]], l, g,
                              grads.params[first_param_[ii]], gin);
                g = std::move(gin);
                break;
            }
            case LayerKind::Linear: {
                const Tensor& w = params_[first_param_[ii]];
                Tensor& gw = grads.params[first_param_[ii]];
                const std::size_t N = c.input.dim(0);
                Tensor gin({N, (std::size_t)l.in_channels});
                for (std::size_t n = 0; n < N; ++n)
                    for (int o = 0; o < l.out_channels; ++o) {
                        const double go = g.at2(n, o);
                        if (go == 0.0) continue;
                        for (int d = 0; d < l.in_channels; ++d) {
                            gw.at2(o, d) += go * c.input.at2(n, d);
                            gin.at2(n, d) += go * w.at2(o, d);
                        }
                    }
                g = std::move(gin);
                break;
            }
            case LayerKind::Relu: {
                Tensor gin = g;
                for (std::size_t j = 0; j < gin.numel(); ++j)
                    if (c.input[j] <= 0.0) gin[j] = 0.0;
                g = std::move(gin);
                break;
            }
            case LayerKind::MaxPool2d: {
                Tensor gin = Tensor::zeros_like(c.input);
                for (std::size_t j = 0; j < g.numel(); ++j) gin[c.argmax[j]] += g[j];
                g = std::move(gin);
                break;
            }
            case LayerKind::AvgPool2d: {
                const std::size_t N = c.input.dim(0), C = c.input.dim(1),
                                  H = c.input.dim(2), W = c.input.dim(3);
                Tensor gin = Tensor::zeros_like(c.input);
                if (l.global) {
                    const double inv = 1.0 / double(H * W);
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t ch = 0; ch < C; ++ch) {
                            const double go = g.at2(n, ch) * inv;
                            for (std::size_t h = 0; h < H; ++h)
                                for (std::size_t w2 = 0; w2 < W; ++w2)
                                    gin.at4(n, ch, h, w2) += go;
                        }
                } else {
                    const int s = l.stride;
                    const double inv = 1.0 / (l.kw * l.kh);
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t ch = 0; ch < C; ++ch)
                            for (std::size_t ho = 0; ho < g.dim(2); ++ho)
                                for (std::size_t wo = 0; wo < g.dim(3); ++wo) {
                                    const double go = g.at4(n, ch, ho, wo) * inv;
                                    for (int ky = 0; ky < l.kh; ++ky)
                                        for (int kx = 0; kx < l.kw; ++kx)
                                            gin.at4(n, ch, ho * s + ky, wo * s + kx) += go;
                                }
                }
                g = std::move(gin);
                break;
            }
            case LayerKind::BatchNorm: {
                const std::size_t N = c.input.dim(0), C = c.input.dim(1),
                                  H = c.input.dim(2), W = c.input.dim(3);
                const Tensor& gamma = params_[first_param_[ii]];
                Tensor& ggamma = grads.params[first_param_[ii]];
                Tensor& gbeta = grads.params[first_param_[ii] + 1];
                const double M = double(N * H * W);
                Tensor gin({N, C, H, W});
                for (std::size_t ch = 0; ch < C; ++ch) {
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t h = 0; h < H; ++h)
                            for (std::size_t w2 = 0; w2 < W; ++w2) {
                                const double go = g.at4(n, ch, h, w2);
                                sum_g += go;
                                sum_gx += go * c.bn_xhat.at4(n, ch, h, w2);
                            }
                    ggamma[ch] += sum_gx;
                    gbeta[ch] += sum_g;
                    const double invstd = c.bn_invstd[ch];
                    if (cached_training_) {
                        for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t h = 0; h < H; ++h)
                                for (std::size_t w2 = 0; w2 < W; ++w2) {
                                    const double go = g.at4(n, ch, h, w2);
                                    const double xh = c.bn_xhat.at4(n, ch, h, w2);
                                    gin.at4(n, ch, h, w2) =
                                        gamma[ch] * invstd * (go - sum_g / M - xh * sum_gx / M);
                                }
                    } else {
                        for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t h = 0; h < H; ++h)
                                for (std::size_t w2 = 0; w2 < W; ++w2)
                                    gin.at4(n, ch, h, w2) = g.at4(n, ch, h, w2) * gamma[ch] * invstd;
                    }
                }
                g = std::move(gin);
                break;
            }
            case LayerKind::Softmax: {
                const Tensor& p = c.output;
                Tensor gin = Tensor::zeros_like(g);
                auto bw_vec = [&](std::size_t off, std::size_t k, std::size_t stride) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < k; ++j)
                        dot += g[off + j * stride] * p[off + j * stride];
                    for (std::size_t j = 0; j < k; ++j)
                        gin[off + j * stride] =
                            p[off + j * stride] * (g[off + j * stride] - dot);
                };
                if (p.ndim() == 2) {
                    for (std::size_t n = 0; n < p.dim(0); ++n) bw_vec(n * p.dim(1), p.dim(1), 1);
                } else {
                    const std::size_t N = p.dim(0), K = p.dim(1), H = p.dim(2), W = p.dim(3);
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t h = 0; h < H; ++h)
                            for (std::size_t w2 = 0; w2 < W; ++w2)
                                bw_vec(((n * K) * H + h) * W + w2, K, H * W);
                }
                g = std::move(gin);
                break;
            }
            case LayerKind::SkipStore: {
                if (skip_grads.empty()) throw UsageError("skip gradient stack underflow");
                Tensor gin = g;
                const Tensor& extra = skip_grads.back();
                for (std::size_t j = 0; j < gin.numel(); ++j) gin[j] += extra[j];
                skip_grads.pop_back();
                g = std::move(gin);
                break;
            }
            case LayerKind::SkipAdd:
                skip_grads.push_back(g);
                break;
            case LayerKind::Upsample: {
                const std::size_t N = c.input.dim(0), C = c.input.dim(1),
                                  H = c.input.dim(2), W = c.input.dim(3);
                const std::size_t f = (std::size_t)l.scale;
                Tensor gin = Tensor::zeros_like(c.input);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t ch = 0; ch < C; ++ch)
                        for (std::size_t h = 0; h < H * f; ++h)
                            for (std::size_t w2 = 0; w2 < W * f; ++w2)
                                gin.at4(n, ch, h / f, w2 / f) += g.at4(n, ch, h, w2);
                g = std::move(gin);
                break;
            }
        }
    }
    grads.input = std::move(g);
    return grads;
}

LossResult cross_entropy(const Tensor& probs, const std::vector<int>& targets,
                         const std::vector<std::uint8_t>* mask) {
    LossResult r;
    r.grad = Tensor::zeros_like(probs);
    std::size_t K, positions;
    if (probs.ndim() == 2) {
        K = probs.dim(1);
        positions = probs.dim(0);
    } else if (probs.ndim() == 4) {
        K = probs.dim(1);
        positions = probs.dim(0) * probs.dim(2) * probs.dim(3);
    } else {
        throw ConfigError("cross_entropy: expected 2D or 4D probabilities");
    }
    if (targets.size() != positions)
        throw ConfigError("cross_entropy: target count mismatch");
    if (mask && mask->size() != positions)
        throw ConfigError("cross_entropy: mask size mismatch");

    auto prob_index = [&](std::size_t pos, std::size_t k) -> std::size_t {
        if (probs.ndim() == 2) return pos * K + k;
        const std::size_t HW = probs.dim(2) * probs.dim(3);
        const std::size_t n = pos / HW, hw = pos % HW;
        return (n * K + k) * HW + hw;
    };

    std::size_t count = 0;
    for (std::size_t pos = 0; pos < positions; ++pos) {
        if (mask && !(*mask)[pos]) continue;
        ++count;
    }
    if (count == 0) return r;  // empty-mask convention: zero loss, zero gradient

    double loss = 0.0;
    for (std::size_t pos = 0; pos < positions; ++pos) {
        if (mask && !(*mask)[pos]) continue;
        const int t = targets[pos];
        if (t < 0 || (std::size_t)t >= K)
            throw DataError("cross_entropy: target index " + std::to_string(t) +
                            " out of range for K=" + std::to_string(K));
        const std::size_t idx = prob_index(pos, (std::size_t)t);
        loss += -std::log(probs[idx]);
        r.grad[idx] = -1.0 / (probs[idx] * double(count));
    }
    r.loss = loss / double(count);
    return r;
}

SgdState SgdState::make(const Network& net, double lr, double momentum) {
    if (lr <= 0.0) throw ConfigError("sgd: learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("sgd: momentum must be in [0,1)");
    SgdState s;
    s.learning_rate = lr;
    s.momentum = momentum;
    for (const Tensor& p : net.params()) s.velocity.push_back(Tensor::zeros_like(p));
    return s;
}

void sgd_step(Network& net, const std::vector<Tensor>& grads, SgdState& state) {
    auto& params = net.params();
    if (grads.size() != params.size() || state.velocity.size() != params.size())
        throw ConfigError("sgd_step: gradient/parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!grads[i].same_shape(params[i]))
            throw ConfigError("sgd_step: gradient shape mismatch");
        Tensor& v = state.velocity[i];
        Tensor& p = params[i];
        for (std::size_t j = 0; j < p.numel(); ++j) {
            v[j] = state.momentum * v[j] + grads[i][j];
            p[j] -= state.learning_rate * v[j];
        }
    }
}

void he_initialize(Network& net, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto& params = net.params();
    const auto& infos = net.param_infos();
    for (std::size_t i = 0; i < params.size(); ++i) {
        switch (infos[i].role) {
            case ParamRole::ConvWeight:
            case ParamRole::LinearWeight: {
                std::normal_distribution<double> dist(0.0, std::sqrt(infos[i].prior_var));
                for (double& v : params[i].vec()) v = (double)(float)dist(rng);
                break;
            }
            case ParamRole::BnWeight:
                params[i].fill(1.0);
                break;
            case ParamRole::BnBias:
                params[i].fill(0.0);
                break;
            default:
                break;
        }
    }
    // reset running stats
    auto& bufs = net.buffers();
    const auto& binfos = net.buffer_infos();
    for (std::size_t i = 0; i < bufs.size(); ++i)
        bufs[i].fill(binfos[i].role == ParamRole::BnRunningVar ? 1.0 : 0.0);
}

std::vector<LayerSpec> make_mlp(int in_dim, int hidden, int num_classes) {
    return {
        LayerSpec::linear(in_dim, hidden),
        LayerSpec::relu(),
        LayerSpec::linear(hidden, hidden),
        LayerSpec::relu(),
        LayerSpec::linear(hidden, num_classes),
        LayerSpec::softmax(),
    };
}

namespace {
void append_block(std::vector<LayerSpec>& v, int ch) {
    v.push_back(LayerSpec::skip_store());
    v.push_back(LayerSpec::conv2d(ch, ch, 3, 1, 1));
    v.push_back(LayerSpec::batchnorm(ch));
    v.push_back(LayerSpec::relu());
    v.push_back(LayerSpec::conv2d(ch, ch, 3, 1, 1));
    v.push_back(LayerSpec::batchnorm(ch));
    v.push_back(LayerSpec::skip_add());
    v.push_back(LayerSpec::relu());
}
void append_down(std::vector<LayerSpec>& v, int ci, int co) {
    v.push_back(LayerSpec::conv2d(ci, co, 3, 2, 1));
    v.push_back(LayerSpec::batchnorm(co));
    v.push_back(LayerSpec::relu());
}
}  // namespace

std::vector<LayerSpec> make_residual_cnn(int in_channels, int num_classes, int base_width) {
    const int w = base_width;
    std::vector<LayerSpec> v;
    v.push_back(LayerSpec::conv2d(in_channels, w, 3, 1, 1));
    v.push_back(LayerSpec::batchnorm(w));
    v.push_back(LayerSpec::relu());
    append_block(v, w);
    append_down(v, w, 2 * w);
    append_block(v, 2 * w);
    append_down(v, 2 * w, 4 * w);
    append_block(v, 4 * w);
    append_block(v, 4 * w);
    v.push_back(LayerSpec::global_avgpool());
    v.push_back(LayerSpec::linear(4 * w, num_classes));
    v.push_back(LayerSpec::softmax());
    return v;
}

std::vector<LayerSpec> make_seg_encoder(int in_channels, int width) {
    std::vector<LayerSpec> v;
    append_down(v, in_channels, width);
    append_down(v, width, 2 * width);
    append_down(v, 2 * width, 2 * width);
    return v;  // features at 1/8 input resolution
}

std::vector<LayerSpec> make_seg_head(int feat_channels, int hidden, int num_classes, int upscale) {
    std::vector<LayerSpec> v;
    v.push_back(LayerSpec::conv2d(feat_channels, hidden, 1));
    v.push_back(LayerSpec::relu());
    v.push_back(LayerSpec::conv2d(hidden, num_classes, 1));
    v.push_back(LayerSpec::upsample(upscale));
    v.push_back(LayerSpec::softmax());
    return v;
}

}  // namespace dpe
