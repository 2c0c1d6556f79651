#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "dpe/errors.hpp"
#include "dpe/net.hpp"

using namespace dpe;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng,
                     double scale = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, scale);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
    return t;
}

// Frozen straight-loop convolution oracle (no bias, zero padding).
Tensor naive_conv(const Tensor& x, const Tensor& w, int stride, int pad) {
    const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Co = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    const std::size_t Ho = (H + 2 * std::size_t(pad) - KH) / std::size_t(stride) + 1;
    const std::size_t Wo = (W + 2 * std::size_t(pad) - KW) / std::size_t(stride) + 1;
    Tensor out({N, Co, Ho, Wo});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Co; ++co)
            for (std::size_t ho = 0; ho < Ho; ++ho)
                for (std::size_t wo = 0; wo < Wo; ++wo) {
                    double acc = 0.0;
                    for (std::size_t ci = 0; ci < Ci; ++ci)
                        for (std::size_t kh = 0; kh < KH; ++kh)
                            for (std::size_t kw = 0; kw < KW; ++kw) {
                                const long ih = long(ho) * stride + long(kh) - pad;
                                const long iw = long(wo) * stride + long(kw) - pad;
                                if (ih < 0 || iw < 0 || ih >= long(H) || iw >= long(W))
                                    continue;
                                acc += x.at4(n, ci, std::size_t(ih), std::size_t(iw)) *
                                       w.at4(co, ci, kh, kw);
                            }
                    out.at4(n, co, ho, wo) = acc;
                }
    return out;
}

double loss_of(Network& net, const Tensor& input, const std::vector<int>& targets) {
    const Tensor probs = net.forward(input, true);
    return cross_entropy(probs, targets).loss;
}

// Central finite differences on every trainable parameter.
void fd_check(Network& net, const Tensor& input, const std::vector<int>& targets,
              double step = 1e-4, double rel_tol = 1e-3) {
    const Tensor probs = net.forward(input, true);
    const LossResult ce = cross_entropy(probs, targets);
    const std::vector<Tensor> analytic = net.backward(ce.grad).params;
    for (std::size_t p = 0; p < net.params().size(); ++p) {
        for (std::size_t j = 0; j < net.params()[p].numel(); ++j) {
            const double orig = net.params()[p][j];
            net.params()[p][j] = orig + step;
            const double lp = loss_of(net, input, targets);
            net.params()[p][j] = orig - step;
            const double lm = loss_of(net, input, targets);
            net.params()[p][j] = orig;
            const double fd = (lp - lm) / (2.0 * step);
            const double a = analytic[p][j];
            const double denom = std::max({std::abs(fd), std::abs(a), 1e-4});
            CHECK(std::abs(fd - a) / denom < rel_tol);
        }
    }
}

}  // namespace

TEST_CASE("zero-weight linear+softmax gives the uniform distribution") {
    Network net({LayerSpec::linear(3, 4), LayerSpec::softmax()});
    Tensor x({2, 3}, {1.0, -2.0, 0.5, 3.0, 0.0, -1.0});
    const Tensor out = net.forward(x, false);
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(0.25));
}

TEST_CASE("identity 1x1 conv passes the input through") {
    Network net({LayerSpec::conv2d(2, 2, 1)});
    net.params()[0].fill(0.0);
    net.params()[0].at4(0, 0, 0, 0) = 1.0;
    net.params()[0].at4(1, 1, 0, 0) = 1.0;
    std::mt19937_64 rng(7);
    const Tensor x = random_tensor({1, 2, 3, 3}, rng);
    const Tensor out = net.forward(x, false);
    REQUIRE(out.same_shape(x));
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(out[i] == doctest::Approx(x[i]));
}

TEST_CASE("convolution matches the naive nested-loop oracle") {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        const int stride = 1 + int(rng() % 2);
        const int pad = int(rng() % 2);
        const int k = 1 + int(rng() % 3);
        const int ci = 1 + int(rng() % 3), co = 1 + int(rng() % 3);
        const int hw = k + 2 + int(rng() % 4);
        Network net({LayerSpec::conv2d(ci, co, k, stride, pad)});
        he_initialize(net, rng());
        const Tensor x = random_tensor({2, std::size_t(ci), std::size_t(hw), std::size_t(hw)}, rng);
        const Tensor got = net.forward(x, false);
        const Tensor want = naive_conv(x, net.params()[0], stride, pad);
        REQUIRE(got.same_shape(want));
        for (std::size_t i = 0; i < got.numel(); ++i)
            CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-6));
    }
}

TEST_CASE("softmax rows sum to 1 for arbitrary logits") {
    Network net({LayerSpec::linear(5, 7), LayerSpec::softmax()});
    std::mt19937_64 rng(3);
    he_initialize(net, 11);
    const Tensor x = random_tensor({6, 5}, rng, 10.0);
    const Tensor out = net.forward(x, false);
    for (std::size_t n = 0; n < 6; ++n) {
        double s = 0.0;
        for (std::size_t k = 0; k < 7; ++k) {
            CHECK(out.at2(n, k) >= 0.0);
            s += out.at2(n, k);
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("backward before forward is a usage error") {
    Network net({LayerSpec::linear(3, 2), LayerSpec::softmax()});
    Tensor g({2, 2});
    CHECK_THROWS_AS(net.backward(g), UsageError);
}

TEST_CASE("zero loss gradient yields zero parameter gradients") {
    Network net({LayerSpec::linear(3, 2), LayerSpec::softmax()});
    he_initialize(net, 5);
    std::mt19937_64 rng(5);
    const Tensor x = random_tensor({4, 3}, rng);
    net.forward(x, true);
    const auto grads = net.backward(Tensor({4, 2})).params;
    for (const Tensor& g : grads)
        for (std::size_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("linear+softmax+CE closed form: grad = (p - onehot) outer input") {
    Network net({LayerSpec::linear(3, 4), LayerSpec::softmax()});
    he_initialize(net, 9);
    Tensor x({1, 3}, {0.3, -1.2, 2.0});
    const int target = 2;
    const Tensor p = net.forward(x, true);
    const LossResult ce = cross_entropy(p, {target});
    const auto grads = net.backward(ce.grad).params;
    for (std::size_t o = 0; o < 4; ++o)
        for (std::size_t d = 0; d < 3; ++d) {
            const double want = (p.at2(0, o) - (int(o) == target ? 1.0 : 0.0)) * x.at2(0, d);
            CHECK(grads[0].at2(o, d) == doctest::Approx(want).epsilon(1e-9));
        }
}

TEST_CASE("cross entropy closed forms") {
    SUBCASE("certain correct prediction costs 0") {
        Tensor p({1, 3}, {1.0, 0.0, 0.0});
        CHECK(cross_entropy(p, {0}).loss == doctest::Approx(0.0));
    }
    SUBCASE("uniform prediction over K=10 costs ln 10") {
        Tensor p({1, 10});
        p.fill(0.1);
        CHECK(cross_entropy(p, {7}).loss == doctest::Approx(std::log(10.0)).epsilon(1e-9));
    }
    SUBCASE("target out of range is a data error") {
        Tensor p({1, 3}, {0.5, 0.25, 0.25});
        CHECK_THROWS_AS(cross_entropy(p, {3}), DataError);
    }
    SUBCASE("empty mask means zero loss and zero gradient") {
        Tensor p({1, 2, 2, 2});
        p.fill(0.5);
        std::vector<std::uint8_t> mask(4, 0);
        const LossResult r = cross_entropy(p, {0, 1, 0, 1}, &mask);
        CHECK(r.loss == 0.0);
        for (std::size_t i = 0; i < r.grad.numel(); ++i) CHECK(r.grad[i] == 0.0);
    }
}

TEST_CASE("sgd step oracles") {
    Network net({LayerSpec::linear(1, 1), LayerSpec::softmax()});
    SUBCASE("momentum 0: theta 1 -> 0.9") {
        net.params()[0][0] = 1.0;
        SgdState st = SgdState::make(net, 0.1, 0.0);
        Tensor g({1, 1}, {1.0});
        sgd_step(net, {g}, st);
        CHECK(net.params()[0][0] == doctest::Approx(0.9));
    }
    SUBCASE("two momentum steps: 0 -> -0.29") {
        net.params()[0][0] = 0.0;
        SgdState st = SgdState::make(net, 0.1, 0.9);
        Tensor g({1, 1}, {1.0});
        sgd_step(net, {g}, st);
        sgd_step(net, {g}, st);
        CHECK(net.params()[0][0] == doctest::Approx(-0.29).epsilon(1e-12));
    }
    SUBCASE("zero gradients keep parameters constant") {
        net.params()[0][0] = 0.7;
        SgdState st = SgdState::make(net, 0.1, 0.9);
        Tensor g({1, 1}, {0.0});
        for (int i = 0; i < 5; ++i) sgd_step(net, {g}, st);
        CHECK(net.params()[0][0] == 0.7);
    }
}

TEST_CASE("he initialization") {
    SUBCASE("empirical variance matches 2/(n_o w h) within 5%") {
        // n_o=2, 1x1 kernel -> var 1.0; gather draws over many seeds
        std::vector<double> draws;
        for (int s = 0; s < 1250; ++s) {
            Network net({LayerSpec::conv2d(4, 2, 1)});
            he_initialize(net, std::uint64_t(s));
            for (std::size_t i = 0; i < net.params()[0].numel(); ++i)
                draws.push_back(net.params()[0][i]);
        }
        double var = 0.0;
        for (double d : draws) var += d * d;
        var /= double(draws.size());
        CHECK(std::abs(var - 1.0) < 0.05);
    }
    SUBCASE("batchnorm params are exactly 1 and 0") {
        Network net({LayerSpec::conv2d(1, 3, 3), LayerSpec::batchnorm(3)});
        he_initialize(net, 77);
        const auto& infos = net.param_infos();
        for (std::size_t p = 0; p < infos.size(); ++p) {
            if (infos[p].role == ParamRole::BnWeight)
                for (std::size_t i = 0; i < net.params()[p].numel(); ++i)
                    CHECK(net.params()[p][i] == 1.0);
            if (infos[p].role == ParamRole::BnBias)
                for (std::size_t i = 0; i < net.params()[p].numel(); ++i)
                    CHECK(net.params()[p][i] == 0.0);
        }
    }
    SUBCASE("same seed gives identical parameters") {
        Network a({LayerSpec::conv2d(2, 4, 3), LayerSpec::linear(4, 2)});
        Network b({LayerSpec::conv2d(2, 4, 3), LayerSpec::linear(4, 2)});
        he_initialize(a, 123);
        he_initialize(b, 123);
        for (std::size_t p = 0; p < a.params().size(); ++p)
            for (std::size_t i = 0; i < a.params()[p].numel(); ++i)
                CHECK(a.params()[p][i] == b.params()[p][i]);
    }
}

TEST_CASE("finite differences pass for every layer kind") {
    std::mt19937_64 rng(2024);
    const std::size_t C = 2, H = 8, W = 8, K = 3;
    std::vector<int> targets = {0, 2, 1};
    const Tensor img = random_tensor({3, C, H, W}, rng);

    auto check_arch = [&](std::vector<LayerSpec> arch) {
        Network net(std::move(arch));
        he_initialize(net, rng());
        fd_check(net, img, targets);
    };

    SUBCASE("conv") {
        check_arch({LayerSpec::conv2d(2, 3, 3, 1, 1), LayerSpec::relu(),
                    LayerSpec::conv2d(3, 3, 1), LayerSpec::global_avgpool(),
                    LayerSpec::softmax()});
    }
    SUBCASE("strided padded conv") {
        check_arch({LayerSpec::conv2d(2, 4, 3, 2, 1), LayerSpec::relu(),
                    LayerSpec::conv2d(4, 3, 1), LayerSpec::global_avgpool(),
                    LayerSpec::softmax()});
    }
    SUBCASE("linear") {
        Network net({LayerSpec::linear(5, 8), LayerSpec::relu(), LayerSpec::linear(8, 3),
                     LayerSpec::softmax()});
        he_initialize(net, 31);
        fd_check(net, random_tensor({4, 5}, rng), {0, 1, 2, 1});
    }
    SUBCASE("maxpool") {
        check_arch({LayerSpec::conv2d(2, 3, 3, 1, 1), LayerSpec::maxpool2d(2),
                    LayerSpec::global_avgpool(), LayerSpec::softmax()});
    }
    SUBCASE("avgpool") {
        check_arch({LayerSpec::conv2d(2, 3, 3, 1, 1), LayerSpec::avgpool2d(2),
                    LayerSpec::global_avgpool(), LayerSpec::softmax()});
    }
    SUBCASE("batchnorm") {
        check_arch({LayerSpec::conv2d(2, 4, 3, 1, 1), LayerSpec::batchnorm(4),
                    LayerSpec::relu(), LayerSpec::conv2d(4, 3, 1),
                    LayerSpec::global_avgpool(), LayerSpec::softmax()});
    }
    SUBCASE("residual skip") {
        check_arch({LayerSpec::conv2d(2, 4, 3, 1, 1), LayerSpec::skip_store(),
                    LayerSpec::conv2d(4, 4, 3, 1, 1), LayerSpec::skip_add(),
                    LayerSpec::relu(), LayerSpec::conv2d(4, 3, 1),
                    LayerSpec::global_avgpool(), LayerSpec::softmax()});
    }
    SUBCASE("upsample") {
        check_arch({LayerSpec::conv2d(2, 4, 3, 2, 1), LayerSpec::upsample(2),
                    LayerSpec::conv2d(4, 3, 1), LayerSpec::global_avgpool(),
                    LayerSpec::softmax()});
    }
    SUBCASE("per-pixel softmax head") {
        Network net({LayerSpec::conv2d(2, 3, 1), LayerSpec::softmax()});
        he_initialize(net, 8);
        std::vector<int> pix_targets(3 * H * W);
        for (std::size_t i = 0; i < pix_targets.size(); ++i) pix_targets[i] = int(i % K);
        fd_check(net, img, pix_targets);
    }
}

TEST_CASE("forward is deterministic given parameters and input") {
    Network net(make_residual_cnn(3, 4, 4));
    he_initialize(net, 99);
    std::mt19937_64 rng(6);
    const Tensor x = random_tensor({2, 3, 8, 8}, rng);
    const Tensor a = net.forward(x, false);
    const Tensor b = net.forward(x, false);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("non-finite activations raise a numeric error naming the layer") {
    Network net({LayerSpec::linear(2, 2), LayerSpec::softmax()});
    net.params()[0].fill(std::numeric_limits<double>::infinity());
    Tensor x({1, 2}, {1.0, 1.0});
    CHECK_THROWS_AS(net.forward(x, false), NumericError);
}
