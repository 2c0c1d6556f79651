#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "dpe/errors.hpp"
#include "dpe/kl_reg.hpp"

using namespace dpe;

namespace {

// Owns scalar member values and exposes them as a group.
struct ScalarGroup {
    std::vector<Tensor> storage;
    ParameterGroup group;

    ScalarGroup(std::vector<double> values, Prior prior, ParamRole role = ParamRole::ConvWeight) {
        for (double v : values) storage.push_back(Tensor({1}, {v}));
        group.name = "test";
        group.role = role;
        group.prior = prior;
        for (Tensor& t : storage) group.members.push_back(&t);
    }
};

}  // namespace

TEST_CASE("cross-member stats") {
    SUBCASE("[1,-1,1,-1] -> mu 0, var 1") {
        ScalarGroup g({1, -1, 1, -1}, {0.0, 2.0});
        const CrossMemberStats s = stats(g.group);
        CHECK(s.mu[0] == doctest::Approx(0.0));
        CHECK(s.var[0] == doctest::Approx(1.0));
        CHECK(s.floored[0] == 0);
    }
    SUBCASE("identical members floor the variance") {
        ScalarGroup g({0.5, 0.5, 0.5, 0.5}, {0.0, 2.0});
        const CrossMemberStats s = stats(g.group);
        CHECK(s.mu[0] == doctest::Approx(0.5));
        CHECK(s.var[0] == kVarFloor);
        CHECK(s.floored[0] == 1);
    }
    SUBCASE("random E=8 matches the straight-loop oracle") {
        std::mt19937_64 rng(1);
        std::normal_distribution<double> dist;
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<double> vals;
            for (int e = 0; e < 8; ++e) vals.push_back(dist(rng));
            ScalarGroup g(vals, {0.0, 1.0});
            const CrossMemberStats s = stats(g.group);
            double mu = 0.0;
            for (double v : vals) mu += v;
            mu /= 8.0;
            double var = 0.0;
            for (double v : vals) var += (v - mu) * (v - mu);
            var /= 8.0;
            CHECK(std::abs(s.mu[0] - mu) < 1e-12);
            CHECK(std::abs(s.var[0] - var) < 1e-12);
        }
    }
    SUBCASE("E < 2 is a configuration error") {
        ScalarGroup g({1.0}, {0.0, 1.0});
        CHECK_THROWS_AS(stats(g.group), ConfigError);
    }
}

TEST_CASE("scalar gaussian KL closed forms") {
    CHECK(kl_gaussian(0.3, 0.7, 0.3, 0.7) == doctest::Approx(0.0));
    CHECK(kl_gaussian(1.0, 1.0, 0.0, 1.0) == doctest::Approx(0.5));
    CHECK(kl_gaussian(0.0, 2.0, 0.0, 1.0) ==
          doctest::Approx(0.5 * (std::log(2.0) + 0.5 - 1.0)).epsilon(1e-9));
    CHECK(kl_gaussian(0.0, 2.0, 0.0, 1.0) == doctest::Approx(0.09657).epsilon(1e-3));
    CHECK_THROWS_AS(kl_gaussian(0.0, 0.0, 0.0, 1.0), std::domain_error);
    CHECK_THROWS_AS(kl_gaussian(0.0, 1.0, 0.0, -1.0), std::domain_error);
}

TEST_CASE("layer penalty closed forms") {
    SUBCASE("conv members [1,-1,1,-1], var_p 2 -> 2.0") {
        ScalarGroup g({1, -1, 1, -1}, {0.0, 2.0});
        CHECK(layer_penalty(g.group) == doctest::Approx(2.0).epsilon(1e-12));
    }
    SUBCASE("conv members [2,0,2,0] -> 3.0") {
        ScalarGroup g({2, 0, 2, 0}, {0.0, 2.0});
        CHECK(layer_penalty(g.group) == doctest::Approx(3.0).epsilon(1e-12));
    }
    SUBCASE("bn weight members [1,1,1.2,0.8] -> ln 0.02 + 0.5") {
        ScalarGroup g({1.0, 1.0, 1.2, 0.8}, {1.0, 0.01}, ParamRole::BnWeight);
        CHECK(layer_penalty(g.group) == doctest::Approx(-3.4120).epsilon(1e-4));
    }
}

TEST_CASE("omega sums group penalties") {
    ScalarGroup a({1, -1, 1, -1}, {0.0, 2.0});
    ScalarGroup b({1, -1, 1, -1}, {0.0, 2.0});
    std::vector<ParameterGroup> one = {a.group};
    std::vector<ParameterGroup> two = {a.group, b.group};
    CHECK(omega(one) == doctest::Approx(layer_penalty(a.group)));
    CHECK(omega(two) == doctest::Approx(2.0 * layer_penalty(a.group)));
    CHECK_THROWS_AS(omega(std::span<const ParameterGroup>{}), ConfigError);
}

TEST_CASE("all groups at the prior sit at log var_p + 1 per parameter") {
    // members symmetric around mu_p with MLE variance exactly var_p
    const double var_p = 0.5;
    const double s = std::sqrt(var_p);
    ScalarGroup g({s, -s, s, -s}, {0.0, var_p});
    // log var + (var_p + mu^2)/var = log var_p + 1 at the prior
    CHECK(layer_penalty(g.group) == doctest::Approx(std::log(var_p) + 1.0).epsilon(1e-12));
}

TEST_CASE("penalty gradient matches central finite differences") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> dist;
    const double step = 1e-5;
    for (ParamRole role : {ParamRole::ConvWeight, ParamRole::LinearWeight,
                           ParamRole::BnWeight, ParamRole::BnBias}) {
        const Prior prior = default_prior(role, 4.0);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<double> vals;
            for (int e = 0; e < 8; ++e) vals.push_back(dist(rng));
            ScalarGroup g(vals, prior, role);
            const std::vector<Tensor> analytic = layer_penalty_grad(g.group);
            for (int e = 0; e < 8; ++e) {
                const double orig = g.storage[e][0];
                g.storage[e][0] = orig + step;
                const double lp = layer_penalty(g.group);
                g.storage[e][0] = orig - step;
                const double lm = layer_penalty(g.group);
                g.storage[e][0] = orig;
                const double fd = (lp - lm) / (2.0 * step);
                const double a = analytic[e][0];
                const double denom = std::max({std::abs(fd), std::abs(a), 1e-6});
                CHECK(std::abs(fd - a) / denom < 1e-4);
            }
        }
    }
}

TEST_CASE("floored variance blocks the variance-path gradient") {
    ScalarGroup g({0.4, 0.4, 0.4, 0.4}, {0.0, 2.0});
    const std::vector<Tensor> grad = layer_penalty_grad(g.group);
    // mean path only: dP/dmu * 1/E = (2 mu / var) / E with var at the floor
    const double want = (2.0 * 0.4 / kVarFloor) / 4.0;
    for (int e = 0; e < 4; ++e) CHECK(grad[e][0] == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("permuting members permutes gradients identically") {
    std::vector<double> vals = {0.3, -0.7, 1.1, 0.2};
    ScalarGroup g(vals, {0.0, 2.0});
    const auto grad = layer_penalty_grad(g.group);
    std::vector<double> perm = {1.1, 0.3, 0.2, -0.7};  // indices 2,0,3,1
    ScalarGroup gp(perm, {0.0, 2.0});
    const auto pgrad = layer_penalty_grad(gp.group);
    CHECK(pgrad[0][0] == doctest::Approx(grad[2][0]));
    CHECK(pgrad[1][0] == doctest::Approx(grad[0][0]));
    CHECK(pgrad[2][0] == doctest::Approx(grad[3][0]));
    CHECK(pgrad[3][0] == doctest::Approx(grad[1][0]));
    CHECK(layer_penalty(gp.group) == doctest::Approx(layer_penalty(g.group)));
}

TEST_CASE("scaling by beta scales the accumulated gradient exactly") {
    ScalarGroup g({0.3, -0.7, 1.1, 0.2}, {0.0, 2.0});
    std::vector<Tensor> base(4, Tensor({1}));
    std::vector<Tensor> scaled(4, Tensor({1}));
    std::vector<Tensor*> bp, sp;
    for (auto& t : base) bp.push_back(&t);
    for (auto& t : scaled) sp.push_back(&t);
    accumulate_layer_penalty_grad(g.group, bp, 1.0);
    const double beta = 1e-5;
    accumulate_layer_penalty_grad(g.group, sp, beta);
    for (int e = 0; e < 4; ++e)
        CHECK(scaled[e][0] == doctest::Approx(beta * base[e][0]).epsilon(1e-12));
}

TEST_CASE("penalty blows up at both variance extremes") {
    const Prior prior{0.0, 2.0};
    auto penalty_at = [&](double mu, double var) {
        return std::log(var) + (prior.var + mu * mu) / var;
    };
    const double at_prior = penalty_at(0.0, prior.var);
    CHECK(penalty_at(0.5, 1e-7) > at_prior + 1e6);
    CHECK(penalty_at(0.0, 1e12) > at_prior + 10);
}

TEST_CASE("default priors per role") {
    CHECK(default_prior(ParamRole::ConvWeight, 18.0).mu == 0.0);
    CHECK(default_prior(ParamRole::ConvWeight, 18.0).var == doctest::Approx(2.0 / 18.0));
    CHECK(default_prior(ParamRole::LinearWeight, 10.0).var == doctest::Approx(0.2));
    CHECK(default_prior(ParamRole::BnWeight, 1.0).mu == 1.0);
    CHECK(default_prior(ParamRole::BnWeight, 1.0).var == 0.01);
    CHECK(default_prior(ParamRole::BnBias, 1.0).mu == 0.0);
    CHECK(default_prior(ParamRole::BnBias, 1.0).var == 0.01);
}

TEST_CASE("build_groups partitions all trainable parameters") {
    std::vector<LayerSpec> arch = {LayerSpec::conv2d(2, 4, 3, 1, 1),
                                   LayerSpec::batchnorm(4), LayerSpec::relu(),
                                   LayerSpec::conv2d(4, 3, 1), LayerSpec::global_avgpool(),
                                   LayerSpec::softmax()};
    std::vector<Network> members;
    for (int e = 0; e < 4; ++e) {
        members.emplace_back(arch);
        he_initialize(members.back(), std::uint64_t(e));
    }
    const auto groups = build_groups(members);
    CHECK(groups.size() == members[0].params().size());
    std::size_t covered = 0;
    for (const auto& g : groups) {
        CHECK(g.members.size() == 4);
        covered += g.param_count();
        // priors follow the roles
        if (g.role == ParamRole::BnWeight) CHECK(g.prior.mu == 1.0);
        if (g.role == ParamRole::ConvWeight) CHECK(g.prior.mu == 0.0);
    }
    std::size_t total = 0;
    for (const Tensor& p : members[0].params()) total += p.numel();
    CHECK(covered == total);
}
