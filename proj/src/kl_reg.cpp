#include "dpe/kl_reg.hpp"

#include <cmath>

#include "dpe/errors.hpp"

namespace dpe {

namespace {
void validate(const ParameterGroup& g) {
    if (g.members.size() < 2)
        throw ConfigError("parameter group '" + g.name + "': needs E >= 2 members");
    if (g.prior.var <= 0.0)
        throw ConfigError("parameter group '" + g.name + "': prior variance must be positive");
    for (const Tensor* m : g.members)
        if (!m->same_shape(*g.members[0]))
            throw ConfigError("parameter group '" + g.name + "': member shape mismatch");
}
}  // namespace

CrossMemberStats stats(const ParameterGroup& group) {
    validate(group);
    const std::size_t E = group.members.size();
    const std::size_t n = group.members[0]->numel();
    CrossMemberStats s;
    s.mu = Tensor::zeros_like(*group.members[0]);
    s.var = Tensor::zeros_like(*group.members[0]);
    s.floored.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (const Tensor* m : group.members) sum += (*m)[i];
        const double mu = sum / double(E);
        double ss = 0.0;
        for (const Tensor* m : group.members) {
            const double d = (*m)[i] - mu;
            ss += d * d;
        }
        double var = ss / double(E);  // MLE, not Bessel-corrected
        if (var < kVarFloor) {
            var = kVarFloor;
            s.floored[i] = 1;
        }
        s.mu[i] = mu;
        s.var[i] = var;
    }
    return s;
}

double kl_gaussian(double mu_q, double var_q, double mu_p, double var_p) {
    if (var_q <= 0.0 || var_p <= 0.0)
        throw std::domain_error("kl_gaussian: variances must be positive");
    const double d = mu_q - mu_p;
    return 0.5 * (std::log(var_q / var_p) + (var_p + d * d) / var_q - 1.0);
}

double layer_penalty(const ParameterGroup& group) {
    const CrossMemberStats s = stats(group);
    const double mu_p = group.prior.mu, var_p = group.prior.var;
    double total = 0.0;
    for (std::size_t i = 0; i < s.mu.numel(); ++i) {
        const double d = s.mu[i] - mu_p;
        total += std::log(s.var[i]) + (var_p + d * d) / s.var[i];
    }
    return total;
}

double omega(std::span<const ParameterGroup> groups) {
    if (groups.empty()) throw ConfigError("omega: empty group list");
    double total = 0.0;
    for (const ParameterGroup& g : groups) total += layer_penalty(g);
    return total;
}

void accumulate_layer_penalty_grad(const ParameterGroup& group,
                                   std::vector<Tensor*> out, double scale) {
    validate(group);
    const std::size_t E = group.members.size();
    if (out.size() != E)
        throw ConfigError("layer_penalty_grad: output count mismatch");
    const CrossMemberStats s = stats(group);
    const double mu_p = group.prior.mu, var_p = group.prior.var;
    for (std::size_t i = 0; i < s.mu.numel(); ++i) {
        const double mu = s.mu[i], var = s.var[i];
        const double d = mu - mu_p;
        // penalty P = log var + (var_p + d^2)/var
        const double dP_dmu = 2.0 * d / var;
        const double dP_dvar = 1.0 / var - (var_p + d * d) / (var * var);
        for (std::size_t e = 0; e < E; ++e) {
            double g = dP_dmu / double(E);
            if (!s.floored[i])
                g += dP_dvar * 2.0 * ((*group.members[e])[i] - mu) / double(E);
            (*out[e])[i] += scale * g;
        }
    }
}

std::vector<Tensor> layer_penalty_grad(const ParameterGroup& group) {
    std::vector<Tensor> grads;
    std::vector<Tensor*> ptrs;
    grads.reserve(group.members.size());
    for (const Tensor* m : group.members) grads.push_back(Tensor::zeros_like(*m));
    for (Tensor& g : grads) ptrs.push_back(&g);
    accumulate_layer_penalty_grad(group, ptrs, 1.0);
    return grads;
}

Prior default_prior(ParamRole role, double fan_out_product) {
    switch (role) {
        case ParamRole::ConvWeight:
        case ParamRole::LinearWeight:
            return {0.0, 2.0 / fan_out_product};
        case ParamRole::BnWeight:
            return {1.0, 0.01};
        case ParamRole::BnBias:
            return {0.0, 0.01};
        default:
            throw ConfigError("default_prior: role has no prior");
    }
}

std::vector<ParameterGroup> build_groups(std::vector<Network>& members) {
    if (members.size() < 2)
        throw ConfigError("build_groups: ensemble needs E >= 2 members");
    const auto& infos = members[0].param_infos();
    for (const Network& m : members)
        if (m.param_infos().size() != infos.size())
            throw ConfigError("build_groups: members are not structurally identical");
    std::vector<ParameterGroup> groups(infos.size());
    for (std::size_t p = 0; p < infos.size(); ++p) {
        groups[p].name = infos[p].name;
        groups[p].role = infos[p].role;
        groups[p].prior = {infos[p].prior_mu, infos[p].prior_var};
        for (Network& m : members) groups[p].members.push_back(&m.params()[p]);
    }
    return groups;
}

}  // namespace dpe
