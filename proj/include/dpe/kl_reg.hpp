#ifndef DPE_KL_REG_HPP
#define DPE_KL_REG_HPP

#include <span>
#include <string>
#include <vector>

#include "dpe/net.hpp"
#include "dpe/tensor.hpp"

namespace dpe {

// Gaussian prior for one parameter group.
struct Prior {
    double mu = 0.0;
    double var = 1.0;
};

// One logical layer parameter replicated across the E ensemble members.
// Member tensors are non-owning views into the member networks.
struct ParameterGroup {
    std::string name;
    ParamRole role = ParamRole::ConvWeight;
    Prior prior;
    std::vector<Tensor*> members;

    std::size_t ensemble_size() const { return members.size(); }
    std::size_t param_count() const { return members.empty() ? 0 : members[0]->numel(); }
};

// Per-parameter mean and MLE variance across members, variance floored.
struct CrossMemberStats {
    Tensor mu;
    Tensor var;                      // floored at kVarFloor
    std::vector<std::uint8_t> floored;  // 1 where the floor engaged
};

inline constexpr double kVarFloor = 1e-8;

CrossMemberStats stats(const ParameterGroup& group);

// KL(q||p) for scalar Gaussians, exactly:
//   0.5 * (log(var_q/var_p) + (var_p + (mu_q-mu_p)^2)/var_q - 1)
double kl_gaussian(double mu_q, double var_q, double mu_p, double var_p);

// Per-layer penalty, summed over all parameters in the group:
//   log var_i + (var_p + (mu_i - mu_p)^2) / var_i
double layer_penalty(const ParameterGroup& group);

// Total penalty over all groups.
double omega(std::span<const ParameterGroup> groups);

// d(layer_penalty)/d(theta_e) for every member parameter. Gradients through
// the floored variance branch are zero. Scaled by `scale` and accumulated
// into `out` (one tensor per member, shape-matching the group).
void accumulate_layer_penalty_grad(const ParameterGroup& group,
                                   std::vector<Tensor*> out, double scale);

// Convenience: freshly allocated gradients for one group, scale 1.
std::vector<Tensor> layer_penalty_grad(const ParameterGroup& group);

// Default prior for a parameter role; conv/linear priors need the fan-out
// product n_o*w*h (w=h=1 for linear).
Prior default_prior(ParamRole role, double fan_out_product);

// Build the cross-member group registry over structurally identical member
// networks. Trainable parameters only; every parameter lands in exactly one
// group. Requires E >= 2.
std::vector<ParameterGroup> build_groups(std::vector<Network>& members);

}  // namespace dpe

#endif
