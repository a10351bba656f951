#pragma once

#include <functional>
#include <vector>

#include "ctrlora/core/autograd.hpp"
#include "ctrlora/core/tensor.hpp"

namespace ctrlora {

struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;       // beta_t, t = 1..T
    std::vector<double> alphas;      // 1 - beta_t
    std::vector<double> alpha_bars;  // cumulative product of alphas

    // 1-based accessor; abar(0) == 1 by convention (clean sample).
    double abar(int t) const { return t == 0 ? 1.0 : alpha_bars[static_cast<size_t>(t - 1)]; }
    void validate() const;
};

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end);

struct DiffusionBatch {
    Tensor x0;    // (N, C, h, w) latents
    Tensor cond;  // condition input (latent or raw image batch), may be empty
    int kind = 0;
    std::vector<int> class_labels;  // per sample (null class allowed)
    std::vector<int> t;             // per sample, each in [1, T]
    Tensor eps;                     // same shape as x0
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, single timestep for the whole tensor.
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);
// Per-sample timesteps over the batch dimension.
Tensor q_sample_batch(const Tensor& x0, const std::vector<int>& t, const Tensor& eps, const NoiseSchedule& sched);

// predict receives the noised batch and the full batch record; returns the
// eps prediction as a graph node so the loss is differentiable.
using PredictVarFn = std::function<Var(const Tensor& x_t, const DiffusionBatch& batch)>;

// Mean squared error between eps and the prediction. Throws DivergenceError
// if the loss is not finite.
Var diffusion_loss(const PredictVarFn& predict, const DiffusionBatch& batch, const NoiseSchedule& sched);

// eps_uncond + w * (eps_cond - eps_uncond)
Tensor cfg_predict(const Tensor& eps_cond, const Tensor& eps_uncond, double w);

// Noise prediction for the sampler; `conditional` selects the guided branch.
using GuidedPredictFn = std::function<Tensor(const Tensor& x_t, int t, bool conditional)>;

struct DdimConfig {
    int steps = 50;
    double guidance = 7.5;
    uint64_t seed = 0;
    double divergence_bound = 1e4;
};

// Deterministic (eta = 0) DDIM sampler with classifier-free guidance.
Tensor ddim_sample(const GuidedPredictFn& predict, const NoiseSchedule& sched, const DdimConfig& cfg,
                   const std::vector<int64_t>& shape);

// The evenly spaced timestep subsequence used by ddim_sample (ascending).
std::vector<int> ddim_timesteps(int T, int steps);

}  // namespace ctrlora
