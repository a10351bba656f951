#include "ctrlora/diffusion.hpp"

#include <cmath>

#include "ctrlora/core/errors.hpp"
#include "ctrlora/core/rng.hpp"

namespace ctrlora {

void NoiseSchedule::validate() const {
    if (T < 1 || static_cast<int>(betas.size()) != T || static_cast<int>(alphas.size()) != T ||
        static_cast<int>(alpha_bars.size()) != T)
        throw ConfigError("noise schedule: inconsistent sizes");
    double prev = 1.0;
    for (int t = 0; t < T; ++t) {
        const double b = betas[static_cast<size_t>(t)];
        const double ab = alpha_bars[static_cast<size_t>(t)];
        if (!(b > 0.0 && b < 1.0) || !std::isfinite(ab)) throw ConfigError("noise schedule: invalid beta/abar");
        if (!(ab < prev)) throw ConfigError("noise schedule: alpha_bar not strictly decreasing");
        prev = ab;
    }
}

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ConfigError("make_linear_schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("make_linear_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(static_cast<size_t>(T));
    s.alphas.resize(static_cast<size_t>(T));
    s.alpha_bars.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        const double frac = (T == 1) ? 0.0 : static_cast<double>(t) / static_cast<double>(T - 1);
        const double beta = beta_start + (beta_end - beta_start) * frac;
        s.betas[static_cast<size_t>(t)] = beta;
        s.alphas[static_cast<size_t>(t)] = 1.0 - beta;
        prod *= 1.0 - beta;
        s.alpha_bars[static_cast<size_t>(t)] = prod;
    }
    s.validate();
    return s;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    require_same_shape(x0, eps, "q_sample");
    if (t < 1 || t > sched.T) throw ConfigError("q_sample: t out of range");
    const double ab = sched.abar(t);
    const double cs = std::sqrt(ab), cn = std::sqrt(1.0 - ab);
    Tensor out = x0;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = cs * x0.data[i] + cn * eps.data[i];
    return out;
}

Tensor q_sample_batch(const Tensor& x0, const std::vector<int>& t, const Tensor& eps, const NoiseSchedule& sched) {
    require_same_shape(x0, eps, "q_sample");
    if (x0.ndim() < 1 || static_cast<int64_t>(t.size()) != x0.dim(0))
        throw ShapeError("q_sample_batch: one timestep per sample required");
    const int64_t per = x0.numel() / x0.dim(0);
    Tensor out = x0;
    for (int64_t n = 0; n < x0.dim(0); ++n) {
        const int tn = t[static_cast<size_t>(n)];
        if (tn < 1 || tn > sched.T) throw ConfigError("q_sample_batch: t out of range");
        const double ab = sched.abar(tn);
        const double cs = std::sqrt(ab), cn = std::sqrt(1.0 - ab);
        for (int64_t i = n * per; i < (n + 1) * per; ++i) out.data[i] = cs * x0.data[i] + cn * eps.data[i];
    }
    return out;
}

Var diffusion_loss(const PredictVarFn& predict, const DiffusionBatch& batch, const NoiseSchedule& sched) {
    if (batch.x0.numel() == 0 || batch.t.empty() || static_cast<int64_t>(batch.t.size()) != batch.x0.dim(0))
        throw ShapeError("diffusion_loss: batch not fully populated");
    const Tensor x_t = q_sample_batch(batch.x0, batch.t, batch.eps, sched);
    Var pred = predict(x_t, batch);
    require_same_shape(pred->value, batch.eps, "diffusion_loss");
    Var loss = ag::mse(pred, batch.eps);
    if (!std::isfinite(loss->value.data[0]))
        throw DivergenceError("diffusion_loss: non-finite loss (training diverged)");
    return loss;
}

Tensor cfg_predict(const Tensor& eps_cond, const Tensor& eps_uncond, double w) {
    require_same_shape(eps_cond, eps_uncond, "cfg_predict");
    Tensor out = eps_uncond;
    for (int64_t i = 0; i < out.numel(); ++i)
        out.data[i] = eps_uncond.data[i] + w * (eps_cond.data[i] - eps_uncond.data[i]);
    return out;
}

std::vector<int> ddim_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) throw ConfigError("ddim: need 1 <= steps <= T");
    std::vector<int> tau(static_cast<size_t>(steps));
    for (int j = 1; j <= steps; ++j)
        tau[static_cast<size_t>(j - 1)] =
            static_cast<int>(std::lround(static_cast<double>(j) * static_cast<double>(T) / steps));
    for (size_t i = 0; i + 1 < tau.size(); ++i)
        if (tau[i] >= tau[i + 1]) throw ConfigError("ddim: degenerate timestep subsequence");
    return tau;
}

Tensor ddim_sample(const GuidedPredictFn& predict, const NoiseSchedule& sched, const DdimConfig& cfg,
                   const std::vector<int64_t>& shape) {
    const std::vector<int> tau = ddim_timesteps(sched.T, cfg.steps);
    Rng rng(mix_seed({cfg.seed, fnv1a64("ddim.init")}));
    Tensor x = Tensor::randn(shape, rng);

    for (int j = cfg.steps - 1; j >= 0; --j) {
        const int t = tau[static_cast<size_t>(j)];
        const int t_prev = (j > 0) ? tau[static_cast<size_t>(j - 1)] : 0;

        Tensor eps = predict(x, t, true);
        if (cfg.guidance != 1.0) {
            Tensor eps_u = predict(x, t, false);
            eps = cfg_predict(eps, eps_u, cfg.guidance);
        }
        require_same_shape(eps, x, "ddim_sample");

        const double ab = sched.abar(t), ab_prev = sched.abar(t_prev);
        const double inv_sqrt_ab = 1.0 / std::sqrt(ab);
        const double cn = std::sqrt(1.0 - ab);
        const double cs_prev = std::sqrt(ab_prev), cn_prev = std::sqrt(1.0 - ab_prev);
        for (int64_t i = 0; i < x.numel(); ++i) {
            const double x0p = (x.data[i] - cn * eps.data[i]) * inv_sqrt_ab;
            x.data[i] = cs_prev * x0p + cn_prev * eps.data[i];
        }
        if (!(x.max_abs() <= cfg.divergence_bound) || !x.all_finite())
            throw DivergenceError("ddim_sample: latent magnitude exceeded bound at t=" + std::to_string(t));
    }
    return x;
}

}  // namespace ctrlora
