#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>

#include "ctrlora/autoencoder.hpp"
#include "ctrlora/conditions.hpp"
#include "ctrlora/controlnet.hpp"
#include "ctrlora/diffusion.hpp"

namespace ctrlora {

// Raised when a frozen component's value digest changes during training.
struct FrozenViolationError : CompatibilityError {
    using CompatibilityError::CompatibilityError;
};

enum class Stage { base, adapt, full };
std::string stage_name(Stage s);
Stage stage_from_name(const std::string& s);

struct TrainConfig {
    Stage stage = Stage::base;
    double lr = 1e-4;  // toy default; the reference recipe uses 1e-5
    double weight_decay = 0.01;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    double clip_norm = 1.0;
    int batch_size = 8;
    int64_t total_steps = 1000;
    int64_t start_step = 0;  // resume point
    double cfg_null_prob = 0.1;
    int lora_rank = 16;      // reference default is 128
    double lora_alpha = -1;  // -1 -> rank
    uint64_t seed = 0;
    // periodic fidelity evaluation (0 = off)
    int64_t eval_every = 0;
    int eval_images = 16;
    int eval_ddim_steps = 20;
    double eval_guidance = 1.0;
    double strength = 1.0;
    // stop as soon as an eval meets the kind's fidelity gate
    bool stop_at_gate = false;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

// Decoupled weight decay Adam; per-tensor moments and step counters so
// round-robin adapters see correct bias correction.
class AdamW {
public:
    struct Hyper {
        double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
    };

    explicit AdamW(const Hyper& h) : h_(h) {}
    void step(const std::vector<std::pair<std::string, Var>>& active);
    Hyper& hyper() { return h_; }

    std::map<std::string, Tensor> export_state() const;
    void import_state(const std::map<std::string, Tensor>& st);

private:
    struct State {
        Tensor m, v;
        int64_t t = 0;
    };
    std::map<std::string, State> states_;
    Hyper h_;
};

// Scales gradients of the active set to a maximum global L2 norm; returns the
// pre-clip norm.
double clip_global_norm(const std::vector<std::pair<std::string, Var>>& active, double max_norm);

struct StepLog {
    int64_t step = 0;
    std::string kind;
    double loss = 0.0;
    double lr = 0.0;
    double wallclock = 0.0;
};

struct EvalPoint {
    int64_t step = 0;
    double fidelity = 0.0;
};

struct TrainResult {
    std::vector<StepLog> steps;
    std::vector<EvalPoint> evals;
    std::optional<int64_t> steps_to_gate;
    std::map<std::string, int64_t> steps_per_kind;
};

void write_step_log(const std::filesystem::path& path, const std::vector<StepLog>& log);
void write_eval_log(const std::filesystem::path& path, const std::vector<EvalPoint>& log);
std::vector<EvalPoint> read_eval_log(const std::filesystem::path& path);

// ----------------------------------------------------------------- pretraining

struct PretrainAeResult {
    double val_psnr = 0.0;
    int64_t steps_run = 0;
};

// 1 / population stddev over all elements of the given latents.
double compute_latent_scale(const std::vector<Tensor>& latents);

// Trains the VAE to the reconstruction gate and sets latent_scale to the
// reciprocal empirical latent stddev. Throws DivergenceError if the gate is
// unmet after the step budget.
PretrainAeResult pretrain_autoencoder(Autoencoder& ae, const std::vector<Image>& train_images,
                                      const std::vector<Image>& val_images, const TrainConfig& cfg,
                                      double psnr_gate_db = 25.0);

struct PretrainUnetResult {
    double val_loss = 0.0;
    double zero_predictor_baseline = 0.0;
};

// Class-conditional denoiser pretraining with CFG label dropout. Gate:
// held-out loss < gate_ratio * zero-predictor baseline.
PretrainUnetResult pretrain_unet(UNet& unet, const Autoencoder& ae, const std::vector<Image>& train_images,
                                 const std::vector<int>& train_labels, const std::vector<Image>& val_images,
                                 const std::vector<int>& val_labels, const NoiseSchedule& sched,
                                 const TrainConfig& cfg, double gate_ratio = 0.9);

// ----------------------------------------------------------------- main stages

// Stage 1: round-robin multi-condition training of theta plus the active
// adapter's low-rank pairs. UNet and autoencoder stay frozen (digest-checked).
TrainResult train_base(BaseControlNet& cn, std::vector<LoraAdapter>& adapters, const UNet& unet,
                       const Autoencoder& ae, const std::vector<ConditionDataset>& subsets,
                       const NoiseSchedule& sched, const TrainConfig& cfg, const CondParams& params,
                       const std::filesystem::path& log_dir = {},
                       const std::map<std::string, Tensor>* optim_state = nullptr,
                       std::map<std::string, Tensor>* optim_state_out = nullptr);

// Stage 2: adaptation of one new adapter (LoRA pairs + norm and zero-conv
// overrides) against a frozen base.
TrainResult train_new_lora(BaseControlNet& cn, LoraAdapter& adapter, const UNet& unet, const Autoencoder& ae,
                           const ConditionDataset& train_subset, const ConditionDataset* val_subset,
                           const NoiseSchedule& sched, const TrainConfig& cfg, const CondParams& params,
                           const std::filesystem::path& log_dir = {},
                           const std::map<std::string, Tensor>* optim_state = nullptr,
                           std::map<std::string, Tensor>* optim_state_out = nullptr);

// Baseline / ablation mode: full-parameter training of the ControlNet on a
// single condition, no adapter.
TrainResult train_full_controlnet(BaseControlNet& cn, const UNet& unet, const Autoencoder& ae,
                                  const ConditionDataset& train_subset, const ConditionDataset* val_subset,
                                  const NoiseSchedule& sched, const TrainConfig& cfg, const CondParams& params,
                                  const std::filesystem::path& log_dir = {});

// ------------------------------------------------------------------- sampling

struct SampleSpec {
    const UNet* unet = nullptr;
    const Autoencoder* ae = nullptr;
    const BaseControlNet* cn = nullptr;  // null = unconditional (no control branch)
    const LoraAdapter* adapter = nullptr;
    bool use_overrides = true;
    double strength = 1.0;
    double guidance = 7.5;
    int ddim_steps = 50;
    uint64_t seed = 0;
};

// One conditional sample; cond is a latent (vae mode), a raw image tensor
// (conv mode), or empty when cn is null.
Tensor sample_latent(const SampleSpec& spec, const NoiseSchedule& sched, const Tensor& cond, int class_label);
Image sample_image(const SampleSpec& spec, const NoiseSchedule& sched, const Tensor& cond, int class_label);

// Fidelity of samples generated against val-split records (cycle metric for
// structural kinds, ground-truth PSNR for restoration kinds).
struct FidelityScore;
FidelityScore evaluate_fidelity(const SampleSpec& spec, const NoiseSchedule& sched, const ConditionDataset& val,
                                const CondParams& params, int n_images);

// ----------------------------------------------------------------- checkpoint

struct Checkpoint {
    NoiseSchedule sched;
    std::unique_ptr<Autoencoder> ae;
    std::unique_ptr<UNet> unet;
    std::unique_ptr<BaseControlNet> cn;
    std::vector<LoraAdapter> adapters;
    std::map<std::string, Tensor> optim;  // optimizer section, name -> tensor
    Stage stage = Stage::base;
    int64_t step = 0;
};

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& path);
// Verifies the stored base-topology digest against cn before reconstruction.
LoraAdapter load_adapter(const std::filesystem::path& path, const BaseControlNet& cn);

}  // namespace ctrlora
