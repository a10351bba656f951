#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctrlora/unet.hpp"

namespace ctrlora {

// How the condition image enters the ControlNet: through the frozen
// autoencoder latent (default) or through a small trainable conv encoder
// applied to the raw condition image (the ablation baseline).
enum class EmbedMode { vae_latent, conv_encoder };

std::string embed_mode_name(EmbedMode m);
EmbedMode embed_mode_from_name(const std::string& s);

// Static layer table used for parameter accounting, LoRA target enumeration,
// and topology digests.
struct LayerDesc {
    std::string name;
    std::string kind;  // "linear" | "conv" | "zero_conv" | "norm" | "embedding"
    int64_t param_count = 0;
    bool lora_target = false;
    int64_t d_in = 0, d_out = 0;  // set for linear layers
};

struct ArchDescriptor {
    std::string name;
    std::vector<LayerDesc> layers;

    int64_t base_total() const;
    std::string digest() const;
};

struct ParamCounts {
    int64_t base_total = 0;
    int64_t adapter_total = 0;  // everything stored in one adapter file
    int64_t trainable_adaptation_total = 0;  // LoRA pairs + norm overrides + zero-conv overrides
    int64_t lora_total = 0;
    int64_t override_total = 0;
};

ParamCounts count_parameters(const ArchDescriptor& arch, int rank);

// The reference descriptor of the SD 1.5 ControlNet encoder used by the
// static parameter audit.
ArchDescriptor sd15_encoder_descriptor();

// Per-condition adapter: low-rank pairs on every linear layer of the Base
// ControlNet, plus trained copies of its norm and zero-conv parameters.
struct LoraAdapter {
    std::string condition_kind;
    int rank = 0;
    double alpha = 0.0;
    std::string base_topology_digest;
    ParamStore params;  // "lora.<key>.a" / "lora.<key>.b" / "ov.<base param name>"
    std::map<std::string, LoraEntry> entries;         // by linear key
    std::unordered_map<std::string, Var> overrides;   // by base param name

    double scaling() const { return alpha / static_cast<double>(rank); }
    void set_trainable(bool lora_pairs, bool override_tensors);
};

struct BaseControlNet {
    UNetConfig cfg;
    EmbedMode embed_mode = EmbedMode::vae_latent;
    ParamStore params;
    EncoderStack enc;
    Conv2d fusion;  // latent-space condition fusion (vae_latent mode)
    // conv_encoder mode: randomly initialized hint encoder on the raw image
    Conv2d hint1, hint2, hint3;
    std::vector<Conv2d> zero_convs;  // one per skip + bottleneck

    BaseControlNet(const UNetConfig& cfg, EmbedMode mode, uint64_t seed);

    // cond: (N, latent_channels, h, w) latent in vae_latent mode, or
    // (N, 3, H, W) raw condition image in conv_encoder mode.
    std::vector<Var> forward(const Tensor& x_t, const std::vector<int>& t, const std::vector<int>& labels,
                             const Tensor& cond, const LoraAdapter* adapter, bool use_overrides) const;

    std::vector<std::string> lora_target_keys() const;
    std::vector<std::string> norm_param_names() const;
    std::vector<std::string> zero_conv_param_names() const;
    ArchDescriptor describe() const;
    std::string topology_digest_str() const;
};

// Trainable copy of the pretrained UNet encoder plus fresh zero convolutions
// and a fresh input-fusion layer.
std::unique_ptr<BaseControlNet> init_base_controlnet(const UNet& unet, EmbedMode mode, uint64_t seed);

LoraAdapter attach_lora(const BaseControlNet& cn, int rank, double alpha, const std::string& condition_kind,
                        uint64_t seed);

// Re-snapshot override tensors from the current base values (used after
// stage-1 training so exported adapters match the final shared weights).
void refresh_overrides(LoraAdapter& adapter, const BaseControlNet& cn);

struct AdapterSlot {
    const LoraAdapter* active = nullptr;
};

// Routing only; never mutates weights. Topology-checked.
void switch_adapter(AdapterSlot& slot, const LoraAdapter* adapter, const BaseControlNet& cn);

// Weighted multi-adapter composition: residual_j = sum_i w_i * forward(adapter_i)_j.
std::vector<Tensor> compose_controls(const BaseControlNet& cn, const std::vector<const LoraAdapter*>& adapters,
                                     const std::vector<double>& weights, const Tensor& x_t,
                                     const std::vector<int>& t, const std::vector<int>& labels,
                                     const std::vector<Tensor>& conds);

}  // namespace ctrlora
