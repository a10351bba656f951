#pragma once

#include <json.hpp>
#include <optional>

#include "ctrlora/core/nn.hpp"

namespace ctrlora {

struct UNetConfig {
    int64_t base_channels = 32;
    std::vector<int> channel_multipliers = {1, 2, 4};
    std::vector<int> attention_levels = {2};  // indices into the level list
    int num_classes = 4;
    int64_t time_embed_dim = 128;
    int heads = 4;
    int64_t latent_channels = 4;
    int64_t latent_size = 8;

    int levels() const { return static_cast<int>(channel_multipliers.size()); }
    int64_t level_channels(int i) const { return base_channels * channel_multipliers[static_cast<size_t>(i)]; }
    bool has_attention(int level) const {
        for (int a : attention_levels)
            if (a == level) return true;
        return false;
    }
    // The class-embedding table reserves one extra row as the null class.
    int null_class() const { return num_classes; }
    void validate() const;

    nlohmann::json to_json() const;
    static UNetConfig from_json(const nlohmann::json& j);
};

// Per-level skip tensors plus the bottleneck; the residual injection points.
// emb carries the timestep/class embedding the decoder res blocks consume.
struct EncoderFeatures {
    std::vector<Var> skips;
    Var bottleneck;
    Var emb;
};

// The denoiser encoder: timestep+class embedding, input conv, per-level
// res/attention blocks with downsampling, and the mid block. Shared topology
// between the UNet and the ControlNet copy (identical parameter names).
struct EncoderStack {
    struct Level {
        ResBlock res;
        std::optional<TransformerBlock> attn;
        std::optional<Conv2d> down;  // stride-2, keeps channels
    };

    Linear time_lin1, time_lin2;
    Var class_table;  // (num_classes + 1, time_embed_dim)
    Conv2d conv_in;
    std::vector<Level> levels;
    ResBlock mid_res1, mid_res2;
    TransformerBlock mid_attn;

    EncoderStack() = default;
    EncoderStack(ParamStore& ps, const std::string& prefix, const UNetConfig& cfg, uint64_t seed);

    Var embed(const std::vector<int>& t, const std::vector<int>& labels, const UNetConfig& cfg,
              const ForwardCtx* ctx = nullptr) const;
    EncoderFeatures forward(const Var& x, const Var& emb, const UNetConfig& cfg,
                            const ForwardCtx* ctx = nullptr) const;

    // Every LoRA-targetable linear layer (attention projections and MLP
    // linears of the transformer blocks), by layer key.
    std::vector<const Linear*> lora_target_linears() const;
};

struct UNet {
    UNetConfig cfg;
    ParamStore params;
    EncoderStack enc;

    struct DecLevel {
        ResBlock res;
        std::optional<TransformerBlock> attn;
        std::optional<Conv2d> up;  // conv after nearest-2x, maps to next-lower level width
    };
    std::vector<DecLevel> dec_levels;  // index i corresponds to encoder level i
    GroupNormL out_gn;
    Conv2d out_conv;

    explicit UNet(const UNetConfig& cfg, uint64_t seed);

    EncoderFeatures encode(const Tensor& x_t, const std::vector<int>& t, const std::vector<int>& labels) const;
    // residuals, when given, are added to [skip_0 .. skip_{L-1}, bottleneck].
    Var decode(const EncoderFeatures& feats, const std::vector<Var>* control_residuals) const;
    // Convenience: full eps prediction.
    Var predict(const Tensor& x_t, const std::vector<int>& t, const std::vector<int>& labels,
                const std::vector<Var>* control_residuals = nullptr) const;

    // Shapes of the residual injection points for a batch of n samples.
    std::vector<std::vector<int64_t>> residual_shapes(int64_t n) const;
};

}  // namespace ctrlora
