#pragma once

#include <json.hpp>

#include "ctrlora/core/nn.hpp"

namespace ctrlora {

struct AutoencoderConfig {
    int in_size = 32;
    int64_t latent_channels = 4;
    int downsample_factor = 4;  // power of 2
    int64_t ch0 = 24, ch1 = 48, ch2 = 96;
    double kl_weight = 1e-6;

    int64_t latent_size() const { return in_size / downsample_factor; }
    nlohmann::json to_json() const;
    static AutoencoderConfig from_json(const nlohmann::json& j);
};

enum class LatentProvenance { image, condition };

struct Latent {
    Tensor values;  // (C, h, w) or (N, C, h, w)
    LatentProvenance provenance = LatentProvenance::image;
};

// Small convolutional VAE. Defines the diffusion latent space and doubles as
// the condition embedding network. The posterior mean is used for all
// deterministic encodes; sampling happens only inside the pretraining loss.
struct Autoencoder {
    AutoencoderConfig cfg;
    ParamStore params;
    double latent_scale = 1.0;  // reciprocal of empirical latent stddev after pretraining

    Conv2d e1, e2, e3, e4, e5, e_out;
    Conv2d d1, d2, d3, d4, d5, d_out;

    Autoencoder(const AutoencoderConfig& cfg, uint64_t seed);

    // (N, 3, H, W) -> (N, 2*latent_channels, h, w): mean | logvar.
    Var encode_moments(const Var& x) const;
    // (N, latent_channels, h, w) unscaled latent -> (N, 3, H, W) raw decode.
    Var decode_raw(const Var& z) const;

    // Deterministic scaled-mean encode of one [-1,1] image tensor (3, H, W).
    Latent encode(const Tensor& image) const;
    // Identical computation, provenance tagged "condition".
    Latent embed_condition(const Tensor& cond_image) const;
    // Batch versions: (N, 3, H, W) -> (N, C, h, w).
    Tensor encode_batch(const Tensor& images) const;

    // Scaled latent -> [-1,1]-clamped image tensor.
    Tensor decode(const Tensor& latent) const;

    void check_image_shape(const Tensor& image) const;
};

}  // namespace ctrlora
