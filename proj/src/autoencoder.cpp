#include "ctrlora/autoencoder.hpp"

#include <cmath>

#include "ctrlora/core/errors.hpp"

namespace ctrlora {

using nlohmann::json;

json AutoencoderConfig::to_json() const {
    return json{{"in_size", in_size},         {"latent_channels", latent_channels},
                {"downsample_factor", downsample_factor}, {"ch0", ch0},
                {"ch1", ch1},                 {"ch2", ch2},
                {"kl_weight", kl_weight}};
}

AutoencoderConfig AutoencoderConfig::from_json(const json& j) {
    AutoencoderConfig c;
    c.in_size = j.at("in_size").get<int>();
    c.latent_channels = j.at("latent_channels").get<int64_t>();
    c.downsample_factor = j.at("downsample_factor").get<int>();
    c.ch0 = j.at("ch0").get<int64_t>();
    c.ch1 = j.at("ch1").get<int64_t>();
    c.ch2 = j.at("ch2").get<int64_t>();
    c.kl_weight = j.at("kl_weight").get<double>();
    return c;
}

Autoencoder::Autoencoder(const AutoencoderConfig& cfg_, uint64_t seed) : cfg(cfg_) {
    if (cfg.downsample_factor < 1 || (cfg.downsample_factor & (cfg.downsample_factor - 1)) != 0)
        throw ConfigError("autoencoder: downsample_factor must be a power of 2");
    if (cfg.downsample_factor != 4) throw ConfigError("autoencoder: this build wires f=4 (two stride-2 stages)");

    e1 = Conv2d(params, "enc.c1", 3, cfg.ch0, 3, 1, 1, seed);
    e2 = Conv2d(params, "enc.c2", cfg.ch0, cfg.ch1, 3, 2, 1, seed);
    e3 = Conv2d(params, "enc.c3", cfg.ch1, cfg.ch1, 3, 1, 1, seed);
    e4 = Conv2d(params, "enc.c4", cfg.ch1, cfg.ch2, 3, 2, 1, seed);
    e5 = Conv2d(params, "enc.c5", cfg.ch2, cfg.ch2, 3, 1, 1, seed);
    e_out = Conv2d(params, "enc.out", cfg.ch2, 2 * cfg.latent_channels, 3, 1, 1, seed);

    d1 = Conv2d(params, "dec.c1", cfg.latent_channels, cfg.ch2, 3, 1, 1, seed);
    d2 = Conv2d(params, "dec.c2", cfg.ch2, cfg.ch2, 3, 1, 1, seed);
    d3 = Conv2d(params, "dec.c3", cfg.ch2, cfg.ch1, 3, 1, 1, seed);
    d4 = Conv2d(params, "dec.c4", cfg.ch1, cfg.ch1, 3, 1, 1, seed);
    d5 = Conv2d(params, "dec.c5", cfg.ch1, cfg.ch0, 3, 1, 1, seed);
    d_out = Conv2d(params, "dec.out", cfg.ch0, 3, 3, 1, 1, seed);
}

Var Autoencoder::encode_moments(const Var& x) const {
    Var h = ag::silu(e1.fwd(x));
    h = ag::silu(e2.fwd(h));
    h = ag::silu(e3.fwd(h));
    h = ag::silu(e4.fwd(h));
    h = ag::silu(e5.fwd(h));
    return e_out.fwd(h);
}

Var Autoencoder::decode_raw(const Var& z) const {
    Var h = ag::silu(d1.fwd(z));
    h = ag::silu(d2.fwd(h));
    h = ag::upsample_nearest2x(h);
    h = ag::silu(d3.fwd(h));
    h = ag::silu(d4.fwd(h));
    h = ag::upsample_nearest2x(h);
    h = ag::silu(d5.fwd(h));
    return d_out.fwd(h);
}

void Autoencoder::check_image_shape(const Tensor& image) const {
    const int nd = image.ndim();
    if ((nd != 3 && nd != 4) || image.dim(nd - 3) != 3)
        throw ShapeError("autoencoder: expected (3, H, W) image, got " + image.shape_str());
    const int64_t h = image.dim(nd - 2), w = image.dim(nd - 1);
    if (h % cfg.downsample_factor != 0 || w % cfg.downsample_factor != 0)
        throw ShapeError("autoencoder: image dims must be divisible by the downsample factor");
}

Tensor Autoencoder::encode_batch(const Tensor& images) const {
    check_image_shape(images);
    NoGradGuard ng;
    const bool batched = images.ndim() == 4;
    Tensor in = images;
    if (!batched) in.shape = {1, images.dim(0), images.dim(1), images.dim(2)};
    Var moments = encode_moments(make_constant(in));
    Var mean = ag::slice_channels(moments, 0, cfg.latent_channels);
    Tensor out = mean->value;
    for (auto& v : out.data) v *= latent_scale;
    if (!batched) out.shape = {out.dim(1), out.dim(2), out.dim(3)};
    return out;
}

Latent Autoencoder::encode(const Tensor& image) const {
    return Latent{encode_batch(image), LatentProvenance::image};
}

Latent Autoencoder::embed_condition(const Tensor& cond_image) const {
    // Shared code path with encode; only the provenance tag differs.
    return Latent{encode_batch(cond_image), LatentProvenance::condition};
}

Tensor Autoencoder::decode(const Tensor& latent) const {
    const int nd = latent.ndim();
    if ((nd != 3 && nd != 4) || latent.dim(nd - 3) != cfg.latent_channels)
        throw ShapeError("autoencoder: bad latent shape " + latent.shape_str());
    NoGradGuard ng;
    const bool batched = nd == 4;
    Tensor in = latent;
    if (!batched) in.shape = {1, latent.dim(0), latent.dim(1), latent.dim(2)};
    for (auto& v : in.data) v /= latent_scale;
    Tensor out = decode_raw(make_constant(in))->value;
    for (auto& v : out.data) v = std::clamp(v, -1.0, 1.0);
    if (!batched) out.shape = {out.dim(1), out.dim(2), out.dim(3)};
    return out;
}

}  // namespace ctrlora
