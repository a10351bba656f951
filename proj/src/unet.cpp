#include "ctrlora/unet.hpp"

#include "ctrlora/core/errors.hpp"

namespace ctrlora {

using nlohmann::json;

void UNetConfig::validate() const {
    if (channel_multipliers.size() < 2) throw ConfigError("unet: need at least 2 resolution levels");
    if (base_channels < 1 || time_embed_dim < 2 || latent_channels < 1 || latent_size < 2 || num_classes < 1)
        throw ConfigError("unet: dims must be positive");
    for (int a : attention_levels)
        if (a < 0 || a >= levels()) throw ConfigError("unet: attention level out of range");
}

json UNetConfig::to_json() const {
    return json{{"base_channels", base_channels},
                {"channel_multipliers", channel_multipliers},
                {"attention_levels", attention_levels},
                {"num_classes", num_classes},
                {"time_embed_dim", time_embed_dim},
                {"heads", heads},
                {"latent_channels", latent_channels},
                {"latent_size", latent_size}};
}

UNetConfig UNetConfig::from_json(const json& j) {
    UNetConfig c;
    c.base_channels = j.at("base_channels").get<int64_t>();
    c.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
    c.attention_levels = j.at("attention_levels").get<std::vector<int>>();
    c.num_classes = j.at("num_classes").get<int>();
    c.time_embed_dim = j.at("time_embed_dim").get<int64_t>();
    c.heads = j.at("heads").get<int>();
    c.latent_channels = j.at("latent_channels").get<int64_t>();
    c.latent_size = j.at("latent_size").get<int64_t>();
    c.validate();
    return c;
}

// ---------------------------------------------------------------- EncoderStack

EncoderStack::EncoderStack(ParamStore& ps, const std::string& prefix, const UNetConfig& cfg, uint64_t seed) {
    const int64_t te = cfg.time_embed_dim;
    time_lin1 = Linear(ps, prefix + "time.lin1", te, te, seed);
    time_lin2 = Linear(ps, prefix + "time.lin2", te, te, seed);
    class_table = ps.add(prefix + "class_table",
                         init_normal_fan_in({cfg.num_classes + 1, te}, te, seed, prefix + "class_table"));
    conv_in = Conv2d(ps, prefix + "conv_in", cfg.latent_channels, cfg.level_channels(0), 3, 1, 1, seed);

    int64_t ch = cfg.level_channels(0);
    for (int i = 0; i < cfg.levels(); ++i) {
        Level lv;
        const int64_t out_ch = cfg.level_channels(i);
        const std::string key = prefix + "level" + std::to_string(i);
        lv.res = ResBlock(ps, key + ".res", ch, out_ch, te, seed);
        if (cfg.has_attention(i)) lv.attn = TransformerBlock(ps, key + ".attn", out_ch, cfg.heads, seed);
        if (i + 1 < cfg.levels()) lv.down = Conv2d(ps, key + ".down", out_ch, out_ch, 3, 2, 1, seed);
        levels.push_back(std::move(lv));
        ch = out_ch;
    }
    mid_res1 = ResBlock(ps, prefix + "mid.res1", ch, ch, te, seed);
    mid_attn = TransformerBlock(ps, prefix + "mid.attn", ch, cfg.heads, seed);
    mid_res2 = ResBlock(ps, prefix + "mid.res2", ch, ch, te, seed);
}

Var EncoderStack::embed(const std::vector<int>& t, const std::vector<int>& labels, const UNetConfig& cfg,
                        const ForwardCtx* ctx) const {
    if (t.size() != labels.size()) throw ShapeError("embed: t/labels size mismatch");
    for (int lb : labels)
        if (lb < 0 || lb > cfg.num_classes) throw ShapeError("embed: class label out of range");
    Var sin = make_constant(sinusoidal_embedding(t, cfg.time_embed_dim));
    Var h = time_lin2.fwd(ag::silu(time_lin1.fwd(sin, ctx)), ctx);
    return ag::add(h, ag::gather_rows(class_table, labels));
}

EncoderFeatures EncoderStack::forward(const Var& x, const Var& emb, const UNetConfig& cfg,
                                      const ForwardCtx* ctx) const {
    (void)cfg;
    EncoderFeatures out;
    Var h = conv_in.fwd(x, ctx);
    for (const auto& lv : levels) {
        h = lv.res.fwd(h, emb, ctx);
        if (lv.attn) h = lv.attn->fwd(h, ctx);
        out.skips.push_back(h);
        if (lv.down) h = lv.down->fwd(h, ctx);
    }
    h = mid_res1.fwd(h, emb, ctx);
    h = mid_attn.fwd(h, ctx);
    h = mid_res2.fwd(h, emb, ctx);
    out.bottleneck = h;
    return out;
}

std::vector<const Linear*> EncoderStack::lora_target_linears() const {
    std::vector<const Linear*> out;
    for (const auto& lv : levels)
        if (lv.attn)
            for (const Linear* l : lv.attn->linears()) out.push_back(l);
    for (const Linear* l : mid_attn.linears()) out.push_back(l);
    return out;
}

// ----------------------------------------------------------------------- UNet

UNet::UNet(const UNetConfig& cfg_, uint64_t seed) : cfg(cfg_) {
    cfg.validate();
    enc = EncoderStack(params, "enc.", cfg, seed);

    const int L = cfg.levels();
    dec_levels.resize(static_cast<size_t>(L));
    int64_t h_ch = cfg.level_channels(L - 1);  // bottleneck width
    for (int i = L - 1; i >= 0; --i) {
        DecLevel dl;
        const int64_t ch = cfg.level_channels(i);
        const std::string key = "dec.level" + std::to_string(i);
        dl.res = ResBlock(params, key + ".res", h_ch + ch, ch, cfg.time_embed_dim, seed);
        if (cfg.has_attention(i)) dl.attn = TransformerBlock(params, key + ".attn", ch, cfg.heads, seed);
        if (i > 0) dl.up = Conv2d(params, key + ".up", ch, cfg.level_channels(i - 1), 3, 1, 1, seed);
        h_ch = (i > 0) ? cfg.level_channels(i - 1) : ch;
        dec_levels[static_cast<size_t>(i)] = std::move(dl);
    }
    out_gn = GroupNormL(params, "dec.out_gn", cfg.level_channels(0),
                        static_cast<int>(std::min<int64_t>(8, cfg.level_channels(0))));
    out_conv = Conv2d(params, "dec.out_conv", cfg.level_channels(0), cfg.latent_channels, 3, 1, 1, seed);
}

EncoderFeatures UNet::encode(const Tensor& x_t, const std::vector<int>& t, const std::vector<int>& labels) const {
    if (x_t.ndim() != 4 || x_t.dim(1) != cfg.latent_channels)
        throw ShapeError("unet encode: bad latent shape " + x_t.shape_str());
    if (static_cast<int64_t>(t.size()) != x_t.dim(0)) throw ShapeError("unet encode: one timestep per sample");
    Var emb = enc.embed(t, labels, cfg);
    EncoderFeatures feats = enc.forward(make_constant(x_t), emb, cfg);
    feats.emb = emb;
    return feats;
}

Var UNet::decode(const EncoderFeatures& feats_in, const std::vector<Var>* control_residuals) const {
    EncoderFeatures feats = feats_in;
    if (feats.skips.size() != static_cast<size_t>(cfg.levels()) || !feats.emb)
        throw ShapeError("unet decode: features do not match this config");
    Var emb = feats.emb;

    const int L = cfg.levels();
    if (control_residuals) {
        if (control_residuals->size() != static_cast<size_t>(L) + 1)
            throw ShapeError("unet decode: expected one residual per skip plus bottleneck");
        for (int i = 0; i < L; ++i) {
            require_same_shape(feats.skips[static_cast<size_t>(i)]->value,
                               (*control_residuals)[static_cast<size_t>(i)]->value, "control residual");
            feats.skips[static_cast<size_t>(i)] =
                ag::add(feats.skips[static_cast<size_t>(i)], (*control_residuals)[static_cast<size_t>(i)]);
        }
        require_same_shape(feats.bottleneck->value, control_residuals->back()->value, "control residual");
        feats.bottleneck = ag::add(feats.bottleneck, control_residuals->back());
    }

    Var h = feats.bottleneck;
    for (int i = L - 1; i >= 0; --i) {
        const auto& dl = dec_levels[static_cast<size_t>(i)];
        h = ag::concat_channels(h, feats.skips[static_cast<size_t>(i)]);
        h = dl.res.fwd(h, emb);
        if (dl.attn) h = dl.attn->fwd(h);
        if (dl.up) h = dl.up->fwd(ag::upsample_nearest2x(h));
    }
    return out_conv.fwd(ag::silu(out_gn.fwd(h)));
}

Var UNet::predict(const Tensor& x_t, const std::vector<int>& t, const std::vector<int>& labels,
                  const std::vector<Var>* control_residuals) const {
    return decode(encode(x_t, t, labels), control_residuals);
}

std::vector<std::vector<int64_t>> UNet::residual_shapes(int64_t n) const {
    std::vector<std::vector<int64_t>> shapes;
    int64_t res = cfg.latent_size;
    for (int i = 0; i < cfg.levels(); ++i) {
        shapes.push_back({n, cfg.level_channels(i), res, res});
        if (i + 1 < cfg.levels()) res /= 2;
    }
    shapes.push_back({n, cfg.level_channels(cfg.levels() - 1), res, res});  // bottleneck
    return shapes;
}

}  // namespace ctrlora
