#include "ctrlora/controlnet.hpp"

#include <cmath>

#include "ctrlora/core/digest.hpp"
#include "ctrlora/core/errors.hpp"

namespace ctrlora {

std::string embed_mode_name(EmbedMode m) { return m == EmbedMode::vae_latent ? "vae_latent" : "conv_encoder"; }

EmbedMode embed_mode_from_name(const std::string& s) {
    if (s == "vae_latent") return EmbedMode::vae_latent;
    if (s == "conv_encoder") return EmbedMode::conv_encoder;
    throw ConfigError("unknown embed mode: " + s);
}

// ------------------------------------------------------------- ArchDescriptor

int64_t ArchDescriptor::base_total() const {
    int64_t n = 0;
    for (const auto& l : layers) n += l.param_count;
    return n;
}

std::string ArchDescriptor::digest() const {
    Sha256 h;
    h.update(name);
    for (const auto& l : layers) {
        h.update(l.name);
        h.update(l.kind);
        const int64_t fields[4] = {l.param_count, l.lora_target ? 1 : 0, l.d_in, l.d_out};
        h.update(fields, sizeof(fields));
    }
    return h.hex();
}

ParamCounts count_parameters(const ArchDescriptor& arch, int rank) {
    if (rank < 1) throw ConfigError("count_parameters: rank must be >= 1");
    ParamCounts c;
    c.base_total = arch.base_total();
    for (const auto& l : arch.layers) {
        if (l.kind == "linear" && l.lora_target) c.lora_total += static_cast<int64_t>(rank) * (l.d_in + l.d_out);
        if (l.kind == "norm" || l.kind == "zero_conv") c.override_total += l.param_count;
    }
    c.adapter_total = c.lora_total + c.override_total;
    c.trainable_adaptation_total = c.adapter_total;
    return c;
}

// ------------------------------------------------------------ BaseControlNet

BaseControlNet::BaseControlNet(const UNetConfig& cfg_, EmbedMode mode, uint64_t seed)
    : cfg(cfg_), embed_mode(mode) {
    cfg.validate();
    enc = EncoderStack(params, "enc.", cfg, seed);
    if (embed_mode == EmbedMode::vae_latent) {
        fusion = Conv2d(params, "fusion", cfg.latent_channels, cfg.latent_channels, 3, 1, 1, seed);
    } else {
        // Raw-image hint encoder; stride pattern matches the latent geometry.
        hint1 = Conv2d(params, "hint.c1", 3, 16, 3, 2, 1, seed);
        hint2 = Conv2d(params, "hint.c2", 16, 32, 3, 2, 1, seed);
        hint3 = Conv2d(params, "hint.c3", 32, cfg.latent_channels, 3, 1, 1, seed);
    }
    const int L = cfg.levels();
    for (int i = 0; i <= L; ++i) {
        const int64_t ch = cfg.level_channels(std::min(i, L - 1));
        zero_convs.push_back(
            Conv2d(params, "zc." + std::to_string(i), ch, ch, 1, 1, 0, seed, /*zero_init=*/true));
    }
}

std::vector<Var> BaseControlNet::forward(const Tensor& x_t, const std::vector<int>& t,
                                         const std::vector<int>& labels, const Tensor& cond,
                                         const LoraAdapter* adapter, bool use_overrides) const {
    ForwardCtx ctx;
    if (adapter) {
        ctx.lora = &adapter->entries;
        if (use_overrides) ctx.overrides = &adapter->overrides;
    }
    const ForwardCtx* pctx = adapter ? &ctx : nullptr;

    Var x;
    if (embed_mode == EmbedMode::vae_latent) {
        require_same_shape(x_t, cond, "controlnet forward (condition latent)");
        x = ag::add(make_constant(x_t), fusion.fwd(make_constant(cond), pctx));
    } else {
        if (cond.ndim() != 4 || cond.dim(1) != 3)
            throw ShapeError("controlnet forward: conv_encoder mode expects raw (N,3,H,W) condition");
        Var h = ag::silu(hint1.fwd(make_constant(cond), pctx));
        h = ag::silu(hint2.fwd(h, pctx));
        h = hint3.fwd(h, pctx);
        require_same_shape(x_t, h->value, "controlnet forward (hint output)");
        x = ag::add(make_constant(x_t), h);
    }

    Var emb = enc.embed(t, labels, cfg, pctx);
    EncoderFeatures feats = enc.forward(x, emb, cfg, pctx);

    std::vector<Var> residuals;
    for (size_t i = 0; i < feats.skips.size(); ++i)
        residuals.push_back(zero_convs[i].fwd(feats.skips[i], pctx));
    residuals.push_back(zero_convs.back().fwd(feats.bottleneck, pctx));
    return residuals;
}

std::vector<std::string> BaseControlNet::lora_target_keys() const {
    std::vector<std::string> keys;
    for (const Linear* l : enc.lora_target_linears()) keys.push_back(l->key);
    return keys;
}

std::vector<std::string> BaseControlNet::norm_param_names() const {
    std::vector<std::string> names;
    for (const auto& [name, v] : params.items()) {
        (void)v;
        const bool gamma = name.size() > 6 && name.rfind(".gamma") == name.size() - 6;
        const bool beta = name.size() > 5 && name.rfind(".beta") == name.size() - 5;
        if (gamma || beta) names.push_back(name);
    }
    return names;
}

std::vector<std::string> BaseControlNet::zero_conv_param_names() const {
    std::vector<std::string> names;
    for (const auto& [name, v] : params.items()) {
        (void)v;
        if (name.rfind("zc.", 0) == 0) names.push_back(name);
    }
    return names;
}

ArchDescriptor BaseControlNet::describe() const {
    ArchDescriptor d;
    d.name = "toy-controlnet/" + embed_mode_name(embed_mode);

    std::unordered_map<std::string, const Linear*> targets;
    for (const Linear* l : enc.lora_target_linears()) targets[l->key] = l;

    // Group weight/bias (or gamma/beta) pairs into one layer row each.
    std::map<std::string, LayerDesc> rows;
    for (const auto& [name, v] : params.items()) {
        std::string layer = name;
        std::string kind;
        const auto cut = [&](const char* suffix) {
            const size_t len = std::string(suffix).size();
            if (layer.size() > len && layer.rfind(suffix) == layer.size() - len) {
                layer = layer.substr(0, layer.size() - len);
                return true;
            }
            return false;
        };
        if (cut(".gamma") || cut(".beta")) {
            kind = "norm";
        } else if (cut(".weight") || cut(".bias")) {
            const bool is_linear = targets.count(layer) || layer.rfind("enc.time.lin", 0) == 0 ||
                                   (layer.size() > 10 && layer.rfind(".temb_proj") == layer.size() - 10);
            if (layer.rfind("zc.", 0) == 0)
                kind = "zero_conv";
            else if (is_linear)
                kind = "linear";
            else
                kind = "conv";
        } else {
            kind = "embedding";  // class_table
        }
        auto& row = rows[layer];
        if (row.name.empty()) {
            row.name = layer;
            row.kind = kind;
            if (auto it = targets.find(layer); it != targets.end()) {
                row.lora_target = true;
                row.d_in = it->second->din;
                row.d_out = it->second->dout;
            }
        }
        row.param_count += v->value.numel();
    }
    for (auto& [_, row] : rows) d.layers.push_back(row);
    return d;
}

std::string BaseControlNet::topology_digest_str() const { return describe().digest(); }

std::unique_ptr<BaseControlNet> init_base_controlnet(const UNet& unet, EmbedMode mode, uint64_t seed) {
    auto cn = std::make_unique<BaseControlNet>(unet.cfg, mode, seed);
    if (topology_digest(cn->params, "enc.") != topology_digest(unet.params, "enc."))
        throw CompatibilityError("init_base_controlnet: encoder topology mismatch");
    copy_params_by_name(cn->params, unet.params, "enc.", "enc.");
    return cn;
}

// -------------------------------------------------------------------- adapter

void LoraAdapter::set_trainable(bool lora_pairs, bool override_tensors) {
    for (const auto& [name, v] : params.items()) {
        if (name.rfind("lora.", 0) == 0)
            v->requires_grad = lora_pairs;
        else
            v->requires_grad = override_tensors;
    }
}

LoraAdapter attach_lora(const BaseControlNet& cn, int rank, double alpha, const std::string& condition_kind,
                        uint64_t seed) {
    if (rank < 1) throw ConfigError("attach_lora: rank must be >= 1");
    LoraAdapter ad;
    ad.condition_kind = condition_kind;
    ad.rank = rank;
    ad.alpha = alpha > 0 ? alpha : static_cast<double>(rank);
    ad.base_topology_digest = cn.topology_digest_str();

    for (const Linear* l : cn.enc.lora_target_linears()) {
        const std::string an = "lora." + l->key + ".a";
        // A ~ N(0, 1/r); B = 0 so a fresh adapter is exactly transparent.
        Rng rng(mix_seed({seed, fnv1a64(an)}));
        Var a = ad.params.add(an, Tensor::randn({rank, l->din}, rng, 1.0 / std::sqrt(static_cast<double>(rank))));
        Var b = ad.params.add("lora." + l->key + ".b", Tensor::zeros({l->dout, rank}));
        ad.entries.emplace(l->key, LoraEntry{a, b, ad.scaling()});
    }
    for (const auto& list : {cn.norm_param_names(), cn.zero_conv_param_names()})
        for (const std::string& name : list) {
            Var src = cn.params.get(name);
            Var ov = ad.params.add("ov." + name, src->value);
            ad.overrides.emplace(name, ov);
        }
    return ad;
}

void refresh_overrides(LoraAdapter& adapter, const BaseControlNet& cn) {
    for (auto& [name, ov] : adapter.overrides) ov->value.data = cn.params.get(name)->value.data;
}

void switch_adapter(AdapterSlot& slot, const LoraAdapter* adapter, const BaseControlNet& cn) {
    if (adapter && adapter->base_topology_digest != cn.topology_digest_str())
        throw CompatibilityError("switch_adapter: adapter was built for a different base topology");
    slot.active = adapter;
}

std::vector<Tensor> compose_controls(const BaseControlNet& cn, const std::vector<const LoraAdapter*>& adapters,
                                     const std::vector<double>& weights, const Tensor& x_t,
                                     const std::vector<int>& t, const std::vector<int>& labels,
                                     const std::vector<Tensor>& conds) {
    if (adapters.empty() || adapters.size() != weights.size() || adapters.size() != conds.size())
        throw ConfigError("compose_controls: adapters/weights/conditions length mismatch");
    NoGradGuard ng;
    std::vector<Tensor> acc;
    for (size_t i = 0; i < adapters.size(); ++i) {
        AdapterSlot slot;
        switch_adapter(slot, adapters[i], cn);
        std::vector<Var> res = cn.forward(x_t, t, labels, conds[i], slot.active, /*use_overrides=*/true);
        if (acc.empty()) {
            acc.resize(res.size());
            for (size_t j = 0; j < res.size(); ++j) acc[j] = Tensor::zeros(res[j]->value.shape);
        }
        for (size_t j = 0; j < res.size(); ++j)
            for (int64_t e = 0; e < acc[j].numel(); ++e) acc[j].data[e] += weights[i] * res[j]->value.data[e];
    }
    return acc;
}

// --------------------------------------------------------- reference descriptor

namespace {

struct DescBuilder {
    ArchDescriptor d;

    void linear(const std::string& name, int64_t din, int64_t dout, bool bias, bool target) {
        d.layers.push_back({name, "linear", din * dout + (bias ? dout : 0), target, din, dout});
    }
    void conv(const std::string& name, int64_t cin, int64_t cout, int64_t k) {
        d.layers.push_back({name, "conv", k * k * cin * cout + cout, false, 0, 0});
    }
    void zero_conv(const std::string& name, int64_t cin, int64_t cout, int64_t k) {
        d.layers.push_back({name, "zero_conv", k * k * cin * cout + cout, false, 0, 0});
    }
    void norm(const std::string& name, int64_t c) { d.layers.push_back({name, "norm", 2 * c, false, 0, 0}); }

    void res_block(const std::string& name, int64_t cin, int64_t cout, int64_t temb) {
        norm(name + ".norm1", cin);
        conv(name + ".conv1", cin, cout, 3);
        linear(name + ".time_emb_proj", temb, cout, true, false);  // time-embedding layer, not a LoRA target
        norm(name + ".norm2", cout);
        conv(name + ".conv2", cout, cout, 3);
        if (cin != cout) conv(name + ".skip", cin, cout, 1);
    }

    // SD-1.5 spatial transformer: self-attn + cross-attn (context 768) + GEGLU
    // feed-forward. proj_in/proj_out act token-wise and carry LoRA.
    void transformer(const std::string& name, int64_t c, int64_t context) {
        norm(name + ".norm", c);
        linear(name + ".proj_in", c, c, true, true);
        norm(name + ".norm1", c);
        linear(name + ".attn1.to_q", c, c, false, true);
        linear(name + ".attn1.to_k", c, c, false, true);
        linear(name + ".attn1.to_v", c, c, false, true);
        linear(name + ".attn1.to_out", c, c, true, true);
        norm(name + ".norm2", c);
        linear(name + ".attn2.to_q", c, c, false, true);
        linear(name + ".attn2.to_k", context, c, false, true);
        linear(name + ".attn2.to_v", context, c, false, true);
        linear(name + ".attn2.to_out", c, c, true, true);
        norm(name + ".norm3", c);
        linear(name + ".ff.geglu", c, 8 * c, true, true);
        linear(name + ".ff.out", 4 * c, c, true, true);
        linear(name + ".proj_out", c, c, true, true);
    }
};

}  // namespace

ArchDescriptor sd15_encoder_descriptor() {
    DescBuilder b;
    b.d.name = "sd15-encoder";
    const int64_t model_ch = 320, temb = 1280, context = 768;
    const int64_t mult[] = {1, 2, 4, 4};
    const bool attn[] = {true, true, true, false};

    b.linear("time_embed.lin1", model_ch, temb, true, false);
    b.linear("time_embed.lin2", temb, temb, true, false);

    // condition hint encoder, final projection zero-initialized
    const int64_t hint[] = {3, 16, 16, 32, 32, 96, 96, 256};
    for (int i = 0; i + 1 < 8; ++i)
        b.conv("input_hint_block.c" + std::to_string(i), hint[i], hint[i + 1], 3);
    b.zero_conv("input_hint_block.out", 256, model_ch, 3);

    b.conv("input_blocks.0.conv_in", 4, model_ch, 3);
    std::vector<int64_t> zero_conv_ch = {model_ch};

    int64_t ch = model_ch;
    for (int level = 0; level < 4; ++level) {
        const int64_t out_ch = model_ch * mult[level];
        for (int blk = 0; blk < 2; ++blk) {
            const std::string name = "input_blocks.l" + std::to_string(level) + ".b" + std::to_string(blk);
            b.res_block(name + ".res", ch, out_ch, temb);
            if (attn[level]) b.transformer(name + ".tr", out_ch, context);
            ch = out_ch;
            zero_conv_ch.push_back(ch);
        }
        if (level < 3) {
            b.conv("input_blocks.l" + std::to_string(level) + ".down", ch, ch, 3);
            zero_conv_ch.push_back(ch);
        }
    }

    b.res_block("middle_block.res1", ch, ch, temb);
    b.transformer("middle_block.tr", ch, context);
    b.res_block("middle_block.res2", ch, ch, temb);

    for (size_t i = 0; i < zero_conv_ch.size(); ++i)
        b.zero_conv("zero_convs." + std::to_string(i), zero_conv_ch[i], zero_conv_ch[i], 1);
    b.zero_conv("middle_block_out", ch, ch, 1);

    return b.d;
}

}  // namespace ctrlora
