#include "ctrlora/core/nn.hpp"

#include <cmath>

#include "ctrlora/core/errors.hpp"

namespace ctrlora {

Var ParamStore::add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw Error("ParamStore: duplicate parameter " + name);
    Var v = make_leaf(std::move(init), true, name);
    index_[name] = items_.size();
    items_.emplace_back(name, v);
    return v;
}

Var ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("ParamStore: unknown parameter " + name);
    return items_[it->second].second;
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) > 0; }

int64_t ParamStore::total_params() const {
    int64_t n = 0;
    for (const auto& [_, v] : items_) n += v->value.numel();
    return n;
}

void ParamStore::set_trainable(bool trainable) const {
    for (const auto& [_, v] : items_) v->requires_grad = trainable;
}

void ParamStore::zero_grads() const {
    for (const auto& [_, v] : items_) v->zero_grad();
}

std::vector<std::pair<std::string, std::vector<int64_t>>> ParamStore::shapes_sorted() const {
    std::vector<std::pair<std::string, std::vector<int64_t>>> out;
    out.reserve(items_.size());
    for (const auto& [name, v] : items_) out.emplace_back(name, v->value.shape);
    std::sort(out.begin(), out.end());
    return out;
}

void copy_params_by_name(ParamStore& dst, const ParamStore& src, const std::string& dst_prefix,
                         const std::string& src_prefix) {
    for (const auto& [name, v] : dst.items()) {
        if (name.rfind(dst_prefix, 0) != 0) continue;
        const std::string src_name = src_prefix + name.substr(dst_prefix.size());
        if (!src.has(src_name)) continue;
        Var s = src.get(src_name);
        require_same_shape(v->value, s->value, "copy_params_by_name");
        v->value.data = s->value.data;
    }
}

Tensor init_normal_fan_in(const std::vector<int64_t>& shape, int64_t fan_in, uint64_t seed,
                          const std::string& name) {
    Rng rng(mix_seed({seed, fnv1a64(name)}));
    return Tensor::randn(shape, rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

// ------------------------------------------------------------------- Linear

Linear::Linear(ParamStore& ps, std::string key_, int64_t din_, int64_t dout_, uint64_t seed, bool target)
    : key(std::move(key_)), din(din_), dout(dout_), lora_target(target) {
    w = ps.add(key + ".weight", init_normal_fan_in({dout, din}, din, seed, key + ".weight"));
    b = ps.add(key + ".bias", Tensor::zeros({dout}));
}

Var Linear::fwd(const Var& x, const ForwardCtx* ctx) const {
    Var y = ag::linear(x, w, &b);
    if (ctx && lora_target) {
        if (const LoraEntry* e = ctx->find_lora(key)) {
            // Additive low-rank path; never materializes w + BA.
            Var delta = ag::linear(ag::linear(x, e->a, nullptr), e->b, nullptr);
            y = ag::add(y, ag::scale(delta, e->scaling));
        }
    }
    return y;
}

// ------------------------------------------------------------------- Conv2d

Conv2d::Conv2d(ParamStore& ps, std::string key_, int64_t cin_, int64_t cout_, int k_, int stride_, int pad_,
               uint64_t seed, bool zero_init)
    : key(std::move(key_)), cin(cin_), cout(cout_), k(k_), stride(stride_), pad(pad_) {
    Tensor wt = zero_init ? Tensor::zeros({cout, cin, k, k})
                          : init_normal_fan_in({cout, cin, k, k}, cin * k * k, seed, key + ".weight");
    w = ps.add(key + ".weight", std::move(wt));
    b = ps.add(key + ".bias", Tensor::zeros({cout}));
}

Var Conv2d::fwd(const Var& x, const ForwardCtx* ctx) const {
    Var weight = w, bias = b;
    if (ctx) {
        if (Var ow = ctx->find_override(key + ".weight")) weight = ow;
        if (Var ob = ctx->find_override(key + ".bias")) bias = ob;
    }
    return ag::conv2d(x, weight, &bias, stride, pad);
}

// ---------------------------------------------------------------- GroupNorm

GroupNormL::GroupNormL(ParamStore& ps, std::string key_, int64_t channels, int groups_)
    : key(std::move(key_)), groups(groups_) {
    gamma = ps.add(key + ".gamma", Tensor::full({channels}, 1.0));
    beta = ps.add(key + ".beta", Tensor::zeros({channels}));
}

Var GroupNormL::fwd(const Var& x, const ForwardCtx* ctx) const {
    Var g = gamma, bt = beta;
    if (ctx) {
        if (Var og = ctx->find_override(key + ".gamma")) g = og;
        if (Var ob = ctx->find_override(key + ".beta")) bt = ob;
    }
    return ag::group_norm(x, g, bt, groups);
}

LayerNormL::LayerNormL(ParamStore& ps, std::string key_, int64_t dim) : key(std::move(key_)) {
    gamma = ps.add(key + ".gamma", Tensor::full({dim}, 1.0));
    beta = ps.add(key + ".beta", Tensor::zeros({dim}));
}

Var LayerNormL::fwd(const Var& x, const ForwardCtx* ctx) const {
    Var g = gamma, bt = beta;
    if (ctx) {
        if (Var og = ctx->find_override(key + ".gamma")) g = og;
        if (Var ob = ctx->find_override(key + ".beta")) bt = ob;
    }
    return ag::layer_norm(x, g, bt);
}

// ----------------------------------------------------------------- ResBlock

ResBlock::ResBlock(ParamStore& ps, const std::string& key, int64_t cin, int64_t cout, int64_t temb_dim,
                   uint64_t seed) {
    const int groups_in = static_cast<int>(std::min<int64_t>(8, cin));
    const int groups_out = static_cast<int>(std::min<int64_t>(8, cout));
    gn1 = GroupNormL(ps, key + ".gn1", cin, groups_in);
    conv1 = Conv2d(ps, key + ".conv1", cin, cout, 3, 1, 1, seed);
    temb_proj = Linear(ps, key + ".temb_proj", temb_dim, cout, seed, /*lora_target=*/false);
    gn2 = GroupNormL(ps, key + ".gn2", cout, groups_out);
    conv2 = Conv2d(ps, key + ".conv2", cout, cout, 3, 1, 1, seed);
    if (cin != cout) skip = Conv2d(ps, key + ".skip", cin, cout, 1, 1, 0, seed);
}

Var ResBlock::fwd(const Var& x, const Var& emb, const ForwardCtx* ctx) const {
    Var h = conv1.fwd(ag::silu(gn1.fwd(x, ctx)), ctx);
    h = ag::add_bias_spatial(h, temb_proj.fwd(ag::silu(emb), ctx));
    h = conv2.fwd(ag::silu(gn2.fwd(h, ctx)), ctx);
    return ag::add(h, skip ? skip->fwd(x, ctx) : x);
}

// --------------------------------------------------------------- Transformer

TransformerBlock::TransformerBlock(ParamStore& ps, const std::string& key, int64_t c, int heads_, uint64_t seed)
    : heads(heads_) {
    norm_in = GroupNormL(ps, key + ".norm_in", c, static_cast<int>(std::min<int64_t>(8, c)));
    proj_in = Linear(ps, key + ".proj_in", c, c, seed, true);
    ln1 = LayerNormL(ps, key + ".ln1", c);
    wq = Linear(ps, key + ".attn.q", c, c, seed, true);
    wk = Linear(ps, key + ".attn.k", c, c, seed, true);
    wv = Linear(ps, key + ".attn.v", c, c, seed, true);
    wo = Linear(ps, key + ".attn.out", c, c, seed, true);
    ln2 = LayerNormL(ps, key + ".ln2", c);
    ff1 = Linear(ps, key + ".ff1", c, 4 * c, seed, true);
    ff2 = Linear(ps, key + ".ff2", 4 * c, c, seed, true);
    proj_out = Linear(ps, key + ".proj_out", c, c, seed, true);
}

Var TransformerBlock::fwd(const Var& x, const ForwardCtx* ctx) const {
    const int64_t n = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
    const int64_t tokens = h * w;
    const int64_t dh = c / heads;

    Var tok = ag::nchw_to_tokens(norm_in.fwd(x, ctx));
    tok = proj_in.fwd(tok, ctx);

    Var a_in = ln1.fwd(tok, ctx);
    Var q = ag::split_heads(wq.fwd(a_in, ctx), n, tokens, heads);
    Var k = ag::split_heads(wk.fwd(a_in, ctx), n, tokens, heads);
    Var v = ag::split_heads(wv.fwd(a_in, ctx), n, tokens, heads);
    Var attn = ag::softmax_last(ag::scale(ag::bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh))));
    Var o = ag::merge_heads(ag::bmm(attn, v), n, tokens, heads);
    tok = ag::add(tok, wo.fwd(o, ctx));

    Var f = ff2.fwd(ag::silu(ff1.fwd(ln2.fwd(tok, ctx), ctx)), ctx);
    tok = ag::add(tok, f);

    tok = proj_out.fwd(tok, ctx);
    return ag::add(x, ag::tokens_to_nchw(tok, n, c, h, w));
}

std::vector<const Linear*> TransformerBlock::linears() const {
    return {&proj_in, &wq, &wk, &wv, &wo, &ff1, &ff2, &proj_out};
}

// ----------------------------------------------------------------- timestep

Tensor sinusoidal_embedding(const std::vector<int>& t, int64_t dim) {
    const int64_t half = dim / 2;
    Tensor out({static_cast<int64_t>(t.size()), dim});
    const double log_base = std::log(10000.0) / static_cast<double>(half);
    for (size_t i = 0; i < t.size(); ++i) {
        double* p = out.ptr() + static_cast<int64_t>(i) * dim;
        for (int64_t j = 0; j < half; ++j) {
            const double freq = std::exp(-static_cast<double>(j) * log_base);
            const double angle = static_cast<double>(t[i]) * freq;
            p[j] = std::cos(angle);
            p[half + j] = std::sin(angle);
        }
    }
    return out;
}

}  // namespace ctrlora
