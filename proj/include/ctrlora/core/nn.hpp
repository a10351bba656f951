#pragma once

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctrlora/core/autograd.hpp"
#include "ctrlora/core/rng.hpp"

namespace ctrlora {

// Ordered, named parameter registry. One per model. Names are stable and
// hierarchical ("down.1.res.conv1.weight"); they key checkpoints, digests,
// adapter overrides and optimizer state.
class ParamStore {
public:
    Var add(const std::string& name, Tensor init);
    Var get(const std::string& name) const;
    bool has(const std::string& name) const;
    const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
    size_t size() const { return items_.size(); }
    int64_t total_params() const;

    void set_trainable(bool trainable) const;
    void zero_grads() const;

    // (name, shape) pairs in name-sorted order; the basis for topology digests.
    std::vector<std::pair<std::string, std::vector<int64_t>>> shapes_sorted() const;

private:
    std::vector<std::pair<std::string, Var>> items_;
    std::unordered_map<std::string, size_t> index_;
};

void copy_params_by_name(ParamStore& dst, const ParamStore& src, const std::string& dst_prefix = {},
                         const std::string& src_prefix = {});

// One low-rank pair attached to a linear layer: delta(x) = scaling * (x A^T) B^T.
struct LoraEntry {
    Var a;  // (r, din)
    Var b;  // (dout, r)
    double scaling = 1.0;
};

// Per-forward adapter routing: low-rank deltas per linear key, plus value
// overrides (norms, zero-convs) keyed by full parameter name.
struct ForwardCtx {
    const std::map<std::string, LoraEntry>* lora = nullptr;
    const std::unordered_map<std::string, Var>* overrides = nullptr;

    const LoraEntry* find_lora(const std::string& key) const {
        if (!lora) return nullptr;
        auto it = lora->find(key);
        return it == lora->end() ? nullptr : &it->second;
    }
    Var find_override(const std::string& name) const {
        if (!overrides) return nullptr;
        auto it = overrides->find(name);
        return it == overrides->end() ? nullptr : it->second;
    }
};

// Weight init is derived from (seed, parameter name) so construction order
// never changes the draw.
Tensor init_normal_fan_in(const std::vector<int64_t>& shape, int64_t fan_in, uint64_t seed,
                          const std::string& name);

struct Linear {
    std::string key;
    int64_t din = 0, dout = 0;
    bool lora_target = false;
    Var w, b;

    Linear() = default;
    Linear(ParamStore& ps, std::string key, int64_t din, int64_t dout, uint64_t seed, bool lora_target = false);
    Var fwd(const Var& x, const ForwardCtx* ctx = nullptr) const;
};

struct Conv2d {
    std::string key;
    int64_t cin = 0, cout = 0;
    int k = 3, stride = 1, pad = 1;
    Var w, b;

    Conv2d() = default;
    Conv2d(ParamStore& ps, std::string key, int64_t cin, int64_t cout, int k, int stride, int pad, uint64_t seed,
           bool zero_init = false);
    // ctx consulted for zero-conv weight/bias overrides.
    Var fwd(const Var& x, const ForwardCtx* ctx = nullptr) const;
};

struct GroupNormL {
    std::string key;
    int groups = 8;
    Var gamma, beta;

    GroupNormL() = default;
    GroupNormL(ParamStore& ps, std::string key, int64_t channels, int groups);
    Var fwd(const Var& x, const ForwardCtx* ctx = nullptr) const;
};

struct LayerNormL {
    std::string key;
    Var gamma, beta;

    LayerNormL() = default;
    LayerNormL(ParamStore& ps, std::string key, int64_t dim);
    Var fwd(const Var& x, const ForwardCtx* ctx = nullptr) const;
};

struct ResBlock {
    GroupNormL gn1, gn2;
    Conv2d conv1, conv2;
    Linear temb_proj;
    std::optional<Conv2d> skip;

    ResBlock() = default;
    ResBlock(ParamStore& ps, const std::string& key, int64_t cin, int64_t cout, int64_t temb_dim, uint64_t seed);
    // emb: (N, temb_dim)
    Var fwd(const Var& x, const Var& emb, const ForwardCtx* ctx = nullptr) const;
};

// Pre-norm self-attention + MLP over spatial tokens, residual around the
// whole block: x + proj_out(block(proj_in(norm(x)))).
struct TransformerBlock {
    GroupNormL norm_in;
    LayerNormL ln1, ln2;
    Linear proj_in, wq, wk, wv, wo, ff1, ff2, proj_out;
    int heads = 4;

    TransformerBlock() = default;
    TransformerBlock(ParamStore& ps, const std::string& key, int64_t channels, int heads, uint64_t seed);
    Var fwd(const Var& x, const ForwardCtx* ctx = nullptr) const;
    std::vector<const Linear*> linears() const;
};

// (N, dim) sinusoidal embedding of integer timesteps.
Tensor sinusoidal_embedding(const std::vector<int>& t, int64_t dim);

}  // namespace ctrlora
