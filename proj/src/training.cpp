#include "ctrlora/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "ctrlora/core/digest.hpp"
#include "ctrlora/core/serialize.hpp"
#include "ctrlora/metrics.hpp"

namespace ctrlora {

using nlohmann::json;

std::string stage_name(Stage s) {
    switch (s) {
        case Stage::base: return "base";
        case Stage::adapt: return "adapt";
        case Stage::full: return "full";
    }
    return "?";
}

Stage stage_from_name(const std::string& s) {
    if (s == "base") return Stage::base;
    if (s == "adapt") return Stage::adapt;
    if (s == "full") return Stage::full;
    throw ConfigError("unknown stage: " + s);
}

json TrainConfig::to_json() const {
    return json{{"stage", stage_name(stage)},
                {"lr", lr},
                {"weight_decay", weight_decay},
                {"beta1", beta1},
                {"beta2", beta2},
                {"adam_eps", adam_eps},
                {"clip_norm", clip_norm},
                {"batch_size", batch_size},
                {"total_steps", total_steps},
                {"start_step", start_step},
                {"cfg_null_prob", cfg_null_prob},
                {"lora_rank", lora_rank},
                {"lora_alpha", lora_alpha},
                {"seed", seed},
                {"eval_every", eval_every},
                {"eval_images", eval_images},
                {"eval_ddim_steps", eval_ddim_steps},
                {"eval_guidance", eval_guidance},
                {"strength", strength},
                {"stop_at_gate", stop_at_gate}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.stage = stage_from_name(j.at("stage").get<std::string>());
    c.lr = j.at("lr").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.clip_norm = j.at("clip_norm").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.total_steps = j.at("total_steps").get<int64_t>();
    c.start_step = j.at("start_step").get<int64_t>();
    c.cfg_null_prob = j.at("cfg_null_prob").get<double>();
    c.lora_rank = j.at("lora_rank").get<int>();
    c.lora_alpha = j.at("lora_alpha").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    c.eval_every = j.at("eval_every").get<int64_t>();
    c.eval_images = j.at("eval_images").get<int>();
    c.eval_ddim_steps = j.at("eval_ddim_steps").get<int>();
    c.eval_guidance = j.at("eval_guidance").get<double>();
    c.strength = j.at("strength").get<double>();
    c.stop_at_gate = j.at("stop_at_gate").get<bool>();
    return c;
}

// --------------------------------------------------------------------- AdamW

void AdamW::step(const std::vector<std::pair<std::string, Var>>& active) {
    for (const auto& [name, p] : active) {
        auto& st = states_[name];
        if (st.m.numel() == 0) {
            st.m = Tensor::zeros(p->value.shape);
            st.v = Tensor::zeros(p->value.shape);
            st.t = 0;
        }
        st.t += 1;
        const double bc1 = 1.0 - std::pow(h_.beta1, static_cast<double>(st.t));
        const double bc2 = 1.0 - std::pow(h_.beta2, static_cast<double>(st.t));
        p->ensure_grad();
        for (int64_t i = 0; i < p->value.numel(); ++i) {
            const double g = p->grad.data[i];
            st.m.data[i] = h_.beta1 * st.m.data[i] + (1.0 - h_.beta1) * g;
            st.v.data[i] = h_.beta2 * st.v.data[i] + (1.0 - h_.beta2) * g * g;
            const double mhat = st.m.data[i] / bc1;
            const double vhat = st.v.data[i] / bc2;
            p->value.data[i] -= h_.lr * (mhat / (std::sqrt(vhat) + h_.eps) + h_.weight_decay * p->value.data[i]);
        }
    }
}

std::map<std::string, Tensor> AdamW::export_state() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, st] : states_) {
        out.emplace("m." + name, st.m);
        out.emplace("v." + name, st.v);
        out.emplace("t." + name, Tensor::scalar(static_cast<double>(st.t)));
    }
    return out;
}

void AdamW::import_state(const std::map<std::string, Tensor>& st) {
    states_.clear();
    for (const auto& [name, t] : st) {
        if (name.rfind("m.", 0) == 0) states_[name.substr(2)].m = t;
        else if (name.rfind("v.", 0) == 0) states_[name.substr(2)].v = t;
        else if (name.rfind("t.", 0) == 0) states_[name.substr(2)].t = static_cast<int64_t>(t.data[0]);
    }
}

double clip_global_norm(const std::vector<std::pair<std::string, Var>>& active, double max_norm) {
    double sq = 0.0;
    for (const auto& [_, p] : active) {
        if (!p->grad_alloc) continue;
        for (double g : p->grad.data) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (const auto& [_, p] : active) {
            if (!p->grad_alloc) continue;
            for (double& g : p->grad.data) g *= scale;
        }
    }
    return norm;
}

// ----------------------------------------------------------------------- logs

void write_step_log(const std::filesystem::path& path, const std::vector<StepLog>& log) {
    std::ofstream f(path, std::ios::trunc);
    for (const auto& e : log) {
        json j{{"step", e.step}, {"kind", e.kind}, {"loss", e.loss}, {"lr", e.lr}, {"wallclock", e.wallclock}};
        f << j.dump() << "\n";
    }
}

void write_eval_log(const std::filesystem::path& path, const std::vector<EvalPoint>& log) {
    std::ofstream f(path, std::ios::trunc);
    for (const auto& e : log) f << json{{"step", e.step}, {"fidelity", e.fidelity}}.dump() << "\n";
}

std::vector<EvalPoint> read_eval_log(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open eval log: " + path.string());
    std::vector<EvalPoint> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        out.push_back({j.at("step").get<int64_t>(), j.at("fidelity").get<double>()});
    }
    return out;
}

// -------------------------------------------------------------------- helpers

namespace {

Tensor images_to_batch(const std::vector<Image>& images, const std::vector<int64_t>& idx) {
    const Tensor first = image_to_tensor(images[static_cast<size_t>(idx[0])]);
    Tensor batch({static_cast<int64_t>(idx.size()), first.dim(0), first.dim(1), first.dim(2)});
    const int64_t per = first.numel();
    for (size_t i = 0; i < idx.size(); ++i) {
        const Tensor t = image_to_tensor(images[static_cast<size_t>(idx[i])]);
        std::copy(t.data.begin(), t.data.end(), batch.ptr() + static_cast<int64_t>(i) * per);
    }
    return batch;
}

Tensor stack_slices(const std::vector<Tensor>& items, const std::vector<int64_t>& idx) {
    const Tensor& first = items[static_cast<size_t>(idx[0])];
    std::vector<int64_t> shp = {static_cast<int64_t>(idx.size())};
    shp.insert(shp.end(), first.shape.begin(), first.shape.end());
    Tensor batch(shp);
    const int64_t per = first.numel();
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy(items[static_cast<size_t>(idx[i])].data.begin(), items[static_cast<size_t>(idx[i])].data.end(),
                  batch.ptr() + static_cast<int64_t>(i) * per);
    return batch;
}

struct CachedSubset {
    std::vector<Tensor> x0;    // scaled latents (C, h, w)
    std::vector<Tensor> cond;  // condition latent or raw image tensor
    std::vector<int> labels;
};

constexpr int kEncodeChunk = 64;

std::vector<Tensor> encode_images_chunked(const Autoencoder& ae, const std::vector<Image>& images) {
    std::vector<Tensor> out;
    out.reserve(images.size());
    for (size_t base = 0; base < images.size(); base += kEncodeChunk) {
        const size_t n = std::min<size_t>(kEncodeChunk, images.size() - base);
        std::vector<int64_t> idx(n);
        for (size_t i = 0; i < n; ++i) idx[i] = static_cast<int64_t>(base + i);
        const Tensor lat = ae.encode_batch(images_to_batch(images, idx));
        for (size_t i = 0; i < n; ++i) out.push_back(batch_slice(lat, static_cast<int64_t>(i)));
    }
    return out;
}

CachedSubset cache_subset(const ConditionDataset& ds, const Autoencoder& ae, EmbedMode mode) {
    CachedSubset c;
    std::vector<Image> imgs, conds;
    imgs.reserve(ds.records.size());
    conds.reserve(ds.records.size());
    for (const auto& r : ds.records) {
        imgs.push_back(read_png(ds.image_path(r)));
        conds.push_back(read_png(ds.cond_path(r)));
        c.labels.push_back(r.class_label);
    }
    c.x0 = encode_images_chunked(ae, imgs);
    if (mode == EmbedMode::vae_latent) {
        c.cond = encode_images_chunked(ae, conds);
    } else {
        for (const Image& img : conds) c.cond.push_back(image_to_tensor(img));
    }
    return c;
}

DiffusionBatch make_step_batch(const CachedSubset& cache, const std::vector<int64_t>& recs, int kind,
                               const TrainConfig& cfg, const NoiseSchedule& sched, int64_t step, int null_class) {
    DiffusionBatch b;
    b.kind = kind;
    b.x0 = stack_slices(cache.x0, recs);
    b.cond = stack_slices(cache.cond, recs);
    Rng rng(mix_seed({cfg.seed, 0x57E9ull, static_cast<uint64_t>(step)}));
    for (int64_t r : recs) {
        b.t.push_back(1 + static_cast<int>(rng.uniform_int(sched.T)));
        (void)r;
    }
    for (int64_t r : recs) {
        const bool drop = rng.uniform() < cfg.cfg_null_prob;
        b.class_labels.push_back(drop ? null_class : cache.labels[static_cast<size_t>(r)]);
    }
    b.eps = Tensor(b.x0.shape);
    for (auto& v : b.eps.data) v = rng.normal();
    return b;
}

void append_params(std::vector<std::pair<std::string, Var>>& out, const ParamStore& ps,
                   const std::string& prefix, bool only_trainable) {
    for (const auto& [name, v] : ps.items())
        if (!only_trainable || v->requires_grad) out.emplace_back(prefix + name, v);
}

struct FreezeGuard {
    const ParamStore* ps;
    std::string what;
    std::string before;

    FreezeGuard(const ParamStore& p, std::string w) : ps(&p), what(std::move(w)), before(value_digest(p)) {}
    void check() const {
        if (value_digest(*ps) != before)
            throw FrozenViolationError("frozen " + what + " changed during training");
    }
};

}  // namespace

// ------------------------------------------------------------------- sampling

Tensor sample_latent(const SampleSpec& spec, const NoiseSchedule& sched, const Tensor& cond, int class_label) {
    const UNetConfig& ucfg = spec.unet->cfg;
    Tensor cond_batched = cond;
    if (spec.cn) {
        if (cond.numel() == 0) throw ConfigError("sample_latent: control branch requires a condition");
        if (cond_batched.ndim() == 3)
            cond_batched.shape = {1, cond.dim(0), cond.dim(1), cond.dim(2)};
    }

    GuidedPredictFn predict = [&](const Tensor& x, int t, bool conditional) {
        NoGradGuard ng;
        const std::vector<int> ts{t};
        const std::vector<int> labels{conditional ? class_label : ucfg.null_class()};
        std::vector<Var> residuals;
        std::vector<Var>* rp = nullptr;
        if (spec.cn) {
            residuals = spec.cn->forward(x, ts, labels, cond_batched, spec.adapter, spec.use_overrides);
            for (auto& r : residuals) r = ag::scale(r, spec.strength);
            rp = &residuals;
        }
        return spec.unet->predict(x, ts, labels, rp)->value;
    };

    DdimConfig dc;
    dc.steps = spec.ddim_steps;
    dc.guidance = spec.guidance;
    dc.seed = spec.seed;
    return ddim_sample(predict, sched, dc, {1, ucfg.latent_channels, ucfg.latent_size, ucfg.latent_size});
}

Image sample_image(const SampleSpec& spec, const NoiseSchedule& sched, const Tensor& cond, int class_label) {
    Tensor lat = sample_latent(spec, sched, cond, class_label);
    lat.shape = {lat.dim(1), lat.dim(2), lat.dim(3)};
    return tensor_to_image(spec.ae->decode(lat));
}

FidelityScore evaluate_fidelity(const SampleSpec& spec, const NoiseSchedule& sched, const ConditionDataset& val,
                                const CondParams& params, int n_images) {
    if (val.records.empty()) throw DataError("evaluate_fidelity: empty val split");
    const bool conv_mode = spec.cn && spec.cn->embed_mode == EmbedMode::conv_encoder;
    std::vector<Image> generated, refs;
    for (int i = 0; i < n_images; ++i) {
        const auto& r = val.records[static_cast<size_t>(i) % val.records.size()];
        const Image cond_img = read_png(val.cond_path(r));
        Tensor cond;
        if (spec.cn)
            cond = conv_mode ? image_to_tensor(cond_img)
                             : spec.ae->embed_condition(image_to_tensor(cond_img)).values;
        SampleSpec s = spec;
        s.seed = mix_seed({spec.seed, fnv1a64("eval"), static_cast<uint64_t>(i)});
        generated.push_back(sample_image(s, sched, cond, r.class_label));
        refs.push_back(condition_role(val.kind) == ConditionRole::structural ? cond_img
                                                                             : read_png(val.image_path(r)));
    }
    if (condition_role(val.kind) == ConditionRole::structural)
        return cycle_fidelity(generated, refs, val.kind, params);
    FidelityScore s = ground_truth_fidelity(generated, refs);
    s.kind = val.kind;
    return s;
}

// ---------------------------------------------------------------- pretraining

double compute_latent_scale(const std::vector<Tensor>& latents) {
    double sum = 0.0, sumsq = 0.0;
    int64_t n = 0;
    for (const auto& t : latents) {
        for (double v : t.data) {
            sum += v;
            sumsq += v * v;
        }
        n += t.numel();
    }
    const double mean = sum / static_cast<double>(n);
    const double var = sumsq / static_cast<double>(n) - mean * mean;
    if (!(var > 0)) throw DivergenceError("latent statistics degenerate");
    return 1.0 / std::sqrt(var);
}

PretrainAeResult pretrain_autoencoder(Autoencoder& ae, const std::vector<Image>& train_images,
                                      const std::vector<Image>& val_images, const TrainConfig& cfg,
                                      double psnr_gate_db) {
    if (train_images.size() < 1000)
        throw ConfigError("pretrain_autoencoder: needs at least 1000 training images");
    ae.params.set_trainable(true);
    AdamW opt({cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay});
    RoundRobinSampler sampler({static_cast<int64_t>(train_images.size())}, cfg.batch_size,
                              mix_seed({cfg.seed, fnv1a64("ae")}));
    const int64_t zc = ae.cfg.latent_channels;

    std::vector<std::pair<std::string, Var>> active;
    append_params(active, ae.params, "autoencoder.", true);

    for (int64_t step = 0; step < cfg.total_steps; ++step) {
        const auto batch = sampler.at(step);
        const Tensor x = images_to_batch(train_images, batch.records);
        Rng rng(mix_seed({cfg.seed, fnv1a64("ae.step"), static_cast<uint64_t>(step)}));
        Tensor eps(std::vector<int64_t>{x.dim(0), zc, ae.cfg.latent_size(), ae.cfg.latent_size()});
        for (auto& v : eps.data) v = rng.normal();

        Var moments = ae.encode_moments(make_constant(x));
        Var mean = ag::slice_channels(moments, 0, zc);
        Var logvar = ag::slice_channels(moments, zc, 2 * zc);
        Var z = ag::add(mean, ag::mul(ag::exp(ag::scale(logvar, 0.5)), make_constant(eps)));
        Var recon = ae.decode_raw(z);
        Var loss = ag::mse(recon, x);
        // KL(q || N(0, I)) per element: 0.5 (mu^2 + e^lv - lv - 1)
        Var kl = ag::mean_all(
            ag::scale(ag::sub(ag::add(ag::mul(mean, mean), ag::exp(logvar)), ag::add_scalar(logvar, 1.0)), 0.5));
        Var total = ag::add(loss, ag::scale(kl, ae.cfg.kl_weight));
        if (!std::isfinite(total->value.data[0])) throw DivergenceError("autoencoder loss diverged");

        backward(total);
        clip_global_norm(active, cfg.clip_norm);
        opt.step(active);
        ae.params.zero_grads();
    }

    // latent_scale: reciprocal empirical stddev of posterior means over the
    // training set (computed at scale 1).
    ae.latent_scale = 1.0;
    ae.latent_scale = compute_latent_scale(encode_images_chunked(ae, train_images));

    double psnr_sum = 0.0;
    for (const Image& img : val_images) {
        const Tensor lat = ae.encode(image_to_tensor(img)).values;
        psnr_sum += psnr_u8(tensor_to_image(ae.decode(lat)), img);
    }
    PretrainAeResult res;
    res.val_psnr = psnr_sum / static_cast<double>(val_images.size());
    res.steps_run = cfg.total_steps;
    if (res.val_psnr < psnr_gate_db)
        throw DivergenceError("pretrain_autoencoder: reconstruction PSNR " + std::to_string(res.val_psnr) +
                              " dB below gate after budget");
    return res;
}

PretrainUnetResult pretrain_unet(UNet& unet, const Autoencoder& ae, const std::vector<Image>& train_images,
                                 const std::vector<int>& train_labels, const std::vector<Image>& val_images,
                                 const std::vector<int>& val_labels, const NoiseSchedule& sched,
                                 const TrainConfig& cfg, double gate_ratio) {
    FreezeGuard ae_guard(ae.params, "autoencoder");
    const std::vector<Tensor> train_lat = encode_images_chunked(ae, train_images);
    const std::vector<Tensor> val_lat = encode_images_chunked(ae, val_images);

    unet.params.set_trainable(true);
    AdamW opt({cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay});
    RoundRobinSampler sampler({static_cast<int64_t>(train_lat.size())}, cfg.batch_size,
                              mix_seed({cfg.seed, fnv1a64("unet")}));
    std::vector<std::pair<std::string, Var>> active;
    append_params(active, unet.params, "unet.", true);

    CachedSubset cache;
    cache.x0 = train_lat;
    cache.labels = train_labels;
    cache.cond = train_lat;  // unused

    for (int64_t step = 0; step < cfg.total_steps; ++step) {
        const auto bs = sampler.at(step);
        DiffusionBatch b = make_step_batch(cache, bs.records, 0, cfg, sched, step, unet.cfg.null_class());
        Var loss = diffusion_loss(
            [&](const Tensor& x_t, const DiffusionBatch& bb) {
                return unet.predict(x_t, bb.t, bb.class_labels);
            },
            b, sched);
        backward(loss);
        clip_global_norm(active, cfg.clip_norm);
        opt.step(active);
        unet.params.zero_grads();
    }

    // Held-out loss vs the zero-predictor baseline on identical batches.
    CachedSubset vcache;
    vcache.x0 = val_lat;
    vcache.labels = val_labels;
    vcache.cond = val_lat;
    TrainConfig vcfg = cfg;
    vcfg.cfg_null_prob = 0.0;
    double loss_sum = 0.0, base_sum = 0.0;
    int64_t n_batches = 0;
    NoGradGuard ng;
    for (size_t i = 0; i + static_cast<size_t>(cfg.batch_size) <= val_lat.size();
         i += static_cast<size_t>(cfg.batch_size)) {
        std::vector<int64_t> recs(static_cast<size_t>(cfg.batch_size));
        for (int k = 0; k < cfg.batch_size; ++k) recs[static_cast<size_t>(k)] = static_cast<int64_t>(i) + k;
        DiffusionBatch b = make_step_batch(vcache, recs, 0, vcfg, sched, static_cast<int64_t>(1e9 + i),
                                           unet.cfg.null_class());
        loss_sum += diffusion_loss(
                        [&](const Tensor& x_t, const DiffusionBatch& bb) {
                            return unet.predict(x_t, bb.t, bb.class_labels);
                        },
                        b, sched)
                        ->value.data[0];
        base_sum += diffusion_loss(
                        [&](const Tensor& x_t, const DiffusionBatch& bb) {
                            (void)x_t;
                            return make_constant(Tensor::zeros(bb.eps.shape));
                        },
                        b, sched)
                        ->value.data[0];
        ++n_batches;
    }
    PretrainUnetResult res;
    res.val_loss = loss_sum / static_cast<double>(n_batches);
    res.zero_predictor_baseline = base_sum / static_cast<double>(n_batches);
    ae_guard.check();
    if (!(res.val_loss < gate_ratio * res.zero_predictor_baseline))
        throw DivergenceError("pretrain_unet: held-out loss " + std::to_string(res.val_loss) +
                              " did not beat the zero-predictor gate");
    return res;
}

// ---------------------------------------------------------------- main stages

namespace {

struct LoopPlan {
    BaseControlNet* cn = nullptr;
    const UNet* unet = nullptr;
    const Autoencoder* ae = nullptr;
    std::vector<LoraAdapter*> adapters;            // one per subset in base mode
    std::vector<const ConditionDataset*> subsets;  // train splits
    const ConditionDataset* val = nullptr;
    bool train_theta = true;
    bool train_lora = false;
    bool train_overrides = false;
    bool use_overrides_fwd = false;
};

TrainResult run_loop(const LoopPlan& plan, const NoiseSchedule& sched, const TrainConfig& cfg,
                     const CondParams& params, const std::filesystem::path& log_dir,
                     const std::map<std::string, Tensor>* optim_state,
                     std::map<std::string, Tensor>* optim_state_out) {
    const auto t_start = std::chrono::steady_clock::now();
    FreezeGuard unet_guard(plan.unet->params, "unet");
    FreezeGuard ae_guard(plan.ae->params, "autoencoder");
    std::optional<FreezeGuard> theta_guard;
    if (!plan.train_theta) theta_guard.emplace(plan.cn->params, "base controlnet");

    std::vector<CachedSubset> caches;
    std::vector<int64_t> sizes;
    for (const auto* ds : plan.subsets) {
        caches.push_back(cache_subset(*ds, *plan.ae, plan.cn->embed_mode));
        sizes.push_back(static_cast<int64_t>(ds->records.size()));
    }
    RoundRobinSampler sampler(sizes, cfg.batch_size, mix_seed({cfg.seed, fnv1a64("rr")}));

    plan.unet->params.set_trainable(false);
    plan.ae->params.set_trainable(false);
    plan.cn->params.set_trainable(plan.train_theta);
    for (auto* ad : plan.adapters) ad->set_trainable(false, false);

    AdamW opt({cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay});
    if (optim_state) opt.import_state(*optim_state);

    TrainResult res;
    for (int64_t step = cfg.start_step; step < cfg.total_steps; ++step) {
        const auto bs = sampler.at(step);
        LoraAdapter* adapter = plan.adapters.empty() ? nullptr : plan.adapters[static_cast<size_t>(bs.kind)];
        if (adapter) adapter->set_trainable(plan.train_lora, plan.train_overrides);

        DiffusionBatch b = make_step_batch(caches[static_cast<size_t>(bs.kind)], bs.records, bs.kind, cfg, sched,
                                           step, plan.unet->cfg.null_class());
        Var loss = diffusion_loss(
            [&](const Tensor& x_t, const DiffusionBatch& bb) {
                std::vector<Var> residuals =
                    plan.cn->forward(x_t, bb.t, bb.class_labels, bb.cond, adapter, plan.use_overrides_fwd);
                return plan.unet->predict(x_t, bb.t, bb.class_labels, &residuals);
            },
            b, sched);
        backward(loss);

        std::vector<std::pair<std::string, Var>> active;
        if (plan.train_theta) append_params(active, plan.cn->params, "controlnet.", true);
        if (adapter)
            append_params(active, adapter->params, "adapter." + adapter->condition_kind + ".", true);
        clip_global_norm(active, cfg.clip_norm);
        opt.step(active);
        plan.cn->params.zero_grads();
        if (adapter) {
            adapter->params.zero_grads();
            adapter->set_trainable(false, false);
        }

        const std::string kind_name = condition_name(plan.subsets[static_cast<size_t>(bs.kind)]->kind);
        res.steps_per_kind[kind_name] += 1;
        res.steps.push_back({step, kind_name, loss->value.data[0], cfg.lr,
                             std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count()});

        if (plan.val && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            LoraAdapter* eval_adapter = plan.adapters.empty() ? nullptr : plan.adapters[0];
            SampleSpec spec;
            spec.unet = plan.unet;
            spec.ae = plan.ae;
            spec.cn = plan.cn;
            spec.adapter = eval_adapter;
            spec.use_overrides = plan.use_overrides_fwd;
            spec.strength = cfg.strength;
            spec.guidance = cfg.eval_guidance;
            spec.ddim_steps = cfg.eval_ddim_steps;
            spec.seed = mix_seed({cfg.seed, fnv1a64("eval.seed"), static_cast<uint64_t>(step + 1)});
            const FidelityScore score = evaluate_fidelity(spec, sched, *plan.val, params, cfg.eval_images);
            res.evals.push_back({step + 1, score.aggregate});
            if (!res.steps_to_gate && score.meets_gate(params)) {
                res.steps_to_gate = step + 1;
                if (cfg.stop_at_gate) break;
            }
        }
    }

    if (optim_state_out) *optim_state_out = opt.export_state();
    if (!log_dir.empty()) {
        std::filesystem::create_directories(log_dir);
        write_step_log(log_dir / "train_log.ndjson", res.steps);
        if (!res.evals.empty()) write_eval_log(log_dir / "eval_log.ndjson", res.evals);
    }
    unet_guard.check();
    ae_guard.check();
    if (theta_guard) theta_guard->check();
    return res;
}

}  // namespace

TrainResult train_base(BaseControlNet& cn, std::vector<LoraAdapter>& adapters, const UNet& unet,
                       const Autoencoder& ae, const std::vector<ConditionDataset>& subsets,
                       const NoiseSchedule& sched, const TrainConfig& cfg, const CondParams& params,
                       const std::filesystem::path& log_dir, const std::map<std::string, Tensor>* optim_state,
                       std::map<std::string, Tensor>* optim_state_out) {
    if (cfg.stage != Stage::base) throw ConfigError("train_base: cfg.stage must be 'base'");
    if (subsets.size() < 2 || adapters.size() != subsets.size())
        throw ConfigError("train_base: needs K >= 2 subsets with one adapter each");
    LoopPlan plan;
    plan.cn = &cn;
    plan.unet = &unet;
    plan.ae = &ae;
    for (auto& ad : adapters) plan.adapters.push_back(&ad);
    for (const auto& ds : subsets) plan.subsets.push_back(&ds);
    plan.train_theta = true;
    plan.train_lora = true;
    plan.train_overrides = false;  // shared norms/zero-convs live in theta during stage 1
    plan.use_overrides_fwd = false;
    TrainResult res = run_loop(plan, sched, cfg, params, log_dir, optim_state, optim_state_out);
    // Export-ready adapters must carry the final shared norm/zero-conv values.
    for (auto& ad : adapters) refresh_overrides(ad, cn);
    return res;
}

TrainResult train_new_lora(BaseControlNet& cn, LoraAdapter& adapter, const UNet& unet, const Autoencoder& ae,
                           const ConditionDataset& train_subset, const ConditionDataset* val_subset,
                           const NoiseSchedule& sched, const TrainConfig& cfg, const CondParams& params,
                           const std::filesystem::path& log_dir, const std::map<std::string, Tensor>* optim_state,
                           std::map<std::string, Tensor>* optim_state_out) {
    if (cfg.stage != Stage::adapt) throw ConfigError("train_new_lora: cfg.stage must be 'adapt'");
    if (adapter.base_topology_digest != cn.topology_digest_str())
        throw CompatibilityError("train_new_lora: adapter does not match this base");
    LoopPlan plan;
    plan.cn = &cn;
    plan.unet = &unet;
    plan.ae = &ae;
    plan.adapters = {&adapter};
    plan.subsets = {&train_subset};
    plan.val = val_subset;
    plan.train_theta = false;
    plan.train_lora = true;
    plan.train_overrides = true;
    plan.use_overrides_fwd = true;
    return run_loop(plan, sched, cfg, params, log_dir, optim_state, optim_state_out);
}

TrainResult train_full_controlnet(BaseControlNet& cn, const UNet& unet, const Autoencoder& ae,
                                  const ConditionDataset& train_subset, const ConditionDataset* val_subset,
                                  const NoiseSchedule& sched, const TrainConfig& cfg, const CondParams& params,
                                  const std::filesystem::path& log_dir) {
    if (cfg.stage != Stage::full) throw ConfigError("train_full_controlnet: cfg.stage must be 'full'");
    LoopPlan plan;
    plan.cn = &cn;
    plan.unet = &unet;
    plan.ae = &ae;
    plan.subsets = {&train_subset};
    plan.val = val_subset;
    plan.train_theta = true;
    plan.train_lora = false;
    plan.train_overrides = false;
    plan.use_overrides_fwd = false;
    return run_loop(plan, sched, cfg, params, log_dir, nullptr, nullptr);
}

// ----------------------------------------------------------------- checkpoint

namespace {

void store_params(std::map<std::string, Tensor>& out, const ParamStore& ps, const std::string& prefix) {
    for (const auto& [name, v] : ps.items()) out.emplace(prefix + name, v->value);
}

void load_params(ParamStore& ps, const std::map<std::string, Tensor>& tensors, const std::string& prefix) {
    for (const auto& [name, v] : ps.items()) {
        auto it = tensors.find(prefix + name);
        if (it == tensors.end()) throw DataError("checkpoint missing tensor " + prefix + name);
        require_same_shape(v->value, it->second, "checkpoint tensor");
        v->value.data = it->second.data;
    }
}

LoraAdapter adapter_from_tensors(const std::string& condition_kind, int rank, double alpha,
                                 const std::string& base_digest,
                                 const std::map<std::string, Tensor>& tensors, const BaseControlNet& cn) {
    LoraAdapter ad;
    ad.condition_kind = condition_kind;
    ad.rank = rank;
    ad.alpha = alpha;
    ad.base_topology_digest = base_digest;

    std::vector<std::string> expected = cn.lora_target_keys();
    for (const std::string& key : expected) {
        auto ia = tensors.find("lora." + key + ".a");
        auto ib = tensors.find("lora." + key + ".b");
        if (ia == tensors.end() || ib == tensors.end())
            throw CompatibilityError("adapter is missing low-rank pair for layer " + key);
        Var a = ad.params.add("lora." + key + ".a", ia->second);
        Var b = ad.params.add("lora." + key + ".b", ib->second);
        ad.entries.emplace(key, LoraEntry{a, b, ad.scaling()});
    }
    for (const auto& list : {cn.norm_param_names(), cn.zero_conv_param_names()})
        for (const std::string& name : list) {
            auto it = tensors.find("ov." + name);
            if (it == tensors.end()) throw CompatibilityError("adapter is missing override " + name);
            Var ov = ad.params.add("ov." + name, it->second);
            ad.overrides.emplace(name, ov);
        }
    // Reject extras: the target-layer set must match exactly.
    for (const auto& [name, t] : tensors) {
        (void)t;
        if (!ad.params.has(name)) throw CompatibilityError("adapter has unexpected tensor " + name);
    }
    return ad;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    json meta;
    meta["kind"] = "checkpoint";
    meta["stage"] = stage_name(ck.stage);
    meta["step"] = ck.step;
    meta["schedule"] = json{{"T", ck.sched.T},
                            {"betas", ck.sched.betas},
                            {"alphas", ck.sched.alphas},
                            {"alpha_bars", ck.sched.alpha_bars}};
    std::map<std::string, Tensor> tensors;
    json digests;
    if (ck.ae) {
        meta["autoencoder"] = json{{"config", ck.ae->cfg.to_json()}, {"latent_scale", ck.ae->latent_scale}};
        store_params(tensors, ck.ae->params, "autoencoder.");
        digests["autoencoder"] = value_digest(ck.ae->params);
    }
    if (ck.unet) {
        meta["unet"] = json{{"config", ck.unet->cfg.to_json()}};
        store_params(tensors, ck.unet->params, "unet.");
        digests["unet"] = value_digest(ck.unet->params);
    }
    if (ck.cn) {
        meta["controlnet"] = json{{"config", ck.cn->cfg.to_json()},
                                  {"embed_mode", embed_mode_name(ck.cn->embed_mode)}};
        store_params(tensors, ck.cn->params, "controlnet.");
        digests["controlnet_topology"] = ck.cn->topology_digest_str();
    }
    json adapters_meta = json::object();
    for (const auto& ad : ck.adapters) {
        adapters_meta[ad.condition_kind] = json{{"rank", ad.rank},
                                                {"alpha", ad.alpha},
                                                {"base_topology_digest", ad.base_topology_digest}};
        store_params(tensors, ad.params, "adapter." + ad.condition_kind + ".");
    }
    meta["adapters"] = adapters_meta;
    meta["digests"] = digests;
    for (const auto& [name, t] : ck.optim) tensors.emplace("optim." + name, t);
    write_archive(path, meta, tensors);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    Archive ar = read_archive(path);
    if (!ar.meta.contains("kind") || ar.meta["kind"] != "checkpoint")
        throw CompatibilityError("not a checkpoint file: " + path.string());

    Checkpoint ck;
    ck.stage = stage_from_name(ar.meta.at("stage").get<std::string>());
    ck.step = ar.meta.at("step").get<int64_t>();
    const json& sj = ar.meta.at("schedule");
    ck.sched.T = sj.at("T").get<int>();
    ck.sched.betas = sj.at("betas").get<std::vector<double>>();
    ck.sched.alphas = sj.at("alphas").get<std::vector<double>>();
    ck.sched.alpha_bars = sj.at("alpha_bars").get<std::vector<double>>();
    ck.sched.validate();

    if (ar.meta.contains("autoencoder")) {
        ck.ae = std::make_unique<Autoencoder>(
            AutoencoderConfig::from_json(ar.meta["autoencoder"].at("config")), /*seed=*/0);
        ck.ae->latent_scale = ar.meta["autoencoder"].at("latent_scale").get<double>();
        load_params(ck.ae->params, ar.tensors, "autoencoder.");
        if (ar.meta.at("digests").contains("autoencoder") &&
            value_digest(ck.ae->params) != ar.meta["digests"]["autoencoder"].get<std::string>())
            throw CompatibilityError("checkpoint autoencoder digest mismatch");
    }
    if (ar.meta.contains("unet")) {
        ck.unet = std::make_unique<UNet>(UNetConfig::from_json(ar.meta["unet"].at("config")), /*seed=*/0);
        load_params(ck.unet->params, ar.tensors, "unet.");
        if (ar.meta.at("digests").contains("unet") &&
            value_digest(ck.unet->params) != ar.meta["digests"]["unet"].get<std::string>())
            throw CompatibilityError("checkpoint unet digest mismatch");
    }
    if (ar.meta.contains("controlnet")) {
        ck.cn = std::make_unique<BaseControlNet>(
            UNetConfig::from_json(ar.meta["controlnet"].at("config")),
            embed_mode_from_name(ar.meta["controlnet"].at("embed_mode").get<std::string>()), /*seed=*/0);
        load_params(ck.cn->params, ar.tensors, "controlnet.");
    }
    for (const auto& [kind, jm] : ar.meta.at("adapters").items()) {
        if (!ck.cn) throw CompatibilityError("checkpoint has adapters but no controlnet section");
        const std::string prefix = "adapter." + kind + ".";
        std::map<std::string, Tensor> sub;
        for (const auto& [name, t] : ar.tensors)
            if (name.rfind(prefix, 0) == 0) sub.emplace(name.substr(prefix.size()), t);
        LoraAdapter ad = adapter_from_tensors(kind, jm.at("rank").get<int>(), jm.at("alpha").get<double>(),
                                              jm.at("base_topology_digest").get<std::string>(), sub, *ck.cn);
        if (ad.base_topology_digest != ck.cn->topology_digest_str())
            throw CompatibilityError("checkpoint adapter '" + kind + "' does not match the controlnet topology");
        ck.adapters.push_back(std::move(ad));
    }
    for (const auto& [name, t] : ar.tensors)
        if (name.rfind("optim.", 0) == 0) ck.optim.emplace(name.substr(6), t);
    return ck;
}

void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& path) {
    json meta{{"kind", "adapter"},
              {"condition_kind", adapter.condition_kind},
              {"rank", adapter.rank},
              {"alpha", adapter.alpha},
              {"base_topology_digest", adapter.base_topology_digest}};
    std::map<std::string, Tensor> tensors;
    store_params(tensors, adapter.params, "");
    write_archive(path, meta, tensors);
}

LoraAdapter load_adapter(const std::filesystem::path& path, const BaseControlNet& cn) {
    Archive ar = read_archive(path);
    if (!ar.meta.contains("kind") || ar.meta["kind"] != "adapter")
        throw CompatibilityError("not an adapter file: " + path.string());
    const std::string digest = ar.meta.at("base_topology_digest").get<std::string>();
    if (digest != cn.topology_digest_str())
        throw CompatibilityError("adapter base-topology digest does not match the loaded base");
    return adapter_from_tensors(ar.meta.at("condition_kind").get<std::string>(), ar.meta.at("rank").get<int>(),
                                ar.meta.at("alpha").get<double>(), digest, ar.tensors, cn);
}

}  // namespace ctrlora
