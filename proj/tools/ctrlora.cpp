// ctrlora: train a shared Base ControlNet over multiple image conditions,
// adapt it to new conditions with per-condition LoRA files, compose adapters,
// and evaluate condition fidelity.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "ctrlora/core/digest.hpp"
#include "ctrlora/metrics.hpp"
#include "ctrlora/training.hpp"

using namespace ctrlora;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

uint64_t resolve_seed(int64_t flag_seed) {
    if (flag_seed >= 0) return static_cast<uint64_t>(flag_seed);
    if (const char* env = std::getenv("CTRLORA_SEED")) return std::strtoull(env, nullptr, 10);
    return 0;
}

std::vector<ConditionKind> parse_kinds(const std::string& csv) {
    std::vector<ConditionKind> kinds;
    size_t pos = 0;
    while (pos < csv.size()) {
        size_t comma = csv.find(',', pos);
        if (comma == std::string::npos) comma = csv.size();
        kinds.push_back(condition_from_name(csv.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    if (kinds.empty()) throw ConfigError("no condition kinds given");
    return kinds;
}

// Every run directory records its fully resolved configuration.
void write_run_config(const fs::path& dir, const std::string& command, const json& resolved) {
    fs::create_directories(dir);
    json j{{"command", command}, {"resolved", resolved}};
    std::ofstream f(dir / "config.json", std::ios::trunc);
    f << j.dump(2) << "\n";
}

CondParams load_params(const fs::path& data_root) {
    const fs::path p = data_root / "params.json";
    std::ifstream f(p);
    if (!f) throw DataError("missing dataset params file: " + p.string());
    return CondParams::from_json(json::parse(std::string((std::istreambuf_iterator<char>(f)),
                                                         std::istreambuf_iterator<char>())));
}

struct LoadedData {
    std::vector<Image> images;
    std::vector<Image> conds;
    std::vector<int> labels;
};

LoadedData read_split(const ConditionDataset& ds) {
    LoadedData out;
    for (const auto& r : ds.records) {
        out.images.push_back(read_png(ds.image_path(r)));
        out.conds.push_back(read_png(ds.cond_path(r)));
        out.labels.push_back(r.class_label);
    }
    return out;
}

Tensor condition_input(const Autoencoder& ae, EmbedMode mode, const Image& cond_img) {
    return mode == EmbedMode::conv_encoder ? image_to_tensor(cond_img)
                                           : ae.embed_condition(image_to_tensor(cond_img)).values;
}

// ---------------------------------------------------------------- subcommands

struct GenDataArgs {
    std::string out;
    int64_t n = 1000;
    int size = 32;
    std::string kinds = "edge,palette,pixelate,mask_inpaint";
    double val_frac = 0.1;
    int64_t seed = -1;
};

int cmd_gen_data(const GenDataArgs& a) {
    const uint64_t seed = resolve_seed(a.seed);
    ShapeGeometry geom;
    geom.width = geom.height = a.size;
    std::vector<int> labels;
    std::vector<Image> images = generate_images(a.n, seed, geom, &labels);
    CondParams params;
    build_dataset(images, labels, parse_kinds(a.kinds), seed, a.out, params, seed, a.val_frac);
    write_run_config(a.out, "gen-data",
                     json{{"out", a.out},
                          {"n", a.n},
                          {"size", a.size},
                          {"kinds", a.kinds},
                          {"val_frac", a.val_frac},
                          {"seed", seed},
                          {"params_digest", params.digest()}});
    std::cout << "dataset written to " << a.out << " (" << a.n << " images per kind)\n";
    return 0;
}

struct PretrainArgs {
    std::string data;
    std::string out;
    std::string kinds = "edge,palette,pixelate";
    int64_t ae_steps = 2200;
    int64_t unet_steps = 2500;
    int batch = 8;
    double lr = 1e-4;
    int64_t seed = -1;
    int T = 1000;
    double beta_start = 1e-4, beta_end = 0.02;
    double psnr_gate = 25.0;
};

int cmd_pretrain(const PretrainArgs& a) {
    const uint64_t seed = resolve_seed(a.seed);
    const CondParams params = load_params(a.data);
    const std::vector<ConditionKind> kinds = parse_kinds(a.kinds);

    // The autoencoder doubles as the condition embedding network, so its
    // pretraining mix includes the condition renders of every kind.
    std::vector<Image> ae_train, ae_val;
    std::vector<Image> unet_train_imgs, unet_val_imgs;
    std::vector<int> unet_train_labels, unet_val_labels;
    for (size_t i = 0; i < kinds.size(); ++i) {
        ConditionDataset train = load_dataset(a.data, kinds[i], "train", params);
        ConditionDataset val = load_dataset(a.data, kinds[i], "val", params);
        LoadedData tr = read_split(train), va = read_split(val);
        if (i == 0) {
            unet_train_imgs = tr.images;
            unet_train_labels = tr.labels;
            unet_val_imgs = va.images;
            unet_val_labels = va.labels;
            ae_train = tr.images;
            ae_val = va.images;
        }
        ae_train.insert(ae_train.end(), tr.conds.begin(), tr.conds.end());
        ae_val.insert(ae_val.end(), va.conds.begin(), va.conds.end());
    }

    NoiseSchedule sched = make_linear_schedule(a.T, a.beta_start, a.beta_end);
    AutoencoderConfig acfg;
    acfg.in_size = unet_train_imgs[0].w;
    Autoencoder ae(acfg, mix_seed({seed, fnv1a64("ae.init")}));

    TrainConfig ae_cfg;
    ae_cfg.total_steps = a.ae_steps;
    ae_cfg.batch_size = a.batch;
    ae_cfg.lr = a.lr;
    ae_cfg.seed = mix_seed({seed, fnv1a64("ae.train")});
    PretrainAeResult ae_res = pretrain_autoencoder(ae, ae_train, ae_val, ae_cfg, a.psnr_gate);
    std::cout << "autoencoder: val PSNR " << ae_res.val_psnr << " dB, latent_scale " << ae.latent_scale << "\n";

    UNetConfig ucfg;
    ucfg.latent_channels = acfg.latent_channels;
    ucfg.latent_size = acfg.in_size / acfg.downsample_factor;
    UNet unet(ucfg, mix_seed({seed, fnv1a64("unet.init")}));
    TrainConfig un_cfg;
    un_cfg.total_steps = a.unet_steps;
    un_cfg.batch_size = a.batch;
    un_cfg.lr = a.lr;
    un_cfg.seed = mix_seed({seed, fnv1a64("unet.train")});
    PretrainUnetResult un_res = pretrain_unet(unet, ae, unet_train_imgs, unet_train_labels, unet_val_imgs,
                                              unet_val_labels, sched, un_cfg);
    std::cout << "unet: val loss " << un_res.val_loss << " vs zero-predictor "
              << un_res.zero_predictor_baseline << "\n";

    Checkpoint ck;
    ck.sched = sched;
    ck.ae = std::make_unique<Autoencoder>(std::move(ae));
    ck.unet = std::make_unique<UNet>(std::move(unet));
    ck.stage = Stage::base;
    ck.step = 0;
    fs::create_directories(fs::path(a.out) / "checkpoints");
    save_checkpoint(ck, fs::path(a.out) / "checkpoints" / "pretrained.ckpt");
    write_run_config(a.out, "pretrain",
                     json{{"data", a.data},
                          {"out", a.out},
                          {"kinds", a.kinds},
                          {"ae_steps", a.ae_steps},
                          {"unet_steps", a.unet_steps},
                          {"batch", a.batch},
                          {"lr", a.lr},
                          {"seed", seed},
                          {"T", a.T},
                          {"beta_start", a.beta_start},
                          {"beta_end", a.beta_end},
                          {"psnr_gate", a.psnr_gate},
                          {"val_psnr", ae_res.val_psnr},
                          {"unet_val_loss", un_res.val_loss}});
    std::cout << "pretrained checkpoint: " << (fs::path(a.out) / "checkpoints" / "pretrained.ckpt").string()
              << "\n";
    return 0;
}

struct TrainBaseArgs {
    std::string data;
    std::string pretrained;
    std::string out;
    std::string kinds = "edge,palette,pixelate";
    std::string embed_mode = "vae_latent";
    int64_t steps = 8000;
    int batch = 8;
    double lr = 1e-4;
    int rank = 16;
    double alpha = -1;
    int64_t seed = -1;
};

int cmd_train_base(const TrainBaseArgs& a) {
    const uint64_t seed = resolve_seed(a.seed);
    const CondParams params = load_params(a.data);
    Checkpoint pre = load_checkpoint(a.pretrained);
    if (!pre.ae || !pre.unet) throw CompatibilityError("pretrained checkpoint must contain autoencoder + unet");

    const std::vector<ConditionKind> kinds = parse_kinds(a.kinds);
    std::vector<ConditionDataset> subsets;
    for (ConditionKind k : kinds) subsets.push_back(load_dataset(a.data, k, "train", params));

    auto cn = init_base_controlnet(*pre.unet, embed_mode_from_name(a.embed_mode),
                                   mix_seed({seed, fnv1a64("cn.init")}));
    std::vector<LoraAdapter> adapters;
    for (ConditionKind k : kinds)
        adapters.push_back(attach_lora(*cn, a.rank, a.alpha, condition_name(k),
                                       mix_seed({seed, fnv1a64("lora"), fnv1a64(condition_name(k))})));

    TrainConfig cfg;
    cfg.stage = Stage::base;
    cfg.total_steps = a.steps;
    cfg.batch_size = a.batch;
    cfg.lr = a.lr;
    cfg.lora_rank = a.rank;
    cfg.lora_alpha = a.alpha;
    cfg.seed = mix_seed({seed, fnv1a64("train.base")});

    std::map<std::string, Tensor> optim_out;
    TrainResult res = train_base(*cn, adapters, *pre.unet, *pre.ae, subsets, pre.sched, cfg, params,
                                 fs::path(a.out) / "logs", nullptr, &optim_out);

    Checkpoint ck;
    ck.sched = pre.sched;
    ck.ae = std::move(pre.ae);
    ck.unet = std::move(pre.unet);
    ck.cn = std::move(cn);
    ck.adapters = std::move(adapters);
    ck.optim = std::move(optim_out);
    ck.stage = Stage::base;
    ck.step = a.steps;
    fs::create_directories(fs::path(a.out) / "checkpoints");
    save_checkpoint(ck, fs::path(a.out) / "checkpoints" / "base.ckpt");
    for (const auto& ad : ck.adapters)
        save_adapter(ad, fs::path(a.out) / "checkpoints" / (ad.condition_kind + ".adapter"));

    write_run_config(a.out, "train-base",
                     json{{"data", a.data},
                          {"pretrained", a.pretrained},
                          {"out", a.out},
                          {"kinds", a.kinds},
                          {"embed_mode", a.embed_mode},
                          {"steps", a.steps},
                          {"batch", a.batch},
                          {"lr", a.lr},
                          {"rank", a.rank},
                          {"alpha", a.alpha},
                          {"seed", seed}});
    const double final_loss = res.steps.empty() ? 0.0 : res.steps.back().loss;
    std::cout << "base controlnet trained (" << a.steps << " steps, final loss " << final_loss << ") -> "
              << (fs::path(a.out) / "checkpoints" / "base.ckpt").string() << "\n";
    return 0;
}

struct TrainLoraArgs {
    std::string data;
    std::string base;
    std::string out;
    std::string kind = "mask_inpaint";
    int64_t steps = 3000;
    int batch = 8;
    double lr = 1e-4;
    int rank = 16;
    double alpha = -1;
    int64_t eval_every = 250;
    int eval_images = 16;
    int eval_steps = 20;
    bool stop_at_gate = false;
    int64_t seed = -1;
};

int cmd_train_lora(const TrainLoraArgs& a) {
    const uint64_t seed = resolve_seed(a.seed);
    const CondParams params = load_params(a.data);
    Checkpoint base = load_checkpoint(a.base);
    if (!base.ae || !base.unet || !base.cn)
        throw CompatibilityError("base checkpoint must contain autoencoder + unet + controlnet");

    const ConditionKind kind = condition_from_name(a.kind);
    ConditionDataset train = load_dataset(a.data, kind, "train", params);
    ConditionDataset val = load_dataset(a.data, kind, "val", params);

    LoraAdapter adapter =
        attach_lora(*base.cn, a.rank, a.alpha, a.kind, mix_seed({seed, fnv1a64("lora.new")}));

    TrainConfig cfg;
    cfg.stage = Stage::adapt;
    cfg.total_steps = a.steps;
    cfg.batch_size = a.batch;
    cfg.lr = a.lr;
    cfg.lora_rank = a.rank;
    cfg.lora_alpha = a.alpha;
    cfg.seed = mix_seed({seed, fnv1a64("train.lora")});
    cfg.eval_every = a.eval_every;
    cfg.eval_images = a.eval_images;
    cfg.eval_ddim_steps = a.eval_steps;
    cfg.stop_at_gate = a.stop_at_gate;

    TrainResult res = train_new_lora(*base.cn, adapter, *base.unet, *base.ae, train, &val, base.sched, cfg,
                                     params, fs::path(a.out) / "logs");

    fs::create_directories(fs::path(a.out) / "checkpoints");
    const fs::path adapter_path = fs::path(a.out) / "checkpoints" / (a.kind + ".adapter");
    save_adapter(adapter, adapter_path);
    write_run_config(a.out, "train-lora",
                     json{{"data", a.data},
                          {"base", a.base},
                          {"out", a.out},
                          {"kind", a.kind},
                          {"steps", a.steps},
                          {"batch", a.batch},
                          {"lr", a.lr},
                          {"rank", a.rank},
                          {"alpha", a.alpha},
                          {"eval_every", a.eval_every},
                          {"eval_images", a.eval_images},
                          {"eval_steps", a.eval_steps},
                          {"stop_at_gate", a.stop_at_gate},
                          {"seed", seed}});
    std::cout << "adapter written to " << adapter_path.string();
    if (res.steps_to_gate) std::cout << " (fidelity gate reached at step " << *res.steps_to_gate << ")";
    std::cout << "\n";
    return 0;
}

struct TrainFullArgs {
    std::string data;
    std::string pretrained;  // pretrained (scratch) or stage-1 (init-from-base) checkpoint
    std::string out;
    std::string kind = "mask_inpaint";
    std::string embed_mode = "vae_latent";
    bool init_from_base = false;
    int64_t steps = 3000;
    int batch = 8;
    double lr = 1e-4;
    int64_t eval_every = 250;
    int eval_images = 16;
    int eval_steps = 20;
    bool stop_at_gate = false;
    int64_t seed = -1;
};

// Ablation/baseline mode: full-parameter single-condition ControlNet
// training, optionally initialized from a trained base checkpoint, with
// either condition embedding network.
int cmd_train_full(const TrainFullArgs& a) {
    const uint64_t seed = resolve_seed(a.seed);
    const CondParams params = load_params(a.data);
    Checkpoint pre = load_checkpoint(a.pretrained);
    if (!pre.ae || !pre.unet) throw CompatibilityError("checkpoint must contain autoencoder + unet");

    const ConditionKind kind = condition_from_name(a.kind);
    ConditionDataset train = load_dataset(a.data, kind, "train", params);
    ConditionDataset val = load_dataset(a.data, kind, "val", params);

    std::unique_ptr<BaseControlNet> cn;
    if (a.init_from_base) {
        if (!pre.cn) throw CompatibilityError("--init-from-base needs a checkpoint with a controlnet");
        if (embed_mode_from_name(a.embed_mode) != pre.cn->embed_mode)
            throw CompatibilityError("--embed-mode must match the base checkpoint in --init-from-base mode");
        cn = std::move(pre.cn);
    } else {
        cn = init_base_controlnet(*pre.unet, embed_mode_from_name(a.embed_mode),
                                  mix_seed({seed, fnv1a64("cn.init")}));
    }

    TrainConfig cfg;
    cfg.stage = Stage::full;
    cfg.total_steps = a.steps;
    cfg.batch_size = a.batch;
    cfg.lr = a.lr;
    cfg.seed = mix_seed({seed, fnv1a64("train.full")});
    cfg.eval_every = a.eval_every;
    cfg.eval_images = a.eval_images;
    cfg.eval_ddim_steps = a.eval_steps;
    cfg.stop_at_gate = a.stop_at_gate;

    TrainResult res = train_full_controlnet(*cn, *pre.unet, *pre.ae, train, &val, pre.sched, cfg, params,
                                            fs::path(a.out) / "logs");

    Checkpoint ck;
    ck.sched = pre.sched;
    ck.ae = std::move(pre.ae);
    ck.unet = std::move(pre.unet);
    ck.cn = std::move(cn);
    ck.stage = Stage::full;
    ck.step = a.steps;
    fs::create_directories(fs::path(a.out) / "checkpoints");
    save_checkpoint(ck, fs::path(a.out) / "checkpoints" / "full.ckpt");
    write_run_config(a.out, "train-full",
                     json{{"data", a.data},
                          {"pretrained", a.pretrained},
                          {"out", a.out},
                          {"kind", a.kind},
                          {"embed_mode", a.embed_mode},
                          {"init_from_base", a.init_from_base},
                          {"steps", a.steps},
                          {"batch", a.batch},
                          {"lr", a.lr},
                          {"eval_every", a.eval_every},
                          {"seed", seed}});
    std::cout << "full controlnet run complete";
    if (res.steps_to_gate) std::cout << " (fidelity gate reached at step " << *res.steps_to_gate << ")";
    std::cout << " -> " << (fs::path(a.out) / "checkpoints" / "full.ckpt").string() << "\n";
    return 0;
}

struct SampleArgs {
    std::string ckpt;
    std::string adapter;       // adapter file
    std::string adapter_kind;  // or an adapter embedded in the checkpoint
    std::string data;
    std::string kind;
    std::string split = "val";
    int count = 16;
    int cols = 4;
    int steps = 50;
    double guidance = 7.5;
    double strength = 1.0;
    bool uncond = false;
    int64_t seed = -1;
    std::string out = "samples.png";
};

int cmd_sample(const SampleArgs& a) {
    const uint64_t seed = resolve_seed(a.seed);
    Checkpoint ck = load_checkpoint(a.ckpt);
    if (!ck.ae || !ck.unet) throw CompatibilityError("checkpoint must contain autoencoder + unet");

    LoraAdapter loaded;
    const LoraAdapter* adapter = nullptr;
    if (!a.adapter.empty()) {
        if (!ck.cn) throw CompatibilityError("adapter given but checkpoint has no controlnet");
        loaded = load_adapter(a.adapter, *ck.cn);
        adapter = &loaded;
    } else if (!a.adapter_kind.empty()) {
        for (const auto& ad : ck.adapters)
            if (ad.condition_kind == a.adapter_kind) adapter = &ad;
        if (!adapter) throw CompatibilityError("checkpoint has no adapter for kind " + a.adapter_kind);
    }

    const std::string kind_name = !a.kind.empty()      ? a.kind
                                  : adapter != nullptr ? adapter->condition_kind
                                                       : std::string("edge");
    const bool use_control = !a.uncond && ck.cn != nullptr;

    SampleSpec spec;
    spec.unet = ck.unet.get();
    spec.ae = ck.ae.get();
    spec.cn = use_control ? ck.cn.get() : nullptr;
    spec.adapter = use_control ? adapter : nullptr;
    spec.use_overrides = true;
    spec.strength = a.strength;
    spec.guidance = a.guidance;
    spec.ddim_steps = a.steps;

    std::vector<Image> tiles;
    if (use_control) {
        if (a.data.empty()) throw ConfigError("--data is required for conditional sampling");
        const CondParams params = load_params(a.data);
        ConditionDataset ds = load_dataset(a.data, condition_from_name(kind_name), a.split, params);
        for (int i = 0; i < a.count; ++i) {
            const auto& r = ds.records[static_cast<size_t>(i) % ds.records.size()];
            const Image cond_img = read_png(ds.cond_path(r));
            const Tensor cond = condition_input(*ck.ae, ck.cn->embed_mode, cond_img);
            spec.seed = mix_seed({seed, fnv1a64("sample"), static_cast<uint64_t>(i)});
            tiles.push_back(cond_img);
            tiles.push_back(sample_image(spec, ck.sched, cond, r.class_label));
        }
    } else {
        for (int i = 0; i < a.count; ++i) {
            spec.seed = mix_seed({seed, fnv1a64("sample"), static_cast<uint64_t>(i)});
            tiles.push_back(sample_image(spec, ck.sched, Tensor{}, i % ck.unet->cfg.num_classes));
        }
    }
    const fs::path out(a.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_png(out, make_grid(tiles, use_control ? 2 * a.cols : a.cols));
    std::cout << "grid written to " << out.string() << "\n";
    return 0;
}

struct ComposeArgs {
    std::string ckpt;
    std::vector<std::string> adapters;
    std::vector<double> weights;
    std::string data;
    std::string split = "val";
    int count = 8;
    int steps = 50;
    double guidance = 7.5;
    double strength = 1.0;
    int64_t seed = -1;
    std::string out = "compose.png";
};

int cmd_compose(const ComposeArgs& a) {
    const uint64_t seed = resolve_seed(a.seed);
    Checkpoint ck = load_checkpoint(a.ckpt);
    if (!ck.ae || !ck.unet || !ck.cn)
        throw CompatibilityError("checkpoint must contain autoencoder + unet + controlnet");
    if (a.adapters.empty()) throw ConfigError("compose needs at least one --adapter");
    std::vector<double> weights = a.weights;
    if (weights.empty()) weights.assign(a.adapters.size(), 1.0);
    if (weights.size() != a.adapters.size()) throw ConfigError("one --weight per --adapter required");

    std::vector<LoraAdapter> loaded;
    for (const auto& path : a.adapters) loaded.push_back(load_adapter(path, *ck.cn));
    const CondParams params = load_params(a.data);
    std::vector<ConditionDataset> sets;
    for (const auto& ad : loaded)
        sets.push_back(load_dataset(a.data, condition_from_name(ad.condition_kind), a.split, params));

    const auto& ucfg = ck.unet->cfg;
    std::vector<Image> tiles;
    for (int i = 0; i < a.count; ++i) {
        std::vector<Tensor> conds;
        int label = 0;
        for (size_t k = 0; k < loaded.size(); ++k) {
            const auto& r = sets[k].records[static_cast<size_t>(i) % sets[k].records.size()];
            const Image cond_img = read_png(sets[k].cond_path(r));
            Tensor c = condition_input(*ck.ae, ck.cn->embed_mode, cond_img);
            c.shape = {1, c.dim(0), c.dim(1), c.dim(2)};
            conds.push_back(std::move(c));
            label = r.class_label;
            tiles.push_back(cond_img);
        }

        std::vector<const LoraAdapter*> ads;
        for (const auto& ad : loaded) ads.push_back(&ad);
        GuidedPredictFn predict = [&](const Tensor& x, int t, bool conditional) {
            NoGradGuard ng;
            const std::vector<int> ts{t};
            const std::vector<int> labels{conditional ? label : ucfg.null_class()};
            std::vector<Tensor> residuals = compose_controls(*ck.cn, ads, weights, x, ts, labels, conds);
            std::vector<Var> rv;
            for (auto& r : residuals) {
                for (auto& v : r.data) v *= a.strength;
                rv.push_back(make_constant(r));
            }
            return ck.unet->predict(x, ts, labels, &rv)->value;
        };
        DdimConfig dc;
        dc.steps = a.steps;
        dc.guidance = a.guidance;
        dc.seed = mix_seed({seed, fnv1a64("compose"), static_cast<uint64_t>(i)});
        Tensor lat = ddim_sample(predict, ck.sched, dc,
                                 {1, ucfg.latent_channels, ucfg.latent_size, ucfg.latent_size});
        lat.shape = {lat.dim(1), lat.dim(2), lat.dim(3)};
        tiles.push_back(tensor_to_image(ck.ae->decode(lat)));
    }
    const fs::path out(a.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_png(out, make_grid(tiles, static_cast<int>(loaded.size()) + 1));
    std::cout << "composed grid written to " << out.string() << "\n";
    return 0;
}

struct EvalArgs {
    std::string ckpt;
    std::string adapter;
    std::string adapter_kind;
    std::string data;
    std::string kind;
    int count = 32;
    int steps = 20;
    double guidance = 1.0;
    double strength = 1.0;
    bool uncond = false;
    int64_t seed = -1;
    std::string out;
};

int cmd_eval(const EvalArgs& a) {
    const uint64_t seed = resolve_seed(a.seed);
    Checkpoint ck = load_checkpoint(a.ckpt);
    if (!ck.ae || !ck.unet) throw CompatibilityError("checkpoint must contain autoencoder + unet");
    const CondParams params = load_params(a.data);
    const ConditionKind kind = condition_from_name(a.kind);
    ConditionDataset val = load_dataset(a.data, kind, "val", params);

    LoraAdapter loaded;
    const LoraAdapter* adapter = nullptr;
    if (!a.adapter.empty()) {
        if (!ck.cn) throw CompatibilityError("adapter given but checkpoint has no controlnet");
        loaded = load_adapter(a.adapter, *ck.cn);
        adapter = &loaded;
    } else if (!a.adapter_kind.empty()) {
        for (const auto& ad : ck.adapters)
            if (ad.condition_kind == a.adapter_kind) adapter = &ad;
        if (!adapter) throw CompatibilityError("checkpoint has no adapter for kind " + a.adapter_kind);
    }

    SampleSpec spec;
    spec.unet = ck.unet.get();
    spec.ae = ck.ae.get();
    spec.cn = a.uncond ? nullptr : ck.cn.get();
    spec.adapter = a.uncond ? nullptr : adapter;
    spec.use_overrides = true;
    spec.strength = a.strength;
    spec.guidance = a.guidance;
    spec.ddim_steps = a.steps;
    spec.seed = mix_seed({seed, fnv1a64("cmd.eval")});

    const FidelityScore score = evaluate_fidelity(spec, ck.sched, val, params, a.count);
    json report{{"checkpoint", a.ckpt},
                {"kind", condition_name(kind)},
                {"metric", fidelity_metric_name(score.metric)},
                {"aggregate", score.aggregate},
                {"per_image", score.per_image},
                {"gate", fidelity_gate(kind, params)},
                {"meets_gate", score.meets_gate(params)},
                {"regime", nullptr}};
    const std::string text = report.dump(2) + "\n";
    if (!a.out.empty()) {
        if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
        std::ofstream f(a.out, std::ios::trunc);
        f << text;
    }
    std::cout << text;
    return 0;
}

struct ReportArgs {
    std::string eval_log;
    std::string data;
    std::string kind;
    std::string out;
};

int cmd_report(const ReportArgs& a) {
    const CondParams params = a.data.empty() ? CondParams{} : load_params(a.data);
    const ConditionKind kind = condition_from_name(a.kind);
    std::vector<EvalPoint> evals = read_eval_log(a.eval_log);
    std::vector<ConvergencePoint> points;
    for (const auto& e : evals) points.push_back({e.step, e.fidelity});
    const FidelityMetric metric = fidelity_metric_for(kind);
    const bool higher = metric != FidelityMetric::cycle_mse;
    const ConvergenceSeries series = analyze_convergence(points, fidelity_gate(kind, params), higher);

    json report{{"kind", condition_name(kind)},
                {"metric", fidelity_metric_name(metric)},
                {"threshold", series.threshold},
                {"steps_to_threshold",
                 series.steps_to_threshold ? json(*series.steps_to_threshold) : json(nullptr)},
                {"regime", regime_name(series.regime)},
                {"points", evals.size()}};
    std::cout << report.dump(2) << "\n";

    if (!a.out.empty()) {
        ChartSeries cs;
        for (const auto& p : points) {
            cs.x.push_back(static_cast<double>(p.step));
            cs.y.push_back(p.fidelity);
        }
        if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
        write_png(a.out, render_line_chart({cs}, series.threshold, true, condition_name(kind)));
        std::ofstream f(fs::path(a.out).replace_extension(".json"), std::ios::trunc);
        f << report.dump(2) << "\n";
    }
    return 0;
}

struct CountParamsArgs {
    std::string arch = "sd15-encoder";
    int rank = 128;
    int n_conditions = 9;
    bool as_json = false;
};

int cmd_count_params(const CountParamsArgs& a) {
    ArchDescriptor desc;
    if (a.arch == "sd15-encoder") {
        desc = sd15_encoder_descriptor();
    } else if (a.arch == "toy") {
        UNet unet(UNetConfig{}, 0);
        desc = init_base_controlnet(unet, EmbedMode::vae_latent, 0)->describe();
    } else {
        throw ConfigError("unknown --arch (expected sd15-encoder or toy): " + a.arch);
    }
    const ParamCounts c = count_parameters(desc, a.rank);
    const double ratio = static_cast<double>(c.adapter_total) / static_cast<double>(c.base_total);
    if (a.as_json) {
        json j{{"arch", desc.name},
               {"rank", a.rank},
               {"base_total", c.base_total},
               {"adapter_total", c.adapter_total},
               {"trainable_adaptation_total", c.trainable_adaptation_total},
               {"lora_total", c.lora_total},
               {"override_total", c.override_total},
               {"adapter_base_ratio", ratio},
               {"n_conditions", a.n_conditions},
               {"per_condition_full_copies", c.base_total * a.n_conditions},
               {"shared_base_plus_adapters", c.base_total + c.adapter_total * a.n_conditions}};
        std::cout << j.dump(2) << "\n";
    } else {
        std::printf("architecture: %s (rank %d)\n", desc.name.c_str(), a.rank);
        std::printf("  base parameters          : %12lld\n", static_cast<long long>(c.base_total));
        std::printf("  adapter parameters       : %12lld\n", static_cast<long long>(c.adapter_total));
        std::printf("    low-rank pairs         : %12lld\n", static_cast<long long>(c.lora_total));
        std::printf("    norm + zero-conv copies: %12lld\n", static_cast<long long>(c.override_total));
        std::printf("  adapter / base ratio     : %.4f\n", ratio);
        std::printf("  cost for N=%d conditions : %lld (full copies) vs %lld (shared base + adapters)\n",
                    a.n_conditions, static_cast<long long>(c.base_total * a.n_conditions),
                    static_cast<long long>(c.base_total + c.adapter_total * a.n_conditions));
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ctrlora: shared Base ControlNet + per-condition LoRA adapters on a toy latent diffusion stack"};
    app.require_subcommand(1);
    app.set_config("--config", "", "configuration file (INI/TOML); flags take precedence");

    GenDataArgs gd;
    auto* c_gd = app.add_subcommand("gen-data", "generate the procedural image/condition dataset");
    c_gd->add_option("--out", gd.out, "dataset root directory")->required();
    c_gd->add_option("--n", gd.n, "images per kind")->capture_default_str();
    c_gd->add_option("--size", gd.size, "image side length")->capture_default_str();
    c_gd->add_option("--kinds", gd.kinds, "comma-separated condition kinds")->capture_default_str();
    c_gd->add_option("--val-frac", gd.val_frac, "validation fraction (floor rule)")->capture_default_str();
    c_gd->add_option("--seed", gd.seed, "seed (default: CTRLORA_SEED or 0)")->capture_default_str();

    PretrainArgs pt;
    auto* c_pt = app.add_subcommand("pretrain", "pretrain the autoencoder and the class-conditional denoiser");
    c_pt->add_option("--data", pt.data, "dataset root")->required();
    c_pt->add_option("--out", pt.out, "run directory")->required();
    c_pt->add_option("--kinds", pt.kinds, "kinds whose conditions join the autoencoder mix")
        ->capture_default_str();
    c_pt->add_option("--ae-steps", pt.ae_steps)->capture_default_str();
    c_pt->add_option("--unet-steps", pt.unet_steps)->capture_default_str();
    c_pt->add_option("--batch", pt.batch)->capture_default_str();
    c_pt->add_option("--lr", pt.lr)->capture_default_str();
    c_pt->add_option("--seed", pt.seed)->capture_default_str();
    c_pt->add_option("--T", pt.T, "diffusion steps")->capture_default_str();
    c_pt->add_option("--beta-start", pt.beta_start)->capture_default_str();
    c_pt->add_option("--beta-end", pt.beta_end)->capture_default_str();
    c_pt->add_option("--psnr-gate", pt.psnr_gate, "autoencoder reconstruction gate (dB)")
        ->capture_default_str();

    TrainBaseArgs tb;
    auto* c_tb = app.add_subcommand("train-base", "stage 1: multi-condition base controlnet training");
    c_tb->add_option("--data", tb.data)->required();
    c_tb->add_option("--pretrained", tb.pretrained, "pretrained checkpoint")->required();
    c_tb->add_option("--out", tb.out)->required();
    c_tb->add_option("--kinds", tb.kinds)->capture_default_str();
    c_tb->add_option("--embed-mode", tb.embed_mode, "vae_latent | conv_encoder")->capture_default_str();
    c_tb->add_option("--steps", tb.steps)->capture_default_str();
    c_tb->add_option("--batch", tb.batch)->capture_default_str();
    c_tb->add_option("--lr", tb.lr)->capture_default_str();
    c_tb->add_option("--rank", tb.rank)->capture_default_str();
    c_tb->add_option("--alpha", tb.alpha, "LoRA alpha (-1 = rank)")->capture_default_str();
    c_tb->add_option("--seed", tb.seed)->capture_default_str();

    TrainLoraArgs tl;
    auto* c_tl = app.add_subcommand("train-lora", "stage 2: adapt a new condition with one LoRA file");
    c_tl->add_option("--data", tl.data)->required();
    c_tl->add_option("--base", tl.base, "stage-1 checkpoint")->required();
    c_tl->add_option("--out", tl.out)->required();
    c_tl->add_option("--kind", tl.kind)->capture_default_str();
    c_tl->add_option("--steps", tl.steps)->capture_default_str();
    c_tl->add_option("--batch", tl.batch)->capture_default_str();
    c_tl->add_option("--lr", tl.lr)->capture_default_str();
    c_tl->add_option("--rank", tl.rank)->capture_default_str();
    c_tl->add_option("--alpha", tl.alpha)->capture_default_str();
    c_tl->add_option("--eval-every", tl.eval_every)->capture_default_str();
    c_tl->add_option("--eval-images", tl.eval_images)->capture_default_str();
    c_tl->add_option("--eval-steps", tl.eval_steps)->capture_default_str();
    c_tl->add_flag("--stop-at-gate", tl.stop_at_gate, "stop once the kind's fidelity gate is met");
    c_tl->add_option("--seed", tl.seed)->capture_default_str();

    TrainFullArgs tf;
    auto* c_tf =
        app.add_subcommand("train-full", "baseline/ablation: full-parameter single-condition controlnet");
    c_tf->add_option("--data", tf.data)->required();
    c_tf->add_option("--pretrained", tf.pretrained)->required();
    c_tf->add_option("--out", tf.out)->required();
    c_tf->add_option("--kind", tf.kind)->capture_default_str();
    c_tf->add_option("--embed-mode", tf.embed_mode)->capture_default_str();
    c_tf->add_flag("--init-from-base", tf.init_from_base, "start from the checkpoint's trained controlnet");
    c_tf->add_option("--steps", tf.steps)->capture_default_str();
    c_tf->add_option("--batch", tf.batch)->capture_default_str();
    c_tf->add_option("--lr", tf.lr)->capture_default_str();
    c_tf->add_option("--eval-every", tf.eval_every)->capture_default_str();
    c_tf->add_option("--eval-images", tf.eval_images)->capture_default_str();
    c_tf->add_option("--eval-steps", tf.eval_steps)->capture_default_str();
    c_tf->add_flag("--stop-at-gate", tf.stop_at_gate);
    c_tf->add_option("--seed", tf.seed)->capture_default_str();

    SampleArgs sa;
    auto* c_sa = app.add_subcommand("sample", "conditional DDIM sampling into an image grid");
    c_sa->add_option("--ckpt", sa.ckpt)->required();
    c_sa->add_option("--adapter", sa.adapter, "standalone adapter file");
    c_sa->add_option("--adapter-kind", sa.adapter_kind, "adapter stored inside the checkpoint");
    c_sa->add_option("--data", sa.data, "dataset root for condition images");
    c_sa->add_option("--kind", sa.kind, "condition kind (default: adapter's kind)");
    c_sa->add_option("--split", sa.split)->capture_default_str();
    c_sa->add_option("--count", sa.count)->capture_default_str();
    c_sa->add_option("--cols", sa.cols)->capture_default_str();
    c_sa->add_option("--steps", sa.steps)->capture_default_str();
    c_sa->add_option("--guidance", sa.guidance)->capture_default_str();
    c_sa->add_option("--strength", sa.strength)->capture_default_str();
    c_sa->add_flag("--uncond", sa.uncond, "ignore the control branch");
    c_sa->add_option("--seed", sa.seed)->capture_default_str();
    c_sa->add_option("--out", sa.out, "output PNG path")->capture_default_str();

    ComposeArgs co;
    auto* c_co = app.add_subcommand("compose", "multi-adapter composition sampling");
    c_co->add_option("--ckpt", co.ckpt)->required();
    c_co->add_option("--adapter", co.adapters, "adapter file (repeatable)")->required();
    c_co->add_option("--weight", co.weights, "per-adapter weight (default 1.0 each)");
    c_co->add_option("--data", co.data)->required();
    c_co->add_option("--split", co.split)->capture_default_str();
    c_co->add_option("--count", co.count)->capture_default_str();
    c_co->add_option("--steps", co.steps)->capture_default_str();
    c_co->add_option("--guidance", co.guidance)->capture_default_str();
    c_co->add_option("--strength", co.strength)->capture_default_str();
    c_co->add_option("--seed", co.seed)->capture_default_str();
    c_co->add_option("--out", co.out)->capture_default_str();

    EvalArgs ev;
    auto* c_ev = app.add_subcommand("eval", "fidelity evaluation on the val split");
    c_ev->add_option("--ckpt", ev.ckpt)->required();
    c_ev->add_option("--adapter", ev.adapter);
    c_ev->add_option("--adapter-kind", ev.adapter_kind);
    c_ev->add_option("--data", ev.data)->required();
    c_ev->add_option("--kind", ev.kind)->required();
    c_ev->add_option("--count", ev.count)->capture_default_str();
    c_ev->add_option("--steps", ev.steps)->capture_default_str();
    c_ev->add_option("--guidance", ev.guidance)->capture_default_str();
    c_ev->add_option("--strength", ev.strength)->capture_default_str();
    c_ev->add_flag("--uncond", ev.uncond, "evaluate unconditional samples");
    c_ev->add_option("--seed", ev.seed)->capture_default_str();
    c_ev->add_option("--out", ev.out, "report JSON path");

    ReportArgs rp;
    auto* c_rp = app.add_subcommand("report", "convergence analysis of a training eval log");
    c_rp->add_option("--eval-log", rp.eval_log)->required();
    c_rp->add_option("--data", rp.data, "dataset root (for thresholds; defaults otherwise)");
    c_rp->add_option("--kind", rp.kind)->required();
    c_rp->add_option("--out", rp.out, "plot PNG path (writes .json next to it)");

    CountParamsArgs cp;
    auto* c_cp = app.add_subcommand("count-params", "static parameter audit");
    c_cp->add_option("--arch", cp.arch, "sd15-encoder | toy")->capture_default_str();
    c_cp->add_option("--rank", cp.rank)->capture_default_str();
    c_cp->add_option("--n-conditions", cp.n_conditions)->capture_default_str();
    c_cp->add_flag("--json", cp.as_json, "machine-readable output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        std::cerr << "error category=config message=\"" << e.what() << "\"\n";
        return 2;
    }

    try {
        if (*c_gd) return cmd_gen_data(gd);
        if (*c_pt) return cmd_pretrain(pt);
        if (*c_tb) return cmd_train_base(tb);
        if (*c_tl) return cmd_train_lora(tl);
        if (*c_tf) return cmd_train_full(tf);
        if (*c_sa) return cmd_sample(sa);
        if (*c_co) return cmd_compose(co);
        if (*c_ev) return cmd_eval(ev);
        if (*c_rp) return cmd_report(rp);
        if (*c_cp) return cmd_count_params(cp);
    } catch (const DivergenceError& e) {
        std::cerr << "error category=divergence message=\"" << e.what() << "\"\n";
        return 4;
    } catch (const CompatibilityError& e) {
        std::cerr << "error category=compatibility message=\"" << e.what() << "\"\n";
        return 5;
    } catch (const DataError& e) {
        std::cerr << "error category=data message=\"" << e.what() << "\"\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "error category=config message=\"" << e.what() << "\"\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error category=internal message=\"" << e.what() << "\"\n";
        return 1;
    }
    return 0;
}
