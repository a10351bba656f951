#include "ctrlora/conditions.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "ctrlora/core/digest.hpp"
#include "ctrlora/core/errors.hpp"

namespace ctrlora {

using nlohmann::json;

ConditionRole condition_role(ConditionKind k) {
    switch (k) {
        case ConditionKind::edge:
        case ConditionKind::palette:
        case ConditionKind::pixelate:
            return ConditionRole::structural;
        default:
            return ConditionRole::restoration;
    }
}

std::string condition_name(ConditionKind k) {
    switch (k) {
        case ConditionKind::edge: return "edge";
        case ConditionKind::mask_inpaint: return "mask_inpaint";
        case ConditionKind::mask_outpaint: return "mask_outpaint";
        case ConditionKind::blur: return "blur";
        case ConditionKind::palette: return "palette";
        case ConditionKind::pixelate: return "pixelate";
        case ConditionKind::lowlight: return "lowlight";
    }
    throw ConfigError("unknown condition kind");
}

ConditionKind condition_from_name(const std::string& name) {
    for (ConditionKind k : all_condition_kinds())
        if (condition_name(k) == name) return k;
    throw ConfigError("unknown condition kind: " + name);
}

std::vector<ConditionKind> all_condition_kinds() {
    return {ConditionKind::edge,     ConditionKind::mask_inpaint, ConditionKind::mask_outpaint,
            ConditionKind::blur,     ConditionKind::palette,      ConditionKind::pixelate,
            ConditionKind::lowlight};
}

json CondParams::to_json() const {
    return json{{"version", version},
                {"edge_threshold", edge_threshold},
                {"blur_sigma", blur_sigma},
                {"palette_grid", palette_grid},
                {"pixelate_block", pixelate_block},
                {"lowlight_gamma", lowlight_gamma},
                {"inpaint_min_frac", inpaint_min_frac},
                {"inpaint_max_frac", inpaint_max_frac},
                {"outpaint_band_frac", outpaint_band_frac},
                {"edge_iou_min", edge_iou_min},
                {"palette_mse_max", palette_mse_max},
                {"pixelate_mse_max", pixelate_mse_max},
                {"restoration_psnr_min", restoration_psnr_min}};
}

CondParams CondParams::from_json(const json& j) {
    CondParams p;
    p.version = j.at("version").get<int>();
    p.edge_threshold = j.at("edge_threshold").get<double>();
    p.blur_sigma = j.at("blur_sigma").get<double>();
    p.palette_grid = j.at("palette_grid").get<int>();
    p.pixelate_block = j.at("pixelate_block").get<int>();
    p.lowlight_gamma = j.at("lowlight_gamma").get<double>();
    p.inpaint_min_frac = j.at("inpaint_min_frac").get<double>();
    p.inpaint_max_frac = j.at("inpaint_max_frac").get<double>();
    p.outpaint_band_frac = j.at("outpaint_band_frac").get<double>();
    p.edge_iou_min = j.at("edge_iou_min").get<double>();
    p.palette_mse_max = j.at("palette_mse_max").get<double>();
    p.pixelate_mse_max = j.at("pixelate_mse_max").get<double>();
    p.restoration_psnr_min = j.at("restoration_psnr_min").get<double>();
    return p;
}

std::string CondParams::digest() const { return sha256_hex(to_json().dump()); }

// ------------------------------------------------------------------ generator

namespace {

// Random color with an approximate 8-bit luma target; the bright/dark bands
// are far enough apart that clamping never erodes the contrast the edge
// extractor needs.
void sample_color(Rng& rng, double target_luma, uint8_t out[3]) {
    double r = rng.uniform(0.25, 1.0), g = rng.uniform(0.25, 1.0), b = rng.uniform(0.25, 1.0);
    const double y = 0.299 * r + 0.587 * g + 0.114 * b;
    const double s = target_luma / y;
    out[0] = static_cast<uint8_t>(std::lround(std::clamp(r * s, 0.0, 1.0) * 255.0));
    out[1] = static_cast<uint8_t>(std::lround(std::clamp(g * s, 0.0, 1.0) * 255.0));
    out[2] = static_cast<uint8_t>(std::lround(std::clamp(b * s, 0.0, 1.0) * 255.0));
}

bool inside_shape(int cls, double dx, double dy, double r) {
    switch (cls) {
        case 0:  // circle
            return dx * dx + dy * dy <= r * r;
        case 1:  // square
            return std::max(std::fabs(dx), std::fabs(dy)) <= r;
        case 2: {  // upward triangle
            if (dy < -r || dy > r) return false;
            const double t = (dy + r) / (2.0 * r);
            return std::fabs(dx) <= t * r;
        }
        default: {  // cross
            const double arm = r / 3.0;
            return (std::fabs(dx) <= arm && std::fabs(dy) <= r) || (std::fabs(dy) <= arm && std::fabs(dx) <= r);
        }
    }
}

}  // namespace

Image generate_image(uint64_t seed, int64_t index, const ShapeGeometry& geom, int* class_label) {
    Rng rng(mix_seed({seed, 0xDA7Aull, static_cast<uint64_t>(index)}));
    const int cls = static_cast<int>(rng.uniform_int(geom.num_classes));
    if (class_label) *class_label = cls;

    uint8_t bg[3], fg[3];
    const bool dark_bg = rng.uniform() < 0.5;
    sample_color(rng, dark_bg ? rng.uniform(0.10, 0.35) : rng.uniform(0.70, 0.95), bg);
    sample_color(rng, dark_bg ? rng.uniform(0.70, 0.95) : rng.uniform(0.10, 0.35), fg);

    const double cx = rng.uniform(0.30, 0.70) * geom.width;
    const double cy = rng.uniform(0.30, 0.70) * geom.height;
    const double r = rng.uniform(0.25, 0.42) * std::min(geom.width, geom.height) / 1.0;

    Image img(geom.width, geom.height);
    for (int y = 0; y < geom.height; ++y)
        for (int x = 0; x < geom.width; ++x) {
            const bool in = inside_shape(cls, x + 0.5 - cx, y + 0.5 - cy, r);
            const uint8_t* c = in ? fg : bg;
            uint8_t* p = img.px(x, y);
            p[0] = c[0];
            p[1] = c[1];
            p[2] = c[2];
        }
    return img;
}

std::vector<Image> generate_images(int64_t n, uint64_t seed, const ShapeGeometry& geom,
                                   std::vector<int>* class_labels) {
    if (n < 1) throw ConfigError("generate_images: n must be >= 1");
    std::vector<Image> out;
    out.reserve(static_cast<size_t>(n));
    if (class_labels) class_labels->resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        int cls = 0;
        out.push_back(generate_image(seed, i, geom, &cls));
        if (class_labels) (*class_labels)[static_cast<size_t>(i)] = cls;
    }
    return out;
}

// ----------------------------------------------------------------- extractors

namespace {

int gray_at(const Image& img, int x, int y) {
    x = std::clamp(x, 0, img.w - 1);
    y = std::clamp(y, 0, img.h - 1);
    const uint8_t* p = img.px(x, y);
    return (299 * p[0] + 587 * p[1] + 114 * p[2] + 500) / 1000;
}

Image extract_edge(const Image& img, const CondParams& params) {
    Image out(img.w, img.h);
    const double t2 = params.edge_threshold * params.edge_threshold;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const int gx = gray_at(img, x + 1, y) - gray_at(img, x - 1, y);
            const int gy = gray_at(img, x, y + 1) - gray_at(img, x, y - 1);
            const uint8_t v = (static_cast<double>(gx) * gx + static_cast<double>(gy) * gy >= t2) ? 255 : 0;
            uint8_t* p = out.px(x, y);
            p[0] = p[1] = p[2] = v;
        }
    return out;
}

Image extract_blur(const Image& img, const CondParams& params) {
    const double sigma = params.blur_sigma;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        ksum += kernel[static_cast<size_t>(i + radius)];
    }
    for (auto& k : kernel) k /= ksum;

    // separable, replicate borders
    std::vector<double> tmp(static_cast<size_t>(img.w) * img.h * 3);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[static_cast<size_t>(i + radius)] *
                           img.px(std::clamp(x + i, 0, img.w - 1), y)[c];
                tmp[3 * (static_cast<size_t>(y) * img.w + x) + static_cast<size_t>(c)] = acc;
            }
    Image out(img.w, img.h);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int yy = std::clamp(y + i, 0, img.h - 1);
                    acc += kernel[static_cast<size_t>(i + radius)] *
                           tmp[3 * (static_cast<size_t>(yy) * img.w + x) + static_cast<size_t>(c)];
                }
                out.px(x, y)[c] = static_cast<uint8_t>(std::lround(std::clamp(acc, 0.0, 255.0)));
            }
    return out;
}

Image block_average(const Image& img, int bx, int by) {
    Image out(img.w, img.h);
    for (int y0 = 0; y0 < img.h; y0 += by)
        for (int x0 = 0; x0 < img.w; x0 += bx) {
            const int x1 = std::min(img.w, x0 + bx), y1 = std::min(img.h, y0 + by);
            long sum[3] = {0, 0, 0};
            const long cnt = static_cast<long>(x1 - x0) * (y1 - y0);
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x)
                    for (int c = 0; c < 3; ++c) sum[c] += img.px(x, y)[c];
            uint8_t avg[3];
            for (int c = 0; c < 3; ++c) avg[c] = static_cast<uint8_t>((sum[c] + cnt / 2) / cnt);
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) {
                    uint8_t* p = out.px(x, y);
                    p[0] = avg[0];
                    p[1] = avg[1];
                    p[2] = avg[2];
                }
        }
    return out;
}

}  // namespace

std::array<int, 4> inpaint_rect(int width, int height, const CondParams& params, uint64_t record_seed) {
    Rng rng(mix_seed({record_seed, fnv1a64("inpaint.rect")}));
    const int w = std::max(1, static_cast<int>(std::lround(rng.uniform(params.inpaint_min_frac,
                                                                       params.inpaint_max_frac) * width)));
    const int h = std::max(1, static_cast<int>(std::lround(rng.uniform(params.inpaint_min_frac,
                                                                       params.inpaint_max_frac) * height)));
    const int x = static_cast<int>(rng.uniform_int(width - w + 1));
    const int y = static_cast<int>(rng.uniform_int(height - h + 1));
    return {x, y, w, h};
}

Image extract_condition(const Image& img, ConditionKind kind, const CondParams& params, uint64_t record_seed) {
    switch (kind) {
        case ConditionKind::edge:
            return extract_edge(img, params);
        case ConditionKind::blur:
            return extract_blur(img, params);
        case ConditionKind::palette: {
            const int bx = std::max(1, img.w / params.palette_grid);
            const int by = std::max(1, img.h / params.palette_grid);
            return block_average(img, bx, by);
        }
        case ConditionKind::pixelate:
            return block_average(img, params.pixelate_block, params.pixelate_block);
        case ConditionKind::lowlight: {
            uint8_t lut[256];
            for (int v = 0; v < 256; ++v)
                lut[v] = static_cast<uint8_t>(std::lround(255.0 * std::pow(v / 255.0, params.lowlight_gamma)));
            Image out = img;
            for (auto& v : out.rgb) v = lut[v];
            return out;
        }
        case ConditionKind::mask_inpaint: {
            Image out = img;
            const auto r = inpaint_rect(img.w, img.h, params, record_seed);
            for (int y = r[1]; y < r[1] + r[3]; ++y)
                for (int x = r[0]; x < r[0] + r[2]; ++x) {
                    uint8_t* p = out.px(x, y);
                    p[0] = p[1] = p[2] = 0;
                }
            return out;
        }
        case ConditionKind::mask_outpaint: {
            Image out = img;
            const int band = static_cast<int>(std::lround(params.outpaint_band_frac * std::min(img.w, img.h)));
            for (int y = 0; y < img.h; ++y)
                for (int x = 0; x < img.w; ++x)
                    if (x < band || y < band || x >= img.w - band || y >= img.h - band) {
                        uint8_t* p = out.px(x, y);
                        p[0] = p[1] = p[2] = 0;
                    }
            return out;
        }
    }
    throw ConfigError("extract_condition: unknown kind");
}

// -------------------------------------------------------------------- dataset

namespace {

std::string rel_path(ConditionKind kind, const std::string& split, const char* stem, int64_t i) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s/%s/%s_%06lld.png", condition_name(kind).c_str(), split.c_str(), stem,
                  static_cast<long long>(i));
    return buf;
}

json record_to_json(const DatasetRecord& r, ConditionKind kind, int w, int h, const CondParams& params) {
    json j{{"index", r.index},
           {"image", r.image_rel},
           {"cond", r.cond_rel},
           {"class_label", r.class_label},
           {"record_seed", r.record_seed}};
    if (kind == ConditionKind::mask_inpaint) {
        const auto rect = inpaint_rect(w, h, params, r.record_seed);
        j["mask_rect"] = rect;
    }
    return j;
}

DatasetRecord record_from_json(const json& j) {
    DatasetRecord r;
    r.index = j.at("index").get<int64_t>();
    r.image_rel = j.at("image").get<std::string>();
    r.cond_rel = j.at("cond").get<std::string>();
    r.class_label = j.at("class_label").get<int>();
    r.record_seed = j.at("record_seed").get<uint64_t>();
    return r;
}

}  // namespace

std::vector<KindDataset> build_dataset(const std::vector<Image>& images, const std::vector<int>& class_labels,
                                       const std::vector<ConditionKind>& kinds, uint64_t split_seed,
                                       const std::filesystem::path& root, const CondParams& params,
                                       uint64_t dataset_seed, double val_frac) {
    if (images.empty() || images.size() != class_labels.size())
        throw ConfigError("build_dataset: images/labels mismatch");
    const int64_t n = static_cast<int64_t>(images.size());

    // Shared permutation across kinds keeps records aligned by source image.
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Rng rng(mix_seed({split_seed, fnv1a64("split")}));
    for (int64_t i = n - 1; i > 0; --i)
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.uniform_int(i + 1))]);
    const int64_t n_val = static_cast<int64_t>(std::floor(static_cast<double>(n) * val_frac));

    std::filesystem::create_directories(root);
    {
        std::ofstream pf(root / "params.json", std::ios::trunc);
        pf << params.to_json().dump(2) << "\n";
    }

    std::vector<KindDataset> out;
    for (ConditionKind kind : kinds) {
        KindDataset kd;
        json index{{"version", 1}, {"kind", condition_name(kind)}, {"params_digest", params.digest()}};
        for (const std::string split : {"train", "val"}) {
            const bool is_val = split == "val";
            std::filesystem::create_directories(root / condition_name(kind) / split);
            ConditionDataset ds;
            ds.kind = kind;
            ds.split = split;
            ds.root = root;
            json recs = json::array();
            const int64_t lo = is_val ? 0 : n_val;
            const int64_t hi = is_val ? n_val : n;
            for (int64_t pos = lo; pos < hi; ++pos) {
                const int64_t src = order[static_cast<size_t>(pos)];
                const int64_t local = pos - lo;
                DatasetRecord r;
                r.index = local;
                r.image_rel = rel_path(kind, split, "img", local);
                r.cond_rel = rel_path(kind, split, "cond", local);
                r.class_label = class_labels[static_cast<size_t>(src)];
                r.record_seed = mix_seed({dataset_seed, fnv1a64(condition_name(kind)), fnv1a64(split),
                                          static_cast<uint64_t>(src)});
                const Image& img = images[static_cast<size_t>(src)];
                write_png(root / r.image_rel, img);
                write_png(root / r.cond_rel, extract_condition(img, kind, params, r.record_seed));
                recs.push_back(record_to_json(r, kind, img.w, img.h, params));
                ds.records.push_back(r);
            }
            index[split] = std::move(recs);
            ds.params_digest = params.digest();
            if (is_val)
                kd.val = std::move(ds);
            else
                kd.train = std::move(ds);
        }
        const std::string index_str = index.dump(2) + "\n";
        {
            std::ofstream f(root / condition_name(kind) / "index.json", std::ios::trunc);
            f << index_str;
        }
        kd.train.index_digest = kd.val.index_digest = sha256_hex(index_str);
        out.push_back(std::move(kd));
    }
    return out;
}

ConditionDataset load_dataset(const std::filesystem::path& root, ConditionKind kind, const std::string& split,
                              const CondParams& params, int audit_samples) {
    const auto index_path = root / condition_name(kind) / "index.json";
    std::ifstream f(index_path);
    if (!f) throw DataError("cannot open dataset index: " + index_path.string());
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    json index;
    try {
        index = json::parse(text);
    } catch (const json::exception& e) {
        throw DataError("bad dataset index " + index_path.string() + ": " + e.what());
    }
    if (index.at("params_digest").get<std::string>() != params.digest())
        throw CompatibilityError("dataset was built with different extractor params: " + index_path.string());

    ConditionDataset ds;
    ds.kind = kind;
    ds.split = split;
    ds.root = root;
    ds.params_digest = params.digest();
    ds.index_digest = sha256_hex(text);
    if (!index.contains(split)) throw DataError("dataset index has no split '" + split + "'");
    for (const auto& j : index.at(split)) ds.records.push_back(record_from_json(j));

    // Sampled regenerability audit: stored condition must equal a fresh
    // extraction from the stored image, byte for byte.
    if (audit_samples > 0 && !ds.records.empty()) {
        Rng rng(mix_seed({fnv1a64(ds.index_digest), fnv1a64("audit")}));
        const int n_check = std::min<int>(audit_samples, static_cast<int>(ds.records.size()));
        for (int i = 0; i < n_check; ++i) {
            const auto& r = ds.records[static_cast<size_t>(rng.uniform_int(
                static_cast<int64_t>(ds.records.size())))];
            const Image img = read_png(ds.image_path(r));
            const Image stored = read_png(ds.cond_path(r));
            const Image fresh = extract_condition(img, kind, params, r.record_seed);
            if (stored.rgb != fresh.rgb)
                throw DataError("condition file not regenerable from image: " + r.cond_rel);
        }
    }
    return ds;
}

// ---------------------------------------------------------------- round robin

RoundRobinSampler::RoundRobinSampler(std::vector<int64_t> subset_sizes, int batch_size, uint64_t seed)
    : sizes_(std::move(subset_sizes)), batch_(batch_size), seed_(seed) {
    if (sizes_.empty() || batch_ < 1) throw ConfigError("round robin: need K >= 1 subsets and batch >= 1");
    for (int64_t s : sizes_)
        if (s < 1) throw DataError("round robin: empty subset");
    cache_.assign(sizes_.size(), {-1, {}});
}

const std::vector<int64_t>& RoundRobinSampler::perm(int kind, int64_t epoch) const {
    auto& slot = cache_[static_cast<size_t>(kind)];
    if (slot.first != epoch) {
        const int64_t n = sizes_[static_cast<size_t>(kind)];
        std::vector<int64_t> p(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
        Rng rng(mix_seed({seed_, fnv1a64("epoch"), static_cast<uint64_t>(kind), static_cast<uint64_t>(epoch)}));
        for (int64_t i = n - 1; i > 0; --i)
            std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(rng.uniform_int(i + 1))]);
        slot = {epoch, std::move(p)};
    }
    return slot.second;
}

RoundRobinSampler::Batch RoundRobinSampler::at(int64_t step) const {
    const int k = static_cast<int>(step % static_cast<int64_t>(sizes_.size()));
    const int64_t kind_step = step / static_cast<int64_t>(sizes_.size());
    const int64_t n = sizes_[static_cast<size_t>(k)];
    Batch b;
    b.kind = k;
    b.records.resize(static_cast<size_t>(batch_));
    for (int i = 0; i < batch_; ++i) {
        const int64_t pos = kind_step * batch_ + i;
        b.records[static_cast<size_t>(i)] = perm(k, pos / n)[static_cast<size_t>(pos % n)];
    }
    return b;
}

}  // namespace ctrlora
