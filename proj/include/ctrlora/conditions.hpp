#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrlora/core/image.hpp"
#include "ctrlora/core/rng.hpp"

namespace ctrlora {

enum class ConditionKind { edge, mask_inpaint, mask_outpaint, blur, palette, pixelate, lowlight };

enum class ConditionRole { structural, restoration };

ConditionRole condition_role(ConditionKind k);
std::string condition_name(ConditionKind k);
ConditionKind condition_from_name(const std::string& name);
std::vector<ConditionKind> all_condition_kinds();

// Extractor parameters and evaluation thresholds. Versioned and digested so
// condition files are reproducible artifacts.
struct CondParams {
    int version = 1;
    double edge_threshold = 40.0;    // gradient magnitude, gray levels
    double blur_sigma = 1.5;
    int palette_grid = 4;            // global grid (image split into grid x grid blocks)
    int pixelate_block = 4;          // fixed block size in pixels
    double lowlight_gamma = 3.0;
    double inpaint_min_frac = 0.30;  // masked rectangle extent, fraction of each dim
    double inpaint_max_frac = 0.55;
    double outpaint_band_frac = 0.25;

    // Convergence / fidelity gates per kind.
    double edge_iou_min = 0.5;
    double palette_mse_max = 0.02;
    double pixelate_mse_max = 0.02;
    double restoration_psnr_min = 15.0;  // dB, gt comparison for mask/blur/lowlight kinds

    nlohmann::json to_json() const;
    static CondParams from_json(const nlohmann::json& j);
    std::string digest() const;
};

// ------------------------------------------------------------------ generator

struct ShapeGeometry {
    int width = 32;
    int height = 32;
    int num_classes = 4;  // circle, square, triangle, cross
};

// Image i is fully determined by (seed, i); class label out-param.
Image generate_image(uint64_t seed, int64_t index, const ShapeGeometry& geom, int* class_label);
std::vector<Image> generate_images(int64_t n, uint64_t seed, const ShapeGeometry& geom,
                                   std::vector<int>* class_labels);

// ----------------------------------------------------------------- extractors

// Deterministic condition map. Mask kinds derive their rectangle from
// record_seed; other kinds ignore it.
Image extract_condition(const Image& img, ConditionKind kind, const CondParams& params, uint64_t record_seed = 0);

// The rectangle blanked by mask_inpaint for a given record seed: {x, y, w, h}.
std::array<int, 4> inpaint_rect(int width, int height, const CondParams& params, uint64_t record_seed);

// -------------------------------------------------------------------- dataset

struct DatasetRecord {
    int64_t index = 0;
    std::string image_rel;  // relative to dataset root
    std::string cond_rel;
    int class_label = 0;
    uint64_t record_seed = 0;
};

struct ConditionDataset {
    ConditionKind kind = ConditionKind::edge;
    std::string split;  // "train" or "val"
    std::filesystem::path root;
    std::vector<DatasetRecord> records;
    std::string params_digest;
    std::string index_digest;

    std::filesystem::path image_path(const DatasetRecord& r) const { return root / r.image_rel; }
    std::filesystem::path cond_path(const DatasetRecord& r) const { return root / r.cond_rel; }
};

struct KindDataset {
    ConditionDataset train, val;
};

// Writes root/{kind}/{split}/img_%06d.png + cond_%06d.png and
// root/{kind}/index.json. The train/val permutation is shared across kinds so
// records stay aligned by source image. Val size is floor(n * val_frac).
std::vector<KindDataset> build_dataset(const std::vector<Image>& images, const std::vector<int>& class_labels,
                                       const std::vector<ConditionKind>& kinds, uint64_t split_seed,
                                       const std::filesystem::path& root, const CondParams& params,
                                       uint64_t dataset_seed, double val_frac = 0.1);

// Loads one kind/split and re-extracts up to `audit_samples` conditions to
// verify bit-exact regenerability.
ConditionDataset load_dataset(const std::filesystem::path& root, ConditionKind kind, const std::string& split,
                              const CondParams& params, int audit_samples = 32);

// ---------------------------------------------------------------- round robin

// Batch-wise iteration: step i draws only from subset (i mod K); per-kind
// sampling is a seeded shuffle without replacement per epoch. Stateless in
// the step index, so resumed runs see identical batches.
class RoundRobinSampler {
public:
    struct Batch {
        int kind = 0;
        std::vector<int64_t> records;
    };

    RoundRobinSampler(std::vector<int64_t> subset_sizes, int batch_size, uint64_t seed);
    Batch at(int64_t step) const;
    int num_kinds() const { return static_cast<int>(sizes_.size()); }

private:
    const std::vector<int64_t>& perm(int kind, int64_t epoch) const;

    std::vector<int64_t> sizes_;
    int batch_;
    uint64_t seed_;
    mutable std::vector<std::pair<int64_t, std::vector<int64_t>>> cache_;  // per kind: (epoch, perm)
};

}  // namespace ctrlora
