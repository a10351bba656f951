#pragma once

#include <optional>
#include <vector>

#include "ctrlora/autoencoder.hpp"
#include "ctrlora/conditions.hpp"

namespace ctrlora {

enum class FidelityMetric { cycle_iou, cycle_mse, gt_psnr };
std::string fidelity_metric_name(FidelityMetric m);

struct FidelityScore {
    ConditionKind kind = ConditionKind::edge;
    FidelityMetric metric = FidelityMetric::cycle_iou;
    std::vector<double> per_image;
    double aggregate = 0.0;

    bool higher_is_better() const { return metric != FidelityMetric::cycle_mse; }
    // Whether this score meets the kind's gate from the params file.
    bool meets_gate(const CondParams& params) const;
};

double fidelity_gate(ConditionKind kind, const CondParams& params);
FidelityMetric fidelity_metric_for(ConditionKind kind);

// Re-extracts the condition from each generated image and scores it against
// the paired input condition. Structural kinds only. Binary maps (edge) use
// IoU; continuous maps use MSE over [0,1] pixels.
FidelityScore cycle_fidelity(const std::vector<Image>& generated, const std::vector<Image>& conditions,
                             ConditionKind kind, const CondParams& params);

// Per-image PSNR against ground truth; zero-MSE pairs report cap_db.
FidelityScore ground_truth_fidelity(const std::vector<Image>& generated, const std::vector<Image>& ground_truth,
                                    double cap_db = 99.0);

// IoU of two binarized maps (threshold 127). Both-empty pairs score 1.
double binary_iou(const Image& a, const Image& b);
double image_mse(const Image& a, const Image& b);

// Frechet distance between Gaussians fitted to pooled autoencoder-latent
// statistics of each set. Degenerate covariances get 1e-6 diagonal loading.
double feature_distance(const std::vector<Image>& set_a, const std::vector<Image>& set_b, const Autoencoder& ae);

// ---------------------------------------------------------------- convergence

enum class Regime { sudden, gradual, oscillating };
std::string regime_name(Regime r);

struct ConvergencePoint {
    int64_t step = 0;
    double fidelity = 0.0;
};

struct ConvergenceSeries {
    std::vector<ConvergencePoint> points;
    double threshold = 0.0;
    bool higher_is_better = true;
    std::optional<int64_t> steps_to_threshold;
    Regime regime = Regime::gradual;
};

// Labels the series: "sudden" (jump > 50% of range within one eval window
// after a flat prefix), "oscillating" (>= 3 threshold crossings in both
// directions), else "gradual". Requires >= 5 points.
ConvergenceSeries analyze_convergence(const std::vector<ConvergencePoint>& points, double threshold,
                                      bool higher_is_better);

}  // namespace ctrlora
