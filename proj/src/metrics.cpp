#include "ctrlora/metrics.hpp"

#include <Eigen/Dense>

#include <cmath>

#include "ctrlora/core/errors.hpp"

namespace ctrlora {

std::string fidelity_metric_name(FidelityMetric m) {
    switch (m) {
        case FidelityMetric::cycle_iou: return "cycle_iou";
        case FidelityMetric::cycle_mse: return "cycle_mse";
        case FidelityMetric::gt_psnr: return "gt_psnr";
    }
    return "?";
}

FidelityMetric fidelity_metric_for(ConditionKind kind) {
    if (condition_role(kind) == ConditionRole::restoration) return FidelityMetric::gt_psnr;
    return kind == ConditionKind::edge ? FidelityMetric::cycle_iou : FidelityMetric::cycle_mse;
}

double fidelity_gate(ConditionKind kind, const CondParams& params) {
    switch (kind) {
        case ConditionKind::edge: return params.edge_iou_min;
        case ConditionKind::palette: return params.palette_mse_max;
        case ConditionKind::pixelate: return params.pixelate_mse_max;
        default: return params.restoration_psnr_min;
    }
}

bool FidelityScore::meets_gate(const CondParams& params) const {
    const double gate = fidelity_gate(kind, params);
    return higher_is_better() ? aggregate >= gate : aggregate <= gate;
}

double binary_iou(const Image& a, const Image& b) {
    if (!a.same_dims(b)) throw ShapeError("binary_iou: image size mismatch");
    int64_t inter = 0, uni = 0;
    for (int y = 0; y < a.h; ++y)
        for (int x = 0; x < a.w; ++x) {
            const bool pa = a.px(x, y)[0] > 127;
            const bool pb = b.px(x, y)[0] > 127;
            inter += (pa && pb) ? 1 : 0;
            uni += (pa || pb) ? 1 : 0;
        }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double image_mse(const Image& a, const Image& b) {
    if (!a.same_dims(b)) throw ShapeError("image_mse: image size mismatch");
    double se = 0.0;
    for (size_t i = 0; i < a.rgb.size(); ++i) {
        const double d = (static_cast<double>(a.rgb[i]) - static_cast<double>(b.rgb[i])) / 255.0;
        se += d * d;
    }
    return se / static_cast<double>(a.rgb.size());
}

FidelityScore cycle_fidelity(const std::vector<Image>& generated, const std::vector<Image>& conditions,
                             ConditionKind kind, const CondParams& params) {
    if (condition_role(kind) != ConditionRole::structural)
        throw ConfigError("cycle_fidelity: kind '" + condition_name(kind) +
                          "' is evaluated against ground truth, not by re-extraction");
    if (generated.empty() || generated.size() != conditions.size())
        throw ShapeError("cycle_fidelity: paired lists required");

    FidelityScore s;
    s.kind = kind;
    s.metric = fidelity_metric_for(kind);
    double sum = 0.0;
    for (size_t i = 0; i < generated.size(); ++i) {
        const Image re = extract_condition(generated[i], kind, params);
        const double v = (s.metric == FidelityMetric::cycle_iou) ? binary_iou(re, conditions[i])
                                                                 : image_mse(re, conditions[i]);
        s.per_image.push_back(v);
        sum += v;
    }
    s.aggregate = sum / static_cast<double>(s.per_image.size());
    return s;
}

FidelityScore ground_truth_fidelity(const std::vector<Image>& generated, const std::vector<Image>& ground_truth,
                                    double cap_db) {
    if (generated.empty() || generated.size() != ground_truth.size())
        throw ShapeError("ground_truth_fidelity: paired lists required");
    FidelityScore s;
    s.metric = FidelityMetric::gt_psnr;
    double sum = 0.0;
    for (size_t i = 0; i < generated.size(); ++i) {
        const double v = psnr_u8(generated[i], ground_truth[i], cap_db);
        s.per_image.push_back(v);
        sum += v;
    }
    s.aggregate = sum / static_cast<double>(s.per_image.size());
    return s;
}

// ------------------------------------------------------------ feature distance

namespace {

// Pooled latent features: the latent average-pooled to 2x2 per channel.
Eigen::VectorXd pooled_features(const Tensor& latent) {
    const int64_t c = latent.dim(0), h = latent.dim(1), w = latent.dim(2);
    const int64_t ph = 2, pw = 2;
    Eigen::VectorXd f(c * ph * pw);
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t by = 0; by < ph; ++by)
            for (int64_t bx = 0; bx < pw; ++bx) {
                const int64_t y0 = by * h / ph, y1 = (by + 1) * h / ph;
                const int64_t x0 = bx * w / pw, x1 = (bx + 1) * w / pw;
                double acc = 0.0;
                for (int64_t y = y0; y < y1; ++y)
                    for (int64_t x = x0; x < x1; ++x) acc += latent.data[(ch * h + y) * w + x];
                f((ch * ph + by) * pw + bx) = acc / static_cast<double>((y1 - y0) * (x1 - x0));
            }
    return f;
}

Eigen::MatrixXd spd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double feature_distance(const std::vector<Image>& set_a, const std::vector<Image>& set_b, const Autoencoder& ae) {
    if (set_a.size() < 16 || set_b.size() < 16) throw ConfigError("feature_distance: each set needs >= 16 images");

    auto stats = [&](const std::vector<Image>& set, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
        std::vector<Eigen::VectorXd> feats;
        feats.reserve(set.size());
        for (const Image& img : set) feats.push_back(pooled_features(ae.encode(image_to_tensor(img)).values));
        const int64_t d = feats[0].size(), n = static_cast<int64_t>(feats.size());
        mu = Eigen::VectorXd::Zero(d);
        for (const auto& f : feats) mu += f;
        mu /= static_cast<double>(n);
        cov = Eigen::MatrixXd::Zero(d, d);
        for (const auto& f : feats) {
            const Eigen::VectorXd c = f - mu;
            cov += c * c.transpose();
        }
        cov /= static_cast<double>(n);
        cov.diagonal().array() += 1e-6;  // documented diagonal loading
    };

    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd cov_a, cov_b;
    stats(set_a, mu_a, cov_a);
    stats(set_b, mu_b, cov_b);

    const Eigen::MatrixXd sqrt_a = spd_sqrt(cov_a);
    const Eigen::MatrixXd cross = spd_sqrt(sqrt_a * cov_b * sqrt_a);
    const double d2 = (mu_a - mu_b).squaredNorm() + (cov_a + cov_b - 2.0 * cross).trace();
    return std::max(0.0, d2);
}

// ---------------------------------------------------------------- convergence

std::string regime_name(Regime r) {
    switch (r) {
        case Regime::sudden: return "sudden";
        case Regime::gradual: return "gradual";
        case Regime::oscillating: return "oscillating";
    }
    return "?";
}

ConvergenceSeries analyze_convergence(const std::vector<ConvergencePoint>& points, double threshold,
                                      bool higher_is_better) {
    if (points.size() < 5) throw DataError("analyze_convergence: need at least 5 evaluation points");
    for (size_t i = 0; i + 1 < points.size(); ++i)
        if (points[i + 1].step <= points[i].step) throw DataError("analyze_convergence: steps must increase");

    ConvergenceSeries s;
    s.points = points;
    s.threshold = threshold;
    s.higher_is_better = higher_is_better;

    auto meets = [&](double f) { return higher_is_better ? f >= threshold : f <= threshold; };
    for (const auto& p : points)
        if (meets(p.fidelity)) {
            s.steps_to_threshold = p.step;
            break;
        }

    // Orient so progress is "up".
    std::vector<double> v;
    v.reserve(points.size());
    for (const auto& p : points) v.push_back(higher_is_better ? p.fidelity : -p.fidelity);
    double lo = v[0], hi = v[0];
    for (double x : v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    const double range = hi - lo;

    int ups = 0, downs = 0;
    for (size_t i = 0; i + 1 < v.size(); ++i) {
        const bool a = meets(points[i].fidelity), b = meets(points[i + 1].fidelity);
        if (!a && b) ++ups;
        if (a && !b) ++downs;
    }

    bool sudden = false;
    if (range > 0) {
        double prefix_lo = v[0], prefix_hi = v[0];
        for (size_t i = 0; i + 1 < v.size(); ++i) {
            prefix_lo = std::min(prefix_lo, v[i]);
            prefix_hi = std::max(prefix_hi, v[i]);
            const bool flat_prefix = (prefix_hi - prefix_lo) <= 0.25 * range;
            if (flat_prefix && (v[i + 1] - v[i]) > 0.5 * range) {
                sudden = true;
                break;
            }
        }
    }

    if (ups + downs >= 3 && ups >= 1 && downs >= 1)
        s.regime = Regime::oscillating;
    else if (sudden)
        s.regime = Regime::sudden;
    else
        s.regime = Regime::gradual;
    return s;
}

}  // namespace ctrlora
