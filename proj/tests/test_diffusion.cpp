#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "ctrlora/core/nn.hpp"
#include "ctrlora/diffusion.hpp"

using namespace ctrlora;

TEST_CASE("linear schedule endpoints and products") {
    // T=1: single-step product
    NoiseSchedule s1 = make_linear_schedule(1, 0.01, 0.01);
    CHECK(s1.abar(1) == doctest::Approx(0.99).epsilon(1e-12));

    // T=2, constant beta 0.5
    NoiseSchedule s2 = make_linear_schedule(2, 0.5, 0.5);
    CHECK(s2.alpha_bars[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(s2.alpha_bars[1] == doctest::Approx(0.25).epsilon(1e-12));

    // Default schedule tail against an independent high-precision product.
    NoiseSchedule s = make_linear_schedule(1000, 1e-4, 0.02);
    long double prod = 1.0L;
    for (int t = 0; t < 1000; ++t) {
        const long double beta = 1e-4L + (0.02L - 1e-4L) * static_cast<long double>(t) / 999.0L;
        prod *= 1.0L - beta;
    }
    CHECK(std::fabs(s.abar(1000) - static_cast<double>(prod)) < 1e-12);
    CHECK(std::fabs(s.abar(1000) - 4.0e-5) < 1e-6);
    CHECK(s.abar(1) > 0.99);
}

TEST_CASE("linear schedule precondition errors") {
    CHECK_THROWS_AS(make_linear_schedule(0, 0.1, 0.2), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.0, 0.2), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.3, 0.2), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.3, 1.0), ConfigError);
}

TEST_CASE("alpha_bar strictly decreasing for random schedules") {
    Rng rng(99);
    for (int rep = 0; rep < 20; ++rep) {
        const int T = 2 + static_cast<int>(rng.uniform_int(200));
        const double lo = rng.uniform(1e-5, 0.01);
        const double hi = lo + rng.uniform(0.0, 0.4);
        NoiseSchedule s = make_linear_schedule(T, lo, hi);
        for (int t = 1; t < T; ++t) CHECK(s.abar(t + 1) < s.abar(t));
    }
}

TEST_CASE("q_sample limiting coefficients and formula") {
    NoiseSchedule s;
    s.T = 2;
    s.betas = {0.5, 0.5};
    s.alphas = {0.5, 0.5};
    s.alpha_bars = {1.0, 0.0};  // hand-built limits

    Rng rng(5);
    Tensor x0 = Tensor::randn({2, 3, 4, 4}, rng);
    Tensor eps = Tensor::randn({2, 3, 4, 4}, rng);

    Tensor a = q_sample(x0, 1, eps, s);
    CHECK(std::memcmp(a.ptr(), x0.ptr(), sizeof(double) * a.numel()) == 0);  // abar=1 -> x0
    Tensor b = q_sample(x0, 2, eps, s);
    CHECK(std::memcmp(b.ptr(), eps.ptr(), sizeof(double) * b.numel()) == 0);  // abar=0 -> eps

    NoiseSchedule s3;
    s3.T = 1;
    s3.betas = {0.75};
    s3.alphas = {0.25};
    s3.alpha_bars = {0.25};
    Tensor one = Tensor::full({1}, 1.0);
    Tensor r = q_sample(one, 1, one, s3);
    CHECK(r.data[0] == doctest::Approx(0.5 + std::sqrt(0.75)).epsilon(1e-12));
    CHECK(r.data[0] == doctest::Approx(1.3660254037844386).epsilon(1e-12));

    Tensor bad = Tensor::zeros({2, 2});
    CHECK_THROWS_AS(q_sample(x0, 1, bad, s), ShapeError);
}

TEST_CASE("q_sample is linear in (x0, eps)") {
    NoiseSchedule s = make_linear_schedule(50, 1e-3, 0.1);
    Rng rng(17);
    for (int rep = 0; rep < 10; ++rep) {
        const int t = 1 + static_cast<int>(rng.uniform_int(50));
        const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
        Tensor x0 = Tensor::randn({8}, rng), y0 = Tensor::randn({8}, rng);
        Tensor e1 = Tensor::randn({8}, rng), e2 = Tensor::randn({8}, rng);
        Tensor xc({8}), ec({8});
        for (int i = 0; i < 8; ++i) {
            xc.data[i] = a * x0.data[i] + b * y0.data[i];
            ec.data[i] = a * e1.data[i] + b * e2.data[i];
        }
        Tensor lhs = q_sample(xc, t, ec, s);
        Tensor r1 = q_sample(x0, t, e1, s), r2 = q_sample(y0, t, e2, s);
        for (int i = 0; i < 8; ++i)
            CHECK(lhs.data[i] == doctest::Approx(a * r1.data[i] + b * r2.data[i]).epsilon(1e-12));
    }
}

namespace {

DiffusionBatch make_batch(int n, int ch, int hw, const NoiseSchedule& s, uint64_t seed) {
    DiffusionBatch b;
    Rng rng(seed);
    b.x0 = Tensor::randn({n, ch, hw, hw}, rng);
    b.eps = Tensor::randn({n, ch, hw, hw}, rng);
    for (int i = 0; i < n; ++i) {
        b.t.push_back(1 + static_cast<int>(rng.uniform_int(s.T)));
        b.class_labels.push_back(0);
    }
    return b;
}

}  // namespace

TEST_CASE("diffusion loss oracle values") {
    NoiseSchedule s = make_linear_schedule(100, 1e-3, 0.05);
    DiffusionBatch b = make_batch(4, 2, 4, s, 31);

    // perfect prediction
    Var l0 = diffusion_loss(
        [&](const Tensor&, const DiffusionBatch& bb) { return make_constant(bb.eps); }, b, s);
    CHECK(l0->value.data[0] == 0.0);

    // constant offset of 1: loss exactly 1
    Var l1 = diffusion_loss(
        [&](const Tensor&, const DiffusionBatch& bb) {
            Tensor t = bb.eps;
            for (auto& v : t.data) v += 1.0;
            return make_constant(t);
        },
        b, s);
    CHECK(l1->value.data[0] == doctest::Approx(1.0).epsilon(1e-12));

    // zero predictor on >= 1e5 elements: Monte-Carlo estimate of E[eps^2] = 1
    DiffusionBatch big = make_batch(8, 8, 40, s, 32);  // 8*8*1600 = 102400 elements
    CHECK(big.eps.numel() >= 100000);
    Var lz = diffusion_loss(
        [&](const Tensor&, const DiffusionBatch& bb) { return make_constant(Tensor::zeros(bb.eps.shape)); },
        big, s);
    CHECK(std::fabs(lz->value.data[0] - 1.0) < 0.02);

    // non-finite prediction signals divergence
    CHECK_THROWS_AS(diffusion_loss(
                        [&](const Tensor&, const DiffusionBatch& bb) {
                            Tensor t = bb.eps;
                            t.data[0] = std::numeric_limits<double>::quiet_NaN();
                            return make_constant(t);
                        },
                        b, s),
                    DivergenceError);
}

TEST_CASE("diffusion loss gradient matches finite differences on a toy predictor") {
    // ~150-parameter predictor: one 1x1 conv (2->2) plus one 3x3 conv (2->2).
    NoiseSchedule s = make_linear_schedule(60, 1e-3, 0.08);
    ParamStore ps;
    Conv2d c1(ps, "c1", 2, 2, 3, 1, 1, /*seed=*/7);
    Conv2d c2(ps, "c2", 2, 2, 1, 1, 0, 7);
    CHECK(ps.total_params() <= 200);

    DiffusionBatch b = make_batch(2, 2, 4, s, 77);
    auto loss_fn = [&]() {
        return diffusion_loss(
            [&](const Tensor& x_t, const DiffusionBatch&) {
                return c2.fwd(ag::silu(c1.fwd(make_constant(x_t))));
            },
            b, s);
    };

    ps.zero_grads();
    backward(loss_fn());
    double max_rel = 0.0;
    for (const auto& [name, p] : ps.items()) {
        (void)name;
        for (int64_t i = 0; i < p->value.numel(); ++i) {
            const double orig = p->value.data[i];
            const double h = 1e-6;
            p->value.data[i] = orig + h;
            const double fp = loss_fn()->value.data[0];
            p->value.data[i] = orig - h;
            const double fm = loss_fn()->value.data[0];
            p->value.data[i] = orig;
            const double num = (fp - fm) / (2 * h);
            const double rel =
                std::fabs(num - p->grad.data[i]) / std::max({1.0, std::fabs(num), std::fabs(p->grad.data[i])});
            max_rel = std::max(max_rel, rel);
        }
    }
    CHECK(max_rel < 1e-4);
}

TEST_CASE("cfg_predict arithmetic") {
    Rng rng(3);
    Tensor ec = Tensor::randn({6}, rng), eu = Tensor::randn({6}, rng);
    Tensor w1 = cfg_predict(ec, eu, 1.0);
    CHECK(std::memcmp(w1.ptr(), ec.ptr(), sizeof(double) * 6) == 0);
    Tensor w0 = cfg_predict(ec, eu, 0.0);
    CHECK(std::memcmp(w0.ptr(), eu.ptr(), sizeof(double) * 6) == 0);

    Tensor zero = Tensor::zeros({3}), one = Tensor::full({3}, 1.0);
    Tensor g = cfg_predict(one, zero, 7.5);
    for (double v : g.data) CHECK(v == doctest::Approx(7.5).epsilon(1e-15));
}

TEST_CASE("ddim oracle inversion recovers x0") {
    NoiseSchedule s = make_linear_schedule(100, 1e-4, 0.02);
    Rng rng(11);
    Tensor x0 = Tensor::randn({1, 2, 4, 4}, rng);

    GuidedPredictFn oracle = [&](const Tensor& x, int t, bool) {
        const double ab = s.abar(t);
        Tensor eps = x;
        for (int64_t i = 0; i < x.numel(); ++i)
            eps.data[i] = (x.data[i] - std::sqrt(ab) * x0.data[i]) / std::sqrt(1.0 - ab);
        return eps;
    };

    DdimConfig cfg;
    cfg.steps = 20;
    cfg.guidance = 1.0;
    cfg.seed = 4;
    Tensor out = ddim_sample(oracle, s, cfg, {1, 2, 4, 4});
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(std::fabs(out.data[i] - x0.data[i]) < 1e-3);
}

TEST_CASE("ddim determinism and zero-predictor closed form") {
    NoiseSchedule s = make_linear_schedule(40, 1e-3, 0.05);
    GuidedPredictFn zero = [](const Tensor& x, int, bool) { return Tensor::zeros(x.shape); };
    DdimConfig cfg;
    cfg.steps = 40;
    cfg.guidance = 1.0;
    cfg.seed = 9;

    Tensor a = ddim_sample(zero, s, cfg, {1, 1, 2, 2});
    Tensor b = ddim_sample(zero, s, cfg, {1, 1, 2, 2});
    CHECK(std::memcmp(a.ptr(), b.ptr(), sizeof(double) * a.numel()) == 0);

    // Independent scalar recursion: x_{prev} = sqrt(abar_prev / abar_t) * x_t.
    Rng rng(mix_seed({cfg.seed, fnv1a64("ddim.init")}));
    Tensor x = Tensor::randn({1, 1, 2, 2}, rng);
    for (int t = 40; t >= 1; --t) {
        const double ab = s.abar(t), abp = s.abar(t - 1);
        for (auto& v : x.data) v *= std::sqrt(abp / ab);
    }
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(a.data[i] == doctest::Approx(x.data[i]).epsilon(1e-10));

    // divergence guard
    GuidedPredictFn wild = [](const Tensor& x, int, bool) { return Tensor::full(x.shape, 1e9); };
    CHECK_THROWS_AS(ddim_sample(wild, s, cfg, {1, 1, 2, 2}), DivergenceError);
}

TEST_CASE("ddim timestep subsequence") {
    auto tau = ddim_timesteps(1000, 50);
    CHECK(tau.size() == 50);
    CHECK(tau.back() == 1000);
    for (size_t i = 0; i + 1 < tau.size(); ++i) CHECK(tau[i] < tau[i + 1]);
    CHECK_THROWS_AS(ddim_timesteps(10, 11), ConfigError);
    auto full = ddim_timesteps(7, 7);
    for (int i = 0; i < 7; ++i) CHECK(full[static_cast<size_t>(i)] == i + 1);
}
