#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "ctrlora/core/autograd.hpp"
#include "ctrlora/core/digest.hpp"
#include "ctrlora/core/nn.hpp"
#include "ctrlora/core/rng.hpp"

using namespace ctrlora;

namespace {

// Max relative error between analytic gradients and central finite
// differences over every element of every leaf.
double fd_check(const std::function<Var(const std::vector<Var>&)>& f, std::vector<Var> leaves,
                double h = 1e-6) {
    for (auto& leaf : leaves) leaf->zero_grad();
    Var out = f(leaves);
    REQUIRE(out->value.numel() == 1);
    backward(out);

    double max_rel = 0.0;
    for (auto& leaf : leaves) {
        leaf->ensure_grad();
        for (int64_t i = 0; i < leaf->value.numel(); ++i) {
            const double orig = leaf->value.data[i];
            leaf->value.data[i] = orig + h;
            const double fp = f(leaves)->value.data[0];
            leaf->value.data[i] = orig - h;
            const double fm = f(leaves)->value.data[0];
            leaf->value.data[i] = orig;
            const double num = (fp - fm) / (2.0 * h);
            const double ana = leaf->grad.data[i];
            const double rel = std::fabs(num - ana) / std::max({1.0, std::fabs(num), std::fabs(ana)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

Var leaf_randn(std::vector<int64_t> shape, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    return make_leaf(Tensor::randn(std::move(shape), rng, scale), true);
}

}  // namespace

TEST_CASE("rng determinism and normal moments") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng r(7);
    double sum = 0, sumsq = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double v = r.normal();
        sum += v;
        sumsq += v * v;
    }
    CHECK(std::fabs(sum / n) < 0.01);
    CHECK(std::fabs(sumsq / n - 1.0) < 0.02);
}

TEST_CASE("elementwise op gradients") {
    auto a = leaf_randn({3, 4}, 1);
    auto b = leaf_randn({3, 4}, 2);
    CHECK(fd_check([](const std::vector<Var>& v) { return ag::mean_all(ag::add(v[0], v[1])); }, {a, b}) < 1e-7);
    CHECK(fd_check([](const std::vector<Var>& v) { return ag::mean_all(ag::sub(v[0], v[1])); }, {a, b}) < 1e-7);
    CHECK(fd_check([](const std::vector<Var>& v) { return ag::mean_all(ag::mul(v[0], v[1])); }, {a, b}) < 1e-7);
    CHECK(fd_check([](const std::vector<Var>& v) { return ag::sum_all(ag::scale(v[0], -1.7)); }, {a}) < 1e-7);
    CHECK(fd_check([](const std::vector<Var>& v) { return ag::mean_all(ag::exp(ag::scale(v[0], 0.5))); }, {a}) <
          1e-7);
    CHECK(fd_check([](const std::vector<Var>& v) { return ag::mean_all(ag::silu(v[0])); }, {a}) < 1e-7);

    Rng rng(3);
    Tensor target = Tensor::randn({3, 4}, rng);
    CHECK(fd_check([&](const std::vector<Var>& v) { return ag::mse(v[0], target); }, {a}) < 1e-7);
}

TEST_CASE("linear and bmm gradients") {
    auto x = leaf_randn({5, 3}, 10);
    auto w = leaf_randn({4, 3}, 11);
    auto b = leaf_randn({4}, 12);
    CHECK(fd_check([](const std::vector<Var>& v) { return ag::mean_all(ag::linear(v[0], v[1], &v[2])); },
                   {x, w, b}) < 1e-7);

    auto p = leaf_randn({2, 3, 4}, 13);
    auto q = leaf_randn({2, 4, 5}, 14);
    CHECK(fd_check([](const std::vector<Var>& v) { return ag::mean_all(ag::bmm(v[0], v[1])); }, {p, q}) < 1e-7);
    auto qt = leaf_randn({2, 5, 4}, 15);
    CHECK(fd_check([](const std::vector<Var>& v) { return ag::mean_all(ag::bmm_nt(v[0], v[1])); }, {p, qt}) <
          1e-7);
}

TEST_CASE("softmax gradient and normalization") {
    auto x = leaf_randn({6, 5}, 20);
    Var y = ag::softmax_last(x);
    for (int64_t r = 0; r < 6; ++r) {
        double s = 0;
        for (int64_t i = 0; i < 5; ++i) s += y->value.data[r * 5 + i];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    Rng rng(21);
    Tensor weights = Tensor::randn({6, 5}, rng);
    CHECK(fd_check(
              [&](const std::vector<Var>& v) {
                  return ag::mean_all(ag::mul(ag::softmax_last(v[0]), make_constant(weights)));
              },
              {x}) < 1e-7);
}

TEST_CASE("conv2d gradients, stride and padding") {
    auto x = leaf_randn({2, 3, 6, 6}, 30);
    auto w = leaf_randn({4, 3, 3, 3}, 31);
    auto b = leaf_randn({4}, 32);
    Rng rng(33);
    Tensor mask1 = Tensor::randn({2, 4, 6, 6}, rng);
    CHECK(fd_check(
              [&](const std::vector<Var>& v) {
                  return ag::mean_all(ag::mul(ag::conv2d(v[0], v[1], &v[2], 1, 1), make_constant(mask1)));
              },
              {x, w, b}) < 1e-7);

    Tensor mask2 = Tensor::randn({2, 4, 3, 3}, rng);
    CHECK(fd_check(
              [&](const std::vector<Var>& v) {
                  return ag::mean_all(ag::mul(ag::conv2d(v[0], v[1], &v[2], 2, 1), make_constant(mask2)));
              },
              {x, w, b}) < 1e-7);

    // 1x1, no padding
    auto w1 = leaf_randn({2, 3, 1, 1}, 34);
    CHECK(fd_check([](const std::vector<Var>& v) { return ag::mean_all(ag::conv2d(v[0], v[1], nullptr, 1, 0)); },
                   {x, w1}) < 1e-7);
}

TEST_CASE("norm gradients") {
    auto x = leaf_randn({2, 8, 3, 3}, 40);
    auto g = leaf_randn({8}, 41, 0.5);
    auto b = leaf_randn({8}, 42, 0.5);
    Rng rng(43);
    Tensor mask = Tensor::randn({2, 8, 3, 3}, rng);
    CHECK(fd_check(
              [&](const std::vector<Var>& v) {
                  return ag::mean_all(ag::mul(ag::group_norm(v[0], v[1], v[2], 4), make_constant(mask)));
              },
              {x, g, b}, 1e-5) < 1e-6);

    auto xt = leaf_randn({7, 6}, 44);
    auto gt = leaf_randn({6}, 45, 0.5);
    auto bt = leaf_randn({6}, 46, 0.5);
    Tensor mask2 = Tensor::randn({7, 6}, rng);
    CHECK(fd_check(
              [&](const std::vector<Var>& v) {
                  return ag::mean_all(ag::mul(ag::layer_norm(v[0], v[1], v[2]), make_constant(mask2)));
              },
              {xt, gt, bt}, 1e-5) < 1e-6);
}

TEST_CASE("layout op gradients") {
    auto x = leaf_randn({2, 4, 2, 2}, 50);
    Rng rng(51);
    Tensor m1 = Tensor::randn({8, 4}, rng);
    CHECK(fd_check(
              [&](const std::vector<Var>& v) {
                  return ag::mean_all(ag::mul(ag::nchw_to_tokens(v[0]), make_constant(m1)));
              },
              {x}) < 1e-7);

    auto tok = leaf_randn({8, 4}, 52);
    Tensor m2 = Tensor::randn({2, 4, 2, 2}, rng);
    CHECK(fd_check(
              [&](const std::vector<Var>& v) {
                  return ag::mean_all(ag::mul(ag::tokens_to_nchw(v[0], 2, 4, 2, 2), make_constant(m2)));
              },
              {tok}) < 1e-7);

    auto tok2 = leaf_randn({4, 4}, 57);         // (n_batch * tokens, C) = (2*2, 4)
    Tensor m3 = Tensor::randn({4, 2, 2}, rng);  // (n*heads, tokens, dh) = (2*2, 2, 2)
    CHECK(fd_check(
              [&](const std::vector<Var>& v) {
                  return ag::mean_all(ag::mul(ag::split_heads(v[0], 2, 2, 2), make_constant(m3)));
              },
              {tok2}) < 1e-7);

    auto heads = leaf_randn({4, 2, 2}, 53);
    Tensor m4 = Tensor::randn({4, 4}, rng);
    CHECK(fd_check(
              [&](const std::vector<Var>& v) {
                  return ag::mean_all(ag::mul(ag::merge_heads(v[0], 2, 2, 2), make_constant(m4)));
              },
              {heads}) < 1e-7);

    Tensor m5 = Tensor::randn({2, 4, 4, 4}, rng);
    CHECK(fd_check(
              [&](const std::vector<Var>& v) {
                  return ag::mean_all(ag::mul(ag::upsample_nearest2x(v[0]), make_constant(m5)));
              },
              {x}) < 1e-7);

    auto y = leaf_randn({2, 3, 2, 2}, 54);
    Tensor m6 = Tensor::randn({2, 7, 2, 2}, rng);
    CHECK(fd_check(
              [&](const std::vector<Var>& v) {
                  return ag::mean_all(ag::mul(ag::concat_channels(v[0], v[1]), make_constant(m6)));
              },
              {x, y}) < 1e-7);

    Tensor m7 = Tensor::randn({2, 2, 2, 2}, rng);
    CHECK(fd_check(
              [&](const std::vector<Var>& v) {
                  return ag::mean_all(ag::mul(ag::slice_channels(v[0], 1, 3), make_constant(m7)));
              },
              {x}) < 1e-7);

    auto bias = leaf_randn({2, 4}, 55);
    Tensor m8 = Tensor::randn({2, 4, 2, 2}, rng);
    CHECK(fd_check(
              [&](const std::vector<Var>& v) {
                  return ag::mean_all(ag::mul(ag::add_bias_spatial(v[0], v[1]), make_constant(m8)));
              },
              {x, bias}) < 1e-7);

    auto table = leaf_randn({5, 3}, 56);
    std::vector<int> idx = {0, 2, 2, 4};
    Tensor m9 = Tensor::randn({4, 3}, rng);
    CHECK(fd_check(
              [&](const std::vector<Var>& v) {
                  return ag::mean_all(ag::mul(ag::gather_rows(v[0], idx), make_constant(m9)));
              },
              {table}) < 1e-7);
}

TEST_CASE("module blocks backprop end to end") {
    ParamStore ps;
    ResBlock res(ps, "res", 4, 6, 8, /*seed=*/123);
    TransformerBlock tr(ps, "tr", 8, 2, 123);
    Rng rng(60);
    Tensor x_res = Tensor::randn({2, 4, 4, 4}, rng);
    Tensor emb = Tensor::randn({2, 8}, rng);
    Tensor x_tr = Tensor::randn({2, 8, 2, 2}, rng);

    std::vector<Var> leaves;
    for (const auto& [_, v] : ps.items()) leaves.push_back(v);

    auto run = [&](const std::vector<Var>&) {
        Var a = res.fwd(make_constant(x_res), make_constant(emb));
        Var b = tr.fwd(make_constant(x_tr));
        return ag::add(ag::mean_all(a), ag::mean_all(b));
    };
    CHECK(fd_check(run, leaves, 1e-5) < 1e-5);
}

TEST_CASE("no-grad guard builds no tape") {
    auto x = leaf_randn({2, 2}, 70);
    {
        NoGradGuard ng;
        Var y = ag::silu(ag::scale(x, 2.0));
        CHECK_FALSE(y->requires_grad);
        CHECK(y->parents.empty());
    }
    Var y = ag::scale(x, 2.0);
    CHECK(y->requires_grad);
}

TEST_CASE("param store and digests") {
    ParamStore ps;
    Rng rng(80);
    ps.add("a", Tensor::randn({2, 2}, rng));
    ps.add("b", Tensor::randn({3}, rng));
    const std::string d1 = value_digest(ps);
    const std::string t1 = topology_digest(ps);
    ps.get("a")->value.data[0] += 1.0;
    CHECK(value_digest(ps) != d1);
    CHECK(topology_digest(ps) == t1);
    CHECK_THROWS_AS(ps.add("a", Tensor::zeros({1})), Error);
    CHECK(ps.total_params() == 7);
}

TEST_CASE("sinusoidal embedding shape and range") {
    Tensor e = sinusoidal_embedding({1, 500, 1000}, 16);
    CHECK(e.shape == std::vector<int64_t>{3, 16});
    for (double v : e.data) {
        CHECK(v <= 1.0);
        CHECK(v >= -1.0);
    }
    CHECK(e.data[0] != e.data[16]);  // different timesteps differ
}
