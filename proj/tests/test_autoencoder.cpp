#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "ctrlora/autoencoder.hpp"
#include "ctrlora/controlnet.hpp"
#include "ctrlora/training.hpp"

using namespace ctrlora;

TEST_CASE("encode/decode shapes are configuration-forced and deterministic") {
    AutoencoderConfig cfg;  // 32x32, f=4, 4 latent channels
    Autoencoder ae(cfg, 3);
    Rng rng(4);
    Tensor img = Tensor::randn({3, 32, 32}, rng, 0.3);

    Latent z = ae.encode(img);
    CHECK(z.values.shape == std::vector<int64_t>{4, 8, 8});
    CHECK(z.provenance == LatentProvenance::image);

    Latent z2 = ae.encode(img);
    CHECK(std::memcmp(z.values.ptr(), z2.values.ptr(), sizeof(double) * z.values.numel()) == 0);

    Tensor out = ae.decode(z.values);
    CHECK(out.shape == std::vector<int64_t>{3, 32, 32});
    for (double v : out.data) {
        CHECK(v <= 1.0);
        CHECK(v >= -1.0);
    }
    Tensor out2 = ae.decode(z.values);
    CHECK(std::memcmp(out.ptr(), out2.ptr(), sizeof(double) * out.numel()) == 0);
}

TEST_CASE("embed_condition shares the encode path") {
    Autoencoder ae(AutoencoderConfig{}, 9);
    Rng rng(5);
    for (int rep = 0; rep < 3; ++rep) {
        Tensor img = Tensor::randn({3, 32, 32}, rng, 0.5);
        Latent enc = ae.encode(img);
        Latent emb = ae.embed_condition(img);
        CHECK(emb.provenance == LatentProvenance::condition);
        CHECK(std::memcmp(enc.values.ptr(), emb.values.ptr(), sizeof(double) * enc.values.numel()) == 0);
    }
    // all-black condition image stays finite
    Tensor black = Tensor::full({3, 32, 32}, -1.0);
    CHECK(ae.embed_condition(black).values.all_finite());
}

TEST_CASE("shape and divisibility errors") {
    Autoencoder ae(AutoencoderConfig{}, 9);
    Rng rng(6);
    CHECK_THROWS_AS(ae.encode(Tensor::randn({1, 32, 32}, rng)), ShapeError);
    CHECK_THROWS_AS(ae.encode(Tensor::randn({3, 30, 32}, rng)), ShapeError);
    CHECK_THROWS_AS(ae.decode(Tensor::randn({2, 8, 8}, rng)), ShapeError);

    AutoencoderConfig bad;
    bad.downsample_factor = 3;
    CHECK_THROWS_AS(Autoencoder(bad, 1), ConfigError);
}

TEST_CASE("perturbation stability smoke check") {
    Autoencoder ae(AutoencoderConfig{}, 11);
    Rng rng(7);
    Tensor img = Tensor::randn({3, 32, 32}, rng, 0.4);
    Tensor bumped = img;
    for (auto& v : bumped.data) v += rng.uniform(-1e-3, 1e-3);
    Tensor a = ae.encode(img).values, b = ae.encode(bumped).values;
    double diff = 0;
    for (int64_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::fabs(a.data[i] - b.data[i]));
    CHECK(std::isfinite(diff));
    CHECK(diff < 1.0);
}

TEST_CASE("latent scale of exactly unit-variance latents is 1") {
    // +1/-1 in equal counts: mean 0, population variance exactly 1.
    std::vector<Tensor> latents;
    Tensor t({2, 2, 2});
    for (int i = 0; i < 8; ++i) t.data[static_cast<size_t>(i)] = (i % 2 == 0) ? 1.0 : -1.0;
    latents.push_back(t);
    CHECK(compute_latent_scale(latents) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("embedding-space match: condition embedding drives finite controlnet activations") {
    // At base-controlnet initialization the embedded condition must produce
    // finite activations of the documented shapes at every level.
    AutoencoderConfig acfg;
    Autoencoder ae(acfg, 21);
    UNetConfig ucfg;  // default 4x8x8 geometry matches the AE latent
    UNet unet(ucfg, 22);
    auto cn = init_base_controlnet(unet, EmbedMode::vae_latent, 23);

    Rng rng(8);
    Image img(32, 32);
    for (auto& v : img.rgb) v = static_cast<uint8_t>(rng.uniform_int(256));
    Tensor cond = ae.embed_condition(image_to_tensor(img)).values;
    cond.shape = {1, 4, 8, 8};
    Tensor x = Tensor::randn({1, 4, 8, 8}, rng);

    // Residual-path activations: run the encoder copy on x + fused condition
    // and check every injection point's shape and finiteness.
    std::vector<Var> res = cn->forward(x, {100}, {0}, cond, nullptr, false);
    REQUIRE(res.size() == 4);
    CHECK(res[0]->value.shape == std::vector<int64_t>{1, 32, 8, 8});
    CHECK(res[1]->value.shape == std::vector<int64_t>{1, 64, 4, 4});
    CHECK(res[2]->value.shape == std::vector<int64_t>{1, 128, 2, 2});
    CHECK(res[3]->value.shape == std::vector<int64_t>{1, 128, 2, 2});
    for (const auto& r : res) CHECK(r->value.all_finite());
}
