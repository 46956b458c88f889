#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ids/dcp.hpp"
#include "ids/hazegen.hpp"
#include "ids/metrics.hpp"

#include <cmath>

using namespace ids;

namespace {

// Nested-loop min oracle over channel and replicated patch neighborhood.
float dark_at_reference(const Tensor& img, int patch, int y, int x) {
    const Shape s = img.shape();
    const int r = patch / 2;
    float m = 1e30f;
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
            const int yy = std::clamp(y + dy, 0, s.h - 1);
            const int xx = std::clamp(x + dx, 0, s.w - 1);
            for (int c = 0; c < 3; ++c) m = std::min(m, img.at(0, c, yy, xx));
        }
    return m;
}

}  // namespace

TEST_CASE("dark_channel basics") {
    Tensor gray = Tensor::full({1, 3, 20, 20}, 0.4f);
    DepthMap d = dark_channel(gray, 15);
    for (float v : d.v) CHECK(v == 0.4f);

    Tensor zero_blue = Tensor::full({1, 3, 20, 20}, 0.8f);
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 20; ++x) zero_blue.at(0, 2, y, x) = 0.0f;
    DepthMap d2 = dark_channel(zero_blue, 5);
    for (float v : d2.v) CHECK(v == 0.0f);

    CHECK_THROWS_AS(dark_channel(gray, 4), std::invalid_argument);
    CHECK_THROWS_AS(dark_channel(gray, 21), std::invalid_argument);
}

TEST_CASE("dark_channel matches nested-loop oracle; bright pixel erased") {
    Tensor img = Tensor::full({1, 3, 16, 16}, 0.05f);
    for (int c = 0; c < 3; ++c) img.at(0, c, 8, 8) = 0.95f;
    DepthMap d = dark_channel(img, 7);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            CHECK(d.at(y, x) == dark_at_reference(img, 7, y, x));
    // the bright pixel itself takes the neighborhood minimum
    CHECK(d.at(8, 8) == 0.05f);
}

TEST_CASE("estimate_atmospheric_light") {
    Tensor c = Tensor::full({1, 3, 16, 16}, 0.35f);
    DepthMap d = dark_channel(c, 5);
    float a[3];
    estimate_atmospheric_light(c, d, 0.01f, a);
    for (int i = 0; i < 3; ++i) CHECK(a[i] == 0.35f);

    // fraction 1: global argmax of RGB sum
    Tensor img = Tensor::full({1, 3, 16, 16}, 0.2f);
    for (int ch = 0; ch < 3; ++ch) img.at(0, ch, 3, 4) = 0.9f;
    DepthMap d2 = dark_channel(img, 5);
    estimate_atmospheric_light(img, d2, 1.0f, a);
    for (int i = 0; i < 3; ++i) CHECK(a[i] == 0.9f);

    CHECK_THROWS_AS(estimate_atmospheric_light(img, d2, 0.0f, a), std::invalid_argument);
}

TEST_CASE("atmospheric light recovered on deep synthetic scenes") {
    int ok = 0, total = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Tensor radiance;
        DepthMap depth;
        generate_scene(seed, 48, 48, radiance, depth);
        ScatteringParams p;
        p.beta = 1.5f;
        p.a_rgb[0] = p.a_rgb[1] = p.a_rgb[2] = 0.9f;
        DepthMap t = transmission_from_depth(depth, p.beta);
        Tensor hazy = apply_scattering(radiance, t, p.a_rgb);
        float a[3];
        DcpConfig cfg;
        estimate_atmospheric_light(hazy, dark_channel(hazy, cfg.patch), cfg.airlight_fraction, a);
        ++total;
        if (std::fabs(a[0] - 0.9f) < 0.05f && std::fabs(a[1] - 0.9f) < 0.05f &&
            std::fabs(a[2] - 0.9f) < 0.05f)
            ++ok;
    }
    CHECK(ok >= total - 1);  // occasional near-camera bright surface is tolerated
}

TEST_CASE("estimate_transmission bounds and constant-image case") {
    DcpConfig cfg;
    Tensor img = Tensor::full({1, 3, 20, 20}, 0.7f);
    const float a[3] = {0.7f, 0.7f, 0.7f};
    DepthMap t = estimate_transmission(img, a, cfg);
    for (float v : t.v) {
        CHECK(v == doctest::Approx(std::max(1.0f - cfg.omega, cfg.t_floor)));
        CHECK(v >= cfg.t_floor);
        CHECK(v <= 1.0f);
    }
    const float bad[3] = {0.0f, 0.7f, 0.7f};
    CHECK_THROWS_AS(estimate_transmission(img, bad, cfg), std::invalid_argument);
}

TEST_CASE("transmission estimate tracks truth on indoor scenes") {
    double total_err = 0.0;
    int count = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        ScenePair p = make_scene_pair(seed, 48, 48, HazeProfile::indoor);
        DepthMap t_true = transmission_from_depth(p.params.depth, p.params.beta);
        DcpConfig cfg;
        DepthMap t_est = estimate_transmission(p.hazy, p.params.a_rgb, cfg);
        double err = 0.0;
        for (size_t i = 0; i < t_true.v.size(); ++i)
            err += std::fabs(double(t_est.v[i]) -
                             double(std::max(t_true.v[i], cfg.t_floor)));
        total_err += err / double(t_true.v.size());
        ++count;
    }
    CHECK(total_err / count < 0.15);
}

TEST_CASE("dcp_dehaze on haze-free input stays close to it") {
    double total = 0.0;
    for (std::uint64_t seed = 100; seed < 110; ++seed) {
        Tensor radiance;
        DepthMap depth;
        generate_scene(seed, 48, 48, radiance, depth);
        Tensor out = dcp_dehaze(radiance);
        double mad = 0.0;
        for (size_t i = 0; i < out.data().size(); ++i)
            mad += std::fabs(out.data()[i] - radiance.data()[i]);
        total += mad / double(out.numel());
    }
    CHECK(total / 10.0 < 0.1);
}

TEST_CASE("dcp_dehaze improves PSNR on synthetic indoor haze") {
    double gain = 0.0;
    int count = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        ScenePair p = make_scene_pair(seed, 48, 48, HazeProfile::indoor);
        Tensor out = dcp_dehaze(p.hazy);
        for (float v : out.data()) {
            REQUIRE(std::isfinite(v));
            REQUIRE(v >= 0.0f);
            REQUIRE(v <= 1.0f);
        }
        gain += psnr(out, p.clear) - psnr(p.hazy, p.clear);
        ++count;
    }
    CHECK(gain / count >= 1.0);
}

TEST_CASE("dcp_dehaze is deterministic") {
    ScenePair p = make_scene_pair(5, 32, 32, HazeProfile::indoor);
    Tensor a = dcp_dehaze(p.hazy);
    Tensor b = dcp_dehaze(p.hazy);
    CHECK(a.data() == b.data());
}

TEST_CASE("dark channel never exceeds the per-pixel channel minimum") {
    ScenePair p = make_scene_pair(9, 32, 32, HazeProfile::outdoor);
    DepthMap d = dark_channel(p.hazy, 5);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            float cm = 1e30f;
            for (int c = 0; c < 3; ++c) cm = std::min(cm, p.hazy.at(0, c, y, x));
            CHECK(d.at(y, x) <= cm);
        }
}
