#include "ids/dcp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ids {

DepthMap dark_channel(const Tensor& img, int patch) {
    const Shape s = img.shape();
    if (patch % 2 == 0 || patch < 3)
        throw std::invalid_argument("dark_channel: patch must be odd and >= 3");
    if (patch > s.h || patch > s.w)
        throw std::invalid_argument("dark_channel: patch " + std::to_string(patch) +
                                    " larger than image " + s.str());
    const int r = patch / 2;

    // per-pixel channel minimum, then patch minimum with edge replication
    std::vector<float> chan_min(size_t(s.h) * s.w);
    for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
            float m = img.at(0, 0, y, x);
            for (int c = 1; c < s.c; ++c) m = std::min(m, img.at(0, c, y, x));
            chan_min[size_t(y) * s.w + x] = m;
        }

    DepthMap dark;
    dark.h = s.h;
    dark.w = s.w;
    dark.v.resize(chan_min.size());
    // two-pass separable min filter; clamped indices replicate the border
    std::vector<float> row_min(chan_min.size());
    for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
            float m = 1e30f;
            for (int dx = -r; dx <= r; ++dx)
                m = std::min(m, chan_min[size_t(y) * s.w + std::clamp(x + dx, 0, s.w - 1)]);
            row_min[size_t(y) * s.w + x] = m;
        }
    for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
            float m = 1e30f;
            for (int dy = -r; dy <= r; ++dy)
                m = std::min(m, row_min[size_t(std::clamp(y + dy, 0, s.h - 1)) * s.w + x]);
            dark.v[size_t(y) * s.w + x] = m;
        }
    return dark;
}

void estimate_atmospheric_light(const Tensor& img, const DepthMap& dark, float fraction,
                                float a_rgb[3]) {
    if (fraction <= 0.0f || fraction > 1.0f)
        throw std::invalid_argument("estimate_atmospheric_light: fraction must be in (0,1]");
    const Shape s = img.shape();
    const size_t count = dark.v.size();
    const size_t keep = std::min(count, size_t(std::ceil(double(fraction) * double(count))));

    std::vector<size_t> idx(count);
    std::iota(idx.begin(), idx.end(), size_t(0));
    // stable: equal dark values keep row-major order so ties are deterministic
    std::stable_sort(idx.begin(), idx.end(),
                     [&](size_t a, size_t b) { return dark.v[a] > dark.v[b]; });

    size_t best = idx[0];
    float best_sum = -1.0f;
    for (size_t i = 0; i < keep; ++i) {
        const size_t p = idx[i];
        const int y = int(p / size_t(s.w)), x = int(p % size_t(s.w));
        float sum = 0.0f;
        for (int c = 0; c < 3; ++c) sum += img.at(0, c, y, x);
        if (sum > best_sum || (sum == best_sum && p < best)) {
            best_sum = sum;
            best = p;
        }
    }
    const int y = int(best / size_t(s.w)), x = int(best % size_t(s.w));
    for (int c = 0; c < 3; ++c) a_rgb[c] = img.at(0, c, y, x);
}

DepthMap estimate_transmission(const Tensor& img, const float a_rgb[3], const DcpConfig& cfg) {
    const Shape s = img.shape();
    for (int c = 0; c < 3; ++c)
        if (a_rgb[c] <= 0.0f)
            throw std::invalid_argument("estimate_transmission: A must be > 0 per channel");

    Tensor norm = Tensor::zeros(s);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x)
                norm.at(0, c, y, x) = img.at(0, c, y, x) / a_rgb[c];

    DepthMap dark = dark_channel(norm, cfg.patch);
    DepthMap t;
    t.h = s.h;
    t.w = s.w;
    t.v.resize(dark.v.size());
    for (size_t i = 0; i < dark.v.size(); ++i)
        t.v[i] = std::clamp(1.0f - cfg.omega * dark.v[i], cfg.t_floor, 1.0f);
    return t;
}

Tensor dcp_dehaze(const Tensor& img, const DcpConfig& cfg) {
    DepthMap dark = dark_channel(img, cfg.patch);
    float a_rgb[3];
    estimate_atmospheric_light(img, dark, cfg.airlight_fraction, a_rgb);
    DepthMap t = estimate_transmission(img, a_rgb, cfg);
    return invert_scattering(img, t, a_rgb, cfg.t_floor);
}

}  // namespace ids
