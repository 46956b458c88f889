#include "ids/hazegen.hpp"

#include "ids/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>

namespace ids {

namespace {

double uniform(std::mt19937& rng, double lo, double hi) {
    // 32 random bits -> [0,1); avoids std::uniform_real_distribution so the
    // draw sequence is pinned by us, not the standard library
    const double u = double(rng()) / 4294967296.0;
    return lo + (hi - lo) * u;
}

}  // namespace

DepthMap transmission_from_depth(const DepthMap& depth, float beta) {
    if (beta <= 0.0f) throw std::invalid_argument("transmission_from_depth: beta must be > 0");
    DepthMap t;
    t.h = depth.h;
    t.w = depth.w;
    t.v.resize(depth.v.size());
    for (size_t i = 0; i < depth.v.size(); ++i) {
        if (depth.v[i] < 0.0f)
            throw std::invalid_argument("transmission_from_depth: negative depth at index " +
                                        std::to_string(i));
        t.v[i] = std::exp(-beta * depth.v[i]);
    }
    return t;
}

Tensor apply_scattering(const Tensor& clear, const DepthMap& t, const float a_rgb[3]) {
    const Shape s = clear.shape();
    if (s.h != t.h || s.w != t.w)
        throw std::invalid_argument("apply_scattering: image " + s.str() + " vs transmission " +
                                    std::to_string(t.h) + "x" + std::to_string(t.w));
    Tensor out = Tensor::zeros(s);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const float a = a_rgb[c % 3];
            for (int y = 0; y < s.h; ++y)
                for (int x = 0; x < s.w; ++x) {
                    const float tv = t.at(y, x);
                    const float v = clear.at(n, c, y, x) * tv + a * (1.0f - tv);
                    out.at(n, c, y, x) = std::clamp(v, 0.0f, 1.0f);
                }
        }
    return out;
}

Tensor invert_scattering(const Tensor& hazy, const DepthMap& t, const float a_rgb[3],
                         float t_floor) {
    const Shape s = hazy.shape();
    if (s.h != t.h || s.w != t.w)
        throw std::invalid_argument("invert_scattering: image " + s.str() + " vs transmission " +
                                    std::to_string(t.h) + "x" + std::to_string(t.w));
    Tensor out = Tensor::zeros(s);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const float a = a_rgb[c % 3];
            for (int y = 0; y < s.h; ++y)
                for (int x = 0; x < s.w; ++x) {
                    const float tv = std::max(t.at(y, x), t_floor);
                    const float j = (hazy.at(n, c, y, x) - a * (1.0f - tv)) / tv;
                    out.at(n, c, y, x) = std::clamp(j, 0.0f, 1.0f);
                }
        }
    return out;
}

ScatteringParams sample_scattering_params(HazeProfile profile, std::uint64_t seed) {
    std::mt19937 rng(std::uint32_t(seed ^ (seed >> 32) ^ 0x9e3779b9u));
    ScatteringParams p;
    double a;
    if (profile == HazeProfile::indoor) {
        p.beta = float(uniform(rng, 0.6, 1.8));
        a = uniform(rng, 0.7, 1.0);
    } else {
        p.beta = float(uniform(rng, 0.04, 0.2));
        a = uniform(rng, 0.8, 1.0);
    }
    // single gray value replicated across channels
    p.a_rgb[0] = p.a_rgb[1] = p.a_rgb[2] = float(a);
    return p;
}

void generate_scene(std::uint64_t seed, int h, int w, Tensor& radiance, DepthMap& depth) {
    if (h < 16 || w < 16) throw std::invalid_argument("generate_scene: size must be >= 16");
    std::mt19937 rng(std::uint32_t(seed * 2654435761u ^ (seed >> 32)));

    radiance = Tensor::zeros({1, 3, h, w});
    depth.h = h;
    depth.w = w;
    depth.v.assign(size_t(h) * size_t(w), 3.0f);  // background at the far plane

    // background: smooth color gradient
    float c0[3], c1[3];
    for (int c = 0; c < 3; ++c) {
        c0[c] = float(uniform(rng, 0.1, 0.9));
        c1[c] = float(uniform(rng, 0.1, 0.9));
    }
    const bool horizontal = (rng() & 1u) != 0;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const float f = horizontal ? float(x) / float(w - 1) : float(y) / float(h - 1);
                radiance.at(0, c, y, x) = c0[c] * (1.0f - f) + c1[c] * f;
            }

    // 3..8 axis-aligned rectangles at distinct depth planes
    const int n_rect = 3 + int(rng() % 6);
    for (int r = 0; r < n_rect; ++r) {
        const int rw = std::max(3, int(uniform(rng, 0.1, 0.5) * w));
        const int rh = std::max(3, int(uniform(rng, 0.1, 0.5) * h));
        const int x0 = int(rng() % std::uint32_t(std::max(1, w - rw)));
        const int y0 = int(rng() % std::uint32_t(std::max(1, h - rh)));
        const float d = float(uniform(rng, 0.5, 2.8));
        float col[3];
        for (int c = 0; c < 3; ++c) col[c] = float(uniform(rng, 0.0, 1.0));
        // one channel pushed low so dark-channel statistics resemble real scenes
        col[rng() % 3] *= 0.15f;
        for (int y = y0; y < y0 + rh; ++y)
            for (int x = x0; x < x0 + rw; ++x) {
                for (int c = 0; c < 3; ++c) radiance.at(0, c, y, x) = col[c];
                depth.at(y, x) = d;
            }
    }

    // low-amplitude smooth texture
    const float ph1 = float(uniform(rng, 0.0, 6.283)), ph2 = float(uniform(rng, 0.0, 6.283));
    const float fr1 = float(uniform(rng, 2.0, 5.0)), fr2 = float(uniform(rng, 2.0, 5.0));
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const float tex = 0.02f * std::sin(fr1 * 6.2831853f * float(x) / float(w) + ph1 + float(c)) *
                                  std::cos(fr2 * 6.2831853f * float(y) / float(h) + ph2);
                radiance.at(0, c, y, x) = std::clamp(radiance.at(0, c, y, x) + tex, 0.0f, 1.0f);
            }
}

ScenePair make_scene_pair(std::uint64_t seed, int h, int w, HazeProfile profile) {
    ScenePair pair;
    pair.seed = seed;
    generate_scene(seed, h, w, pair.clear, pair.params.depth);
    ScatteringParams sampled = sample_scattering_params(profile, seed);
    pair.params.beta = sampled.beta;
    for (int c = 0; c < 3; ++c) pair.params.a_rgb[c] = sampled.a_rgb[c];
    DepthMap t = transmission_from_depth(pair.params.depth, pair.params.beta);
    pair.hazy = apply_scattering(pair.clear, t, pair.params.a_rgb);
    return pair;
}

void write_dataset(const std::string& dir, const std::vector<ScenePair>& train,
                   const std::vector<ScenePair>& val) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "train");
    fs::create_directories(fs::path(dir) / "val");

    auto write_split = [&](const char* split, const std::vector<ScenePair>& pairs) {
        for (const auto& p : pairs) {
            char name[64];
            std::snprintf(name, sizeof name, "%06llu", (unsigned long long)p.seed);
            const fs::path base = fs::path(dir) / split;
            write_png((base / (std::string(name) + "_clear.png")).string(), p.clear);
            write_png((base / (std::string(name) + "_hazy.png")).string(), p.hazy);
        }
    };
    write_split("train", train);
    write_split("val", val);

    std::ofstream tsv(fs::path(dir) / "params.tsv");
    if (!tsv) throw std::runtime_error("cannot write params.tsv under " + dir);
    tsv << "seed\tbeta\tA\n";
    auto rows = [&](const std::vector<ScenePair>& pairs) {
        for (const auto& p : pairs) {
            char line[128];
            std::snprintf(line, sizeof line, "%llu\t%.6f\t%.6f\n",
                          (unsigned long long)p.seed, double(p.params.beta), double(p.params.a_rgb[0]));
            tsv << line;
        }
    };
    rows(train);
    rows(val);
}

}  // namespace ids
