#ifndef IDS_HAZEGEN_HPP
#define IDS_HAZEGEN_HPP

// Synthetic haze: I = J*t + A*(1-t) with t = exp(-beta * depth), plus a
// procedural scene generator standing in for real depth datasets.

#include "ids/tensor.hpp"

#include <string>
#include <vector>

namespace ids {

// H x W nonnegative depth map, row-major.
struct DepthMap {
    int h = 0, w = 0;
    std::vector<float> v;
    float& at(int y, int x) { return v[size_t(y) * w + x]; }
    float at(int y, int x) const { return v[size_t(y) * w + x]; }
};

struct ScatteringParams {
    float beta = 1.0f;          // extinction coefficient, > 0
    float a_rgb[3] = {1, 1, 1}; // atmospheric light per channel, in (0,1]
    DepthMap depth;
};

struct ScenePair {
    Tensor clear;  // 1x3xHxW in [0,1]
    Tensor hazy;   // apply_scattering(clear, params)
    ScatteringParams params;
    std::uint64_t seed = 0;
};

enum class HazeProfile { indoor, outdoor };

DepthMap transmission_from_depth(const DepthMap& depth, float beta);
Tensor apply_scattering(const Tensor& clear, const DepthMap& t, const float a_rgb[3]);
Tensor invert_scattering(const Tensor& hazy, const DepthMap& t, const float a_rgb[3],
                         float t_floor = 0.1f);

// Uniform draws of (beta, A) in the profile's range; A is a single gray value
// replicated across channels. Same seed, same draws.
ScatteringParams sample_scattering_params(HazeProfile profile, std::uint64_t seed);

void generate_scene(std::uint64_t seed, int h, int w, Tensor& radiance, DepthMap& depth);

ScenePair make_scene_pair(std::uint64_t seed, int h, int w, HazeProfile profile);

// Writes {dir}/{split}/{seed:06}_clear.png and _hazy.png for each pair plus
// {dir}/params.tsv (seed, beta, A).
void write_dataset(const std::string& dir, const std::vector<ScenePair>& train,
                   const std::vector<ScenePair>& val);

}  // namespace ids

#endif
