#ifndef IDS_DCP_HPP
#define IDS_DCP_HPP

// Dark-channel-prior baseline dehazer. No guided-filter refinement of the
// transmission map; block artifacts are expected and acceptable for a
// comparison baseline.

#include "ids/hazegen.hpp"
#include "ids/tensor.hpp"

namespace ids {

struct DcpConfig {
    int patch = 15;                  // odd, >= 3
    float omega = 0.95f;             // haze retention, (0,1]
    float t_floor = 0.1f;
    float airlight_fraction = 0.001f;
};

DepthMap dark_channel(const Tensor& img, int patch);

// Among the brightest dark-channel pixels, the one with the largest RGB sum;
// ties break to the smallest row-major index.
void estimate_atmospheric_light(const Tensor& img, const DepthMap& dark, float fraction,
                                float a_rgb[3]);

DepthMap estimate_transmission(const Tensor& img, const float a_rgb[3], const DcpConfig& cfg);

Tensor dcp_dehaze(const Tensor& img, const DcpConfig& cfg = {});

}  // namespace ids

#endif
