#ifndef IDS_NET_HPP
#define IDS_NET_HPP

// The IDS dehazing network: two multi-scale branches (MSE- and
// SSIM-supervised), a FusionNet merging both with the hazy input, and a
// patch discriminator. Parameters live in a named registry so the trainer
// and checkpoints can address them uniformly.

#include "ids/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace ids {

enum class DepthPreset { shadow, medium, deep, desk };
enum class HandoffMode { image, feature };

struct StageConfig {
    int rdb_count = 2;
    int conv_count = 2;
};

struct NetworkConfig {
    DepthPreset preset = DepthPreset::desk;
    StageConfig coarse, mid, fine, fusion;
    int growth = 16;         // G: dense-layer growth channels
    int base_channels = 16;  // C0
    int dense_layers = 2;    // dense convs per RDB
    HandoffMode handoff = HandoffMode::feature;

    static NetworkConfig from_preset(DepthPreset preset, HandoffMode handoff);
    static NetworkConfig from_preset_name(const std::string& name, HandoffMode handoff);
    std::string preset_name() const;
};

// Named parameter registry; ordered map keeps serialization deterministic.
using ParamMap = std::map<std::string, Tensor>;

struct IdsModel {
    NetworkConfig config;
    ParamMap params;

    std::vector<Tensor> generator_params() const;      // branches + fusion
    std::vector<Tensor> discriminator_params() const;
    std::vector<Tensor> branch_params(const std::string& branch) const;
    std::vector<Tensor> stage_params(const std::string& branch, const std::string& stage) const;
    std::vector<Tensor> fusion_params() const;
    std::int64_t parameter_count() const;
    void zero_all_grads();
};

IdsModel build_network(const NetworkConfig& cfg, std::uint64_t seed);

// One residual dense block: dense 3x3 convs with leaky_relu(0.2), 1x1 local
// fusion, residual add of the block input.
Tensor rdb_forward(const Tensor& x, const IdsModel& model, const std::string& prefix);

struct BranchOutputs {
    Tensor out_coarse;  // 1x3xH/4xW/4
    Tensor out_mid;     // 1x3xH/2xW/2
    Tensor out_fine;    // 1x3xHxW
    Tensor penultimate; // feature map before the fine image head
    Tensor handoff_fine; // what the fusion stage consumes (image or feature)
};

// detach_handoffs severs the inter-stage links (hard IDS isolated updates).
BranchOutputs branch_forward(const Tensor& hazy, const IdsModel& model,
                             const std::string& branch, bool detach_handoffs = false);

// clamp_output: clamp to [0,1] at inference; losses see the unclamped value.
Tensor fusion_forward(const Tensor& hazy, const Tensor& mse_handoff,
                      const Tensor& ssim_handoff, const IdsModel& model,
                      bool clamp_output = false);

Tensor discriminator_forward(const Tensor& img, const IdsModel& model);

// Full-model inference on an arbitrary-size image: reflect-pads H and W to
// the next multiple of 4, runs both branches plus the fusion stage (clamped),
// and crops back to the original size.
Tensor dehaze_image(const Tensor& hazy, const IdsModel& model);

}  // namespace ids

#endif
