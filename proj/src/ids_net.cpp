#include "ids/ids_net.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace ids {

namespace {

double gauss(std::mt19937& rng) {
    // Box-Muller on raw 32-bit draws; avoids libstdc++ distribution
    // implementation details so results are portable bit-for-bit.
    const double u1 = (double(rng()) + 1.0) / 4294967297.0;
    const double u2 = double(rng()) / 4294967296.0;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

Tensor make_weight(std::mt19937& rng, int out_ch, int in_ch, int k, double stddev) {
    Shape s{out_ch, in_ch, k, k};
    std::vector<float> v(static_cast<std::size_t>(s.numel()));
    for (auto& x : v) x = float(stddev * gauss(rng));
    return Tensor::from_data(s, std::move(v), /*requires_grad=*/true);
}

Tensor make_bias(int out_ch) {
    return Tensor::zeros(Shape{1, out_ch, 1, 1}, /*requires_grad=*/true);
}

// Kaiming-normal std for leaky_relu(0.2): sqrt(2 / (1 + a^2) / fan_in).
double kaiming_std(int in_ch, int k) {
    const double fan_in = double(in_ch) * k * k;
    return std::sqrt(2.0 / (1.0 + 0.2 * 0.2) / fan_in);
}

void add_conv(ParamMap& p, std::mt19937& rng, const std::string& name,
              int in_ch, int out_ch, int k, double stddev = -1.0) {
    if (stddev < 0.0) stddev = kaiming_std(in_ch, k);
    p.emplace(name + ".w", make_weight(rng, out_ch, in_ch, k, stddev));
    p.emplace(name + ".b", make_bias(out_ch));
}

void add_rdb(ParamMap& p, std::mt19937& rng, const std::string& prefix,
             const NetworkConfig& cfg) {
    for (int j = 0; j < cfg.dense_layers; ++j)
        add_conv(p, rng, prefix + ".dense" + std::to_string(j),
                 cfg.base_channels + j * cfg.growth, cfg.growth, 3);
    add_conv(p, rng, prefix + ".fuse",
             cfg.base_channels + cfg.dense_layers * cfg.growth, cfg.base_channels, 1);
}

void add_stage(ParamMap& p, std::mt19937& rng, const std::string& prefix,
               const StageConfig& stage, const NetworkConfig& cfg,
               int in_ch, bool has_upsample, int handoff_ch) {
    if (has_upsample)
        add_conv(p, rng, prefix + ".up", handoff_ch, 4 * handoff_ch, 3);
    add_conv(p, rng, prefix + ".in", in_ch, cfg.base_channels, 3);
    for (int i = 0; i < stage.rdb_count; ++i)
        add_rdb(p, rng, prefix + ".rdb" + std::to_string(i), cfg);
    for (int k = 0; k + 1 < stage.conv_count; ++k)
        add_conv(p, rng, prefix + ".conv" + std::to_string(k),
                 cfg.base_channels, cfg.base_channels, 3);
    add_conv(p, rng, prefix + ".head", cfg.base_channels, 3, 3, 1e-3);
}

const Tensor& param(const IdsModel& m, const std::string& name) {
    auto it = m.params.find(name);
    if (it == m.params.end()) throw std::runtime_error("missing parameter: " + name);
    return it->second;
}

Tensor conv_named(const Tensor& x, const IdsModel& m, const std::string& name,
                  int stride = 1, int pad = 1) {
    return conv2d(x, param(m, name + ".w"), param(m, name + ".b"), stride, pad);
}

std::vector<Tensor> params_with_prefix(const IdsModel& m, const std::string& prefix) {
    std::vector<Tensor> out;
    for (const auto& [name, t] : m.params)
        if (name.rfind(prefix, 0) == 0) out.push_back(t);
    return out;
}

struct StageResult {
    Tensor out;     // 3-channel image at the stage's scale
    Tensor penult;  // features feeding the image head
};

// One scale sub-network: optional upsample of the incoming handoff, input
// conv, RDB stack, trailing plain convs, image head with residual from the
// hazy image at this scale (zero head weights => output equals hazy_scale).
StageResult stage_forward(const Tensor& hazy_scale, const Tensor* handoff,
                          const IdsModel& m, const std::string& prefix,
                          const StageConfig& stage) {
    Tensor x = hazy_scale;
    if (handoff) {
        Tensor up = pixel_shuffle(conv_named(*handoff, m, prefix + ".up"), 2);
        x = concat_channels({hazy_scale, up});
    }
    Tensor f = leaky_relu(conv_named(x, m, prefix + ".in"), 0.2f);
    for (int i = 0; i < stage.rdb_count; ++i)
        f = rdb_forward(f, m, prefix + ".rdb" + std::to_string(i));
    for (int k = 0; k + 1 < stage.conv_count; ++k)
        f = leaky_relu(conv_named(f, m, prefix + ".conv" + std::to_string(k)), 0.2f);
    Tensor out = add(conv_named(f, m, prefix + ".head"), hazy_scale);
    return {out, f};
}

}  // namespace

NetworkConfig NetworkConfig::from_preset(DepthPreset preset, HandoffMode handoff) {
    NetworkConfig cfg;
    cfg.preset = preset;
    cfg.handoff = handoff;
    switch (preset) {
        case DepthPreset::shadow:
            cfg.coarse = {4, 3}; cfg.mid = {6, 4}; cfg.fine = {8, 5}; cfg.fusion = {10, 6};
            break;
        case DepthPreset::medium:
            cfg.coarse = {5, 3}; cfg.mid = {7, 4}; cfg.fine = {9, 5}; cfg.fusion = {12, 6};
            break;
        case DepthPreset::deep:
            cfg.coarse = {6, 3}; cfg.mid = {8, 4}; cfg.fine = {10, 5}; cfg.fusion = {15, 6};
            break;
        case DepthPreset::desk:
            cfg.coarse = {2, 2}; cfg.mid = {2, 2}; cfg.fine = {2, 2}; cfg.fusion = {3, 3};
            break;
    }
    if (preset == DepthPreset::desk) {
        cfg.growth = 16; cfg.base_channels = 16; cfg.dense_layers = 2;
    } else {
        cfg.growth = 32; cfg.base_channels = 32; cfg.dense_layers = 4;
    }
    return cfg;
}

NetworkConfig NetworkConfig::from_preset_name(const std::string& name, HandoffMode handoff) {
    if (name == "shadow") return from_preset(DepthPreset::shadow, handoff);
    if (name == "medium") return from_preset(DepthPreset::medium, handoff);
    if (name == "deep") return from_preset(DepthPreset::deep, handoff);
    if (name == "desk") return from_preset(DepthPreset::desk, handoff);
    throw std::runtime_error("unknown preset: " + name);
}

std::string NetworkConfig::preset_name() const {
    switch (preset) {
        case DepthPreset::shadow: return "shadow";
        case DepthPreset::medium: return "medium";
        case DepthPreset::deep: return "deep";
        case DepthPreset::desk: return "desk";
    }
    return "desk";
}

IdsModel build_network(const NetworkConfig& cfg, std::uint64_t seed) {
    if (cfg.coarse.rdb_count < 1 || cfg.coarse.conv_count < 1 ||
        cfg.mid.rdb_count < 1 || cfg.mid.conv_count < 1 ||
        cfg.fine.rdb_count < 1 || cfg.fine.conv_count < 1 ||
        cfg.fusion.rdb_count < 1 || cfg.fusion.conv_count < 1)
        throw std::runtime_error("all stage counts must be >= 1");

    IdsModel m;
    m.config = cfg;
    std::mt19937 rng(std::uint32_t(seed ^ (seed >> 32) ^ 0x1d5a2f37u));
    const int h_ch = cfg.handoff == HandoffMode::image ? 3 : cfg.base_channels;

    for (const std::string branch : {"mse", "ssim"}) {
        add_stage(m.params, rng, branch + ".coarse", cfg.coarse, cfg, 3, false, 0);
        add_stage(m.params, rng, branch + ".mid", cfg.mid, cfg, 3 + h_ch, true, h_ch);
        add_stage(m.params, rng, branch + ".fine", cfg.fine, cfg, 3 + h_ch, true, h_ch);
    }
    add_stage(m.params, rng, "fusion", cfg.fusion, cfg, 3 + 2 * h_ch, false, 0);

    const int dc[5] = {3, 32, 64, 128, 1};
    for (int i = 0; i < 4; ++i)
        add_conv(m.params, rng, "disc.conv" + std::to_string(i), dc[i], dc[i + 1], 3);
    return m;
}

Tensor rdb_forward(const Tensor& x, const IdsModel& model, const std::string& prefix) {
    if (x.shape().c != model.config.base_channels)
        throw std::runtime_error("rdb_forward: channel count must equal base_channels");
    std::vector<Tensor> feats{x};
    Tensor cat = x;
    for (int j = 0; j < model.config.dense_layers; ++j) {
        Tensor g = leaky_relu(conv_named(cat, model, prefix + ".dense" + std::to_string(j)), 0.2f);
        feats.push_back(g);
        cat = concat_channels(feats);
    }
    Tensor fused = conv_named(cat, model, prefix + ".fuse", 1, 0);
    return add(fused, x);
}

BranchOutputs branch_forward(const Tensor& hazy, const IdsModel& model,
                             const std::string& branch, bool detach_handoffs) {
    const Shape s = hazy.shape();
    if (s.h % 4 != 0 || s.w % 4 != 0)
        throw std::runtime_error("branch_forward: H and W must be divisible by 4");
    const Tensor hazy_mid = bilinear_resize(hazy, s.h / 2, s.w / 2);
    const Tensor hazy_coarse = bilinear_resize(hazy, s.h / 4, s.w / 4);
    const bool feature = model.config.handoff == HandoffMode::feature;

    StageResult coarse = stage_forward(hazy_coarse, nullptr, model, branch + ".coarse",
                                       model.config.coarse);
    Tensor h1 = feature ? coarse.penult : coarse.out;
    if (detach_handoffs) h1 = h1.detach();
    StageResult mid = stage_forward(hazy_mid, &h1, model, branch + ".mid", model.config.mid);
    Tensor h2 = feature ? mid.penult : mid.out;
    if (detach_handoffs) h2 = h2.detach();
    StageResult fine = stage_forward(hazy, &h2, model, branch + ".fine", model.config.fine);

    BranchOutputs out;
    out.out_coarse = coarse.out;
    out.out_mid = mid.out;
    out.out_fine = fine.out;
    out.penultimate = fine.penult;
    out.handoff_fine = feature ? fine.penult : fine.out;
    return out;
}

Tensor fusion_forward(const Tensor& hazy, const Tensor& mse_handoff,
                      const Tensor& ssim_handoff, const IdsModel& model,
                      bool clamp_output) {
    if (mse_handoff.shape().h != hazy.shape().h || mse_handoff.shape().w != hazy.shape().w ||
        ssim_handoff.shape().h != hazy.shape().h || ssim_handoff.shape().w != hazy.shape().w)
        throw std::runtime_error("fusion_forward: inputs must be spatially aligned");
    Tensor x = concat_channels({hazy, mse_handoff, ssim_handoff});
    Tensor f = leaky_relu(conv_named(x, model, "fusion.in"), 0.2f);
    for (int i = 0; i < model.config.fusion.rdb_count; ++i)
        f = rdb_forward(f, model, "fusion.rdb" + std::to_string(i));
    for (int k = 0; k + 1 < model.config.fusion.conv_count; ++k)
        f = leaky_relu(conv_named(f, model, "fusion.conv" + std::to_string(k)), 0.2f);
    Tensor out = add(conv_named(f, model, "fusion.head"), hazy);
    if (clamp_output) {
        Tensor c = out.detach();
        for (auto& v : c.data()) v = std::clamp(v, 0.0f, 1.0f);
        return c;
    }
    return out;
}

Tensor discriminator_forward(const Tensor& img, const IdsModel& model) {
    if (img.shape().h < 32 || img.shape().w < 32)
        throw std::runtime_error("discriminator_forward: input must be at least 32x32");
    Tensor f = leaky_relu(conv_named(img, model, "disc.conv0", 2, 1), 0.2f);
    f = leaky_relu(conv_named(f, model, "disc.conv1", 2, 1), 0.2f);
    f = leaky_relu(conv_named(f, model, "disc.conv2", 2, 1), 0.2f);
    return conv_named(f, model, "disc.conv3", 1, 1);
}

Tensor dehaze_image(const Tensor& hazy, const IdsModel& model) {
    const Shape s = hazy.shape();
    const int ph = (4 - s.h % 4) % 4, pw = (4 - s.w % 4) % 4;
    Tensor in = hazy;
    if (ph || pw) {
        Shape ps{s.n, s.c, s.h + ph, s.w + pw};
        Tensor padded = Tensor::zeros(ps);
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c)
                for (int y = 0; y < ps.h; ++y) {
                    const int sy = y < s.h ? y : 2 * s.h - 2 - y;  // reflect
                    for (int x = 0; x < ps.w; ++x) {
                        const int sx = x < s.w ? x : 2 * s.w - 2 - x;
                        padded.at(n, c, y, x) = hazy.at(n, c, sy, sx);
                    }
                }
        in = padded;
    }
    auto mse_out = branch_forward(in, model, "mse", /*detach_handoffs=*/true);
    auto ssim_out = branch_forward(in, model, "ssim", /*detach_handoffs=*/true);
    Tensor fused = fusion_forward(in, mse_out.handoff_fine.detach(),
                                  ssim_out.handoff_fine.detach(), model,
                                  /*clamp_output=*/true);
    if (!ph && !pw) return fused;
    Tensor out = Tensor::zeros(s);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < s.h; ++y)
                for (int x = 0; x < s.w; ++x)
                    out.at(n, c, y, x) = fused.at(n, c, y, x);
    return out;
}

std::vector<Tensor> IdsModel::generator_params() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : params)
        if (name.rfind("disc.", 0) != 0) out.push_back(t);
    return out;
}

std::vector<Tensor> IdsModel::discriminator_params() const {
    return params_with_prefix(*this, "disc.");
}

std::vector<Tensor> IdsModel::branch_params(const std::string& branch) const {
    return params_with_prefix(*this, branch + ".");
}

std::vector<Tensor> IdsModel::stage_params(const std::string& branch,
                                           const std::string& stage) const {
    return params_with_prefix(*this, branch + "." + stage + ".");
}

std::vector<Tensor> IdsModel::fusion_params() const {
    return params_with_prefix(*this, "fusion.");
}

std::int64_t IdsModel::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

void IdsModel::zero_all_grads() {
    for (auto& [name, t] : params) t.zero_grad();
}

}  // namespace ids
