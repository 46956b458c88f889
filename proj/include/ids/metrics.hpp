#ifndef IDS_METRICS_HPP
#define IDS_METRICS_HPP

#include "ids/tensor.hpp"

#include <string>
#include <vector>

namespace ids {

struct SsimConfig {
    int window = 11;
    float sigma = 1.5f;
    float dynamic_range = 1.0f;  // L
    float c1() const { return (0.01f * dynamic_range) * (0.01f * dynamic_range); }
    float c2() const { return (0.03f * dynamic_range) * (0.03f * dynamic_range); }
};

struct EvalRecord {
    std::string image;
    double psnr_db = 0.0;
    double ssim = 0.0;
};

struct EvalReport {
    std::vector<EvalRecord> per_image;
    double mean_psnr_db = 0.0;
    double mean_ssim = 0.0;
    void finalize();
    void write_tsv(const std::string& path) const;
};

double psnr(const Tensor& x, const Tensor& y, double cap = 100.0);

// Valid-region (unpadded) Gaussian-windowed SSIM, per channel then averaged.
double ssim(const Tensor& x, const Tensor& y, const SsimConfig& cfg = {});

Tensor mse_loss(const Tensor& pred, const Tensor& target);
Tensor ssim_loss(const Tensor& pred, const Tensor& target, const SsimConfig& cfg = {});

// Frozen seeded 3-layer conv stack (3->16->32->32, stride 2, leaky_relu 0.2).
// Gradients flow through to the input; the weights never train.
Tensor perceptual_features(const Tensor& x);

Tensor content_loss(const Tensor& pred, const Tensor& target,
                    float perceptual_weight = 0.01f);

// The frozen conv stack behind perceptual_features, for independent
// re-evaluation by the verification harness.
struct PerceptualStack {
    std::vector<Tensor> weights;
    std::vector<Tensor> biases;
};
const PerceptualStack& perceptual_stack();

struct AdversarialLosses {
    Tensor loss_d;
    Tensor loss_g;
};
AdversarialLosses adversarial_losses(const Tensor& d_real, const Tensor& d_fake);

}  // namespace ids

#endif
