#ifndef IDS_TRAINER_HPP
#define IDS_TRAINER_HPP

// Training engine: Adam, the hard (isolated per-module) and soft (single
// global loss) update schemes, learning-rate schedules, paired augmentation,
// and binary checkpoints with bitwise-resumable state.

#include "ids/ids_net.hpp"
#include "ids/tensor.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace ids {

enum class Scheme { hard, soft };

struct TrainConfig {
    Scheme scheme = Scheme::soft;
    int batch_size = 4;
    int patch = 48;
    float lr0 = 1e-4f;
    float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
    float adv_weight = 5e-3f;
    int epochs = 100;
    int hard_decay_every = 50;             // hard scheme: lr *= 0.5 every N epochs
    std::vector<int> soft_milestones{60, 80, 90};  // soft scheme: halve at each
    std::uint64_t seed = 0;

    static TrainConfig desk_preset(Scheme scheme);
    static TrainConfig paper_profile(Scheme scheme);
};

float lr_schedule(const TrainConfig& cfg, int epoch);

// ---- Adam ------------------------------------------------------------------

struct AdamSlot {
    std::vector<float> m, v;
    std::int64_t t = 0;
};

struct AdamState {
    std::map<std::string, AdamSlot> slots;
};

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Bias-corrected Adam on the tensors' accumulated gradients. Parameters with
// no gradient buffer are treated as zero-gradient (state still advances).
void adam_step(const NamedParams& params, AdamState& state, float lr,
               const TrainConfig& cfg);

NamedParams named_params_with_prefix(const IdsModel& model, const std::string& prefix,
                                     bool invert = false);

// ---- data ------------------------------------------------------------------

struct Dataset {
    // (hazy, clear) image pairs, each 1x3xHxW in [0,1], sorted by filename.
    std::vector<std::pair<Tensor, Tensor>> pairs;
};

// Loads {stem}_hazy.png / {stem}_clear.png pairs from a directory.
Dataset load_dataset(const std::string& dir);

// Same random crop offset and the same horizontal/vertical flips applied to
// both images, so the pairing is preserved.
void augment_and_crop(const Tensor& hazy, const Tensor& clear, int patch,
                      std::mt19937& rng, Tensor& hazy_out, Tensor& clear_out);

// ---- steps -----------------------------------------------------------------

struct StepLosses {
    double mse_branch = 0.0;   // summed three-scale MSE loss of the MSE branch
    double ssim_branch = 0.0;  // summed three-scale SSIM loss of the SSIM branch
    double content = 0.0;
    double g = 0.0;
    double d = 0.0;
};

// Isolated updates: MSE branch, SSIM branch, then discriminator and fusion
// with the branch image outputs treated as fixed inputs. Throws on non-finite
// loss, naming the module.
StepLosses hard_ids_step(IdsModel& model, const Tensor& hazy, const Tensor& clear,
                         AdamState& adam, float lr, const TrainConfig& cfg);

// One generator update on the summed global loss (back-propagated end-to-end
// through feature handoffs), then one discriminator update.
StepLosses soft_ids_step(IdsModel& model, const Tensor& hazy, const Tensor& clear,
                         AdamState& adam, float lr, const TrainConfig& cfg);

// ---- checkpoints -----------------------------------------------------------

void save_checkpoint(const std::string& path, const IdsModel& model,
                     const AdamState& adam, std::int64_t epoch,
                     const std::string& rng_blob);

struct CheckpointMeta {
    std::int64_t epoch = 0;
    std::string rng_blob;
};

// Loads into an already-built model; throws on bad magic, truncation, or a
// tensor name/shape that does not match the model.
CheckpointMeta load_checkpoint(const std::string& path, IdsModel& model,
                               AdamState& adam);

// ---- loop ------------------------------------------------------------------

struct TrainResult {
    int epochs_run = 0;
    double final_val_psnr = 0.0, final_val_ssim = 0.0;
    double best_val_psnr = 0.0;
    std::string final_checkpoint, best_checkpoint, log_path;
};

// Trains to cfg.epochs, writing log.tsv, final.ckpt and best.ckpt under
// out_dir. If resume_path is non-empty, restores and continues from its epoch.
TrainResult train(IdsModel& model, const TrainConfig& cfg, const Dataset& train_set,
                  const Dataset& val_set, const std::string& out_dir,
                  const std::string& resume_path = "");

}  // namespace ids

#endif
