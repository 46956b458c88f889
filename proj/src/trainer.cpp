#include "ids/trainer.hpp"

#include "ids/image_io.hpp"
#include "ids/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace ids {

namespace {

std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over the pair; decorrelates per-epoch streams.
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

void check_finite_loss(double v, const std::string& module) {
    if (!std::isfinite(v))
        throw std::runtime_error("non-finite loss in module '" + module + "'");
}

Tensor stack_batch(const std::vector<Tensor>& samples) {
    const Shape s0 = samples.front().shape();
    Shape out{int(samples.size()) * s0.n, s0.c, s0.h, s0.w};
    std::vector<float> v;
    v.reserve(static_cast<std::size_t>(out.numel()));
    for (const auto& t : samples) v.insert(v.end(), t.data().begin(), t.data().end());
    return Tensor::from_data(out, std::move(v));
}

Tensor three_scale_mse(const BranchOutputs& o, const Tensor& clear,
                       const Tensor& clear_mid, const Tensor& clear_coarse) {
    return add(add(mse_loss(o.out_coarse, clear_coarse), mse_loss(o.out_mid, clear_mid)),
               mse_loss(o.out_fine, clear));
}

Tensor three_scale_ssim(const BranchOutputs& o, const Tensor& clear,
                        const Tensor& clear_mid, const Tensor& clear_coarse) {
    return add(add(ssim_loss(o.out_coarse, clear_coarse), ssim_loss(o.out_mid, clear_mid)),
               ssim_loss(o.out_fine, clear));
}

// ---- checkpoint primitives -------------------------------------------------

constexpr char kMagic[8] = {'I', 'D', 'S', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeI64 = 1;

struct ManifestEntry {
    std::string name;
    std::uint8_t dtype = kDtypeF32;
    Shape shape;
};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint truncated");
    return v;
}

void write_manifest(std::ostream& os, const std::vector<ManifestEntry>& entries) {
    write_pod<std::uint64_t>(os, entries.size());
    for (const auto& e : entries) {
        write_pod<std::uint32_t>(os, std::uint32_t(e.name.size()));
        os.write(e.name.data(), std::streamsize(e.name.size()));
        write_pod(os, e.dtype);
        write_pod<std::int32_t>(os, e.shape.n);
        write_pod<std::int32_t>(os, e.shape.c);
        write_pod<std::int32_t>(os, e.shape.h);
        write_pod<std::int32_t>(os, e.shape.w);
    }
}

std::vector<ManifestEntry> read_manifest(std::istream& is) {
    const auto count = read_pod<std::uint64_t>(is);
    if (count > 1u << 20) throw std::runtime_error("checkpoint manifest implausibly large");
    std::vector<ManifestEntry> entries(count);
    for (auto& e : entries) {
        const auto len = read_pod<std::uint32_t>(is);
        e.name.resize(len);
        is.read(e.name.data(), len);
        if (!is) throw std::runtime_error("checkpoint truncated");
        e.dtype = read_pod<std::uint8_t>(is);
        e.shape.n = read_pod<std::int32_t>(is);
        e.shape.c = read_pod<std::int32_t>(is);
        e.shape.h = read_pod<std::int32_t>(is);
        e.shape.w = read_pod<std::int32_t>(is);
    }
    return entries;
}

void write_f32(std::ostream& os, const std::vector<float>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             std::streamsize(v.size() * sizeof(float)));
}

void read_f32(std::istream& is, std::vector<float>& v, std::int64_t count) {
    v.resize(static_cast<std::size_t>(count));
    is.read(reinterpret_cast<char*>(v.data()), std::streamsize(count * sizeof(float)));
    if (!is) throw std::runtime_error("checkpoint truncated");
}

}  // namespace

// ---- config ----------------------------------------------------------------

TrainConfig TrainConfig::desk_preset(Scheme scheme) {
    TrainConfig cfg;
    cfg.scheme = scheme;
    cfg.batch_size = 4;
    cfg.patch = 48;
    if (scheme == Scheme::hard) {
        cfg.epochs = 200;
        cfg.hard_decay_every = 50;
    } else {
        cfg.epochs = 100;
    }
    return cfg;
}

TrainConfig TrainConfig::paper_profile(Scheme scheme) {
    TrainConfig cfg;
    cfg.scheme = scheme;
    cfg.batch_size = 10;
    cfg.patch = 180;
    if (scheme == Scheme::hard) {
        cfg.epochs = 700;
        cfg.hard_decay_every = 120;
    } else {
        cfg.epochs = 100;
    }
    return cfg;
}

float lr_schedule(const TrainConfig& cfg, int epoch) {
    if (epoch < 0) throw std::runtime_error("lr_schedule: negative epoch");
    int halvings = 0;
    if (cfg.scheme == Scheme::hard) {
        halvings = epoch / cfg.hard_decay_every;
    } else {
        for (int m : cfg.soft_milestones)
            if (epoch >= m) ++halvings;
    }
    return cfg.lr0 * std::pow(0.5f, float(halvings));
}

// ---- Adam ------------------------------------------------------------------

void adam_step(const NamedParams& params, AdamState& state, float lr,
               const TrainConfig& cfg) {
    for (const auto& [name, tensor] : params) {
        Tensor t = tensor;
        const std::size_t n = static_cast<std::size_t>(t.numel());
        AdamSlot& slot = state.slots[name];
        if (slot.m.empty()) {
            slot.m.assign(n, 0.0f);
            slot.v.assign(n, 0.0f);
        } else if (slot.m.size() != n) {
            throw std::runtime_error("adam_step: state size mismatch for " + name);
        }
        slot.t += 1;
        const double bc1 = 1.0 - std::pow(double(cfg.beta1), double(slot.t));
        const double bc2 = 1.0 - std::pow(double(cfg.beta2), double(slot.t));
        const bool has_grad = !t.grad().empty();
        auto& data = t.data();
        for (std::size_t i = 0; i < n; ++i) {
            const float g = has_grad ? t.grad()[i] : 0.0f;
            slot.m[i] = cfg.beta1 * slot.m[i] + (1.0f - cfg.beta1) * g;
            slot.v[i] = cfg.beta2 * slot.v[i] + (1.0f - cfg.beta2) * g * g;
            const double mhat = double(slot.m[i]) / bc1;
            const double vhat = double(slot.v[i]) / bc2;
            data[i] = float(double(data[i]) - double(lr) * mhat / (std::sqrt(vhat) + double(cfg.eps)));
            if (!std::isfinite(data[i]))
                throw std::runtime_error("non-finite parameter after update: " + name);
        }
    }
}

NamedParams named_params_with_prefix(const IdsModel& model, const std::string& prefix,
                                     bool invert) {
    NamedParams out;
    for (const auto& [name, t] : model.params) {
        const bool match = name.rfind(prefix, 0) == 0;
        if (match != invert) out.emplace_back(name, t);
    }
    return out;
}

// ---- data ------------------------------------------------------------------

Dataset load_dataset(const std::string& dir) {
    if (!fs::is_directory(dir)) throw std::runtime_error("no such dataset directory: " + dir);
    std::vector<std::string> stems;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        const std::string tag = "_hazy.png";
        if (name.size() > tag.size() &&
            name.compare(name.size() - tag.size(), tag.size(), tag) == 0)
            stems.push_back(name.substr(0, name.size() - tag.size()));
    }
    std::sort(stems.begin(), stems.end());
    Dataset ds;
    for (const auto& stem : stems) {
        const std::string hazy_path = dir + "/" + stem + "_hazy.png";
        const std::string clear_path = dir + "/" + stem + "_clear.png";
        if (!fs::exists(clear_path))
            throw std::runtime_error("missing clear counterpart for " + hazy_path);
        ds.pairs.emplace_back(read_png(hazy_path), read_png(clear_path));
    }
    return ds;
}

void augment_and_crop(const Tensor& hazy, const Tensor& clear, int patch,
                      std::mt19937& rng, Tensor& hazy_out, Tensor& clear_out) {
    const Shape s = hazy.shape();
    if (!(clear.shape() == s)) throw std::runtime_error("augment_and_crop: pair shape mismatch");
    if (patch > s.h || patch > s.w) throw std::runtime_error("augment_and_crop: patch too large");
    const int x0 = int(rng() % std::uint32_t(s.w - patch + 1));
    const int y0 = int(rng() % std::uint32_t(s.h - patch + 1));
    const bool hflip = (rng() & 1u) != 0;
    const bool vflip = (rng() & 1u) != 0;

    auto emit = [&](const Tensor& src, Tensor& dst) {
        dst = Tensor::zeros(Shape{s.n, s.c, patch, patch});
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c)
                for (int y = 0; y < patch; ++y)
                    for (int x = 0; x < patch; ++x) {
                        const int sy = y0 + (vflip ? patch - 1 - y : y);
                        const int sx = x0 + (hflip ? patch - 1 - x : x);
                        dst.at(n, c, y, x) = src.at(n, c, sy, sx);
                    }
    };
    emit(hazy, hazy_out);
    emit(clear, clear_out);
}

// ---- steps -----------------------------------------------------------------

StepLosses hard_ids_step(IdsModel& model, const Tensor& hazy, const Tensor& clear,
                         AdamState& adam, float lr, const TrainConfig& cfg) {
    if (model.config.handoff != HandoffMode::image)
        throw std::runtime_error("hard_ids_step requires image handoff mode");
    const Shape s = hazy.shape();
    const Tensor clear_mid = bilinear_resize(clear, s.h / 2, s.w / 2);
    const Tensor clear_coarse = bilinear_resize(clear, s.h / 4, s.w / 4);
    StepLosses losses;

    // (1) MSE branch on its three scale losses; image handoffs detached so
    // each stage's gradient stays inside that stage.
    model.zero_all_grads();
    auto mo = branch_forward(hazy, model, "mse", /*detach_handoffs=*/true);
    Tensor lm = three_scale_mse(mo, clear, clear_mid, clear_coarse);
    losses.mse_branch = lm.item();
    check_finite_loss(losses.mse_branch, "mse branch");
    backward(lm);
    adam_step(named_params_with_prefix(model, "mse."), adam, lr, cfg);

    // (2) SSIM branch likewise.
    model.zero_all_grads();
    auto so = branch_forward(hazy, model, "ssim", /*detach_handoffs=*/true);
    Tensor ls = three_scale_ssim(so, clear, clear_mid, clear_coarse);
    losses.ssim_branch = ls.item();
    check_finite_loss(losses.ssim_branch, "ssim branch");
    backward(ls);
    adam_step(named_params_with_prefix(model, "ssim."), adam, lr, cfg);

    // (3) Branch outputs delivered with updated weights, then frozen.
    Tensor h_mse = branch_forward(hazy, model, "mse", true).handoff_fine.detach();
    Tensor h_ssim = branch_forward(hazy, model, "ssim", true).handoff_fine.detach();
    Tensor fused = fusion_forward(hazy, h_mse, h_ssim, model);

    model.zero_all_grads();
    Tensor d_real = discriminator_forward(clear, model);
    Tensor d_fake_frozen = discriminator_forward(fused.detach(), model);
    auto adv = adversarial_losses(d_real, d_fake_frozen);
    losses.d = adv.loss_d.item();
    check_finite_loss(losses.d, "discriminator");
    backward(adv.loss_d);
    adam_step(named_params_with_prefix(model, "disc."), adam, lr, cfg);

    // (4) Fusion on content + adversarial generator loss (updated D).
    model.zero_all_grads();
    Tensor lg = bce_with_logits(discriminator_forward(fused, model), 1.0f);
    Tensor lc = content_loss(fused, clear);
    losses.content = lc.item();
    losses.g = lg.item();
    check_finite_loss(losses.content + losses.g, "fusion");
    backward(add(lc, scale(lg, cfg.adv_weight)));
    adam_step(named_params_with_prefix(model, "fusion."), adam, lr, cfg);
    return losses;
}

StepLosses soft_ids_step(IdsModel& model, const Tensor& hazy, const Tensor& clear,
                         AdamState& adam, float lr, const TrainConfig& cfg) {
    if (model.config.handoff != HandoffMode::feature)
        throw std::runtime_error("soft_ids_step requires feature handoff mode");
    const Shape s = hazy.shape();
    const Tensor clear_mid = bilinear_resize(clear, s.h / 2, s.w / 2);
    const Tensor clear_coarse = bilinear_resize(clear, s.h / 4, s.w / 4);
    StepLosses losses;

    auto mo = branch_forward(hazy, model, "mse");
    auto so = branch_forward(hazy, model, "ssim");
    Tensor fused = fusion_forward(hazy, mo.handoff_fine, so.handoff_fine, model);

    Tensor lm = three_scale_mse(mo, clear, clear_mid, clear_coarse);
    Tensor ls = three_scale_ssim(so, clear, clear_mid, clear_coarse);
    Tensor lc = content_loss(fused, clear);
    Tensor lg = bce_with_logits(discriminator_forward(fused, model), 1.0f);
    Tensor total = add(add(lm, ls), add(lc, scale(lg, cfg.adv_weight)));
    losses.mse_branch = lm.item();
    losses.ssim_branch = ls.item();
    losses.content = lc.item();
    losses.g = lg.item();
    check_finite_loss(total.item(), "generator");
    model.zero_all_grads();
    backward(total);
    adam_step(named_params_with_prefix(model, "disc.", /*invert=*/true), adam, lr, cfg);

    model.zero_all_grads();
    Tensor d_real = discriminator_forward(clear, model);
    Tensor d_fake = discriminator_forward(fused.detach(), model);
    auto adv = adversarial_losses(d_real, d_fake);
    losses.d = adv.loss_d.item();
    check_finite_loss(losses.d, "discriminator");
    backward(adv.loss_d);
    adam_step(named_params_with_prefix(model, "disc."), adam, lr, cfg);
    return losses;
}

// ---- checkpoints -----------------------------------------------------------

void save_checkpoint(const std::string& path, const IdsModel& model,
                     const AdamState& adam, std::int64_t epoch,
                     const std::string& rng_blob) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
    os.write(kMagic, sizeof(kMagic));

    std::vector<ManifestEntry> params;
    for (const auto& [name, t] : model.params)
        params.push_back({name, kDtypeF32, t.shape()});
    write_manifest(os, params);
    for (const auto& [name, t] : model.params) write_f32(os, t.data());

    std::vector<ManifestEntry> opt;
    for (const auto& [name, t] : model.params) {
        opt.push_back({"m." + name, kDtypeF32, t.shape()});
        opt.push_back({"v." + name, kDtypeF32, t.shape()});
        opt.push_back({"t." + name, kDtypeI64, Shape{1, 1, 1, 1}});
    }
    write_manifest(os, opt);
    for (const auto& [name, t] : model.params) {
        auto it = adam.slots.find(name);
        const std::size_t n = static_cast<std::size_t>(t.numel());
        const AdamSlot* slot = it != adam.slots.end() ? &it->second : nullptr;
        if (slot && !slot->m.empty()) {
            write_f32(os, slot->m);
            write_f32(os, slot->v);
        } else {
            std::vector<float> zeros(n, 0.0f);
            write_f32(os, zeros);
            write_f32(os, zeros);
        }
        write_pod<std::int64_t>(os, slot ? slot->t : 0);
    }

    write_pod<std::int64_t>(os, epoch);
    write_pod<std::uint64_t>(os, rng_blob.size());
    os.write(rng_blob.data(), std::streamsize(rng_blob.size()));
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

CheckpointMeta load_checkpoint(const std::string& path, IdsModel& model,
                               AdamState& adam) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("bad checkpoint magic in " + path);

    auto params = read_manifest(is);
    if (params.size() != model.params.size())
        throw std::runtime_error("checkpoint parameter count does not match model");
    for (const auto& e : params) {
        auto it = model.params.find(e.name);
        if (it == model.params.end())
            throw std::runtime_error("unknown tensor name in checkpoint: " + e.name);
        if (!(it->second.shape() == e.shape) || e.dtype != kDtypeF32)
            throw std::runtime_error("checkpoint shape mismatch for " + e.name);
    }
    for (const auto& e : params) read_f32(is, model.params.at(e.name).data(), e.shape.numel());

    auto opt = read_manifest(is);
    adam.slots.clear();
    for (const auto& e : opt) {
        if (e.name.size() < 3 || e.name[1] != '.')
            throw std::runtime_error("unknown optimizer entry: " + e.name);
        const std::string base = e.name.substr(2);
        if (model.params.find(base) == model.params.end())
            throw std::runtime_error("unknown tensor name in checkpoint: " + e.name);
        AdamSlot& slot = adam.slots[base];
        if (e.name[0] == 'm') read_f32(is, slot.m, e.shape.numel());
        else if (e.name[0] == 'v') read_f32(is, slot.v, e.shape.numel());
        else if (e.name[0] == 't') slot.t = read_pod<std::int64_t>(is);
        else throw std::runtime_error("unknown optimizer entry: " + e.name);
    }

    CheckpointMeta meta;
    meta.epoch = read_pod<std::int64_t>(is);
    const auto blob_len = read_pod<std::uint64_t>(is);
    meta.rng_blob.resize(blob_len);
    is.read(meta.rng_blob.data(), std::streamsize(blob_len));
    if (!is) throw std::runtime_error("checkpoint truncated");
    return meta;
}

// ---- loop ------------------------------------------------------------------

namespace {

void evaluate_model(const IdsModel& model, const Dataset& val_set, double& out_psnr,
                    double& out_ssim) {
    double sum_psnr = 0.0, sum_ssim = 0.0;
    for (const auto& [hazy, clear] : val_set.pairs) {
        Tensor pred = dehaze_image(hazy, model);
        sum_psnr += psnr(pred, clear);
        sum_ssim += ssim(pred, clear);
    }
    const double n = double(val_set.pairs.size());
    out_psnr = n > 0 ? sum_psnr / n : 0.0;
    out_ssim = n > 0 ? sum_ssim / n : 0.0;
}

}  // namespace

TrainResult train(IdsModel& model, const TrainConfig& cfg, const Dataset& train_set,
                  const Dataset& val_set, const std::string& out_dir,
                  const std::string& resume_path) {
    if (train_set.pairs.empty()) throw std::runtime_error("empty training set");
    if (cfg.patch % 4 != 0 || cfg.patch < 32)
        throw std::runtime_error("patch must be divisible by 4 and >= 32");
    fs::create_directories(out_dir);

    AdamState adam;
    std::int64_t start_epoch = 0;
    std::mt19937 master(std::uint32_t(cfg.seed ^ (cfg.seed >> 32) ^ 0x510bca11u));
    if (!resume_path.empty()) {
        CheckpointMeta meta = load_checkpoint(resume_path, model, adam);
        start_epoch = meta.epoch;
        std::istringstream ss(meta.rng_blob);
        ss >> master;
        if (!ss) throw std::runtime_error("bad RNG state in checkpoint");
    }

    TrainResult result;
    result.log_path = out_dir + "/log.tsv";
    result.final_checkpoint = out_dir + "/final.ckpt";
    result.best_checkpoint = out_dir + "/best.ckpt";
    std::ofstream log(result.log_path,
                      start_epoch > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write log: " + result.log_path);
    if (start_epoch == 0)
        log << "epoch\tlr\tloss_mse_branch\tloss_ssim_branch\tloss_content\tloss_G\t"
               "loss_D\tval_psnr\tval_ssim\n";

    result.best_val_psnr = -1.0;
    const std::size_t n_train = train_set.pairs.size();

    for (std::int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const float lr = lr_schedule(cfg, int(epoch));
        std::mt19937 rng(std::uint32_t(mix64(cfg.seed, std::uint64_t(epoch))));

        std::vector<std::size_t> order(n_train);
        for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
        for (std::size_t i = n_train; i > 1; --i)
            std::swap(order[i - 1], order[rng() % std::uint32_t(i)]);

        StepLosses sum;
        int steps = 0;
        for (std::size_t b = 0; b < n_train; b += std::size_t(cfg.batch_size)) {
            const std::size_t end = std::min(n_train, b + std::size_t(cfg.batch_size));
            std::vector<Tensor> hs, cs;
            for (std::size_t i = b; i < end; ++i) {
                const auto& [hazy, clear] = train_set.pairs[order[i]];
                Tensor hc, cc;
                augment_and_crop(hazy, clear, cfg.patch, rng, hc, cc);
                hs.push_back(hc);
                cs.push_back(cc);
            }
            Tensor hazy_batch = stack_batch(hs);
            Tensor clear_batch = stack_batch(cs);
            StepLosses l = cfg.scheme == Scheme::hard
                               ? hard_ids_step(model, hazy_batch, clear_batch, adam, lr, cfg)
                               : soft_ids_step(model, hazy_batch, clear_batch, adam, lr, cfg);
            sum.mse_branch += l.mse_branch;
            sum.ssim_branch += l.ssim_branch;
            sum.content += l.content;
            sum.g += l.g;
            sum.d += l.d;
            ++steps;
        }
        master.discard(1);

        double val_psnr = 0.0, val_ssim = 0.0;
        evaluate_model(model, val_set, val_psnr, val_ssim);
        const double inv = steps > 0 ? 1.0 / steps : 0.0;
        log << epoch << '\t' << lr << '\t' << sum.mse_branch * inv << '\t'
            << sum.ssim_branch * inv << '\t' << sum.content * inv << '\t' << sum.g * inv
            << '\t' << sum.d * inv << '\t' << val_psnr << '\t' << val_ssim << '\n';
        log.flush();

        std::ostringstream blob;
        blob << master;
        if (val_psnr > result.best_val_psnr) {
            result.best_val_psnr = val_psnr;
            save_checkpoint(result.best_checkpoint, model, adam, epoch + 1, blob.str());
        }
        result.final_val_psnr = val_psnr;
        result.final_val_ssim = val_ssim;
        result.epochs_run = int(epoch) + 1;
    }

    std::ostringstream blob;
    blob << master;
    save_checkpoint(result.final_checkpoint, model, adam, cfg.epochs, blob.str());
    return result;
}

}  // namespace ids
