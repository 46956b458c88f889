#include "ids/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>

namespace ids {

namespace {

std::vector<float> gaussian_window(int size, float sigma) {
    std::vector<float> w(size_t(size) * size);
    const int half = size / 2;
    double sum = 0.0;
    for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j) {
            const double dy = i - half, dx = j - half;
            const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            w[size_t(i) * size + j] = float(v);
            sum += v;
        }
    for (auto& v : w) v = float(v / sum);
    return w;
}

double mse(const Tensor& x, const Tensor& y) {
    double acc = 0.0;
    for (size_t i = 0; i < x.data().size(); ++i) {
        const double d = double(x.data()[i]) - double(y.data()[i]);
        acc += d * d;
    }
    return acc / double(x.numel());
}

}  // namespace

void EvalReport::finalize() {
    mean_psnr_db = 0.0;
    mean_ssim = 0.0;
    if (per_image.empty()) return;
    for (const auto& r : per_image) {
        mean_psnr_db += r.psnr_db;
        mean_ssim += r.ssim;
    }
    mean_psnr_db /= double(per_image.size());
    mean_ssim /= double(per_image.size());
}

void EvalReport::write_tsv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write eval report: " + path);
    out << "image\tpsnr_db\tssim\n";
    char line[256];
    for (const auto& r : per_image) {
        std::snprintf(line, sizeof line, "%s\t%.4f\t%.6f\n", r.image.c_str(), r.psnr_db, r.ssim);
        out << line;
    }
    std::snprintf(line, sizeof line, "MEAN\t%.4f\t%.6f\n", mean_psnr_db, mean_ssim);
    out << line;
}

double psnr(const Tensor& x, const Tensor& y, double cap) {
    if (!(x.shape() == y.shape()))
        throw std::invalid_argument("psnr: shape mismatch " + x.shape().str() + " vs " +
                                    y.shape().str());
    const double m = mse(x, y);
    if (m < 1e-10) return cap;
    return 10.0 * std::log10(1.0 / m);
}

double ssim(const Tensor& x, const Tensor& y, const SsimConfig& cfg) {
    const Shape s = x.shape();
    if (!(s == y.shape()))
        throw std::invalid_argument("ssim: shape mismatch " + s.str() + " vs " + y.shape().str());
    const int win = cfg.window;
    if (s.h < win || s.w < win)
        throw std::invalid_argument("ssim: image " + s.str() + " smaller than window " +
                                    std::to_string(win));
    const std::vector<float> g = gaussian_window(win, cfg.sigma);
    const double c1 = cfg.c1(), c2 = cfg.c2();
    const int oh = s.h - win + 1, ow = s.w - win + 1;

    double total = 0.0;
    long count = 0;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int py = 0; py < oh; ++py)
                for (int px = 0; px < ow; ++px) {
                    double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
                    for (int i = 0; i < win; ++i)
                        for (int j = 0; j < win; ++j) {
                            const double wv = g[size_t(i) * win + j];
                            const double xv = x.at(n, c, py + i, px + j);
                            const double yv = y.at(n, c, py + i, px + j);
                            mx += wv * xv;
                            my += wv * yv;
                            mxx += wv * xv * xv;
                            myy += wv * yv * yv;
                            mxy += wv * xv * yv;
                        }
                    const double sxx = mxx - mx * mx, syy = myy - my * my, sxy = mxy - mx * my;
                    const double num = (2 * mx * my + c1) * (2 * sxy + c2);
                    const double den = (mx * mx + my * my + c1) * (sxx + syy + c2);
                    total += num / den;
                    ++count;
                }
    return total / double(count);
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    Tensor d = sub(pred, target);
    return reduce_mean(mul(d, d));
}

Tensor ssim_loss(const Tensor& pred, const Tensor& target, const SsimConfig& cfg) {
    const Shape s = pred.shape();
    if (!(s == target.shape()))
        throw std::invalid_argument("ssim_loss: shape mismatch");
    if (s.h < cfg.window || s.w < cfg.window)
        throw std::invalid_argument("ssim_loss: image " + s.str() + " smaller than window " +
                                    std::to_string(cfg.window));
    Tensor kernel = Tensor::from_data({1, 1, cfg.window, cfg.window},
                                      gaussian_window(cfg.window, cfg.sigma));
    Tensor zero_bias = Tensor::zeros({1, 1, 1, 1});
    const float c1 = cfg.c1(), c2 = cfg.c2();

    Tensor acc;
    for (int c = 0; c < s.c; ++c) {
        Tensor xc = slice_channels(pred, c, c + 1);
        Tensor yc = slice_channels(target, c, c + 1);
        Tensor mx = conv2d(xc, kernel, zero_bias);
        Tensor my = conv2d(yc, kernel, zero_bias);
        Tensor sxx = sub(conv2d(mul(xc, xc), kernel, zero_bias), mul(mx, mx));
        Tensor syy = sub(conv2d(mul(yc, yc), kernel, zero_bias), mul(my, my));
        Tensor sxy = sub(conv2d(mul(xc, yc), kernel, zero_bias), mul(mx, my));
        Tensor num = mul(add_scalar(scale(mul(mx, my), 2.0f), c1),
                         add_scalar(scale(sxy, 2.0f), c2));
        Tensor den = mul(add_scalar(add(mul(mx, mx), mul(my, my)), c1),
                         add_scalar(add(sxx, syy), c2));
        Tensor m = reduce_mean(div(num, den));
        acc = acc.defined() ? add(acc, m) : m;
    }
    return add_scalar(scale(acc, -1.0f / float(s.c)), 1.0f);
}

const PerceptualStack& perceptual_stack() {
    static const PerceptualStack frozen = [] {
        PerceptualStack s;
        std::mt19937 rng(7);
        auto gauss = [&rng]() {
            // Box-Muller on our own uniforms; sequence pinned independent of
            // the standard library
            double u1 = (double(rng()) + 1.0) / 4294967297.0;
            double u2 = double(rng()) / 4294967296.0;
            return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
        };
        const int chans[4] = {3, 16, 32, 32};
        for (int l = 0; l < 3; ++l) {
            Tensor w = Tensor::zeros({chans[l + 1], chans[l], 3, 3});
            for (auto& v : w.data()) v = float(0.2 * gauss());
            s.weights.push_back(w);
            s.biases.push_back(Tensor::zeros({1, chans[l + 1], 1, 1}));
        }
        return s;
    }();
    return frozen;
}

Tensor perceptual_features(const Tensor& x) {
    const Shape s = x.shape();
    if (s.c != 3 || s.h < 16 || s.w < 16)
        throw std::invalid_argument("perceptual_features: need Nx3xHxW with H,W >= 16, got " +
                                    s.str());
    const PerceptualStack& frozen = perceptual_stack();
    Tensor h = x;
    for (int l = 0; l < 3; ++l)
        h = leaky_relu(conv2d(h, frozen.weights[size_t(l)], frozen.biases[size_t(l)], 2, 1), 0.2f);
    return h;
}

Tensor content_loss(const Tensor& pred, const Tensor& target, float perceptual_weight) {
    Tensor loss = mse_loss(pred, target);
    if (perceptual_weight != 0.0f) {
        Tensor fp = perceptual_features(pred);
        Tensor ft = perceptual_features(target);
        loss = add(loss, scale(mse_loss(fp, ft), perceptual_weight));
    }
    return loss;
}

AdversarialLosses adversarial_losses(const Tensor& d_real, const Tensor& d_fake) {
    AdversarialLosses l;
    l.loss_d = add(bce_with_logits(d_real, 1.0f), bce_with_logits(d_fake, 0.0f));
    l.loss_g = bce_with_logits(d_fake, 1.0f);
    return l;
}

}  // namespace ids
