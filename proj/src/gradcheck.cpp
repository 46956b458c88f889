#include "ids/gradcheck.hpp"

#include "ids/metrics.hpp"
#include "ids/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

namespace ids {

namespace {

constexpr double kTol = 1e-3;
constexpr float kEps = 1e-3f;

Tensor random_tensor(Shape s, unsigned seed, float lo = -1.0f, float hi = 1.0f) {
    std::mt19937 rng(seed);
    std::vector<float> v(size_t(s.numel()));
    for (auto& x : v) x = lo + (hi - lo) * float(double(rng()) / 4294967296.0);
    return Tensor::from_data(s, std::move(v));
}

void nudge_off_kinks(Tensor& t) {
    for (auto& v : t.data())
        if (std::fabs(v) < 0.05f) v += 0.1f;
}

// ---- double-precision reference forwards for the windowed losses ----------

std::vector<double> gaussian_window_d(int size, double sigma) {
    std::vector<double> w(size_t(size) * size);
    const int half = size / 2;
    double sum = 0.0;
    for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j) {
            const double dy = i - half, dx = j - half;
            w[size_t(i) * size + j] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            sum += w[size_t(i) * size + j];
        }
    for (auto& v : w) v /= sum;
    return w;
}

double ssim_loss_ref(const std::vector<double>& x, const std::vector<double>& y,
                     Shape s, const SsimConfig& cfg) {
    const std::vector<double> g = gaussian_window_d(cfg.window, double(cfg.sigma));
    const double c1 = cfg.c1(), c2 = cfg.c2();
    const int win = cfg.window, oh = s.h - win + 1, ow = s.w - win + 1;
    auto at = [&](const std::vector<double>& v, int c, int yy, int xx) {
        return v[(size_t(c) * s.h + size_t(yy)) * size_t(s.w) + size_t(xx)];
    };
    double total = 0.0;
    for (int c = 0; c < s.c; ++c) {
        double chan = 0.0;
        for (int py = 0; py < oh; ++py)
            for (int px = 0; px < ow; ++px) {
                double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
                for (int i = 0; i < win; ++i)
                    for (int j = 0; j < win; ++j) {
                        const double wv = g[size_t(i) * win + j];
                        const double xv = at(x, c, py + i, px + j);
                        const double yv = at(y, c, py + i, px + j);
                        mx += wv * xv;
                        my += wv * yv;
                        mxx += wv * xv * xv;
                        myy += wv * yv * yv;
                        mxy += wv * xv * yv;
                    }
                const double sxx = mxx - mx * mx, syy = myy - my * my, sxy = mxy - mx * my;
                chan += (2 * mx * my + c1) * (2 * sxy + c2) /
                        ((mx * mx + my * my + c1) * (sxx + syy + c2));
            }
        total += chan / double(oh * ow);
    }
    return 1.0 - total / double(s.c);
}

double content_loss_ref(const std::vector<double>& x, const std::vector<double>& y,
                        Shape s, double weight) {
    double m = 0.0;
    for (size_t i = 0; i < x.size(); ++i) m += (x[i] - y[i]) * (x[i] - y[i]);
    m /= double(x.size());

    const PerceptualStack& stack = perceptual_stack();
    auto forward = [&](std::vector<double> act, Shape as) {
        for (int l = 0; l < 3; ++l) {
            const Tensor& w = stack.weights[size_t(l)];
            const Shape ws = w.shape();
            const int oh = (as.h + 2 - 3) / 2 + 1, ow = (as.w + 2 - 3) / 2 + 1;
            std::vector<double> next(size_t(ws.n) * oh * ow, 0.0);
            for (int co = 0; co < ws.n; ++co)
                for (int py = 0; py < oh; ++py)
                    for (int px = 0; px < ow; ++px) {
                        double acc = 0.0;
                        for (int ci = 0; ci < ws.c; ++ci)
                            for (int ki = 0; ki < 3; ++ki)
                                for (int kj = 0; kj < 3; ++kj) {
                                    const int iy = py * 2 - 1 + ki, ix = px * 2 - 1 + kj;
                                    if (iy < 0 || iy >= as.h || ix < 0 || ix >= as.w) continue;
                                    acc += act[(size_t(ci) * as.h + size_t(iy)) * size_t(as.w) + size_t(ix)] *
                                           double(w.at(co, ci, ki, kj));
                                }
                        next[(size_t(co) * oh + size_t(py)) * size_t(ow) + size_t(px)] =
                            acc > 0.0 ? acc : 0.2 * acc;
                    }
            act = std::move(next);
            as = Shape{1, ws.n, oh, ow};
        }
        return act;
    };
    const std::vector<double> fx = forward(x, s);
    const std::vector<double> fy = forward(y, s);
    double fm = 0.0;
    for (size_t i = 0; i < fx.size(); ++i) fm += (fx[i] - fy[i]) * (fx[i] - fy[i]);
    fm /= double(fx.size());
    return m + weight * fm;
}

// Compares the engine's analytic gradient against central differences of an
// independent double-precision forward. Coordinates whose analytic gradient
// is below grad_floor are skipped (unresolvable against float32 storage).
double check_against_ref(const std::function<Tensor(const Tensor&)>& loss,
                         const std::function<double(const std::vector<double>&)>& ref,
                         Tensor x, double grad_floor) {
    x.set_requires_grad(true);
    x.zero_grad();
    backward(loss(x));
    const std::vector<float>& g = x.grad();

    std::vector<double> xd(x.data().begin(), x.data().end());
    double worst = 0.0;
    int checked = 0;
    for (size_t i = 0; i < g.size(); ++i) {
        if (std::fabs(g[i]) < grad_floor) continue;
        const double orig = xd[i];
        xd[i] = orig + double(kEps);
        const double fp = ref(xd);
        xd[i] = orig - double(kEps);
        const double fm = ref(xd);
        xd[i] = orig;
        const double numeric = (fp - fm) / (2.0 * double(kEps));
        const double a = double(g[i]);
        worst = std::max(worst, std::fabs(a - numeric) /
                                    std::max({std::fabs(a), std::fabs(numeric), 1e-8}));
        if (++checked >= 64) break;
    }
    return checked > 0 ? worst : 1.0;
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(bool inject_conv_sign_flip) {
    std::vector<GradCheckResult> out;
    auto record = [&out](const char* op, double err) {
        out.push_back({op, err, err <= kTol});
    };
    auto check = [&record](const char* op, const std::function<Tensor(const Tensor&)>& f,
                           Shape s, unsigned seed, bool off_kinks = false) {
        Tensor x = random_tensor(s, seed);
        if (off_kinks) nudge_off_kinks(x);
        record(op, finite_diff_check(f, x, kEps));
    };

    Tensor other = random_tensor({1, 2, 4, 4}, 99);
    check("add", [&](const Tensor& x) { return reduce_mean(mul(add(x, other), add(x, other))); },
          {1, 2, 4, 4}, 21);
    check("sub", [&](const Tensor& x) { return reduce_mean(mul(sub(x, other), sub(x, other))); },
          {1, 2, 4, 4}, 22);
    check("mul", [&](const Tensor& x) { return reduce_mean(mul(x, other)); }, {1, 2, 4, 4}, 23);
    check("div", [&](const Tensor& x) {
        return reduce_mean(div(x, add_scalar(mul(other, other), 0.5f))); }, {1, 2, 4, 4}, 24);
    check("scale", [](const Tensor& x) { return reduce_mean(scale(mul(x, x), 3.0f)); },
          {1, 2, 4, 4}, 25);
    check("relu", [](const Tensor& x) { return reduce_mean(mul(relu(x), relu(x))); },
          {1, 2, 4, 4}, 26, true);
    check("leaky_relu", [](const Tensor& x) {
        return reduce_mean(mul(leaky_relu(x, 0.2f), leaky_relu(x, 0.2f))); }, {1, 2, 4, 4}, 27, true);
    check("sigmoid", [](const Tensor& x) { return reduce_mean(mul(sigmoid(x), sigmoid(x))); },
          {1, 2, 4, 4}, 28);
    check("concat_slice", [&](const Tensor& x) {
        Tensor s = slice_channels(concat_channels({x, other}), 1, 3);
        return reduce_mean(mul(s, s)); }, {1, 2, 4, 4}, 29);
    check("pixel_shuffle", [](const Tensor& x) {
        Tensor y = pixel_shuffle(x, 2);
        return reduce_mean(mul(y, y)); }, {1, 4, 3, 3}, 30);
    check("bilinear_resize", [](const Tensor& x) {
        Tensor y = bilinear_resize(x, 5, 7);
        return reduce_mean(mul(y, y)); }, {1, 2, 4, 4}, 31);
    check("reduce_mean", [](const Tensor& x) { return reduce_mean(mul(x, x)); }, {1, 2, 4, 4}, 32);
    check("bce_with_logits", [](const Tensor& x) { return bce_with_logits(x, 1.0f); },
          {1, 1, 3, 3}, 33);

    // conv: positive weights/inputs + linear reduction keep every gradient
    // coordinate well-conditioned against float32 output rounding
    {
        Tensor w = random_tensor({2, 2, 3, 3}, 40, 0.1f, 0.6f);
        Tensor b = random_tensor({1, 2, 1, 1}, 41);
        Tensor x = random_tensor({1, 2, 5, 5}, 42);
        if (!inject_conv_sign_flip) {
            record("conv2d_input",
                   finite_diff_check([&](const Tensor& t) { return reduce_mean(conv2d(t, w, b, 1, 1)); },
                                     x, kEps));
        } else {
            // mutation fixture: negated analytic gradient must fail the check
            x.set_requires_grad(true);
            x.zero_grad();
            backward(reduce_mean(conv2d(x, w, b, 1, 1)));
            for (auto& gv : x.grad()) gv = -gv;
            std::vector<float> g = x.grad();
            x.set_requires_grad(false);
            double worst = 0.0;
            for (size_t i = 0; i < 8; ++i) {
                const float orig = x.data()[i];
                x.data()[i] = orig + kEps;
                const double fp = reduce_mean(conv2d(x, w, b, 1, 1)).item_precise();
                x.data()[i] = orig - kEps;
                const double fm = reduce_mean(conv2d(x, w, b, 1, 1)).item_precise();
                x.data()[i] = orig;
                const double numeric = (fp - fm) / (2.0 * double(kEps));
                worst = std::max(worst, std::fabs(double(g[i]) - numeric) /
                                            std::max({std::fabs(double(g[i])), std::fabs(numeric), 1e-8}));
            }
            record("conv2d_input", worst);
        }
        Tensor in = random_tensor({1, 2, 5, 5}, 43, 0.1f, 1.0f);
        check("conv2d_weight", [&](const Tensor& t) { return reduce_mean(conv2d(in, t, b, 1, 1)); },
              {2, 2, 3, 3}, 44);
        check("conv2d_bias", [&](const Tensor& t) {
            Tensor y = conv2d(in, w, t, 2, 1);
            return reduce_mean(mul(y, y)); }, {1, 2, 1, 1}, 45);
    }

    // losses
    {
        Tensor target = random_tensor({1, 2, 5, 5}, 50);
        check("mse_loss", [&](const Tensor& x) { return mse_loss(x, target); }, {1, 2, 5, 5}, 51);
    }
    {
        SsimConfig cfg;
        Shape s{1, 3, 14, 14};
        Tensor target = random_tensor(s, 52, 0.0f, 1.0f);
        Tensor x = random_tensor(s, 53, 0.0f, 1.0f);
        std::vector<double> td(target.data().begin(), target.data().end());
        record("ssim_loss",
               check_against_ref([&](const Tensor& t) { return ssim_loss(t, target, cfg); },
                                 [&](const std::vector<double>& v) {
                                     return ssim_loss_ref(v, td, s, cfg);
                                 },
                                 x, 1e-4));
    }
    {
        Shape s{1, 3, 16, 16};
        Tensor target = random_tensor(s, 54, 0.0f, 1.0f);
        Tensor x = random_tensor(s, 55, 0.0f, 1.0f);
        std::vector<double> td(target.data().begin(), target.data().end());
        record("content_loss",
               check_against_ref([&](const Tensor& t) { return content_loss(t, target); },
                                 [&](const std::vector<double>& v) {
                                     return content_loss_ref(v, td, s, 0.01);
                                 },
                                 x, 1e-4));
    }
    {
        Tensor real = random_tensor({1, 1, 4, 4}, 56, -2.0f, 2.0f);
        check("adversarial_loss_g", [&](const Tensor& x) {
            return adversarial_losses(real, x).loss_g; }, {1, 1, 4, 4}, 57);
        check("adversarial_loss_d", [&](const Tensor& x) {
            return adversarial_losses(real, x).loss_d; }, {1, 1, 4, 4}, 58);
    }
    return out;
}

bool gradcheck_all_passed(const std::vector<GradCheckResult>& results) {
    return std::all_of(results.begin(), results.end(),
                       [](const GradCheckResult& r) { return r.pass; });
}

}  // namespace ids
