#include "ids/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace ids {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!(a.shape() == b.shape()))
        fail(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

TensorImplPtr make_impl(Shape s, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = s;
    impl->data.assign(size_t(s.numel()), 0.0f);
    impl->requires_grad = requires_grad;
    return impl;
}

// Builds the output node. requires_grad is inherited from any parent.
Tensor make_result(Shape s, std::vector<Tensor> parents, const char* op,
                   std::function<void(TensorImpl&)> backward_fn) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    auto impl = make_impl(s, rg);
    if (rg) {
        impl->op_name = op;
        for (auto& p : parents) impl->parents.push_back(p.impl());
        impl->backward_fn = std::move(backward_fn);
    }
    return Tensor(impl);
}

}  // namespace

std::string Shape::str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
}

void TensorImpl::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
}

void TensorImpl::accumulate(const float* g, std::int64_t count) {
    ensure_grad();
    for (std::int64_t i = 0; i < count; ++i) grad[size_t(i)] += g[i];
}

Tensor Tensor::zeros(Shape s, bool requires_grad) { return Tensor(make_impl(s, requires_grad)); }

Tensor Tensor::full(Shape s, float value, bool requires_grad) {
    auto impl = make_impl(s, requires_grad);
    std::fill(impl->data.begin(), impl->data.end(), value);
    return Tensor(impl);
}

Tensor Tensor::from_data(Shape s, std::vector<float> values, bool requires_grad) {
    if (std::int64_t(values.size()) != s.numel())
        fail("from_data: value count " + std::to_string(values.size()) + " != numel of " + s.str());
    auto impl = make_impl(s, requires_grad);
    impl->data = std::move(values);
    return Tensor(impl);
}

void Tensor::set_requires_grad(bool rg) { impl_->requires_grad = rg; }

float& Tensor::at(int n, int c, int h, int w) {
    const Shape& s = impl_->shape;
    return impl_->data[size_t(((std::int64_t(n) * s.c + c) * s.h + h) * s.w + w)];
}

float Tensor::at(int n, int c, int h, int w) const {
    const Shape& s = impl_->shape;
    return impl_->data[size_t(((std::int64_t(n) * s.c + c) * s.h + h) * s.w + w)];
}

float Tensor::item() const {
    if (numel() != 1) fail("item: tensor is not scalar, shape " + shape().str());
    return impl_->data[0];
}

double Tensor::item_precise() const {
    if (numel() != 1) fail("item_precise: tensor is not scalar, shape " + shape().str());
    return impl_->has_precise ? impl_->precise : double(impl_->data[0]);
}

void Tensor::zero_grad() {
    impl_->ensure_grad();
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

Tensor Tensor::detach() const {
    auto impl = make_impl(impl_->shape, false);
    impl->data = impl_->data;
    return Tensor(impl);
}

// ---- conv2d ----------------------------------------------------------------

namespace {

void im2col(const float* img, int C, int H, int W, int k, int stride, int pad,
            int out_h, int out_w, float* col, std::int64_t row_stride) {
    // col rows are (C*k*k) patch taps; row r of the full matrix starts at
    // col + r*row_stride (the caller packs all batch items side by side).
    for (int c = 0; c < C; ++c) {
        const float* src = img + std::int64_t(c) * H * W;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                float* dst = col + std::int64_t((c * k + ki) * k + kj) * row_stride;
                for (int oh = 0; oh < out_h; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) {
                        std::fill(dst + oh * out_w, dst + (oh + 1) * out_w, 0.0f);
                        continue;
                    }
                    const float* row = src + std::int64_t(ih) * W;
                    float* d = dst + oh * out_w;
                    if (stride == 1) {
                        // Contiguous span; only the pad fringe needs zeros.
                        const int ow0 = std::max(0, pad - kj);
                        const int ow1 = std::min(out_w, W + pad - kj);
                        std::fill(d, d + ow0, 0.0f);
                        std::copy(row + (ow0 - pad + kj), row + (ow1 - pad + kj), d + ow0);
                        std::fill(d + ow1, d + out_w, 0.0f);
                    } else {
                        for (int ow = 0; ow < out_w; ++ow) {
                            const int iw = ow * stride - pad + kj;
                            d[ow] = (iw >= 0 && iw < W) ? row[iw] : 0.0f;
                        }
                    }
                }
            }
        }
    }
}

void col2im_accumulate(const float* col, int C, int H, int W, int k, int stride,
                       int pad, int out_h, int out_w, float* img,
                       std::int64_t row_stride) {
    for (int c = 0; c < C; ++c) {
        float* dst = img + std::int64_t(c) * H * W;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const float* src = col + std::int64_t((c * k + ki) * k + kj) * row_stride;
                for (int oh = 0; oh < out_h; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) continue;
                    float* row = dst + std::int64_t(ih) * W;
                    const float* s = src + oh * out_w;
                    if (stride == 1) {
                        const int ow0 = std::max(0, pad - kj);
                        const int ow1 = std::min(out_w, W + pad - kj);
                        float* r = row - pad + kj;
                        for (int ow = ow0; ow < ow1; ++ow) r[ow] += s[ow];
                    } else {
                        for (int ow = 0; ow < out_w; ++ow) {
                            const int iw = ow * stride - pad + kj;
                            if (iw >= 0 && iw < W) row[iw] += s[ow];
                        }
                    }
                }
            }
        }
    }
}

// Persistent scratch: conv2d is hot and single-threaded; reusing the buffers
// avoids a multi-MB allocation + zero-fill per call.
struct ConvScratch {
    std::vector<float> col, gcol, go;
};
ConvScratch& conv_scratch() {
    thread_local ConvScratch s;
    return s;
}

void grow(std::vector<float>& v, std::int64_t n) {
    if (std::int64_t(v.size()) < n) v.resize(static_cast<std::size_t>(n));
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int pad) {
    const Shape in = input.shape(), ws = weight.shape();
    const int k = ws.h;
    if (ws.w != k) fail("conv2d: kernel must be square, got " + ws.str());
    if (k % 2 == 0) fail("conv2d: kernel size must be odd, got " + std::to_string(k));
    if (stride < 1) fail("conv2d: stride must be >= 1");
    if (pad < 0) fail("conv2d: pad must be >= 0");
    if (ws.c != in.c)
        fail("conv2d: weight input channels " + std::to_string(ws.c) +
             " != input channels " + std::to_string(in.c));
    if (bias.numel() != ws.n)
        fail("conv2d: bias count " + std::to_string(int(bias.numel())) +
             " != output channels " + std::to_string(ws.n));
    const int out_h = (in.h + 2 * pad - k) / stride + 1;
    const int out_w = (in.w + 2 * pad - k) / stride + 1;
    if (out_h < 1 || out_w < 1)
        fail("conv2d: output spatial size would be empty for input " + in.str());

    const int cout = ws.n, K = in.c * k * k, plane = out_h * out_w;
    const std::int64_t cols = std::int64_t(in.n) * plane;  // all batch items side by side
    Shape os{in.n, cout, out_h, out_w};

    auto fill_col = [in, k, stride, pad, out_h, out_w, plane, cols](const float* src,
                                                                   float* col) {
        for (int n = 0; n < in.n; ++n)
            im2col(src + std::int64_t(n) * in.c * in.h * in.w, in.c, in.h, in.w, k,
                   stride, pad, out_h, out_w, col + std::int64_t(n) * plane, cols);
    };

    auto out = make_result(
        os, {input, weight, bias}, "conv2d",
        [in, os, k, stride, pad, K, plane, cols, fill_col](TensorImpl& node) {
            auto& input_p = *node.parents[0];
            auto& weight_p = *node.parents[1];
            auto& bias_p = *node.parents[2];
            const int cout = os.c;
            auto& scratch = conv_scratch();
            grow(scratch.go, std::int64_t(cout) * cols);
            // node.grad is [n][cout][plane]; regroup to cout x (n*plane).
            for (int n = 0; n < in.n; ++n)
                for (int c = 0; c < cout; ++c)
                    std::copy_n(node.grad.data() + (std::int64_t(n) * cout + c) * plane,
                                plane,
                                scratch.go.data() + std::int64_t(c) * cols +
                                    std::int64_t(n) * plane);
            CMapRM go(scratch.go.data(), cout, cols);
            if (weight_p.requires_grad) {
                weight_p.ensure_grad();
                grow(scratch.col, std::int64_t(K) * cols);
                fill_col(input_p.data.data(), scratch.col.data());
                CMapRM col_m(scratch.col.data(), K, cols);
                MapRM gw(weight_p.grad.data(), cout, K);
                gw.noalias() += go * col_m.transpose();
            }
            if (input_p.requires_grad) {
                input_p.ensure_grad();
                grow(scratch.gcol, std::int64_t(K) * cols);
                CMapRM w2(weight_p.data.data(), cout, K);
                MapRM gc(scratch.gcol.data(), K, cols);
                gc.noalias() = w2.transpose() * go;
                for (int n = 0; n < in.n; ++n)
                    col2im_accumulate(scratch.gcol.data() + std::int64_t(n) * plane,
                                      in.c, in.h, in.w, k, stride, pad, os.h, os.w,
                                      input_p.grad.data() +
                                          std::int64_t(n) * in.c * in.h * in.w,
                                      cols);
            }
            if (bias_p.requires_grad) {
                bias_p.ensure_grad();
                // Sequential scalar sum: a SIMD reduction's split point depends on
                // the scratch pointer's alignment, which varies with allocation
                // history and would break bitwise reproducibility across runs.
                for (int c = 0; c < cout; ++c) {
                    const float* g = scratch.go.data() + std::int64_t(c) * cols;
                    float s = 0.0f;
                    for (std::int64_t i = 0; i < cols; ++i) s += g[i];
                    bias_p.grad[size_t(c)] += s;
                }
            }
        });

    auto& scratch = conv_scratch();
    grow(scratch.col, std::int64_t(K) * cols);
    grow(scratch.go, std::int64_t(cout) * cols);
    fill_col(input.data().data(), scratch.col.data());
    // Accumulate one tap at a time in (cin, ky, kx) order, starting from the
    // bias, so every output element sums in the same order as a nested-loop
    // convolution; vectorization across output pixels doesn't change that.
    const float* wd = weight.data().data();
    for (int c = 0; c < cout; ++c) {
        float* acc = scratch.go.data() + std::int64_t(c) * cols;
        std::fill(acc, acc + cols, bias.data()[size_t(c)]);
        for (int r = 0; r < K; ++r) {
            const float wv = wd[std::int64_t(c) * K + r];
            const float* src = scratch.col.data() + std::int64_t(r) * cols;
            for (std::int64_t i = 0; i < cols; ++i) acc[i] += wv * src[i];
        }
    }
    for (int n = 0; n < in.n; ++n)
        for (int c = 0; c < cout; ++c)
            std::copy_n(scratch.go.data() + std::int64_t(c) * cols +
                            std::int64_t(n) * plane,
                        plane, out.data().data() + (std::int64_t(n) * cout + c) * plane);
    return out;
}

// ---- elementwise -----------------------------------------------------------


namespace {
double precise_of(const Tensor& t) {
    return t.impl()->has_precise ? t.impl()->precise : double(t.impl()->data[0]);
}
void set_precise(Tensor& out, double v) {
    out.impl()->has_precise = true;
    out.impl()->precise = v;
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto out = make_result(a.shape(), {a, b}, "add", [](TensorImpl& node) {
        for (int i = 0; i < 2; ++i)
            if (node.parents[i]->requires_grad)
                node.parents[i]->accumulate(node.grad.data(), std::int64_t(node.grad.size()));
    });
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
    if (out.numel() == 1) set_precise(out, precise_of(a) + precise_of(b));
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    auto out = make_result(a.shape(), {a, b}, "sub", [](TensorImpl& node) {
        const std::int64_t n = std::int64_t(node.grad.size());
        if (node.parents[0]->requires_grad) node.parents[0]->accumulate(node.grad.data(), n);
        if (node.parents[1]->requires_grad) {
            auto& p = *node.parents[1];
            p.ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) p.grad[size_t(i)] -= node.grad[size_t(i)];
        }
    });
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] - bd[i];
    if (out.numel() == 1) set_precise(out, precise_of(a) - precise_of(b));
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    auto out = make_result(a.shape(), {a, b}, "mul", [](TensorImpl& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        const size_t n = node.grad.size();
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < n; ++i) pa.grad[i] += node.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < n; ++i) pb.grad[i] += node.grad[i] * pa.data[i];
        }
    });
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
    if (out.numel() == 1) set_precise(out, precise_of(a) * precise_of(b));
    return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "div");
    auto out = make_result(a.shape(), {a, b}, "div", [](TensorImpl& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        const size_t n = node.grad.size();
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < n; ++i) pa.grad[i] += node.grad[i] / pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < n; ++i)
                pb.grad[i] -= node.grad[i] * pa.data[i] / (pb.data[i] * pb.data[i]);
        }
    });
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] / bd[i];
    if (out.numel() == 1) set_precise(out, precise_of(a) / precise_of(b));
    return out;
}

Tensor scale(const Tensor& a, float s) {
    auto out = make_result(a.shape(), {a}, "scale", [s](TensorImpl& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) p.grad[i] += node.grad[i] * s;
    });
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * s;
    if (out.numel() == 1) set_precise(out, precise_of(a) * double(s));
    return out;
}

Tensor add_scalar(const Tensor& a, float s) {
    auto out = make_result(a.shape(), {a}, "add_scalar", [](TensorImpl& node) {
        auto& p = *node.parents[0];
        if (p.requires_grad) p.accumulate(node.grad.data(), std::int64_t(node.grad.size()));
    });
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + s;
    if (out.numel() == 1) set_precise(out, precise_of(a) + double(s));
    return out;
}

Tensor relu(const Tensor& a) {
    // gradient at exactly 0 is 0
    auto out = make_result(a.shape(), {a}, "relu", [](TensorImpl& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i)
            if (p.data[i] > 0.0f) p.grad[i] += node.grad[i];
    });
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] > 0.0f ? ad[i] : 0.0f;
    return out;
}

Tensor leaky_relu(const Tensor& a, float alpha) {
    auto out = make_result(a.shape(), {a}, "leaky_relu", [alpha](TensorImpl& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i)
            p.grad[i] += node.grad[i] * (p.data[i] > 0.0f ? 1.0f : alpha);
    });
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] > 0.0f ? ad[i] : alpha * ad[i];
    return out;
}

Tensor sigmoid(const Tensor& a) {
    auto out = make_result(a.shape(), {a}, "sigmoid", [](TensorImpl& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) {
            const float y = node.data[i];
            p.grad[i] += node.grad[i] * y * (1.0f - y);
        }
    });
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = 1.0f / (1.0f + std::exp(-ad[i]));
    return out;
}

// ---- structural ------------------------------------------------------------

Tensor concat_channels(const std::vector<Tensor>& ts) {
    if (ts.empty()) fail("concat_channels: empty input list");
    const Shape s0 = ts[0].shape();
    int ctot = 0;
    for (const auto& t : ts) {
        const Shape s = t.shape();
        if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
            fail("concat_channels: spatial/batch mismatch " + s.str() + " vs " + s0.str());
        ctot += s.c;
    }
    Shape os{s0.n, ctot, s0.h, s0.w};
    auto out = make_result(os, ts, "concat_channels", [os](TensorImpl& node) {
        const std::int64_t plane = std::int64_t(os.h) * os.w;
        for (int n = 0; n < os.n; ++n) {
            std::int64_t coff = 0;
            for (auto& pp : node.parents) {
                auto& p = *pp;
                const std::int64_t pc = p.shape.c;
                if (p.requires_grad) {
                    p.ensure_grad();
                    const float* src = node.grad.data() + (std::int64_t(n) * os.c + coff) * plane;
                    float* dst = p.grad.data() + std::int64_t(n) * pc * plane;
                    for (std::int64_t i = 0; i < pc * plane; ++i) dst[i] += src[i];
                }
                coff += pc;
            }
        }
    });
    const std::int64_t plane = std::int64_t(s0.h) * s0.w;
    for (int n = 0; n < s0.n; ++n) {
        std::int64_t coff = 0;
        for (const auto& t : ts) {
            const std::int64_t pc = t.shape().c;
            std::copy_n(t.data().data() + std::int64_t(n) * pc * plane, pc * plane,
                        out.data().data() + (std::int64_t(n) * ctot + coff) * plane);
            coff += pc;
        }
    }
    return out;
}

Tensor slice_channels(const Tensor& t, int c_begin, int c_end) {
    const Shape s = t.shape();
    if (c_begin < 0 || c_end > s.c || c_begin >= c_end)
        fail("slice_channels: invalid range [" + std::to_string(c_begin) + "," +
             std::to_string(c_end) + ") for " + s.str());
    Shape os{s.n, c_end - c_begin, s.h, s.w};
    auto out = make_result(os, {t}, "slice_channels", [s, os, c_begin](TensorImpl& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const std::int64_t plane = std::int64_t(s.h) * s.w;
        for (int n = 0; n < s.n; ++n) {
            const float* src = node.grad.data() + std::int64_t(n) * os.c * plane;
            float* dst = p.grad.data() + (std::int64_t(n) * s.c + c_begin) * plane;
            for (std::int64_t i = 0; i < std::int64_t(os.c) * plane; ++i) dst[i] += src[i];
        }
    });
    const std::int64_t plane = std::int64_t(s.h) * s.w;
    for (int n = 0; n < s.n; ++n)
        std::copy_n(t.data().data() + (std::int64_t(n) * s.c + c_begin) * plane,
                    std::int64_t(os.c) * plane,
                    out.data().data() + std::int64_t(n) * os.c * plane);
    return out;
}

namespace {

// output(n, c, h*r+i, w*r+j) = input(n, c*r*r + i*r + j, h, w)
void shuffle_copy(const float* in, float* out, int N, int C_out, int H, int W, int r) {
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C_out; ++c)
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < r; ++j) {
                    const float* src =
                        in + std::int64_t((n * C_out + c) * r * r + i * r + j) * H * W;
                    for (int h = 0; h < H; ++h) {
                        float* dst = out + ((std::int64_t(n) * C_out + c) * (H * r) +
                                            (std::int64_t(h) * r + i)) * (W * r) + j;
                        for (int w = 0; w < W; ++w) dst[std::int64_t(w) * r] = src[std::int64_t(h) * W + w];
                    }
                }
}

void unshuffle_accumulate(const float* out_grad, float* in_grad, int N, int C_out,
                          int H, int W, int r) {
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C_out; ++c)
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < r; ++j) {
                    float* dst = in_grad + std::int64_t((n * C_out + c) * r * r + i * r + j) * H * W;
                    for (int h = 0; h < H; ++h) {
                        const float* src = out_grad + ((std::int64_t(n) * C_out + c) * (H * r) +
                                                       (std::int64_t(h) * r + i)) * (W * r) + j;
                        for (int w = 0; w < W; ++w) dst[std::int64_t(h) * W + w] += src[std::int64_t(w) * r];
                    }
                }
}

}  // namespace

Tensor pixel_shuffle(const Tensor& t, int r) {
    const Shape s = t.shape();
    if (r < 1 || s.c % (r * r) != 0)
        fail("pixel_shuffle: channel count " + std::to_string(s.c) +
             " not divisible by r^2=" + std::to_string(r * r));
    Shape os{s.n, s.c / (r * r), s.h * r, s.w * r};
    auto out = make_result(os, {t}, "pixel_shuffle", [s, os, r](TensorImpl& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        unshuffle_accumulate(node.grad.data(), p.grad.data(), s.n, os.c, s.h, s.w, r);
    });
    shuffle_copy(t.data().data(), out.data().data(), s.n, os.c, s.h, s.w, r);
    return out;
}

Tensor pixel_unshuffle(const Tensor& t, int r) {
    const Shape s = t.shape();
    if (r < 1 || s.h % r != 0 || s.w % r != 0)
        fail("pixel_unshuffle: spatial dims " + s.str() + " not divisible by r=" + std::to_string(r));
    Shape os{s.n, s.c * r * r, s.h / r, s.w / r};
    auto out = make_result(os, {t}, "pixel_unshuffle", [s, os, r](TensorImpl& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        // forward is the inverse shuffle, so backward is a plain shuffle
        std::vector<float> tmp(p.grad.size());
        shuffle_copy(node.grad.data(), tmp.data(), s.n, s.c, os.h, os.w, r);
        for (size_t i = 0; i < tmp.size(); ++i) p.grad[i] += tmp[i];
    });
    // gather: in(n, c, h, w) -> out(n, c*r*r + i*r + j, h/r, w/r)
    std::vector<float> tmp(t.data().size());
    unshuffle_accumulate(t.data().data(), out.data().data(), s.n, s.c, os.h, os.w, r);
    return out;
}

Tensor bilinear_resize(const Tensor& t, int out_h, int out_w) {
    const Shape s = t.shape();
    if (out_h < 1 || out_w < 1) fail("bilinear_resize: output size must be >= 1");
    Shape os{s.n, s.c, out_h, out_w};

    // align-corners-false: src = (dst + 0.5) * scale - 0.5, clamped
    const double sh = double(s.h) / out_h, sw = double(s.w) / out_w;
    struct Tap { int lo, hi; float w_hi; };
    std::vector<Tap> th(static_cast<size_t>(out_h));
    std::vector<Tap> tw(static_cast<size_t>(out_w));
    auto make_tap = [](int dst, double scl, int limit) {
        double src = (dst + 0.5) * scl - 0.5;
        src = std::clamp(src, 0.0, double(limit - 1));
        Tap tp;
        tp.lo = int(std::floor(src));
        tp.hi = std::min(tp.lo + 1, limit - 1);
        tp.w_hi = float(src - tp.lo);
        return tp;
    };
    for (int i = 0; i < out_h; ++i) th[size_t(i)] = make_tap(i, sh, s.h);
    for (int j = 0; j < out_w; ++j) tw[size_t(j)] = make_tap(j, sw, s.w);

    auto out = make_result(os, {t}, "bilinear_resize", [s, os, th, tw](TensorImpl& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
                const float* g = node.grad.data() + std::int64_t(n * s.c + c) * os.h * os.w;
                float* dst = p.grad.data() + std::int64_t(n * s.c + c) * s.h * s.w;
                for (int i = 0; i < os.h; ++i)
                    for (int j = 0; j < os.w; ++j) {
                        const Tap& a = th[size_t(i)];
                        const Tap& b = tw[size_t(j)];
                        const float gv = g[std::int64_t(i) * os.w + j];
                        dst[std::int64_t(a.lo) * s.w + b.lo] += gv * (1 - a.w_hi) * (1 - b.w_hi);
                        dst[std::int64_t(a.lo) * s.w + b.hi] += gv * (1 - a.w_hi) * b.w_hi;
                        dst[std::int64_t(a.hi) * s.w + b.lo] += gv * a.w_hi * (1 - b.w_hi);
                        dst[std::int64_t(a.hi) * s.w + b.hi] += gv * a.w_hi * b.w_hi;
                    }
            }
    });

    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const float* src = t.data().data() + std::int64_t(n * s.c + c) * s.h * s.w;
            float* dst = out.data().data() + std::int64_t(n * s.c + c) * out_h * out_w;
            for (int i = 0; i < out_h; ++i)
                for (int j = 0; j < out_w; ++j) {
                    const Tap& a = th[size_t(i)];
                    const Tap& b = tw[size_t(j)];
                    if (a.w_hi == 0.0f && b.w_hi == 0.0f) {
                        // exact grid hit: bitwise copy (identity resize stays identity)
                        dst[std::int64_t(i) * out_w + j] = src[std::int64_t(a.lo) * s.w + b.lo];
                        continue;
                    }
                    const float v00 = src[std::int64_t(a.lo) * s.w + b.lo];
                    const float v01 = src[std::int64_t(a.lo) * s.w + b.hi];
                    const float v10 = src[std::int64_t(a.hi) * s.w + b.lo];
                    const float v11 = src[std::int64_t(a.hi) * s.w + b.hi];
                    const float top = v00 * (1 - b.w_hi) + v01 * b.w_hi;
                    const float bot = v10 * (1 - b.w_hi) + v11 * b.w_hi;
                    dst[std::int64_t(i) * out_w + j] = top * (1 - a.w_hi) + bot * a.w_hi;
                }
        }
    return out;
}

Tensor reduce_mean(const Tensor& t) {
    if (t.numel() == 0) fail("reduce_mean: empty tensor");
    const float inv = 1.0f / float(t.numel());
    auto out = make_result(Shape{1, 1, 1, 1}, {t}, "reduce_mean", [inv](TensorImpl& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const float g = node.grad[0] * inv;
        for (auto& v : p.grad) v += g;
    });
    double sum = 0.0;
    for (float v : t.data()) sum += v;
    out.data()[0] = float(sum / double(t.numel()));
    set_precise(out, sum / double(t.numel()));
    return out;
}

Tensor bce_with_logits(const Tensor& logits, float target) {
    const float inv = 1.0f / float(logits.numel());
    auto out = make_result(Shape{1, 1, 1, 1}, {logits}, "bce_with_logits",
                           [target, inv](TensorImpl& node) {
                               auto& p = *node.parents[0];
                               if (!p.requires_grad) return;
                               p.ensure_grad();
                               const float g = node.grad[0] * inv;
                               for (size_t i = 0; i < p.data.size(); ++i) {
                                   const float s = 1.0f / (1.0f + std::exp(-p.data[i]));
                                   p.grad[i] += g * (s - target);
                               }
                           });
    // stable: max(x,0) - x*t + log1p(exp(-|x|))
    double sum = 0.0;
    for (float x : logits.data())
        sum += std::max(x, 0.0f) - x * target + std::log1p(std::exp(-std::fabs(x)));
    out.data()[0] = float(sum / double(logits.numel()));
    set_precise(out, sum / double(logits.numel()));
    return out;
}

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
    if (loss.numel() != 1) fail("backward: loss must be scalar, shape " + loss.shape().str());
    // reverse topological order via iterative post-order DFS
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.emplace_back(loss.impl().get(), 0);
    visited.insert(loss.impl().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorImpl* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // Non-leaf grads are scratch space per backward call; only leaves accumulate
    // across calls.
    for (TensorImpl* node : order)
        if (node->backward_fn) {
            node->ensure_grad();
            std::fill(node->grad.begin(), node->grad.end(), 0.0f);
        }
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         Tensor x, float eps, int max_coords, unsigned seed) {
    x.set_requires_grad(true);
    x.zero_grad();
    Tensor y = f(x);
    backward(y);
    std::vector<float> analytic = x.grad();

    std::vector<std::int64_t> coords;
    const std::int64_t n = x.numel();
    if (n <= max_coords) {
        for (std::int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
        std::mt19937 rng(seed);
        std::unordered_set<std::int64_t> seen;
        while (std::int64_t(coords.size()) < max_coords) {
            std::int64_t i = std::int64_t(rng() % std::uint64_t(n));
            if (seen.insert(i).second) coords.push_back(i);
        }
    }

    x.set_requires_grad(false);
    double worst = 0.0;
    for (std::int64_t i : coords) {
        const float orig = x.data()[size_t(i)];
        x.data()[size_t(i)] = orig + eps;
        const double fp = f(x).item_precise();
        x.data()[size_t(i)] = orig - eps;
        const double fm = f(x).item_precise();
        x.data()[size_t(i)] = orig;
        const double numeric = (fp - fm) / (2.0 * double(eps));
        const double a = double(analytic[size_t(i)]);
        const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
        worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
    x.set_requires_grad(true);
    return worst;
}

}  // namespace ids
