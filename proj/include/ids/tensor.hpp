#ifndef IDS_TENSOR_HPP
#define IDS_TENSOR_HPP

// Minimal NCHW float tensor with reverse-mode autodiff. Define-by-run: each
// op records a backward closure on the output node; backward() walks the
// graph in reverse topological order. Single-threaded, deterministic.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace ids {

struct Shape {
    int n = 1, c = 1, h = 1, w = 1;
    std::int64_t numel() const { return std::int64_t(n) * c * h * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

struct TensorImpl;
using TensorImplPtr = std::shared_ptr<TensorImpl>;

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;   // allocated lazily, same length as data
    bool requires_grad = false;

    // Scalar reductions keep a double shadow of data[0]; finite_diff_check
    // reads it so central differences are not drowned by float32 rounding.
    bool has_precise = false;
    double precise = 0.0;

    // tape
    std::vector<TensorImplPtr> parents;
    std::function<void(TensorImpl&)> backward_fn;  // accumulates into parents' grads
    std::string op_name;

    void ensure_grad();
    void accumulate(const float* g, std::int64_t count);
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(TensorImplPtr impl) : impl_(std::move(impl)) {}
    static Tensor zeros(Shape s, bool requires_grad = false);
    static Tensor full(Shape s, float value, bool requires_grad = false);
    static Tensor from_data(Shape s, std::vector<float> values, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t numel() const { return impl_->shape.numel(); }
    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg);

    std::vector<float>& data() { return impl_->data; }
    const std::vector<float>& data() const { return impl_->data; }
    std::vector<float>& grad() { return impl_->grad; }
    const std::vector<float>& grad() const { return impl_->grad; }

    float& at(int n, int c, int h, int w);
    float at(int n, int c, int h, int w) const;
    float item() const;  // scalar tensors only
    double item_precise() const;

    void zero_grad();
    TensorImplPtr impl() const { return impl_; }

    // Detached copy sharing no tape history (fresh buffer).
    Tensor detach() const;

private:
    TensorImplPtr impl_;
};

// ---- ops -------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride = 1, int pad = 0);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, float alpha);
Tensor sigmoid(const Tensor& a);

Tensor concat_channels(const std::vector<Tensor>& ts);
Tensor slice_channels(const Tensor& t, int c_begin, int c_end);
Tensor pixel_shuffle(const Tensor& t, int r);
Tensor pixel_unshuffle(const Tensor& t, int r);
Tensor bilinear_resize(const Tensor& t, int out_h, int out_w);
Tensor reduce_mean(const Tensor& t);

// Mean binary cross-entropy on logits against a constant target (0 or 1).
Tensor bce_with_logits(const Tensor& logits, float target);

void backward(const Tensor& loss);

// Central-difference gradient verification. f must be scalar-valued and
// deterministic. Probes up to max_coords coordinates (all, if fewer exist);
// returns the worst relative error, denominator max(|analytic|,|numeric|,1e-8).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         Tensor x, float eps = 1e-3f, int max_coords = 24,
                         unsigned seed = 1234);

}  // namespace ids

#endif
