#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dacnet/common.hpp"
#include "dacnet/rng.hpp"

namespace dacnet {

namespace detail {

// Node in the reverse-mode graph. Tensors are immutable once created (the
// optimizer mutates leaf data between steps, never nodes inside a live
// graph). `backward_fn` reads this node's grad and accumulates into the
// parents' grads; it is dropped after it runs so captured buffers free early.
struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(const TensorImpl& self)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    bool is_leaf() const { return !backward_fn; }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
};

}  // namespace detail

// Thread-local switch; forwards made under NoGradGuard record no graph.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_vector(Shape shape, std::vector<float> values,
                              bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);
    static Tensor uniform(Shape shape, float lo, float hi, Rng& rng,
                          bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int64_t dim(int axis) const { return impl_->shape[axis]; }
    int64_t numel() const { return impl_->numel(); }
    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    std::span<const float> data() const { return impl_->data; }
    // Mutable access; callers must only touch leaves outside a live graph.
    std::span<float> raw_data() { return impl_->data; }
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    std::span<const float> grad() const { return impl_->grad; }
    std::span<float> raw_grad() { return impl_->grad; }
    void ensure_grad() { impl_->ensure_grad(); }
    void zero_grad() {
        if (impl_ && !impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
    }

    float item() const;
    float at(const std::vector<int64_t>& index) const;

    // Shares the data buffer but detaches from the graph.
    Tensor detach() const;
    Tensor clone() const;

    // Reverse-mode sweep from a scalar. Grad buffers of leaves accumulate
    // across calls; intermediate grads and closures are freed on the way.
    void backward() const;

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
    static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl) { return Tensor(std::move(impl)); }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
};

// ---- operations ------------------------------------------------------
// Binary elementwise ops broadcast numpy-style (shapes right-aligned, each
// dim equal or 1); gradients reduce-sum over the broadcast axes.

Tensor matmul(const Tensor& a, const Tensor& b);
// a[M x K] * b[N x K]^T -> [M x N]; avoids materializing transposes.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor maxpool2d(const Tensor& x, int kernel, int stride);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float s);
Tensor abs(const Tensor& x);  // subgradient 0 at x == 0
Tensor square(const Tensor& x);
Tensor exp(const Tensor& x);
// Pass-through gradient inside (lo, hi), zero outside.
Tensor clamp(const Tensor& x, float lo, float hi);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_over(const Tensor& x, std::vector<int> axes, bool keep_dims = false);
Tensor avg_over(const Tensor& x, std::vector<int> axes, bool keep_dims = false);
Tensor max_over(const Tensor& x, int axis, bool keep_dims = false);
Tensor l2_norm_sq(const Tensor& x);

Tensor reshape(const Tensor& x, Shape new_shape);
// rows[i] selects matrix row; backward scatter-adds into the matrix.
Tensor take_rows(const Tensor& matrix, const std::vector<int>& rows);

// Mean over the batch of -log softmax(logits)[label], max-stabilized.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);
// Per-sample weighted CE with an explicit denominator: sum_i w_i * ce_i / denom.
Tensor softmax_cross_entropy_weighted(const Tensor& logits, const std::vector<int>& labels,
                                      const std::vector<float>& weights, float denom);
// Row softmax probabilities, computed outside the graph.
std::vector<float> softmax_rows(const Tensor& logits);

struct BatchNormOut {
    Tensor out;
    std::vector<float> batch_mean;  // per channel
    std::vector<float> batch_var;   // biased (1/M)
};
// Training-mode batch normalization over (B, H, W) per channel.
BatchNormOut batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);
// Evaluation mode: normalizes with the provided running statistics.
Tensor batchnorm2d_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        const std::vector<float>& mean, const std::vector<float>& var,
                        float eps);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, float s) { return scale(a, s); }
inline Tensor operator*(float s, const Tensor& a) { return scale(a, s); }

}  // namespace dacnet
