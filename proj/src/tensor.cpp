#include "dacnet/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace dacnet {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

ImplPtr make_impl(Shape shape) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.resize(static_cast<size_t>(shape_numel(shape)));
    impl->shape = std::move(shape);
    return impl;
}

bool any_requires_grad(const std::vector<ImplPtr>& parents) {
    for (const auto& p : parents)
        if (p->requires_grad) return true;
    return false;
}

// Records the edge + closure on `out` when grad mode is on and some parent
// participates in the graph.
void attach(const ImplPtr& out, std::vector<ImplPtr> parents,
            std::function<void(const TensorImpl&)> fn) {
    if (!g_grad_enabled || !any_requires_grad(parents)) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

// Broadcast plan: strides of each operand expressed in the coordinates of
// the output, zero along broadcast dimensions.
struct BcastPlan {
    Shape out_shape;
    std::vector<int64_t> a_strides;
    std::vector<int64_t> b_strides;
    bool same_shape = false;
};

std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
        st[d] = acc;
        acc *= s[d];
    }
    return st;
}

BcastPlan make_bcast(const Shape& a, const Shape& b, const char* op) {
    BcastPlan plan;
    if (a == b) {
        plan.out_shape = a;
        plan.same_shape = true;
        return plan;
    }
    int rank = static_cast<int>(std::max(a.size(), b.size()));
    plan.out_shape.assign(rank, 1);
    auto sa = row_major_strides(a);
    auto sb = row_major_strides(b);
    plan.a_strides.assign(rank, 0);
    plan.b_strides.assign(rank, 0);
    for (int d = 0; d < rank; ++d) {
        int ia = static_cast<int>(a.size()) - rank + d;
        int ib = static_cast<int>(b.size()) - rank + d;
        int64_t da = ia >= 0 ? a[ia] : 1;
        int64_t db = ib >= 0 ? b[ib] : 1;
        if (da != db && da != 1 && db != 1)
            throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                 shape_str(b) + " are not broadcast-compatible");
        plan.out_shape[d] = std::max(da, db);
        if (ia >= 0 && da != 1) plan.a_strides[d] = sa[ia];
        if (ib >= 0 && db != 1) plan.b_strides[d] = sb[ib];
    }
    return plan;
}

// Odometer walk over the output index space calling f(out_idx, a_off, b_off).
template <class F>
void for_each_bcast(const BcastPlan& plan, F&& f) {
    const Shape& os = plan.out_shape;
    int rank = static_cast<int>(os.size());
    int64_t total = shape_numel(os);
    if (rank == 0) {
        f(int64_t{0}, int64_t{0}, int64_t{0});
        return;
    }
    std::vector<int64_t> coord(rank, 0);
    int64_t ao = 0, bo = 0;
    for (int64_t i = 0; i < total; ++i) {
        f(i, ao, bo);
        for (int d = rank - 1; d >= 0; --d) {
            ++coord[d];
            ao += plan.a_strides[d];
            bo += plan.b_strides[d];
            if (coord[d] < os[d]) break;
            ao -= plan.a_strides[d] * os[d];
            bo -= plan.b_strides[d] * os[d];
            coord[d] = 0;
        }
    }
}

// Generic broadcasting binary op. FwdF(a, b) -> out; the backward lambdas
// get (gout, a, b) and return the local partials.
template <class FwdF, class DaF, class DbF>
Tensor binary_op(const char* name, const Tensor& ta, const Tensor& tb, FwdF fwd, DaF dfa, DbF dfb) {
    ImplPtr a = ta.impl(), b = tb.impl();
    BcastPlan plan = make_bcast(a->shape, b->shape, name);
    auto out = make_impl(plan.out_shape);
    const float* pa = a->data.data();
    const float* pb = b->data.data();
    float* po = out->data.data();
    if (plan.same_shape) {
        int64_t n = out->numel();
        for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    } else {
        for_each_bcast(plan, [&](int64_t i, int64_t ao, int64_t bo) { po[i] = fwd(pa[ao], pb[bo]); });
    }
    attach(out, {a, b}, [a, b, plan, dfa, dfb](const TensorImpl& self) {
        const float* g = self.grad.data();
        const float* pa2 = a->data.data();
        const float* pb2 = b->data.data();
        bool na = a->requires_grad, nb = b->requires_grad;
        if (na) a->ensure_grad();
        if (nb) b->ensure_grad();
        float* ga = na ? a->grad.data() : nullptr;
        float* gb = nb ? b->grad.data() : nullptr;
        if (plan.same_shape) {
            int64_t n = self.numel();
            for (int64_t i = 0; i < n; ++i) {
                if (na) ga[i] += g[i] * dfa(pa2[i], pb2[i]);
                if (nb) gb[i] += g[i] * dfb(pa2[i], pb2[i]);
            }
        } else {
            for_each_bcast(plan, [&](int64_t i, int64_t ao, int64_t bo) {
                if (na) ga[ao] += g[i] * dfa(pa2[ao], pb2[bo]);
                if (nb) gb[bo] += g[i] * dfb(pa2[ao], pb2[bo]);
            });
        }
    });
    return Tensor::wrap(out);
}

// Unary elementwise op; backward partial computed from (x, y).
template <class FwdF, class DxF>
Tensor unary_op(const Tensor& tx, FwdF fwd, DxF dfx) {
    ImplPtr x = tx.impl();
    auto out = make_impl(x->shape);
    int64_t n = x->numel();
    const float* px = x->data.data();
    float* po = out->data.data();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    attach(out, {x}, [x, dfx](const TensorImpl& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const float* g = self.grad.data();
        const float* px2 = x->data.data();
        const float* py = self.data.data();
        float* gx = x->grad.data();
        int64_t n2 = self.numel();
        for (int64_t i = 0; i < n2; ++i) gx[i] += g[i] * dfx(px2[i], py[i]);
    });
    return Tensor::wrap(out);
}

void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
           const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

struct ConvDims {
    int64_t batch, cin, h, w, cout, k, stride, pad, oh, ow;
    int64_t col_rows() const { return cin * k * k; }
    int64_t out_hw() const { return oh * ow; }
};

// Unfolds images [first, first+count) of x into col[K x count*oh*ow].
void im2col(const float* x, const ConvDims& d, int64_t first, int64_t count, float* col) {
    int64_t ohw = d.out_hw();
    int64_t n_cols = count * ohw;
    for (int64_t ci = 0; ci < d.cin; ++ci) {
        for (int64_t ky = 0; ky < d.k; ++ky) {
            for (int64_t kx = 0; kx < d.k; ++kx) {
                float* row = col + ((ci * d.k + ky) * d.k + kx) * n_cols;
                for (int64_t img = 0; img < count; ++img) {
                    const float* src = x + ((first + img) * d.cin + ci) * d.h * d.w;
                    float* dst = row + img * ohw;
                    for (int64_t oy = 0; oy < d.oh; ++oy) {
                        int64_t iy = oy * d.stride - d.pad + ky;
                        if (iy < 0 || iy >= d.h) {
                            std::memset(dst + oy * d.ow, 0, sizeof(float) * d.ow);
                            continue;
                        }
                        for (int64_t ox = 0; ox < d.ow; ++ox) {
                            int64_t ix = ox * d.stride - d.pad + kx;
                            dst[oy * d.ow + ox] =
                                (ix >= 0 && ix < d.w) ? src[iy * d.w + ix] : 0.0f;
                        }
                    }
                }
            }
        }
    }
}

// Accumulates col[K x count*oh*ow] back into dx for images [first, first+count).
void col2im_acc(const float* col, const ConvDims& d, int64_t first, int64_t count, float* dx) {
    int64_t ohw = d.out_hw();
    int64_t n_cols = count * ohw;
    for (int64_t ci = 0; ci < d.cin; ++ci) {
        for (int64_t ky = 0; ky < d.k; ++ky) {
            for (int64_t kx = 0; kx < d.k; ++kx) {
                const float* row = col + ((ci * d.k + ky) * d.k + kx) * n_cols;
                for (int64_t img = 0; img < count; ++img) {
                    float* dst = dx + ((first + img) * d.cin + ci) * d.h * d.w;
                    const float* src = row + img * ohw;
                    for (int64_t oy = 0; oy < d.oh; ++oy) {
                        int64_t iy = oy * d.stride - d.pad + ky;
                        if (iy < 0 || iy >= d.h) continue;
                        for (int64_t ox = 0; ox < d.ow; ++ox) {
                            int64_t ix = ox * d.stride - d.pad + kx;
                            if (ix >= 0 && ix < d.w) dst[iy * d.w + ix] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

constexpr int64_t kConvChunk = 16;

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- Tensor basics ----------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto impl = make_impl(std::move(shape));
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    auto impl = make_impl(std::move(shape));
    std::fill(impl->data.begin(), impl->data.end(), value);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from_vector(Shape shape, std::vector<float> values, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        throw DimensionError("from_vector: shape " + shape_str(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from_vector({}, {value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, float lo, float hi, Rng& rng, bool requires_grad) {
    auto impl = make_impl(std::move(shape));
    for (auto& v : impl->data) v = rng.uniform(lo, hi);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

float Tensor::item() const {
    if (!impl_ || impl_->numel() != 1)
        throw UsageError("item: tensor is not a scalar");
    return impl_->data[0];
}

float Tensor::at(const std::vector<int64_t>& index) const {
    const Shape& s = impl_->shape;
    if (index.size() != s.size()) throw DimensionError("at: rank mismatch");
    int64_t off = 0;
    for (size_t d = 0; d < s.size(); ++d) off = off * s[d] + index[d];
    return impl_->data[static_cast<size_t>(off)];
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = impl_->requires_grad;
    return Tensor(std::move(impl));
}

void Tensor::backward() const {
    if (!impl_) throw UsageError("backward: tensor is undefined");
    if (impl_->numel() != 1)
        throw UsageError("backward: loss must be scalar, got shape " + shape_str(impl_->shape));
    if (!impl_->requires_grad) return;

    // Reverse post-order DFS over parent edges = topological order in which
    // every node runs after all of its consumers.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    struct Frame {
        TensorImpl* node;
        size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({impl_.get(), 0});
    visited.insert(impl_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            TensorImpl* p = f.node->parents[f.next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    impl_->ensure_grad();
    impl_->grad[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (!node->backward_fn) continue;  // leaf: keep accumulated grad
        node->backward_fn(*node);
        node->backward_fn = nullptr;  // release captured buffers
        node->grad.clear();
        node->grad.shrink_to_fit();
    }
}

// ---- matmul / conv / pooling ------------------------------------------

Tensor matmul(const Tensor& ta, const Tensor& tb) {
    ImplPtr a = ta.impl(), b = tb.impl();
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
        throw DimensionError("matmul: incompatible shapes " + shape_str(a->shape) + " and " +
                             shape_str(b->shape));
    int64_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = make_impl({m, n});
    sgemm(false, false, static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0f,
          a->data.data(), static_cast<int>(k), b->data.data(), static_cast<int>(n), 0.0f,
          out->data.data(), static_cast<int>(n));
    attach(out, {a, b}, [a, b, m, n, k](const TensorImpl& self) {
        const float* g = self.grad.data();
        if (a->requires_grad) {
            a->ensure_grad();
            // dA += G * B^T
            sgemm(false, true, static_cast<int>(m), static_cast<int>(k), static_cast<int>(n),
                  1.0f, g, static_cast<int>(n), b->data.data(), static_cast<int>(n), 1.0f,
                  a->grad.data(), static_cast<int>(k));
        }
        if (b->requires_grad) {
            b->ensure_grad();
            // dB += A^T * G
            sgemm(true, false, static_cast<int>(k), static_cast<int>(n), static_cast<int>(m),
                  1.0f, a->data.data(), static_cast<int>(k), g, static_cast<int>(n), 1.0f,
                  b->grad.data(), static_cast<int>(n));
        }
    });
    return Tensor::wrap(out);
}

Tensor matmul_nt(const Tensor& ta, const Tensor& tb) {
    ImplPtr a = ta.impl(), b = tb.impl();
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[1])
        throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a->shape) + " and " +
                             shape_str(b->shape));
    int64_t m = a->shape[0], k = a->shape[1], n = b->shape[0];
    auto out = make_impl({m, n});
    sgemm(false, true, static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0f,
          a->data.data(), static_cast<int>(k), b->data.data(), static_cast<int>(k), 0.0f,
          out->data.data(), static_cast<int>(n));
    attach(out, {a, b}, [a, b, m, n, k](const TensorImpl& self) {
        const float* g = self.grad.data();
        if (a->requires_grad) {
            a->ensure_grad();
            // dA += G * B
            sgemm(false, false, static_cast<int>(m), static_cast<int>(k), static_cast<int>(n),
                  1.0f, g, static_cast<int>(n), b->data.data(), static_cast<int>(k), 1.0f,
                  a->grad.data(), static_cast<int>(k));
        }
        if (b->requires_grad) {
            b->ensure_grad();
            // dB += G^T * A
            sgemm(true, false, static_cast<int>(n), static_cast<int>(k), static_cast<int>(m),
                  1.0f, g, static_cast<int>(n), a->data.data(), static_cast<int>(k), 1.0f,
                  b->grad.data(), static_cast<int>(k));
        }
    });
    return Tensor::wrap(out);
}

Tensor conv2d(const Tensor& tx, const Tensor& tw, const Tensor& tb, int stride, int pad) {
    ImplPtr x = tx.impl(), w = tw.impl(), b = tb.impl();
    if (x->shape.size() != 4 || w->shape.size() != 4)
        throw DimensionError("conv2d: expected 4-d input and weight, got " +
                             shape_str(x->shape) + " and " + shape_str(w->shape));
    if (x->shape[1] != w->shape[1])
        throw DimensionError("conv2d: input channels " + std::to_string(x->shape[1]) +
                             " != weight channels " + std::to_string(w->shape[1]));
    if (w->shape[2] != w->shape[3])
        throw DimensionError("conv2d: only square kernels supported, got " + shape_str(w->shape));
    if (b->shape.size() != 1 || b->shape[0] != w->shape[0])
        throw DimensionError("conv2d: bias shape " + shape_str(b->shape) +
                             " does not match out channels " + std::to_string(w->shape[0]));
    ConvDims d{};
    d.batch = x->shape[0];
    d.cin = x->shape[1];
    d.h = x->shape[2];
    d.w = x->shape[3];
    d.cout = w->shape[0];
    d.k = w->shape[2];
    d.stride = stride;
    d.pad = pad;
    int64_t num = d.h + 2 * d.pad - d.k;
    int64_t numw = d.w + 2 * d.pad - d.k;
    if (stride < 1 || num < 0 || numw < 0 || num % stride != 0 || numw % stride != 0)
        throw ConfigError("conv2d: output size is not a positive integer for input " +
                          shape_str(x->shape) + ", kernel " + std::to_string(d.k) + ", stride " +
                          std::to_string(stride) + ", pad " + std::to_string(pad));
    d.oh = num / stride + 1;
    d.ow = numw / stride + 1;

    auto out = make_impl({d.batch, d.cout, d.oh, d.ow});
    int64_t K = d.col_rows(), ohw = d.out_hw();
    std::vector<float> col;
    std::vector<float> prod;
    for (int64_t first = 0; first < d.batch; first += kConvChunk) {
        int64_t count = std::min(kConvChunk, d.batch - first);
        int64_t n_cols = count * ohw;
        col.resize(static_cast<size_t>(K * n_cols));
        prod.resize(static_cast<size_t>(d.cout * n_cols));
        im2col(x->data.data(), d, first, count, col.data());
        sgemm(false, false, static_cast<int>(d.cout), static_cast<int>(n_cols),
              static_cast<int>(K), 1.0f, w->data.data(), static_cast<int>(K), col.data(),
              static_cast<int>(n_cols), 0.0f, prod.data(), static_cast<int>(n_cols));
        // prod is [cout][img][ohw]; output wants [img][cout][ohw]
        const float* bias = b->data.data();
        for (int64_t img = 0; img < count; ++img) {
            float* dst = out->data.data() + ((first + img) * d.cout) * ohw;
            for (int64_t c = 0; c < d.cout; ++c) {
                const float* src = prod.data() + (c * count + img) * ohw;
                float bc = bias[c];
                for (int64_t i = 0; i < ohw; ++i) dst[c * ohw + i] = src[i] + bc;
            }
        }
    }

    attach(out, {x, w, b}, [x, w, b, d](const TensorImpl& self) {
        int64_t K = d.col_rows(), ohw = d.out_hw();
        const float* g = self.grad.data();
        if (b->requires_grad) {
            b->ensure_grad();
            float* gb = b->grad.data();
            for (int64_t img = 0; img < d.batch; ++img)
                for (int64_t c = 0; c < d.cout; ++c) {
                    const float* src = g + (img * d.cout + c) * ohw;
                    float acc = 0.0f;
                    for (int64_t i = 0; i < ohw; ++i) acc += src[i];
                    gb[c] += acc;
                }
        }
        if (!w->requires_grad && !x->requires_grad) return;
        if (w->requires_grad) w->ensure_grad();
        if (x->requires_grad) x->ensure_grad();
        std::vector<float> col;
        std::vector<float> gchunk;  // [cout][img][ohw]
        std::vector<float> dcol;
        for (int64_t first = 0; first < d.batch; first += kConvChunk) {
            int64_t count = std::min(kConvChunk, d.batch - first);
            int64_t n_cols = count * ohw;
            gchunk.resize(static_cast<size_t>(d.cout * n_cols));
            for (int64_t img = 0; img < count; ++img)
                for (int64_t c = 0; c < d.cout; ++c)
                    std::memcpy(gchunk.data() + (c * count + img) * ohw,
                                g + ((first + img) * d.cout + c) * ohw, sizeof(float) * ohw);
            if (w->requires_grad) {
                col.resize(static_cast<size_t>(K * n_cols));
                im2col(x->data.data(), d, first, count, col.data());
                // dW += G_chunk * col^T
                sgemm(false, true, static_cast<int>(d.cout), static_cast<int>(K),
                      static_cast<int>(n_cols), 1.0f, gchunk.data(), static_cast<int>(n_cols),
                      col.data(), static_cast<int>(n_cols), 1.0f, w->grad.data(),
                      static_cast<int>(K));
            }
            if (x->requires_grad) {
                dcol.resize(static_cast<size_t>(K * n_cols));
                // dcol = W^T * G_chunk
                sgemm(true, false, static_cast<int>(K), static_cast<int>(n_cols),
                      static_cast<int>(d.cout), 1.0f, w->data.data(), static_cast<int>(K),
                      gchunk.data(), static_cast<int>(n_cols), 0.0f, dcol.data(),
                      static_cast<int>(n_cols));
                col2im_acc(dcol.data(), d, first, count, x->grad.data());
            }
        }
    });
    return Tensor::wrap(out);
}

Tensor maxpool2d(const Tensor& tx, int kernel, int stride) {
    ImplPtr x = tx.impl();
    if (x->shape.size() != 4)
        throw DimensionError("maxpool2d: expected 4-d input, got " + shape_str(x->shape));
    int64_t batch = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    if (kernel < 1 || stride < 1 || h < kernel || w < kernel)
        throw ConfigError("maxpool2d: invalid kernel/stride for input " + shape_str(x->shape));
    int64_t oh = (h - kernel) / stride + 1;
    int64_t ow = (w - kernel) / stride + 1;
    auto out = make_impl({batch, c, oh, ow});
    auto argmax = std::make_shared<std::vector<int32_t>>(out->data.size());
    const float* px = x->data.data();
    float* po = out->data.data();
    int64_t idx = 0;
    for (int64_t bc = 0; bc < batch * c; ++bc) {
        const float* plane = px + bc * h * w;
        for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox, ++idx) {
                int64_t y0 = oy * stride, x0 = ox * stride;
                float best = plane[y0 * w + x0];
                int32_t besti = static_cast<int32_t>(y0 * w + x0);
                for (int64_t ky = 0; ky < kernel; ++ky)
                    for (int64_t kx = 0; kx < kernel; ++kx) {
                        int64_t off = (y0 + ky) * w + (x0 + kx);
                        if (plane[off] > best) {
                            best = plane[off];
                            besti = static_cast<int32_t>(off);
                        }
                    }
                po[idx] = best;
                (*argmax)[static_cast<size_t>(idx)] = besti;
            }
    }
    int64_t plane_in = h * w, plane_out = oh * ow;
    attach(out, {x}, [x, argmax, plane_in, plane_out](const TensorImpl& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const float* g = self.grad.data();
        float* gx = x->grad.data();
        int64_t n = self.numel();
        for (int64_t i = 0; i < n; ++i) {
            int64_t bc = i / plane_out;
            gx[bc * plane_in + (*argmax)[static_cast<size_t>(i)]] += g[i];
        }
    });
    return Tensor::wrap(out);
}

// ---- elementwise -------------------------------------------------------

Tensor relu(const Tensor& x) {
    return unary_op(
        x, [](float v) { return v > 0.0f ? v : 0.0f; },
        [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
        [](float, float y) { return y * (1.0f - y); });
}

Tensor abs(const Tensor& x) {
    return unary_op(
        x, [](float v) { return std::fabs(v); },
        [](float v, float) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); });
}

Tensor square(const Tensor& x) {
    return unary_op(
        x, [](float v) { return v * v; }, [](float v, float) { return 2.0f * v; });
}

Tensor exp(const Tensor& x) {
    return unary_op(
        x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Tensor clamp(const Tensor& x, float lo, float hi) {
    return unary_op(
        x, [lo, hi](float v) { return v < lo ? lo : (v > hi ? hi : v); },
        [lo, hi](float v, float) { return (v > lo && v < hi) ? 1.0f : 0.0f; });
}

Tensor scale(const Tensor& x, float s) {
    return unary_op(
        x, [s](float v) { return s * v; }, [s](float, float) { return s; });
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](float x, float y) { return x + y; },
        [](float, float) { return 1.0f; }, [](float, float) { return 1.0f; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](float x, float y) { return x - y; },
        [](float, float) { return 1.0f; }, [](float, float) { return -1.0f; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](float x, float y) { return x * y; },
        [](float, float y) { return y; }, [](float x, float) { return x; });
}

// ---- reductions --------------------------------------------------------

Tensor sum(const Tensor& tx) {
    ImplPtr x = tx.impl();
    double acc = 0.0;
    for (float v : x->data) acc += v;
    auto out = make_impl({});
    out->data[0] = static_cast<float>(acc);
    attach(out, {x}, [x](const TensorImpl& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        float g = self.grad[0];
        for (auto& gv : x->grad) gv += g;
    });
    return Tensor::wrap(out);
}

Tensor mean(const Tensor& tx) {
    int64_t n = tx.numel();
    return scale(sum(tx), 1.0f / static_cast<float>(n));
}

namespace {

// Reduction plan over a set of axes: for each input linear index, the linear
// offset in the reduced output.
struct ReducePlan {
    Shape out_shape;      // with keep_dims applied
    Shape reduced_shape;  // axes removed
    std::vector<int64_t> out_strides;  // per input dim; 0 on reduced dims
    int64_t group = 1;                 // number of input elements per output
};

ReducePlan make_reduce(const Shape& in, std::vector<int>& axes, bool keep_dims,
                       const char* op) {
    int rank = static_cast<int>(in.size());
    std::vector<bool> is_reduced(rank, false);
    for (int& ax : axes) {
        if (ax < 0) ax += rank;
        if (ax < 0 || ax >= rank)
            throw DimensionError(std::string(op) + ": axis out of range for " + shape_str(in));
        is_reduced[ax] = true;
    }
    ReducePlan plan;
    for (int d = 0; d < rank; ++d) {
        if (is_reduced[d]) {
            plan.group *= in[d];
            if (keep_dims) plan.out_shape.push_back(1);
        } else {
            plan.out_shape.push_back(in[d]);
            plan.reduced_shape.push_back(in[d]);
        }
    }
    auto rstrides = row_major_strides(plan.reduced_shape);
    plan.out_strides.assign(rank, 0);
    int j = 0;
    for (int d = 0; d < rank; ++d)
        if (!is_reduced[d]) plan.out_strides[d] = rstrides[j++];
    return plan;
}

template <class F>
void for_each_reduce(const Shape& in, const std::vector<int64_t>& out_strides, F&& f) {
    int rank = static_cast<int>(in.size());
    int64_t total = shape_numel(in);
    if (rank == 0) {
        f(int64_t{0}, int64_t{0});
        return;
    }
    std::vector<int64_t> coord(rank, 0);
    int64_t oo = 0;
    for (int64_t i = 0; i < total; ++i) {
        f(i, oo);
        for (int d = rank - 1; d >= 0; --d) {
            ++coord[d];
            oo += out_strides[d];
            if (coord[d] < in[d]) break;
            oo -= out_strides[d] * in[d];
            coord[d] = 0;
        }
    }
}

}  // namespace

Tensor sum_over(const Tensor& tx, std::vector<int> axes, bool keep_dims) {
    ImplPtr x = tx.impl();
    ReducePlan plan = make_reduce(x->shape, axes, keep_dims, "sum_over");
    auto out = make_impl(plan.out_shape);
    const float* px = x->data.data();
    float* po = out->data.data();
    for_each_reduce(x->shape, plan.out_strides, [&](int64_t i, int64_t oo) { po[oo] += px[i]; });
    Shape in_shape = x->shape;
    auto strides = plan.out_strides;
    attach(out, {x}, [x, in_shape, strides](const TensorImpl& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const float* g = self.grad.data();
        float* gx = x->grad.data();
        for_each_reduce(in_shape, strides, [&](int64_t i, int64_t oo) { gx[i] += g[oo]; });
    });
    return Tensor::wrap(out);
}

Tensor avg_over(const Tensor& tx, std::vector<int> axes, bool keep_dims) {
    ImplPtr x = tx.impl();
    std::vector<int> axes_copy = axes;
    ReducePlan plan = make_reduce(x->shape, axes_copy, keep_dims, "avg_over");
    return scale(sum_over(tx, axes, keep_dims), 1.0f / static_cast<float>(plan.group));
}

Tensor max_over(const Tensor& tx, int axis, bool keep_dims) {
    ImplPtr x = tx.impl();
    std::vector<int> axes{axis};
    ReducePlan plan = make_reduce(x->shape, axes, keep_dims, "max_over");
    auto out = make_impl(plan.out_shape);
    auto argmax = std::make_shared<std::vector<int64_t>>(out->data.size(), -1);
    const float* px = x->data.data();
    float* po = out->data.data();
    std::fill(out->data.begin(), out->data.end(), -std::numeric_limits<float>::infinity());
    for_each_reduce(x->shape, plan.out_strides, [&](int64_t i, int64_t oo) {
        if (px[i] > po[oo]) {
            po[oo] = px[i];
            (*argmax)[static_cast<size_t>(oo)] = i;
        }
    });
    attach(out, {x}, [x, argmax](const TensorImpl& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const float* g = self.grad.data();
        float* gx = x->grad.data();
        int64_t n = self.numel();
        for (int64_t oo = 0; oo < n; ++oo) gx[(*argmax)[static_cast<size_t>(oo)]] += g[oo];
    });
    return Tensor::wrap(out);
}

Tensor l2_norm_sq(const Tensor& tx) {
    ImplPtr x = tx.impl();
    double acc = 0.0;
    for (float v : x->data) acc += static_cast<double>(v) * v;
    auto out = make_impl({});
    out->data[0] = static_cast<float>(acc);
    attach(out, {x}, [x](const TensorImpl& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        float g = self.grad[0];
        float* gx = x->grad.data();
        const float* px = x->data.data();
        int64_t n = x->numel();
        for (int64_t i = 0; i < n; ++i) gx[i] += 2.0f * px[i] * g;
    });
    return Tensor::wrap(out);
}

// ---- shape / indexing ---------------------------------------------------

Tensor reshape(const Tensor& tx, Shape new_shape) {
    ImplPtr x = tx.impl();
    if (shape_numel(new_shape) != x->numel())
        throw DimensionError("reshape: cannot view " + shape_str(x->shape) + " as " +
                             shape_str(new_shape));
    auto out = std::make_shared<TensorImpl>();
    out->shape = std::move(new_shape);
    out->data = x->data;
    attach(out, {x}, [x](const TensorImpl& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const float* g = self.grad.data();
        float* gx = x->grad.data();
        int64_t n = self.numel();
        for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
    return Tensor::wrap(out);
}

Tensor take_rows(const Tensor& tm, const std::vector<int>& rows) {
    ImplPtr m = tm.impl();
    if (m->shape.size() != 2)
        throw DimensionError("take_rows: expected matrix, got " + shape_str(m->shape));
    int64_t n = m->shape[0], d = m->shape[1];
    for (int r : rows)
        if (r < 0 || r >= n)
            throw ValidationError("take_rows: row index " + std::to_string(r) +
                                  " out of range [0, " + std::to_string(n) + ")");
    auto out = make_impl({static_cast<int64_t>(rows.size()), d});
    for (size_t i = 0; i < rows.size(); ++i)
        std::memcpy(out->data.data() + i * d, m->data.data() + rows[i] * d, sizeof(float) * d);
    auto rows_copy = std::make_shared<std::vector<int>>(rows);
    attach(out, {m}, [m, rows_copy, d](const TensorImpl& self) {
        if (!m->requires_grad) return;
        m->ensure_grad();
        const float* g = self.grad.data();
        float* gm = m->grad.data();
        for (size_t i = 0; i < rows_copy->size(); ++i) {
            int64_t dst = static_cast<int64_t>((*rows_copy)[i]) * d;
            for (int64_t j = 0; j < d; ++j) gm[dst + j] += g[i * d + j];
        }
    });
    return Tensor::wrap(out);
}

// ---- softmax cross entropy ----------------------------------------------

namespace {

// Shared CE kernel; probs are captured for the backward pass.
Tensor cross_entropy_impl(const Tensor& tlogits, const std::vector<int>& labels,
                          const std::vector<float>* weights, float denom) {
    ImplPtr logits = tlogits.impl();
    if (logits->shape.size() != 2)
        throw DimensionError("softmax_cross_entropy: expected B x N logits, got " +
                             shape_str(logits->shape));
    int64_t batch = logits->shape[0], n = logits->shape[1];
    if (static_cast<int64_t>(labels.size()) != batch)
        throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                             " labels for batch " + std::to_string(batch));
    for (int y : labels)
        if (y < 0 || y >= n)
            throw ValidationError("softmax_cross_entropy: label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(n) + ")");
    if (weights && static_cast<int64_t>(weights->size()) != batch)
        throw DimensionError("softmax_cross_entropy: weight count mismatch");

    auto probs = std::make_shared<std::vector<float>>(logits->data.size());
    const float* pl = logits->data.data();
    double total = 0.0;
    for (int64_t i = 0; i < batch; ++i) {
        const float* row = pl + i * n;
        float m = row[0];
        for (int64_t j = 1; j < n; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(row[j]) - m);
        double logz = std::log(z);
        for (int64_t j = 0; j < n; ++j)
            (*probs)[static_cast<size_t>(i * n + j)] =
                static_cast<float>(std::exp(static_cast<double>(row[j]) - m - logz));
        double ce = -(static_cast<double>(row[labels[static_cast<size_t>(i)]]) - m - logz);
        total += (weights ? static_cast<double>((*weights)[static_cast<size_t>(i)]) : 1.0) * ce;
    }
    auto out = make_impl({});
    out->data[0] = static_cast<float>(total / denom);

    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    std::shared_ptr<std::vector<float>> weights_copy;
    if (weights) weights_copy = std::make_shared<std::vector<float>>(*weights);
    attach(out, {logits}, [logits, probs, labels_copy, weights_copy, denom, batch,
                           n](const TensorImpl& self) {
        if (!logits->requires_grad) return;
        logits->ensure_grad();
        float g = self.grad[0] / denom;
        float* gl = logits->grad.data();
        for (int64_t i = 0; i < batch; ++i) {
            float wi = weights_copy ? (*weights_copy)[static_cast<size_t>(i)] : 1.0f;
            if (wi == 0.0f) continue;
            const float* p = probs->data() + i * n;
            float* dst = gl + i * n;
            int y = (*labels_copy)[static_cast<size_t>(i)];
            for (int64_t j = 0; j < n; ++j) dst[j] += g * wi * p[j];
            dst[y] -= g * wi;
        }
    });
    return Tensor::wrap(out);
}

}  // namespace

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    return cross_entropy_impl(logits, labels, nullptr,
                              static_cast<float>(logits.dim(0)));
}

Tensor softmax_cross_entropy_weighted(const Tensor& logits, const std::vector<int>& labels,
                                      const std::vector<float>& weights, float denom) {
    return cross_entropy_impl(logits, labels, &weights, denom);
}

std::vector<float> softmax_rows(const Tensor& tlogits) {
    const auto& logits = *tlogits.impl();
    if (logits.shape.size() != 2)
        throw DimensionError("softmax_rows: expected B x N logits, got " + shape_str(logits.shape));
    int64_t batch = logits.shape[0], n = logits.shape[1];
    std::vector<float> probs(logits.data.size());
    for (int64_t i = 0; i < batch; ++i) {
        const float* row = logits.data.data() + i * n;
        float m = row[0];
        for (int64_t j = 1; j < n; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(row[j]) - m);
        for (int64_t j = 0; j < n; ++j)
            probs[static_cast<size_t>(i * n + j)] =
                static_cast<float>(std::exp(static_cast<double>(row[j]) - m) / z);
    }
    return probs;
}

// ---- batch normalization --------------------------------------------------

BatchNormOut batchnorm2d(const Tensor& tx, const Tensor& tgamma, const Tensor& tbeta, float eps) {
    ImplPtr x = tx.impl(), gamma = tgamma.impl(), beta = tbeta.impl();
    if (x->shape.size() != 4)
        throw DimensionError("batchnorm2d: expected 4-d input, got " + shape_str(x->shape));
    int64_t batch = x->shape[0], c = x->shape[1], hw = x->shape[2] * x->shape[3];
    if (gamma->numel() != c || beta->numel() != c)
        throw DimensionError("batchnorm2d: gamma/beta size must equal channel count " +
                             std::to_string(c));
    int64_t m = batch * hw;

    std::vector<float> mu(static_cast<size_t>(c)), var(static_cast<size_t>(c));
    const float* px = x->data.data();
    for (int64_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int64_t i = 0; i < batch; ++i) {
            const float* p = px + (i * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j) acc += p[j];
        }
        mu[static_cast<size_t>(ch)] = static_cast<float>(acc / m);
        double vacc = 0.0;
        float mc = mu[static_cast<size_t>(ch)];
        for (int64_t i = 0; i < batch; ++i) {
            const float* p = px + (i * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j) {
                double dlt = static_cast<double>(p[j]) - mc;
                vacc += dlt * dlt;
            }
        }
        var[static_cast<size_t>(ch)] = static_cast<float>(vacc / m);
    }

    auto inv = std::make_shared<std::vector<float>>(static_cast<size_t>(c));
    for (int64_t ch = 0; ch < c; ++ch)
        (*inv)[static_cast<size_t>(ch)] =
            1.0f / std::sqrt(var[static_cast<size_t>(ch)] + eps);
    auto mu_sp = std::make_shared<std::vector<float>>(mu);

    auto out = make_impl(x->shape);
    float* po = out->data.data();
    const float* pg = gamma->data.data();
    const float* pb = beta->data.data();
    for (int64_t i = 0; i < batch; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            const float* src = px + (i * c + ch) * hw;
            float* dst = po + (i * c + ch) * hw;
            float mc = (*mu_sp)[static_cast<size_t>(ch)];
            float ic = (*inv)[static_cast<size_t>(ch)];
            float gc = pg[ch], bc = pb[ch];
            for (int64_t j = 0; j < hw; ++j) dst[j] = gc * (src[j] - mc) * ic + bc;
        }

    attach(out, {x, gamma, beta},
           [x, gamma, beta, mu_sp, inv, batch, c, hw, m](const TensorImpl& self) {
               const float* g = self.grad.data();
               const float* px2 = x->data.data();
               const float* pg2 = gamma->data.data();
               // per-channel reductions of gout and gout * xhat
               std::vector<double> sum_g(static_cast<size_t>(c), 0.0),
                   sum_gx(static_cast<size_t>(c), 0.0);
               for (int64_t i = 0; i < batch; ++i)
                   for (int64_t ch = 0; ch < c; ++ch) {
                       const float* gp = g + (i * c + ch) * hw;
                       const float* xp = px2 + (i * c + ch) * hw;
                       float mc = (*mu_sp)[static_cast<size_t>(ch)];
                       float ic = (*inv)[static_cast<size_t>(ch)];
                       double a = 0.0, bacc = 0.0;
                       for (int64_t j = 0; j < hw; ++j) {
                           a += gp[j];
                           bacc += static_cast<double>(gp[j]) * ((xp[j] - mc) * ic);
                       }
                       sum_g[static_cast<size_t>(ch)] += a;
                       sum_gx[static_cast<size_t>(ch)] += bacc;
                   }
               if (beta->requires_grad) {
                   beta->ensure_grad();
                   for (int64_t ch = 0; ch < c; ++ch)
                       beta->grad[static_cast<size_t>(ch)] +=
                           static_cast<float>(sum_g[static_cast<size_t>(ch)]);
               }
               if (gamma->requires_grad) {
                   gamma->ensure_grad();
                   for (int64_t ch = 0; ch < c; ++ch)
                       gamma->grad[static_cast<size_t>(ch)] +=
                           static_cast<float>(sum_gx[static_cast<size_t>(ch)]);
               }
               if (x->requires_grad) {
                   x->ensure_grad();
                   float* gx = x->grad.data();
                   float fm = static_cast<float>(m);
                   for (int64_t i = 0; i < batch; ++i)
                       for (int64_t ch = 0; ch < c; ++ch) {
                           const float* gp = g + (i * c + ch) * hw;
                           const float* xp = px2 + (i * c + ch) * hw;
                           float* dst = gx + (i * c + ch) * hw;
                           float mc = (*mu_sp)[static_cast<size_t>(ch)];
                           float ic = (*inv)[static_cast<size_t>(ch)];
                           float k = pg2[ch] * ic / fm;
                           float sg = static_cast<float>(sum_g[static_cast<size_t>(ch)]);
                           float sgx = static_cast<float>(sum_gx[static_cast<size_t>(ch)]);
                           for (int64_t j = 0; j < hw; ++j) {
                               float xhat = (xp[j] - mc) * ic;
                               dst[j] += k * (fm * gp[j] - sg - xhat * sgx);
                           }
                       }
               }
           });
    BatchNormOut result;
    result.out = Tensor::wrap(out);
    result.batch_mean = std::move(mu);
    result.batch_var = std::move(var);
    return result;
}

Tensor batchnorm2d_eval(const Tensor& tx, const Tensor& tgamma, const Tensor& tbeta,
                        const std::vector<float>& mean, const std::vector<float>& var,
                        float eps) {
    ImplPtr x = tx.impl(), gamma = tgamma.impl(), beta = tbeta.impl();
    if (x->shape.size() != 4)
        throw DimensionError("batchnorm2d_eval: expected 4-d input, got " + shape_str(x->shape));
    int64_t batch = x->shape[0], c = x->shape[1], hw = x->shape[2] * x->shape[3];
    if (static_cast<int64_t>(mean.size()) != c || static_cast<int64_t>(var.size()) != c ||
        gamma->numel() != c || beta->numel() != c)
        throw DimensionError("batchnorm2d_eval: statistics size must equal channel count");
    auto inv = std::make_shared<std::vector<float>>(static_cast<size_t>(c));
    auto mu = std::make_shared<std::vector<float>>(mean);
    for (int64_t ch = 0; ch < c; ++ch)
        (*inv)[static_cast<size_t>(ch)] = 1.0f / std::sqrt(var[static_cast<size_t>(ch)] + eps);
    auto out = make_impl(x->shape);
    const float* px = x->data.data();
    const float* pg = gamma->data.data();
    const float* pb = beta->data.data();
    float* po = out->data.data();
    for (int64_t i = 0; i < batch; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            const float* src = px + (i * c + ch) * hw;
            float* dst = po + (i * c + ch) * hw;
            float mc = (*mu)[static_cast<size_t>(ch)], ic = (*inv)[static_cast<size_t>(ch)];
            float gc = pg[ch], bc = pb[ch];
            for (int64_t j = 0; j < hw; ++j) dst[j] = gc * (src[j] - mc) * ic + bc;
        }
    attach(out, {x, gamma, beta}, [x, gamma, beta, mu, inv, batch, c, hw](const TensorImpl& self) {
        const float* g = self.grad.data();
        const float* px2 = x->data.data();
        const float* pg2 = gamma->data.data();
        if (x->requires_grad) x->ensure_grad();
        if (gamma->requires_grad) gamma->ensure_grad();
        if (beta->requires_grad) beta->ensure_grad();
        for (int64_t i = 0; i < batch; ++i)
            for (int64_t ch = 0; ch < c; ++ch) {
                const float* gp = g + (i * c + ch) * hw;
                const float* xp = px2 + (i * c + ch) * hw;
                float mc = (*mu)[static_cast<size_t>(ch)], ic = (*inv)[static_cast<size_t>(ch)];
                for (int64_t j = 0; j < hw; ++j) {
                    float xhat = (xp[j] - mc) * ic;
                    if (x->requires_grad)
                        x->grad[(i * c + ch) * hw + j] += gp[j] * pg2[ch] * ic;
                    if (gamma->requires_grad) gamma->grad[static_cast<size_t>(ch)] += gp[j] * xhat;
                    if (beta->requires_grad) beta->grad[static_cast<size_t>(ch)] += gp[j];
                }
            }
    });
    return Tensor::wrap(out);
}

}  // namespace dacnet
