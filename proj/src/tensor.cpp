#include "echotune/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <unordered_set>

#include "echotune/error.hpp"

namespace echotune {

namespace detail {

struct TensorImpl {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad; // empty until first needed
    bool requires_grad = false;
    bool needs_grad = false;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(TensorImpl&)> backward_fn;
    std::string op_name;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }
    double* ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad.data();
    }
};

} // namespace detail

using detail::TensorImpl;

namespace {

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

void check_defined(const Tensor& t, const char* who) {
    if (!t.defined()) throw UsageError(std::string(who) + ": undefined tensor operand");
}

// Dot product with eight independent accumulators: a fixed summation order
// that the compiler can keep in vector registers without reassociating.
double dot8(const double* a, const double* b, int n) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
    int k = 0;
    for (; k + 8 <= n; k += 8) {
        s0 += a[k] * b[k];
        s1 += a[k + 1] * b[k + 1];
        s2 += a[k + 2] * b[k + 2];
        s3 += a[k + 3] * b[k + 3];
        s4 += a[k + 4] * b[k + 4];
        s5 += a[k + 5] * b[k + 5];
        s6 += a[k + 6] * b[k + 6];
        s7 += a[k + 7] * b[k + 7];
    }
    double tail = 0;
    for (; k < n; ++k) tail += a[k] * b[k];
    return (((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7))) + tail;
}

// C[M x N] (+)= A_eff[M x K] * B_eff[K x N]; A memory is [K x M] when ta,
// B memory is [N x K] when tb. Row-major throughout.
void gemm(const double* a, const double* b, double* c, int m, int n, int k, bool ta, bool tb) {
    if (!ta && !tb) {
        for (int i = 0; i < m; ++i) {
            double* crow = c + static_cast<int64_t>(i) * n;
            const double* arow = a + static_cast<int64_t>(i) * k;
            for (int kk = 0; kk < k; ++kk) {
                double av = arow[kk];
                if (av == 0.0) continue;
                const double* brow = b + static_cast<int64_t>(kk) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!ta && tb) {
        for (int i = 0; i < m; ++i) {
            const double* arow = a + static_cast<int64_t>(i) * k;
            double* crow = c + static_cast<int64_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                crow[j] += dot8(arow, b + static_cast<int64_t>(j) * k, k);
            }
        }
    } else if (ta && !tb) {
        for (int kk = 0; kk < k; ++kk) {
            const double* arow = a + static_cast<int64_t>(kk) * m;
            const double* brow = b + static_cast<int64_t>(kk) * n;
            for (int i = 0; i < m; ++i) {
                double av = arow[i];
                if (av == 0.0) continue;
                double* crow = c + static_cast<int64_t>(i) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        for (int i = 0; i < m; ++i) {
            double* crow = c + static_cast<int64_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const double* brow = b + static_cast<int64_t>(j) * k;
                double acc = 0.0;
                for (int kk = 0; kk < k; ++kk) acc += a[static_cast<int64_t>(kk) * m + i] * brow[kk];
                crow[j] += acc;
            }
        }
    }
}

} // namespace

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// --------------------------------------------------------------------------
// Tensor handle
// --------------------------------------------------------------------------

Tensor make_node(std::string op_name, std::vector<Tensor> inputs, std::vector<int> shape,
                 std::vector<double> values, std::function<void(TensorImpl&)> backward_fn) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->value = std::move(values);
    impl->op_name = std::move(op_name);
    bool needs = false;
    for (const auto& t : inputs) {
        if (t.defined() && t.impl()->needs_grad) needs = true;
    }
    impl->needs_grad = needs;
    if (needs) {
        impl->inputs.reserve(inputs.size());
        for (auto& t : inputs) impl->inputs.push_back(t.impl_);
        impl->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    return from_values(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double fill, bool requires_grad) {
    int64_t n = shape_numel(shape);
    return from_values(std::move(shape), std::vector<double>(static_cast<size_t>(n), fill),
                       requires_grad);
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    int64_t n = shape_numel(shape);
    for (int d : shape) {
        if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(shape));
    }
    if (values.empty()) values.assign(static_cast<size_t>(n), 0.0);
    if (static_cast<int64_t>(values.size()) != n) {
        throw DimensionError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->value = std::move(values);
    impl->requires_grad = requires_grad;
    impl->needs_grad = requires_grad;
    impl->op_name = "leaf";
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v) { return from_values({1}, {v}); }

const std::vector<int>& Tensor::shape() const { return impl_->shape; }
int Tensor::ndim() const { return static_cast<int>(impl_->shape.size()); }
int Tensor::dim(int i) const { return impl_->shape.at(static_cast<size_t>(i)); }
int64_t Tensor::numel() const { return impl_->numel(); }

std::span<const double> Tensor::values() const { return impl_->value; }
std::vector<double>& Tensor::raw_values() { return impl_->value; }
double Tensor::at(int i) const { return impl_->value.at(static_cast<size_t>(i)); }
double Tensor::at(int i, int j) const {
    return impl_->value.at(static_cast<size_t>(i) * impl_->shape.at(1) + static_cast<size_t>(j));
}
double Tensor::item() const {
    if (numel() != 1) throw UsageError("item() on tensor with shape " + shape_str(impl_->shape));
    return impl_->value[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }
double* Tensor::grad_data() { return impl_->ensure_grad(); }
void Tensor::zero_grad() {
    if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    check_defined(*this, "detach");
    return from_values(impl_->shape, impl_->value, false);
}

Tensor detach(const Tensor& x) { return x.detach(); }

// --------------------------------------------------------------------------
// backward
// --------------------------------------------------------------------------

void backward(const Tensor& loss) {
    check_defined(loss, "backward");
    if (loss.numel() != 1) {
        throw UsageError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!std::isfinite(loss.item())) {
        throw NumericError("backward on non-finite loss value");
    }
    TensorImpl* root = loss.impl();
    if (!root->needs_grad) return;

    // Iterative DFS post-order over grad-carrying nodes.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            TensorImpl* child = node->inputs[next].get();
            ++next;
            if (child->needs_grad && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior (op) gradients are per-sweep scratch; only leaves accumulate
    // across repeated backward calls.
    for (TensorImpl* node : order) {
        if (node->backward_fn && !node->grad.empty()) {
            std::fill(node->grad.begin(), node->grad.end(), 0.0);
        }
    }

    root->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

// --------------------------------------------------------------------------
// custom op surface
// --------------------------------------------------------------------------

std::span<const double> OpBackwardContext::out_grad() const { return node_->grad; }
std::span<const double> OpBackwardContext::out_value() const { return node_->value; }
std::span<const double> OpBackwardContext::input_value(int i) const {
    return node_->inputs.at(static_cast<size_t>(i))->value;
}
double* OpBackwardContext::input_grad(int i) {
    TensorImpl* in = node_->inputs.at(static_cast<size_t>(i)).get();
    if (!in->needs_grad) return nullptr;
    return in->ensure_grad();
}
int OpBackwardContext::input_count() const { return static_cast<int>(node_->inputs.size()); }

Tensor custom_op(std::string op_name, std::vector<Tensor> inputs, std::vector<int> out_shape,
                 std::vector<double> out_values, std::function<void(OpBackwardContext&)> backward_fn) {
    for (const auto& t : inputs) check_defined(t, op_name.c_str());
    auto fn = [user = std::move(backward_fn)](TensorImpl& self) {
        OpBackwardContext ctx(&self);
        user(ctx);
    };
    return make_node(std::move(op_name), std::move(inputs), std::move(out_shape),
                     std::move(out_values), std::move(fn));
}

// --------------------------------------------------------------------------
// matmul
// --------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    if (a.ndim() != 2 || b.ndim() != 2) {
        throw DimensionError("matmul requires 2-D operands, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const int m = trans_a ? a.dim(1) : a.dim(0);
    const int ka = trans_a ? a.dim(0) : a.dim(1);
    const int kb = trans_b ? b.dim(1) : b.dim(0);
    const int n = trans_b ? b.dim(0) : b.dim(1);
    if (ka != kb) {
        throw DimensionError("matmul inner dimensions disagree: " + shape_str(a.shape()) +
                             (trans_a ? "^T" : "") + " vs " + shape_str(b.shape()) +
                             (trans_b ? "^T" : ""));
    }
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    gemm(a.values().data(), b.values().data(), out.data(), m, n, ka, trans_a, trans_b);

    auto fn = [m, n, k = ka, trans_a, trans_b](TensorImpl& self) {
        const double* g = self.grad.data();
        TensorImpl* ia = self.inputs[0].get();
        TensorImpl* ib = self.inputs[1].get();
        if (ia->needs_grad) {
            double* da = ia->ensure_grad();
            if (!trans_a) {
                // dA[m x k] = g * B_eff^T
                gemm(g, ib->value.data(), da, m, k, n, false, !trans_b);
            } else {
                // A memory is [k x m]: dA = B_eff * g^T
                gemm(ib->value.data(), g, da, k, m, n, trans_b, true);
            }
        }
        if (ib->needs_grad) {
            double* db = ib->ensure_grad();
            if (!trans_b) {
                // dB[k x n] = A_eff^T * g
                gemm(ia->value.data(), g, db, k, n, m, !trans_a, false);
            } else {
                // B memory is [n x k]: dB = g^T * A_eff
                gemm(g, ia->value.data(), db, n, k, m, true, trans_a);
            }
        }
    };
    return make_node("matmul", {a, b}, {m, n}, std::move(out), std::move(fn));
}

// --------------------------------------------------------------------------
// elementwise binary family (same shape, or one single-element operand)
// --------------------------------------------------------------------------

namespace {

enum class Broadcast { none, a_scalar, b_scalar };

Broadcast binary_layout(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() == b.shape()) return Broadcast::none;
    if (a.numel() == 1) return Broadcast::a_scalar;
    if (b.numel() == 1) return Broadcast::b_scalar;
    throw DimensionError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

} // namespace

#define ECHOTUNE_BINARY_PROLOGUE(name)                                                    \
    check_defined(a, name);                                                               \
    check_defined(b, name);                                                               \
    const Broadcast bc = binary_layout(a, b, name);                                       \
    const Tensor& big = (bc == Broadcast::a_scalar) ? b : a;                              \
    const int64_t n = big.numel();                                                        \
    std::vector<double> out(static_cast<size_t>(n));                                      \
    const double* av = a.values().data();                                                 \
    const double* bv = b.values().data();

Tensor add(const Tensor& a, const Tensor& b) {
    ECHOTUNE_BINARY_PROLOGUE("add")
    for (int64_t i = 0; i < n; ++i) {
        out[i] = av[bc == Broadcast::a_scalar ? 0 : i] + bv[bc == Broadcast::b_scalar ? 0 : i];
    }
    auto fn = [bc, n](TensorImpl& self) {
        const double* g = self.grad.data();
        TensorImpl* ia = self.inputs[0].get();
        TensorImpl* ib = self.inputs[1].get();
        if (ia->needs_grad) {
            double* da = ia->ensure_grad();
            if (bc == Broadcast::a_scalar) {
                for (int64_t i = 0; i < n; ++i) da[0] += g[i];
            } else {
                for (int64_t i = 0; i < n; ++i) da[i] += g[i];
            }
        }
        if (ib->needs_grad) {
            double* db = ib->ensure_grad();
            if (bc == Broadcast::b_scalar) {
                for (int64_t i = 0; i < n; ++i) db[0] += g[i];
            } else {
                for (int64_t i = 0; i < n; ++i) db[i] += g[i];
            }
        }
    };
    return make_node("add", {a, b}, big.shape(), std::move(out), std::move(fn));
}

Tensor sub(const Tensor& a, const Tensor& b) {
    ECHOTUNE_BINARY_PROLOGUE("sub")
    for (int64_t i = 0; i < n; ++i) {
        out[i] = av[bc == Broadcast::a_scalar ? 0 : i] - bv[bc == Broadcast::b_scalar ? 0 : i];
    }
    auto fn = [bc, n](TensorImpl& self) {
        const double* g = self.grad.data();
        TensorImpl* ia = self.inputs[0].get();
        TensorImpl* ib = self.inputs[1].get();
        if (ia->needs_grad) {
            double* da = ia->ensure_grad();
            if (bc == Broadcast::a_scalar) {
                for (int64_t i = 0; i < n; ++i) da[0] += g[i];
            } else {
                for (int64_t i = 0; i < n; ++i) da[i] += g[i];
            }
        }
        if (ib->needs_grad) {
            double* db = ib->ensure_grad();
            if (bc == Broadcast::b_scalar) {
                for (int64_t i = 0; i < n; ++i) db[0] -= g[i];
            } else {
                for (int64_t i = 0; i < n; ++i) db[i] -= g[i];
            }
        }
    };
    return make_node("sub", {a, b}, big.shape(), std::move(out), std::move(fn));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    ECHOTUNE_BINARY_PROLOGUE("mul")
    for (int64_t i = 0; i < n; ++i) {
        out[i] = av[bc == Broadcast::a_scalar ? 0 : i] * bv[bc == Broadcast::b_scalar ? 0 : i];
    }
    auto fn = [bc, n](TensorImpl& self) {
        const double* g = self.grad.data();
        TensorImpl* ia = self.inputs[0].get();
        TensorImpl* ib = self.inputs[1].get();
        const double* avv = ia->value.data();
        const double* bvv = ib->value.data();
        if (ia->needs_grad) {
            double* da = ia->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                double go = g[i] * bvv[bc == Broadcast::b_scalar ? 0 : i];
                da[bc == Broadcast::a_scalar ? 0 : i] += go;
            }
        }
        if (ib->needs_grad) {
            double* db = ib->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                double go = g[i] * avv[bc == Broadcast::a_scalar ? 0 : i];
                db[bc == Broadcast::b_scalar ? 0 : i] += go;
            }
        }
    };
    return make_node("mul", {a, b}, big.shape(), std::move(out), std::move(fn));
}

Tensor div(const Tensor& a, const Tensor& b) {
    ECHOTUNE_BINARY_PROLOGUE("div")
    for (int64_t i = 0; i < n; ++i) {
        out[i] = av[bc == Broadcast::a_scalar ? 0 : i] / bv[bc == Broadcast::b_scalar ? 0 : i];
    }
    auto fn = [bc, n](TensorImpl& self) {
        const double* g = self.grad.data();
        TensorImpl* ia = self.inputs[0].get();
        TensorImpl* ib = self.inputs[1].get();
        const double* avv = ia->value.data();
        const double* bvv = ib->value.data();
        if (ia->needs_grad) {
            double* da = ia->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                double bb = bvv[bc == Broadcast::b_scalar ? 0 : i];
                da[bc == Broadcast::a_scalar ? 0 : i] += g[i] / bb;
            }
        }
        if (ib->needs_grad) {
            double* db = ib->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                double aa = avv[bc == Broadcast::a_scalar ? 0 : i];
                double bb = bvv[bc == Broadcast::b_scalar ? 0 : i];
                db[bc == Broadcast::b_scalar ? 0 : i] -= g[i] * aa / (bb * bb);
            }
        }
    };
    return make_node("div", {a, b}, big.shape(), std::move(out), std::move(fn));
}

#undef ECHOTUNE_BINARY_PROLOGUE

Tensor scale(const Tensor& a, double c) {
    check_defined(a, "scale");
    const int64_t n = a.numel();
    std::vector<double> out(static_cast<size_t>(n));
    const double* av = a.values().data();
    for (int64_t i = 0; i < n; ++i) out[i] = av[i] * c;
    auto fn = [c, n](TensorImpl& self) {
        TensorImpl* ia = self.inputs[0].get();
        if (!ia->needs_grad) return;
        double* da = ia->ensure_grad();
        const double* g = self.grad.data();
        for (int64_t i = 0; i < n; ++i) da[i] += c * g[i];
    };
    return make_node("scale", {a}, a.shape(), std::move(out), std::move(fn));
}

// --------------------------------------------------------------------------
// unary nonlinearities
// --------------------------------------------------------------------------

Tensor tanh(const Tensor& a) {
    check_defined(a, "tanh");
    const int64_t n = a.numel();
    std::vector<double> out(static_cast<size_t>(n));
    const double* av = a.values().data();
    for (int64_t i = 0; i < n; ++i) out[i] = std::tanh(av[i]);
    auto fn = [n](TensorImpl& self) {
        TensorImpl* ia = self.inputs[0].get();
        if (!ia->needs_grad) return;
        double* da = ia->ensure_grad();
        const double* g = self.grad.data();
        const double* y = self.value.data();
        for (int64_t i = 0; i < n; ++i) da[i] += g[i] * (1.0 - y[i] * y[i]);
    };
    return make_node("tanh", {a}, a.shape(), std::move(out), std::move(fn));
}

Tensor sigmoid(const Tensor& a) {
    check_defined(a, "sigmoid");
    const int64_t n = a.numel();
    std::vector<double> out(static_cast<size_t>(n));
    const double* av = a.values().data();
    for (int64_t i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-av[i]));
    auto fn = [n](TensorImpl& self) {
        TensorImpl* ia = self.inputs[0].get();
        if (!ia->needs_grad) return;
        double* da = ia->ensure_grad();
        const double* g = self.grad.data();
        const double* y = self.value.data();
        for (int64_t i = 0; i < n; ++i) da[i] += g[i] * y[i] * (1.0 - y[i]);
    };
    return make_node("sigmoid", {a}, a.shape(), std::move(out), std::move(fn));
}

Tensor silu(const Tensor& a) {
    check_defined(a, "silu");
    const int64_t n = a.numel();
    std::vector<double> out(static_cast<size_t>(n));
    std::vector<double> sig(static_cast<size_t>(n));
    const double* av = a.values().data();
    for (int64_t i = 0; i < n; ++i) {
        sig[i] = 1.0 / (1.0 + std::exp(-av[i]));
        out[i] = av[i] * sig[i];
    }
    auto fn = [n, sig = std::move(sig)](TensorImpl& self) {
        TensorImpl* ia = self.inputs[0].get();
        if (!ia->needs_grad) return;
        double* da = ia->ensure_grad();
        const double* g = self.grad.data();
        const double* x = ia->value.data();
        for (int64_t i = 0; i < n; ++i) {
            da[i] += g[i] * sig[i] * (1.0 + x[i] * (1.0 - sig[i]));
        }
    };
    return make_node("silu", {a}, a.shape(), std::move(out), std::move(fn));
}

// --------------------------------------------------------------------------
// normalization and row/column scaling
// --------------------------------------------------------------------------

namespace {

// Interprets a 1-D tensor as a single row; returns {rows, cols}.
std::pair<int, int> rows_cols(const Tensor& x, const char* who) {
    if (x.ndim() == 1) return {1, x.dim(0)};
    if (x.ndim() == 2) return {x.dim(0), x.dim(1)};
    throw DimensionError(std::string(who) + ": expected 1-D or 2-D, got " + shape_str(x.shape()));
}

} // namespace

Tensor rms_norm_rows(const Tensor& x) {
    check_defined(x, "rms_norm_rows");
    auto [rows, cols] = rows_cols(x, "rms_norm_rows");
    std::vector<double> out(static_cast<size_t>(rows) * cols);
    std::vector<double> inv(static_cast<size_t>(rows));
    const double* xv = x.values().data();
    for (int i = 0; i < rows; ++i) {
        const double* r = xv + static_cast<int64_t>(i) * cols;
        double ms = 0.0;
        for (int j = 0; j < cols; ++j) ms += r[j] * r[j];
        ms = ms / cols + kRmsEps;
        inv[static_cast<size_t>(i)] = 1.0 / std::sqrt(ms);
        for (int j = 0; j < cols; ++j) out[static_cast<size_t>(i) * cols + j] = r[j] * inv[static_cast<size_t>(i)];
    }
    auto fn = [rows, cols, inv = std::move(inv)](TensorImpl& self) {
        TensorImpl* ix = self.inputs[0].get();
        if (!ix->needs_grad) return;
        double* dx = ix->ensure_grad();
        const double* g = self.grad.data();
        const double* xv = ix->value.data();
        for (int i = 0; i < rows; ++i) {
            const double* gr = g + static_cast<int64_t>(i) * cols;
            const double* xr = xv + static_cast<int64_t>(i) * cols;
            double* dr = dx + static_cast<int64_t>(i) * cols;
            double dot = 0.0;
            for (int j = 0; j < cols; ++j) dot += gr[j] * xr[j];
            const double iv = inv[static_cast<size_t>(i)];
            const double coeff = iv * iv * iv * dot / cols;
            for (int j = 0; j < cols; ++j) dr[j] += iv * gr[j] - coeff * xr[j];
        }
    };
    return make_node("rms_norm_rows", {x}, x.shape(), std::move(out), std::move(fn));
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
    check_defined(x, "mul_rowvec");
    check_defined(v, "mul_rowvec");
    auto [rows, cols] = rows_cols(x, "mul_rowvec");
    if (v.ndim() != 1 || v.dim(0) != cols) {
        throw DimensionError("mul_rowvec: vector " + shape_str(v.shape()) + " does not match columns of " +
                             shape_str(x.shape()));
    }
    std::vector<double> out(static_cast<size_t>(rows) * cols);
    const double* xv = x.values().data();
    const double* vv = v.values().data();
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            out[static_cast<size_t>(i) * cols + j] = xv[static_cast<int64_t>(i) * cols + j] * vv[j];
        }
    }
    auto fn = [rows, cols](TensorImpl& self) {
        const double* g = self.grad.data();
        TensorImpl* ix = self.inputs[0].get();
        TensorImpl* ivv = self.inputs[1].get();
        if (ix->needs_grad) {
            double* dx = ix->ensure_grad();
            const double* vv = ivv->value.data();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j)
                    dx[static_cast<int64_t>(i) * cols + j] += g[static_cast<int64_t>(i) * cols + j] * vv[j];
        }
        if (ivv->needs_grad) {
            double* dv = ivv->ensure_grad();
            const double* xv = ix->value.data();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j)
                    dv[j] += g[static_cast<int64_t>(i) * cols + j] * xv[static_cast<int64_t>(i) * cols + j];
        }
    };
    return make_node("mul_rowvec", {x, v}, x.shape(), std::move(out), std::move(fn));
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
    check_defined(x, "scale_rows");
    check_defined(s, "scale_rows");
    auto [rows, cols] = rows_cols(x, "scale_rows");
    if (s.ndim() != 1 || s.dim(0) != rows) {
        throw DimensionError("scale_rows: scale vector " + shape_str(s.shape()) +
                             " does not match rows of " + shape_str(x.shape()));
    }
    std::vector<double> out(static_cast<size_t>(rows) * cols);
    const double* xv = x.values().data();
    const double* sv = s.values().data();
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            out[static_cast<size_t>(i) * cols + j] = xv[static_cast<int64_t>(i) * cols + j] * sv[i];
    auto fn = [rows, cols](TensorImpl& self) {
        const double* g = self.grad.data();
        TensorImpl* ix = self.inputs[0].get();
        TensorImpl* is = self.inputs[1].get();
        if (ix->needs_grad) {
            double* dx = ix->ensure_grad();
            const double* sv = is->value.data();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j)
                    dx[static_cast<int64_t>(i) * cols + j] += g[static_cast<int64_t>(i) * cols + j] * sv[i];
        }
        if (is->needs_grad) {
            double* ds = is->ensure_grad();
            const double* xv = ix->value.data();
            for (int i = 0; i < rows; ++i) {
                double acc = 0.0;
                for (int j = 0; j < cols; ++j)
                    acc += g[static_cast<int64_t>(i) * cols + j] * xv[static_cast<int64_t>(i) * cols + j];
                ds[i] += acc;
            }
        }
    };
    return make_node("scale_rows", {x, s}, x.shape(), std::move(out), std::move(fn));
}

Tensor rows_l2norm(const Tensor& x, double floor) {
    check_defined(x, "rows_l2norm");
    auto [rows, cols] = rows_cols(x, "rows_l2norm");
    std::vector<double> out(static_cast<size_t>(rows));
    const double* xv = x.values().data();
    for (int i = 0; i < rows; ++i) {
        double acc = 0.0;
        for (int j = 0; j < cols; ++j) {
            double e = xv[static_cast<int64_t>(i) * cols + j];
            acc += e * e;
        }
        out[static_cast<size_t>(i)] = std::max(std::sqrt(acc), floor);
    }
    auto fn = [rows, cols, floor](TensorImpl& self) {
        TensorImpl* ix = self.inputs[0].get();
        if (!ix->needs_grad) return;
        double* dx = ix->ensure_grad();
        const double* g = self.grad.data();
        const double* y = self.value.data();
        const double* xv = ix->value.data();
        for (int i = 0; i < rows; ++i) {
            if (y[i] <= floor) continue; // clamped: zero gradient
            for (int j = 0; j < cols; ++j)
                dx[static_cast<int64_t>(i) * cols + j] += g[i] * xv[static_cast<int64_t>(i) * cols + j] / y[i];
        }
    };
    return make_node("rows_l2norm", {x}, {rows}, std::move(out), std::move(fn));
}

// --------------------------------------------------------------------------
// indexing / layout
// --------------------------------------------------------------------------

Tensor gather_rows(const Tensor& x, std::span<const int> rows) {
    check_defined(x, "gather_rows");
    if (x.ndim() != 2) throw DimensionError("gather_rows: expected 2-D, got " + shape_str(x.shape()));
    const int n = x.dim(0), m = x.dim(1);
    std::vector<double> out(rows.size() * static_cast<size_t>(m));
    const double* xv = x.values().data();
    for (size_t r = 0; r < rows.size(); ++r) {
        int idx = rows[r];
        if (idx < 0 || idx >= n) {
            throw DataError("gather_rows: index " + std::to_string(idx) + " out of range [0, " +
                            std::to_string(n) + ")");
        }
        std::memcpy(out.data() + r * static_cast<size_t>(m), xv + static_cast<int64_t>(idx) * m,
                    sizeof(double) * static_cast<size_t>(m));
    }
    std::vector<int> idxs(rows.begin(), rows.end());
    auto fn = [m, idxs = std::move(idxs)](TensorImpl& self) {
        TensorImpl* ix = self.inputs[0].get();
        if (!ix->needs_grad) return;
        double* dx = ix->ensure_grad();
        const double* g = self.grad.data();
        for (size_t r = 0; r < idxs.size(); ++r) {
            double* drow = dx + static_cast<int64_t>(idxs[r]) * m;
            const double* grow = g + r * static_cast<size_t>(m);
            for (int j = 0; j < m; ++j) drow[j] += grow[j];
        }
    };
    return make_node("gather_rows", {x}, {static_cast<int>(rows.size()), m}, std::move(out),
                     std::move(fn));
}

Tensor slice_cols(const Tensor& x, int start, int count) {
    check_defined(x, "slice_cols");
    if (x.ndim() != 2) throw DimensionError("slice_cols: expected 2-D, got " + shape_str(x.shape()));
    const int n = x.dim(0), m = x.dim(1);
    if (start < 0 || count <= 0 || start + count > m) {
        throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " +
                             std::to_string(start + count) + ") outside " + shape_str(x.shape()));
    }
    std::vector<double> out(static_cast<size_t>(n) * count);
    const double* xv = x.values().data();
    for (int i = 0; i < n; ++i)
        std::memcpy(out.data() + static_cast<size_t>(i) * count, xv + static_cast<int64_t>(i) * m + start,
                    sizeof(double) * static_cast<size_t>(count));
    auto fn = [n, m, start, count](TensorImpl& self) {
        TensorImpl* ix = self.inputs[0].get();
        if (!ix->needs_grad) return;
        double* dx = ix->ensure_grad();
        const double* g = self.grad.data();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < count; ++j)
                dx[static_cast<int64_t>(i) * m + start + j] += g[static_cast<int64_t>(i) * count + j];
    };
    return make_node("slice_cols", {x}, {n, count}, std::move(out), std::move(fn));
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw UsageError("concat_cols: no operands");
    const int n = parts[0].dim(0);
    int total = 0;
    for (const auto& p : parts) {
        check_defined(p, "concat_cols");
        if (p.ndim() != 2 || p.dim(0) != n) {
            throw DimensionError("concat_cols: row mismatch, expected " + std::to_string(n) +
                                 " rows, got " + shape_str(p.shape()));
        }
        total += p.dim(1);
    }
    std::vector<double> out(static_cast<size_t>(n) * total);
    std::vector<int> widths;
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        const double* pv = p.values().data();
        for (int i = 0; i < n; ++i)
            std::memcpy(out.data() + static_cast<size_t>(i) * total + off,
                        pv + static_cast<int64_t>(i) * w, sizeof(double) * static_cast<size_t>(w));
        widths.push_back(w);
        off += w;
    }
    auto fn = [n, total, widths = std::move(widths)](TensorImpl& self) {
        const double* g = self.grad.data();
        int off = 0;
        for (size_t p = 0; p < widths.size(); ++p) {
            TensorImpl* ip = self.inputs[p].get();
            const int w = widths[p];
            if (ip->needs_grad) {
                double* dp = ip->ensure_grad();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < w; ++j)
                        dp[static_cast<int64_t>(i) * w + j] += g[static_cast<int64_t>(i) * total + off + j];
            }
            off += w;
        }
    };
    std::vector<Tensor> ins(parts.begin(), parts.end());
    return make_node("concat_cols", std::move(ins), {n, total}, std::move(out), std::move(fn));
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    check_defined(x, "reshape");
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    auto fn = [](TensorImpl& self) {
        TensorImpl* ix = self.inputs[0].get();
        if (!ix->needs_grad) return;
        double* dx = ix->ensure_grad();
        const double* g = self.grad.data();
        for (size_t i = 0; i < self.grad.size(); ++i) dx[i] += g[i];
    };
    return make_node("reshape", {x}, std::move(shape), std::move(out), std::move(fn));
}

// --------------------------------------------------------------------------
// softmax family
// --------------------------------------------------------------------------

Tensor causal_softmax(const Tensor& scores) {
    check_defined(scores, "causal_softmax");
    if (scores.ndim() != 2 || scores.dim(0) != scores.dim(1)) {
        throw DimensionError("causal_softmax: expected square matrix, got " + shape_str(scores.shape()));
    }
    const int t = scores.dim(0);
    std::vector<double> out(static_cast<size_t>(t) * t, 0.0);
    const double* sv = scores.values().data();
    for (int i = 0; i < t; ++i) {
        const double* row = sv + static_cast<int64_t>(i) * t;
        double mx = row[0];
        for (int j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j <= i; ++j) {
            double e = std::exp(row[j] - mx);
            out[static_cast<size_t>(i) * t + j] = e;
            z += e;
        }
        for (int j = 0; j <= i; ++j) out[static_cast<size_t>(i) * t + j] /= z;
    }
    auto fn = [t](TensorImpl& self) {
        TensorImpl* ix = self.inputs[0].get();
        if (!ix->needs_grad) return;
        double* dx = ix->ensure_grad();
        const double* g = self.grad.data();
        const double* y = self.value.data();
        for (int i = 0; i < t; ++i) {
            const double* gr = g + static_cast<int64_t>(i) * t;
            const double* yr = y + static_cast<int64_t>(i) * t;
            double dot = 0.0;
            for (int j = 0; j <= i; ++j) dot += gr[j] * yr[j];
            for (int j = 0; j <= i; ++j) dx[static_cast<int64_t>(i) * t + j] += yr[j] * (gr[j] - dot);
        }
    };
    return make_node("causal_softmax", {scores}, {t, t}, std::move(out), std::move(fn));
}

Tensor causal_attention_segments(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads,
                                 double att_scale, const std::vector<int>& row_starts) {
    check_defined(q, "causal_attention");
    check_defined(k, "causal_attention");
    check_defined(v, "causal_attention");
    if (q.ndim() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
        throw DimensionError("causal_attention: q/k/v must share a 2-D shape, got " +
                             shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                             shape_str(v.shape()));
    }
    const int t = q.dim(0), d = q.dim(1);
    if (n_heads < 1 || d % n_heads != 0) {
        throw DimensionError("causal_attention: width " + std::to_string(d) +
                             " not divisible into " + std::to_string(n_heads) + " heads");
    }
    if (row_starts.size() < 2 || row_starts.front() != 0 || row_starts.back() != t) {
        throw DimensionError("causal_attention: segment starts must span [0, rows]");
    }
    for (size_t s = 1; s < row_starts.size(); ++s) {
        if (row_starts[s] <= row_starts[s - 1]) {
            throw DimensionError("causal_attention: segment starts must be strictly increasing");
        }
    }
    const int hd = d / n_heads;
    const int n_segments = static_cast<int>(row_starts.size()) - 1;
    const double* qv = q.values().data();
    const double* kv = k.values().data();
    const double* vv = v.values().data();

    // Per-segment probability blocks [n_heads x L x L], packed back to back.
    std::vector<size_t> probs_off(static_cast<size_t>(n_segments) + 1, 0);
    for (int s = 0; s < n_segments; ++s) {
        const size_t len = static_cast<size_t>(row_starts[static_cast<size_t>(s) + 1] - row_starts[static_cast<size_t>(s)]);
        probs_off[static_cast<size_t>(s) + 1] = probs_off[static_cast<size_t>(s)] + static_cast<size_t>(n_heads) * len * len;
    }
    std::vector<double> probs(probs_off.back(), 0.0);
    std::vector<double> out(static_cast<size_t>(t) * d, 0.0);
    std::vector<double> scores;

    for (int s = 0; s < n_segments; ++s) {
        const int base = row_starts[static_cast<size_t>(s)];
        const int len = row_starts[static_cast<size_t>(s) + 1] - base;
        scores.resize(static_cast<size_t>(len));
        for (int h = 0; h < n_heads; ++h) {
            const int off = h * hd;
            double* hp = probs.data() + probs_off[static_cast<size_t>(s)] +
                         static_cast<size_t>(h) * len * len;
            for (int i = 0; i < len; ++i) {
                const double* qi = qv + static_cast<int64_t>(base + i) * d + off;
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j <= i; ++j) {
                    scores[static_cast<size_t>(j)] =
                        att_scale * dot8(qi, kv + static_cast<int64_t>(base + j) * d + off, hd);
                    mx = std::max(mx, scores[static_cast<size_t>(j)]);
                }
                double z = 0.0;
                for (int j = 0; j <= i; ++j) {
                    const double e = std::exp(scores[static_cast<size_t>(j)] - mx);
                    hp[static_cast<size_t>(i) * len + j] = e;
                    z += e;
                }
                double* orow = out.data() + static_cast<size_t>(base + i) * d + off;
                for (int j = 0; j <= i; ++j) {
                    const double p = hp[static_cast<size_t>(i) * len + j] / z;
                    hp[static_cast<size_t>(i) * len + j] = p;
                    const double* vrow = vv + static_cast<int64_t>(base + j) * d + off;
                    for (int c = 0; c < hd; ++c) orow[c] += p * vrow[c];
                }
            }
        }
    }

    auto fn = [d, hd, n_heads, att_scale, starts = row_starts, probs = std::move(probs),
               probs_off = std::move(probs_off)](TensorImpl& self) {
        const double* g = self.grad.data();
        TensorImpl* iq = self.inputs[0].get();
        TensorImpl* ik = self.inputs[1].get();
        TensorImpl* iv = self.inputs[2].get();
        const double* qv = iq->value.data();
        const double* kv = ik->value.data();
        const double* vv = iv->value.data();
        double* dq = iq->needs_grad ? iq->ensure_grad() : nullptr;
        double* dk = ik->needs_grad ? ik->ensure_grad() : nullptr;
        double* dv = iv->needs_grad ? iv->ensure_grad() : nullptr;

        std::vector<double> dprobs, dscores;
        const int n_segments = static_cast<int>(starts.size()) - 1;
        for (int s = 0; s < n_segments; ++s) {
            const int base = starts[static_cast<size_t>(s)];
            const int len = starts[static_cast<size_t>(s) + 1] - base;
            dprobs.resize(static_cast<size_t>(len));
            dscores.resize(static_cast<size_t>(len));
            for (int h = 0; h < n_heads; ++h) {
                const int off = h * hd;
                const double* hp = probs.data() + probs_off[static_cast<size_t>(s)] +
                                   static_cast<size_t>(h) * len * len;
                for (int i = 0; i < len; ++i) {
                    const double* grow = g + static_cast<int64_t>(base + i) * d + off;
                    if (dv) {
                        for (int j = 0; j <= i; ++j) {
                            const double p = hp[static_cast<size_t>(i) * len + j];
                            if (p == 0.0) continue;
                            double* dvrow = dv + static_cast<int64_t>(base + j) * d + off;
                            for (int c = 0; c < hd; ++c) dvrow[c] += p * grow[c];
                        }
                    }
                    if (!dq && !dk) continue;
                    double dot = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        dprobs[static_cast<size_t>(j)] =
                            dot8(grow, vv + static_cast<int64_t>(base + j) * d + off, hd);
                        dot += dprobs[static_cast<size_t>(j)] * hp[static_cast<size_t>(i) * len + j];
                    }
                    for (int j = 0; j <= i; ++j) {
                        dscores[static_cast<size_t>(j)] = hp[static_cast<size_t>(i) * len + j] *
                                                          (dprobs[static_cast<size_t>(j)] - dot) * att_scale;
                    }
                    const double* qi = qv + static_cast<int64_t>(base + i) * d + off;
                    for (int j = 0; j <= i; ++j) {
                        const double ds = dscores[static_cast<size_t>(j)];
                        if (ds == 0.0) continue;
                        const double* kj = kv + static_cast<int64_t>(base + j) * d + off;
                        if (dq) {
                            double* dqi = dq + static_cast<int64_t>(base + i) * d + off;
                            for (int c = 0; c < hd; ++c) dqi[c] += ds * kj[c];
                        }
                        if (dk) {
                            double* dkj = dk + static_cast<int64_t>(base + j) * d + off;
                            for (int c = 0; c < hd; ++c) dkj[c] += ds * qi[c];
                        }
                    }
                }
            }
        }
    };
    return make_node("causal_attention", {q, k, v}, {t, d}, std::move(out), std::move(fn));
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads,
                        double att_scale) {
    return causal_attention_segments(q, k, v, n_heads, att_scale, {0, q.dim(0)});
}

Tensor softmax_rows(const Tensor& x, double temperature) {
    check_defined(x, "softmax_rows");
    if (!(temperature > 0.0)) {
        throw UsageError("softmax_rows: temperature must be positive, got " + std::to_string(temperature));
    }
    auto [rows, cols] = rows_cols(x, "softmax_rows");
    std::vector<double> out(static_cast<size_t>(rows) * cols);
    const double* xv = x.values().data();
    for (int64_t i = 0; i < static_cast<int64_t>(rows) * cols; ++i) {
        if (!std::isfinite(xv[i])) throw NumericError("softmax_rows: non-finite input");
    }
    for (int i = 0; i < rows; ++i) {
        const double* row = xv + static_cast<int64_t>(i) * cols;
        double mx = row[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < cols; ++j) {
            double e = std::exp((row[j] - mx) / temperature);
            out[static_cast<size_t>(i) * cols + j] = e;
            z += e;
        }
        for (int j = 0; j < cols; ++j) out[static_cast<size_t>(i) * cols + j] /= z;
    }
    auto fn = [rows, cols, temperature](TensorImpl& self) {
        TensorImpl* ix = self.inputs[0].get();
        if (!ix->needs_grad) return;
        double* dx = ix->ensure_grad();
        const double* g = self.grad.data();
        const double* y = self.value.data();
        for (int i = 0; i < rows; ++i) {
            const double* gr = g + static_cast<int64_t>(i) * cols;
            const double* yr = y + static_cast<int64_t>(i) * cols;
            double dot = 0.0;
            for (int j = 0; j < cols; ++j) dot += gr[j] * yr[j];
            for (int j = 0; j < cols; ++j)
                dx[static_cast<int64_t>(i) * cols + j] += yr[j] * (gr[j] - dot) / temperature;
        }
    };
    return make_node("softmax_rows", {x}, x.shape(), std::move(out), std::move(fn));
}

Tensor sum(const Tensor& x) {
    check_defined(x, "sum");
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    auto fn = [n = x.numel()](TensorImpl& self) {
        TensorImpl* ix = self.inputs[0].get();
        if (!ix->needs_grad) return;
        double* dx = ix->ensure_grad();
        const double g = self.grad[0];
        for (int64_t i = 0; i < n; ++i) dx[i] += g;
    };
    return make_node("sum", {x}, {1}, {acc}, std::move(fn));
}

// --------------------------------------------------------------------------
// losses
// --------------------------------------------------------------------------

MaskedCeResult masked_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    check_defined(logits, "masked_cross_entropy");
    if (logits.ndim() != 2) {
        throw DimensionError("masked_cross_entropy: logits must be 2-D, got " + shape_str(logits.shape()));
    }
    const int t = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(labels.size()) != t) {
        throw DimensionError("masked_cross_entropy: " + std::to_string(labels.size()) +
                             " labels for " + std::to_string(t) + " logit rows");
    }
    std::vector<int> positions;
    for (int i = 0; i < t; ++i) {
        if (labels[i] == kIgnoreLabel) continue;
        if (labels[i] < 0 || labels[i] >= v) {
            throw DataError("masked_cross_entropy: label " + std::to_string(labels[i]) +
                            " outside vocabulary [0, " + std::to_string(v) + ")");
        }
        positions.push_back(i);
    }
    const int count = static_cast<int>(positions.size());
    if (count == 0) {
        MaskedCeResult r;
        r.total = Tensor::scalar(0.0);
        r.mean = Tensor::scalar(0.0);
        r.supervised = 0;
        return r;
    }

    const double* lv = logits.values().data();
    std::vector<double> probs(static_cast<size_t>(count) * v);
    std::vector<int> targets(static_cast<size_t>(count));
    double total = 0.0;
    for (int p = 0; p < count; ++p) {
        const int i = positions[static_cast<size_t>(p)];
        const double* row = lv + static_cast<int64_t>(i) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < v; ++j) {
            double e = std::exp(row[j] - mx);
            probs[static_cast<size_t>(p) * v + j] = e;
            z += e;
        }
        for (int j = 0; j < v; ++j) probs[static_cast<size_t>(p) * v + j] /= z;
        const int y = labels[i];
        targets[static_cast<size_t>(p)] = y;
        total += (mx + std::log(z)) - row[y];
    }

    auto fn = [v, count, positions, probs = std::move(probs),
               targets = std::move(targets)](TensorImpl& self) {
        TensorImpl* il = self.inputs[0].get();
        if (!il->needs_grad) return;
        double* dl = il->ensure_grad();
        const double g = self.grad[0];
        for (int p = 0; p < count; ++p) {
            const int i = positions[static_cast<size_t>(p)];
            double* drow = dl + static_cast<int64_t>(i) * v;
            const double* prow = probs.data() + static_cast<size_t>(p) * v;
            for (int j = 0; j < v; ++j) drow[j] += g * prow[j];
            drow[targets[static_cast<size_t>(p)]] -= g;
        }
    };
    MaskedCeResult r;
    r.total = make_node("masked_cross_entropy", {logits}, {1}, {total}, std::move(fn));
    r.mean = scale(r.total, 1.0 / count);
    r.supervised = count;
    return r;
}

Tensor kl_rows(const Tensor& p, const Tensor& q) {
    check_defined(p, "kl_rows");
    check_defined(q, "kl_rows");
    if (p.shape() != q.shape()) {
        throw DimensionError("kl_rows: shape mismatch " + shape_str(p.shape()) + " vs " +
                             shape_str(q.shape()));
    }
    auto [rows, cols] = rows_cols(p, "kl_rows");
    std::vector<double> out(static_cast<size_t>(rows), 0.0);
    const double* pv = p.values().data();
    const double* qv = q.values().data();
    for (int i = 0; i < rows; ++i) {
        double acc = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double pij = pv[static_cast<int64_t>(i) * cols + j];
            if (pij <= 0.0) continue; // 0 * log 0 := 0
            const double pc = std::max(pij, kProbEps);
            const double qc = std::max(qv[static_cast<int64_t>(i) * cols + j], kProbEps);
            acc += pij * (std::log(pc) - std::log(qc));
        }
        out[static_cast<size_t>(i)] = acc;
    }
    auto fn = [rows, cols](TensorImpl& self) {
        const double* g = self.grad.data();
        TensorImpl* ip = self.inputs[0].get();
        TensorImpl* iq = self.inputs[1].get();
        const double* pv = ip->value.data();
        const double* qv = iq->value.data();
        if (iq->needs_grad) {
            double* dq = iq->ensure_grad();
            for (int i = 0; i < rows; ++i) {
                for (int j = 0; j < cols; ++j) {
                    const double pij = pv[static_cast<int64_t>(i) * cols + j];
                    const double qij = qv[static_cast<int64_t>(i) * cols + j];
                    if (pij <= 0.0 || qij <= kProbEps) continue;
                    dq[static_cast<int64_t>(i) * cols + j] -= g[i] * pij / qij;
                }
            }
        }
        if (ip->needs_grad) {
            double* dp = ip->ensure_grad();
            for (int i = 0; i < rows; ++i) {
                for (int j = 0; j < cols; ++j) {
                    const double pij = pv[static_cast<int64_t>(i) * cols + j];
                    if (pij <= 0.0) continue;
                    const double pc = std::max(pij, kProbEps);
                    const double qc = std::max(qv[static_cast<int64_t>(i) * cols + j], kProbEps);
                    double d = std::log(pc) - std::log(qc);
                    if (pij > kProbEps) d += 1.0;
                    dp[static_cast<int64_t>(i) * cols + j] += g[i] * d;
                }
            }
        }
    };
    return make_node("kl_rows", {p, q}, {rows}, std::move(out), std::move(fn));
}

Tensor dropout(const Tensor& x, double p, DetRng& rng) {
    check_defined(x, "dropout");
    if (p == 0.0) return x;
    if (p < 0.0 || p >= 1.0) {
        throw ConfigError("dropout probability must be in [0, 1), got " + std::to_string(p));
    }
    const int64_t n = x.numel();
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(static_cast<size_t>(n));
    std::vector<double> out(static_cast<size_t>(n));
    const double* xv = x.values().data();
    for (int64_t i = 0; i < n; ++i) {
        mask[static_cast<size_t>(i)] = (rng.uniform() < p) ? 0.0 : keep_scale;
        out[static_cast<size_t>(i)] = xv[i] * mask[static_cast<size_t>(i)];
    }
    auto fn = [n, mask = std::move(mask)](TensorImpl& self) {
        TensorImpl* ix = self.inputs[0].get();
        if (!ix->needs_grad) return;
        double* dx = ix->ensure_grad();
        const double* g = self.grad.data();
        for (int64_t i = 0; i < n; ++i) dx[i] += g[i] * mask[static_cast<size_t>(i)];
    };
    return make_node("dropout", {x}, x.shape(), std::move(out), std::move(fn));
}

} // namespace echotune
