#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "echotune/rng.hpp"

namespace echotune {

// Label value that marks positions excluded from supervision.
inline constexpr int kIgnoreLabel = -100;

// Epsilon inside the RMS normalization denominator.
inline constexpr double kRmsEps = 1e-6;

// Probability floor used by the KL routines before taking logs.
inline constexpr double kProbEps = 1e-12;

namespace detail {
struct TensorImpl;
}

// Dense f64 tensor participating in a reverse-mode tape. Value semantics:
// copying a Tensor copies the handle, not the buffer. Values are immutable
// after construction except through raw_values() (init / optimizer) and the
// grad buffer, which backward() accumulates into.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double fill, bool requires_grad = false);
    static Tensor from_values(std::vector<int> shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double v);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const;
    int ndim() const;
    int dim(int i) const;
    int64_t numel() const;

    std::span<const double> values() const;
    // Mutable access to the value buffer; only meaningful on leaves (params).
    std::vector<double>& raw_values();
    double at(int i) const;
    double at(int i, int j) const;
    double item() const; // single-element tensors

    bool requires_grad() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    double* grad_data(); // allocates a zeroed buffer on demand
    void zero_grad();

    // Value-identical leaf; gradient never flows through it.
    Tensor detach() const;

    detail::TensorImpl* impl() const { return impl_.get(); }

private:
    friend void backward(const Tensor& loss);
    friend class OpBackwardContext;
    friend Tensor custom_op(std::string, std::vector<Tensor>, std::vector<int>,
                            std::vector<double>, std::function<void(class OpBackwardContext&)>);
    friend Tensor make_node(std::string, std::vector<Tensor>, std::vector<int>,
                            std::vector<double>, std::function<void(detail::TensorImpl&)>);

    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Ops. All inputs are read-only; every op returns a fresh node with an
// analytic backward rule. Shapes must match exactly; the only broadcast is
// a single-element operand against any shape (add/sub/mul/div).
// ---------------------------------------------------------------------------

// General matrix product with optional transposes; a and b must be 2-D.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);

// Row-wise RMS normalization: each row divided by sqrt(mean(row^2) + eps).
// 1-D input is treated as a single row.
Tensor rms_norm_rows(const Tensor& x);

// x[n x m] with each row multiplied elementwise by v[m].
Tensor mul_rowvec(const Tensor& x, const Tensor& v);
// x[n x m] with row i multiplied by s[i].
Tensor scale_rows(const Tensor& x, const Tensor& s);
// Per-row L2 norm of x[n x m], floored at `floor` (gradient zero where floored).
Tensor rows_l2norm(const Tensor& x, double floor);

// Gather rows of x by index; backward scatter-adds. Out-of-range -> DataError.
Tensor gather_rows(const Tensor& x, std::span<const int> rows);
Tensor slice_cols(const Tensor& x, int start, int count);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor reshape(const Tensor& x, std::vector<int> shape);

// Row-wise softmax over the causal prefix (row i normalizes columns 0..i).
Tensor causal_softmax(const Tensor& scores);

// Fused multi-head causal self-attention mix. q, k, v are [T x d] with d
// split into n_heads contiguous head blocks; per head,
// out_h = causal_softmax(q_h k_h^T * att_scale) v_h.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads,
                        double att_scale);

// Same computation over independent row segments (rows [starts[i], starts[i+1])
// attend only within their segment); used to run a whole batch as one graph.
Tensor causal_attention_segments(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads,
                                 double att_scale, const std::vector<int>& row_starts);

// Row-wise temperature softmax; rows sum to one. Non-finite input -> NumericError.
Tensor softmax_rows(const Tensor& x, double temperature);

Tensor sum(const Tensor& x);

struct MaskedCeResult {
    Tensor mean;    // scalar: mean NLL over supervised positions (0 when none)
    Tensor total;   // scalar: summed NLL over supervised positions
    int supervised; // number of labels != kIgnoreLabel
    bool empty_mask() const { return supervised == 0; }
};
// Token-level cross entropy over positions whose label is not kIgnoreLabel.
// logits: [T x V]; labels: length T. Fused, numerically stable log-softmax.
MaskedCeResult masked_cross_entropy(const Tensor& logits, std::span<const int> labels);

// Per-row KL(p || q) with probabilities floored at kProbEps before the log
// and 0*log(0) treated as 0. Returns a [n] tensor.
Tensor kl_rows(const Tensor& p, const Tensor& q);

// Inverted dropout on the full tensor; active mask drawn from `rng`.
Tensor dropout(const Tensor& x, double p, DetRng& rng);

Tensor detach(const Tensor& x);

// Reverse-mode sweep from a scalar loss. Accumulates into grad buffers;
// repeated calls without zero_grad() add up.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Extension point: modules elsewhere register fused ops with their own
// analytic backward (e.g. masked injection, distillation).
// ---------------------------------------------------------------------------
class OpBackwardContext {
public:
    std::span<const double> out_grad() const;
    std::span<const double> out_value() const;
    std::span<const double> input_value(int i) const;
    // Gradient buffer of input i, or nullptr when that input needs no gradient.
    double* input_grad(int i);
    int input_count() const;

    explicit OpBackwardContext(detail::TensorImpl* node) : node_(node) {}

private:
    detail::TensorImpl* node_;
};

Tensor custom_op(std::string op_name, std::vector<Tensor> inputs, std::vector<int> out_shape,
                 std::vector<double> out_values, std::function<void(OpBackwardContext&)> backward_fn);

// Shape pretty-printer for error messages: "[3x4]".
std::string shape_str(const std::vector<int>& shape);

} // namespace echotune
