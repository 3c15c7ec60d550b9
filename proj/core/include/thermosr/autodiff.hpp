#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "thermosr/rng.hpp"
#include "thermosr/tensor.hpp"

namespace thermosr::ad {

// Tape node for reverse-mode differentiation. Graphs are built per forward
// pass and released afterwards; parameter leaves live across iterations and
// accumulate into `grad` until zeroed by the optimizer.
class Node {
public:
    Tensor value;
    Tensor grad;  // allocated on first use, same shape as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backprop;  // accumulates this->grad into parents
    const char* op = "";

    void ensure_grad();
    void zero_grad();
};

using Var = std::shared_ptr<Node>;

// Leaf that participates in differentiation (parameters, probed inputs).
Var leaf(Tensor value, bool requires_grad = true);
// Leaf that never needs gradients (data, precomputed maps).
Var constant(Tensor value);

// Reverse pass from a scalar root. Gradients accumulate, so callers zero
// parameter grads between steps.
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// x * s where s is a [1] tensor variable; gradients flow to both.
Var scale_by(const Var& x, const Var& s);
Var relu(const Var& a);
// Exact Gauss-error-function form, x * Phi(x).
Var gelu(const Var& a);
Var tanh_op(const Var& a);
Var sigmoid(const Var& a);

// ---- reductions ----
Var sum_all(const Var& a);   // -> [1]
Var mean_all(const Var& a);  // -> [1]

// ---- linear algebra (2-D) ----
Var matmul(const Var& a, const Var& b);     // [m,k] x [k,n]
Var matmul_nt(const Var& a, const Var& b);  // [m,k] x [n,k]^T -> [m,n]
Var transpose2d(const Var& a);
Var reshape(const Var& a, std::vector<int> shape);
// x [n,d] + v [d] broadcast over rows.
Var add_rowvec(const Var& x, const Var& v);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& x, int r0, int r1);
Var slice_cols(const Var& x, int c0, int c1);

// Row softmax with optional additive mask (0 for allowed, large negative for
// blocked). The mask is a plain tensor: it is structural, never trained.
Var softmax_rows(const Var& x, const Tensor* additive_mask = nullptr);
Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
// Mean negative log-likelihood in nats over rows of logits.
Var cross_entropy_rows(const Var& logits, const std::vector<int>& targets);
Var embedding_rows(const Var& table, const std::vector<int>& indices);

// ---- spatial (single sample, CHW layout) ----
// x [C,H,W], w [F,C,kh,kw], optional b [F]; zero padding.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
// x [C,H,W], w [C,F,kh,kw], optional b [F]; output [(H-1)s - 2p + kh, ...].
Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
// x [C,H,W], w [C,3,3], optional b [C]; stride 1, zero pad 1.
Var depthwise_conv3x3(const Var& x, const Var& w, const Var& b);
Var global_avg_pool(const Var& x);               // [C,H,W] -> [C]
Var broadcast_chw(const Var& v, int h, int w);   // [C] -> [C,h,w]
// Bilinear resize with half-pixel centers and edge clamping (the standard
// align_corners=false convention). Used to lift coarse residual scales.
Var bilinear_up(const Var& x, int out_h, int out_w);
// Exact block replication; output dims must be integer multiples of the input dims.
Var nearest_up(const Var& x, int out_h, int out_w);

// Inverted dropout; identity when p == 0. The mask is drawn from `rng`.
Var dropout(const Var& x, double p, Rng& rng);

// Value passes through, gradient is cut.
Var stop_gradient(const Var& x);
// Takes `value` in the forward pass but routes gradients to x unchanged
// (classic straight-through estimator).
Var straight_through(const Var& x, const Tensor& value);

}  // namespace thermosr::ad
