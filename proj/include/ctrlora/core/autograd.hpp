#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ctrlora/core/tensor.hpp"

namespace ctrlora {

// Reverse-mode autodiff on a dynamically built tape. Each op returns a Var;
// backward() walks the tape in reverse topological order. When grads are
// globally disabled (NoGradGuard) ops still compute values but record no
// parents and no closures, so inference builds no tape.

struct AgNode;
using Var = std::shared_ptr<AgNode>;

struct AgNode {
    Tensor value;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool grad_alloc = false;
    std::string name;  // set for parameters
    std::vector<Var> parents;
    std::function<void(AgNode&)> backprop;  // reads this->grad, accumulates into parents

    void ensure_grad() {
        if (!grad_alloc) {
            grad = Tensor::zeros(value.shape);
            grad_alloc = true;
        }
    }
    void zero_grad() {
        if (grad_alloc)
            std::fill(grad.data.begin(), grad.data.end(), 0.0);
    }
};

bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

Var make_leaf(Tensor value, bool requires_grad, std::string name = {});
Var make_constant(Tensor value);

// Runs reverse accumulation from a scalar root (seeds d(root)/d(root) = 1).
void backward(const Var& root);

namespace ag {

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var exp(const Var& a);
Var silu(const Var& a);

// ---- reductions ----
Var mean_all(const Var& a);
Var sum_all(const Var& a);
// Mean of (a - target)^2 over all elements; target carries no grad.
Var mse(const Var& a, const Tensor& target);

// ---- linear algebra ----
// x: (M, din), w: (dout, din), b: (dout) or nullptr. y = x w^T + b.
Var linear(const Var& x, const Var& w, const Var* b);
// a: (B, M, K), b: (B, K, N) -> (B, M, N)
Var bmm(const Var& a, const Var& b);
// a: (B, M, K), b: (B, N, K) -> (B, M, N)   (right operand transposed)
Var bmm_nt(const Var& a, const Var& b);
Var softmax_last(const Var& a);

// ---- conv / norm ----
// x: (N, Cin, H, W), w: (Cout, Cin, k, k), b: (Cout) or nullptr.
Var conv2d(const Var& x, const Var& w, const Var* b, int stride, int pad);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
// x: (M, D), gamma/beta: (D)
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// ---- shape / layout ----
Var reshape(const Var& a, std::vector<int64_t> shp);
// (N, C, H, W) -> (N*H*W, C) with token order (n, h, w)
Var nchw_to_tokens(const Var& a);
Var tokens_to_nchw(const Var& a, int64_t n, int64_t c, int64_t h, int64_t w);
// (N*T, C) -> (N*heads, T, C/heads)
Var split_heads(const Var& a, int64_t n_batch, int64_t tokens, int64_t heads);
Var merge_heads(const Var& a, int64_t n_batch, int64_t tokens, int64_t heads);
Var upsample_nearest2x(const Var& a);
Var concat_channels(const Var& a, const Var& b);
Var slice_channels(const Var& a, int64_t c0, int64_t c1);
// x: (N, C, H, W) plus per-sample channel vector v: (N, C), broadcast over H, W.
Var add_bias_spatial(const Var& x, const Var& v);
// table: (R, D), idx values in [0, R) -> (|idx|, D)
Var gather_rows(const Var& table, const std::vector<int>& idx);

}  // namespace ag

}  // namespace ctrlora
