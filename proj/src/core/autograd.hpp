#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "tensor.hpp"

namespace dm::ag {

struct Node;
using Var = std::shared_ptr<Node>;

// One node of the dynamic compute tape. Leaves carry parameters or inputs;
// interior nodes carry a backward closure that scatters the incoming gradient
// into the parents.
struct Node {
    Tensor v;
    Tensor g;
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<Var> parents;
    std::function<void(Node&)> back;

    void ensure_grad() {
        if (!grad_ready) {
            g = Tensor(v.shape);
            grad_ready = true;
        }
    }
    void accumulate(const Tensor& delta) {
        ensure_grad();
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += delta.v[i];
    }
    void zero_grad() {
        if (grad_ready)
            for (double& x : g.v) x = 0.0;
    }
};

Var leaf(Tensor t, bool requires_grad = false);
inline Var constant(Tensor t) { return leaf(std::move(t), false); }

// While alive, newly built nodes drop their tape (no parents, no backward);
// intermediate values are then freed as soon as the last consumer releases
// them. Used by samplers and other inference-only paths.
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};
bool grad_enabled();

// Reverse pass from a scalar root (shape [1]); seeds d(root)/d(root)=1.
void backward(const Var& root);

// ---- primitive ops ------------------------------------------------------
// add supports b broadcast when b.shape is a trailing suffix of a.shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);

Var mm(const Var& a, const Var& b);      // [m,k]x[k,n]
Var mm_nt(const Var& a, const Var& b);   // [m,k]x[n,k]^T -> [m,n]
Var bmm(const Var& a, const Var& b);     // [B,m,k]x[B,k,n]
Var bmm_nt(const Var& a, const Var& b);  // [B,m,k]x[B,n,k]^T -> [B,m,n]

Var softmax_last(const Var& a);
Var silu(const Var& a);

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
Var upsample2x(const Var& x);
Var concat_ch(const Var& a, const Var& b);             // dim 1 of [N,C,H,W]
Var add_channel_bias(const Var& x, const Var& bias);   // [N,C,H,W] + [C]

Var reshape(const Var& a, std::vector<int> shape);
Var permute(const Var& a, std::vector<int> perm);
Var expand_batch(const Var& a, int B);                 // [m,n] -> [B,m,n]
Var rows(const Var& table, const std::vector<int>& idx);  // gather rows of [V,d]

Var sum_all(const Var& a);   // -> [1]
Var mean_all(const Var& a);  // -> [1]

// ---- composites ---------------------------------------------------------
inline Var mse(const Var& a, const Var& b) {
    Var d = sub(a, b);
    return mean_all(mul(d, d));
}

// softmax(Q K^T / sqrt(dk)) V, batched or 2-d.
Var attention(const Var& q, const Var& k, const Var& v);

}  // namespace dm::ag
