#include "autograd.hpp"

#include <algorithm>
#include <unordered_set>

namespace dm::ag {

Var leaf(Tensor t, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->v = std::move(t);
    n->requires_grad = requires_grad;
    return n;
}

static thread_local bool g_grad_enabled = true;

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

static Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> back) {
    auto n = std::make_shared<Node>();
    n->v = std::move(value);
    if (g_grad_enabled)
        for (auto& p : parents)
            if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->back = std::move(back);
    }
    return n;
}

void backward(const Var& root) {
    if (root->v.numel() != 1) throw std::logic_error("backward: root must be scalar");
    // iterative topo sort
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i].get();
            ++i;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->g.v[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->back && n->grad_ready) n->back(*n);
    }
}

// ---- elementwise --------------------------------------------------------

static bool is_suffix(const std::vector<int>& small, const std::vector<int>& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Var add(const Var& a, const Var& b) {
    if (a->v.shape == b->v.shape) {
        Tensor out = a->v;
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += b->v.v[i];
        return make(std::move(out), {a, b}, [a, b](Node& n) {
            a->accumulate(n.g);
            b->accumulate(n.g);
        });
    }
    if (!is_suffix(b->v.shape, a->v.shape))
        throw std::invalid_argument("add: shape mismatch " + a->v.shape_str() + " vs " + b->v.shape_str());
    int64_t nb = b->v.numel();
    Tensor out = a->v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += b->v.v[i % nb];
    return make(std::move(out), {a, b}, [a, b, nb](Node& n) {
        a->accumulate(n.g);
        b->ensure_grad();
        for (size_t i = 0; i < n.g.v.size(); ++i) b->g.v[i % nb] += n.g.v[i];
    });
}

Var sub(const Var& a, const Var& b) {
    if (a->v.shape != b->v.shape) throw std::invalid_argument("sub: shape mismatch");
    Tensor out = a->v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= b->v.v[i];
    return make(std::move(out), {a, b}, [a, b](Node& n) {
        a->accumulate(n.g);
        b->ensure_grad();
        for (size_t i = 0; i < n.g.v.size(); ++i) b->g.v[i] -= n.g.v[i];
    });
}

Var mul(const Var& a, const Var& b) {
    if (a->v.shape != b->v.shape) throw std::invalid_argument("mul: shape mismatch");
    Tensor out = a->v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b->v.v[i];
    return make(std::move(out), {a, b}, [a, b](Node& n) {
        a->ensure_grad();
        b->ensure_grad();
        for (size_t i = 0; i < n.g.v.size(); ++i) {
            a->g.v[i] += n.g.v[i] * b->v.v[i];
            b->g.v[i] += n.g.v[i] * a->v.v[i];
        }
    });
}

Var scale(const Var& a, double c) {
    Tensor out = a->v;
    for (double& x : out.v) x *= c;
    return make(std::move(out), {a}, [a, c](Node& n) {
        a->ensure_grad();
        for (size_t i = 0; i < n.g.v.size(); ++i) a->g.v[i] += c * n.g.v[i];
    });
}

// ---- matmul -------------------------------------------------------------

static void mm_acc(const double* a, const double* b, double* out, int m, int k, int n) {
    // out[m,n] += a[m,k] * b[k,n]
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* oi = out + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) oi[j] += av * bp[j];
        }
    }
}

static void mm_nt_acc(const double* a, const double* b, double* out, int m, int k, int n) {
    // out[m,n] += a[m,k] * b[n,k]^T
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* oi = out + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<size_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
            oi[j] += s;
        }
    }
}

static void mm_tn_acc(const double* a, const double* b, double* out, int m, int k, int n) {
    // out[k,n] += a[m,k]^T * b[m,n]
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        const double* bi = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            double* op = out + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) op[j] += av * bi[j];
        }
    }
}

Var mm(const Var& a, const Var& b) {
    if (a->v.ndim() != 2 || b->v.ndim() != 2 || a->v.dim(1) != b->v.dim(0))
        throw std::invalid_argument("mm: bad shapes " + a->v.shape_str() + " x " + b->v.shape_str());
    int m = a->v.dim(0), k = a->v.dim(1), n = b->v.dim(1);
    Tensor out({m, n});
    mm_acc(a->v.v.data(), b->v.v.data(), out.v.data(), m, k, n);
    return make(std::move(out), {a, b}, [a, b, m, k, n](Node& nd) {
        a->ensure_grad();
        b->ensure_grad();
        mm_nt_acc(nd.g.v.data(), b->v.v.data(), a->g.v.data(), m, n, k);  // dA = G B^T
        mm_tn_acc(a->v.v.data(), nd.g.v.data(), b->g.v.data(), m, k, n);  // dB = A^T G
    });
}

Var mm_nt(const Var& a, const Var& b) {
    if (a->v.ndim() != 2 || b->v.ndim() != 2 || a->v.dim(1) != b->v.dim(1))
        throw std::invalid_argument("mm_nt: bad shapes");
    int m = a->v.dim(0), k = a->v.dim(1), n = b->v.dim(0);
    Tensor out({m, n});
    mm_nt_acc(a->v.v.data(), b->v.v.data(), out.v.data(), m, k, n);
    return make(std::move(out), {a, b}, [a, b, m, k, n](Node& nd) {
        a->ensure_grad();
        b->ensure_grad();
        mm_acc(nd.g.v.data(), b->v.v.data(), a->g.v.data(), m, n, k);     // dA = G B
        mm_tn_acc(nd.g.v.data(), a->v.v.data(), b->g.v.data(), m, n, k);  // dB = G^T A
    });
}

Var bmm(const Var& a, const Var& b) {
    if (a->v.ndim() != 3 || b->v.ndim() != 3 || a->v.dim(0) != b->v.dim(0) || a->v.dim(2) != b->v.dim(1))
        throw std::invalid_argument("bmm: bad shapes " + a->v.shape_str() + " x " + b->v.shape_str());
    int B = a->v.dim(0), m = a->v.dim(1), k = a->v.dim(2), n = b->v.dim(2);
    Tensor out({B, m, n});
    for (int bi = 0; bi < B; ++bi)
        mm_acc(a->v.v.data() + static_cast<size_t>(bi) * m * k, b->v.v.data() + static_cast<size_t>(bi) * k * n,
               out.v.data() + static_cast<size_t>(bi) * m * n, m, k, n);
    return make(std::move(out), {a, b}, [a, b, B, m, k, n](Node& nd) {
        a->ensure_grad();
        b->ensure_grad();
        for (int bi = 0; bi < B; ++bi) {
            const double* g = nd.g.v.data() + static_cast<size_t>(bi) * m * n;
            mm_nt_acc(g, b->v.v.data() + static_cast<size_t>(bi) * k * n,
                      a->g.v.data() + static_cast<size_t>(bi) * m * k, m, n, k);
            mm_tn_acc(a->v.v.data() + static_cast<size_t>(bi) * m * k, g,
                      b->g.v.data() + static_cast<size_t>(bi) * k * n, m, k, n);
        }
    });
}

Var bmm_nt(const Var& a, const Var& b) {
    if (a->v.ndim() != 3 || b->v.ndim() != 3 || a->v.dim(0) != b->v.dim(0) || a->v.dim(2) != b->v.dim(2))
        throw std::invalid_argument("bmm_nt: bad shapes " + a->v.shape_str() + " x " + b->v.shape_str());
    int B = a->v.dim(0), m = a->v.dim(1), k = a->v.dim(2), n = b->v.dim(1);
    Tensor out({B, m, n});
    for (int bi = 0; bi < B; ++bi)
        mm_nt_acc(a->v.v.data() + static_cast<size_t>(bi) * m * k, b->v.v.data() + static_cast<size_t>(bi) * n * k,
                  out.v.data() + static_cast<size_t>(bi) * m * n, m, k, n);
    return make(std::move(out), {a, b}, [a, b, B, m, k, n](Node& nd) {
        a->ensure_grad();
        b->ensure_grad();
        for (int bi = 0; bi < B; ++bi) {
            const double* g = nd.g.v.data() + static_cast<size_t>(bi) * m * n;
            mm_acc(g, b->v.v.data() + static_cast<size_t>(bi) * n * k,
                   a->g.v.data() + static_cast<size_t>(bi) * m * k, m, n, k);
            mm_tn_acc(g, a->v.v.data() + static_cast<size_t>(bi) * m * k,
                      b->g.v.data() + static_cast<size_t>(bi) * n * k, m, n, k);
        }
    });
}

// ---- nonlinearities -----------------------------------------------------

Var softmax_last(const Var& a) {
    int L = a->v.shape.back();
    int64_t rows_n = a->v.numel() / L;
    Tensor out = a->v;
    for (int64_t r = 0; r < rows_n; ++r) {
        double* x = out.v.data() + r * L;
        double mx = x[0];
        for (int i = 1; i < L; ++i) mx = std::max(mx, x[i]);
        double s = 0.0;
        for (int i = 0; i < L; ++i) {
            x[i] = std::exp(x[i] - mx);
            s += x[i];
        }
        for (int i = 0; i < L; ++i) x[i] /= s;
    }
    Var res = make(std::move(out), {a}, nullptr);
    if (res->requires_grad) {
        Var self_ref = res;  // value needed in backward
        res->back = [a, L, rows_n](Node& n) {
            a->ensure_grad();
            for (int64_t r = 0; r < rows_n; ++r) {
                const double* y = n.v.v.data() + r * L;
                const double* gy = n.g.v.data() + r * L;
                double dot = 0.0;
                for (int i = 0; i < L; ++i) dot += y[i] * gy[i];
                double* gx = a->g.v.data() + r * L;
                for (int i = 0; i < L; ++i) gx[i] += y[i] * (gy[i] - dot);
            }
        };
    }
    return res;
}

Var silu(const Var& a) {
    Tensor out = a->v;
    for (double& x : out.v) {
        double s = 1.0 / (1.0 + std::exp(-x));
        x = x * s;
    }
    return make(std::move(out), {a}, [a](Node& n) {
        a->ensure_grad();
        for (size_t i = 0; i < n.g.v.size(); ++i) {
            double x = a->v.v[i];
            double s = 1.0 / (1.0 + std::exp(-x));
            a->g.v[i] += n.g.v[i] * s * (1.0 + x * (1.0 - s));
        }
    });
}

// ---- conv / norm / spatial ----------------------------------------------

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& X = x->v;
    const Tensor& W = w->v;
    if (X.ndim() != 4 || W.ndim() != 4 || X.dim(1) != W.dim(1))
        throw std::invalid_argument("conv2d: bad shapes " + X.shape_str() + " w " + W.shape_str());
    int N = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
    int O = W.dim(0), kh = W.dim(2), kw = W.dim(3);
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (Wd + 2 * pad - kw) / stride + 1;
    // valid ow range for one (j) tap: iw = ow*stride + j - pad in [0, Wd)
    auto tap_range = [stride, pad](int j, int extent, int out_extent, int& lo, int& hi) {
        lo = 0;
        int off = j - pad;
        if (off < 0) lo = (-off + stride - 1) / stride;
        hi = out_extent;
        int top = extent - 1 - off;  // largest in-bounds input index numerator
        if (top < 0)
            hi = 0;
        else
            hi = std::min(out_extent, top / stride + 1);
    };

    Tensor out({N, O, Ho, Wo});
    long xplane = static_cast<long>(H) * Wd, oplane = static_cast<long>(Ho) * Wo;
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
            double* op = &out.v[(static_cast<long>(n) * O + o) * oplane];
            double bias = b ? b->v.v[o] : 0.0;
            for (long i = 0; i < oplane; ++i) op[i] = bias;
            for (int c = 0; c < C; ++c) {
                const double* xp = &X.v[(static_cast<long>(n) * C + c) * xplane];
                const double* wp = &W.v[((static_cast<long>(o) * C + c) * kh) * kw];
                for (int i = 0; i < kh; ++i)
                    for (int j = 0; j < kw; ++j) {
                        double wv = wp[i * kw + j];
                        if (wv == 0.0) continue;
                        int lo, hi, vlo, vhi;
                        tap_range(j, Wd, Wo, lo, hi);
                        tap_range(i, H, Ho, vlo, vhi);
                        for (int oh = vlo; oh < vhi; ++oh) {
                            int ih = oh * stride + i - pad;
                            double* orow = op + static_cast<long>(oh) * Wo;
                            const double* xrow = xp + static_cast<long>(ih) * Wd + (j - pad);
                            if (stride == 1)
                                for (int ow = lo; ow < hi; ++ow) orow[ow] += wv * xrow[ow];
                            else
                                for (int ow = lo; ow < hi; ++ow)
                                    orow[ow] += wv * xrow[static_cast<long>(ow) * stride];
                        }
                    }
            }
        }
    std::vector<Var> parents = {x, w};
    if (b) parents.push_back(b);
    Var bb = b;
    return make(std::move(out), std::move(parents),
                [x, w, bb, N, C, H, Wd, O, kh, kw, Ho, Wo, stride, pad, xplane, oplane,
                 tap_range](Node& nd) {
                    x->ensure_grad();
                    w->ensure_grad();
                    if (bb) bb->ensure_grad();
                    for (int n = 0; n < N; ++n)
                        for (int o = 0; o < O; ++o) {
                            const double* gp = &nd.g.v[(static_cast<long>(n) * O + o) * oplane];
                            if (bb) {
                                double acc = 0.0;
                                for (long i = 0; i < oplane; ++i) acc += gp[i];
                                bb->g.v[o] += acc;
                            }
                            for (int c = 0; c < C; ++c) {
                                double* xg = &x->g.v[(static_cast<long>(n) * C + c) * xplane];
                                const double* xv = &x->v.v[(static_cast<long>(n) * C + c) * xplane];
                                const double* wv_ = &w->v.v[((static_cast<long>(o) * C + c) * kh) * kw];
                                double* wg = &w->g.v[((static_cast<long>(o) * C + c) * kh) * kw];
                                for (int i = 0; i < kh; ++i)
                                    for (int j = 0; j < kw; ++j) {
                                        double wv = wv_[i * kw + j];
                                        int lo, hi, vlo, vhi;
                                        tap_range(j, Wd, Wo, lo, hi);
                                        tap_range(i, H, Ho, vlo, vhi);
                                        double acc = 0.0;
                                        for (int oh = vlo; oh < vhi; ++oh) {
                                            int ih = oh * stride + i - pad;
                                            const double* grow = gp + static_cast<long>(oh) * Wo;
                                            long base = static_cast<long>(ih) * Wd + (j - pad);
                                            for (int ow = lo; ow < hi; ++ow) {
                                                long ix = base + static_cast<long>(ow) * stride;
                                                double gv = grow[ow];
                                                acc += gv * xv[ix];
                                                xg[ix] += gv * wv;
                                            }
                                        }
                                        wg[i * kw + j] += acc;
                                    }
                            }
                        }
                });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    const Tensor& X = x->v;
    if (X.ndim() != 4) throw std::invalid_argument("group_norm: rank-4 input required");
    int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    if (C % groups != 0) throw std::invalid_argument("group_norm: groups must divide channels");
    int cg = C / groups;
    int64_t m = static_cast<int64_t>(cg) * H * W;
    Tensor out(X.shape);
    auto xhat = std::make_shared<Tensor>(X.shape);
    auto invstd = std::make_shared<std::vector<double>>(static_cast<size_t>(N) * groups);
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            double mu = 0.0;
            for (int c = g * cg; c < (g + 1) * cg; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) mu += X.at4(n, c, h, w);
            mu /= static_cast<double>(m);
            double var = 0.0;
            for (int c = g * cg; c < (g + 1) * cg; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        double d = X.at4(n, c, h, w) - mu;
                        var += d * d;
                    }
            var /= static_cast<double>(m);
            double is = 1.0 / std::sqrt(var + eps);
            (*invstd)[static_cast<size_t>(n) * groups + g] = is;
            for (int c = g * cg; c < (g + 1) * cg; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        double xh = (X.at4(n, c, h, w) - mu) * is;
                        xhat->at4(n, c, h, w) = xh;
                        out.at4(n, c, h, w) = gamma->v.v[c] * xh + beta->v.v[c];
                    }
        }
    return make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, xhat, invstd, N, C, H, W, groups, cg, m](Node& nd) {
                    x->ensure_grad();
                    gamma->ensure_grad();
                    beta->ensure_grad();
                    for (int n = 0; n < N; ++n)
                        for (int g = 0; g < groups; ++g) {
                            double is = (*invstd)[static_cast<size_t>(n) * groups + g];
                            double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                            for (int c = g * cg; c < (g + 1) * cg; ++c)
                                for (int h = 0; h < H; ++h)
                                    for (int w = 0; w < W; ++w) {
                                        double gy = nd.g.at4(n, c, h, w);
                                        double xh = xhat->at4(n, c, h, w);
                                        gamma->g.v[c] += gy * xh;
                                        beta->g.v[c] += gy;
                                        double dxh = gy * gamma->v.v[c];
                                        sum_dxh += dxh;
                                        sum_dxh_xh += dxh * xh;
                                    }
                            double mean_dxh = sum_dxh / static_cast<double>(m);
                            double mean_dxh_xh = sum_dxh_xh / static_cast<double>(m);
                            for (int c = g * cg; c < (g + 1) * cg; ++c)
                                for (int h = 0; h < H; ++h)
                                    for (int w = 0; w < W; ++w) {
                                        double dxh = nd.g.at4(n, c, h, w) * gamma->v.v[c];
                                        double xh = xhat->at4(n, c, h, w);
                                        x->g.at4(n, c, h, w) += is * (dxh - mean_dxh - xh * mean_dxh_xh);
                                    }
                        }
                });
}

Var upsample2x(const Var& x) {
    const Tensor& X = x->v;
    int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    Tensor out({N, C, 2 * H, 2 * W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < 2 * H; ++h)
                for (int w = 0; w < 2 * W; ++w) out.at4(n, c, h, w) = X.at4(n, c, h / 2, w / 2);
    return make(std::move(out), {x}, [x, N, C, H, W](Node& nd) {
        x->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < 2 * H; ++h)
                    for (int w = 0; w < 2 * W; ++w) x->g.at4(n, c, h / 2, w / 2) += nd.g.at4(n, c, h, w);
    });
}

Var concat_ch(const Var& a, const Var& b) {
    const Tensor& A = a->v;
    const Tensor& B = b->v;
    if (A.ndim() != 4 || B.ndim() != 4 || A.dim(0) != B.dim(0) || A.dim(2) != B.dim(2) || A.dim(3) != B.dim(3))
        throw std::invalid_argument("concat_ch: shape mismatch");
    int N = A.dim(0), Ca = A.dim(1), Cb = B.dim(1), H = A.dim(2), W = A.dim(3);
    Tensor out({N, Ca + Cb, H, W});
    int64_t plane = static_cast<int64_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        std::copy_n(A.v.data() + static_cast<size_t>(n) * Ca * plane, Ca * plane,
                    out.v.data() + static_cast<size_t>(n) * (Ca + Cb) * plane);
        std::copy_n(B.v.data() + static_cast<size_t>(n) * Cb * plane, Cb * plane,
                    out.v.data() + static_cast<size_t>(n) * (Ca + Cb) * plane + Ca * plane);
    }
    return make(std::move(out), {a, b}, [a, b, N, Ca, Cb, plane](Node& nd) {
        a->ensure_grad();
        b->ensure_grad();
        for (int n = 0; n < N; ++n) {
            const double* g = nd.g.v.data() + static_cast<size_t>(n) * (Ca + Cb) * plane;
            double* ga = a->g.v.data() + static_cast<size_t>(n) * Ca * plane;
            double* gb = b->g.v.data() + static_cast<size_t>(n) * Cb * plane;
            for (int64_t i = 0; i < Ca * plane; ++i) ga[i] += g[i];
            for (int64_t i = 0; i < Cb * plane; ++i) gb[i] += g[Ca * plane + i];
        }
    });
}

Var add_channel_bias(const Var& x, const Var& bias) {
    const Tensor& X = x->v;
    if (X.ndim() != 4 || bias->v.numel() != X.dim(1))
        throw std::invalid_argument("add_channel_bias: shape mismatch");
    int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    Tensor out = X;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) out.at4(n, c, h, w) += bias->v.v[c];
    return make(std::move(out), {x, bias}, [x, bias, N, C, H, W](Node& nd) {
        x->ensure_grad();
        bias->ensure_grad();
        x->accumulate(nd.g);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) bias->g.v[c] += nd.g.at4(n, c, h, w);
    });
}

// ---- shape ops ----------------------------------------------------------

Var reshape(const Var& a, std::vector<int> shape) {
    if (Tensor::numel_of(shape) != a->v.numel()) throw std::invalid_argument("reshape: numel mismatch");
    Tensor out;
    out.shape = std::move(shape);
    out.v = a->v.v;
    return make(std::move(out), {a}, [a](Node& nd) {
        a->ensure_grad();
        for (size_t i = 0; i < nd.g.v.size(); ++i) a->g.v[i] += nd.g.v[i];
    });
}

Var permute(const Var& a, std::vector<int> perm) {
    const Tensor& A = a->v;
    int r = A.ndim();
    if (static_cast<int>(perm.size()) != r) throw std::invalid_argument("permute: rank mismatch");
    std::vector<int> oshape(r);
    for (int i = 0; i < r; ++i) oshape[i] = A.shape[perm[i]];
    std::vector<int64_t> istr(r, 1), map(r);
    for (int i = r - 2; i >= 0; --i) istr[i] = istr[i + 1] * A.shape[i + 1];
    for (int i = 0; i < r; ++i) map[i] = istr[perm[i]];  // stride in input per output axis
    Tensor out(oshape);
    int64_t n = out.numel();
    std::vector<int> idx(r, 0);
    for (int64_t o = 0; o < n; ++o) {
        int64_t src = 0;
        for (int i = 0; i < r; ++i) src += idx[i] * map[i];
        out.v[o] = A.v[src];
        for (int i = r - 1; i >= 0; --i) {
            if (++idx[i] < oshape[i]) break;
            idx[i] = 0;
        }
    }
    return make(std::move(out), {a}, [a, oshape, map, r, n](Node& nd) {
        a->ensure_grad();
        std::vector<int> idx(r, 0);
        for (int64_t o = 0; o < n; ++o) {
            int64_t src = 0;
            for (int i = 0; i < r; ++i) src += idx[i] * map[i];
            a->g.v[src] += nd.g.v[o];
            for (int i = r - 1; i >= 0; --i) {
                if (++idx[i] < oshape[i]) break;
                idx[i] = 0;
            }
        }
    });
}

Var expand_batch(const Var& a, int B) {
    if (a->v.ndim() != 2) throw std::invalid_argument("expand_batch: rank-2 input required");
    int m = a->v.dim(0), n = a->v.dim(1);
    Tensor out({B, m, n});
    for (int b = 0; b < B; ++b)
        std::copy_n(a->v.v.data(), static_cast<size_t>(m) * n, out.v.data() + static_cast<size_t>(b) * m * n);
    return make(std::move(out), {a}, [a, B, m, n](Node& nd) {
        a->ensure_grad();
        for (int b = 0; b < B; ++b) {
            const double* g = nd.g.v.data() + static_cast<size_t>(b) * m * n;
            for (int64_t i = 0; i < static_cast<int64_t>(m) * n; ++i) a->g.v[i] += g[i];
        }
    });
}

Var rows(const Var& table, const std::vector<int>& idx) {
    if (table->v.ndim() != 2) throw std::invalid_argument("rows: rank-2 table required");
    int V = table->v.dim(0), d = table->v.dim(1);
    Tensor out({static_cast<int>(idx.size()), d});
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= V) throw std::out_of_range("rows: index out of range");
        std::copy_n(table->v.v.data() + static_cast<size_t>(idx[i]) * d, d, out.v.data() + i * d);
    }
    return make(std::move(out), {table}, [table, idx, d](Node& nd) {
        table->ensure_grad();
        for (size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < d; ++j) table->g.v[static_cast<size_t>(idx[i]) * d + j] += nd.g.v[i * d + j];
    });
}

Var sum_all(const Var& a) {
    Tensor out({1});
    for (double x : a->v.v) out.v[0] += x;
    return make(std::move(out), {a}, [a](Node& nd) {
        a->ensure_grad();
        for (double& g : a->g.v) g += nd.g.v[0];
    });
}

Var mean_all(const Var& a) {
    double inv = 1.0 / static_cast<double>(a->v.numel());
    Tensor out({1});
    for (double x : a->v.v) out.v[0] += x;
    out.v[0] *= inv;
    return make(std::move(out), {a}, [a, inv](Node& nd) {
        a->ensure_grad();
        for (double& g : a->g.v) g += inv * nd.g.v[0];
    });
}

Var attention(const Var& q, const Var& k, const Var& v) {
    int dk = q->v.shape.back();
    double inv = 1.0 / std::sqrt(static_cast<double>(dk));
    if (q->v.ndim() == 2) {
        Var s = scale(mm_nt(q, k), inv);
        return mm(softmax_last(s), v);
    }
    Var s = scale(bmm_nt(q, k), inv);
    return bmm(softmax_last(s), v);
}

}  // namespace dm::ag
