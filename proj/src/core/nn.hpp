#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>

#include "autograd.hpp"
#include "rng.hpp"

namespace dm {

using ag::Var;

// Named parameter registry. The prefix up to the first '/' is the parameter
// group (unet_spatial, unet_motion, controlnet_spatial, controlnet_motion,
// guider); the five groups partition all trainable parameters.
class ParamStore {
public:
    Var param(const std::string& name, Tensor init) {
        auto it = m_.find(name);
        if (it != m_.end()) throw std::logic_error("duplicate parameter: " + name);
        Var v = ag::leaf(std::move(init), true);
        m_.emplace(name, v);
        return v;
    }

    Var get(const std::string& name) const {
        auto it = m_.find(name);
        if (it == m_.end()) throw std::out_of_range("no parameter: " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return m_.count(name) != 0; }

    const std::map<std::string, Var>& all() const { return m_; }

    void zero_grads() {
        for (auto& [k, v] : m_) v->zero_grad();
    }

    static std::string group_of(const std::string& name) {
        auto pos = name.find('/');
        return pos == std::string::npos ? name : name.substr(0, pos);
    }

    std::set<std::string> groups() const {
        std::set<std::string> g;
        for (auto& [k, v] : m_) g.insert(group_of(k));
        return g;
    }

    // Snapshot of all parameter values (for freeze verification).
    std::map<std::string, Tensor> snapshot() const {
        std::map<std::string, Tensor> s;
        for (auto& [k, v] : m_) s.emplace(k, v->v);
        return s;
    }

    void load_values(const std::map<std::string, Tensor>& values, bool strict = true) {
        for (auto& [k, t] : values) {
            auto it = m_.find(k);
            if (it == m_.end()) {
                if (strict) throw std::runtime_error("checkpoint parameter not in model: " + k);
                continue;
            }
            if (it->second->v.shape != t.shape)
                throw std::runtime_error("shape mismatch for parameter " + k);
            it->second->v = t;
        }
    }

private:
    std::map<std::string, Var> m_;
};

// ---- initializers -------------------------------------------------------

inline Tensor kaiming(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    rng.fill_normal(t, std::sqrt(2.0 / static_cast<double>(fan_in)));
    return t;
}

// ---- layers -------------------------------------------------------------

struct Linear {
    Var W, b;
    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, bool zero_init = false) {
        Tensor w({in, out});
        if (!zero_init) rng.fill_normal(w, std::sqrt(1.0 / in));
        W = ps.param(name + ".W", std::move(w));
        b = ps.param(name + ".b", Tensor({out}));
    }
    Var forward(const Var& x) const {  // x: [*, in] flattened to 2-d by caller
        return ag::add(ag::mm(x, W), b);
    }
};

struct Conv2d {
    Var w, b;
    int stride = 1, pad = 1;
    Conv2d() = default;
    Conv2d(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k, int stride_, int pad_,
           Rng& rng, bool zero_init = false)
        : stride(stride_), pad(pad_) {
        Tensor wt({out_ch, in_ch, k, k});
        if (!zero_init) rng.fill_normal(wt, std::sqrt(2.0 / (in_ch * k * k)));
        w = ps.param(name + ".w", std::move(wt));
        b = ps.param(name + ".b", Tensor({out_ch}));
    }
    Var forward(const Var& x) const { return ag::conv2d(x, w, b, stride, pad); }
};

struct GroupNorm {
    Var gamma, beta;
    int groups = 1;
    GroupNorm() = default;
    GroupNorm(ParamStore& ps, const std::string& name, int channels, int groups_) : groups(groups_) {
        gamma = ps.param(name + ".gamma", Tensor({channels}, 1.0));
        beta = ps.param(name + ".beta", Tensor({channels}));
    }
    Var forward(const Var& x) const { return ag::group_norm(x, gamma, beta, groups); }
};

inline int norm_groups_for(int channels) { return channels % 4 == 0 ? 4 : 1; }

// ---- optimizer ----------------------------------------------------------

// Decoupled weight decay Adam. Only parameters whose group is in
// `trainable_groups` are updated; everything else stays bit-identical.
class AdamW {
public:
    AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(ParamStore& ps, const std::set<std::string>& trainable_groups, double clip_norm = 1.0) {
        // global grad-norm clip over trainable params
        double sq = 0.0;
        for (auto& [name, p] : ps.all()) {
            if (!trainable_groups.count(ParamStore::group_of(name)) || !p->grad_ready) continue;
            for (double g : p->g.v) sq += g * g;
        }
        double gnorm = std::sqrt(sq);
        double cscale = (clip_norm > 0.0 && gnorm > clip_norm) ? clip_norm / gnorm : 1.0;

        ++t_;
        double bc1 = 1.0 - std::pow(b1_, t_);
        double bc2 = 1.0 - std::pow(b2_, t_);
        for (auto& [name, p] : ps.all()) {
            if (!trainable_groups.count(ParamStore::group_of(name))) continue;
            auto& st = state_[name];
            if (st.m.v.empty()) {
                st.m = Tensor(p->v.shape);
                st.s = Tensor(p->v.shape);
            }
            for (size_t i = 0; i < p->v.v.size(); ++i) {
                double g = p->grad_ready ? p->g.v[i] * cscale : 0.0;
                st.m.v[i] = b1_ * st.m.v[i] + (1.0 - b1_) * g;
                st.s.v[i] = b2_ * st.s.v[i] + (1.0 - b2_) * g * g;
                double mhat = st.m.v[i] / bc1;
                double shat = st.s.v[i] / bc2;
                p->v.v[i] -= lr_ * (mhat / (std::sqrt(shat) + eps_) + wd_ * p->v.v[i]);
            }
        }
    }

private:
    struct State {
        Tensor m, s;
    };
    double lr_, wd_, b1_, b2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, State> state_;
};

}  // namespace dm
