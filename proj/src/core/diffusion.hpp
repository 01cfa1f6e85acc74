#pragma once

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "autograd.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace dm {

constexpr int kMaxFrames = 64;

struct NoiseSchedule {
    int T = 0;
    double beta_start = 0.0, beta_end = 0.0;
    std::vector<double> betas, alphas, alpha_bars;

    nlohmann::json to_json() const {
        return {{"T", T}, {"beta_start", beta_start}, {"beta_end", beta_end}, {"kind", "linear"}};
    }
    static NoiseSchedule from_json(const nlohmann::json& j);
};

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise
Tensor q_sample(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& s);

// Noise predictor with conditioning already bound; x_t is [F,C,H,W].
using EpsModel = std::function<ag::Var(const Tensor& x_t, int t)>;
using EpsFn = std::function<Tensor(const Tensor& x_t, int t)>;

// Mean squared error between model(q_sample(x0,t,noise), t) and noise.
ag::Var eps_loss(const EpsModel& model, const Tensor& x0, int t, const Tensor& noise,
                 const NoiseSchedule& s);

struct SampleOptions {
    std::string sampler = "ddim";  // ddim | ancestral
    int num_steps = 50;
    double guidance_scale = 1.0;
    uint64_t seed = 0;
    // clamp the predicted clean signal to [-1,1] each step; keeps coarse-step
    // trajectories bounded when the model's eps error is amplified by 1/sqrt(abar)
    bool clip_denoised = true;
};

// Reverse-process sampling. `uncond` is only consulted when guidance_scale != 1.
Tensor sample_video(const EpsFn& cond, const EpsFn& uncond, const std::vector<int>& shape,
                    const NoiseSchedule& s, const SampleOptions& opt);

}  // namespace dm
