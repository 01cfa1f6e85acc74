#include "diffusion.hpp"

namespace dm {

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("make_linear_schedule: T must be positive");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw std::invalid_argument("make_linear_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas.resize(T);
    s.alphas.resize(T);
    s.alpha_bars.resize(T);
    double abar = 1.0;
    for (int t = 0; t < T; ++t) {
        double frac = T == 1 ? 0.0 : static_cast<double>(t) / (T - 1);
        s.betas[t] = beta_start + (beta_end - beta_start) * frac;
        s.alphas[t] = 1.0 - s.betas[t];
        abar *= s.alphas[t];
        s.alpha_bars[t] = abar;
    }
    return s;
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
    if (j.value("kind", "linear") != "linear")
        throw std::invalid_argument("noise schedule: unknown kind");
    return make_linear_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(),
                                j.at("beta_end").get<double>());
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& s) {
    if (!x0.same_shape(noise)) throw std::invalid_argument("q_sample: x0/noise shape mismatch");
    if (t < 0 || t >= s.T) throw std::out_of_range("q_sample: t out of range");
    double ab = s.alpha_bars[static_cast<size_t>(t)];
    double cs = std::sqrt(ab), cn = std::sqrt(1.0 - ab);
    Tensor out = x0;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = cs * out.v[i] + cn * noise.v[i];
    return out;
}

ag::Var eps_loss(const EpsModel& model, const Tensor& x0, int t, const Tensor& noise,
                 const NoiseSchedule& s) {
    Tensor x_t = q_sample(x0, t, noise, s);
    ag::Var pred = model(x_t, t);
    if (pred->v.shape != noise.shape) throw std::invalid_argument("eps_loss: prediction shape mismatch");
    return ag::mse(pred, ag::constant(noise));
}

namespace {

Tensor predict_eps(const EpsFn& cond, const EpsFn& uncond, const Tensor& x, int t, double g) {
    Tensor ec = cond(x, t);
    if (g == 1.0 || !uncond) return ec;
    Tensor eu = uncond(x, t);
    for (size_t i = 0; i < ec.v.size(); ++i) ec.v[i] = eu.v[i] + g * (ec.v[i] - eu.v[i]);
    return ec;
}

}  // namespace

Tensor sample_video(const EpsFn& cond, const EpsFn& uncond, const std::vector<int>& shape,
                    const NoiseSchedule& s, const SampleOptions& opt) {
    if (shape.size() != 4) throw std::invalid_argument("sample_video: [F,C,H,W] shape expected");
    if (shape[0] < 1 || shape[0] > kMaxFrames)
        throw std::invalid_argument("sample_video: frame count must be in [1,64]");
    if (opt.num_steps < 1 || opt.num_steps > s.T)
        throw std::invalid_argument("sample_video: num_steps must be in [1,T]");
    bool ddim = opt.sampler == "ddim";
    if (!ddim && opt.sampler != "ancestral")
        throw std::invalid_argument("sample_video: unknown sampler '" + opt.sampler + "'");

    // evenly spaced timestep subsequence, descending
    std::vector<int> ts(opt.num_steps);
    for (int i = 0; i < opt.num_steps; ++i) {
        double frac = opt.num_steps == 1 ? 1.0 : static_cast<double>(i) / (opt.num_steps - 1);
        ts[i] = static_cast<int>(std::llround(frac * (s.T - 1)));
    }
    std::reverse(ts.begin(), ts.end());

    Rng rng(Rng::derive(opt.seed, 0x5a3c1));
    Tensor x(shape);
    rng.fill_normal(x);

    for (size_t i = 0; i < ts.size(); ++i) {
        int t = ts[i];
        double ab = s.alpha_bars[static_cast<size_t>(t)];
        double ab_prev = i + 1 < ts.size() ? s.alpha_bars[static_cast<size_t>(ts[i + 1])] : 1.0;
        Tensor eps = predict_eps(cond, uncond, x, t, opt.guidance_scale);
        double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
        double sap = std::sqrt(ab_prev);
        auto denoised = [&](size_t k) {
            double x0 = (x.v[k] - sn * eps.v[k]) / sa;
            if (opt.clip_denoised) x0 = x0 < -1.0 ? -1.0 : (x0 > 1.0 ? 1.0 : x0);
            return x0;
        };
        if (ddim) {
            double snp = std::sqrt(1.0 - ab_prev);
            for (size_t k = 0; k < x.v.size(); ++k)
                x.v[k] = sap * denoised(k) + snp * eps.v[k];
        } else {
            double var = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev);
            double sigma = std::sqrt(std::max(0.0, var));
            double snp = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
            bool last = i + 1 == ts.size();
            for (size_t k = 0; k < x.v.size(); ++k)
                x.v[k] = sap * denoised(k) + snp * eps.v[k] + (last ? 0.0 : sigma * rng.normal());
        }
        if (!x.all_finite()) throw std::runtime_error("sample_video: non-finite state at t=" + std::to_string(t));
    }
    return x;
}

}  // namespace dm
