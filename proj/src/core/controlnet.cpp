#include "controlnet.hpp"

#include <fstream>

#include "archive.hpp"

namespace dm {

void ControlSequence::validate() const {
    if (modality != "pose" && modality != "depth")
        throw std::invalid_argument("control sequence: unknown modality '" + modality + "'");
    if (maps.ndim() != 4) throw std::invalid_argument("control sequence: maps must be [F,C,H,W]");
    if (maps.dim(0) < 1 || maps.dim(0) > kMaxFrames)
        throw std::invalid_argument("control sequence: frame count outside [1,64]");
    if (keypoints && (keypoints->ndim() != 3 || keypoints->dim(0) != maps.dim(0) || keypoints->dim(2) != 2))
        throw std::invalid_argument("control sequence: keypoints must be [F,K,2]");
}

void ControlSequence::save(const std::string& path) const {
    validate();
    Archive a;
    a.put("maps", maps, 0);
    if (keypoints) a.put("keypoints", *keypoints, 0);
    a.save(path);
    nlohmann::json sidecar = {{"modality", modality}, {"fps", fps}, {"source_id", source_id}};
    std::ofstream os(path + ".json");
    if (!os) throw std::runtime_error("control sequence: cannot write sidecar for " + path);
    os << sidecar.dump(2) << "\n";
}

ControlSequence ControlSequence::load(const std::string& path) {
    Archive a = Archive::load(path);
    ControlSequence c;
    c.maps = a.get("maps");
    if (a.has("keypoints")) c.keypoints = a.get("keypoints");
    std::ifstream is(path + ".json");
    if (!is) throw std::runtime_error("control sequence: missing sidecar " + path + ".json");
    nlohmann::json sidecar = nlohmann::json::parse(is);
    c.modality = sidecar.at("modality").get<std::string>();
    c.fps = sidecar.value("fps", 8.0);
    c.source_id = sidecar.value("source_id", "");
    c.validate();
    return c;
}

ResidualSet combine_residuals(const std::vector<ResidualSet>& sets, const std::vector<double>& scales) {
    if (sets.empty()) throw std::invalid_argument("combine_residuals: empty set list");
    if (sets.size() != scales.size())
        throw std::invalid_argument("combine_residuals: scales/sets length mismatch");
    for (const auto& s : sets) {
        if (s.r.size() != sets[0].r.size())
            throw std::invalid_argument("combine_residuals: injection-point count mismatch");
        for (size_t i = 0; i < s.r.size(); ++i)
            if (s.r[i].shape != sets[0].r[i].shape)
                throw std::invalid_argument("combine_residuals: shape mismatch at point " +
                                            std::to_string(i));
    }
    ResidualSet out;
    out.scale = 1.0;
    out.r.reserve(sets[0].r.size());
    for (size_t i = 0; i < sets[0].r.size(); ++i) {
        Tensor acc(sets[0].r[i].shape);
        for (size_t j = 0; j < sets.size(); ++j) {
            double w = scales[j] * sets[j].scale;
            if (w == 0.0) continue;
            for (size_t k = 0; k < acc.v.size(); ++k) acc.v[k] += w * sets[j].r[i].v[k];
        }
        out.r.push_back(std::move(acc));
    }
    return out;
}

VideoControlNet::VideoControlNet(ParamStore& ps, const UNetConfig& cfg, int ctl_channels, Rng& rng)
    : cfg_(cfg), ctl_channels_(ctl_channels), ps_(&ps),
      trunk_(ps, cfg, "controlnet_spatial", "controlnet_motion", "controlnet_spatial", rng) {
    if (ctl_channels < 1) throw std::invalid_argument("controlnet: ctl_channels must be positive");
    hint_conv1_ = Conv2d(ps, "controlnet_spatial/hint.conv1", ctl_channels, 8, 3, 1, 1, rng);
    // zero-init so an untrained hint path cannot perturb the copied encoder
    hint_conv2_ = Conv2d(ps, "controlnet_spatial/hint.conv2", 8, cfg.base_channels, 3, 1, 1, rng, true);
    int points = static_cast<int>(trunk_.skip_channels.size()) + 1;
    int mid_ch = cfg.base_channels * cfg.channel_multipliers.back();
    for (int i = 0; i < points; ++i) {
        int ch = i < points - 1 ? trunk_.skip_channels[static_cast<size_t>(i)] : mid_ch;
        zero_convs_.push_back(
            Conv2d(ps, "controlnet_spatial/zero" + std::to_string(i), ch, ch, 1, 1, 0, rng, true));
    }
}

void VideoControlNet::copy_spatial_from(const ParamStore& ps) {
    // controlnet_spatial/<suffix> <- unet_spatial/<suffix> for the shared
    // trunk; cross-attention lives under guider/ on the U-Net side.
    for (const auto& [name, var] : ps_->all()) {
        std::string grp = ParamStore::group_of(name);
        if (grp != "controlnet_spatial") continue;
        std::string suffix = name.substr(grp.size() + 1);
        if (suffix.rfind("hint.", 0) == 0 || suffix.rfind("zero", 0) == 0) continue;
        std::string src = suffix.rfind("attn.", 0) == 0 ? "guider/" + suffix : "unet_spatial/" + suffix;
        if (!ps.has(src)) continue;
        const Tensor& t = ps.get(src)->v;
        if (t.shape != var->v.shape)
            throw std::runtime_error("controlnet copy: shape mismatch for " + name);
        var->v = t;
    }
}

std::vector<ag::Var> VideoControlNet::forward(const Tensor& x, int t, const ContentVars& emb,
                                              const ControlSequence& ctl, bool use_motion_pos) const {
    ctl.validate();
    if (x.ndim() != 4) throw std::invalid_argument("controlnet_forward: [F,C,H,W] input expected");
    if (ctl.maps.dim(0) != x.dim(0))
        throw std::invalid_argument("controlnet_forward: control frame count " +
                                    std::to_string(ctl.maps.dim(0)) + " != clip frame count " +
                                    std::to_string(x.dim(0)));
    if (x.dim(0) > cfg_.max_frames)
        throw std::invalid_argument("controlnet_forward: frame count exceeds max_frames");
    if (ctl.maps.dim(1) != ctl_channels_)
        throw std::invalid_argument("controlnet_forward: modality channel mismatch (" +
                                    std::to_string(ctl.maps.dim(1)) + " != " +
                                    std::to_string(ctl_channels_) + ")");
    if (ctl.maps.dim(2) != x.dim(2) || ctl.maps.dim(3) != x.dim(3))
        throw std::invalid_argument("controlnet_forward: control map resolution mismatch");

    ag::Var temb = trunk_.time_embedding(t);
    ag::Var hint = hint_conv2_.forward(ag::silu(hint_conv1_.forward(ag::constant(ctl.maps))));
    ag::Var h0 = ag::add(trunk_.conv_in.forward(ag::constant(x)), hint);
    std::vector<ag::Var> skips;
    ag::Var mid = trunk_.run(h0, temb, emb, skips, use_motion_pos);
    std::vector<ag::Var> out;
    out.reserve(skips.size() + 1);
    for (size_t i = 0; i < skips.size(); ++i) out.push_back(zero_convs_[i].forward(skips[i]));
    out.push_back(zero_convs_.back().forward(mid));
    return out;
}

ResidualSet VideoControlNet::forward_tensors(const Tensor& x, int t, const ContentVars& emb,
                                             const ControlSequence& ctl) const {
    ag::NoGradGuard ng;
    ResidualSet rs;
    for (const ag::Var& v : forward(x, t, emb, ctl)) rs.r.push_back(v->v);
    return rs;
}

}  // namespace dm
