#pragma once

#include "unet.hpp"

namespace dm {

// Per-frame control maps aligned with a clip, plus the raw keypoints used for
// evaluation (pose modality only).
struct ControlSequence {
    std::string modality;  // "pose" | "depth"
    Tensor maps;           // [F, C_ctl, H, W]
    std::optional<Tensor> keypoints;  // [F, K, 2] (x,y) pixel coordinates
    std::string source_id;
    double fps = 8.0;

    int frames() const { return maps.ndim() == 4 ? maps.dim(0) : 0; }
    void validate() const;

    void save(const std::string& path) const;  // archive + JSON sidecar <path>.json
    static ControlSequence load(const std::string& path);
};

// The per-injection-point additive features emitted by one ControlNet pass.
struct ResidualSet {
    std::vector<Tensor> r;
    double scale = 1.0;
};

// result[i] = sum_j scales[j] * sets[j].r[i]
ResidualSet combine_residuals(const std::vector<ResidualSet>& sets, const std::vector<double>& scales);

// Structural twin of the U-Net encoder + middle with its own motion blocks; a
// control embedder feeds the control maps into the first feature space and
// zero-initialized 1x1 projections emit one residual per injection point.
class VideoControlNet {
public:
    VideoControlNet(ParamStore& ps, const UNetConfig& cfg, int ctl_channels, Rng& rng);

    // Copy the spatial weights (conv_in, time MLP, down blocks, middle,
    // cross-attention) from the paired U-Net's parameters.
    void copy_spatial_from(const ParamStore& ps);

    // Residuals in injection-point order (graph-connected for training).
    std::vector<ag::Var> forward(const Tensor& x, int t, const ContentVars& emb,
                                 const ControlSequence& ctl, bool use_motion_pos = true) const;

    ResidualSet forward_tensors(const Tensor& x, int t, const ContentVars& emb,
                                const ControlSequence& ctl) const;

    int num_injection_points() const { return static_cast<int>(trunk_.skip_channels.size()) + 1; }
    int ctl_channels() const { return ctl_channels_; }
    const UNetConfig& config() const { return cfg_; }

private:
    UNetConfig cfg_;
    int ctl_channels_;
    ParamStore* ps_;
    UNetTrunk trunk_;
    Conv2d hint_conv1_, hint_conv2_;
    std::vector<Conv2d> zero_convs_;  // one per injection point
};

}  // namespace dm
