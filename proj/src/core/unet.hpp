#pragma once

#include <set>

#include <json.hpp>

#include "diffusion.hpp"
#include "guider.hpp"
#include "nn.hpp"

namespace dm {

struct UNetConfig {
    int in_channels = 3;
    int base_channels = 8;
    std::vector<int> channel_multipliers = {1, 2};
    int blocks_per_level = 1;
    std::set<int> attention_levels = {1};
    int max_frames = kMaxFrames;
    int content_dim = 16;  // d shared by all content token features
    int d_attn = 16;       // cross-attention inner dim
    int motion_dim = 16;   // temporal attention inner dim

    int levels() const { return static_cast<int>(channel_multipliers.size()); }
    int time_dim() const { return base_channels * 4; }
    void validate() const;

    nlohmann::json to_json() const;
    static UNetConfig from_json(const nlohmann::json& j);
};

// Temporal self-attention over the frame axis at each spatial location, with
// fixed sinusoidal frame-position embeddings and a zero-initialized output
// projection (insertion is behavior-preserving).
struct MotionBlock {
    ag::Var Wq, Wk, Wv, Wout, bout;
    Tensor pos;  // [max_frames, C]
    int channels = 0, dk = 0, max_frames = 0;

    MotionBlock() = default;
    MotionBlock(ParamStore& ps, const std::string& name, int C, int dk, int max_frames, Rng& rng);
    ag::Var forward(const ag::Var& x, bool use_pos = true) const;
};

struct ResBlock {
    GroupNorm gn1, gn2;
    Conv2d conv1, conv2;
    Linear temb_proj;
    std::optional<Conv2d> skip;
    ResBlock() = default;
    ResBlock(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int time_dim, Rng& rng);
    ag::Var forward(const ag::Var& x, const ag::Var& temb) const;
};

struct CrossAttnBlock {
    GroupNorm norm;
    GuiderWeights w;
    ag::Var Wout, bout;
    CrossAttnBlock() = default;
    CrossAttnBlock(ParamStore& ps, const std::string& spatial_name, const std::string& attn_name,
                   int C, int content_dim, int d_attn, Rng& rng);
    ag::Var forward(const ag::Var& x, const ContentVars& emb) const;
};

Tensor sinusoidal_embedding(int position, int dim);

// Encoder + middle trunk shared between the Denoising U-Net and the Video
// ControlNet (the ControlNet is a structural twin of this part).
struct UNetTrunk {
    UNetConfig cfg;
    std::string spatial, attn_group;  // param name prefixes
    Conv2d conv_in;
    Linear time_mlp0, time_mlp1;
    struct DownUnit {
        ResBlock res;
        std::optional<CrossAttnBlock> attn;
        MotionBlock motion;
    };
    std::vector<std::vector<DownUnit>> down;  // [level][block]
    std::vector<Conv2d> downsample;           // between levels
    ResBlock mid_res1, mid_res2;
    CrossAttnBlock mid_attn;
    MotionBlock mid_motion1, mid_motion2;
    std::vector<int> skip_channels;  // channel count of each skip entry

    UNetTrunk() = default;
    UNetTrunk(ParamStore& ps, const UNetConfig& cfg, const std::string& spatial_group,
              const std::string& motion_group, const std::string& attn_group, Rng& rng);

    ag::Var time_embedding(int t) const;
    // Runs the encoder; appends each skip feature to `skips` and returns the
    // middle-block output. `residuals` (when given) are added to the skips
    // and middle output (denoising side); the ControlNet side passes none.
    ag::Var run(const ag::Var& x0feat, const ag::Var& temb, const ContentVars& emb,
                std::vector<ag::Var>& skips, bool use_motion_pos) const;
};

class DenoisingUNet {
public:
    DenoisingUNet(ParamStore& ps, const UNetConfig& cfg, Rng& rng);

    // x: [F,C,H,W]; residuals (optional) must match injection-point shapes
    // (index 0 = conv_in skip, then each down-block/downsample skip in order,
    // last = middle). Graph-connected so ControlNet training sees gradients.
    ag::Var forward(const Tensor& x, int t, const ContentVars& emb,
                    const std::vector<ag::Var>* residuals = nullptr,
                    bool use_motion_pos = true) const;

    int num_injection_points() const;
    const UNetConfig& config() const { return cfg_; }
    const UNetTrunk& trunk() const { return trunk_; }

private:
    UNetConfig cfg_;
    UNetTrunk trunk_;
    struct UpUnit {
        ResBlock res;
        std::optional<CrossAttnBlock> attn;
        MotionBlock motion;
    };
    std::vector<std::vector<UpUnit>> up_;  // [level reversed][block]
    std::vector<Conv2d> up_conv_;          // post-upsample convs
    GroupNorm out_norm_;
    Conv2d out_conv_;
};

}  // namespace dm
