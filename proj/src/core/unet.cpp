#include "unet.hpp"

namespace dm {

void UNetConfig::validate() const {
    if (channel_multipliers.empty()) throw std::invalid_argument("UNetConfig: empty channel_multipliers");
    if (content_dim <= 0) throw std::invalid_argument("UNetConfig: content_dim must be positive");
    if (base_channels <= 0 || blocks_per_level <= 0 || d_attn <= 0 || motion_dim <= 0)
        throw std::invalid_argument("UNetConfig: non-positive dimension");
    if (max_frames < 1 || max_frames > kMaxFrames)
        throw std::invalid_argument("UNetConfig: max_frames must be in [1,64]");
}

nlohmann::json UNetConfig::to_json() const {
    return {{"in_channels", in_channels},
            {"base_channels", base_channels},
            {"channel_multipliers", channel_multipliers},
            {"blocks_per_level", blocks_per_level},
            {"attention_levels", std::vector<int>(attention_levels.begin(), attention_levels.end())},
            {"max_frames", max_frames},
            {"content_dim", content_dim},
            {"d_attn", d_attn},
            {"motion_dim", motion_dim}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
    UNetConfig c;
    c.in_channels = j.value("in_channels", 3);
    c.base_channels = j.at("base_channels").get<int>();
    c.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
    c.blocks_per_level = j.at("blocks_per_level").get<int>();
    auto lv = j.at("attention_levels").get<std::vector<int>>();
    c.attention_levels = std::set<int>(lv.begin(), lv.end());
    c.max_frames = j.value("max_frames", kMaxFrames);
    c.content_dim = j.at("content_dim").get<int>();
    c.d_attn = j.value("d_attn", c.content_dim);
    c.motion_dim = j.value("motion_dim", c.content_dim);
    c.validate();
    return c;
}

Tensor sinusoidal_embedding(int position, int dim) {
    Tensor e({dim});
    for (int i = 0; i < dim; ++i) {
        double freq = std::pow(10000.0, -static_cast<double>(i / 2 * 2) / dim);
        double x = position * freq;
        e.v[static_cast<size_t>(i)] = (i % 2 == 0) ? std::sin(x) : std::cos(x);
    }
    return e;
}

// ---- MotionBlock ---------------------------------------------------------

MotionBlock::MotionBlock(ParamStore& ps, const std::string& name, int C, int dk_, int max_frames_,
                         Rng& rng)
    : channels(C), dk(dk_), max_frames(max_frames_) {
    Wq = ps.param(name + ".Wq", kaiming({C, dk}, C, rng));
    Wk = ps.param(name + ".Wk", kaiming({C, dk}, C, rng));
    Wv = ps.param(name + ".Wv", kaiming({C, dk}, C, rng));
    Wout = ps.param(name + ".Wout", Tensor({dk, C}));  // zero-init: block starts as identity
    bout = ps.param(name + ".bout", Tensor({C}));
    pos = Tensor({max_frames, C});
    for (int f = 0; f < max_frames; ++f) {
        Tensor e = sinusoidal_embedding(f, C);
        for (int c = 0; c < C; ++c) pos.at2(f, c) = e.v[static_cast<size_t>(c)];
    }
}

ag::Var MotionBlock::forward(const ag::Var& x, bool use_pos) const {
    int F = x->v.dim(0), C = x->v.dim(1), H = x->v.dim(2), W = x->v.dim(3);
    if (F > max_frames)
        throw std::invalid_argument("motion block: frame count " + std::to_string(F) +
                                    " exceeds positional table length " + std::to_string(max_frames));
    int B = H * W;
    ag::Var u = ag::reshape(ag::permute(x, {2, 3, 0, 1}), {B, F, C});
    ag::Var tok = u;
    if (use_pos) {
        Tensor p({F, C});
        for (int f = 0; f < F; ++f)
            for (int c = 0; c < C; ++c) p.at2(f, c) = pos.at2(f, c);
        tok = ag::add(u, ag::constant(p));  // suffix broadcast over locations
    }
    ag::Var flat = ag::reshape(tok, {B * F, C});
    ag::Var q = ag::reshape(ag::mm(flat, Wq), {B, F, dk});
    ag::Var k = ag::reshape(ag::mm(flat, Wk), {B, F, dk});
    ag::Var v = ag::reshape(ag::mm(flat, Wv), {B, F, dk});
    ag::Var a = ag::attention(q, k, v);  // [B,F,dk]
    ag::Var o = ag::add(ag::mm(ag::reshape(a, {B * F, dk}), Wout), bout);
    o = ag::permute(ag::reshape(o, {H, W, F, C}), {2, 3, 0, 1});
    return ag::add(x, o);
}

// ---- ResBlock ------------------------------------------------------------

ResBlock::ResBlock(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int time_dim,
                   Rng& rng) {
    gn1 = GroupNorm(ps, name + ".gn1", in_ch, norm_groups_for(in_ch));
    conv1 = Conv2d(ps, name + ".conv1", in_ch, out_ch, 3, 1, 1, rng);
    temb_proj = Linear(ps, name + ".temb", time_dim, out_ch, rng);
    gn2 = GroupNorm(ps, name + ".gn2", out_ch, norm_groups_for(out_ch));
    conv2 = Conv2d(ps, name + ".conv2", out_ch, out_ch, 3, 1, 1, rng);
    if (in_ch != out_ch) skip = Conv2d(ps, name + ".skip", in_ch, out_ch, 1, 1, 0, rng);
}

ag::Var ResBlock::forward(const ag::Var& x, const ag::Var& temb) const {
    ag::Var h = conv1.forward(ag::silu(gn1.forward(x)));
    ag::Var tb = ag::reshape(temb_proj.forward(temb), {h->v.dim(1)});
    h = ag::add_channel_bias(h, tb);
    h = conv2.forward(ag::silu(gn2.forward(h)));
    ag::Var xs = skip ? skip->forward(x) : x;
    return ag::add(h, xs);
}

// ---- CrossAttnBlock ------------------------------------------------------

CrossAttnBlock::CrossAttnBlock(ParamStore& ps, const std::string& spatial_name,
                               const std::string& attn_name, int C, int content_dim, int d_attn,
                               Rng& rng) {
    norm = GroupNorm(ps, spatial_name + ".norm", C, norm_groups_for(C));
    w = make_guider_weights(ps, attn_name, C, content_dim, d_attn, rng);
    Wout = ps.param(attn_name + ".Wout", kaiming({d_attn, C}, d_attn, rng));
    bout = ps.param(attn_name + ".bout", Tensor({C}));
}

ag::Var CrossAttnBlock::forward(const ag::Var& x, const ContentVars& emb) const {
    int F = x->v.dim(0), C = x->v.dim(1), H = x->v.dim(2), W = x->v.dim(3);
    ag::Var t = ag::reshape(ag::permute(norm.forward(x), {0, 2, 3, 1}), {F, H * W, C});
    ag::Var a = guided_cross_attention_batched(t, emb, w);  // [F, HW, d_attn]
    ag::Var o = ag::add(ag::mm(ag::reshape(a, {F * H * W, w.d_attn}), Wout), bout);
    o = ag::permute(ag::reshape(o, {F, H, W, C}), {0, 3, 1, 2});
    return ag::add(x, o);
}

// ---- UNetTrunk -----------------------------------------------------------

UNetTrunk::UNetTrunk(ParamStore& ps, const UNetConfig& cfg_, const std::string& spatial_group,
                     const std::string& motion_group, const std::string& attn_group_, Rng& rng)
    : cfg(cfg_), spatial(spatial_group), attn_group(attn_group_) {
    cfg.validate();
    int td = cfg.time_dim();
    conv_in = Conv2d(ps, spatial + "/conv_in", cfg.in_channels, cfg.base_channels, 3, 1, 1, rng);
    time_mlp0 = Linear(ps, spatial + "/time.mlp0", td, td, rng);
    time_mlp1 = Linear(ps, spatial + "/time.mlp1", td, td, rng);

    int ch = cfg.base_channels;
    skip_channels.push_back(ch);
    down.resize(cfg.levels());
    for (int l = 0; l < cfg.levels(); ++l) {
        int out_ch = cfg.base_channels * cfg.channel_multipliers[static_cast<size_t>(l)];
        for (int b = 0; b < cfg.blocks_per_level; ++b) {
            std::string loc = "down" + std::to_string(l) + ".block" + std::to_string(b);
            DownUnit u;
            u.res = ResBlock(ps, spatial + "/" + loc + ".res", ch, out_ch, td, rng);
            ch = out_ch;
            if (cfg.attention_levels.count(l))
                u.attn = CrossAttnBlock(ps, spatial + "/" + loc + ".attn", attn_group + "/attn." + loc,
                                        ch, cfg.content_dim, cfg.d_attn, rng);
            u.motion = MotionBlock(ps, motion_group + "/" + loc + ".motion", ch, cfg.motion_dim,
                                   cfg.max_frames, rng);
            down[static_cast<size_t>(l)].push_back(std::move(u));
            skip_channels.push_back(ch);
        }
        if (l + 1 < cfg.levels()) {
            downsample.push_back(
                Conv2d(ps, spatial + "/down" + std::to_string(l) + ".downsample", ch, ch, 3, 2, 1, rng));
            skip_channels.push_back(ch);
        }
    }
    mid_res1 = ResBlock(ps, spatial + "/middle.res1", ch, ch, td, rng);
    mid_attn = CrossAttnBlock(ps, spatial + "/middle.attn", attn_group + "/attn.middle", ch,
                              cfg.content_dim, cfg.d_attn, rng);
    mid_motion1 = MotionBlock(ps, motion_group + "/middle.motion1", ch, cfg.motion_dim, cfg.max_frames, rng);
    mid_res2 = ResBlock(ps, spatial + "/middle.res2", ch, ch, td, rng);
    mid_motion2 = MotionBlock(ps, motion_group + "/middle.motion2", ch, cfg.motion_dim, cfg.max_frames, rng);
}

ag::Var UNetTrunk::time_embedding(int t) const {
    ag::Var e = ag::constant(sinusoidal_embedding(t, cfg.time_dim()));
    e = ag::reshape(e, {1, cfg.time_dim()});
    return time_mlp1.forward(ag::silu(time_mlp0.forward(e)));
}

ag::Var UNetTrunk::run(const ag::Var& x0feat, const ag::Var& temb, const ContentVars& emb,
                       std::vector<ag::Var>& skips, bool use_motion_pos) const {
    ag::Var h = x0feat;
    skips.push_back(h);
    for (int l = 0; l < cfg.levels(); ++l) {
        for (const DownUnit& u : down[static_cast<size_t>(l)]) {
            h = u.res.forward(h, temb);
            if (u.attn) h = u.attn->forward(h, emb);
            h = u.motion.forward(h, use_motion_pos);
            skips.push_back(h);
        }
        if (l + 1 < cfg.levels()) {
            h = downsample[static_cast<size_t>(l)].forward(h);
            skips.push_back(h);
        }
    }
    h = mid_res1.forward(h, temb);
    h = mid_attn.forward(h, emb);
    h = mid_motion1.forward(h, use_motion_pos);
    h = mid_res2.forward(h, temb);
    h = mid_motion2.forward(h, use_motion_pos);
    return h;
}

// ---- DenoisingUNet -------------------------------------------------------

DenoisingUNet::DenoisingUNet(ParamStore& ps, const UNetConfig& cfg, Rng& rng)
    : cfg_(cfg), trunk_(ps, cfg, "unet_spatial", "unet_motion", "guider", rng) {
    cfg_.validate();
    int td = cfg_.time_dim();
    int L = cfg_.levels();
    int ch = cfg_.base_channels * cfg_.channel_multipliers.back();
    std::vector<int> skip_ch = trunk_.skip_channels;  // consumed back to front
    up_.resize(static_cast<size_t>(L));
    up_conv_.resize(static_cast<size_t>(L));  // index l>0 used
    for (int l = L - 1; l >= 0; --l) {
        int out_ch = cfg_.base_channels * cfg_.channel_multipliers[static_cast<size_t>(l)];
        for (int b = 0; b <= cfg_.blocks_per_level; ++b) {
            int sc = skip_ch.back();
            skip_ch.pop_back();
            std::string loc = "up" + std::to_string(l) + ".block" + std::to_string(b);
            UpUnit u;
            u.res = ResBlock(ps, "unet_spatial/" + loc + ".res", ch + sc, out_ch, td, rng);
            ch = out_ch;
            if (cfg_.attention_levels.count(l))
                u.attn = CrossAttnBlock(ps, "unet_spatial/" + loc + ".attn", "guider/attn." + loc, ch,
                                        cfg_.content_dim, cfg_.d_attn, rng);
            u.motion = MotionBlock(ps, "unet_motion/" + loc + ".motion", ch, cfg_.motion_dim,
                                   cfg_.max_frames, rng);
            up_[static_cast<size_t>(l)].push_back(std::move(u));
        }
        if (l > 0)
            up_conv_[static_cast<size_t>(l)] =
                Conv2d(ps, "unet_spatial/up" + std::to_string(l) + ".upconv", ch, ch, 3, 1, 1, rng);
    }
    out_norm_ = GroupNorm(ps, "unet_spatial/out.norm", ch, norm_groups_for(ch));
    out_conv_ = Conv2d(ps, "unet_spatial/out.conv", ch, cfg_.in_channels, 3, 1, 1, rng);
}

int DenoisingUNet::num_injection_points() const {
    return static_cast<int>(trunk_.skip_channels.size()) + 1;
}

ag::Var DenoisingUNet::forward(const Tensor& x, int t, const ContentVars& emb,
                               const std::vector<ag::Var>* residuals, bool use_motion_pos) const {
    if (x.ndim() != 4 || x.dim(1) != cfg_.in_channels)
        throw std::invalid_argument("unet_forward: [F," + std::to_string(cfg_.in_channels) +
                                    ",H,W] input expected, got " + x.shape_str());
    int F = x.dim(0);
    if (F < 1 || F > cfg_.max_frames)
        throw std::invalid_argument("unet_forward: frame count " + std::to_string(F) +
                                    " outside [1," + std::to_string(cfg_.max_frames) + "]");
    ag::Var temb = trunk_.time_embedding(t);
    std::vector<ag::Var> skips;
    ag::Var h = trunk_.run(trunk_.conv_in.forward(ag::constant(x)), temb, emb, skips, use_motion_pos);

    if (residuals) {
        if (static_cast<int>(residuals->size()) != num_injection_points())
            throw std::invalid_argument("unet_forward: expected " + std::to_string(num_injection_points()) +
                                        " residuals, got " + std::to_string(residuals->size()));
        for (size_t i = 0; i < skips.size(); ++i) {
            if ((*residuals)[i]->v.shape != skips[i]->v.shape)
                throw std::invalid_argument("unet_forward: residual " + std::to_string(i) +
                                            " shape " + (*residuals)[i]->v.shape_str() + " != skip shape " +
                                            skips[i]->v.shape_str());
            skips[i] = ag::add(skips[i], (*residuals)[i]);
        }
        if (residuals->back()->v.shape != h->v.shape)
            throw std::invalid_argument("unet_forward: middle residual shape mismatch");
        h = ag::add(h, residuals->back());
    }

    for (int l = cfg_.levels() - 1; l >= 0; --l) {
        for (const UpUnit& u : up_[static_cast<size_t>(l)]) {
            ag::Var skip = skips.back();
            skips.pop_back();
            h = u.res.forward(ag::concat_ch(h, skip), temb);
            if (u.attn) h = u.attn->forward(h, emb);
            h = u.motion.forward(h, use_motion_pos);
        }
        if (l > 0) h = up_conv_[static_cast<size_t>(l)].forward(ag::upsample2x(h));
    }
    return out_conv_.forward(ag::silu(out_norm_.forward(h)));
}

}  // namespace dm
