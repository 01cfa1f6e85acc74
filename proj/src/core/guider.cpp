#include "guider.hpp"

#include <cctype>

namespace dm {

GuiderWeights make_guider_weights(ParamStore& ps, const std::string& prefix, int d_z, int d,
                                  int d_attn, Rng& rng) {
    if (d_z <= 0 || d <= 0 || d_attn <= 0) throw std::invalid_argument("guider weights: bad dims");
    GuiderWeights w;
    w.d_attn = d_attn;
    auto mk = [&](const char* name, int in) {
        return ps.param(prefix + "." + name, kaiming({in, d_attn}, in, rng));
    };
    w.W_q = mk("W_q", d_z);
    w.W_kt = mk("W_kt", d);
    w.W_vt = mk("W_vt", d);
    w.W_kf = mk("W_kf", d);
    w.W_vf = mk("W_vf", d);
    w.W_kc = mk("W_kc", d);
    w.W_vc = mk("W_vc", d);
    return w;
}

namespace {

void validate(const ContentVars& emb, const GuiderWeights& w, int d_z_actual) {
    if (emb.alpha_f < 0.0 || emb.alpha_c < 0.0)
        throw std::invalid_argument("guided_cross_attention: negative alpha rejected");
    if (w.W_q->v.dim(0) != d_z_actual)
        throw std::invalid_argument("guided_cross_attention: query dim mismatch");
    int d = w.W_kt->v.dim(0);
    if (emb.c_t->v.ndim() != 2 || emb.c_t->v.dim(1) != d)
        throw std::invalid_argument("guided_cross_attention: c_t dim mismatch");
    if (emb.c_f->v.ndim() != 2 || emb.c_f->v.dim(1) != d)
        throw std::invalid_argument("guided_cross_attention: c_f dim mismatch");
    if (emb.c_c && ((*emb.c_c)->v.ndim() != 2 || (*emb.c_c)->v.dim(1) != d))
        throw std::invalid_argument("guided_cross_attention: c_c dim mismatch");
}

ag::Var concat_rows(const ag::Var& a, const ag::Var& b) {
    int da = a->v.dim(1);
    ag::Var a4 = ag::reshape(a, {1, a->v.dim(0), da, 1});
    ag::Var b4 = ag::reshape(b, {1, b->v.dim(0), da, 1});
    ag::Var c = ag::concat_ch(a4, b4);
    return ag::reshape(c, {a->v.dim(0) + b->v.dim(0), da});
}

}  // namespace

ag::Var guided_cross_attention(const ag::Var& Z, const ContentVars& emb, const GuiderWeights& w,
                               bool concat_keys) {
    if (Z->v.ndim() != 2) throw std::invalid_argument("guided_cross_attention: rank-2 Z expected");
    validate(emb, w, Z->v.dim(1));
    ag::Var Q = ag::mm(Z, w.W_q);
    bool use_f = emb.alpha_f > 0.0;
    bool use_c = emb.alpha_c > 0.0 && emb.c_c.has_value();
    if (concat_keys) {
        ag::Var K = ag::mm(emb.c_t, w.W_kt);
        ag::Var V = ag::mm(emb.c_t, w.W_vt);
        if (use_f) {
            K = concat_rows(K, ag::mm(emb.c_f, w.W_kf));
            V = concat_rows(V, ag::scale(ag::mm(emb.c_f, w.W_vf), emb.alpha_f));
        }
        if (use_c) {
            K = concat_rows(K, ag::mm(*emb.c_c, w.W_kc));
            V = concat_rows(V, ag::scale(ag::mm(*emb.c_c, w.W_vc), emb.alpha_c));
        }
        return ag::attention(Q, K, V);
    }
    ag::Var out = ag::attention(Q, ag::mm(emb.c_t, w.W_kt), ag::mm(emb.c_t, w.W_vt));
    if (use_f)
        out = ag::add(out, ag::scale(ag::attention(Q, ag::mm(emb.c_f, w.W_kf), ag::mm(emb.c_f, w.W_vf)),
                                     emb.alpha_f));
    if (use_c)
        out = ag::add(out, ag::scale(ag::attention(Q, ag::mm(*emb.c_c, w.W_kc), ag::mm(*emb.c_c, w.W_vc)),
                                     emb.alpha_c));
    return out;
}

ag::Var guided_cross_attention_batched(const ag::Var& Z3, const ContentVars& emb,
                                       const GuiderWeights& w, bool concat_keys) {
    if (Z3->v.ndim() != 3) throw std::invalid_argument("batched attention: rank-3 Z expected");
    int B = Z3->v.dim(0), nq = Z3->v.dim(1), dz = Z3->v.dim(2);
    ag::Var flat = ag::reshape(Z3, {B * nq, dz});
    ag::Var out = guided_cross_attention(flat, emb, w, concat_keys);
    return ag::reshape(out, {B, nq, w.d_attn});
}

// ---- encoders ------------------------------------------------------------

std::vector<int> ContentGuider::tokenize(const std::string& prompt, int n_t, int vocab) {
    std::vector<int> ids;
    std::string word;
    auto flush = [&] {
        if (word.empty()) return;
        uint64_t h = 1469598103934665603ULL;  // FNV-1a
        for (char ch : word) {
            h ^= static_cast<unsigned char>(ch);
            h *= 1099511628211ULL;
        }
        ids.push_back(2 + static_cast<int>(h % static_cast<uint64_t>(vocab - 2)));
        word.clear();
    };
    for (char ch : prompt) {
        if (std::isalnum(static_cast<unsigned char>(ch)))
            word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        else
            flush();
    }
    flush();
    ids.resize(static_cast<size_t>(n_t), 1);  // pad id
    return ids;
}

Tensor identity_feature(const Tensor& image) {
    if (image.ndim() != 3 || image.dim(0) != 3)
        throw std::invalid_argument("identity_feature: [3,H,W] image expected");
    int H = image.dim(1), W = image.dim(2);
    Tensor f({16});
    auto px = [&](int c, int h, int w) { return image.v[(static_cast<size_t>(c) * H + h) * W + w]; };
    // quadrant mean colors
    int qi = 0;
    for (int qh = 0; qh < 2; ++qh)
        for (int qw = 0; qw < 2; ++qw, ++qi) {
            int h0 = qh * H / 2, h1 = (qh + 1) * H / 2;
            int w0 = qw * W / 2, w1 = (qw + 1) * W / 2;
            for (int c = 0; c < 3; ++c) {
                double s = 0.0;
                int n = 0;
                for (int h = h0; h < h1; ++h)
                    for (int w = w0; w < w1; ++w, ++n) s += px(c, h, w);
                f.v[static_cast<size_t>(qi) * 3 + c] = n ? s / n : 0.0;
            }
        }
    // global channel std + mean luminance
    double lum = 0.0;
    for (int c = 0; c < 3; ++c) {
        double s = 0.0, s2 = 0.0;
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                double v = px(c, h, w);
                s += v;
                s2 += v * v;
            }
        double n = static_cast<double>(H) * W;
        double mean = s / n;
        f.v[12 + static_cast<size_t>(c)] = std::sqrt(std::max(0.0, s2 / n - mean * mean));
        lum += mean / 3.0;
    }
    f.v[15] = lum;
    double norm = 0.0;
    for (double v : f.v) norm += v * v;
    norm = std::sqrt(norm) + 1e-8;
    for (double& v : f.v) v /= norm;
    return f;
}

ContentGuider::ContentGuider(ParamStore& ps, const GuiderConfig& cfg, Rng& rng) : cfg_(cfg) {
    Tensor table({cfg.vocab, cfg.d});
    rng.fill_normal(table, 0.2);
    text_table_ = ps.param("guider/text.table", std::move(table));
    Tensor null_row({1, cfg.d});
    rng.fill_normal(null_row, 0.2);
    text_null_ = ps.param("guider/text.null", std::move(null_row));

    int chs[4] = {3, 8, 16, cfg.vis_channels};
    for (int i = 0; i < 3; ++i) {
        face_conv_[i] = Conv2d(ps, "guider/face.conv" + std::to_string(i), chs[i], chs[i + 1], 3, 2, 1, rng);
        cloth_conv_[i] = Conv2d(ps, "guider/cloth.conv" + std::to_string(i), chs[i], chs[i + 1], 3, 2, 1, rng);
    }
    face_proj_ = Linear(ps, "guider/face.proj", cfg.vis_channels, cfg.d, rng);
    cloth_proj_ = Linear(ps, "guider/cloth.proj", cfg.vis_channels, cfg.d, rng);
    id_proj_ = Linear(ps, "guider/face.id_proj", 16, cfg.d, rng);
}

ag::Var ContentGuider::encode_text(const std::string& prompt) const {
    if (prompt.empty())
        throw std::invalid_argument("encode_text: empty prompt (use the null prompt sentinel)");
    if (prompt == kNullPrompt) {
        // learned null embedding, row-tiled to n_t
        ag::Var tiled = ag::expand_batch(text_null_, cfg_.n_t);
        return ag::reshape(tiled, {cfg_.n_t, cfg_.d});
    }
    return ag::rows(text_table_, tokenize(prompt, cfg_.n_t, cfg_.vocab));
}

ag::Var ContentGuider::encode_image(const Tensor& image, const Conv2d* convs, const Linear& proj) const {
    if (image.ndim() != 3 || image.dim(0) != 3)
        throw std::invalid_argument("image encoder: [3,H,W] with 3 channels expected");
    if (image.dim(1) != cfg_.image_res || image.dim(2) != cfg_.image_res)
        throw std::invalid_argument("image encoder: resolution mismatch");
    ag::Var h = ag::reshape(ag::constant(image), {1, 3, cfg_.image_res, cfg_.image_res});
    for (int i = 0; i < 3; ++i) h = ag::silu(convs[i].forward(h));
    int r = cfg_.image_res / 8;  // 2 for the default 16x16
    // [1, C, r, r] -> [r*r, C] tokens
    h = ag::reshape(ag::permute(h, {0, 2, 3, 1}), {r * r, cfg_.vis_channels});
    return proj.forward(h);
}

ag::Var ContentGuider::encode_face(const Tensor& image) const {
    ag::Var vis = encode_image(image, face_conv_, face_proj_);
    ag::Var idt = id_proj_.forward(ag::reshape(ag::constant(identity_feature(image)), {1, 16}));
    // [4, d] visual tokens + 1 identity token
    ag::Var v4 = ag::reshape(vis, {1, vis->v.dim(0), cfg_.d, 1});
    ag::Var i4 = ag::reshape(idt, {1, 1, cfg_.d, 1});
    return ag::reshape(ag::concat_ch(v4, i4), {vis->v.dim(0) + 1, cfg_.d});
}

ag::Var ContentGuider::encode_cloth(const Tensor& image) const {
    return encode_image(image, cloth_conv_, cloth_proj_);
}

}  // namespace dm
