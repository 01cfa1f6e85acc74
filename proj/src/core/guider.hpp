#pragma once

#include <optional>
#include <string>

#include "nn.hpp"

namespace dm {

// Conditioning bundle: text tokens c_t, face tokens c_f, optional cloth
// tokens c_c, and the mixing weights alpha_f / alpha_c. Graph-connected so
// encoder parameters receive gradients during training.
struct ContentVars {
    ag::Var c_t;
    ag::Var c_f;
    std::optional<ag::Var> c_c;
    double alpha_f = 0.0;
    double alpha_c = 0.0;
};

// Weights of one decomposed cross-attention layer: shared query projection,
// separate key/value projections per modality.
struct GuiderWeights {
    ag::Var W_q;                              // [d_z, d_attn]
    ag::Var W_kt, W_vt, W_kf, W_vf, W_kc, W_vc;  // [d, d_attn]
    int d_attn = 0;
};

GuiderWeights make_guider_weights(ParamStore& ps, const std::string& prefix, int d_z, int d,
                                  int d_attn, Rng& rng);

// Z' = softmax(Q Kt^T / sqrt(d_attn)) Vt + a_f * softmax(Q Kf^T / sqrt(d_attn)) Vf
//      + a_c * softmax(Q Kc^T / sqrt(d_attn)) Vc
// The face/cloth terms are skipped entirely when their alpha is 0 (or cloth
// is absent), which keeps the alpha=0 path bit-identical to text-only.
// `concat_keys` switches to the experimental single-softmax variant over
// concatenated keys with alpha-scaled values.
ag::Var guided_cross_attention(const ag::Var& Z, const ContentVars& emb, const GuiderWeights& w,
                               bool concat_keys = false);

// Batched variant for [B, n_q, d_z] queries sharing one conditioning bundle.
ag::Var guided_cross_attention_batched(const ag::Var& Z3, const ContentVars& emb,
                                       const GuiderWeights& w, bool concat_keys = false);

struct GuiderConfig {
    int d = 16;        // content embedding dim (the d shared by all token features)
    int n_t = 8;       // text tokens after pad/truncation
    int vocab = 4096;  // hash-bucketed token vocabulary
    int image_res = 16;  // face/cloth reference resolution
    int vis_channels = 32;  // conv encoder output channels (4 tokens of this width)
};

// Prompt sentinel for the unconditional path; the empty prompt is an error.
inline constexpr const char* kNullPrompt = "<null>";

// 16-dim deterministic face-identity summary: quadrant color means plus
// global channel statistics, unit-normalized (epsilon-guarded).
Tensor identity_feature(const Tensor& image);

class ContentGuider {
public:
    ContentGuider(ParamStore& ps, const GuiderConfig& cfg, Rng& rng);

    ag::Var encode_text(const std::string& prompt) const;   // [n_t, d]
    ag::Var encode_face(const Tensor& image) const;         // [n_f = 5, d]
    ag::Var encode_cloth(const Tensor& image) const;        // [n_c = 4, d]

    int n_face_tokens() const { return 5; }
    int n_cloth_tokens() const { return 4; }
    const GuiderConfig& config() const { return cfg_; }

    static std::vector<int> tokenize(const std::string& prompt, int n_t, int vocab);

private:
    ag::Var encode_image(const Tensor& image, const Conv2d* convs, const Linear& proj) const;

    GuiderConfig cfg_;
    ag::Var text_table_;  // [vocab, d]
    ag::Var text_null_;   // [1, d]
    Conv2d face_conv_[3];
    Conv2d cloth_conv_[3];
    Linear face_proj_, cloth_proj_, id_proj_;
};

}  // namespace dm
