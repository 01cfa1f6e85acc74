#include "eval.hpp"

#include <algorithm>

#include "rng.hpp"

namespace dm {

namespace {

constexpr double kFgThreshold = 0.30;  // L1 color deviation marking foreground

double median_of(std::vector<double>& v) {
    size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
    return v[mid];
}

// union of per-frame-median and per-pixel temporal-median deviation, so both
// flat and patterned static backgrounds drop out; the frame-median test is
// only trusted when one color actually dominates the frame (patterned
// backgrounds would otherwise flag half the tiles)
std::vector<char> foreground_mask(const Tensor& frames, int f) {
    int F = frames.dim(0), H = frames.dim(2), W = frames.dim(3);
    std::vector<char> mask(static_cast<size_t>(H) * W, 0);
    double med[3];
    for (int c = 0; c < 3; ++c) {
        std::vector<double> vals(static_cast<size_t>(H) * W);
        for (int i = 0; i < H * W; ++i)
            vals[static_cast<size_t>(i)] = frames.v[((static_cast<size_t>(f) * 3 + c) * H * W) + i];
        med[c] = median_of(vals);
    }
    std::vector<double> d_frame(static_cast<size_t>(H) * W, 0.0);
    int near_median = 0;
    for (int i = 0; i < H * W; ++i) {
        for (int c = 0; c < 3; ++c)
            d_frame[static_cast<size_t>(i)] +=
                std::abs(frames.v[((static_cast<size_t>(f) * 3 + c) * H * W) + i] - med[c]);
        near_median += d_frame[static_cast<size_t>(i)] <= kFgThreshold;
    }
    bool unimodal = near_median >= H * W * 6 / 10;

    std::vector<double> tvals(static_cast<size_t>(F));
    for (int i = 0; i < H * W; ++i) {
        double d_time = 0.0;
        for (int c = 0; c < 3; ++c) {
            double v = frames.v[((static_cast<size_t>(f) * 3 + c) * H * W) + i];
            for (int g = 0; g < F; ++g)
                tvals[static_cast<size_t>(g)] = frames.v[((static_cast<size_t>(g) * 3 + c) * H * W) + i];
            d_time += std::abs(v - median_of(tvals));
        }
        if ((unimodal && d_frame[static_cast<size_t>(i)] > kFgThreshold) || d_time > kFgThreshold)
            mask[static_cast<size_t>(i)] = 1;
    }
    return mask;
}

}  // namespace

nlohmann::json EvalMetrics::to_json() const {
    return {{"control_adherence", control_adherence},
            {"identity_similarity", identity_similarity},
            {"temporal_consistency", temporal_consistency}};
}

double control_adherence(const Tensor& frames, const Tensor& keypoints) {
    if (frames.ndim() != 4 || frames.dim(1) != 3)
        throw std::invalid_argument("control_adherence: frames must be [F,3,H,W]");
    if (keypoints.ndim() != 3 || keypoints.dim(0) != frames.dim(0))
        throw std::invalid_argument("control_adherence: keypoints must be [F,K,2] matching frames");
    int F = frames.dim(0), K = keypoints.dim(1), H = frames.dim(2), W = frames.dim(3);
    double diag = std::sqrt(static_cast<double>(H) * H + static_cast<double>(W) * W);
    double total = 0.0;
    for (int f = 0; f < F; ++f) {
        std::vector<char> fg = foreground_mask(frames, f);
        std::vector<std::pair<int, int>> pts;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                if (fg[static_cast<size_t>(y) * W + x]) pts.emplace_back(x, y);
        for (int k = 0; k < K; ++k) {
            double kx = keypoints.at3(f, k, 0), ky = keypoints.at3(f, k, 1);
            double best = diag;
            for (const auto& [x, y] : pts)
                best = std::min(best, std::hypot(x - kx, y - ky));
            total += best;
        }
    }
    return total / (static_cast<double>(F) * K);
}

Tensor extract_face_region(const Tensor& frames, const Tensor& keypoints, int res) {
    if (frames.ndim() != 4 || keypoints.ndim() != 3 || keypoints.dim(0) != frames.dim(0))
        throw std::invalid_argument("extract_face_region: shape mismatch");
    int F = frames.dim(0), H = frames.dim(2), W = frames.dim(3);
    int side = std::max(8, std::min(H, W) / 4);
    Tensor out({3, res, res});
    for (int f = 0; f < F; ++f) {
        int cx = static_cast<int>(std::lround(keypoints.at3(f, 0, 0)));
        int cy = static_cast<int>(std::lround(keypoints.at3(f, 0, 1)));
        int x0 = std::clamp(cx - side / 2, 0, W - side);
        int y0 = std::clamp(cy - side / 2, 0, H - side);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < res; ++y)
                for (int x = 0; x < res; ++x) {
                    int sy = y0 + y * side / res, sx = x0 + x * side / res;
                    out.v[(static_cast<size_t>(c) * res + y) * res + x] +=
                        frames.v[((static_cast<size_t>(f) * 3 + c) * H + sy) * W + sx] / F;
                }
    }
    return out;
}

namespace {

std::vector<double> unit(std::vector<double> v) {
    double nrm = 0.0;
    for (double x : v) nrm += x * x;
    nrm = std::sqrt(nrm) + 1e-8;
    for (double& x : v) x /= nrm;
    return v;
}

// horizontal band color means over the central face region, relative to that
// region's mean color; face crops are head-centered, so a fixed central mask
// reads the identity colors without the surrounding background
std::vector<double> band_deviation(const Tensor& img) {
    int H = img.dim(1), W = img.dim(2);
    double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
    double r2 = 0.40 * std::min(H, W);
    r2 *= r2;
    std::vector<double> sum(12, 0.0);
    std::vector<double> cnt(4, 0.0);
    double global[3] = {0, 0, 0};
    double total = 0.0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            if ((y - cy) * (y - cy) + (x - cx) * (x - cx) > r2) continue;
            int b = std::min(3, y * 4 / H);
            cnt[static_cast<size_t>(b)] += 1.0;
            total += 1.0;
            for (int c = 0; c < 3; ++c) {
                double v = img.v[(static_cast<size_t>(c) * H + y) * W + x];
                sum[static_cast<size_t>(b) * 3 + c] += v;
                global[c] += v;
            }
        }
    std::vector<double> out(12, 0.0);
    for (int c = 0; c < 3; ++c) global[c] /= std::max(total, 1.0);
    for (int b = 0; b < 4; ++b)
        for (int c = 0; c < 3; ++c)
            if (cnt[static_cast<size_t>(b)] > 0.0)
                out[static_cast<size_t>(b) * 3 + c] =
                    sum[static_cast<size_t>(b) * 3 + c] / cnt[static_cast<size_t>(b)] - global[c];
    return out;
}

std::vector<double> mean_token(const ContentGuider& g, const Tensor& img) {
    ag::NoGradGuard ng;
    Tensor tokens = g.encode_face(img)->v;  // [n_f, d]
    int n = tokens.dim(0), d = tokens.dim(1);
    std::vector<double> tok(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) tok[static_cast<size_t>(j)] += tokens.at2(i, j) / n;
    return tok;
}

}  // namespace

Tensor pooled_face_feature(const ContentGuider& g, const Tensor& image) {
    std::vector<double> id = unit(band_deviation(image));

    // learned tokens relative to the encoder's flat-gray response, removing
    // the weight-dependent DC direction every image shares
    int r = g.config().image_res;
    std::vector<double> tok = mean_token(g, image);
    std::vector<double> gray_tok = mean_token(g, Tensor({3, r, r}, 0.5));
    for (size_t i = 0; i < tok.size(); ++i) tok[i] -= gray_tok[i];
    tok = unit(std::move(tok));

    // color statistics carry the main signal; the learned tokens refine it
    Tensor out({static_cast<int>(id.size() + tok.size())});
    for (size_t i = 0; i < id.size(); ++i) out.v[i] = id[i];
    for (size_t i = 0; i < tok.size(); ++i) out.v[id.size() + i] = 0.5 * tok[i];
    double nrm = 0.0;
    for (double x : out.v) nrm += x * x;
    nrm = std::sqrt(nrm) + 1e-12;
    for (double& x : out.v) x /= nrm;
    return out;
}

double identity_similarity(const ContentGuider& g, const Tensor& a, const Tensor& b) {
    Tensor fa = pooled_face_feature(g, a);
    Tensor fb = pooled_face_feature(g, b);
    double dot = 0.0;
    for (size_t i = 0; i < fa.v.size(); ++i) dot += fa.v[i] * fb.v[i];
    return dot;
}

double temporal_consistency(const Tensor& frames) {
    if (frames.ndim() != 4) throw std::invalid_argument("temporal_consistency: [F,C,H,W] expected");
    int F = frames.dim(0);
    if (F < 2) return 0.0;
    long per = frames.numel() / F;
    double total = 0.0;
    for (int f = 1; f < F; ++f)
        for (long i = 0; i < per; ++i)
            total += std::abs(frames.v[static_cast<size_t>(f * per + i)] -
                              frames.v[static_cast<size_t>((f - 1) * per + i)]);
    return total / (static_cast<double>(F - 1) * per);
}

double identity_random_baseline(const ContentGuider& g, uint64_t seed, int n_pairs) {
    Rng rng(seed);
    int r = g.config().image_res;
    double total = 0.0;
    for (int i = 0; i < n_pairs; ++i) {
        Tensor a({3, r, r}), b({3, r, r});
        rng.fill_uniform(a, 0.0, 1.0);
        rng.fill_uniform(b, 0.0, 1.0);
        total += identity_similarity(g, a, b);
    }
    return total / n_pairs;
}

EvalMetrics evaluate_clip(const ContentGuider& g, const Tensor& frames, const Tensor& keypoints,
                          const Tensor& reference_face) {
    EvalMetrics m;
    m.control_adherence = control_adherence(frames, keypoints);
    m.identity_similarity = identity_similarity(g, extract_face_region(frames, keypoints), reference_face);
    m.temporal_consistency = temporal_consistency(frames);
    return m;
}

}  // namespace dm
