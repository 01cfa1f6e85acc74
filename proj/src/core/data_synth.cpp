#include "data_synth.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

#include "archive.hpp"
#include "png_io.hpp"

namespace fs = std::filesystem;

namespace dm {

const char* const kJointNames[kNumJoints] = {"head",   "neck",   "torso_mid", "hip",
                                             "hand_l", "hand_r", "foot_l",    "foot_r"};

// head-neck, neck-torso_mid, torso_mid-hip, neck-hands, hip-feet
const int kSkeleton[kNumBones][2] = {{0, 1}, {1, 2}, {2, 3}, {1, 4}, {1, 5}, {3, 6}, {3, 7}};

namespace {

constexpr double kTau = 6.283185307179586476925286766559;

void hsv_to_rgb(double h, double s, double v, double out[3]) {
    h = h - std::floor(h);
    double c = v * s;
    double hp = h * 6.0;
    double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(hp)) {
        case 0: r = c; g = x; break;
        case 1: r = x; g = c; break;
        case 2: g = c; b = x; break;
        case 3: g = x; b = c; break;
        case 4: r = x; b = c; break;
        default: r = c; b = x; break;
    }
    double m = v - c;
    out[0] = r + m;
    out[1] = g + m;
    out[2] = b + m;
}

void darker(const double in[3], double f, double out[3]) {
    for (int i = 0; i < 3; ++i) out[i] = in[i] * f;
}

struct Canvas {
    Tensor* img;    // [3,H,W], may be null
    Tensor* alpha;  // [H,W] style flat mask stored as [1,H,W], may be null
    int H, W;

    void set(int x, int y, const double rgb[3]) {
        if (x < 0 || x >= W || y < 0 || y >= H) return;
        if (img)
            for (int c = 0; c < 3; ++c)
                img->v[(static_cast<size_t>(c) * H + y) * W + x] = rgb[c];
        if (alpha) alpha->v[static_cast<size_t>(y) * W + x] = 1.0;
    }
};

void draw_line(Canvas& cv, int x0, int y0, int x1, int y1, const double rgb[3]) {
    int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    for (;;) {
        cv.set(x0, y0, rgb);
        if (x0 == x1 && y0 == y1) break;
        int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

int rx(const Tensor& kp, int f, int k) { return static_cast<int>(std::lround(kp.at3(f, k, 0))); }
int ry(const Tensor& kp, int f, int k) { return static_cast<int>(std::lround(kp.at3(f, k, 1))); }

struct Proportions {
    double head_r, head_off, torso, arm, leg;
};

Proportions proportions_for(const SpriteSpec& spec, int H, int W) {
    double s = static_cast<double>(std::min(H, W)) * spec.limb_scale;
    Proportions p;
    p.head_r = std::max(1.0, s / 9.0);
    p.head_off = p.head_r + 2.0;
    p.torso = s * 0.30;
    p.arm = s * 0.22;
    p.leg = s * 0.25;
    return p;
}

void garment_pixel_color(const SpriteSpec& spec, int x, int y, double out[3]) {
    double dark[3];
    darker(spec.garment_color, 0.45, dark);
    if (spec.garment_texture == "stripes") {
        std::copy_n((y / 2) % 2 == 0 ? spec.garment_color : dark, 3, out);
    } else if (spec.garment_texture == "dots") {
        std::copy_n((x % 4 == 0 && y % 4 == 0) ? dark : spec.garment_color, 3, out);
    } else {
        std::copy_n(spec.garment_color, 3, out);
    }
}

// Shared by the frame renderer and the alpha/depth renderer so silhouettes
// agree exactly.
void draw_sprite(const SpriteSpec& spec, const Tensor& kp, int f, Canvas& cv) {
    Proportions p = proportions_for(spec, cv.H, cv.W);
    double limb[3];
    darker(spec.garment_color, 0.7, limb);
    // legs and arms
    for (int bone : {3, 4, 5, 6}) {
        draw_line(cv, rx(kp, f, kSkeleton[bone][0]), ry(kp, f, kSkeleton[bone][0]),
                  rx(kp, f, kSkeleton[bone][1]), ry(kp, f, kSkeleton[bone][1]), limb);
    }
    // torso: thick textured line neck -> hip through torso_mid
    int nx = rx(kp, f, 1), ny = ry(kp, f, 1);
    int hx = rx(kp, f, 3), hy = ry(kp, f, 3);
    for (int off = -1; off <= 1; ++off) {
        int x0 = nx + off, x1 = hx + off;
        int dx = std::abs(x1 - x0), dy = -std::abs(hy - ny);
        int sx = x0 < x1 ? 1 : -1, sy = ny < hy ? 1 : -1;
        int err = dx + dy, x = x0, y = ny;
        for (;;) {
            double col[3];
            garment_pixel_color(spec, x, y, col);
            cv.set(x, y, col);
            if (x == x1 && y == hy) break;
            int e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y += sy;
            }
        }
    }
    // head: banded disc carrying the identity palette
    int cx = rx(kp, f, 0), cy = ry(kp, f, 0);
    int r = static_cast<int>(std::ceil(p.head_r));
    for (int y = cy - r; y <= cy + r; ++y)
        for (int x = cx - r; x <= cx + r; ++x) {
            double d2 = static_cast<double>(x - cx) * (x - cx) + static_cast<double>(y - cy) * (y - cy);
            if (d2 > p.head_r * p.head_r + 0.5) continue;
            int band = (y - (cy - r)) * 3 / std::max(1, 2 * r + 1);
            cv.set(x, y, spec.face_palette[std::min(band, 2)]);
        }
}

double clampd(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

}  // namespace

SpriteSpec make_sprite_spec(int identity_id, uint64_t dataset_seed) {
    Rng rng(Rng::derive(dataset_seed, 0x1D000000ULL + static_cast<uint64_t>(identity_id)));
    SpriteSpec s;
    s.identity_id = identity_id;
    // golden-ratio hue stepping plus independent band offsets keeps the
    // palettes well separated per identity
    double hue = identity_id * 0.61803398875 + 0.01 * rng.uniform();
    double v0 = identity_id % 2 == 0 ? 0.95 : 0.68;
    double v2 = (identity_id >> 1) % 2 == 0 ? 0.50 : 0.78;
    double colors[3][3];
    hsv_to_rgb(hue, 0.55, v0, colors[0]);
    hsv_to_rgb(hue + rng.uniform(0.2, 0.5), 0.80, 0.70, colors[1]);
    hsv_to_rgb(hue + rng.uniform(0.55, 0.85), 0.80, v2, colors[2]);
    // band order cycles through all six permutations so identities whose hues
    // land close on the wheel still differ in layout
    static const int kPerm[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2},
                                    {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    const int* perm = kPerm[identity_id % 6];
    for (int b = 0; b < 3; ++b)
        for (int c = 0; c < 3; ++c) s.face_palette[b][c] = colors[perm[b]][c];
    const char* textures[3] = {"stripes", "dots", "solid"};
    s.garment_texture = textures[identity_id % 3];
    hsv_to_rgb(hue + 0.5, 0.9, 0.8, s.garment_color);
    s.limb_scale = 0.8 + 0.2 * rng.uniform();
    s.z_layer = 0.4 + 0.6 * rng.uniform();
    return s;
}

Tensor render_pose_map(const Tensor& keypoints, int H, int W) {
    if (keypoints.ndim() != 3 || keypoints.dim(2) != 2)
        throw std::invalid_argument("render_pose_map: keypoints must be [F,K,2]");
    int F = keypoints.dim(0), K = keypoints.dim(1);
    Tensor out({F, 1, H, W});
    bool warned = false;
    Tensor kp = keypoints;
    for (int f = 0; f < F; ++f)
        for (int k = 0; k < K; ++k) {
            double& x = kp.at3(f, k, 0);
            double& y = kp.at3(f, k, 1);
            double cx2 = clampd(x, 0.0, W - 1.0), cy2 = clampd(y, 0.0, H - 1.0);
            if ((cx2 != x || cy2 != y) && !warned) {
                std::cerr << "warning: out-of-bounds keypoints clamped to the frame\n";
                warned = true;
            }
            x = cx2;
            y = cy2;
        }
    const double one[3] = {1.0, 1.0, 1.0};
    for (int f = 0; f < F; ++f) {
        Tensor frame({1, H, W});
        Canvas cv{nullptr, &frame, H, W};
        int bones = K == kNumJoints ? kNumBones : 0;
        for (int b = 0; b < bones; ++b)
            draw_line(cv, rx(kp, f, kSkeleton[b][0]), ry(kp, f, kSkeleton[b][0]),
                      rx(kp, f, kSkeleton[b][1]), ry(kp, f, kSkeleton[b][1]), one);
        if (bones == 0)  // non-standard joint count: mark the joints themselves
            for (int k = 0; k < K; ++k) cv.set(rx(kp, f, k), ry(kp, f, k), one);
        std::copy(frame.v.begin(), frame.v.end(),
                  out.v.begin() + static_cast<long>(f) * H * W);
    }
    return out;
}

Tensor render_alpha(const SpriteSpec& spec, const Tensor& kp_frame, int H, int W) {
    if (kp_frame.ndim() != 2 || kp_frame.dim(0) != kNumJoints || kp_frame.dim(1) != 2)
        throw std::invalid_argument("render_alpha: keypoints must be [K,2]");
    Tensor kp({1, kNumJoints, 2});
    kp.v = kp_frame.v;
    Tensor mask({1, H, W});
    Canvas cv{nullptr, &mask, H, W};
    draw_sprite(spec, kp, 0, cv);
    return mask;
}

Tensor render_depth_map(const SpriteSpec& spec, const Tensor& keypoints, int H, int W) {
    if (keypoints.ndim() != 3 || keypoints.dim(1) != kNumJoints)
        throw std::invalid_argument("render_depth_map: keypoints must be [F,K,2]");
    int F = keypoints.dim(0);
    Tensor out({F, 1, H, W});
    for (int f = 0; f < F; ++f) {
        Tensor kpf({kNumJoints, 2});
        std::copy_n(keypoints.v.begin() + static_cast<long>(f) * kNumJoints * 2, kNumJoints * 2,
                    kpf.v.begin());
        Tensor a = render_alpha(spec, kpf, H, W);
        for (int i = 0; i < H * W; ++i)
            out.v[static_cast<size_t>(f) * H * W + i] = spec.z_layer * a.v[static_cast<size_t>(i)];
    }
    return out;
}

ClipSample generate_clip(const SpriteSpec& spec, uint64_t seed, int F, int H, int W) {
    if (F < 1 || F > kMaxFrames)
        throw std::invalid_argument("generate_clip: frame count outside [1,64]");
    if (H < 16 || W < 16)
        throw std::invalid_argument("generate_clip: resolution too small to render the sprite");

    Rng rng(seed);
    Proportions p = proportions_for(spec, H, W);

    // smooth random trajectory: sinusoidal center motion + articulated swings
    double fx = rng.uniform(0.5, 1.5), fy = rng.uniform(0.5, 1.5);
    double px = rng.uniform(0.0, 1.0), py = rng.uniform(0.0, 1.0);
    double fa = rng.uniform(0.8, 2.0), pa = rng.uniform(0.0, 1.0);
    double fl = rng.uniform(0.8, 2.0), pl = rng.uniform(0.0, 1.0);
    double half_w = std::max(p.arm, p.head_r) + 2.0;
    double half_h = p.torso / 2.0 + std::max(p.head_off + p.head_r, p.leg) + 1.0;
    double Ax = std::max(1.0, W / 2.0 - half_w - 1.0);
    double Ay = std::max(1.0, H / 2.0 - half_h - 1.0);

    Tensor kps({F, kNumJoints, 2});
    for (int f = 0; f < F; ++f) {
        double u = F > 1 ? static_cast<double>(f) / (F - 1) : 0.0;
        double cx = W / 2.0 + Ax * std::sin(kTau * (fx * u + px));
        double cy = H / 2.0 + Ay * std::sin(kTau * (fy * u + py));
        double swing = 0.8 * std::sin(kTau * (fa * u + pa));
        double kick = 0.45 * std::sin(kTau * (fl * u + pl));
        double neck_y = cy - p.torso / 2.0, hip_y = cy + p.torso / 2.0;
        double kx[kNumJoints], ky[kNumJoints];
        kx[0] = cx;
        ky[0] = neck_y - p.head_off;
        kx[1] = cx;
        ky[1] = neck_y;
        kx[2] = cx;
        ky[2] = cy;
        kx[3] = cx;
        ky[3] = hip_y;
        kx[4] = cx - p.arm * std::cos(swing * 0.8);
        ky[4] = neck_y + p.arm * std::sin(swing * 0.8) + p.arm * 0.3;
        kx[5] = cx + p.arm * std::cos(swing);
        ky[5] = neck_y - p.arm * std::sin(swing) + p.arm * 0.3;
        kx[6] = cx - p.leg * std::sin(0.5 + kick);
        ky[6] = hip_y + p.leg * std::cos(0.5 + kick);
        kx[7] = cx + p.leg * std::sin(0.5 - kick);
        ky[7] = hip_y + p.leg * std::cos(0.5 - kick);
        for (int k = 0; k < kNumJoints; ++k) {
            kps.at3(f, k, 0) = clampd(kx[k], 1.0, W - 2.0);
            kps.at3(f, k, 1) = clampd(ky[k], 1.0, H - 2.0);
        }
    }

    // background
    bool checker = rng.uniform() < 0.5;
    double bg1[3], bg2[3];
    double bh = rng.uniform();
    hsv_to_rgb(bh, 0.2, rng.uniform(0.15, 0.45), bg1);
    hsv_to_rgb(bh + 0.05, 0.25, rng.uniform(0.5, 0.8), bg2);

    ClipSample out;
    out.seed = seed;
    out.frames = Tensor({F, 3, H, W});
    Tensor depth({F, 1, H, W});
    for (int f = 0; f < F; ++f) {
        Tensor img({3, H, W});
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double* c = (checker && ((x / 4 + y / 4) % 2 == 0)) ? bg2 : bg1;
                for (int ch = 0; ch < 3; ++ch)
                    img.v[(static_cast<size_t>(ch) * H + y) * W + x] = c[ch];
            }
        Tensor alpha({1, H, W});
        Canvas cv{&img, &alpha, H, W};
        draw_sprite(spec, kps, f, cv);
        for (double& v : img.v) v = clampd(v, 0.0, 1.0);
        std::copy(img.v.begin(), img.v.end(),
                  out.frames.v.begin() + static_cast<long>(f) * 3 * H * W);
        for (int i = 0; i < H * W; ++i)
            depth.v[static_cast<size_t>(f) * H * W + i] = spec.z_layer * alpha.v[static_cast<size_t>(i)];
    }

    out.pose.modality = "pose";
    out.pose.maps = render_pose_map(kps, H, W);
    out.pose.keypoints = kps;
    out.depth.modality = "depth";
    out.depth.maps = std::move(depth);

    // reference crops: the banded head disc on neutral gray (so it matches
    // what a head-centered crop of a frame looks like) and a garment swatch
    const int R = 16;
    const double disc_r = 6.5;
    out.face_crop = Tensor({3, R, R});
    out.cloth_crop = Tensor({3, R, R});
    for (int y = 0; y < R; ++y)
        for (int x = 0; x < R; ++x) {
            double d2 = (x - R / 2.0 + 0.5) * (x - R / 2.0 + 0.5) +
                        (y - R / 2.0 + 0.5) * (y - R / 2.0 + 0.5);
            const double* fc = nullptr;
            double gray[3] = {0.5, 0.5, 0.5};
            if (d2 <= disc_r * disc_r) {
                int band = static_cast<int>((y - (R / 2.0 - disc_r)) * 3.0 / (2.0 * disc_r));
                fc = spec.face_palette[std::min(std::max(band, 0), 2)];
            } else {
                fc = gray;
            }
            double cc[3];
            garment_pixel_color(spec, x, y, cc);
            for (int ch = 0; ch < 3; ++ch) {
                out.face_crop.v[(static_cast<size_t>(ch) * R + y) * R + x] = fc[ch];
                out.cloth_crop.v[(static_cast<size_t>(ch) * R + y) * R + x] = cc[ch];
            }
        }

    out.caption = "a " + spec.garment_texture + " dancer on a " +
                  (checker ? std::string("checker") : std::string("flat")) + " background";
    return out;
}

std::string depth_path_for(const std::string& control_path) {
    size_t pos = control_path.rfind("pose");
    if (pos == std::string::npos) return control_path + ".depth";
    std::string s = control_path;
    s.replace(pos, 4, "depth");
    return s;
}

std::string build_dataset(int n_identities, int clips_per_identity, int F, int H, int W,
                          uint64_t seed, const std::string& out_dir) {
    if (n_identities < 1 || clips_per_identity < 1)
        throw std::invalid_argument("build_dataset: counts must be positive");
    fs::create_directories(out_dir);
    nlohmann::json manifest = {{"version", 1}, {"seed", seed}, {"entries", nlohmann::json::array()}};

    char buf[64];
    for (int i = 0; i < n_identities; ++i) {
        SpriteSpec spec = make_sprite_spec(i, seed);
        std::snprintf(buf, sizeof(buf), "face_%02d.png", i);
        std::string face_rel = buf;
        std::snprintf(buf, sizeof(buf), "cloth_%02d.png", i);
        std::string cloth_rel = buf;
        for (int j = 0; j < clips_per_identity; ++j) {
            int idx = i * clips_per_identity + j;
            ClipSample clip = generate_clip(spec, Rng::derive(seed, static_cast<uint64_t>(idx)), F, H, W);
            if (j == 0) {
                write_png((fs::path(out_dir) / face_rel).string(), clip.face_crop);
                write_png((fs::path(out_dir) / cloth_rel).string(), clip.cloth_crop);
            }
            std::snprintf(buf, sizeof(buf), "clip_%04d.dmta", idx);
            std::string clip_rel = buf;
            std::snprintf(buf, sizeof(buf), "pose_%04d.dmta", idx);
            std::string pose_rel = buf;

            Archive a;
            a.meta = {{"caption", clip.caption}, {"identity_id", i}, {"seed", clip.seed}};
            a.put("frames", clip.frames, 0);
            a.save((fs::path(out_dir) / clip_rel).string());

            std::snprintf(buf, sizeof(buf), "clip_%04d", idx);
            clip.pose.source_id = buf;
            clip.depth.source_id = buf;
            clip.pose.save((fs::path(out_dir) / pose_rel).string());
            clip.depth.save(depth_path_for((fs::path(out_dir) / pose_rel).string()));

            manifest["entries"].push_back({{"clip_path", clip_rel},
                                           {"control_path", pose_rel},
                                           {"face_path", face_rel},
                                           {"cloth_path", cloth_rel},
                                           {"caption", clip.caption},
                                           {"identity_id", i}});
        }
    }
    std::string mpath = (fs::path(out_dir) / "manifest.json").string();
    std::ofstream os(mpath);
    if (!os) throw std::runtime_error("build_dataset: cannot write " + mpath);
    os << manifest.dump(2) << "\n";
    return mpath;
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_manifest: cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(is);
    DatasetManifest m;
    m.version = j.at("version").get<int>();
    m.seed = j.at("seed").get<uint64_t>();
    m.root = fs::path(path).parent_path().string();
    for (const auto& e : j.at("entries")) {
        ManifestEntry me;
        me.clip_path = (fs::path(m.root) / e.at("clip_path").get<std::string>()).string();
        me.control_path = (fs::path(m.root) / e.at("control_path").get<std::string>()).string();
        me.face_path = (fs::path(m.root) / e.at("face_path").get<std::string>()).string();
        me.cloth_path = (fs::path(m.root) / e.at("cloth_path").get<std::string>()).string();
        me.caption = e.at("caption").get<std::string>();
        me.identity_id = e.at("identity_id").get<int>();
        m.entries.push_back(std::move(me));
    }
    return m;
}

DatasetPreset dataset_preset(const std::string& name) {
    if (name == "ci") return {8, 8, 16, 32, 32};
    if (name == "large") return {16, 16, 64, 64, 64};
    throw std::invalid_argument("unknown dataset preset: " + name);
}

}  // namespace dm
