#pragma once

#include "controlnet.hpp"

namespace dm {

// Articulated stick-figure "dancer". The face palette is a bijective function
// of identity_id so the identity signal survives in color statistics.
struct SpriteSpec {
    int identity_id = 0;
    double face_palette[3][3] = {};  // three RGB colors
    std::string garment_texture;     // stripes | dots | solid
    double garment_color[3] = {};
    double limb_scale = 1.0;  // body proportions multiplier
    double z_layer = 1.0;     // depth layer in (0,1], larger = closer
};

SpriteSpec make_sprite_spec(int identity_id, uint64_t dataset_seed);

// Joint order: head, neck, torso_mid, hip, hand_l, hand_r, foot_l, foot_r.
inline constexpr int kNumJoints = 8;
extern const char* const kJointNames[kNumJoints];
inline constexpr int kNumBones = 7;
extern const int kSkeleton[kNumBones][2];  // (parent, child) joint indices

struct ClipSample {
    Tensor frames;          // [F,3,H,W] in [0,1]
    ControlSequence pose;   // maps [F,1,H,W], keypoints [F,K,2] (x,y)
    ControlSequence depth;  // maps [F,1,H,W] in [0,1]
    Tensor face_crop;       // [3,16,16]
    Tensor cloth_crop;      // [3,16,16]
    std::string caption;
    uint64_t seed = 0;
};

ClipSample generate_clip(const SpriteSpec& spec, uint64_t seed, int F, int H, int W);

// Rasterizes the skeleton; out-of-bounds keypoints are clamped with a warning
// on stderr. Values are exactly {0,1}.
Tensor render_pose_map(const Tensor& keypoints, int H, int W);

// Sprite silhouette for one frame's keypoints, values {0,1}.
Tensor render_alpha(const SpriteSpec& spec, const Tensor& kp_frame, int H, int W);

// Depth = z_layer inside the silhouette, 0 background.
Tensor render_depth_map(const SpriteSpec& spec, const Tensor& keypoints, int H, int W);

struct ManifestEntry {
    std::string clip_path, control_path, face_path, cloth_path, caption;
    int identity_id = 0;
};

struct DatasetManifest {
    int version = 1;
    uint64_t seed = 0;
    std::vector<ManifestEntry> entries;
    std::string root;  // directory of the manifest file, set on load
};

// Writes clips, control sequences and reference crops under out_dir and
// returns the manifest path. Depth sequences live next to each pose sequence
// (see depth_path_for).
std::string build_dataset(int n_identities, int clips_per_identity, int F, int H, int W,
                          uint64_t seed, const std::string& out_dir);

DatasetManifest load_manifest(const std::string& path);
std::string depth_path_for(const std::string& control_path);

struct DatasetPreset {
    int n_identities, clips_per_identity, F, H, W;
};
DatasetPreset dataset_preset(const std::string& name);  // "ci" | "large"

}  // namespace dm
