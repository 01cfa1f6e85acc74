#pragma once

#include <json.hpp>

#include "guider.hpp"

namespace dm {

struct EvalMetrics {
    double control_adherence = 0.0;    // mean keypoint-to-foreground distance, px
    double identity_similarity = 0.0;  // cosine of pooled face-encoder features
    double temporal_consistency = 0.0;  // mean inter-frame absolute difference

    nlohmann::json to_json() const;
};

// Foreground = pixels deviating from the frame's per-channel median color.
// Returns the mean over frames and joints of the distance from each keypoint
// to the nearest foreground pixel; frames without foreground count the image
// diagonal.
double control_adherence(const Tensor& frames, const Tensor& keypoints);

// Square crop centered on the head joint (index 0), resampled to res x res.
Tensor extract_face_region(const Tensor& frames, const Tensor& keypoints, int res = 16);

// Pooled descriptor of the face-encoder path: centered identity statistics
// plus the centered mean visual token, unit length.
Tensor pooled_face_feature(const ContentGuider& g, const Tensor& image);

double identity_similarity(const ContentGuider& g, const Tensor& a, const Tensor& b);

double temporal_consistency(const Tensor& frames);

// Empirical mean similarity between unrelated random images.
double identity_random_baseline(const ContentGuider& g, uint64_t seed, int n_pairs = 100);

EvalMetrics evaluate_clip(const ContentGuider& g, const Tensor& frames, const Tensor& keypoints,
                          const Tensor& reference_face);

}  // namespace dm
