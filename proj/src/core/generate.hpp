#pragma once

#include "controlnet.hpp"
#include "errors.hpp"
#include "train.hpp"

namespace dm {

struct ControlRef {
    std::string path;
    std::string modality;  // "pose" | "depth"
    double scale = 1.0;
};

struct GenerationRequest {
    std::string prompt;
    std::string face_image;   // empty = no face reference
    std::string cloth_image;  // empty = no cloth reference
    std::vector<ControlRef> controls;
    double alpha_f = 0.0;
    double alpha_c = 0.0;
    int frames = 8;
    int resolution = 32;  // ignored when controls fix the geometry
    uint64_t seed = 0;
    std::string sampler = "ddim";
    int num_steps = 20;
    double guidance_scale = 1.0;
    std::string ckpt;
    std::string out_dir;

    void validate() const;
    nlohmann::json to_json() const;
    static GenerationRequest from_json(const nlohmann::json& j);
};

struct GenerationResult {
    std::vector<std::string> frame_paths;
    std::string metadata_path;
    Tensor frames;  // [F,3,H,W] in [0,1]
};

// Full inference pass: encode prompts, run each control through its
// ControlNet pass per step, combine residuals, sample, write numbered PNG
// frames plus metadata sufficient for an exact replay.
GenerationResult run_generation(const GenerationRequest& req);

// Variant reusing an already loaded model bundle; req.ckpt is only echoed
// into the metadata.
GenerationResult run_generation(const GenerationRequest& req, ModelSet& m);

// Parses the request back out of a metadata file written by run_generation.
GenerationRequest request_from_metadata(const std::string& metadata_path);

// FNV-1a of a file's bytes, as fixed-width hex.
std::string file_checksum(const std::string& path);

}  // namespace dm
