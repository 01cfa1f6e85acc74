#include "../include/dreamoving.h"

#include <cstring>
#include <filesystem>

#include "core/data_synth.hpp"
#include "core/eval.hpp"
#include "core/generate.hpp"
#include "core/png_io.hpp"

namespace fs = std::filesystem;
using namespace dm;

namespace {

thread_local std::string g_last_error;

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

void set_out(char** slot, const std::string& value) {
    if (slot) *slot = dup_string(value);
}

dm_status fail(dm_status code, const std::string& msg) {
    g_last_error = msg;
    return code;
}

template <typename F>
dm_status guarded(F&& f) {
    try {
        return f();
    } catch (const MissingArtifactError& e) {
        return fail(DM_ERR_MISSING_ARTIFACT, e.what());
    } catch (const NumericalError& e) {
        return fail(DM_ERR_NUMERICAL, e.what());
    } catch (const std::invalid_argument& e) {
        return fail(DM_ERR_USAGE, e.what());
    } catch (const nlohmann::json::exception& e) {
        return fail(DM_ERR_USAGE, e.what());
    } catch (const std::exception& e) {
        return fail(DM_ERR_INTERNAL, e.what());
    }
}

const char* require(const char* arg, const char* name) {
    if (!arg) throw std::invalid_argument(std::string(name) + " must not be null");
    return arg;
}

void require_exists(const std::string& path, const char* what) {
    if (!fs::exists(path))
        throw MissingArtifactError(std::string(what) + " not found: " + path);
}

Tensor load_generated_frames(const std::string& dir) {
    require_exists(dir, "frames directory");
    std::vector<Tensor> frames;
    for (int f = 0;; ++f) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%04d.png", f);
        fs::path p = fs::path(dir) / name;
        if (!fs::exists(p)) break;
        frames.push_back(read_png(p.string()));
    }
    if (frames.empty())
        throw MissingArtifactError("no frame_*.png files under " + dir);
    int H = frames[0].dim(1), W = frames[0].dim(2);
    Tensor out({static_cast<int>(frames.size()), 3, H, W});
    for (size_t f = 0; f < frames.size(); ++f) {
        if (frames[f].dim(1) != H || frames[f].dim(2) != W)
            throw std::invalid_argument("generated frames disagree on resolution");
        std::copy(frames[f].v.begin(), frames[f].v.end(),
                  out.v.begin() + static_cast<long>(f) * frames[f].numel());
    }
    return out;
}

}  // namespace

extern "C" {

const char* dm_last_error(void) { return g_last_error.c_str(); }

void dm_string_free(char* s) { std::free(s); }

dm_status dm_build_dataset(const char* preset, uint64_t seed, const char* out_dir,
                           char** manifest_path_out) {
    return guarded([&] {
        DatasetPreset p = dataset_preset(require(preset, "preset"));
        std::string manifest = build_dataset(p.n_identities, p.clips_per_identity, p.F, p.H, p.W,
                                             seed, require(out_dir, "out_dir"));
        set_out(manifest_path_out, manifest);
        return DM_OK;
    });
}

dm_status dm_train_protocol(const char* preset, const char* manifest_path, const char* out_dir,
                            uint64_t seed, char** final_checkpoint_out) {
    return guarded([&] {
        require_exists(require(manifest_path, "manifest_path"), "manifest");
        DatasetManifest data = load_manifest(manifest_path);
        ProtocolResult r =
            run_full_protocol(require(preset, "preset"), data, require(out_dir, "out_dir"), seed);
        set_out(final_checkpoint_out, r.final_checkpoint);
        return DM_OK;
    });
}

dm_status dm_stage_defaults(const char* stage, const char* preset, char** config_json_out) {
    return guarded([&] {
        StageConfig cfg = stage_defaults(require(stage, "stage"), require(preset, "preset"));
        set_out(config_json_out, cfg.to_json().dump(2));
        return DM_OK;
    });
}

dm_status dm_train_stage(const char* stage_config_json, const char* manifest_path,
                         uint64_t model_seed, const char* out_dir, char** checkpoint_out) {
    return guarded([&] {
        StageConfig cfg =
            StageConfig::from_json(nlohmann::json::parse(require(stage_config_json, "stage config")));
        require_exists(require(manifest_path, "manifest_path"), "manifest");
        DatasetManifest data = load_manifest(manifest_path);
        std::unique_ptr<ModelSet> m = make_default_models(model_seed);
        StageResult r = run_stage(cfg, data, *m, require(out_dir, "out_dir"));
        set_out(checkpoint_out, r.checkpoint_path);
        return DM_OK;
    });
}

dm_status dm_generate(const char* request_json, char** metadata_path_out) {
    return guarded([&] {
        GenerationRequest req =
            GenerationRequest::from_json(nlohmann::json::parse(require(request_json, "request")));
        GenerationResult res = run_generation(req);
        set_out(metadata_path_out, res.metadata_path);
        return DM_OK;
    });
}

dm_status dm_generate_replay(const char* metadata_path, const char* out_dir,
                             char** metadata_path_out) {
    return guarded([&] {
        GenerationRequest req = request_from_metadata(require(metadata_path, "metadata_path"));
        req.out_dir = require(out_dir, "out_dir");
        GenerationResult res = run_generation(req);
        set_out(metadata_path_out, res.metadata_path);
        return DM_OK;
    });
}

struct dm_pipeline {
    std::string ckpt;
    std::unique_ptr<ModelSet> models;
};

dm_status dm_pipeline_open(const char* ckpt_path, dm_pipeline** out) {
    return guarded([&] {
        if (!out) throw std::invalid_argument("out must not be null");
        require_exists(require(ckpt_path, "ckpt_path"), "checkpoint");
        auto p = std::make_unique<dm_pipeline>();
        p->ckpt = ckpt_path;
        p->models = load_checkpoint(p->ckpt);
        *out = p.release();
        return DM_OK;
    });
}

dm_status dm_pipeline_generate(dm_pipeline* p, const char* request_json,
                               char** metadata_path_out) {
    return guarded([&] {
        if (!p) throw std::invalid_argument("pipeline handle must not be null");
        GenerationRequest req =
            GenerationRequest::from_json(nlohmann::json::parse(require(request_json, "request")));
        if (req.ckpt.empty()) req.ckpt = p->ckpt;
        GenerationResult res = run_generation(req, *p->models);
        set_out(metadata_path_out, res.metadata_path);
        return DM_OK;
    });
}

void dm_pipeline_close(dm_pipeline* p) { delete p; }

dm_status dm_evaluate(const char* frames_dir, const char* control_path, const char* face_png,
                      const char* ckpt_path, char** metrics_json_out) {
    return guarded([&] {
        Tensor frames = load_generated_frames(require(frames_dir, "frames_dir"));
        require_exists(require(control_path, "control_path"), "control sequence");
        ControlSequence ctl = ControlSequence::load(control_path);
        if (!ctl.keypoints)
            throw std::invalid_argument("control sequence carries no keypoints (pose required)");
        if (ctl.keypoints->dim(0) != frames.dim(0))
            throw std::invalid_argument("frame count mismatch: " + std::to_string(frames.dim(0)) +
                                        " generated vs " + std::to_string(ctl.keypoints->dim(0)) +
                                        " reference");
        require_exists(require(face_png, "face_png"), "face reference");
        Tensor face = read_png(face_png);

        EvalMetrics m;
        if (ckpt_path) {
            require_exists(ckpt_path, "checkpoint");
            std::unique_ptr<ModelSet> models = load_checkpoint(ckpt_path);
            m = evaluate_clip(*models->guider, frames, *ctl.keypoints, face);
        } else {
            ParamStore ps;
            Rng rng(5);
            ContentGuider guider(ps, GuiderConfig{}, rng);
            m = evaluate_clip(guider, frames, *ctl.keypoints, face);
        }
        set_out(metrics_json_out, m.to_json().dump(2));
        return DM_OK;
    });
}

}  // extern "C"
