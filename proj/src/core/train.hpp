#pragma once

#include <memory>

#include "data_synth.hpp"

namespace dm {

struct StageConfig {
    std::string stage;  // base | guider | long_frame | controlnet | expression
    std::set<std::string> trainable_groups;
    double lr = 1e-4;
    double weight_decay = 1e-2;
    int resolution = 32;
    int frames = 4;
    int steps = 50;
    int batch_size = 1;
    double condition_dropout = 0.1;
    std::string init_from;  // checkpoint path, empty = continue in place
    uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static StageConfig from_json(const nlohmann::json& j);
};

std::set<std::string> trainable_params_for_stage(const std::string& stage);

// Stage defaults per preset. "paper" carries the published numbers for
// documentation; "ci" and "full" are the runnable desk scales.
StageConfig stage_defaults(const std::string& stage, const std::string& preset);

// The complete model bundle sharing one parameter namespace.
struct ModelSet {
    UNetConfig cfg;
    GuiderConfig gcfg;
    NoiseSchedule schedule;
    ParamStore ps;
    std::unique_ptr<DenoisingUNet> unet;
    std::unique_ptr<VideoControlNet> controlnet;
    std::unique_ptr<ContentGuider> guider;

    ModelSet(const UNetConfig& cfg, const GuiderConfig& gcfg, const NoiseSchedule& s, uint64_t seed);
};

UNetConfig default_unet_config();
std::unique_ptr<ModelSet> make_default_models(uint64_t seed = 41);

void save_checkpoint(const ModelSet& m, const std::string& path,
                     const nlohmann::json& stage_provenance);
// Rebuilds the models from the checkpoint's config and loads every parameter.
std::unique_ptr<ModelSet> load_checkpoint(const std::string& path);
nlohmann::json checkpoint_provenance(const std::string& path);

struct StageResult {
    std::string checkpoint_path;
    std::string log_path;
    std::vector<double> losses;
};

StageResult run_stage(const StageConfig& cfg, const DatasetManifest& data, ModelSet& m,
                      const std::string& out_dir);

struct FreezeEntry {
    bool changed = false;
    double max_abs_delta = 0.0;
};

struct FreezeReport {
    std::map<std::string, FreezeEntry> params;
    std::vector<std::string> violations;  // frozen parameters that changed
    bool contract_ok() const { return violations.empty(); }
};

FreezeReport verify_freeze_contract(const std::map<std::string, Tensor>& before,
                                    const std::map<std::string, Tensor>& after,
                                    const StageConfig& cfg);

struct ProtocolResult {
    std::vector<std::string> stage_order;
    std::map<std::string, StageResult> stages;
    std::string final_checkpoint;
};

ProtocolResult run_full_protocol(const std::string& preset, const DatasetManifest& data,
                                 const std::string& out_dir, uint64_t seed);

}  // namespace dm
