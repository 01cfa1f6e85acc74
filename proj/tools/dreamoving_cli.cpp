#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <dreamoving.h>
#include <json.hpp>

namespace {

int report(dm_status s) {
    if (s != DM_OK) std::fprintf(stderr, "error: %s\n", dm_last_error());
    return static_cast<int>(s);
}

std::string take(char* s) {
    std::string out = s ? s : "";
    dm_string_free(s);
    return out;
}

// "<path>:<modality>[:<scale>]"
bool parse_control(const std::string& arg, nlohmann::json& out) {
    size_t last = arg.rfind(':');
    if (last == std::string::npos || last == 0) return false;
    double scale = 1.0;
    std::string rest = arg;
    try {
        size_t used = 0;
        scale = std::stod(arg.substr(last + 1), &used);
        if (used != arg.size() - last - 1) throw std::invalid_argument("");
        rest = arg.substr(0, last);
        last = rest.rfind(':');
        if (last == std::string::npos || last == 0) return false;
    } catch (const std::exception&) {
        scale = 1.0;
    }
    out = {{"path", rest.substr(0, last)}, {"modality", rest.substr(last + 1)}, {"scale", scale}};
    return true;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Human video generation: dataset synthesis, staged training, "
                 "controlled sampling and evaluation"};
    app.require_subcommand(1);

    std::string ds_preset = "ci", ds_out;
    uint64_t ds_seed = 0;
    CLI::App* dataset = app.add_subcommand("dataset", "Build the synthetic dancer dataset");
    dataset->add_option("--preset", ds_preset, "ci | large");
    dataset->add_option("--seed", ds_seed, "dataset seed");
    dataset->add_option("--out", ds_out, "output directory")->required();

    std::string tr_preset = "ci", tr_stage, tr_config, tr_init, tr_manifest, tr_out;
    uint64_t tr_seed = 0, tr_model_seed = 41;
    CLI::App* train = app.add_subcommand("train", "Run the staged training protocol");
    train->add_option("--preset", tr_preset, "ci | full");
    train->add_option("--stage", tr_stage, "run a single stage instead of the full protocol");
    train->add_option("--config", tr_config, "stage config JSON file (with --stage)");
    train->add_option("--init-from", tr_init, "initial checkpoint (with --stage)");
    train->add_option("--manifest", tr_manifest, "dataset manifest")->required();
    train->add_option("--out", tr_out, "output directory")->required();
    train->add_option("--seed", tr_seed, "training seed");
    train->add_option("--model-seed", tr_model_seed, "model init seed (with --stage)");

    std::string g_prompt, g_face, g_cloth, g_sampler = "ddim", g_ckpt, g_out, g_replay;
    std::vector<std::string> g_controls;
    double g_alpha_f = 1.0, g_alpha_c = 1.0, g_cfg = 1.0;
    int g_frames = 8, g_steps = 20, g_resolution = 32;
    uint64_t g_seed = 0;
    CLI::App* generate = app.add_subcommand("generate", "Sample a video from a checkpoint");
    generate->add_option("--prompt", g_prompt, "text prompt");
    CLI::Option* face_opt = generate->add_option("--face", g_face, "face reference PNG");
    CLI::Option* cloth_opt = generate->add_option("--cloth", g_cloth, "cloth reference PNG");
    generate->add_option("--control", g_controls,
                         "control sequence as <path>:<modality>[:<scale>], repeatable");
    CLI::Option* af_opt = generate->add_option("--alpha-f", g_alpha_f, "face guidance weight");
    CLI::Option* ac_opt = generate->add_option("--alpha-c", g_alpha_c, "cloth guidance weight");
    generate->add_option("--frames", g_frames, "frame count (max 64)");
    generate->add_option("--resolution", g_resolution, "output side when no control fixes it");
    generate->add_option("--seed", g_seed, "sampling seed");
    generate->add_option("--sampler", g_sampler, "ddim | ancestral");
    generate->add_option("--steps", g_steps, "sampler steps");
    generate->add_option("--cfg", g_cfg, "classifier-free guidance scale");
    CLI::Option* ckpt_opt = generate->add_option("--ckpt", g_ckpt, "model checkpoint");
    CLI::Option* gout_opt = generate->add_option("--out", g_out, "output directory");
    generate->add_option("--replay", g_replay, "re-run a previous generation's metadata JSON");

    std::string e_frames, e_control, e_face, e_ckpt;
    CLI::App* evaluate = app.add_subcommand("evaluate", "Score generated frames");
    evaluate->add_option("--frames-dir", e_frames, "directory of frame_*.png")->required();
    evaluate->add_option("--control", e_control, "pose control sequence with keypoints")->required();
    evaluate->add_option("--face", e_face, "reference face PNG")->required();
    evaluate->add_option("--ckpt", e_ckpt, "checkpoint for the face encoder (optional)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    char* out = nullptr;
    if (*dataset) {
        dm_status s = dm_build_dataset(ds_preset.c_str(), ds_seed, ds_out.c_str(), &out);
        if (s == DM_OK) std::printf("%s\n", take(out).c_str());
        return report(s);
    }

    if (*train) {
        if (tr_stage.empty()) {
            dm_status s = dm_train_protocol(tr_preset.c_str(), tr_manifest.c_str(), tr_out.c_str(),
                                            tr_seed, &out);
            if (s == DM_OK) std::printf("%s\n", take(out).c_str());
            return report(s);
        }
        std::string config;
        if (!tr_config.empty()) {
            std::ifstream in(tr_config);
            if (!in) {
                std::fprintf(stderr, "error: stage config not found: %s\n", tr_config.c_str());
                return 3;
            }
            std::ostringstream ss;
            ss << in.rdbuf();
            config = ss.str();
        } else {
            dm_status s = dm_stage_defaults(tr_stage.c_str(), tr_preset.c_str(), &out);
            if (s != DM_OK) return report(s);
            config = take(out);
        }
        try {
            nlohmann::json j = nlohmann::json::parse(config);
            if (!tr_init.empty()) j["init_from"] = tr_init;
            if (train->count("--seed")) j["seed"] = tr_seed;
            config = j.dump();
        } catch (const std::exception& e) {
            std::fprintf(stderr, "error: bad stage config: %s\n", e.what());
            return 2;
        }
        dm_status s = dm_train_stage(config.c_str(), tr_manifest.c_str(), tr_model_seed,
                                     tr_out.c_str(), &out);
        if (s == DM_OK) std::printf("%s\n", take(out).c_str());
        return report(s);
    }

    if (*generate) {
        if (!g_replay.empty()) {
            if (!*gout_opt) {
                std::fprintf(stderr, "error: --replay requires --out\n");
                return 2;
            }
            dm_status s = dm_generate_replay(g_replay.c_str(), g_out.c_str(), &out);
            if (s == DM_OK) std::printf("%s\n", take(out).c_str());
            return report(s);
        }
        if (!*ckpt_opt || !*gout_opt) {
            std::fprintf(stderr, "error: generate requires --ckpt and --out\n");
            return 2;
        }
        nlohmann::json controls = nlohmann::json::array();
        for (const std::string& c : g_controls) {
            nlohmann::json one;
            if (!parse_control(c, one)) {
                std::fprintf(stderr, "error: bad --control '%s', expected path:modality[:scale]\n",
                             c.c_str());
                return 2;
            }
            controls.push_back(one);
        }
        nlohmann::json req = {{"prompt", g_prompt},
                              {"face_image", g_face},
                              {"cloth_image", g_cloth},
                              {"controls", controls},
                              {"alpha_f", *face_opt || *af_opt ? g_alpha_f : 0.0},
                              {"alpha_c", *cloth_opt || *ac_opt ? g_alpha_c : 0.0},
                              {"frames", g_frames},
                              {"resolution", g_resolution},
                              {"seed", g_seed},
                              {"sampler", g_sampler},
                              {"num_steps", g_steps},
                              {"guidance_scale", g_cfg},
                              {"ckpt", g_ckpt},
                              {"out_dir", g_out}};
        dm_status s = dm_generate(req.dump().c_str(), &out);
        if (s == DM_OK) std::printf("%s\n", take(out).c_str());
        return report(s);
    }

    dm_status s = dm_evaluate(e_frames.c_str(), e_control.c_str(), e_face.c_str(),
                              e_ckpt.empty() ? nullptr : e_ckpt.c_str(), &out);
    if (s == DM_OK) std::printf("%s\n", take(out).c_str());
    return report(s);
}
