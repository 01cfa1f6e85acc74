#include "generate.hpp"

#include <filesystem>
#include <fstream>

#include "png_io.hpp"

namespace fs = std::filesystem;

namespace dm {

void GenerationRequest::validate() const {
    if (frames < 1 || frames > kMaxFrames)
        throw std::invalid_argument("generation: frames must be in [1, " +
                                    std::to_string(kMaxFrames) + "]");
    if (alpha_f < 0.0 || alpha_c < 0.0)
        throw std::invalid_argument("generation: alpha_f and alpha_c must be >= 0");
    if (alpha_f > 0.0 && face_image.empty())
        throw std::invalid_argument("generation: alpha_f > 0 requires a face image");
    if (alpha_c > 0.0 && cloth_image.empty())
        throw std::invalid_argument("generation: alpha_c > 0 requires a cloth image");
    if (sampler != "ddim" && sampler != "ancestral")
        throw std::invalid_argument("generation: unknown sampler '" + sampler + "'");
    if (num_steps < 1) throw std::invalid_argument("generation: num_steps must be positive");
    if (resolution < 8) throw std::invalid_argument("generation: resolution too small");
    if (ckpt.empty()) throw std::invalid_argument("generation: checkpoint path required");
    if (out_dir.empty()) throw std::invalid_argument("generation: output directory required");
    std::set<std::string> seen;
    for (const ControlRef& c : controls) {
        if (c.modality != "pose" && c.modality != "depth")
            throw std::invalid_argument("generation: unknown control modality '" + c.modality + "'");
        if (c.scale < 0.0) throw std::invalid_argument("generation: control scale must be >= 0");
        if (!seen.insert(c.modality).second)
            throw std::invalid_argument("generation: at most one control per modality");
    }
}

nlohmann::json GenerationRequest::to_json() const {
    nlohmann::json ctl = nlohmann::json::array();
    for (const ControlRef& c : controls)
        ctl.push_back({{"path", c.path}, {"modality", c.modality}, {"scale", c.scale}});
    return {{"prompt", prompt},
            {"face_image", face_image},
            {"cloth_image", cloth_image},
            {"controls", ctl},
            {"alpha_f", alpha_f},
            {"alpha_c", alpha_c},
            {"frames", frames},
            {"resolution", resolution},
            {"seed", seed},
            {"sampler", sampler},
            {"num_steps", num_steps},
            {"guidance_scale", guidance_scale},
            {"ckpt", ckpt},
            {"out_dir", out_dir}};
}

GenerationRequest GenerationRequest::from_json(const nlohmann::json& j) {
    GenerationRequest r;
    r.prompt = j.at("prompt").get<std::string>();
    r.face_image = j.at("face_image").get<std::string>();
    r.cloth_image = j.at("cloth_image").get<std::string>();
    for (const auto& c : j.at("controls"))
        r.controls.push_back({c.at("path").get<std::string>(), c.at("modality").get<std::string>(),
                              c.at("scale").get<double>()});
    r.alpha_f = j.at("alpha_f").get<double>();
    r.alpha_c = j.at("alpha_c").get<double>();
    r.frames = j.at("frames").get<int>();
    r.resolution = j.at("resolution").get<int>();
    r.seed = j.at("seed").get<uint64_t>();
    r.sampler = j.at("sampler").get<std::string>();
    r.num_steps = j.at("num_steps").get<int>();
    r.guidance_scale = j.at("guidance_scale").get<double>();
    r.ckpt = j.at("ckpt").get<std::string>();
    r.out_dir = j.at("out_dir").get<std::string>();
    return r;
}

namespace {

void require_file(const std::string& path, const std::string& what) {
    if (!fs::exists(path))
        throw MissingArtifactError("generation: " + what + " not found: " + path);
}

Tensor read_reference(const std::string& path, int res, const std::string& what) {
    Tensor img = read_png(path);
    if (img.dim(1) != res || img.dim(2) != res)
        throw std::invalid_argument("generation: " + what + " must be " + std::to_string(res) +
                                    "x" + std::to_string(res) + ", got " +
                                    std::to_string(img.dim(2)) + "x" + std::to_string(img.dim(1)));
    return img;
}

ControlSequence slice_control(const ControlSequence& full, int F) {
    if (full.frames() < F)
        throw std::invalid_argument("generation: control sequence has " +
                                    std::to_string(full.frames()) + " frames, need " +
                                    std::to_string(F));
    ControlSequence out = full;
    int C = full.maps.dim(1), H = full.maps.dim(2), W = full.maps.dim(3);
    out.maps = Tensor({F, C, H, W});
    std::copy(full.maps.v.begin(), full.maps.v.begin() + out.maps.numel(), out.maps.v.begin());
    if (full.keypoints) {
        int K = full.keypoints->dim(1);
        Tensor kp({F, K, 2});
        std::copy(full.keypoints->v.begin(), full.keypoints->v.begin() + kp.numel(), kp.v.begin());
        out.keypoints = std::move(kp);
    }
    return out;
}

}  // namespace

std::string file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("checksum: cannot open " + path);
    uint64_t h = 1469598103934665603ULL;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ULL;
        }
        if (!in) break;
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return out;
}

GenerationResult run_generation(const GenerationRequest& req) {
    req.validate();
    require_file(req.ckpt, "checkpoint");
    std::unique_ptr<ModelSet> m = load_checkpoint(req.ckpt);
    return run_generation(req, *m);
}

GenerationResult run_generation(const GenerationRequest& req, ModelSet& model) {
    req.validate();
    if (!req.face_image.empty()) require_file(req.face_image, "face image");
    if (!req.cloth_image.empty()) require_file(req.cloth_image, "cloth image");
    for (const ControlRef& c : req.controls) require_file(c.path, "control sequence");

    ModelSet* m = &model;
    int res_img = m->gcfg.image_res;

    ag::NoGradGuard ng;
    ContentVars cond;
    cond.c_t = m->guider->encode_text(req.prompt.empty() ? kNullPrompt : req.prompt);
    Tensor zero_face({m->guider->n_face_tokens(), m->gcfg.d});
    if (req.alpha_f > 0.0) {
        cond.c_f = m->guider->encode_face(read_reference(req.face_image, res_img, "face image"));
        cond.alpha_f = req.alpha_f;
    } else {
        cond.c_f = ag::constant(zero_face);
    }
    if (req.alpha_c > 0.0) {
        cond.c_c = m->guider->encode_cloth(read_reference(req.cloth_image, res_img, "cloth image"));
        cond.alpha_c = req.alpha_c;
    }
    ContentVars uncond;
    uncond.c_t = m->guider->encode_text(kNullPrompt);
    uncond.c_f = ag::constant(zero_face);

    int H = req.resolution, W = req.resolution;
    std::vector<ControlSequence> controls;
    std::vector<double> scales;
    for (const ControlRef& c : req.controls) {
        ControlSequence ctl = slice_control(ControlSequence::load(c.path), req.frames);
        if (ctl.modality != c.modality)
            throw std::invalid_argument("generation: control at " + c.path + " is '" +
                                        ctl.modality + "', requested '" + c.modality + "'");
        if (!controls.empty() &&
            (ctl.maps.dim(2) != controls[0].maps.dim(2) || ctl.maps.dim(3) != controls[0].maps.dim(3)))
            throw std::invalid_argument("generation: control sequences disagree on resolution");
        controls.push_back(std::move(ctl));
        scales.push_back(c.scale);
    }
    if (!controls.empty()) {
        H = controls[0].maps.dim(2);
        W = controls[0].maps.dim(3);
    }

    auto eps_with = [&](const ContentVars& emb) {
        return [&, emb](const Tensor& x_t, int t) -> Tensor {
            ag::NoGradGuard inner;
            if (controls.empty()) return m->unet->forward(x_t, t, emb)->v;
            std::vector<ResidualSet> sets;
            for (const ControlSequence& ctl : controls)
                sets.push_back(m->controlnet->forward_tensors(x_t, t, emb, ctl));
            ResidualSet combined = combine_residuals(sets, scales);
            std::vector<ag::Var> res;
            for (Tensor& r : combined.r) res.push_back(ag::constant(std::move(r)));
            return m->unet->forward(x_t, t, emb, &res)->v;
        };
    };

    SampleOptions opt;
    opt.sampler = req.sampler;
    opt.num_steps = req.num_steps;
    opt.guidance_scale = req.guidance_scale;
    opt.seed = req.seed;
    Tensor x;
    try {
        x = sample_video(eps_with(cond), eps_with(uncond), {req.frames, 3, H, W}, m->schedule, opt);
    } catch (const std::runtime_error& e) {
        if (std::string(e.what()).find("non-finite") != std::string::npos)
            throw NumericalError(std::string("generation: ") + e.what());
        throw;
    }
    for (double v : x.v)
        if (!std::isfinite(v)) throw NumericalError("generation: sampler produced non-finite values");

    fs::create_directories(req.out_dir);
    GenerationResult out;
    out.frames = Tensor({req.frames, 3, H, W});
    for (size_t i = 0; i < x.v.size(); ++i)
        out.frames.v[i] = std::min(1.0, std::max(0.0, 0.5 * (x.v[i] + 1.0)));
    nlohmann::json checksums = nlohmann::json::object();
    for (int f = 0; f < req.frames; ++f) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%04d.png", f);
        Tensor img({3, H, W});
        std::copy(out.frames.v.begin() + static_cast<long>(f) * img.numel(),
                  out.frames.v.begin() + static_cast<long>(f + 1) * img.numel(), img.v.begin());
        std::string path = (fs::path(req.out_dir) / name).string();
        write_png(path, img);
        out.frame_paths.push_back(path);
        checksums[name] = file_checksum(path);
    }
    out.metadata_path = (fs::path(req.out_dir) / "metadata.json").string();
    nlohmann::json meta = {{"version", 1}, {"request", req.to_json()}, {"checksums", checksums}};
    std::ofstream(out.metadata_path) << meta.dump(2) << "\n";
    return out;
}

GenerationRequest request_from_metadata(const std::string& metadata_path) {
    std::ifstream in(metadata_path);
    if (!in) throw MissingArtifactError("metadata not found: " + metadata_path);
    nlohmann::json meta;
    in >> meta;
    return GenerationRequest::from_json(meta.at("request"));
}

}  // namespace dm
