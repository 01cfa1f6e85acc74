#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "../src/core/data_synth.hpp"
#include "../src/core/generate.hpp"
#include "../src/core/png_io.hpp"

using namespace dm;
namespace fs = std::filesystem;

namespace {

UNetConfig tiny_cfg() {
    UNetConfig cfg;
    cfg.base_channels = 4;
    cfg.channel_multipliers = {1, 2};
    cfg.blocks_per_level = 1;
    cfg.attention_levels = {1};
    cfg.content_dim = 16;
    cfg.d_attn = 8;
    cfg.motion_dim = 4;
    return cfg;
}

struct Fixture {
    fs::path dir;
    std::string ckpt;
    Fixture() {
        dir = fs::temp_directory_path() / "dm_generate_test";
        fs::remove_all(dir);
        fs::create_directories(dir);
        ModelSet m(tiny_cfg(), GuiderConfig{}, make_linear_schedule(50, 1e-4, 0.02), 21);
        ckpt = (dir / "model.dmta").string();
        save_checkpoint(m, ckpt, {{"stage", "none"}});
    }
    ~Fixture() { fs::remove_all(dir); }

    GenerationRequest base_request(const std::string& sub) const {
        GenerationRequest r;
        r.prompt = "a striped dancer on a checker background";
        r.frames = 2;
        r.resolution = 16;
        r.seed = 77;
        r.num_steps = 4;
        r.ckpt = ckpt;
        r.out_dir = (dir / sub).string();
        return r;
    }
};

std::vector<std::string> frame_sums(const GenerationResult& res) {
    std::vector<std::string> out;
    for (const std::string& p : res.frame_paths) out.push_back(file_checksum(p));
    return out;
}

}  // namespace

TEST_CASE("request json round trip") {
    GenerationRequest r;
    r.prompt = "p";
    r.face_image = "f.png";
    r.controls = {{"a.dmta", "pose", 0.5}, {"b.dmta", "depth", 1.0}};
    r.alpha_f = 0.7;
    r.frames = 16;
    r.seed = 9;
    r.sampler = "ancestral";
    r.num_steps = 12;
    r.guidance_scale = 2.0;
    r.ckpt = "m.dmta";
    r.out_dir = "out";
    GenerationRequest back = GenerationRequest::from_json(r.to_json());
    CHECK(back.prompt == r.prompt);
    CHECK(back.face_image == r.face_image);
    REQUIRE(back.controls.size() == 2);
    CHECK(back.controls[0].modality == "pose");
    CHECK(back.controls[0].scale == 0.5);
    CHECK(back.alpha_f == r.alpha_f);
    CHECK(back.seed == r.seed);
    CHECK(back.guidance_scale == r.guidance_scale);
}

TEST_CASE("request validation") {
    GenerationRequest r;
    r.ckpt = "m.dmta";
    r.out_dir = "out";
    r.validate();

    GenerationRequest bad = r;
    bad.frames = 65;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = r;
    bad.alpha_f = 0.5;  // face image missing
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = r;
    bad.alpha_c = 0.5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = r;
    bad.controls = {{"a", "pose", 1.0}, {"b", "pose", 1.0}};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = r;
    bad.controls = {{"a", "edges", 1.0}};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = r;
    bad.controls = {{"a", "pose", -1.0}};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = r;
    bad.sampler = "euler";
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = r;
    bad.ckpt.clear();
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE_FIXTURE(Fixture, "missing inputs raise missing-artifact errors") {
    GenerationRequest r = base_request("out_missing");
    r.ckpt = (dir / "nope.dmta").string();
    CHECK_THROWS_AS(run_generation(r), MissingArtifactError);

    r = base_request("out_missing");
    r.controls = {{(dir / "nope_ctl.dmta").string(), "pose", 1.0}};
    CHECK_THROWS_AS(run_generation(r), MissingArtifactError);

    r = base_request("out_missing");
    r.face_image = (dir / "nope.png").string();
    r.alpha_f = 1.0;
    CHECK_THROWS_AS(run_generation(r), MissingArtifactError);

    CHECK_THROWS_AS(request_from_metadata((dir / "nope.json").string()), MissingArtifactError);
}

TEST_CASE_FIXTURE(Fixture, "text-only generation is deterministic and replayable") {
    GenerationRequest r = base_request("out_a");
    GenerationResult a = run_generation(r);
    REQUIRE(a.frame_paths.size() == 2);
    CHECK(a.frames.shape == std::vector<int>{2, 3, 16, 16});
    for (const std::string& p : a.frame_paths) CHECK(fs::exists(p));
    CHECK(fs::exists(a.metadata_path));

    r.out_dir = (dir / "out_b").string();
    GenerationResult b = run_generation(r);
    CHECK(frame_sums(a) == frame_sums(b));

    // replay purely from the metadata file
    GenerationRequest replay = request_from_metadata(a.metadata_path);
    replay.out_dir = (dir / "out_replay").string();
    GenerationResult c = run_generation(replay);
    CHECK(frame_sums(a) == frame_sums(c));

    // the metadata checksums describe the emitted frames
    nlohmann::json meta;
    std::ifstream(a.metadata_path) >> meta;
    CHECK(meta.at("checksums").at("frame_0000.png").get<std::string>() == frame_sums(a)[0]);

    r.seed = 78;
    r.out_dir = (dir / "out_c").string();
    CHECK(frame_sums(run_generation(r)) != frame_sums(a));
}

TEST_CASE_FIXTURE(Fixture, "alpha zero matches a run omitting the reference images") {
    SpriteSpec spec = make_sprite_spec(0, 3);
    ClipSample clip = generate_clip(spec, 5, 2, 32, 32);
    std::string face = (dir / "face.png").string();
    std::string cloth = (dir / "cloth.png").string();
    write_png(face, clip.face_crop);
    write_png(cloth, clip.cloth_crop);

    GenerationRequest with = base_request("out_with");
    with.face_image = face;
    with.cloth_image = cloth;
    GenerationRequest without = base_request("out_without");
    GenerationResult ra = run_generation(with);
    GenerationResult rb = run_generation(without);
    CHECK(frame_sums(ra) == frame_sums(rb));

    // nonzero alphas change the output
    with.alpha_f = 1.0;
    with.alpha_c = 0.5;
    with.out_dir = (dir / "out_alpha").string();
    CHECK(frame_sums(run_generation(with)) != frame_sums(ra));
}

TEST_CASE_FIXTURE(Fixture, "control sequences steer the pipeline") {
    SpriteSpec spec = make_sprite_spec(1, 3);
    ClipSample clip = generate_clip(spec, 6, 4, 16, 16);
    std::string pose_path = (dir / "pose.dmta").string();
    std::string depth_path = (dir / "depth.dmta").string();
    clip.pose.save(pose_path);
    clip.depth.save(depth_path);

    GenerationRequest r = base_request("out_ctl");
    r.controls = {{pose_path, "pose", 1.0}};
    GenerationResult with = run_generation(r);
    CHECK(with.frames.shape == std::vector<int>{2, 3, 16, 16});

    GenerationRequest plain = base_request("out_plain");
    GenerationResult without = run_generation(plain);
    // zero-initialized projections keep a fresh controlnet inert
    CHECK(frame_sums(with) == frame_sums(without));

    // modality mismatch is rejected
    GenerationRequest bad = base_request("out_bad");
    bad.controls = {{pose_path, "depth", 1.0}};
    CHECK_THROWS_AS(run_generation(bad), std::invalid_argument);

    // both controls at once
    GenerationRequest both = base_request("out_both");
    both.controls = {{pose_path, "pose", 1.0}, {depth_path, "depth", 1.0}};
    GenerationResult rb = run_generation(both);
    CHECK(rb.frames.shape == std::vector<int>{2, 3, 16, 16});

    // too few control frames
    GenerationRequest longreq = base_request("out_long");
    longreq.frames = 8;
    longreq.controls = {{pose_path, "pose", 1.0}};
    CHECK_THROWS_AS(run_generation(longreq), std::invalid_argument);
}

TEST_CASE_FIXTURE(Fixture, "classifier-free guidance changes the output") {
    GenerationRequest r = base_request("out_cfg1");
    GenerationResult a = run_generation(r);
    r.guidance_scale = 2.0;
    r.out_dir = (dir / "out_cfg2").string();
    GenerationResult b = run_generation(r);
    CHECK(frame_sums(a) != frame_sums(b));
}

TEST_CASE_FIXTURE(Fixture, "non-finite sampling reports a numerical error") {
    ModelSet m(tiny_cfg(), GuiderConfig{}, make_linear_schedule(50, 1e-4, 0.02), 22);
    m.ps.get("unet_spatial/conv_in.w")->v.v[0] = std::numeric_limits<double>::quiet_NaN();
    std::string bad = (dir / "bad.dmta").string();
    save_checkpoint(m, bad, {{"stage", "none"}});
    GenerationRequest r = base_request("out_nan");
    r.ckpt = bad;
    CHECK_THROWS_AS(run_generation(r), NumericalError);
}
