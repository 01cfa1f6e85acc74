#ifndef DREAMOVING_H
#define DREAMOVING_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status values double as process exit codes at the CLI boundary. */
typedef enum dm_status {
    DM_OK = 0,
    DM_ERR_USAGE = 2,            /* invalid arguments or malformed input */
    DM_ERR_MISSING_ARTIFACT = 3, /* a referenced file does not exist */
    DM_ERR_NUMERICAL = 4,        /* non-finite values during computation */
    DM_ERR_INTERNAL = 5
} dm_status;

/* Message describing the most recent failure on this thread. The pointer is
 * owned by the library and valid until the next failing call. */
const char* dm_last_error(void);

/* Frees strings returned through the char** out-parameters below. */
void dm_string_free(char* s);

/* Writes a synthetic dataset. `preset` is "ci" or "large"; on success
 * *manifest_path_out receives the manifest location. */
dm_status dm_build_dataset(const char* preset, uint64_t seed, const char* out_dir,
                           char** manifest_path_out);

/* Runs the four training stages in order against a dataset manifest.
 * `preset` is "ci" or "full"; *final_checkpoint_out receives the last stage's
 * checkpoint path. */
dm_status dm_train_protocol(const char* preset, const char* manifest_path, const char* out_dir,
                            uint64_t seed, char** final_checkpoint_out);

/* Default JSON stage config for a stage ("guider", "long_frame",
 * "controlnet", "expression") at a preset ("ci", "full", "paper"). */
dm_status dm_stage_defaults(const char* stage, const char* preset, char** config_json_out);

/* Runs a single stage described by a JSON stage config against a fresh model
 * bundle seeded with `model_seed`. */
dm_status dm_train_stage(const char* stage_config_json, const char* manifest_path,
                         uint64_t model_seed, const char* out_dir, char** checkpoint_out);

/* One-shot generation. `request_json` follows the schema echoed under
 * "request" in every metadata file; *metadata_path_out receives the metadata
 * location next to the frames. */
dm_status dm_generate(const char* request_json, char** metadata_path_out);

/* Re-runs a previous generation from its metadata file into `out_dir`. */
dm_status dm_generate_replay(const char* metadata_path, const char* out_dir,
                             char** metadata_path_out);

/* Pipeline handle keeping one checkpoint loaded across generations. */
typedef struct dm_pipeline dm_pipeline;
dm_status dm_pipeline_open(const char* ckpt_path, dm_pipeline** out);
/* The request's "ckpt" field may be empty; the handle's checkpoint is used. */
dm_status dm_pipeline_generate(dm_pipeline* p, const char* request_json,
                               char** metadata_path_out);
void dm_pipeline_close(dm_pipeline* p);

/* Scores generated frames (frame_*.png under `frames_dir`) against a
 * reference: keypoints from a pose control sequence and a face reference
 * image. `ckpt_path` may be NULL to score with a fixed default encoder.
 * *metrics_json_out receives {control_adherence, identity_similarity,
 * temporal_consistency}. */
dm_status dm_evaluate(const char* frames_dir, const char* control_path, const char* face_png,
                      const char* ckpt_path, char** metrics_json_out);

#ifdef __cplusplus
}
#endif

#endif /* DREAMOVING_H */
