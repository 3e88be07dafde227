/* SPDX-License-Identifier: Apache-2.0 */
#ifndef CA3D_CA3D_H
#define CA3D_CA3D_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CA3D_API __declspec(dllexport)
#else
#define CA3D_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes 1-4 double as CLI exit codes. */
typedef enum ca3d_status {
  CA3D_OK = 0,
  CA3D_ERR_IO = 1,
  CA3D_ERR_USAGE = 2,
  CA3D_ERR_NUMERICAL = 3,
  CA3D_ERR_VERIFICATION = 4,
  CA3D_ERR_SHAPE = 5,
  CA3D_ERR_FORMAT = 6,
  CA3D_ERR_BAD_MAGIC = 7,
  CA3D_ERR_TRUNCATED = 8,
  CA3D_ERR_DUPLICATE_NAME = 9,
  CA3D_ERR_UNSUPPORTED_VERSION = 10,
  CA3D_ERR_CHECKSUM = 11,
  CA3D_ERR_INVALID_ARGUMENT = 12,
  CA3D_ERR_INTERNAL = 99
} ca3d_status;

typedef enum ca3d_direction { CA3D_CC_TO_MLO = 0, CA3D_MLO_TO_CC = 1 } ca3d_direction;

typedef enum ca3d_eval_mode {
  CA3D_EVAL_MODEL = 0,
  CA3D_EVAL_SELF = 1, /* ground truth against itself */
  CA3D_EVAL_COPY = 2  /* the reference view as the prediction */
} ca3d_eval_mode;

typedef struct ca3d_config ca3d_config;
typedef struct ca3d_model ca3d_model;

/* Message for the last failed call on this thread ("" if none). */
CA3D_API const char* ca3d_last_error(void);
CA3D_API const char* ca3d_status_name(ca3d_status status);
/* Maps a status onto the CLI contract: 0, 1 I/O, 2 usage, 3 numerical,
 * 4 verification. Format and checksum problems count as I/O. */
CA3D_API int ca3d_exit_code(ca3d_status status);
CA3D_API const char* ca3d_version(void);

/* Applies CA3D_THREADS (default: logical cores) to the internal pools. */
CA3D_API ca3d_status ca3d_configure_threads(void);

/* Strings and float buffers returned by the library. */
CA3D_API void ca3d_free(void* p);

/* ---- config ---- */
CA3D_API ca3d_status ca3d_config_default(ca3d_config** out);
CA3D_API ca3d_status ca3d_config_parse(const char* text, ca3d_config** out);
CA3D_API ca3d_status ca3d_config_load(const char* path, ca3d_config** out);
/* Sets one key with the same parsing rules as the text form, then
 * revalidates. On failure the config is left unchanged. */
CA3D_API ca3d_status ca3d_config_set(ca3d_config* config, const char* key, const char* value);
/* Every field in a fixed order; free with ca3d_free. */
CA3D_API ca3d_status ca3d_config_emit(const ca3d_config* config, char** text);
CA3D_API void ca3d_config_free(ca3d_config* config);

/* ---- data ---- */
typedef struct ca3d_split_counts {
  int64_t train, val, test;
} ca3d_split_counts;

/* Writes pairs.ca3d and manifest.tsv under dir. */
CA3D_API ca3d_status ca3d_dataset_generate(const char* dir, int64_t count, int64_t size, uint64_t seed,
                                           ca3d_split_counts* counts);

/* Reads a binary PGM (P5) or a container holding one 2-D float record (or a
 * record named "image"). Values land in [0, 1] for PGM input. */
CA3D_API ca3d_status ca3d_image_read(const char* path, float** data, int64_t* height, int64_t* width);
CA3D_API ca3d_status ca3d_image_write_pgm(const char* path, const float* data, int64_t height, int64_t width);
/* Container with a single record "image" of shape [height, width]. */
CA3D_API ca3d_status ca3d_image_write_container(const char* path, const float* data, int64_t height, int64_t width);

/* ---- model ---- */
typedef void (*ca3d_log_fn)(int64_t step, double loss, double wallclock_ms, void* user);

/* Trains on the train split of data_dir. steps < 0 uses the config value. */
CA3D_API ca3d_status ca3d_train(const char* data_dir, const ca3d_config* config, int64_t steps, ca3d_log_fn log,
                                void* user, ca3d_model** out);
CA3D_API ca3d_status ca3d_model_save(const ca3d_model* model, const char* path);
CA3D_API ca3d_status ca3d_model_load(const char* path, ca3d_model** out);
/* A copy of the config the model was built from. */
CA3D_API ca3d_status ca3d_model_config(const ca3d_model* model, ca3d_config** out);
CA3D_API int64_t ca3d_model_parameter_count(const ca3d_model* model);
CA3D_API int64_t ca3d_model_image_size(const ca3d_model* model);
CA3D_API int64_t ca3d_model_step(const ca3d_model* model);
CA3D_API void ca3d_model_free(ca3d_model* model);

typedef struct ca3d_sample_options {
  int steps;       /* 1..T */
  double guidance; /* classifier-free guidance scale */
  uint64_t seed;
  int clip_denoised;
  int batch; /* references per sampler call */
} ca3d_sample_options;

/* steps 50, guidance 3.0, seed 0, clipping on, batch 16. */
CA3D_API ca3d_sample_options ca3d_sample_options_default(void);

/* Translates `count` references of image_size x image_size stored back to
 * back in `input`; `output` must hold the same number of floats. */
CA3D_API ca3d_status ca3d_translate(ca3d_model* model, const float* input, int64_t count, ca3d_direction direction,
                                    const ca3d_sample_options* options, float* output);

/* Scores both directions on a split; model may be NULL for the self and
 * copy modes. The report text is freed with ca3d_free. Means are optional. */
CA3D_API ca3d_status ca3d_evaluate(ca3d_model* model, const char* data_dir, const char* split, ca3d_eval_mode mode,
                                   const ca3d_sample_options* options, char** report, double mean_psnr[2],
                                   double mean_ssim[2]);

/* ---- verification ---- */
/* theta_perturbation is a test hook added to the MLO angle. all_passed is
 * set to 1 only if every check passes. */
CA3D_API ca3d_status ca3d_verify_geometry(uint64_t seed, double theta_perturbation, char** report, int* all_passed);

/* ---- metrics ---- */
CA3D_API ca3d_status ca3d_psnr(const float* a, const float* b, int64_t height, int64_t width, double* out);
CA3D_API ca3d_status ca3d_ssim(const float* a, const float* b, int64_t height, int64_t width, double* out);

#ifdef __cplusplus
}
#endif

#endif /* CA3D_CA3D_H */
