#ifndef TRACTORY_H
#define TRACTORY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/*
 Result of every fallible call. Values from 10 upward mirror the command
 line's exit codes.
 */
typedef enum TractoryStatus {
  TRACTORY_STATUS_OK = 0,
  TRACTORY_STATUS_NULL_POINTER = 1,
  TRACTORY_STATUS_INVALID_UTF8 = 2,
  TRACTORY_STATUS_BUFFER_TOO_SMALL = 3,
  TRACTORY_STATUS_PANIC = 4,
  TRACTORY_STATUS_IO = 10,
  TRACTORY_STATUS_MISSING_FILE = 11,
  TRACTORY_STATUS_FORMAT = 12,
  TRACTORY_STATUS_UNSUPPORTED_TYPE = 13,
  TRACTORY_STATUS_ESTIMATION = 14,
  TRACTORY_STATUS_CHECKPOINT = 15,
  TRACTORY_STATUS_SCHEMA = 16,
  TRACTORY_STATUS_SHAPE = 17,
  TRACTORY_STATUS_INVALID_ARGUMENT = 18,
  TRACTORY_STATUS_NON_FINITE = 19,
  TRACTORY_STATUS_JSON = 20,
} TractoryStatus;

/*
 A per-voxel fixel map, typically a population atlas.
 */
typedef struct TractoryFixels TractoryFixels;

/*
 A trained (or randomly initialised) direction model.
 */
typedef struct TractoryModel TractoryModel;

/*
 A generated or loaded phantom dataset.
 */
typedef struct TractoryPhantom TractoryPhantom;

/*
 The output of one tracking run.
 */
typedef struct TractoryTractogram TractoryTractogram;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 NUL-terminated library version; static storage.
 */
const char *tractory_version(void);

/*
 Copies the calling thread's last error message into `buf`. Writes an
 empty string after a successful call.

 # Safety
 `buf` must point to `len` writable bytes; `needed` may be null.
 */
enum TractoryStatus tractory_last_error(char *buf, size_t len, size_t *needed);

/*
 Sizes the global worker pool. Must precede any call that computes; fails
 once the pool exists.
 */
enum TractoryStatus tractory_set_threads(size_t n);

/*
 Generates a phantom from a full `PhantomSpec` JSON document.

 # Safety
 `spec_json` must be a NUL-terminated string; `out` must be writable.
 */
enum TractoryStatus tractory_phantom_generate(const char *spec_json, struct TractoryPhantom **out);

/*
 Generates a named preset on a `dims`³ grid.

 # Safety
 `name` must be a NUL-terminated string; `out` must be writable.
 */
enum TractoryStatus tractory_phantom_preset(const char *name,
                                            size_t dims,
                                            uint64_t seed,
                                            double noise_sigma,
                                            struct TractoryPhantom **out);

/*
 # Safety
 `dir` must be a NUL-terminated path; `out` must be writable.
 */
enum TractoryStatus tractory_phantom_load(const char *dir, struct TractoryPhantom **out);

/*
 # Safety
 `phantom` must be a live handle; `dir` a NUL-terminated path.
 */
enum TractoryStatus tractory_phantom_save(const struct TractoryPhantom *phantom, const char *dir);

/*
 Number of bundles, or 0 for a null handle.

 # Safety
 `phantom` must be null or a live handle.
 */
size_t tractory_phantom_bundle_count(const struct TractoryPhantom *phantom);

/*
 # Safety
 `phantom` must be null or a handle not yet freed.
 */
void tractory_phantom_free(struct TractoryPhantom *phantom);

/*
 Fixel atlas from the reference streamlines of `n` phantoms on one grid.
 `fixel_config_json` is a `FixelConfig` document or null for defaults.

 # Safety
 `phantoms` must point to `n` live handles; `out` must be writable.
 */
enum TractoryStatus tractory_fixels_atlas(const struct TractoryPhantom *const *phantoms,
                                          size_t n,
                                          const char *fixel_config_json,
                                          struct TractoryFixels **out);

/*
 # Safety
 `path` must be a NUL-terminated path; `out` must be writable.
 */
enum TractoryStatus tractory_fixels_load(const char *path, struct TractoryFixels **out);

/*
 Writes the 6-channel NIfTI at `path` plus its JSON support sidecar.

 # Safety
 `fixels` must be a live handle; `path` a NUL-terminated path.
 */
enum TractoryStatus tractory_fixels_save(const struct TractoryFixels *fixels, const char *path);

/*
 # Safety
 `fixels` must be null or a handle not yet freed.
 */
void tractory_fixels_free(struct TractoryFixels *fixels);

/*
 Trains a model on `n` phantoms sharing `atlas`. Uses the `features` and
 `train` sections of the run configuration (null for defaults).

 # Safety
 `phantoms` must point to `n` live handles, `atlas` must be live and `out`
 writable.
 */
enum TractoryStatus tractory_model_train(const struct TractoryPhantom *const *phantoms,
                                         size_t n,
                                         const struct TractoryFixels *atlas,
                                         const char *config_json,
                                         struct TractoryModel **out);

/*
 # Safety
 `dir` must be a NUL-terminated path; `out` must be writable.
 */
enum TractoryStatus tractory_model_load(const char *dir, struct TractoryModel **out);

/*
 Writes a checkpoint directory. `provenance_json` is stored verbatim in
 the manifest; null stores `null`.

 # Safety
 `model` must be a live handle; strings NUL-terminated or null where
 allowed.
 */
enum TractoryStatus tractory_model_save(const struct TractoryModel *model,
                                        const char *dir,
                                        const char *provenance_json);

/*
 Length of the model's feature vector, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t tractory_model_feature_len(const struct TractoryModel *model);

/*
 # Safety
 `model` must be null or a handle not yet freed.
 */
void tractory_model_free(struct TractoryModel *model);

/*
 Whole-brain tracking on `phantom`. A null `model` selects the FACT
 baseline, which needs no atlas; otherwise `atlas` is required. Uses the
 `tracker` section of the run configuration.

 # Safety
 Handles must be live or null where allowed; `out` must be writable.
 */
enum TractoryStatus tractory_track(const struct TractoryModel *model,
                                   const struct TractoryPhantom *phantom,
                                   const struct TractoryFixels *atlas,
                                   const char *config_json,
                                   struct TractoryTractogram **out);

/*
 Accepted and launched streamline counts.

 # Safety
 `t` must be a live handle; outputs must be writable or null.
 */
enum TractoryStatus tractory_tractogram_counts(const struct TractoryTractogram *t,
                                               size_t *accepted,
                                               size_t *launched);

/*
 Writes the accepted streamlines as a TCK file.

 # Safety
 `t` must be a live handle; `path` a NUL-terminated path.
 */
enum TractoryStatus tractory_tractogram_write_tck(const struct TractoryTractogram *t,
                                                  const char *path);

/*
 The tracking report (per-status and per-α counts) as JSON.

 # Safety
 `t` must be a live handle; `buf` must hold `len` bytes; `needed` may be
 null.
 */
enum TractoryStatus tractory_tractogram_report_json(const struct TractoryTractogram *t,
                                                    char *buf,
                                                    size_t len,
                                                    size_t *needed);

/*
 Scores the tractogram against the phantom's bundle masks and writes the
 evaluation report as JSON. `mask_rule_json` is a `MaskRule` document or
 null for defaults.

 # Safety
 Handles must be live; `buf` must hold `len` bytes; `needed` may be null.
 */
enum TractoryStatus tractory_evaluate_json(const struct TractoryTractogram *t,
                                           const struct TractoryPhantom *phantom,
                                           const char *mask_rule_json,
                                           char *buf,
                                           size_t len,
                                           size_t *needed);

/*
 # Safety
 `t` must be null or a handle not yet freed.
 */
void tractory_tractogram_free(struct TractoryTractogram *t);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRACTORY_H */
