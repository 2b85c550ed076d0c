#ifndef TYRION_H
#define TYRION_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define TYR_OK 0

/*
 Null pointer, zero size or invalid UTF-8 argument.
 */
#define TYR_ERR_ARGUMENT 1

#define TYR_ERR_CONFIG 2

#define TYR_ERR_DATA 3

#define TYR_ERR_NUMERIC 4

/*
 The prediction contains no front pixel; the MDE is undefined.
 */
#define TYR_NO_FRONT 5

#define TYR_ERR_PANIC 6

/*
 Stages for [`tyr_run_stage`].
 */
#define TYR_STAGE_SYNTH 0

#define TYR_STAGE_PRETRAIN 1

#define TYR_STAGE_FINETUNE 2

/*
 Run configuration.
 */
typedef struct TyrConfig TyrConfig;

/*
 Ensemble of zone-segmentation models sharing one configuration.
 */
typedef struct TyrEnsemble TyrEnsemble;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version, static string.
 */
const char *tyr_version(void);

/*
 Message of the last failure on this thread, or null. Valid until the next
 failing call on the same thread.
 */
const char *tyr_last_error(void);

/*
 Default configuration; `toy` selects the 64 px model.

 # Safety
 `out` must be a valid pointer.
 */
int32_t tyr_config_default(bool toy, struct TyrConfig **out);

/*
 Parses a TOML configuration.

 # Safety
 `text` must be a nul-terminated string and `out` a valid pointer.
 */
int32_t tyr_config_parse(const char *text, struct TyrConfig **out);

/*
 Loads a TOML configuration file.

 # Safety
 `path` must be a nul-terminated string and `out` a valid pointer.
 */
int32_t tyr_config_load(const char *path, struct TyrConfig **out);

/*
 Checks the setup table and every section.

 # Safety
 `cfg` must come from a `tyr_config_*` constructor.
 */
int32_t tyr_config_validate(const struct TyrConfig *cfg);

/*
 # Safety
 `cfg` must come from a `tyr_config_*` constructor and not be used after.
 */
void tyr_config_free(struct TyrConfig *cfg);

/*
 Runs one training or data stage of `cfg` (`TYR_STAGE_*`). Synthetic data
 goes to `<out>/data`.

 # Safety
 `cfg` must come from a `tyr_config_*` constructor.
 */
int32_t tyr_run_stage(const struct TyrConfig *cfg, int32_t stage);

/*
 Loads `n` member checkpoints built for the model of `cfg`.

 # Safety
 `paths` must point to `n` nul-terminated strings; `out` must be valid.
 */
int32_t tyr_ensemble_load(const struct TyrConfig *cfg,
                          const char *const *paths,
                          size_t n,
                          struct TyrEnsemble **out);

/*
 `n` randomly initialised members with seeds `seed..seed+n`.

 # Safety
 `cfg` must come from a `tyr_config_*` constructor; `out` must be valid.
 */
int32_t tyr_ensemble_random(const struct TyrConfig *cfg,
                            size_t n,
                            uint64_t seed,
                            struct TyrEnsemble **out);

/*
 Number of members, 0 for null.

 # Safety
 `ens` must be null or come from a `tyr_ensemble_*` constructor.
 */
size_t tyr_ensemble_size(const struct TyrEnsemble *ens);

/*
 # Safety
 `ens` must come from a `tyr_ensemble_*` constructor and not be used after.
 */
void tyr_ensemble_free(struct TyrEnsemble *ens);

/*
 Segments one scene and extracts its front.

 `sar` holds `rows * cols` 16-bit intensities, row-major. `bbox` holds
 `min_row, max_row, min_col, max_col` (inclusive). Outputs: `zones` gets
 class ids 0..3 (no-info, rock, glacier, ocean), `front` gets 0 or 1, and
 `uncertainty`, if not null, gets `4 * rows * cols` per-class standard
 deviations, class-major.

 # Safety
 Buffers must hold the stated number of elements.
 */
int32_t tyr_infer(const struct TyrEnsemble *ens,
                  const uint16_t *sar,
                  size_t rows,
                  size_t cols,
                  const size_t *bbox,
                  double resolution,
                  bool tta,
                  bool overlap,
                  uint8_t *zones,
                  uint8_t *front,
                  double *uncertainty);

/*
 Mean distance error in meters between two front masks (non-zero = front)
 of one image. Returns `TYR_NO_FRONT` and writes NaN when the prediction
 is empty.

 # Safety
 `gt` and `pred` must hold `rows * cols` bytes; `out` must be valid.
 */
int32_t tyr_mde(const uint8_t *gt,
                const uint8_t *pred,
                size_t rows,
                size_t cols,
                double resolution,
                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TYRION_H */
