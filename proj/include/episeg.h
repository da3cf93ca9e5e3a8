/* C API for the episeg pipeline library.
 *
 * All functions return EPISEG_OK (0) on success. On failure they return
 * EPISEG_E_INPUT for bad arguments, configs, or missing files,
 * EPISEG_E_NUMERIC for solver divergence or non-finite values, and
 * EPISEG_E_INTERNAL for anything else; episeg_last_error() describes the
 * most recent failure on the calling thread.
 */
#ifndef EPISEG_H
#define EPISEG_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define EPISEG_OK 0
#define EPISEG_E_INPUT 2
#define EPISEG_E_NUMERIC 3
#define EPISEG_E_INTERNAL 4

const char* episeg_last_error(void);
const char* episeg_version(void);

/* ---- tiled pyramid stores (opaque handle) ---- */

typedef struct episeg_store episeg_store;

typedef struct episeg_meta {
    int32_t width_px;
    int32_t height_px;
    int32_t channels;
    int32_t bit_depth;
    int32_t levels;
    int32_t tile_size_px;
    double mpp_level0;
} episeg_meta;

int episeg_store_open(const char* dir, episeg_store** out);
int episeg_store_create(const char* dir, const uint8_t* pixels, int32_t width, int32_t height,
                        int32_t channels, int32_t tile_size, double mpp_level0,
                        episeg_store** out);
void episeg_store_close(episeg_store* store);
int episeg_store_meta(const episeg_store* store, episeg_meta* out);
int episeg_store_level_dims(const episeg_store* store, int32_t level, int32_t* w, int32_t* h);
/* buffer must hold w*h*channels bytes; pixels are row-major interleaved */
int episeg_store_read_region(const episeg_store* store, int32_t level, int64_t x, int64_t y,
                             int32_t w, int32_t h, uint8_t* buffer);

/* ---- pipeline commands ---- */

typedef struct episeg_run_opts {
    const char* out_dir; /* required for all commands */
    int64_t seed;        /* honored when has_seed != 0 */
    int32_t has_seed;
    int32_t jobs;        /* <= 1 runs single-threaded */
    int32_t force;       /* rerun stages even when checkpointed */
    int32_t dry_run;     /* print the plan, write nothing */
} episeg_run_opts;

/* synth.json -> synthetic cohort (slides, truth masks, regions, manifest) */
int episeg_synth(const char* synth_json, const episeg_run_opts* opts);

/* IHC store -> concentration store + positivity mask store.
 * config_json (optional) carries {"stains": path, "channel_threshold": ...,
 * "morph_radius": ..., "min_object_px": ..., "tissue_od_threshold": ...}. */
int episeg_deconvolve(const char* ihc_store_dir, const char* config_json, double mpp,
                      const episeg_run_opts* opts);

/* affine -> nonparametric -> patchwise; writes field.json/field.bin and a
 * per-iteration objective trace (diagnostics.csv). config_json (optional)
 * carries the registration parameters. */
int episeg_register(const char* fixed_store_dir, const char* moving_store_dir,
                    const char* config_json, double mpp, int32_t skip_patchwise,
                    const episeg_run_opts* opts);

/* mask store + displacement field -> warped mask store (nearest) */
int episeg_transfer(const char* mask_store_dir, const char* field_dir, double mpp,
                    const episeg_run_opts* opts);

/* train.json + profile ("ihc" | "he") -> checkpoint.bin + train_log.csv */
int episeg_train(const char* train_json, const char* profile, const episeg_run_opts* opts);

/* prediction/truth mask stores vs regions.json -> report.csv, summary.csv,
 * overlay PNGs. Roots may contain "{id}", otherwise "/<slide_id>" is
 * appended. */
int episeg_evaluate(const char* pred_root, const char* truth_root, const char* regions_json,
                    const episeg_run_opts* opts);

/* full two-step pipeline over a cohort manifest; resumable */
int episeg_pipeline(const char* manifest_json, const episeg_run_opts* opts);

#ifdef __cplusplus
}
#endif

#endif /* EPISEG_H */
