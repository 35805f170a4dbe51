#ifndef LATTICE_FFI_H
#define LATTICE_FFI_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define LATTICE_ALIGN_MIN_CORNER 0

#define LATTICE_ALIGN_CENTERED 1

typedef enum LatticeStatus {
  LATTICE_STATUS_OK = 0,
  LATTICE_STATUS_NULL_ARGUMENT = 1,
  LATTICE_STATUS_INVALID_UTF8 = 2,
  LATTICE_STATUS_PARSE = 3,
  LATTICE_STATUS_DEGENERATE_MESH = 4,
  LATTICE_STATUS_BAD_PATTERNS = 5,
  LATTICE_STATUS_INFEASIBLE = 6,
  LATTICE_STATUS_DEADLOCK = 7,
  LATTICE_STATUS_INVALID_ARGUMENT = 8,
  LATTICE_STATUS_PANIC = 99,
} LatticeStatus;

typedef struct LatticeGrid LatticeGrid;

typedef struct LatticeMesh LatticeMesh;

typedef struct LatticePlan LatticePlan;

typedef struct LatticeSimResult LatticeSimResult;

typedef struct LatticeTiling LatticeTiling;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread; do not free.
 */
const char *lattice_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void lattice_string_free(char *s);

/**
 * Library version, static storage.
 */
const char *lattice_version(void);

/**
 * Parses ASCII or binary STL bytes.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes; `out_mesh` must be writable.
 */
enum LatticeStatus lattice_mesh_from_stl(const uint8_t *bytes,
                                         size_t len,
                                         struct LatticeMesh **out_mesh);

/**
 * Null yields the zero value.
 *
 * # Safety
 * `mesh` must be a live handle or null.
 */
size_t lattice_mesh_triangle_count(const struct LatticeMesh *mesh);

/**
 * # Safety
 * `mesh` must come from [`lattice_mesh_from_stl`] or be null.
 */
void lattice_mesh_free(struct LatticeMesh *mesh);

/**
 * `alignment` is `LATTICE_ALIGN_MIN_CORNER` or `LATTICE_ALIGN_CENTERED`.
 *
 * # Safety
 * `mesh` must be a live handle; `out_grid` must be writable.
 */
enum LatticeStatus lattice_voxelize(const struct LatticeMesh *mesh,
                                    double pitch_mm,
                                    uint32_t alignment,
                                    struct LatticeGrid **out_grid);

/**
 * Null yields the zero value.
 *
 * # Safety
 * `grid` must be a live handle or null.
 */
size_t lattice_grid_occupied_count(const struct LatticeGrid *grid);

/**
 * Grid file JSON.
 *
 * # Safety
 * `grid` must be a live handle; `out_json` must be writable.
 */
enum LatticeStatus lattice_grid_to_json(const struct LatticeGrid *grid, char **out_json);

/**
 * # Safety
 * `grid` must come from this library or be null.
 */
void lattice_grid_free(struct LatticeGrid *grid);

/**
 * `patterns` is a comma list such as `"4x2x2,1x1x1"`; null means the default set.
 *
 * # Safety
 * `grid` must be a live handle, `patterns` null or a C string, `out_tiling` writable.
 */
enum LatticeStatus lattice_tile(const struct LatticeGrid *grid,
                                const char *patterns,
                                struct LatticeTiling **out_tiling);

/**
 * Null yields the zero value.
 *
 * # Safety
 * `tiling` must be a live handle or null.
 */
size_t lattice_tiling_placement_count(const struct LatticeTiling *tiling);

/**
 * Tiling file JSON; needs the grid it was made from for the metadata.
 *
 * # Safety
 * Both handles must be live; `out_json` must be writable.
 */
enum LatticeStatus lattice_tiling_to_json(const struct LatticeTiling *tiling,
                                          const struct LatticeGrid *grid,
                                          char **out_json);

/**
 * # Safety
 * `tiling` must come from this library or be null.
 */
void lattice_tiling_free(struct LatticeTiling *tiling);

/**
 * Plans with feeds on the sides of the footprint (up to four robots).
 * An infeasible plan returns `Infeasible` and no handle.
 *
 * # Safety
 * Both inputs must be live handles; `out_plan` must be writable.
 */
enum LatticeStatus lattice_plan(const struct LatticeGrid *grid,
                                const struct LatticeTiling *tiling,
                                size_t robots,
                                size_t capacity,
                                struct LatticePlan **out_plan);

/**
 * Null yields the zero value.
 *
 * # Safety
 * `plan` must be a live handle or null.
 */
size_t lattice_plan_placement_count(const struct LatticePlan *plan);

/**
 * # Safety
 * `plan` must be a live handle; `out_json` must be writable.
 */
enum LatticeStatus lattice_plan_to_json(const struct LatticePlan *plan, char **out_json);

/**
 * # Safety
 * `plan` must come from this library or be null.
 */
void lattice_plan_free(struct LatticePlan *plan);

/**
 * Runs the simulator. `config_toml` may be null for the calibrated defaults.
 *
 * # Safety
 * `plan` must be a live handle, `config_toml` null or a C string, `out_result` writable.
 */
enum LatticeStatus lattice_simulate(const struct LatticePlan *plan,
                                    const char *config_toml,
                                    uint64_t seed,
                                    struct LatticeSimResult **out_result);

/**
 * Null yields the zero value.
 *
 * # Safety
 * `result` must be a live handle or null.
 */
double lattice_sim_total_time_s(const struct LatticeSimResult *result);

/**
 * Null yields the zero value.
 *
 * # Safety
 * `result` must be a live handle or null.
 */
double lattice_sim_throughput_mm3_per_min(const struct LatticeSimResult *result);

/**
 * # Safety
 * `result` must be a live handle; `out_json` must be writable.
 */
enum LatticeStatus lattice_sim_metrics_json(const struct LatticeSimResult *result, char **out_json);

/**
 * One JSON event per line.
 *
 * # Safety
 * `result` must be a live handle; `out_jsonl` must be writable.
 */
enum LatticeStatus lattice_sim_trace_jsonl(const struct LatticeSimResult *result, char **out_jsonl);

/**
 * # Safety
 * `result` must come from this library or be null.
 */
void lattice_sim_free(struct LatticeSimResult *result);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* LATTICE_FFI_H */
