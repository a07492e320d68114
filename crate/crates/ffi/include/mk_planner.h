#ifndef MK_PLANNER_H
#define MK_PLANNER_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Non-zero values match the command-line exit codes where
 * one exists.
 */
typedef enum MkpStatus {
  MKP_STATUS_OK = 0,
  MKP_STATUS_IO = 1,
  MKP_STATUS_MISSING_INPUT = 2,
  MKP_STATUS_PARSE = 3,
  MKP_STATUS_VALIDATION = 4,
  MKP_STATUS_NO_FEASIBLE_CANDIDATE = 5,
  MKP_STATUS_DEADLOCK = 6,
  /**
   * Null pointer or non-UTF-8 string argument.
   */
  MKP_STATUS_INVALID_ARGUMENT = 7,
  MKP_STATUS_PANIC = 8,
} MkpStatus;

/**
 * Operator graph handle.
 */
typedef struct MkpGraph MkpGraph;

/**
 * Hardware description handle.
 */
typedef struct MkpHardware MkpHardware;

/**
 * Solidified schedule handle.
 */
typedef struct MkpTrace MkpTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *mkp_last_error(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void mkp_string_free(char *s);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MkpStatus mkp_graph_load(const char *path, struct MkpGraph **out);

/**
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum MkpStatus mkp_graph_from_json(const char *json, struct MkpGraph **out);

/**
 * # Safety
 * `graph` must come from this library (or be null) and not be used again.
 */
void mkp_graph_free(struct MkpGraph *graph);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MkpStatus mkp_hw_load(const char *path, struct MkpHardware **out);

/**
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum MkpStatus mkp_hw_from_json(const char *json, struct MkpHardware **out);

/**
 * # Safety
 * `hw` must come from this library (or be null) and not be used again.
 */
void mkp_hw_free(struct MkpHardware *hw);

/**
 * Pages left after `n_stage` per-stage overheads.
 *
 * # Safety
 * `hw` must be a live handle; `out` must be writable.
 */
enum MkpStatus mkp_page_budget(const struct MkpHardware *hw, uint64_t n_stage, uint64_t *out);

/**
 * Deepest pipeline that fits `total` pages after `reserved` fixed pages.
 *
 * # Safety
 * `out` must be writable.
 */
enum MkpStatus mkp_stage_count(uint64_t total,
                               uint64_t reserved,
                               uint64_t per_stage,
                               uint64_t *out);

/**
 * Searches `space_json` and returns the winning schedule.
 *
 * # Safety
 * Handles must be live, `space_json` NUL-terminated, `out` writable.
 */
enum MkpStatus mkp_search(const struct MkpGraph *graph,
                          const struct MkpHardware *hw,
                          const char *space_json,
                          uint64_t budget,
                          struct MkpTrace **out);

/**
 * Parses a serialized trace and checks its version and hash.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes; `out` must be writable.
 */
enum MkpStatus mkp_trace_parse(const uint8_t *bytes, size_t len, struct MkpTrace **out);

/**
 * Canonical serialized form; free with [`mkp_string_free`].
 *
 * # Safety
 * `trace` must be a live handle; `out` must be writable.
 */
enum MkpStatus mkp_trace_serialize(const struct MkpTrace *trace, char **out);

/**
 * Checks the trace against its inputs and re-simulates it.
 *
 * # Safety
 * Handles must be live.
 */
enum MkpStatus mkp_trace_verify(const struct MkpTrace *trace,
                                const struct MkpGraph *graph,
                                const struct MkpHardware *hw);

/**
 * # Safety
 * `trace` must be a live handle; outputs must be writable.
 */
enum MkpStatus mkp_trace_score(const struct MkpTrace *trace,
                               double *duty_cycle,
                               uint64_t *makespan);

/**
 * Configuration encoding of the winning plan; free with [`mkp_string_free`].
 *
 * # Safety
 * `trace` must be a live handle; `out` must be writable.
 */
enum MkpStatus mkp_trace_config(const struct MkpTrace *trace, char **out);

/**
 * # Safety
 * `trace` must come from this library (or be null) and not be used again.
 */
void mkp_trace_free(struct MkpTrace *trace);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MK_PLANNER_H */
