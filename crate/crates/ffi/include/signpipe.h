#ifndef SIGNPIPE_H
#define SIGNPIPE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SpStatus {
  SP_STATUS_OK = 0,
  SP_STATUS_NULL_ARGUMENT = 1,
  SP_STATUS_INVALID_UTF8 = 2,
  /**
   * Config parse or validation failure; nothing was written.
   */
  SP_STATUS_VALIDATION = 3,
  /**
   * A stage failed; a report may still exist on disk.
   */
  SP_STATUS_STAGE = 4,
  /**
   * Shard verification found problems.
   */
  SP_STATUS_VERIFY = 5,
  SP_STATUS_PANIC = 6,
} SpStatus;

/**
 * A parsed, validated job.
 */
typedef struct SpJob SpJob;

/**
 * Outcome of a run.
 */
typedef struct SpReport SpReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null. Valid until the
 * next call into this library from the same thread.
 */
const char *sp_last_error(void);

/**
 * Library version, static storage.
 */
const char *sp_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void sp_string_free(char *s);

/**
 * Load and validate a YAML job file.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` a valid pointer.
 */
enum SpStatus sp_job_load(const char *path, struct SpJob **out);

/**
 * Parse and validate a job from YAML text.
 *
 * # Safety
 * `yaml` must be a nul-terminated string; `out` a valid pointer.
 */
enum SpStatus sp_job_parse(const char *yaml, struct SpJob **out);

/**
 * Apply one `dotted.path=value` override. The job is left untouched when the
 * result does not validate.
 *
 * # Safety
 * `job` must come from [`sp_job_load`] or [`sp_job_parse`].
 */
enum SpStatus sp_job_set(struct SpJob *job, const char *assignment);

/**
 * Deterministic run id of the job. Free with [`sp_string_free`].
 *
 * # Safety
 * `job` must be a live handle or null.
 */
char *sp_job_run_id(const struct SpJob *job);

/**
 * Canonical JSON of the validated config. Free with [`sp_string_free`].
 *
 * # Safety
 * `job` must be a live handle or null.
 */
char *sp_job_canonical_json(const struct SpJob *job);

/**
 * # Safety
 * `job` must be null or a live handle, freed once.
 */
void sp_job_free(struct SpJob *job);

/**
 * Execute the job. On [`SpStatus::Stage`] `*out` is still set when a report
 * could be built, and must be freed.
 *
 * # Safety
 * `job` must be a live handle; `out` a valid pointer.
 */
enum SpStatus sp_job_run(const struct SpJob *job, struct SpReport **out);

/**
 * The report as written to `report.json`. Free with [`sp_string_free`].
 *
 * # Safety
 * `report` must be a live handle or null.
 */
char *sp_report_json(const struct SpReport *report);

/**
 * # Safety
 * `report` must be a live handle or null.
 */
uint64_t sp_report_samples_exported(const struct SpReport *report);

/**
 * # Safety
 * `report` must be null or a live handle, freed once.
 */
void sp_report_free(struct SpReport *report);

/**
 * Check a shard directory (or a run directory holding `shards/`).
 * `samples` may be null.
 *
 * # Safety
 * `dir` must be a nul-terminated string.
 */
enum SpStatus sp_shards_verify(const char *dir, uint64_t *samples);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIGNPIPE_H */
