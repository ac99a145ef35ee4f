#ifndef TODGEN_H
#define TODGEN_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum TodgenStatus {
  TODGEN_STATUS_OK = 0,
  TODGEN_STATUS_NULL_ARGUMENT = 1,
  TODGEN_STATUS_INVALID_UTF8 = 2,
  TODGEN_STATUS_PARSE = 3,
  TODGEN_STATUS_CONFIG = 4,
  TODGEN_STATUS_IO = 5,
  TODGEN_STATUS_PIPELINE = 6,
  TODGEN_STATUS_PANIC = 7,
} TodgenStatus;

/*
 Opaque configured pipeline.
 */
typedef struct TodgenPipeline TodgenPipeline;

/*
 Opaque loaded schema set.
 */
typedef struct TodgenSchemaSet TodgenSchemaSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *todgen_last_error_message(void);

/*
 Release a string returned by this library. Null is ignored.

 # Safety
 `s` is null or was returned by this library and not yet freed.
 */
void todgen_string_free(char *s);

/*
 Parse one action or a bracketed action list and print it canonically.

 # Safety
 `input` is a NUL-terminated string; `out` is a valid pointer.
 */
enum TodgenStatus todgen_mr_canonicalize(const char *input, char **out);

/*
 Load schemas from a manifest, or the bundled set when `manifest_path`
 is null.

 # Safety
 `manifest_path` is null or a NUL-terminated string; `out` is valid.
 */
enum TodgenStatus todgen_schema_load(const char *manifest_path, struct TodgenSchemaSet **out);

/*
 Total number of intents over all services; 0 for a null handle.

 # Safety
 `set` is null or a live handle from [`todgen_schema_load`].
 */
uintptr_t todgen_schema_intent_count(const struct TodgenSchemaSet *set);

/*
 # Safety
 `set` is null or a live handle from [`todgen_schema_load`].
 */
void todgen_schema_free(struct TodgenSchemaSet *set);

/*
 Configure a pipeline from TOML text. A non-null `out_dir` overrides the
 configured output directory.

 # Safety
 `config_toml` is a NUL-terminated string, `out_dir` null or one; `out`
 is valid.
 */
enum TodgenStatus todgen_pipeline_new(const char *config_toml,
                                      const char *out_dir,
                                      struct TodgenPipeline **out);

/*
 Run one stage (`personas`, `contexts`, `plots`, `realize`, `qc`,
 `stats`, `split`) or `run-all`. A JSON array of stage summaries is
 written to `summary_out`. Item-level failures are reported in the
 summaries and yield [`TodgenStatus::Pipeline`].

 # Safety
 `pipeline` is a live handle, `stage` a NUL-terminated string and
 `summary_out` null or valid.
 */
enum TodgenStatus todgen_pipeline_run(struct TodgenPipeline *pipeline,
                                      const char *stage,
                                      char **summary_out);

/*
 # Safety
 `pipeline` is null or a live handle from [`todgen_pipeline_new`].
 */
void todgen_pipeline_free(struct TodgenPipeline *pipeline);

/*
 Run the deterministic quality checks on one datapoint given as JSON and
 write the report as JSON.

 # Safety
 `datapoint_json` is a NUL-terminated string; `report_out` is valid.
 */
enum TodgenStatus todgen_qc_check_json(const char *datapoint_json, char **report_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TODGEN_H */
