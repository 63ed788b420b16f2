#ifndef DCMESH_H
#define DCMESH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum DcmeshStatus {
  DCMESH_STATUS_OK = 0,
  DCMESH_STATUS_NULL_POINTER = 1,
  DCMESH_STATUS_INVALID_UTF8 = 2,
  DCMESH_STATUS_PARSE = 3,
  DCMESH_STATUS_CONFIG = 4,
  DCMESH_STATUS_PARAMETER = 5,
  DCMESH_STATUS_NUMERICAL = 6,
  DCMESH_STATUS_SIMULATION = 7,
  DCMESH_STATUS_OUT_OF_RANGE = 8,
  DCMESH_STATUS_BUFFER_TOO_SMALL = 9,
  DCMESH_STATUS_PANIC = 10,
} DcmeshStatus;

// Result of a closed-loop run.
typedef struct DcmeshRun DcmeshRun;

// Parsed, validated scenario.
typedef struct DcmeshScenario DcmeshScenario;

// Summary statistics of a run.
typedef struct DcmeshStats {
  // Largest |ĩ|/I_max over nodes and time.
  double max_current_ratio;
  // Largest |v − v*| over nodes and time (V).
  double max_voltage_deviation;
  // Largest distance of v from the consensus line (V).
  double max_kernel_distance;
  size_t integration_steps;
  size_t samples;
  // True when every monitor passed and the run completed.
  bool all_pass;
  double wall_clock_s;
} DcmeshStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the full message length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t dcmesh_last_error(char *buf, size_t len);

// Creates the bundled six-node reference scenario.
//
// # Safety
// `out` must point to writable storage for one pointer.
enum DcmeshStatus dcmesh_scenario_reference(struct DcmeshScenario **out);

// Parses and validates a scenario from NUL-terminated TOML text.
//
// # Safety
// `toml` must be a valid C string; `out` must point to writable storage.
enum DcmeshStatus dcmesh_scenario_from_toml(const char *toml, struct DcmeshScenario **out);

// Number of nodes in the scenario.
//
// # Safety
// `scenario` must be a live handle and `out` writable.
enum DcmeshStatus dcmesh_scenario_node_count(const struct DcmeshScenario *scenario, size_t *out);

// Replaces the seed of the initial-state and load draws.
//
// # Safety
// `scenario` must be a live handle.
enum DcmeshStatus dcmesh_scenario_set_seed(struct DcmeshScenario *scenario, uint64_t seed);

// Shortens the simulated horizon; load steps after `total_time` are dropped.
//
// # Safety
// `scenario` must be a live handle.
enum DcmeshStatus dcmesh_scenario_set_total_time(struct DcmeshScenario *scenario,
                                                 double total_time);

// Releases a scenario. Null is ignored.
//
// # Safety
// `scenario` must be null or a handle not yet freed.
void dcmesh_scenario_free(struct DcmeshScenario *scenario);

// Simulates the scenario, recording every `decimation`-th integration step.
// A run that aborts mid-way still yields a handle (with the partial trace)
// and returns `DCMESH_STATUS_SIMULATION`.
//
// # Safety
// `scenario` must be a live handle and `out` writable.
enum DcmeshStatus dcmesh_run(const struct DcmeshScenario *scenario,
                             size_t decimation,
                             struct DcmeshRun **out);

// Summary statistics of a run.
//
// # Safety
// `run` must be a live handle and `out` writable.
enum DcmeshStatus dcmesh_run_stats(const struct DcmeshRun *run, struct DcmeshStats *out);

// Number of recorded trace rows.
//
// # Safety
// `run` must be a live handle and `out` writable.
enum DcmeshStatus dcmesh_run_row_count(const struct DcmeshRun *run, size_t *out);

// Copies the time and node voltages of trace row `row` into `t` and
// `voltages` (`len` must be at least the node count).
//
// # Safety
// `run` must be a live handle, `t` writable and `voltages` point to `len`
// writable doubles.
enum DcmeshStatus dcmesh_run_voltages(const struct DcmeshRun *run,
                                      size_t row,
                                      double *t,
                                      double *voltages,
                                      size_t len);

// Releases a run. Null is ignored.
//
// # Safety
// `run` must be null or a handle not yet freed.
void dcmesh_run_free(struct DcmeshRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DCMESH_H */
