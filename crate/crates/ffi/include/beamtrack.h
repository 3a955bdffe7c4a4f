#ifndef BEAMTRACK_H
#define BEAMTRACK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Lifecycle of a world handle.
 */
typedef enum BtRunStatus {
  BT_RUN_STATUS_IDLE = 0,
  BT_RUN_STATUS_RUNNING = 1,
  BT_RUN_STATUS_FINISHED = 2,
} BtRunStatus;

/**
 * Result code of every fallible call.
 */
typedef enum BtStatus {
  BT_STATUS_OK = 0,
  BT_STATUS_NULL_ARGUMENT = 1,
  BT_STATUS_INVALID_ARGUMENT = 2,
  BT_STATUS_BUFFER_TOO_SMALL = 3,
  BT_STATUS_IO = 4,
  BT_STATUS_PARSE = 5,
  BT_STATUS_SCENARIO = 6,
  BT_STATUS_STARTUP = 7,
  BT_STATUS_NOT_RUNNING = 8,
  BT_STATUS_SIMULATION = 9,
  BT_STATUS_PANIC = 10,
} BtStatus;

/**
 * A simulated campaign advanced under caller control.
 */
typedef struct BtWorld BtWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bt_version(void);

/**
 * Copies the calling thread's last error message (empty after a success).
 */
enum BtStatus bt_last_error(char *buf, size_t cap, size_t *needed);

/**
 * WGS-84 geodetic to ECEF metres; `xyz` receives three values.
 */
enum BtStatus bt_geodetic_to_ecef(double lat_deg, double lon_deg, double alt_m, double *xyz);

/**
 * East/north/up of `to` in the tangent frame at `from`; `enu` receives three values.
 */
enum BtStatus bt_enu_between(double from_lat,
                             double from_lon,
                             double from_alt,
                             double to_lat,
                             double to_lon,
                             double to_alt,
                             double *enu);

/**
 * Line-of-sight bearing (degrees clockwise from north) and elevation.
 */
enum BtStatus bt_bearing_elevation(double from_lat,
                                   double from_lon,
                                   double from_alt,
                                   double to_lat,
                                   double to_lon,
                                   double to_alt,
                                   double *yaw_deg,
                                   double *pitch_deg);

/**
 * Great-circle angle between a boresight and a line of sight, degrees.
 */
double bt_pointing_error_deg(double mount_yaw,
                             double mount_pitch,
                             double los_yaw,
                             double los_pitch);

/**
 * Gain of the default horn antenna at an off-axis angle, dBi.
 */
double bt_antenna_gain_dbi(double offaxis_deg);

/**
 * Clock offset (server minus client) and round-trip delay from one
 * four-timestamp exchange.
 */
enum BtStatus bt_sync_offset(int64_t t1,
                             int64_t t2,
                             int64_t t3,
                             int64_t t4,
                             int64_t *offset_ns,
                             int64_t *delay_ns);

/**
 * Writes the ±1 chips of the default m-sequence with `stages` stages.
 * `len` always receives the period; `chips` may be null to query it.
 */
enum BtStatus bt_pn_sequence(uint32_t stages, int8_t *chips, size_t cap, size_t *len);

/**
 * Time-dilation factor of the default sounder configuration.
 */
enum BtStatus bt_slide_factor(double *out);

/**
 * Runs a scenario file in virtual time, writes its outputs under
 * `out_dir` and copies the stats report (JSON) into `buf`.
 */
enum BtStatus bt_run_scenario(const char *scenario_path,
                              const char *out_dir,
                              char *buf,
                              size_t cap,
                              size_t *needed);

/**
 * Builds a world from a scenario file. `out_dir` may be null, in which
 * case recorded segments are not written to disk.
 */
enum BtStatus bt_world_new(const char *scenario_path, const char *out_dir, struct BtWorld **world);

/**
 * Releases a world; null is ignored.
 */
void bt_world_free(struct BtWorld *world);

/**
 * Processes every event due at or before `t_ns` (simulated nanoseconds).
 */
enum BtStatus bt_world_step_until(struct BtWorld *world, int64_t t_ns);

/**
 * Runs to the end of the scenario.
 */
enum BtStatus bt_world_run(struct BtWorld *world);

enum BtStatus bt_world_now_ns(struct BtWorld *world, int64_t *t_ns);

enum BtStatus bt_world_status(struct BtWorld *world, enum BtRunStatus *status);

/**
 * Copies the operator state snapshot (JSON).
 */
enum BtStatus bt_world_snapshot(struct BtWorld *world, char *buf, size_t cap, size_t *needed);

/**
 * Submits an operator command or fault given as JSON, e.g.
 * `{"target":"rx","action":"recalibrate"}`; the command id is copied out.
 */
enum BtStatus bt_world_submit(struct BtWorld *world,
                              const char *command_json,
                              char *buf,
                              size_t cap,
                              size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BEAMTRACK_H */
