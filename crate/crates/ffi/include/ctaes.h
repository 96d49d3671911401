#ifndef CTAES_H
#define CTAES_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Entries written by [`ctaes_profile_mean_dev`]: 16 positions by 256 values.
 */
#define CTAES_PROFILE_CELLS (16 * 256)

typedef enum CtaesPath {
  CTAES_PATH_REFERENCE = 0,
  CTAES_PATH_TTABLE = 1,
  CTAES_PATH_MICRO = 2,
  CTAES_PATH_SCHEDULED = 3,
} CtaesPath;

typedef enum CtaesStatus {
  CTAES_STATUS_OK = 0,
  CTAES_STATUS_NULL_POINTER = 1,
  CTAES_STATUS_INVALID_ARGUMENT = 2,
  CTAES_STATUS_SCHEDULE_FAILED = 3,
  CTAES_STATUS_SIMULATION_FAILED = 4,
  CTAES_STATUS_EMPTY_PROFILE = 5,
  CTAES_STATUS_PANIC = 6,
} CtaesStatus;

/**
 * Accumulates (nonce, cycles) samples into a timing profile.
 */
typedef struct CtaesProfile CtaesProfile;

/**
 * A scheduled (or unscheduled) encryption program.
 */
typedef struct CtaesSchedule CtaesSchedule;

typedef struct CtaesScheduleStats {
  /**
   * Required load-use gap; 1 for the unscheduled program.
   */
  size_t depth;
  size_t slots;
  size_t nops;
  size_t memory_ops;
  /**
   * SIZE_MAX when the schedule has no loads.
   */
  size_t min_load_use_gap;
  bool gaps_verified;
} CtaesScheduleStats;

/**
 * Cycle latencies; must satisfy 1 <= exec <= hit < miss.
 */
typedef struct CtaesLatency {
  uint32_t exec;
  uint32_t hit;
  uint32_t miss;
} CtaesLatency;

typedef struct CtaesSpread {
  uint64_t min;
  uint64_t max;
  size_t patterns;
} CtaesSpread;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Encrypts one block. `depth` is only read for the scheduled path and must
 * be positive there.
 *
 * # Safety
 * `key` and `pt` must point to 16 readable bytes, `out` to 16 writable bytes.
 */
enum CtaesStatus ctaes_encrypt(enum CtaesPath path,
                               size_t depth,
                               const uint8_t *key,
                               const uint8_t *pt,
                               uint8_t *out);

/**
 * Schedules the full cipher for `depth`; depth 0 gives the unscheduled
 * program.
 *
 * # Safety
 * `out` must be a valid pointer; on success it receives a handle to free
 * with [`ctaes_schedule_free`].
 */
enum CtaesStatus ctaes_schedule_new(size_t depth, struct CtaesSchedule **out);

/**
 * # Safety
 * `s` must come from [`ctaes_schedule_new`] and not be used afterwards.
 */
void ctaes_schedule_free(struct CtaesSchedule *s);

/**
 * Gap statistics, verified against the schedule's own depth.
 *
 * # Safety
 * `s` must be a live handle and `out` a valid pointer.
 */
enum CtaesStatus ctaes_schedule_stats(const struct CtaesSchedule *s,
                                      struct CtaesScheduleStats *out);

/**
 * Cycle count for one hit/miss pattern: `misses[i]` non-zero marks the
 * i-th memory op as a miss. `len` must equal the memory-op count.
 *
 * # Safety
 * `misses` must point to `len` readable bytes; `s` and `cycles` must be valid.
 */
enum CtaesStatus ctaes_schedule_simulate(const struct CtaesSchedule *s,
                                         const uint8_t *misses,
                                         size_t len,
                                         struct CtaesLatency lm,
                                         uint64_t *cycles);

/**
 * Cycle range over the all-hit, all-miss and `samples` random patterns.
 *
 * # Safety
 * `s` must be a live handle and `out` a valid pointer.
 */
enum CtaesStatus ctaes_schedule_spread(const struct CtaesSchedule *s,
                                       struct CtaesLatency lm,
                                       size_t samples,
                                       uint64_t seed,
                                       struct CtaesSpread *out);

/**
 * # Safety
 * `out` must be a valid pointer; free the handle with [`ctaes_profile_free`].
 */
enum CtaesStatus ctaes_profile_new(struct CtaesProfile **out);

/**
 * # Safety
 * `p` must come from [`ctaes_profile_new`] and not be used afterwards.
 */
void ctaes_profile_free(struct CtaesProfile *p);

/**
 * Records one sample.
 *
 * # Safety
 * `p` must be a live handle and `nonce` must point to 16 readable bytes.
 */
enum CtaesStatus ctaes_profile_add(struct CtaesProfile *p, const uint8_t *nonce, uint64_t cycles);

/**
 * Writes the mean deviation of every (position, value) cell, position-major.
 *
 * # Safety
 * `p` must be a live handle and `out` must have room for
 * [`CTAES_PROFILE_CELLS`] doubles.
 */
enum CtaesStatus ctaes_profile_mean_dev(const struct CtaesProfile *p, double *out);

/**
 * Correlates a study profile (taken under `study_key`) with an attack
 * profile and keeps, per key byte, the guesses within `margin` standard
 * deviations of the best. Writes the 16 candidate-set sizes and the log2 of
 * their product.
 *
 * # Safety
 * `study` and `attack` must be live handles, `study_key` must point to 16
 * readable bytes, `sizes` to 16 writable `uint16_t` and `log2_size` to a
 * writable double.
 */
enum CtaesStatus ctaes_key_space(const struct CtaesProfile *study,
                                 const uint8_t *study_key,
                                 const struct CtaesProfile *attack,
                                 double margin,
                                 uint16_t *sizes,
                                 double *log2_size);

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the buffer size needed for the
 * whole message, including the terminator.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null with `len` 0.
 */
size_t ctaes_last_error(char *buf, size_t len);

/**
 * Static description of a status code.
 */
const char *ctaes_status_str(enum CtaesStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTAES_H */
