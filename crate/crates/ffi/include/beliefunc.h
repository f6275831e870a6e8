#ifndef BELIEFUNC_H
#define BELIEFUNC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum BuStatus {
  BU_STATUS_OK = 0,
  BU_STATUS_NULL_POINTER = 1,
  BU_STATUS_INVALID_UTF8 = 2,
  // Bad distribution, dimension, index or configuration.
  BU_STATUS_INVALID_ARGUMENT = 3,
  BU_STATUS_MISSING_ARTIFACT = 4,
  // Checksum, fingerprint or format problem in a stored artifact.
  BU_STATUS_CORRUPT_ARTIFACT = 5,
  BU_STATUS_MODE_UNSUPPORTED = 6,
  BU_STATUS_IO = 7,
  BU_STATUS_BUFFER_TOO_SMALL = 8,
  // A Rust panic was caught at the boundary.
  BU_STATUS_PANIC = 9,
  BU_STATUS_OTHER = 10,
} BuStatus;

// Which trained tracker a handle wraps.
typedef enum BuTrackerKind {
  BU_TRACKER_KIND_SINGLE = 0,
  BU_TRACKER_KIND_ENSEMBLE = 1,
  BU_TRACKER_KIND_END = 2,
  BU_TRACKER_KIND_END2 = 3,
} BuTrackerKind;

// Turn history of one dialogue; borrows nothing, but must only be used
// with the tracker that created it.
typedef struct BuSession BuSession;

// A world plus a loaded tracker.
typedef struct BuTracker BuTracker;

// Total / data / knowledge uncertainty in nats.
typedef struct BuUncertainty {
  double total;
  double data;
  double knowledge;
} BuUncertainty;

// Per-slot belief after a turn. `knowledge` is NaN unless the tracker
// outputs Dirichlet parameters.
typedef struct BuSlotBelief {
  uint32_t value;
  double confidence;
  double total;
  double knowledge;
} BuSlotBelief;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *bu_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *bu_version(void);

// Shannon entropy (nats) of a probability vector.
//
// # Safety
// `probs` must point to `k` readable doubles; `out` must be writable.
enum BuStatus bu_categorical_entropy(const double *probs, size_t k, double *out);

// Uncertainty decomposition of a Dirichlet with concentrations `alphas`.
//
// # Safety
// `alphas` must point to `k` readable doubles; `out` must be writable.
enum BuStatus bu_dirichlet_uncertainty(const double *alphas, size_t k, struct BuUncertainty *out);

// Opens the tracker trained in a run directory. `config_path` may be null,
// in which case the `config.json` recorded in `out_dir` (or the defaults)
// applies; a null `out_dir` means the config's `out`.
//
// # Safety
// String arguments must be null or NUL-terminated; `out` must be writable.
enum BuStatus bu_tracker_open(const char *config_path,
                              const char *out_dir,
                              enum BuTrackerKind kind,
                              struct BuTracker **out);

// # Safety
// `tracker` must be null or come from [`bu_tracker_open`], freed once.
void bu_tracker_free(struct BuTracker *tracker);

// Number of informable slots (the length of every belief array).
//
// # Safety
// `tracker` must be a live handle or null (returns 0).
size_t bu_tracker_num_slots(const struct BuTracker *tracker);

// Writes the name of `slot` (`domain.slot`) into `buf`, NUL
// included. `needed` (optional) receives the required size.
//
// # Safety
// `buf` must hold `len` bytes; `needed` may be null.
enum BuStatus bu_tracker_slot_name(const struct BuTracker *tracker,
                                   size_t slot,
                                   char *buf,
                                   size_t len,
                                   size_t *needed);

// Starts an empty dialogue for `tracker`.
//
// # Safety
// `tracker` must be live; `out` writable.
enum BuStatus bu_session_new(const struct BuTracker *tracker, struct BuSession **out);

// # Safety
// `session` must be null or come from [`bu_session_new`], freed once.
void bu_session_free(struct BuSession *session);

// Feeds one exchange (the system utterance that preceded the user, which
// may be empty, then the user utterance) and writes the belief for every
// slot into `out[0..n]`. Words are whitespace-separated; unknown words map
// to the unknown token.
//
// # Safety
// `tracker` and `session` must be live and paired; `out` must hold `n`
// entries.
enum BuStatus bu_session_step(const struct BuTracker *tracker,
                              struct BuSession *session,
                              const char *system,
                              const char *user,
                              struct BuSlotBelief *out,
                              size_t n);

// Number of turns fed so far.
//
// # Safety
// `session` must be live or null (returns 0).
size_t bu_session_turns(const struct BuSession *session);

// Forgets every turn.
//
// # Safety
// `session` must be live or null (no-op).
void bu_session_reset(struct BuSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BELIEFUNC_H */
