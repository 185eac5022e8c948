#ifndef DICE_OOD_H
#define DICE_OOD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum DiceStatus {
  DICE_STATUS_OK = 0,
  DICE_STATUS_NULL_POINTER = 1,
  DICE_STATUS_IO = 2,
  DICE_STATUS_FORMAT = 3,
  DICE_STATUS_DATA = 4,
  DICE_STATUS_SHAPE = 5,
  DICE_STATUS_DOMAIN = 6,
  DICE_STATUS_NUMERICAL = 7,
  DICE_STATUS_CONFIG = 8,
  DICE_STATUS_TRAINING = 9,
  DICE_STATUS_PANIC = 10,
} DiceStatus;

typedef enum DiceScoreKind {
  DICE_SCORE_KIND_ENERGY = 0,
  DICE_SCORE_KIND_MSP = 1,
} DiceScoreKind;

// Final linear layer (`W` is units × classes, plus a bias per class).
typedef struct DiceLayer DiceLayer;

// Binary keep/drop selection over the layer's weights.
typedef struct DiceMask DiceMask;

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next call into the library from the same thread.
const char *dice_last_error(void);

// Builds a layer from a row-major `units × classes` weight array and a
// `classes`-long bias.
//
// # Safety
// `weight` must hold `units * classes` floats, `bias` `classes` floats.
enum DiceStatus dice_layer_new(const float *weight,
                               size_t units,
                               size_t classes,
                               const float *bias,
                               struct DiceLayer **out);

// Reads `W` and `b` from a bundle directory.
//
// # Safety
// `dir` must be a nul-terminated path.
enum DiceStatus dice_layer_load(const char *dir, struct DiceLayer **out);

// # Safety
// `layer` must be null or come from `dice_layer_new`/`dice_layer_load`,
// and not be used afterwards.
void dice_layer_free(struct DiceLayer *layer);

// # Safety
// `layer` must be a live handle.
enum DiceStatus dice_layer_shape(const struct DiceLayer *layer, size_t *units, size_t *classes);

// Keeps the `round((1 − p)·units·classes)` weights with the largest mean
// contribution over `rows` calibration samples (row-major, `units` wide).
//
// # Safety
// `layer` must be a live handle; `features` must hold `rows * units` floats.
enum DiceStatus dice_mask_fit(const struct DiceLayer *layer,
                              const float *features,
                              size_t rows,
                              double p,
                              struct DiceMask **out);

// # Safety
// `mask` must be null or come from `dice_mask_fit`, and not be used
// afterwards.
void dice_mask_free(struct DiceMask *mask);

// # Safety
// `mask` must be a live handle.
enum DiceStatus dice_mask_popcount(const struct DiceMask *mask, size_t *out);

// Copies the mask as `units × classes` bytes (1 = kept), row-major.
//
// # Safety
// `mask` must be a live handle; `out` must hold `len` bytes.
enum DiceStatus dice_mask_copy(const struct DiceMask *mask, uint8_t *out, size_t len);

// Logits for `rows` samples into `out` (`rows × classes` doubles). A null
// `mask` gives the dense layer.
//
// # Safety
// `layer` must be live, `mask` null or live, `features` `rows * units`
// floats, `out` `rows * classes` doubles.
enum DiceStatus dice_forward(const struct DiceLayer *layer,
                             const struct DiceMask *mask,
                             const float *features,
                             size_t rows,
                             double *out);

// One score per sample into `out` (`rows` doubles); higher means more
// in-distribution. `kind` is a [`DiceScoreKind`] value.
//
// # Safety
// Same as [`dice_forward`], with `out` holding `rows` doubles.
enum DiceStatus dice_score(const struct DiceLayer *layer,
                           const struct DiceMask *mask,
                           uint32_t kind,
                           const float *features,
                           size_t rows,
                           double *out);

// # Safety
// `id` and `ood` must hold `n_id` and `n_ood` doubles.
enum DiceStatus dice_auroc(const double *id,
                           size_t n_id,
                           const double *ood,
                           size_t n_ood,
                           double *out);

// False-positive rate at the threshold that accepts `tpr` of the ID
// scores, and that threshold.
//
// # Safety
// `id` and `ood` must hold `n_id` and `n_ood` doubles.
enum DiceStatus dice_fpr_at_tpr(const double *id,
                                size_t n_id,
                                const double *ood,
                                size_t n_ood,
                                double tpr,
                                double *fpr,
                                double *threshold);

#endif  /* DICE_OOD_H */
