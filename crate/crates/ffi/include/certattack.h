#ifndef CERTATTACK_H
#define CERTATTACK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CaStatus {
  CaStatus_Ok = 0,
  CaStatus_NullPointer = 1,
  CaStatus_InvalidArgument = 2,
  CaStatus_ShapeMismatch = 3,
  CaStatus_DomainViolation = 4,
  CaStatus_NonFinite = 5,
  CaStatus_Io = 6,
  CaStatus_Format = 7,
  CaStatus_BufferTooSmall = 8,
  CaStatus_Panic = 9,
  CaStatus_Internal = 10,
} CaStatus;

/*
 Opaque model handle.
 */
typedef struct CaModel CaModel;

/*
 Noise level, sample count, confidence and seed of a smoothed classifier.
 */
typedef struct CaSmoothingParams {
  double sigma;
  uint32_t n_samples;
  double alpha;
  uint64_t seed;
} CaSmoothingParams;

typedef struct CaVerdict {
  uint32_t class_index;
  double radius;
} CaVerdict;

typedef struct CaCaaParams {
  double eps_min;
  double eps_max;
  double delta_grow;
  double delta_shrink;
  uint32_t max_iters;
  uint32_t max_confirm;
  /*
   Judge sample count as a multiple of the attacker's.
   */
  uint32_t judge_factor;
  uint64_t seed;
} CaCaaParams;

typedef struct CaAttackOutcome {
  bool success;
  bool confident;
  uint32_t original_class;
  /*
   Meaningless unless `success`.
   */
  uint32_t adv_class;
  double clean_radius;
  double adv_radius;
  double norm;
  uint32_t iterations;
} CaAttackOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *ca_version(void);

/*
 Copies the last error message of this thread into `buf` (NUL-terminated,
 truncated to `len`). Returns the full message length, 0 when there is none.

 # Safety
 `buf` must be null or point to `len` writable bytes.
 */
size_t ca_last_error(char *buf, size_t len);

/*
 Loads a JSON checkpoint from `path`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CaStatus ca_model_load(const char *path, struct CaModel **out);

/*
 Parses a JSON checkpoint held in memory.

 # Safety
 `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CaStatus ca_model_from_json(const char *json, struct CaModel **out);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must come from this library and not be used afterwards.
 */
void ca_model_free(struct CaModel *model);

/*
 # Safety
 `model` must be null or a live handle.
 */
size_t ca_model_input_dim(const struct CaModel *model);

/*
 # Safety
 `model` must be null or a live handle.
 */
size_t ca_model_num_classes(const struct CaModel *model);

/*
 Base classifier prediction at `x` (`len` values in `[0,1]`).

 # Safety
 Pointers must be valid; `x` must hold `len` values.
 */
enum CaStatus ca_predict(const struct CaModel *model,
                         const double *x,
                         size_t len,
                         uint32_t *out_class);

/*
 Smoothed prediction and certified ℓ2 radius at `x`. Radius 0 means the
 smoothed classifier abstains.

 # Safety
 Pointers must be valid; `x` must hold `len` values.
 */
enum CaStatus ca_certify(const struct CaModel *model,
                         const double *x,
                         size_t len,
                         const struct CaSmoothingParams *params,
                         struct CaVerdict *out);

/*
 Largest ℓ∞ radius verified by interval bound propagation, to within `tol`.

 # Safety
 Pointers must be valid; `x` must hold `len` values.
 */
enum CaStatus ca_ibp_radius(const struct CaModel *model,
                            const double *x,
                            size_t len,
                            double tol,
                            double *out_radius);

/*
 Runs the certification-aware attack against the smoothed model. On
 success the adversarial point is written to `x_adv` when it is non-null
 (`x_adv_len` must then equal the input dimension).

 # Safety
 Pointers must be valid; `x` must hold `len` values and `x_adv`, when
 non-null, `x_adv_len` writable values.
 */
enum CaStatus ca_caa_attack(const struct CaModel *model,
                            const double *x,
                            size_t len,
                            const struct CaSmoothingParams *smoothing_params,
                            const struct CaCaaParams *attack_params,
                            struct CaAttackOutcome *out,
                            double *x_adv,
                            size_t x_adv_len);

/*
 IBP-certified class at `x` together with its ℓ∞ radius.

 # Safety
 Pointers must be valid; `x` must hold `len` values.
 */
enum CaStatus ca_ibp_certify(const struct CaModel *model,
                             const double *x,
                             size_t len,
                             double tol,
                             struct CaVerdict *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CERTATTACK_H */
