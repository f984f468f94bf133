#ifndef IRMASK_H
#define IRMASK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IrmaskStatus {
  IRMASK_STATUS_OK = 0,
  IRMASK_STATUS_NULL_POINTER = 1,
  IRMASK_STATUS_INVALID_ARGUMENT = 2,
  IRMASK_STATUS_IMAGE = 3,
  IRMASK_STATUS_ORACLE = 4,
  IRMASK_STATUS_ATTACK = 5,
  IRMASK_STATUS_BUFFER_TOO_SMALL = 6,
  IRMASK_STATUS_PANIC = 99,
} IrmaskStatus;

/*
 A spot layout.
 */
typedef struct IrmaskConfig IrmaskConfig;

/*
 An RGB image with values nominally in `[0, 1]`.
 */
typedef struct IrmaskImage IrmaskImage;

/*
 An embedding oracle connection.
 */
typedef struct IrmaskOracle IrmaskOracle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failing call on this thread; empty after a success.
 Valid until the next call on the same thread.
 */
const char *irmask_last_error(void);

/*
 Release a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void irmask_string_free(char *s);

/*
 Build an image from `height * width * 3` row-major RGB doubles.

 # Safety
 `data` must point to `len` readable doubles.
 */
enum IrmaskStatus irmask_image_new(size_t height,
                                   size_t width,
                                   const double *data,
                                   size_t len,
                                   struct IrmaskImage **out_image);

/*
 Load a PNG or binary PPM file.

 # Safety
 `path` must be a NUL-terminated string.
 */
enum IrmaskStatus irmask_image_load(const char *path, struct IrmaskImage **out_image);

/*
 Write the image clamped to `[0, 1]`; the format follows the extension.

 # Safety
 `image` must be a live handle and `path` a NUL-terminated string.
 */
enum IrmaskStatus irmask_image_save(const struct IrmaskImage *image, const char *path);

/*
 # Safety
 `image` must be a live handle; the out pointers must be writable.
 */
enum IrmaskStatus irmask_image_size(const struct IrmaskImage *image,
                                    size_t *out_height,
                                    size_t *out_width);

/*
 Copy the pixels into `buffer`, which must hold `height * width * 3` doubles.

 # Safety
 `buffer` must point to `capacity` writable doubles.
 */
enum IrmaskStatus irmask_image_pixels(const struct IrmaskImage *image,
                                      double *buffer,
                                      size_t capacity);

/*
 # Safety
 `image` must come from this library and not have been freed. Null is ignored.
 */
void irmask_image_free(struct IrmaskImage *image);

/*
 Parse a layout from the spot-model JSON format.

 # Safety
 `json` must be a NUL-terminated string.
 */
enum IrmaskStatus irmask_config_from_json(const char *json, struct IrmaskConfig **out_config);

/*
 Serialize a layout; free the result with [`irmask_string_free`].

 # Safety
 `config` must be a live handle.
 */
enum IrmaskStatus irmask_config_to_json(const struct IrmaskConfig *config, char **out_json);

/*
 # Safety
 `config` must come from this library and not have been freed. Null is ignored.
 */
void irmask_config_free(struct IrmaskConfig *config);

/*
 Render `config` onto `base`. The result is not clamped.

 # Safety
 Handles must be live.
 */
enum IrmaskStatus irmask_synthesize(const struct IrmaskImage *base,
                                    const struct IrmaskConfig *config,
                                    struct IrmaskImage **out_image);

/*
 The built-in reference embedding.

 # Safety
 `out_oracle` must be writable.
 */
enum IrmaskStatus irmask_oracle_reference(struct IrmaskOracle **out_oracle);

/*
 Connect to `reference`, an `http(s)://` base URL, or a command speaking
 the line protocol (optionally prefixed with `cmd:`).

 # Safety
 `selector` must be a NUL-terminated string.
 */
enum IrmaskStatus irmask_oracle_connect(const char *selector,
                                        double timeout_secs,
                                        struct IrmaskOracle **out_oracle);

/*
 # Safety
 `oracle` must come from this library and not have been freed. Null is ignored.
 */
void irmask_oracle_free(struct IrmaskOracle *oracle);

/*
 Embed the clamped image. `out_len` always receives the embedding length;
 the values are written only if `capacity` suffices.

 # Safety
 `buffer` must point to `capacity` writable doubles, or be null with
 `capacity` 0 to query the length.
 */
enum IrmaskStatus irmask_embed(const struct IrmaskOracle *oracle,
                               const struct IrmaskImage *image,
                               double *buffer,
                               size_t capacity,
                               size_t *out_len);

/*
 Squared L2 distance between the embeddings of two clamped images.

 # Safety
 Handles must be live and `out_distance` writable.
 */
enum IrmaskStatus irmask_distance(const struct IrmaskOracle *oracle,
                                  const struct IrmaskImage *a,
                                  const struct IrmaskImage *b,
                                  double *out_distance);

/*
 Search a layout that makes `attacker` embed like `victim`.
 `attack_json` holds attack settings (any subset, others default) or is
 null for all defaults. The result JSON is written to `out_result_json`
 whether or not an example was found; check its `success` field.

 # Safety
 Handles must be live; `attack_json` is null or NUL-terminated.
 */
enum IrmaskStatus irmask_run_attack(const struct IrmaskOracle *oracle,
                                    const struct IrmaskImage *attacker,
                                    const struct IrmaskImage *victim,
                                    const char *attack_json,
                                    char **out_result_json);

/*
 Irradiance of an LED of electrical power `p_led` and efficiency `eta`
 at distance `r`.

 # Safety
 `out_value` must be writable.
 */
enum IrmaskStatus irmask_radiometry(double p_led, double eta, double r, double *out_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IRMASK_H */
