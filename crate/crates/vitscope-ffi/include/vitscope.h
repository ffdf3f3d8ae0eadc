#ifndef VITSCOPE_H
#define VITSCOPE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirroring the library's error categories (and the CLI's
 * exit codes for the shared ones).
 */
typedef enum {
  VS_STATUS_OK = 0,
  VS_STATUS_NULL_POINTER = 1,
  VS_STATUS_INVALID_ARGUMENT = 2,
  VS_STATUS_BAD_INPUT = 3,
  VS_STATUS_INTERNAL = 4,
} VsStatus;

typedef struct VsConfig VsConfig;

typedef struct VsTrace VsTrace;

typedef struct VsWeights VsWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *vs_last_error(void);

/**
 * Fresh configuration with the ViT-B/16 defaults (224 input, 16 patches,
 * 768 dims, 12 layers, 12 heads).
 */
VsConfig *vs_config_new(void);

/**
 * # Safety
 * `config` must be a pointer returned by [`vs_config_new`], freed once.
 */
void vs_config_free(VsConfig *config);

/**
 * Override the model geometry; normalization constants reset to 0.5.
 *
 * # Safety
 * `config` must be a live [`vs_config_new`] pointer.
 */
VsStatus vs_config_set_geometry(VsConfig *config,
                                uintptr_t image_side,
                                uintptr_t patch_side,
                                uintptr_t channels,
                                uintptr_t embed_dim,
                                uintptr_t layers,
                                uintptr_t heads,
                                uintptr_t mlp_dim);

/**
 * Select the erf GELU instead of the tanh approximation.
 *
 * # Safety
 * `config` must be a live [`vs_config_new`] pointer.
 */
VsStatus vs_config_set_gelu_exact(VsConfig *config, bool exact);

/**
 * Load a weight archive and validate it against the configuration.
 * On success `*out` owns the weights.
 *
 * # Safety
 * `path` is a NUL-terminated string, `config` a live config handle, and
 * `out` a valid location for one pointer.
 */
VsStatus vs_weights_load(const char *path, const VsConfig *config, VsWeights **out);

/**
 * # Safety
 * `weights` must come from [`vs_weights_load`], freed once.
 */
void vs_weights_free(VsWeights *weights);

/**
 * Run the forward pass on an image file (PNG or binary PPM), capturing
 * all block outputs and head-averaged attention matrices.
 *
 * # Safety
 * All pointers must be live handles / NUL-terminated strings; `out`
 * receives an owned pointer on success.
 */
VsStatus vs_trace_image(const VsWeights *weights,
                        const VsConfig *config,
                        const char *image_path,
                        VsTrace **out);

/**
 * # Safety
 * `trace` must come from [`vs_trace_image`], freed once.
 */
void vs_trace_free(VsTrace *trace);

/**
 * Number of attention layers in the trace.
 *
 * # Safety
 * `trace` must be a live trace handle (null yields 0).
 */
uintptr_t vs_trace_layers(const VsTrace *trace);

/**
 * Token count (patches + class token).
 *
 * # Safety
 * `trace` must be a live trace handle (null yields 0).
 */
uintptr_t vs_trace_tokens(const VsTrace *trace);

/**
 * Embedding dimension.
 *
 * # Safety
 * `trace` must be a live trace handle (null yields 0).
 */
uintptr_t vs_trace_dim(const VsTrace *trace);

/**
 * Copy one layer's embedding matrix (layer 0 = the patch embeddings,
 * layer `l` = block-l output) into `out`, row-major `tokens * dim`
 * floats.
 *
 * # Safety
 * `trace` live handle; `out` points at `len` writable floats.
 */
VsStatus vs_trace_embeddings(const VsTrace *trace, uintptr_t layer, float *out, uintptr_t len);

/**
 * Copy one layer's head-averaged attention (`tokens * tokens` floats,
 * row = query token).
 *
 * # Safety
 * `trace` live handle; `out` points at `len` writable floats.
 */
VsStatus vs_trace_attention(const VsTrace *trace, uintptr_t layer, float *out, uintptr_t len);

/**
 * Classifier logit count; 0 when the archive carries no head.
 *
 * # Safety
 * `trace` must be a live trace handle (null yields 0).
 */
uintptr_t vs_trace_logit_count(const VsTrace *trace);

/**
 * Copy the classifier logits.
 *
 * # Safety
 * `trace` live handle; `out` points at `len` writable floats.
 */
VsStatus vs_trace_logits(const VsTrace *trace, float *out, uintptr_t len);

/**
 * Render the visualization of (layer, token, filter) from a trace to a
 * PNG file. `layer` must be >= 1 (deep visualization); token 0 is the
 * class token; `filter` is 1-based.
 *
 * # Safety
 * All handles live; `out_png` a NUL-terminated path.
 */
VsStatus vs_render_visualization(const VsWeights *weights,
                                 const VsTrace *trace,
                                 uintptr_t layer,
                                 uintptr_t token,
                                 uintptr_t filter,
                                 const char *out_png);

/**
 * Randomized diameter-contraction check of the simplified attention
 * dynamics. Writes the violation count and the largest observed
 * `d_after / d_before` ratio.
 *
 * # Safety
 * `out_violations` and `out_max_ratio` must each point at one writable
 * value (either may be null to skip it).
 */
VsStatus vs_verify_contraction(uintptr_t trials,
                               uintptr_t max_tokens,
                               uintptr_t max_dim,
                               uint64_t seed,
                               uint64_t *out_violations,
                               double *out_max_ratio);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VITSCOPE_H */
