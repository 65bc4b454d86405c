#ifndef VANISHLAB_H
#define VANISHLAB_H

#include <stddef.h>
#include <stdint.h>

#define VL_OK 0

#define VL_ERR_DOMAIN 1

#define VL_ERR_INVALID_ARGUMENT 2

#define VL_ERR_UNSUPPORTED 3

#define VL_ERR_SHAPE 4

#define VL_ERR_STALE_CACHE 5

#define VL_ERR_SIZE_LIMIT 6

#define VL_ERR_CONFIG 7

#define VL_ERR_IO 8

#define VL_ERR_NULL_POINTER 9

#define VL_ERR_BUFFER_TOO_SMALL 10

#define VL_ERR_PANIC 11

#define VL_ACTIVATION_LINEAR 0

#define VL_ACTIVATION_RELU 1

// Scalar chain handle: weights plus dataset.
typedef struct VlChain VlChain;

// MLP handle: network plus the dataset it is evaluated on.
typedef struct VlMlp VlMlp;

// Initialisation scheme handle.
typedef struct VlScheme VlScheme;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread; empty after a success.
// Valid until the next library call on the same thread.
const char *vl_last_error(void);

// Library version as a static string.
const char *vl_version(void);

// Release a string returned by the library.
//
// # Safety
// `s` must come from this library or be null.
void vl_string_free(char *s);

// Parse a scheme such as `uniform:he` or `gaussian:var=0.25`.
//
// # Safety
// `spec` must be a NUL-terminated string; `result` must be writable.
int32_t vl_scheme_parse(const char *spec, struct VlScheme **result);

// # Safety
// `s` must come from [`vl_scheme_parse`] or be null.
void vl_scheme_free(struct VlScheme *s);

// Variance, fourth moment and kurtosis of the entry law at `fan_in`.
//
// # Safety
// `s` must be a live handle; the out-pointers must be writable.
int32_t vl_scheme_profile(const struct VlScheme *s,
                          size_t fan_in,
                          double *sigma2,
                          double *mu4,
                          double *kappa);

// Draw `count` iid entries at `fan_in` from the stream of `seed`.
//
// # Safety
// `s` must be a live handle; `buf` must hold `count` doubles.
int32_t vl_scheme_sample(const struct VlScheme *s,
                         size_t fan_in,
                         uint64_t seed,
                         double *buf,
                         size_t count);

// Chain with the given weights and `n` data pairs `(xs[i], ys[i])`.
//
// # Safety
// Arrays must hold the stated lengths; `result` must be writable.
int32_t vl_chain_new(const double *weights,
                     size_t depth,
                     const double *xs,
                     const double *ys,
                     size_t n,
                     struct VlChain **result);

// Chain with weights iid `U(-tau, tau)` from the stream of `seed` and the
// single data pair `(x, y)`.
//
// # Safety
// `result` must be writable.
int32_t vl_chain_sample(size_t depth,
                        double tau,
                        double x,
                        double y,
                        uint64_t seed,
                        struct VlChain **result);

// # Safety
// `c` must come from a chain constructor or be null.
void vl_chain_free(struct VlChain *c);

// # Safety
// `c` must be a live handle; `loss` must be writable.
int32_t vl_chain_loss(const struct VlChain *c, double *loss);

// Gradient into `buf` (at least `depth` doubles).
//
// # Safety
// `c` must be a live handle; `buf` must hold `len` doubles.
int32_t vl_chain_gradient(const struct VlChain *c, double *buf, size_t len);

// Hessian into `buf`, row-major (at least `depth * depth` doubles).
//
// # Safety
// `c` must be a live handle; `buf` must hold `len` doubles.
int32_t vl_chain_hessian(const struct VlChain *c, double *buf, size_t len);

// Random MLP of `depth` hidden `width x width` layers drawn with `scheme`,
// with `n` Gaussian inputs and teacher targets. Zero `d_in` or `d_out`
// means the width.
//
// # Safety
// `scheme` must be a live handle; `result` must be writable.
int32_t vl_mlp_random(size_t depth,
                      size_t width,
                      int32_t activation_code,
                      const struct VlScheme *scheme,
                      size_t n,
                      size_t d_in,
                      size_t d_out,
                      uint64_t seed,
                      struct VlMlp **result);

// # Safety
// `m` must come from [`vl_mlp_random`] or be null.
void vl_mlp_free(struct VlMlp *m);

// Number of hidden-layer parameters `L d^2`.
//
// # Safety
// `m` must be a live handle; `count` must be writable.
int32_t vl_mlp_num_params(const struct VlMlp *m, size_t *count);

// # Safety
// `m` must be a live handle; `loss` must be writable.
int32_t vl_mlp_loss(const struct VlMlp *m, double *loss);

// Gradient over the hidden layers, layer by layer, each row-major.
//
// # Safety
// `m` must be a live handle; `buf` must hold `len` doubles.
int32_t vl_mlp_gradient(const struct VlMlp *m, double *buf, size_t len);

// Analytic Hessian over the hidden layers, row-major, in the parameter
// order of [`vl_mlp_gradient`].
//
// # Safety
// `m` must be a live handle; `buf` must hold `len` doubles.
int32_t vl_mlp_hessian(struct VlMlp *m, double *buf, size_t len);

// `P(Erlang(shape, 1) <= xi)`.
//
// # Safety
// `value` must be writable.
int32_t vl_erlang_cdf(size_t shape, double xi, double *value);

// `E[v^order]` for the chain product `v` with weights `U(-tau, tau)`.
//
// # Safety
// `value` must be writable.
int32_t vl_chain_moment(double tau, size_t depth, uint32_t order, double *value);

// Bracket on the median of `|v|`.
//
// # Safety
// `lo` and `hi` must be writable.
int32_t vl_chain_median_bounds(double tau, size_t depth, double *lo, double *hi);

// Propagate `(E||x||^2, E||x||^4, E||x||_4^4)` through `k` layers.
// `state` holds three doubles on input and output.
//
// # Safety
// `state` must point to three writable doubles.
int32_t vl_forward_moments(double *state,
                           size_t d,
                           double sigma2,
                           double kappa,
                           double p,
                           size_t k);

// Smallest width whose median squared gain stays within `1 +- alpha`.
//
// # Safety
// `width` must be writable.
int32_t vl_min_width_for_median(double alpha, size_t depth, uint64_t *width);

// Upper bound on the symmetric chain flow at time `t`.
//
// # Safety
// `value` must be writable.
int32_t vl_gradient_flow_bound(double w0, size_t depth, double y, double t, double *value);

// Run a JSON experiment spec with `threads` workers (0: default) and return
// its CSV (or JSON for `predict`) in `result`, to be released with
// [`vl_string_free`]. Nothing is written to disk. For `verify`, `passed`
// receives 1 if every check passed and 0 otherwise; it may be null.
//
// # Safety
// `spec_json` must be a NUL-terminated string; `result` must be writable.
int32_t vl_run_spec(const char *spec_json, size_t threads, char **result, int32_t *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VANISHLAB_H */
