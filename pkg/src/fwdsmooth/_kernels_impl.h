/* Fused backward-kernel application for Gaussian autoregressive transitions.
 *
 * Row i of the output is sum_j b_ij F[:, j] with
 *   b_ij ∝ exp(lw[j] - h (x[i] - m[j])^2).
 * The exponent is shifted by max_j lw[j], which bounds every term from above;
 * rows whose shifted sum underflows are redone with the exact row maximum.
 * Internally the shifted weights a[j] = lw[j] - max lw are passed around and
 * the shift is added back to log_den.
 * log_den[i] receives log sum_j exp(lw[j] - h (x[i] - m[j])^2).
 */
#ifndef FWDSMOOTH_KERNELS_IMPL_H
#define FWDSMOOTH_KERNELS_IMPL_H

#include <math.h>
#include <stddef.h>
#include <stdlib.h>

#define FS_UNDERFLOW 1e-280

static void fs_row_exact(ptrdiff_t np, const double *lw, const double *m, double xi,
                         double h, ptrdiff_t q, const double *F, double *out, double *log_den)
{
    double mx = -1.7976931348623157e308, s = 0.0;
    ptrdiff_t j, r;
    for (j = 0; j < np; j++) {
        double d = xi - m[j];
        double v = lw[j] - h * d * d;
        mx = v > mx ? v : mx;
    }
    for (r = 0; r < q; r++) out[r] = 0.0;
    for (j = 0; j < np; j++) {
        double d = xi - m[j];
        double e = exp(lw[j] - h * d * d - mx);
        s += e;
        for (r = 0; r < q; r++) out[r] += e * F[r * np + j];
    }
    for (r = 0; r < q; r++) out[r] /= s;
    *log_den = mx + log(s);
}

#define FS_ROWS 4

/* Rows are processed FS_ROWS at a time so that each load of the previous-time
 * arrays feeds several exponentials. */
#define FS_FUSED(Q)                                                              \
static void fs_apply_q##Q(ptrdiff_t np, ptrdiff_t nc, const double *a,           \
                          double lwmax, const double *m, const double *x,        \
                          double h, const double *F, double *out,                \
                          double *log_den)                                       \
{                                                                                \
    ptrdiff_t i0, i, j, r, b;                                                    \
    for (i0 = 0; i0 + FS_ROWS <= nc; i0 += FS_ROWS) {                            \
        double xi[FS_ROWS], s[FS_ROWS], acc[FS_ROWS][Q];                         \
        for (b = 0; b < FS_ROWS; b++) {                                          \
            xi[b] = x[i0 + b];                                                   \
            s[b] = 0.0;                                                          \
            for (r = 0; r < Q; r++) acc[b][r] = 0.0;                             \
        }                                                                        \
        for (j = 0; j < np; j++) {                                               \
            double aj = a[j], mj = m[j], fj[Q];                                  \
            for (r = 0; r < Q; r++) fj[r] = F[r * np + j];                       \
            for (b = 0; b < FS_ROWS; b++) {                                      \
                double d = xi[b] - mj;                                           \
                double e = exp(aj - h * d * d);                                  \
                s[b] += e;                                                       \
                for (r = 0; r < Q; r++) acc[b][r] += e * fj[r];                  \
            }                                                                    \
        }                                                                        \
        for (b = 0; b < FS_ROWS; b++) {                                          \
            i = i0 + b;                                                          \
            if (s[b] < FS_UNDERFLOW) {                                           \
                fs_row_exact(np, a, m, xi[b], h, Q, F, out + i * Q, log_den + i);\
                log_den[i] += lwmax;                                             \
                continue;                                                        \
            }                                                                    \
            for (r = 0; r < Q; r++) out[i * Q + r] = acc[b][r] / s[b];           \
            log_den[i] = lwmax + log(s[b]);                                      \
        }                                                                        \
    }                                                                            \
    for (i = i0; i < nc; i++) {                                                  \
        double xv = x[i], sv = 0.0, av[Q];                                       \
        for (r = 0; r < Q; r++) av[r] = 0.0;                                     \
        for (j = 0; j < np; j++) {                                               \
            double d = xv - m[j];                                                \
            double e = exp(a[j] - h * d * d);                                    \
            sv += e;                                                             \
            for (r = 0; r < Q; r++) av[r] += e * F[r * np + j];                  \
        }                                                                        \
        if (sv < FS_UNDERFLOW) {                                                 \
            fs_row_exact(np, a, m, xv, h, Q, F, out + i * Q, log_den + i);       \
            log_den[i] += lwmax;                                                 \
            continue;                                                            \
        }                                                                        \
        for (r = 0; r < Q; r++) out[i * Q + r] = av[r] / sv;                     \
        log_den[i] = lwmax + log(sv);                                            \
    }                                                                            \
}

FS_FUSED(1)
FS_FUSED(2)
FS_FUSED(3)
FS_FUSED(4)
FS_FUSED(5)
FS_FUSED(6)
FS_FUSED(7)
FS_FUSED(8)

static void fs_apply_generic(ptrdiff_t np, ptrdiff_t nc, const double *a,
                             double lwmax, const double *m, const double *x, double h,
                             ptrdiff_t q, const double *F, double *out, double *log_den)
{
    ptrdiff_t i;
    for (i = 0; i < nc; i++) {
        fs_row_exact(np, a, m, x[i], h, q, F, out + i * q, log_den + i);
        log_den[i] += lwmax;
    }
}

/* Returns 0 on success, -1 if the scratch buffer cannot be allocated. */
static int fs_gauss_backward_apply(ptrdiff_t np, ptrdiff_t nc, const double *lw,
                                   const double *m, const double *x, double sigma,
                                   ptrdiff_t q, const double *F, double *out,
                                   double *log_den)
{
    double h = 0.5 / (sigma * sigma);
    double lwmax = -1.7976931348623157e308;
    double *a;
    ptrdiff_t j;
    for (j = 0; j < np; j++) lwmax = lw[j] > lwmax ? lw[j] : lwmax;
    a = (double *)malloc((size_t)(np > 0 ? np : 1) * sizeof(double));
    if (a == NULL) return -1;
    for (j = 0; j < np; j++) a[j] = lw[j] - lwmax;
    switch (q) {
    case 1: fs_apply_q1(np, nc, a, lwmax, m, x, h, F, out, log_den); break;
    case 2: fs_apply_q2(np, nc, a, lwmax, m, x, h, F, out, log_den); break;
    case 3: fs_apply_q3(np, nc, a, lwmax, m, x, h, F, out, log_den); break;
    case 4: fs_apply_q4(np, nc, a, lwmax, m, x, h, F, out, log_den); break;
    case 5: fs_apply_q5(np, nc, a, lwmax, m, x, h, F, out, log_den); break;
    case 6: fs_apply_q6(np, nc, a, lwmax, m, x, h, F, out, log_den); break;
    case 7: fs_apply_q7(np, nc, a, lwmax, m, x, h, F, out, log_den); break;
    case 8: fs_apply_q8(np, nc, a, lwmax, m, x, h, F, out, log_den); break;
    default: fs_apply_generic(np, nc, a, lwmax, m, x, h, q, F, out, log_den);
    }
    free(a);
    return 0;
}

#endif
