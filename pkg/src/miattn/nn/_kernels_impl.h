/* Direct valid convolution (stride 1) and 2x2 max pooling on NCHW doubles. */
#ifndef MIATTN_KERNELS_IMPL_H
#define MIATTN_KERNELS_IMPL_H

#include <math.h>
#include <stdint.h>
#include <string.h>

/* The backward kernel gains from 256-bit FMA; clone it and let the loader
   pick the widest variant the CPU supports. The forward kernel is faster
   with the baseline instruction set and is left alone. */
#if defined(__GNUC__) && !defined(__clang__) && defined(__x86_64__) && defined(__linux__)
#define MI_WIDE_CLONES __attribute__((target_clones("avx2", "default")))
#else
#define MI_WIDE_CLONES
#endif

static inline void mi_axpy(int n, double a, const double *restrict x, double *restrict y)
{
    for (int j = 0; j < n; ++j)
        y[j] += a * x[j];
}

static inline void mi_mul_acc(int n, const double *restrict a, const double *restrict b, double *restrict acc)
{
    for (int j = 0; j < n; ++j)
        acc[j] += a[j] * b[j];
}

#define MI_CHUNK 8

/* One output row: y[j] = sum over (c, ki, kj) of w * x[c, row + ki, j + kj].
   Columns are processed in blocks of MI_CHUNK so the partial sums stay in
   registers and each multiply-add needs a single load. */
static inline void mi_conv_row(const double *x, const double *wo, double *yrow,
                        int row, int C, int H, int W, int K, int Wo)
{
    int j0 = 0;
    for (; j0 + MI_CHUNK <= Wo; j0 += MI_CHUNK) {
        double acc[MI_CHUNK] = {0};
        for (int c = 0; c < C; ++c)
            for (int ki = 0; ki < K; ++ki) {
                const double *xr = x + ((size_t)c * H + row + ki) * W + j0;
                const double *wr = wo + ((size_t)c * K + ki) * K;
                for (int kj = 0; kj < K; ++kj) {
                    const double wv = wr[kj];
                    for (int t = 0; t < MI_CHUNK; ++t)
                        acc[t] += wv * xr[kj + t];
                }
            }
        memcpy(yrow + j0, acc, sizeof acc);
    }
    for (int j = j0; j < Wo; ++j) {
        double s = 0.0;
        for (int c = 0; c < C; ++c)
            for (int ki = 0; ki < K; ++ki) {
                const double *xr = x + ((size_t)c * H + row + ki) * W + j;
                const double *wr = wo + ((size_t)c * K + ki) * K;
                for (int kj = 0; kj < K; ++kj)
                    s += wr[kj] * xr[kj];
            }
        yrow[j] = s;
    }
}

static void mi_conv2d_fwd(const double *x, const double *w, double *y,
                          int N, int C, int H, int W, int O, int K)
{
    const int Ho = H - K + 1, Wo = W - K + 1;
    for (int n = 0; n < N; ++n) {
        const double *xn = x + (size_t)n * C * H * W;
        for (int o = 0; o < O; ++o) {
            double *yo = y + ((size_t)n * O + o) * Ho * Wo;
            const double *wo = w + (size_t)o * C * K * K;
            /* a literal kernel width lets the compiler unroll the tap loops */
            if (K == 3)
                for (int i = 0; i < Ho; ++i)
                    mi_conv_row(xn, wo, yo + (size_t)i * Wo, i, C, H, W, 3, Wo);
            else
                for (int i = 0; i < Ho; ++i)
                    mi_conv_row(xn, wo, yo + (size_t)i * Wo, i, C, H, W, K, Wo);
        }
    }
}

/* Sum over j of a[j] * b[j]; the pragma lets the compiler split the
   reduction across SIMD lanes (fixed order, so results are reproducible). */
static inline double mi_dot(int n, const double *restrict a, const double *restrict b)
{
    double s = 0.0;
#pragma omp simd reduction(+:s)
    for (int j = 0; j < n; ++j)
        s += a[j] * b[j];
    return s;
}

/* Generic kernel size. gx may be NULL when the input gradient is not needed. */
static inline void mi_conv2d_bwd_body(const double *x, const double *w, const double *gy,
                                      double *gx, double *gw,
                                      int N, int C, int H, int W, int O, int K)
{
    const int Ho = H - K + 1, Wo = W - K + 1;
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
            const double *go = gy + ((size_t)n * O + o) * Ho * Wo;
            for (int c = 0; c < C; ++c) {
                const double *xc = x + ((size_t)n * C + c) * H * W;
                double *gxc = gx ? gx + ((size_t)n * C + c) * H * W : NULL;
                const double *wk = w + ((size_t)o * C + c) * K * K;
                double *gwk = gw + ((size_t)o * C + c) * K * K;
                for (int ki = 0; ki < K; ++ki)
                    for (int kj = 0; kj < K; ++kj) {
                        const double wv = wk[ki * K + kj];
                        double s = 0.0;
                        for (int i = 0; i < Ho; ++i) {
                            const double *gr = go + (size_t)i * Wo;
                            s += mi_dot(Wo, gr, xc + (size_t)(i + ki) * W + kj);
                            if (gxc && wv != 0.0)
                                mi_axpy(Wo, wv, gr, gxc + (size_t)(i + ki) * W + kj);
                        }
                        gwk[ki * K + kj] += s;
                    }
            }
        }
}

/* 3x3 weight gradient: the nine taps accumulate in one sweep over gy. */
static inline void mi_wgrad3(const double *restrict go, const double *restrict xc, double *restrict gwk,
                             int Ho, int Wo, int W)
{
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0, s8 = 0;
    for (int i = 0; i < Ho; ++i) {
        const double *gr = go + (size_t)i * Wo;
        const double *x0 = xc + (size_t)i * W, *x1 = x0 + W, *x2 = x1 + W;
#pragma omp simd reduction(+:s0, s1, s2, s3, s4, s5, s6, s7, s8)
        for (int j = 0; j < Wo; ++j) {
            const double g = gr[j];
            s0 += g * x0[j]; s1 += g * x0[j + 1]; s2 += g * x0[j + 2];
            s3 += g * x1[j]; s4 += g * x1[j + 1]; s5 += g * x1[j + 2];
            s6 += g * x2[j]; s7 += g * x2[j + 1]; s8 += g * x2[j + 2];
        }
    }
    gwk[0] += s0; gwk[1] += s1; gwk[2] += s2;
    gwk[3] += s3; gwk[4] += s4; gwk[5] += s5;
    gwk[6] += s6; gwk[7] += s7; gwk[8] += s8;
}

/* 3x3 input gradient as a gather: pad holds one gy row framed by two zeros
   on each side, so every gx element is a branch-free three-tap sum. */
static inline void mi_igrad3(const double *restrict go, const double *restrict wk, double *restrict gxc,
                             double *restrict pad, int Ho, int Wo, int W)
{
    for (int i = 0; i < Ho; ++i) {
        memcpy(pad + 2, go + (size_t)i * Wo, sizeof(double) * Wo);
        for (int ki = 0; ki < 3; ++ki) {
            const double w0 = wk[3 * ki], w1 = wk[3 * ki + 1], w2 = wk[3 * ki + 2];
            double *gr = gxc + (size_t)(i + ki) * W;
            for (int j = 0; j < W; ++j)
                gr[j] += w0 * pad[j + 2] + w1 * pad[j + 1] + w2 * pad[j];
        }
    }
}

/* gw (and gx unless NULL) are overwritten. scratch needs W + 2 doubles. */
MI_WIDE_CLONES static void mi_conv2d_bwd(const double *x, const double *w, const double *gy,
                                         double *gx, double *gw, double *scratch,
                                         int N, int C, int H, int W, int O, int K)
{
    memset(gw, 0, sizeof(double) * (size_t)O * C * K * K);
    if (gx)
        memset(gx, 0, sizeof(double) * (size_t)N * C * H * W);
    if (K != 3) {
        mi_conv2d_bwd_body(x, w, gy, gx, gw, N, C, H, W, O, K);
        return;
    }
    const int Ho = H - 2, Wo = W - 2;
    memset(scratch, 0, sizeof(double) * (size_t)(W + 2));
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double *xc = x + ((size_t)n * C + c) * H * W;
            double *gxc = gx ? gx + ((size_t)n * C + c) * H * W : NULL;
            for (int o = 0; o < O; ++o) {
                const double *go = gy + ((size_t)n * O + o) * Ho * Wo;
                const size_t tap = ((size_t)o * C + c) * 9;
                mi_wgrad3(go, xc, gw + tap, Ho, Wo, W);
                if (gxc)
                    mi_igrad3(go, w + tap, gxc, scratch, Ho, Wo, W);
            }
        }
}

/* idx holds the window position 0..3 (row-major) of the first maximum. */
static void mi_maxpool2_fwd(const double *x, double *y, int32_t *idx, int NC, int H, int W)
{
    const int Ho = H / 2, Wo = W / 2;
    for (int p = 0; p < NC; ++p) {
        const double *xp = x + (size_t)p * H * W;
        double *yp = y + (size_t)p * Ho * Wo;
        int32_t *ip = idx + (size_t)p * Ho * Wo;
        for (int i = 0; i < Ho; ++i) {
            const double *r0 = xp + (size_t)(2 * i) * W;
            const double *r1 = r0 + W;
            for (int j = 0; j < Wo; ++j) {
                double best = r0[2 * j];
                int32_t arg = 0;
                if (r0[2 * j + 1] > best) { best = r0[2 * j + 1]; arg = 1; }
                if (r1[2 * j] > best) { best = r1[2 * j]; arg = 2; }
                if (r1[2 * j + 1] > best) { best = r1[2 * j + 1]; arg = 3; }
                yp[i * Wo + j] = best;
                ip[i * Wo + j] = arg;
            }
        }
    }
}

static void mi_maxpool2_bwd(const double *gy, const int32_t *idx, double *gx, int NC, int H, int W)
{
    const int Ho = H / 2, Wo = W / 2;
    memset(gx, 0, sizeof(double) * (size_t)NC * H * W);
    for (int p = 0; p < NC; ++p) {
        const double *gp = gy + (size_t)p * Ho * Wo;
        const int32_t *ip = idx + (size_t)p * Ho * Wo;
        double *xp = gx + (size_t)p * H * W;
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
                const int32_t a = ip[i * Wo + j];
                xp[(size_t)(2 * i + (a >> 1)) * W + 2 * j + (a & 1)] = gp[i * Wo + j];
            }
    }
}

/* Train-mode batch norm over (N, C, S) with S = H * W. var is the biased
   batch variance; stats use two passes for accuracy. */
static void mi_bn_fwd(const double *x, const double *gamma, const double *beta, double eps,
                      double *out, double *xhat, double *mean, double *var, double *inv_std,
                      int N, int C, int S)
{
    const double m = (double)N * S;
    for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int n = 0; n < N; ++n) {
            const double *xc = x + ((size_t)n * C + c) * S;
            double part = 0.0;
#pragma omp simd reduction(+:part)
            for (int k = 0; k < S; ++k)
                part += xc[k];
            s += part;
        }
        const double mu = s / m;
        double q = 0.0;
        for (int n = 0; n < N; ++n) {
            const double *xc = x + ((size_t)n * C + c) * S;
            double part = 0.0;
#pragma omp simd reduction(+:part)
            for (int k = 0; k < S; ++k)
                part += (xc[k] - mu) * (xc[k] - mu);
            q += part;
        }
        mean[c] = mu;
        var[c] = q / m;
        inv_std[c] = 1.0 / sqrt(q / m + eps);
    }
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const size_t off = ((size_t)n * C + c) * S;
            const double mu = mean[c], is = inv_std[c], g = gamma[c], b = beta[c];
            const double *restrict xc = x + off;
            double *restrict hc = xhat + off;
            double *restrict oc = out + off;
            for (int k = 0; k < S; ++k) {
                const double h = (xc[k] - mu) * is;
                hc[k] = h;
                oc[k] = h * g + b;
            }
        }
}

/* Backward of mi_bn_fwd: g_sum and g_dot are the beta and gamma gradients. */
static void mi_bn_bwd(const double *grad, const double *xhat, const double *gamma, const double *inv_std,
                      double *gx, double *g_sum, double *g_dot, int N, int C, int S)
{
    const double m = (double)N * S;
    for (int c = 0; c < C; ++c) {
        double a = 0.0, b = 0.0;
        for (int n = 0; n < N; ++n) {
            const size_t off = ((size_t)n * C + c) * S;
            const double *gc = grad + off, *hc = xhat + off;
            double pa = 0.0, pb = 0.0;
#pragma omp simd reduction(+:pa, pb)
            for (int k = 0; k < S; ++k) {
                pa += gc[k];
                pb += gc[k] * hc[k];
            }
            a += pa;
            b += pb;
        }
        g_sum[c] = a;
        g_dot[c] = b;
    }
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const size_t off = ((size_t)n * C + c) * S;
            const double scale = gamma[c] * inv_std[c] / m, gs = g_sum[c], gd = g_dot[c];
            const double *restrict gc = grad + off, *restrict hc = xhat + off;
            double *restrict oc = gx + off;
            for (int k = 0; k < S; ++k)
                oc[k] = (m * gc[k] - gs - hc[k] * gd) * scale;
        }
}

#endif
