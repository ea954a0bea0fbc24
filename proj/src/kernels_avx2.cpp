// AVX2+FMA kernel variants. Compiled with -mavx2 -mfma on x86 only; callers
// reach them through the dispatch table after a CPUID check.
//
// f32 operands are widened to f64 lanes before any arithmetic. Products of
// two widened floats are exact in f64, so every elementwise kernel here is
// bit-identical to the scalar reference; only the lane-parallel reductions
// (dot, sum, sum_sq, linear_forward) reassociate their partial sums.

#if defined(__x86_64__) || defined(__i386__) || defined(_M_X64)

#include <immintrin.h>

#include <cmath>
#include <vector>

#include "mim/kernels.h"

namespace mim::kern {
namespace {

inline __m256d widen_lo(__m256 v) { return _mm256_cvtps_pd(_mm256_castps256_ps128(v)); }
inline __m256d widen_hi(__m256 v) { return _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1)); }

inline double hsum(__m256d v) {
    alignas(32) double buf[4];
    _mm256_store_pd(buf, v);
    return (buf[0] + buf[1]) + (buf[2] + buf[3]);
}

double dot_avx2(const float* a, const float* b, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 va = _mm256_loadu_ps(a + i);
        const __m256 vb = _mm256_loadu_ps(b + i);
        acc0 = _mm256_fmadd_pd(widen_lo(va), widen_lo(vb), acc0);
        acc1 = _mm256_fmadd_pd(widen_hi(va), widen_hi(vb), acc1);
    }
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
}

double sum_avx2(const float* a, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 va = _mm256_loadu_ps(a + i);
        acc0 = _mm256_add_pd(acc0, widen_lo(va));
        acc1 = _mm256_add_pd(acc1, widen_hi(va));
    }
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s += static_cast<double>(a[i]);
    return s;
}

double sum_sq_avx2(const float* a, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 va = _mm256_loadu_ps(a + i);
        const __m256d lo = widen_lo(va), hi = widen_hi(va);
        acc0 = _mm256_fmadd_pd(lo, lo, acc0);
        acc1 = _mm256_fmadd_pd(hi, hi, acc1);
    }
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(a[i]);
    return s;
}

// y[i] = f32( f64(y[i]) + alpha * f64(x[i]) ); the product alpha*x is exact,
// so the single fmadd rounding matches the scalar mul-then-add exactly.
void axpy_avx2(float* y, const float* x, float alpha, std::size_t n) {
    const __m256d va = _mm256_set1_pd(static_cast<double>(alpha));
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d xy = _mm256_cvtps_pd(_mm_loadu_ps(y + i));
        const __m256d xx = _mm256_cvtps_pd(_mm_loadu_ps(x + i));
        _mm_storeu_ps(y + i, _mm256_cvtpd_ps(_mm256_fmadd_pd(va, xx, xy)));
    }
    const double a = alpha;
    for (; i < n; ++i)
        y[i] = static_cast<float>(static_cast<double>(y[i]) + a * static_cast<double>(x[i]));
}

void add_avx2(float* y, const float* x, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d xy = _mm256_cvtps_pd(_mm_loadu_ps(y + i));
        const __m256d xx = _mm256_cvtps_pd(_mm_loadu_ps(x + i));
        _mm_storeu_ps(y + i, _mm256_cvtpd_ps(_mm256_add_pd(xy, xx)));
    }
    for (; i < n; ++i)
        y[i] = static_cast<float>(static_cast<double>(y[i]) + static_cast<double>(x[i]));
}

void scale_avx2(float* y, float alpha, std::size_t n) {
    const __m256d va = _mm256_set1_pd(static_cast<double>(alpha));
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d xy = _mm256_cvtps_pd(_mm_loadu_ps(y + i));
        _mm_storeu_ps(y + i, _mm256_cvtpd_ps(_mm256_mul_pd(xy, va)));
    }
    const double a = alpha;
    for (; i < n; ++i) y[i] = static_cast<float>(static_cast<double>(y[i]) * a);
}

void linear_forward_avx2(const float* W, const float* b, const float* X, float* Y,
                         std::size_t rows, std::size_t out_dim, std::size_t in_dim) {
    for (std::size_t t = 0; t < rows; ++t) {
        const float* x = X + t * in_dim;
        float* y = Y + t * out_dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
            double s = b ? static_cast<double>(b[o]) : 0.0;
            s += dot_avx2(W + o * in_dim, x, in_dim);
            y[o] = static_cast<float>(s);
        }
    }
}

// acc[i] += c * x[i] over f64 scratch; exact products keep this bit-equal
// to the scalar order-identical loop.
void accum_scaled_avx2(double* acc, const float* x, double c, std::size_t n) {
    const __m256d vc = _mm256_set1_pd(c);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d xx = _mm256_cvtps_pd(_mm_loadu_ps(x + i));
        const __m256d va = _mm256_loadu_pd(acc + i);
        _mm256_storeu_pd(acc + i, _mm256_fmadd_pd(vc, xx, va));
    }
    for (; i < n; ++i) acc[i] += c * static_cast<double>(x[i]);
}

void linear_backward_avx2(const float* W, const float* X, const float* dY,
                          float* dW, float* dB, float* dX,
                          std::size_t rows, std::size_t out_dim, std::size_t in_dim) {
    if (dX) {
        std::vector<double> acc(in_dim);
        for (std::size_t t = 0; t < rows; ++t) {
            std::fill(acc.begin(), acc.end(), 0.0);
            const float* dy = dY + t * out_dim;
            for (std::size_t o = 0; o < out_dim; ++o)
                accum_scaled_avx2(acc.data(), W + o * in_dim, static_cast<double>(dy[o]), in_dim);
            float* dx = dX + t * in_dim;
            for (std::size_t i = 0; i < in_dim; ++i)
                dx[i] = static_cast<float>(static_cast<double>(dx[i]) + acc[i]);
        }
    }
    if (dW) {
        std::vector<double> acc(out_dim * in_dim, 0.0);
        for (std::size_t t = 0; t < rows; ++t) {
            const float* dy = dY + t * out_dim;
            const float* x = X + t * in_dim;
            for (std::size_t o = 0; o < out_dim; ++o)
                accum_scaled_avx2(acc.data() + o * in_dim, x, static_cast<double>(dy[o]), in_dim);
        }
        for (std::size_t j = 0; j < out_dim * in_dim; ++j)
            dW[j] = static_cast<float>(static_cast<double>(dW[j]) + acc[j]);
    }
    if (dB) {
        std::vector<double> acc(out_dim, 0.0);
        for (std::size_t t = 0; t < rows; ++t) {
            const float* dy = dY + t * out_dim;
            for (std::size_t o = 0; o < out_dim; ++o) acc[o] += static_cast<double>(dy[o]);
        }
        for (std::size_t o = 0; o < out_dim; ++o)
            dB[o] = static_cast<float>(static_cast<double>(dB[o]) + acc[o]);
    }
}

void adamw_update_avx2(float* p, const float* g, float* m, float* v, std::size_t n,
                       float lr, float beta1, float beta2, float eps, float wd,
                       double bias1, double bias2) {
    const double b1 = beta1, b2 = beta2;
    const double lrd = lr, epsd = eps;
    const double decay = 1.0 - lrd * static_cast<double>(wd);
    const __m256d vb1 = _mm256_set1_pd(b1);
    const __m256d vb2 = _mm256_set1_pd(b2);
    const __m256d v1mb1 = _mm256_set1_pd(1.0 - b1);
    const __m256d v1mb2 = _mm256_set1_pd(1.0 - b2);
    const __m256d vbias1 = _mm256_set1_pd(bias1);
    const __m256d vbias2 = _mm256_set1_pd(bias2);
    const __m256d vlr = _mm256_set1_pd(lrd);
    const __m256d veps = _mm256_set1_pd(epsd);
    const __m256d vdecay = _mm256_set1_pd(decay);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d gi = _mm256_cvtps_pd(_mm_loadu_ps(g + i));
        const __m256d mi0 = _mm256_cvtps_pd(_mm_loadu_ps(m + i));
        const __m256d vi0 = _mm256_cvtps_pd(_mm_loadu_ps(v + i));
        const __m256d pi0 = _mm256_cvtps_pd(_mm_loadu_ps(p + i));
        // b1*m and (1-b1)*g are exact products of widened floats; one
        // rounding on the add, same as the scalar path.
        const __m256d mi = _mm256_add_pd(_mm256_mul_pd(vb1, mi0), _mm256_mul_pd(v1mb1, gi));
        const __m256d g2 = _mm256_mul_pd(gi, gi);
        const __m256d vi = _mm256_add_pd(_mm256_mul_pd(vb2, vi0), _mm256_mul_pd(v1mb2, g2));
        _mm_storeu_ps(m + i, _mm256_cvtpd_ps(mi));
        _mm_storeu_ps(v + i, _mm256_cvtpd_ps(vi));
        const __m256d m_hat = _mm256_div_pd(mi, vbias1);
        const __m256d v_hat = _mm256_div_pd(vi, vbias2);
        const __m256d denom = _mm256_add_pd(_mm256_sqrt_pd(v_hat), veps);
        const __m256d step = _mm256_div_pd(_mm256_mul_pd(vlr, m_hat), denom);
        const __m256d pout = _mm256_sub_pd(_mm256_mul_pd(pi0, vdecay), step);
        _mm_storeu_ps(p + i, _mm256_cvtpd_ps(pout));
    }
    const double one_m_b1 = 1.0 - b1, one_m_b2 = 1.0 - b2;
    for (; i < n; ++i) {
        const double gi = g[i];
        const double mi = b1 * static_cast<double>(m[i]) + one_m_b1 * gi;
        const double vi = b2 * static_cast<double>(v[i]) + one_m_b2 * (gi * gi);
        m[i] = static_cast<float>(mi);
        v[i] = static_cast<float>(vi);
        const double step = lrd * (mi / bias1) / (std::sqrt(vi / bias2) + epsd);
        p[i] = static_cast<float>(static_cast<double>(p[i]) * decay - step);
    }
}

}  // namespace

const Ops* avx2_ops() {
    static const Ops table{
        "avx2",       dot_avx2,           sum_avx2,
        sum_sq_avx2,  axpy_avx2,          add_avx2,
        scale_avx2,   accum_scaled_avx2,  linear_forward_avx2,
        linear_backward_avx2, adamw_update_avx2,
    };
    return &table;
}

}  // namespace mim::kern

#else

#include "mim/kernels.h"

namespace mim::kern {
const Ops* avx2_ops() { return nullptr; }
}  // namespace mim::kern

#endif
