#pragma once

#include <cstddef>
#include <string_view>

namespace mim::kern {

// Data-parallel inner loops behind the whole numeric stack. Two variants:
// a scalar reference and an AVX2+FMA build, selected at runtime.
//
// Accumulation discipline: reductions and elementwise updates run in f64 and
// round to f32 once at the end. Elementwise kernels widen f32 operands to
// f64, where products of two widened floats are exact, so the scalar and
// AVX2 variants agree bit for bit. Only the dot-product family (dot, sum,
// sum_sq, linear_forward) reassociates its f64 partial sums across lanes and
// may differ between variants in the last ulp.
struct Ops {
    const char* name;

    // f64-accumulated reductions.
    double (*dot)(const float* a, const float* b, std::size_t n);
    double (*sum)(const float* a, std::size_t n);
    double (*sum_sq)(const float* a, std::size_t n);

    // Elementwise, bit-identical across variants.
    void (*axpy)(float* y, const float* x, float alpha, std::size_t n);  // y += alpha*x
    void (*add)(float* y, const float* x, std::size_t n);                // y += x
    void (*scale)(float* y, float alpha, std::size_t n);                 // y *= alpha

    // acc[i] += c * x[i] into an f64 scratch row. The building block for
    // attention matmuls; bit-identical across variants whenever c is a
    // widened f32 (the product is then exact and FMA cannot diverge).
    void (*accum_scaled)(double* acc, const float* x, double c, std::size_t n);

    // Y[t,o] = sum_i X[t,i]*W[o,i] + b[o]; W row-major [out_dim x in_dim],
    // X [rows x in_dim], Y [rows x out_dim]. b may be null.
    void (*linear_forward)(const float* W, const float* b, const float* X, float* Y,
                           std::size_t rows, std::size_t out_dim, std::size_t in_dim);

    // Accumulating backward of linear_forward:
    //   dX[t,i] += sum_o dY[t,o]*W[o,i]   (skipped when dX null)
    //   dW[o,i] += sum_t dY[t,o]*X[t,i]   (skipped when dW null)
    //   dB[o]   += sum_t dY[t,o]          (skipped when dB null)
    // Sums run in f64 scratch and round into the f32 accumulators once.
    void (*linear_backward)(const float* W, const float* X, const float* dY,
                            float* dW, float* dB, float* dX,
                            std::size_t rows, std::size_t out_dim, std::size_t in_dim);

    // Decoupled-weight-decay Adam update, elementwise in f64:
    //   m = b1*m + (1-b1)*g ; v = b2*v + (1-b2)*g^2
    //   p = p*(1 - lr*wd) - lr*(m/bias1)/(sqrt(v/bias2) + eps)
    // bias1/bias2 are the bias-correction denominators 1-b^t.
    void (*adamw_update)(float* p, const float* g, float* m, float* v, std::size_t n,
                         float lr, float beta1, float beta2, float eps, float wd,
                         double bias1, double bias2);
};

enum class Backend { Scalar, Avx2 };

bool cpu_supports_avx2();

// Active-table selection. select(Avx2) on a CPU without AVX2 falls back to
// scalar and returns false. Default at startup: best available.
bool select(Backend b);
bool select_by_name(std::string_view name);  // "scalar" | "avx2" | "auto"
Backend active();

const Ops& ops();

const Ops& scalar_ops();
const Ops* avx2_ops();  // null when not compiled in

}  // namespace mim::kern
