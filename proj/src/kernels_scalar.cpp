#include <cmath>
#include <vector>

#include "mim/kernels.h"

namespace mim::kern {
namespace {

double dot_scalar(const float* a, const float* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
}

double sum_scalar(const float* a, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]);
    return s;
}

double sum_sq_scalar(const float* a, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(a[i]);
    return s;
}

void axpy_scalar(float* y, const float* x, float alpha, std::size_t n) {
    const double a = alpha;
    for (std::size_t i = 0; i < n; ++i)
        y[i] = static_cast<float>(static_cast<double>(y[i]) + a * static_cast<double>(x[i]));
}

void add_scalar(float* y, const float* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        y[i] = static_cast<float>(static_cast<double>(y[i]) + static_cast<double>(x[i]));
}

void scale_scalar(float* y, float alpha, std::size_t n) {
    const double a = alpha;
    for (std::size_t i = 0; i < n; ++i)
        y[i] = static_cast<float>(static_cast<double>(y[i]) * a);
}

void accum_scaled_scalar(double* acc, const float* x, double c, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) acc[i] += c * static_cast<double>(x[i]);
}

void linear_forward_scalar(const float* W, const float* b, const float* X, float* Y,
                           std::size_t rows, std::size_t out_dim, std::size_t in_dim) {
    for (std::size_t t = 0; t < rows; ++t) {
        const float* x = X + t * in_dim;
        float* y = Y + t * out_dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
            double s = b ? static_cast<double>(b[o]) : 0.0;
            s += dot_scalar(W + o * in_dim, x, in_dim);
            y[o] = static_cast<float>(s);
        }
    }
}

void linear_backward_scalar(const float* W, const float* X, const float* dY,
                            float* dW, float* dB, float* dX,
                            std::size_t rows, std::size_t out_dim, std::size_t in_dim) {
    if (dX) {
        std::vector<double> acc(in_dim);
        for (std::size_t t = 0; t < rows; ++t) {
            std::fill(acc.begin(), acc.end(), 0.0);
            const float* dy = dY + t * out_dim;
            for (std::size_t o = 0; o < out_dim; ++o) {
                const double c = dy[o];
                const float* w = W + o * in_dim;
                for (std::size_t i = 0; i < in_dim; ++i) acc[i] += c * static_cast<double>(w[i]);
            }
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
            for (std::size_t o = 0; o < out_dim; ++o) {
                const double c = dy[o];
                double* row = acc.data() + o * in_dim;
                for (std::size_t i = 0; i < in_dim; ++i) row[i] += c * static_cast<double>(x[i]);
            }
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

void adamw_update_scalar(float* p, const float* g, float* m, float* v, std::size_t n,
                         float lr, float beta1, float beta2, float eps, float wd,
                         double bias1, double bias2) {
    const double b1 = beta1, b2 = beta2;
    const double one_m_b1 = 1.0 - b1, one_m_b2 = 1.0 - b2;
    const double lrd = lr, epsd = eps;
    const double decay = 1.0 - lrd * static_cast<double>(wd);
    for (std::size_t i = 0; i < n; ++i) {
        const double gi = g[i];
        const double mi = b1 * static_cast<double>(m[i]) + one_m_b1 * gi;
        const double vi = b2 * static_cast<double>(v[i]) + one_m_b2 * (gi * gi);
        m[i] = static_cast<float>(mi);
        v[i] = static_cast<float>(vi);
        const double m_hat = mi / bias1;
        const double v_hat = vi / bias2;
        const double step = lrd * m_hat / (std::sqrt(v_hat) + epsd);
        p[i] = static_cast<float>(static_cast<double>(p[i]) * decay - step);
    }
}

}  // namespace

const Ops& scalar_ops() {
    static const Ops table{
        "scalar",       dot_scalar,           sum_scalar,
        sum_sq_scalar,  axpy_scalar,          add_scalar,
        scale_scalar,   accum_scaled_scalar,  linear_forward_scalar,
        linear_backward_scalar, adamw_update_scalar,
    };
    return table;
}

}  // namespace mim::kern
