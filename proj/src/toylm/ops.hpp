#pragma once

// Row-wise building blocks shared by the training pass and the decoder.

#include "immlab/kernels.hpp"

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace immlab::lm::ops {

inline constexpr double kNormEps = 1e-5;
inline constexpr double kGeluC = 0.7978845608028654; // sqrt(2 / pi)
inline constexpr double kGeluA = 0.044715;

inline double gelu(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

// Fixed sinusoidal position code: sin on even dims, cos on odd dims.
inline double position_code(std::size_t pos, std::size_t dim, std::size_t d_model) {
    const double i2 = static_cast<double>(dim - dim % 2);
    const double angle =
        static_cast<double>(pos) / std::pow(10000.0, i2 / static_cast<double>(d_model));
    return dim % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

// Bias-free LayerNorm over R rows of width d. xhat and rstd are kept for the
// backward pass (either may be null when not needed).
template <class T>
void layernorm_rows(const T* x, const T* g, T* y, T* xhat, double* rstd, std::size_t R,
                    std::size_t d) {
    for (std::size_t r = 0; r < R; ++r) {
        const T* xr = x + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            mean += static_cast<double>(xr[j]);
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = static_cast<double>(xr[j]) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + kNormEps);
        if (rstd) {
            rstd[r] = rs;
        }
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (static_cast<double>(xr[j]) - mean) * rs;
            if (xhat) {
                xhat[r * d + j] = static_cast<T>(xh);
            }
            y[r * d + j] = static_cast<T>(xh * static_cast<double>(g[j]));
        }
    }
}

// dx += LayerNorm backward; dg accumulates over rows in ascending order.
template <class T>
void layernorm_backward(const T* dy, const T* xhat, const double* rstd, const T* g, T* dx,
                        double* dg, std::size_t R, std::size_t d) {
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t r = 0; r < R; ++r) {
        const T* dyr = dy + r * d;
        const T* xr = xhat + r * d;
        double s1 = 0.0;
        double s2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double dxh = static_cast<double>(dyr[j]) * static_cast<double>(g[j]);
            s1 += dxh;
            s2 += dxh * static_cast<double>(xr[j]);
        }
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = static_cast<double>(xr[j]);
            const double dxh = static_cast<double>(dyr[j]) * static_cast<double>(g[j]);
            dx[r * d + j] = static_cast<T>(static_cast<double>(dx[r * d + j]) +
                                           rstd[r] * (dxh - s1 * inv_d - xh * s2 * inv_d));
            dg[j] += static_cast<double>(dyr[j]) * xh;
        }
    }
}

// Causal attention for one query row and one head: probs[0..n) over keys
// k[0..n) (row stride `stride`), output written to out[0..hd).
template <class T>
void attend_row(const T* q, const T* keys, const T* values, std::size_t n, std::size_t stride,
                std::size_t hd, double scale, T* probs, T* out, std::vector<double>& scratch) {
    scratch.resize(n);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
        const T* kj = keys + j * stride;
        double s = 0.0;
        for (std::size_t t = 0; t < hd; ++t) {
            s += static_cast<double>(q[t]) * static_cast<double>(kj[t]);
        }
        s *= scale;
        scratch[j] = s;
        mx = s > mx ? s : mx;
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        scratch[j] = std::exp(scratch[j] - mx);
        sum += scratch[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
        probs[j] = static_cast<T>(scratch[j] / sum);
    }
    for (std::size_t t = 0; t < hd; ++t) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            acc += static_cast<double>(probs[j]) * static_cast<double>(values[j * stride + t]);
        }
        out[t] = static_cast<T>(acc);
    }
}

// x += y elementwise.
template <class T>
void add_into(T* x, const T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = x[i] + y[i];
    }
}

} // namespace immlab::lm::ops
