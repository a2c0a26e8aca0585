#pragma once

// Scalar-type generic dense kernels shared by the tensor API and the toy
// transformer. All reductions run in ascending index order and accumulate in
// binary64, so results are bitwise reproducible for a given input.

#include <algorithm>
#include <cstddef>
#include <vector>

namespace immlab::kernels {

// c[m x n] = a[m x k] * b[k x n]
template <class T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> acc(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = static_cast<double>(arow[p]);
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                acc[j] += av * static_cast<double>(brow[j]);
            }
        }
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            crow[j] = static_cast<T>(acc[j]);
        }
    }
}

// acc[m x n] += a[r x m]^T * b[r x n], reducing over r ascending.
template <class T>
void matmul_tn_accumulate(const T* a, const T* b, double* acc, std::size_t r, std::size_t m,
                          std::size_t n) {
    for (std::size_t s = 0; s < r; ++s) {
        const T* arow = a + s * m;
        const T* brow = b + s * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = static_cast<double>(arow[i]);
            if (av == 0.0) {
                continue;
            }
            double* crow = acc + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * static_cast<double>(brow[j]);
            }
        }
    }
}

// out[cols x rows] = in[rows x cols]^T
template <class T>
void transpose(const T* in, T* out, std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            out[j * rows + i] = in[i * cols + j];
        }
    }
}

// c[m x n] = a[m x k] * b[n x k]^T
template <class T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    std::vector<T> bt(k * n);
    transpose(b, bt.data(), n, k);
    matmul(a, bt.data(), c, m, k, n);
}

} // namespace immlab::kernels
