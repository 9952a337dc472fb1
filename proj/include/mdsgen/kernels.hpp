#pragma once

#include <cstring>
#include <vector>

namespace mds::kern {

// C[m,n] (+)= A[m,k] * B[k,n]; row-major, i-k-j order so the inner loop
// streams rows of B and C and vectorizes cleanly.
template <typename T>
inline void gemm_nn(int m, int k, int n, const T* A, const T* B, T* C, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        T* c = C + (size_t)i * n;
        if (!accumulate) std::memset(c, 0, sizeof(T) * n);
        const T* a = A + (size_t)i * k;
        for (int kk = 0; kk < k; ++kk) {
            T av = a[kk];
            const T* b = B + (size_t)kk * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
template <typename T>
inline void gemm_tn(int m, int k, int n, const T* A, const T* B, T* C, bool accumulate) {
    if (!accumulate) std::memset(C, 0, sizeof(T) * (size_t)m * n);
    for (int kk = 0; kk < k; ++kk) {
        const T* a = A + (size_t)kk * m;
        const T* b = B + (size_t)kk * n;
        for (int i = 0; i < m; ++i) {
            T av = a[i];
            T* c = C + (size_t)i * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T, via an explicit transpose of B into scratch
// so the hot loop stays in the gemm_nn form.
template <typename T>
inline void gemm_nt(int m, int k, int n, const T* A, const T* B, T* C, bool accumulate) {
    thread_local std::vector<T> scratch;
    scratch.resize((size_t)k * n);
    for (int j = 0; j < n; ++j)
        for (int kk = 0; kk < k; ++kk)
            scratch[(size_t)kk * n + j] = B[(size_t)j * k + kk];
    gemm_nn(m, k, n, A, scratch.data(), C, accumulate);
}

}  // namespace mds::kern
