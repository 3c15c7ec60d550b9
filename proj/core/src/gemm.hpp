#pragma once

// Internal matmul shim over Eigen. Kept out of the public headers so the
// installed package does not depend on Eigen.

#include <Eigen/Core>

namespace thermosr::detail {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using CMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// C = A(m x k) * B(k x n), overwriting C unless accumulate.
inline void gemm(const double* a, const double* b, double* c, int m, int k, int n,
                 bool accumulate = false) {
    CMatMap A(a, m, k), B(b, k, n);
    MatMap C(c, m, n);
    if (accumulate)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

// C = A^T(m x k) * B(k x n) where A is stored as (k x m).
inline void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n,
                    bool accumulate = false) {
    CMatMap A(a, k, m), B(b, k, n);
    MatMap C(c, m, n);
    if (accumulate)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

// C = A(m x k) * B^T(k x n) where B is stored as (n x k).
inline void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n,
                    bool accumulate = false) {
    CMatMap A(a, m, k), B(b, n, k);
    MatMap C(c, m, n);
    if (accumulate)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

}  // namespace thermosr::detail
