#pragma once

#include <cstddef>

// Data-parallel kernels for the model's inner loops. Every kernel
// parallelizes only across independent output elements and keeps the
// per-element reduction order fixed (ascending k / ascending row), so results
// are bitwise identical for any thread count and bitwise identical to the
// serial reference implementations in kernels::ref. Tests rely on both
// properties; incremental decoding relies on the fixed reduction order.

namespace speechlm::kernels {

// C[m,n] = A[m,p] * B[p,n]
void matmul(const double* a, const double* b, double* c, int m, int p, int n);

// C[m,n] = A[m,p] * B[n,p]^T   (B stored row-major [n,p])
void matmul_bt(const double* a, const double* b, double* c, int m, int p, int n);

// C[p,n] += A[m,p]^T * B[m,n]  (accumulating; used for weight gradients)
void matmul_at_acc(const double* a, const double* b, double* c, int m, int p, int n);

// X[i,:] += bias for every row
void add_bias_rows(double* x, const double* bias, int rows, int n);

// in-place row softmax with max-subtraction
void softmax_rows(double* x, int rows, int n);

// y = gamma * (x - mean) / sqrt(var + eps) + beta, per row; saves mean/rstd
void layer_norm(const double* x, const double* gamma, const double* beta,
                double* y, double* mean, double* rstd, int rows, int n,
                double eps = 1e-5);

// backward of layer_norm; dgamma/dbeta are accumulated, dx is written
void layer_norm_backward(const double* dy, const double* x, const double* gamma,
                         const double* mean, const double* rstd, double* dx,
                         double* dgamma, double* dbeta, int rows, int n);

// tanh-approximation GELU, elementwise over n values
void gelu(const double* x, double* y, size_t n);

// dx = dy * gelu'(x)
void gelu_backward(const double* dy, const double* x, double* dx, size_t n);

// out[j] += sum_i y[i,j]  (bias gradients)
void colsum_acc(const double* y, double* out, int rows, int n);

namespace ref {
// Serial reference twins. Same arithmetic order as the parallel kernels;
// kept for bitwise comparison in tests and the kernel benchmark.
void matmul(const double* a, const double* b, double* c, int m, int p, int n);
void matmul_bt(const double* a, const double* b, double* c, int m, int p, int n);
void matmul_at_acc(const double* a, const double* b, double* c, int m, int p, int n);
void add_bias_rows(double* x, const double* bias, int rows, int n);
void softmax_rows(double* x, int rows, int n);
void layer_norm(const double* x, const double* gamma, const double* beta,
                double* y, double* mean, double* rstd, int rows, int n,
                double eps = 1e-5);
void layer_norm_backward(const double* dy, const double* x, const double* gamma,
                         const double* mean, const double* rstd, double* dx,
                         double* dgamma, double* dbeta, int rows, int n);
void gelu(const double* x, double* y, size_t n);
void gelu_backward(const double* dy, const double* x, double* dx, size_t n);
void colsum_acc(const double* y, double* out, int rows, int n);
}  // namespace ref

}  // namespace speechlm::kernels
