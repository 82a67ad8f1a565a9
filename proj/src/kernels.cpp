#include "speechlm/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace speechlm::kernels {

namespace {
constexpr double kGeluCoef = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / 3.14159265358979323846);

inline double gelu_one(double x) {
    double u = kSqrt2OverPi * (x + kGeluCoef * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad_one(double x) {
    double u = kSqrt2OverPi * (x + kGeluCoef * x * x * x);
    double t = std::tanh(u);
    double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCoef * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// row-serial bodies shared by the parallel and reference versions, so the
// arithmetic per output row is literally the same code

inline void matmul_row(const double* a, const double* b, double* c, int p, int n) {
    std::fill(c, c + n, 0.0);
    for (int k = 0; k < p; ++k) {
        const double av = a[k];
        const double* br = b + static_cast<size_t>(k) * n;
        for (int j = 0; j < n; ++j) c[j] += av * br[j];
    }
}

inline void matmul_bt_row(const double* a, const double* b, double* c, int p, int n) {
    for (int j = 0; j < n; ++j) {
        const double* br = b + static_cast<size_t>(j) * p;
        double acc = 0.0;
        for (int k = 0; k < p; ++k) acc += a[k] * br[k];
        c[j] = acc;
    }
}

// output row k of C[p,n] += sum_m A[m,k] * B[m,:]
inline void matmul_at_acc_row(const double* a, const double* b, double* c,
                              int m, int p, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const double av = a[static_cast<size_t>(i) * p + k];
        const double* br = b + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) c[j] += av * br[j];
    }
}

inline void softmax_row(double* x, int n) {
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
        x[j] = std::exp(x[j] - mx);
        sum += x[j];
    }
    double inv = 1.0 / sum;
    for (int j = 0; j < n; ++j) x[j] *= inv;
}

inline void layer_norm_row(const double* x, const double* gamma, const double* beta,
                           double* y, double* mean, double* rstd, int n, double eps) {
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += x[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
        double d = x[j] - mu;
        var += d * d;
    }
    var /= n;
    double rs = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j) y[j] = gamma[j] * ((x[j] - mu) * rs) + beta[j];
    *mean = mu;
    *rstd = rs;
}

inline void layer_norm_backward_row(const double* dy, const double* x, const double* gamma,
                                    double mu, double rs, double* dx, int n) {
    // dxhat = dy * gamma; dx = (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)) * rstd
    double sum_dxhat = 0.0;
    double sum_dxhat_xhat = 0.0;
    for (int j = 0; j < n; ++j) {
        double xhat = (x[j] - mu) * rs;
        double dxhat = dy[j] * gamma[j];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
    }
    double m1 = sum_dxhat / n;
    double m2 = sum_dxhat_xhat / n;
    for (int j = 0; j < n; ++j) {
        double xhat = (x[j] - mu) * rs;
        double dxhat = dy[j] * gamma[j];
        dx[j] = (dxhat - m1 - xhat * m2) * rs;
    }
}

}  // namespace

void matmul(const double* a, const double* b, double* c, int m, int p, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i)
        matmul_row(a + static_cast<size_t>(i) * p, b, c + static_cast<size_t>(i) * n, p, n);
}

void matmul_bt(const double* a, const double* b, double* c, int m, int p, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i)
        matmul_bt_row(a + static_cast<size_t>(i) * p, b, c + static_cast<size_t>(i) * n, p, n);
}

void matmul_at_acc(const double* a, const double* b, double* c, int m, int p, int n) {
#pragma omp parallel for schedule(static)
    for (int k = 0; k < p; ++k)
        matmul_at_acc_row(a, b, c + static_cast<size_t>(k) * n, m, p, n, k);
}

void add_bias_rows(double* x, const double* bias, int rows, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < rows; ++i) {
        double* r = x + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) r[j] += bias[j];
    }
}

void softmax_rows(double* x, int rows, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < rows; ++i) softmax_row(x + static_cast<size_t>(i) * n, n);
}

void layer_norm(const double* x, const double* gamma, const double* beta, double* y,
                double* mean, double* rstd, int rows, int n, double eps) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < rows; ++i)
        layer_norm_row(x + static_cast<size_t>(i) * n, gamma, beta,
                       y + static_cast<size_t>(i) * n, mean + i, rstd + i, n, eps);
}

void layer_norm_backward(const double* dy, const double* x, const double* gamma,
                         const double* mean, const double* rstd, double* dx,
                         double* dgamma, double* dbeta, int rows, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < rows; ++i)
        layer_norm_backward_row(dy + static_cast<size_t>(i) * n, x + static_cast<size_t>(i) * n,
                                gamma, mean[i], rstd[i], dx + static_cast<size_t>(i) * n, n);

    // param grads: parallel over the feature dim, rows accumulated in order
#pragma omp parallel for schedule(static)
    for (int j = 0; j < n; ++j) {
        double dg = 0.0;
        double db = 0.0;
        for (int i = 0; i < rows; ++i) {
            size_t off = static_cast<size_t>(i) * n + j;
            double xhat = (x[off] - mean[i]) * rstd[i];
            dg += dy[off] * xhat;
            db += dy[off];
        }
        dgamma[j] += dg;
        dbeta[j] += db;
    }
}

void gelu(const double* x, double* y, size_t n) {
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i) y[i] = gelu_one(x[i]);
}

void gelu_backward(const double* dy, const double* x, double* dx, size_t n) {
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i) dx[i] = dy[i] * gelu_grad_one(x[i]);
}

void colsum_acc(const double* y, double* out, int rows, int n) {
#pragma omp parallel for schedule(static)
    for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int i = 0; i < rows; ++i) acc += y[static_cast<size_t>(i) * n + j];
        out[j] += acc;
    }
}

namespace ref {

void matmul(const double* a, const double* b, double* c, int m, int p, int n) {
    for (int i = 0; i < m; ++i)
        matmul_row(a + static_cast<size_t>(i) * p, b, c + static_cast<size_t>(i) * n, p, n);
}

void matmul_bt(const double* a, const double* b, double* c, int m, int p, int n) {
    for (int i = 0; i < m; ++i)
        matmul_bt_row(a + static_cast<size_t>(i) * p, b, c + static_cast<size_t>(i) * n, p, n);
}

void matmul_at_acc(const double* a, const double* b, double* c, int m, int p, int n) {
    for (int k = 0; k < p; ++k)
        matmul_at_acc_row(a, b, c + static_cast<size_t>(k) * n, m, p, n, k);
}

void add_bias_rows(double* x, const double* bias, int rows, int n) {
    for (int i = 0; i < rows; ++i) {
        double* r = x + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) r[j] += bias[j];
    }
}

void softmax_rows(double* x, int rows, int n) {
    for (int i = 0; i < rows; ++i) softmax_row(x + static_cast<size_t>(i) * n, n);
}

void layer_norm(const double* x, const double* gamma, const double* beta, double* y,
                double* mean, double* rstd, int rows, int n, double eps) {
    for (int i = 0; i < rows; ++i)
        layer_norm_row(x + static_cast<size_t>(i) * n, gamma, beta,
                       y + static_cast<size_t>(i) * n, mean + i, rstd + i, n, eps);
}

void layer_norm_backward(const double* dy, const double* x, const double* gamma,
                         const double* mean, const double* rstd, double* dx,
                         double* dgamma, double* dbeta, int rows, int n) {
    for (int i = 0; i < rows; ++i)
        layer_norm_backward_row(dy + static_cast<size_t>(i) * n, x + static_cast<size_t>(i) * n,
                                gamma, mean[i], rstd[i], dx + static_cast<size_t>(i) * n, n);
    for (int j = 0; j < n; ++j) {
        double dg = 0.0;
        double db = 0.0;
        for (int i = 0; i < rows; ++i) {
            size_t off = static_cast<size_t>(i) * n + j;
            double xhat = (x[off] - mean[i]) * rstd[i];
            dg += dy[off] * xhat;
            db += dy[off];
        }
        dgamma[j] += dg;
        dbeta[j] += db;
    }
}

void gelu(const double* x, double* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
}

void gelu_backward(const double* dy, const double* x, double* dx, size_t n) {
    for (size_t i = 0; i < n; ++i) dx[i] = dy[i] * gelu_grad_one(x[i]);
}

void colsum_acc(const double* y, double* out, int rows, int n) {
    for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int i = 0; i < rows; ++i) acc += y[static_cast<size_t>(i) * n + j];
        out[j] += acc;
    }
}

}  // namespace ref

}  // namespace speechlm::kernels
