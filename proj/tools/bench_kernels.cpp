// Times the OpenMP kernels against their serial reference twins and checks
// the outputs stay bitwise identical.

#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include <omp.h>

#include "speechlm/kernels.hpp"
#include "speechlm/rng.hpp"

using speechlm::Rng;
namespace kern = speechlm::kernels;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm up
    auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) fn();
    auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

std::vector<double> random_vec(size_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

void bench_matmul(int m, int p, int n, int reps) {
    auto a = random_vec(static_cast<size_t>(m) * p, 1);
    auto b = random_vec(static_cast<size_t>(p) * n, 2);
    std::vector<double> c_par(static_cast<size_t>(m) * n), c_ref(c_par.size());
    double t_par = time_ms([&] { kern::matmul(a.data(), b.data(), c_par.data(), m, p, n); }, reps);
    double t_ref =
        time_ms([&] { kern::ref::matmul(a.data(), b.data(), c_ref.data(), m, p, n); }, reps);
    double gflop = 2.0 * m * p * n / 1e9;
    std::printf("matmul %4dx%4dx%4d  omp %8.3f ms (%6.2f GF/s)  ref %8.3f ms (%6.2f GF/s)  "
                "speedup %.2fx  bitwise %s\n",
                m, p, n, t_par, gflop / (t_par / 1e3), t_ref, gflop / (t_ref / 1e3),
                t_ref / t_par, bitwise_equal(c_par, c_ref) ? "ok" : "DIFF");
}

void bench_softmax(int rows, int n, int reps) {
    auto base = random_vec(static_cast<size_t>(rows) * n, 3);
    std::vector<double> x_par, x_ref;
    double t_par = time_ms(
        [&] {
            x_par = base;
            kern::softmax_rows(x_par.data(), rows, n);
        },
        reps);
    double t_ref = time_ms(
        [&] {
            x_ref = base;
            kern::ref::softmax_rows(x_ref.data(), rows, n);
        },
        reps);
    std::printf("softmax %5dx%4d        omp %8.3f ms              ref %8.3f ms              "
                "speedup %.2fx  bitwise %s\n",
                rows, n, t_par, t_ref, t_ref / t_par, bitwise_equal(x_par, x_ref) ? "ok" : "DIFF");
}

void bench_layernorm(int rows, int n, int reps) {
    auto x = random_vec(static_cast<size_t>(rows) * n, 4);
    auto gamma = random_vec(n, 5);
    auto beta = random_vec(n, 6);
    std::vector<double> y_par(x.size()), y_ref(x.size()), mean(rows), rstd(rows);
    double t_par = time_ms(
        [&] {
            kern::layer_norm(x.data(), gamma.data(), beta.data(), y_par.data(), mean.data(),
                             rstd.data(), rows, n);
        },
        reps);
    double t_ref = time_ms(
        [&] {
            kern::ref::layer_norm(x.data(), gamma.data(), beta.data(), y_ref.data(), mean.data(),
                                  rstd.data(), rows, n);
        },
        reps);
    std::printf("layernorm %4dx%4d      omp %8.3f ms              ref %8.3f ms              "
                "speedup %.2fx  bitwise %s\n",
                rows, n, t_par, t_ref, t_ref / t_par, bitwise_equal(y_par, y_ref) ? "ok" : "DIFF");
}

}  // namespace

int main() {
    std::printf("threads: %d\n", omp_get_max_threads());
    bench_matmul(64, 128, 512, 50);
    bench_matmul(256, 256, 256, 20);
    bench_matmul(512, 512, 512, 5);
    bench_matmul(52, 256, 768, 50);
    bench_softmax(2048, 512, 50);
    bench_layernorm(2048, 512, 50);
    return 0;
}
