#pragma once

#include <cstddef>
#include <vector>

namespace speechlm {

// Dense row-major matrix of doubles. Plain storage, no math of its own;
// kernels operate on the raw buffers.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

    double* row(int i) { return v.data() + static_cast<size_t>(i) * cols; }
    const double* row(int i) const { return v.data() + static_cast<size_t>(i) * cols; }
    double& at(int i, int j) { return v[static_cast<size_t>(i) * cols + j]; }
    double at(int i, int j) const { return v[static_cast<size_t>(i) * cols + j]; }
    size_t size() const { return v.size(); }
    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    bool operator==(const Mat& o) const { return rows == o.rows && cols == o.cols && v == o.v; }
};

}  // namespace speechlm
