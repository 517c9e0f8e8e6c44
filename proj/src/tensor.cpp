#include "unifuse/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "unifuse/error.hpp"

namespace unifuse {

Tensor2::Tensor2(std::size_t rows, std::size_t cols, double fill) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor2::Tensor2(std::size_t rows, std::size_t cols, std::initializer_list<double> values)
    : Tensor2(rows, cols, std::vector<double>(values)) {}

Tensor2::Tensor2(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
    if (data_.size() != rows * cols) {
        throw DimensionError("Tensor2: " + std::to_string(data_.size()) + " values for shape " +
                             std::to_string(rows) + "x" + std::to_string(cols));
    }
}

void Tensor2::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor2::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor2::shape_string() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

Tensor2 slice_rows(const Tensor2& t, std::size_t begin, std::size_t end) {
    if (begin > end || end > t.rows()) {
        throw DimensionError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                             t.shape_string());
    }
    Tensor2 out(end - begin, t.cols());
    std::copy(t.data() + begin * t.cols(), t.data() + end * t.cols(), out.data());
    return out;
}

double max_abs_diff(const Tensor2& a, const Tensor2& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError("max_abs_diff: " + a.shape_string() + " vs " + b.shape_string());
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

namespace kernels {

namespace {

using v4d = double __attribute__((vector_size(32)));

inline v4d load4(const double* p) {
    v4d v;
    __builtin_memcpy(&v, p, sizeof v);
    return v;
}

inline void store4(double* p, v4d v) { __builtin_memcpy(p, &v, sizeof v); }

}  // namespace

void gemm_nn_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
    // 4 x 8 register tiles. Each output element starts from its current value
    // and accumulates over p in increasing order, exactly like the naive loop.
    const std::size_t n8 = n - n % 8;
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        const double* a0 = a + i * k;
        const double* a1 = a0 + k;
        const double* a2 = a1 + k;
        const double* a3 = a2 + k;
        double* o0 = out + i * n;
        double* o1 = o0 + n;
        double* o2 = o1 + n;
        double* o3 = o2 + n;
        for (std::size_t j = 0; j < n8; j += 8) {
            v4d c00 = load4(o0 + j), c01 = load4(o0 + j + 4);
            v4d c10 = load4(o1 + j), c11 = load4(o1 + j + 4);
            v4d c20 = load4(o2 + j), c21 = load4(o2 + j + 4);
            v4d c30 = load4(o3 + j), c31 = load4(o3 + j + 4);
            const double* bp = b + j;
            for (std::size_t p = 0; p < k; ++p, bp += n) {
                const v4d b0 = load4(bp);
                const v4d b1 = load4(bp + 4);
                const double s0 = a0[p], s1 = a1[p], s2 = a2[p], s3 = a3[p];
                c00 += s0 * b0;
                c01 += s0 * b1;
                c10 += s1 * b0;
                c11 += s1 * b1;
                c20 += s2 * b0;
                c21 += s2 * b1;
                c30 += s3 * b0;
                c31 += s3 * b1;
            }
            store4(o0 + j, c00), store4(o0 + j + 4, c01);
            store4(o1 + j, c10), store4(o1 + j + 4, c11);
            store4(o2 + j, c20), store4(o2 + j + 4, c21);
            store4(o3 + j, c30), store4(o3 + j + 4, c31);
        }
        for (std::size_t j = n8; j < n; ++j) {
            double c0 = o0[j], c1 = o1[j], c2 = o2[j], c3 = o3[j];
            for (std::size_t p = 0; p < k; ++p) {
                const double v = b[p * n + j];
                c0 += a0[p] * v;
                c1 += a1[p] * v;
                c2 += a2[p] * v;
                c3 += a3[p] * v;
            }
            o0[j] = c0, o1[j] = c1, o2[j] = c2, o3[j] = c3;
        }
    }
    for (; i < m; ++i) {
        double* o = out + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double s = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) o[j] += s * bp[j];
        }
    }
}

void gemm_nt_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
    if (m >= 4) {
        // Transposing b once lets the inner loop run over contiguous output columns.
        std::vector<double> bt(k * n);
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
        }
        gemm_nn_acc(a, bt.data(), out, m, k, n);
        return;
    }
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            out[i * n + j] += s;
        }
    }
}

void gemm_tn_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double s = ai[p];
            double* o = out + p * n;
            for (std::size_t j = 0; j < n; ++j) o[j] += s * bi[j];
        }
    }
}

namespace {
constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;
}  // namespace

// Tanh approximation written as x * sigmoid(2u), since 0.5 (1 + tanh u)
// equals sigmoid(2u); one exp instead of tanh.
double gelu(double x) noexcept {
    const double u = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
    return x / (1.0 + std::exp(-2.0 * u));
}

double gelu_grad(double x) noexcept {
    const double u = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
    const double s = 1.0 / (1.0 + std::exp(-2.0 * u));
    const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * x * x);
    return s + 2.0 * x * s * (1.0 - s) * du;
}

}  // namespace kernels

}  // namespace unifuse
