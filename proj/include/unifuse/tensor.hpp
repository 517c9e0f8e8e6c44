#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace unifuse {

/// Dense row-major matrix of doubles. Rows are time steps, columns are
/// channels throughout the library.
class Tensor2 {
public:
    Tensor2() = default;
    Tensor2(std::size_t rows, std::size_t cols, double fill = 0.0);
    Tensor2(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
    Tensor2(std::size_t rows, std::size_t cols, std::vector<double> values);

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    [[nodiscard]] std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    [[nodiscard]] std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    [[nodiscard]] std::span<double> flat() noexcept { return data_; }
    [[nodiscard]] std::span<const double> flat() const noexcept { return data_; }
    [[nodiscard]] double* data() noexcept { return data_.data(); }
    [[nodiscard]] const double* data() const noexcept { return data_.data(); }

    void fill(double v);
    [[nodiscard]] bool all_finite() const noexcept;
    [[nodiscard]] std::string shape_string() const;

    friend bool operator==(const Tensor2&, const Tensor2&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Rows [begin, end) as a new tensor.
Tensor2 slice_rows(const Tensor2& t, std::size_t begin, std::size_t end);

/// Maximum absolute elementwise difference; shapes must agree.
double max_abs_diff(const Tensor2& a, const Tensor2& b);

namespace kernels {

// out (m x n) += a (m x k) * b (k x n)
void gemm_nn_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n);
// out (m x n) += a (m x k) * b^T, b is (n x k)
void gemm_nt_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n);
// out (k x n) += a^T * b, a is (m x k), b is (m x n)
void gemm_tn_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n);

double gelu(double x) noexcept;
double gelu_grad(double x) noexcept;

}  // namespace kernels

}  // namespace unifuse
