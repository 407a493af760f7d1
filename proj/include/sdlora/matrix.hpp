#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

#include "sdlora/errors.hpp"

namespace sdlora {

/// Dense real matrix, row-major, 64-bit entries.
///
/// A default-constructed Matrix is the empty (0x0) placeholder used for
/// "no value" slots; every sized constructor requires positive dimensions.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols);
    Matrix(int rows, int cols, std::vector<double> data);

    static Matrix identity(int n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    bool empty() const { return rows_ == 0; }
    std::size_t size() const { return data_.size(); }

    double& operator()(int i, int j) { return data_[static_cast<std::size_t>(i) * cols_ + j]; }
    double operator()(int i, int j) const { return data_[static_cast<std::size_t>(i) * cols_ + j]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    const std::vector<double>& values() const { return data_; }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }
    bool all_finite() const;

    /// this += s * other
    Matrix& add_scaled(const Matrix& other, double s);
    Matrix& operator*=(double s);
    Matrix transposed() const;

    /// Appends `n` zero rows, keeping existing entries.
    void append_zero_rows(int n);

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(const Matrix& a, double s);

Matrix matmul(const Matrix& a, const Matrix& b);

/// C += A * B without allocating.
void matmul_add(const Matrix& a, const Matrix& b, Matrix& c);

/// Frobenius inner product <a, b>.
double frobenius_dot(const Matrix& a, const Matrix& b);

} // namespace sdlora
