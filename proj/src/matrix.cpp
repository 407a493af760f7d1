#include "sdlora/matrix.hpp"

#include <cmath>
#include <string>

namespace sdlora {

namespace {

void require_positive_dims(int rows, int cols) {
    if (rows <= 0 || cols <= 0) {
        throw DimensionError("matrix dimensions must be positive, got " +
                             std::to_string(rows) + "x" + std::to_string(cols));
    }
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                             std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
}

} // namespace

Matrix::Matrix(int rows, int cols) : rows_(rows), cols_(cols) {
    require_positive_dims(rows, cols);
    data_.assign(static_cast<std::size_t>(rows) * cols, 0.0);
}

Matrix::Matrix(int rows, int cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    require_positive_dims(rows, cols);
    if (data_.size() != static_cast<std::size_t>(rows) * cols) {
        throw DimensionError("data length " + std::to_string(data_.size()) +
                             " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const int r = static_cast<int>(rows.size());
    const int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
    require_positive_dims(r, c);
    Matrix m(r, c);
    int i = 0;
    for (const auto& row : rows) {
        if (static_cast<int>(row.size()) != c) {
            throw DimensionError("ragged initializer in Matrix::from_rows");
        }
        int j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    return m;
}

bool Matrix::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Matrix& Matrix::add_scaled(const Matrix& other, double s) {
    require_same_shape(*this, other, "add_scaled");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (int i = 0; i < rows_; ++i)
        for (int j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
}

void Matrix::append_zero_rows(int n) {
    if (n < 0) throw DimensionError("append_zero_rows: negative count");
    data_.resize(data_.size() + static_cast<std::size_t>(n) * cols_, 0.0);
    rows_ += n;
}

Matrix operator+(const Matrix& a, const Matrix& b) {
    Matrix r = a;
    r.add_scaled(b, 1.0);
    return r;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
    Matrix r = a;
    r.add_scaled(b, -1.0);
    return r;
}

Matrix operator*(const Matrix& a, double s) {
    Matrix r = a;
    r *= s;
    return r;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions " + std::to_string(a.cols()) +
                             " vs " + std::to_string(b.rows()));
    }
    Matrix c(a.rows(), b.cols());
    matmul_add(a, b, c);
    return c;
}

void matmul_add(const Matrix& a, const Matrix& b, Matrix& c) {
    if (a.cols() != b.rows() || c.rows() != a.rows() || c.cols() != b.cols()) {
        throw DimensionError("matmul_add: incompatible shapes");
    }
    const int m = a.rows(), k = a.cols(), n = b.cols();
    const double* ap = a.data();
    const double* bp = b.data();
    double* cp = c.data();
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const double aip = ap[static_cast<std::size_t>(i) * k + p];
            if (aip == 0.0) continue;
            const double* brow = bp + static_cast<std::size_t>(p) * n;
            double* crow = cp + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

double frobenius_dot(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "frobenius_dot");
    double s = 0.0;
    const double* ap = a.data();
    const double* bp = b.data();
    for (std::size_t i = 0; i < a.size(); ++i) s += ap[i] * bp[i];
    return s;
}

} // namespace sdlora
