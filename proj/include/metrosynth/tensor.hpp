#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace metrosynth {

/// Dense real tensor of rank 0, 1 or 2, stored row-major in double precision.
/// The buffer is immutable after construction and shared between copies, so
/// passing tensors around (and snapshotting trainable variables into episode
/// tapes) is cheap.
class Tensor {
public:
    Tensor() : Tensor(scalar(0.0)) {}

    static Tensor scalar(double v) {
        return Tensor(0, 1, 1, std::vector<double>{v});
    }

    static Tensor vector(std::vector<double> v) {
        const int n = static_cast<int>(v.size());
        if (n <= 0) throw std::invalid_argument("Tensor::vector: empty vector");
        return Tensor(1, n, 1, std::move(v));
    }

    static Tensor matrix(int rows, int cols, std::vector<double> v) {
        if (rows <= 0 || cols <= 0)
            throw std::invalid_argument("Tensor::matrix: non-positive dimensions");
        if (static_cast<int>(v.size()) != rows * cols)
            throw std::invalid_argument("Tensor::matrix: size does not match dimensions");
        return Tensor(2, rows, cols, std::move(v));
    }

    static Tensor full(int rank, int rows, int cols, double fill) {
        if (rank == 0) return scalar(fill);
        if (rank == 1) return vector(std::vector<double>(static_cast<std::size_t>(rows), fill));
        return matrix(rows, cols, std::vector<double>(static_cast<std::size_t>(rows) * cols, fill));
    }

    static Tensor zeros_like(const Tensor& t) { return full(t.rank(), t.rows(), t.cols(), 0.0); }

    int rank() const { return rank_; }
    int rows() const { return rows_; }
    int cols() const { return cols_; }
    int size() const { return rows_ * cols_; }

    bool same_shape(const Tensor& o) const {
        return rank_ == o.rank_ && rows_ == o.rows_ && cols_ == o.cols_;
    }

    std::string shape_str() const {
        if (rank_ == 0) return "scalar";
        if (rank_ == 1) return "vec[" + std::to_string(rows_) + "]";
        return "mat[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
    }

    const double* data() const { return data_->data(); }

    double operator[](int i) const { return (*data_)[static_cast<std::size_t>(i)]; }

    double at(int i, int j) const {
        return (*data_)[static_cast<std::size_t>(i) * cols_ + j];
    }

    /// Value of a rank-0 tensor.
    double scalar_value() const {
        if (rank_ != 0) throw std::invalid_argument("Tensor::scalar_value: tensor is " + shape_str());
        return (*data_)[0];
    }

    std::vector<double> to_vector() const { return *data_; }

    bool all_finite() const {
        for (double v : *data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    Tensor(int rank, int rows, int cols, std::vector<double> v)
        : rank_(rank), rows_(rows), cols_(cols),
          data_(std::make_shared<const std::vector<double>>(std::move(v))) {}

    int rank_;
    int rows_;
    int cols_;
    std::shared_ptr<const std::vector<double>> data_;
};

} // namespace metrosynth
