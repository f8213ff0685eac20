#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace cde {

/// Dense row-major tensor of doubles. Rank 1 and 2 cover everything the
/// models need; scalars are shape {1}.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double v);
    static Tensor scalar(double v);
    static Tensor from(std::vector<std::size_t> shape, std::vector<double> data);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // Rank-2 accessors; rank-1 tensors behave as a single row.
    std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
    std::size_t cols() const { return rank() == 2 ? shape_[1] : size(); }

    double& at(std::size_t i) { return data_[i]; }
    double at(std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    /// Value of a single-element tensor.
    double item() const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    /// Throws NumericsError naming `what` if any entry is NaN/Inf.
    void ensure_finite(const std::string& what) const;

    std::string shape_str() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

} // namespace cde
