#include "cde/tensor.hpp"

#include "cde/errors.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace cde {

namespace {
std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}
} // namespace

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_.assign(shape_product(t.shape_), 0.0);
    return t;
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    Tensor t = zeros(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
}

Tensor Tensor::scalar(double v) {
    Tensor t;
    t.shape_ = {1};
    t.data_ = {v};
    return t;
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> data) {
    if (shape_product(shape) != data.size()) {
        throw NumericsError("tensor data length " + std::to_string(data.size()) +
                            " does not match shape product " +
                            std::to_string(shape_product(shape)));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

double Tensor::item() const {
    if (size() != 1) {
        throw NumericsError("item() on non-scalar tensor of shape " + shape_str());
    }
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

void Tensor::ensure_finite(const std::string& what) const {
    if (!all_finite()) {
        throw NumericsError("non-finite value in " + what);
    }
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << ",";
        os << shape_[i];
    }
    os << "]";
    return os.str();
}

} // namespace cde
