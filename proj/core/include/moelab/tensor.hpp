#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <moelab/error.hpp>

namespace moelab {

std::size_t shape_size(const std::vector<std::size_t> &shape);
std::string shape_str(const std::vector<std::size_t> &shape);

// Dense row-major tensor of 64-bit reals. All values are required to stay
// finite; a NaN/Inf is surfaced as an Error by check_finite, never carried
// along silently.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor zeros_like(const Tensor &t);

    const std::vector<std::size_t> &shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t i) const;
    std::size_t rows() const;
    std::size_t cols() const;

    double *data() { return data_.data(); }
    const double *data() const { return data_.data(); }
    double &operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double &at(std::size_t r, std::size_t c);
    double at(std::size_t r, std::size_t c) const;
    std::span<double> row(std::size_t r);
    std::span<const double> row(std::size_t r) const;

    double item() const;
    bool same_shape(const Tensor &o) const { return shape_ == o.shape_; }
    bool is_scalar() const { return size() == 1; }
    void fill(double v);
    void check_finite(const char *context) const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

} // namespace moelab
