#include <moelab/tensor.hpp>

#include <cmath>
#include <utility>

namespace moelab {

std::size_t shape_size(const std::vector<std::size_t> &shape)
{
    std::size_t n = 1;
    for (std::size_t d : shape)
        n *= d;
    return n;
}

std::string shape_str(const std::vector<std::size_t> &shape)
{
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); i++) {
        if (i)
            s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(std::vector<std::size_t> shape) :
        shape_(std::move(shape)),
        data_(shape_size(shape_), 0.0)
{
    for (std::size_t d : shape_)
        if (d == 0)
            fail("tensor dimensions must be positive, got " + shape_str(shape_));
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data) :
        shape_(std::move(shape)),
        data_(std::move(data))
{
    for (std::size_t d : shape_)
        if (d == 0)
            fail("tensor dimensions must be positive, got " + shape_str(shape_));
    if (shape_size(shape_) != data_.size())
        fail("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
             shape_str(shape_));
}

Tensor Tensor::scalar(double v)
{
    return Tensor({ 1 }, { v });
}

Tensor Tensor::zeros_like(const Tensor &t)
{
    return Tensor(t.shape_);
}

std::size_t Tensor::dim(std::size_t i) const
{
    if (i >= shape_.size())
        fail("dim index out of range");
    return shape_[i];
}

std::size_t Tensor::rows() const
{
    if (rank() != 2)
        fail("rows() requires a rank-2 tensor, got " + shape_str(shape_));
    return shape_[0];
}

std::size_t Tensor::cols() const
{
    if (rank() != 2)
        fail("cols() requires a rank-2 tensor, got " + shape_str(shape_));
    return shape_[1];
}

double &Tensor::at(std::size_t r, std::size_t c)
{
    return data_[r * cols() + c];
}

double Tensor::at(std::size_t r, std::size_t c) const
{
    return data_[r * cols() + c];
}

std::span<double> Tensor::row(std::size_t r)
{
    const std::size_t w = cols();
    return { data_.data() + r * w, w };
}

std::span<const double> Tensor::row(std::size_t r) const
{
    const std::size_t w = cols();
    return { data_.data() + r * w, w };
}

double Tensor::item() const
{
    if (size() != 1)
        fail("item() requires a single-element tensor, got " + shape_str(shape_));
    return data_[0];
}

void Tensor::fill(double v)
{
    for (double &x : data_)
        x = v;
}

void Tensor::check_finite(const char *context) const
{
    for (double x : data_)
        if (!std::isfinite(x))
            fail(std::string("non-finite value produced by ") + context);
}

} // namespace moelab
