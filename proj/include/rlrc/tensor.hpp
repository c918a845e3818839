#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rlrc {

// All library failures derive from Error so callers can catch one type.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape & shape);
std::size_t shape_numel(const Shape & shape);

// Dense row-major float32 array. Value type: copies are deep.
//
// The gradient buffer is allocated lazily the first time grad() is
// requested on a tensor with requires_grad set.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor scalar(float v) { return Tensor({1}, std::vector<float>{v}); }

    const Shape & shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }
    std::vector<float> & storage() { return data_; }
    const std::vector<float> & storage() const { return data_; }

    float & operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }
    float & at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    float at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool on);
    bool has_grad() const { return !grad_.empty(); }
    std::span<float> grad();
    std::span<const float> grad() const { return grad_; }
    void zero_grad();
    void drop_grad() { grad_.clear(); grad_.shrink_to_fit(); }

    // Replaces contents; drops any gradient buffer since its shape may no
    // longer match.
    void assign(Shape shape, std::vector<float> data);
    Tensor reshaped(Shape shape) const;

    bool all_finite() const;

private:
    Shape shape_;
    std::vector<float> data_;
    std::vector<float> grad_;
    bool requires_grad_ = false;
};

void require_finite(std::span<const float> values, const char * where);

namespace kernels {

// c[m x n] (+)= a[m x k] * b[k x n]. Each output element accumulates over k
// in ascending order, so a row's result never depends on how many rows are
// processed together.
void gemm_nn(const float * a, const float * b, float * c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);

// c[m x n] (+)= a[m x k] * b[n x k]^T
void gemm_nt(const float * a, const float * b, float * c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);

// c[k x n] (+)= a[m x k]^T * b[m x n]
void gemm_tn(const float * a, const float * b, float * c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);

void transpose(const float * src, float * dst, std::size_t rows, std::size_t cols);

}  // namespace kernels

Tensor matmul(const Tensor & a, const Tensor & b);

}  // namespace rlrc
