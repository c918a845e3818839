#include "rlrc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rlrc {

std::string shape_str(const Shape & shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            os << 'x';
        }
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape & shape) {
    std::size_t n = 1;
    for (auto e : shape) {
        n *= e;
    }
    return n;
}

static void validate_shape(const Shape & shape) {
    if (shape.empty()) {
        throw ShapeError("tensor shape must have rank >= 1");
    }
    for (auto e : shape) {
        if (e == 0) {
            throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
        }
    }
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_numel(shape_)) {
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
    }
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
    }
    return shape_[axis];
}

void Tensor::set_requires_grad(bool on) {
    requires_grad_ = on;
    if (!on) {
        drop_grad();
    }
}

std::span<float> Tensor::grad() {
    if (grad_.size() != data_.size()) {
        grad_.assign(data_.size(), 0.0f);
    }
    return grad_;
}

void Tensor::zero_grad() {
    std::fill(grad_.begin(), grad_.end(), 0.0f);
}

void Tensor::assign(Shape shape, std::vector<float> data) {
    validate_shape(shape);
    if (data.size() != shape_numel(shape)) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    }
    shape_ = std::move(shape);
    data_ = std::move(data);
    drop_grad();
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void require_finite(std::span<const float> values, const char * where) {
    // Branch-free scan first; inf and nan both turn v - v into nan.
    float probe = 0.0f;
    for (float v : values) {
        probe += v - v;
    }
    if (probe == 0.0f) {
        return;
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw NumericError(std::string("non-finite value at element ") + std::to_string(i) + " in " + where);
        }
    }
}

namespace kernels {

void gemm_nn(const float * a, const float * b, float * c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
    if (!accumulate) {
        std::fill(c, c + m * n, 0.0f);
    }
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        float * __restrict c0 = c + (i + 0) * n;
        float * __restrict c1 = c + (i + 1) * n;
        float * __restrict c2 = c + (i + 2) * n;
        float * __restrict c3 = c + (i + 3) * n;
        const float * a0 = a + (i + 0) * k;
        const float * a1 = a + (i + 1) * k;
        const float * a2 = a + (i + 2) * k;
        const float * a3 = a + (i + 3) * k;
        for (std::size_t p = 0; p < k; ++p) {
            const float * __restrict bp = b + p * n;
            const float x0 = a0[p];
            const float x1 = a1[p];
            const float x2 = a2[p];
            const float x3 = a3[p];
            for (std::size_t j = 0; j < n; ++j) {
                const float bv = bp[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        float * __restrict ci = c + i * n;
        const float * ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const float * __restrict bp = b + p * n;
            const float x = ai[p];
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] += x * bp[j];
            }
        }
    }
}

void transpose(const float * src, float * dst, std::size_t rows, std::size_t cols) {
    constexpr std::size_t tile = 32;
    for (std::size_t r0 = 0; r0 < rows; r0 += tile) {
        const std::size_t r1 = std::min(rows, r0 + tile);
        for (std::size_t c0 = 0; c0 < cols; c0 += tile) {
            const std::size_t c1 = std::min(cols, c0 + tile);
            for (std::size_t r = r0; r < r1; ++r) {
                for (std::size_t cc = c0; cc < c1; ++cc) {
                    dst[cc * rows + r] = src[r * cols + cc];
                }
            }
        }
    }
}

void gemm_nt(const float * a, const float * b, float * c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
    thread_local std::vector<float> bt;
    bt.resize(k * n);
    transpose(b, bt.data(), n, k);
    gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

void gemm_tn(const float * a, const float * b, float * c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
    if (!accumulate) {
        std::fill(c, c + k * n, 0.0f);
    }
    for (std::size_t i = 0; i < m; ++i) {
        const float * ai = a + i * k;
        const float * __restrict bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const float x = ai[p];
            if (x == 0.0f) {
                continue;
            }
            float * __restrict cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                cp[j] += x * bi[j];
            }
        }
    }
}

}  // namespace kernels

Tensor matmul(const Tensor & a, const Tensor & b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor out({a.dim(0), b.dim(1)});
    kernels::gemm_nn(a.data().data(), b.data().data(), out.data().data(), a.dim(0), a.dim(1), b.dim(1), false);
    return out;
}

}  // namespace rlrc
