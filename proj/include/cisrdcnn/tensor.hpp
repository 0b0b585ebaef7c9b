#ifndef CISRDCNN_TENSOR_HPP
#define CISRDCNN_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <new>
#include <string>
#include <vector>

namespace cisr::nn {

/// Cache-line aligned allocation. Vectorized kernels peel differently for
/// differently aligned buffers, which changes the order of floating-point
/// sums; a fixed alignment keeps results independent of heap state.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlignment{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept
    {
    }
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }
    template <class U>
    friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept
    {
        return true;
    }
};

using AlignedVector = std::vector<double, AlignedAllocator<double>>;

/// Dimensions of a 4-axis (batch, channel, height, width) array.
struct Shape4 {
    std::size_t n = 0, c = 0, h = 0, w = 0;

    constexpr std::size_t size() const { return n * c * h * w; }
    constexpr std::size_t plane() const { return h * w; }
    friend constexpr bool operator==(const Shape4&, const Shape4&) = default;

    std::string str() const
    {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + ","
            + std::to_string(w) + ")";
    }
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;

    ShapeError(const std::string& what, const Shape4& a, const Shape4& b)
        : std::invalid_argument(what + ": " + a.str() + " vs " + b.str())
    {
    }
};

/// Dense row-major NCHW tensor of 64-bit reals with an optional gradient buffer.
class Tensor4 {
public:
    Tensor4() = default;

    explicit Tensor4(Shape4 shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {}

    Tensor4(Shape4 shape, const std::vector<double>& values) : shape_(shape), data_(values.begin(), values.end())
    {
        if (data_.size() != shape_.size())
            throw ShapeError("tensor data length " + std::to_string(data_.size())
                + " does not match shape " + shape_.str());
    }

    const Shape4& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const
    {
        return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }
    double& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) { return data_[index(n, c, y, x)]; }
    double at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const { return data_[index(n, c, y, x)]; }

    /// Pointer to the start of plane (n, c).
    double* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
    const double* plane(std::size_t n, std::size_t c) const
    {
        return data_.data() + (n * shape_.c + c) * shape_.plane();
    }

    bool has_grad() const { return !grad_.empty(); }
    std::span<double> grad() { return grad_; }
    std::span<const double> grad() const { return grad_; }

    /// Allocates the gradient buffer when absent and zeroes it.
    void zero_grad()
    {
        grad_.assign(data_.size(), 0.0);
    }
    void drop_grad() { grad_.clear(); grad_.shrink_to_fit(); }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const
    {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    /// Bitwise equality of shape and values.
    friend bool operator==(const Tensor4& a, const Tensor4& b)
    {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape4 shape_;
    AlignedVector data_;
    AlignedVector grad_;
};

inline void require_same_shape(const Tensor4& a, const Tensor4& b, const char* what)
{
    if (a.shape() != b.shape())
        throw ShapeError(what, a.shape(), b.shape());
}

inline double dot(std::span<const double> a, std::span<const double> b)
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += a[i] * b[i];
    return s;
}

/// Elementwise a += b.
inline void accumulate(Tensor4& a, const Tensor4& b)
{
    require_same_shape(a, b, "accumulate");
    for (std::size_t i = 0; i < a.size(); ++i)
        a[i] += b[i];
}

inline Tensor4 add(const Tensor4& a, const Tensor4& b)
{
    require_same_shape(a, b, "add");
    Tensor4 out = a;
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] += b[i];
    return out;
}

inline Tensor4 subtract(const Tensor4& a, const Tensor4& b)
{
    require_same_shape(a, b, "subtract");
    Tensor4 out = a;
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] -= b[i];
    return out;
}

/// Concatenates along the channel axis.
inline Tensor4 concat_channels(const Tensor4& a, const Tensor4& b)
{
    const Shape4& sa = a.shape();
    const Shape4& sb = b.shape();
    if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
        throw ShapeError("concat_channels", sa, sb);
    Tensor4 out({sa.n, sa.c + sb.c, sa.h, sa.w});
    const std::size_t p = sa.plane();
    for (std::size_t n = 0; n < sa.n; ++n) {
        std::copy_n(a.plane(n, 0), sa.c * p, out.plane(n, 0));
        std::copy_n(b.plane(n, 0), sb.c * p, out.plane(n, sa.c));
    }
    return out;
}

/// Extracts channels [first, first + count).
inline Tensor4 slice_channels(const Tensor4& t, std::size_t first, std::size_t count)
{
    const Shape4& s = t.shape();
    if (first + count > s.c)
        throw ShapeError("slice_channels: channel range " + std::to_string(first) + "+" + std::to_string(count)
            + " exceeds " + s.str());
    Tensor4 out({s.n, count, s.h, s.w});
    for (std::size_t n = 0; n < s.n; ++n)
        std::copy_n(t.plane(n, first), count * s.plane(), out.plane(n, 0));
    return out;
}

/// Replicates border pixels outward by `pad` on every side.
inline Tensor4 replicate_pad(const Tensor4& t, std::size_t pad)
{
    const Shape4& s = t.shape();
    if (s.h == 0 || s.w == 0)
        throw ShapeError("replicate_pad on empty spatial extent " + s.str());
    Tensor4 out({s.n, s.c, s.h + 2 * pad, s.w + 2 * pad});
    const auto clampi = [](std::ptrdiff_t v, std::size_t len) {
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(len) - 1));
    };
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t y = 0; y < out.shape().h; ++y) {
                const std::size_t sy = clampi(static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(pad), s.h);
                for (std::size_t x = 0; x < out.shape().w; ++x) {
                    const std::size_t sx = clampi(static_cast<std::ptrdiff_t>(x) - static_cast<std::ptrdiff_t>(pad), s.w);
                    out.at(n, c, y, x) = t.at(n, c, sy, sx);
                }
            }
    return out;
}

/// Adjoint of replicate_pad: folds the halo back onto the border pixels.
inline Tensor4 replicate_pad_backward(const Tensor4& grad_out, std::size_t pad)
{
    const Shape4& g = grad_out.shape();
    if (g.h < 2 * pad + 1 || g.w < 2 * pad + 1)
        throw ShapeError("replicate_pad_backward: gradient " + g.str() + " too small for pad " + std::to_string(pad));
    Tensor4 out({g.n, g.c, g.h - 2 * pad, g.w - 2 * pad});
    const Shape4& s = out.shape();
    const auto clampi = [](std::ptrdiff_t v, std::size_t len) {
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(len) - 1));
    };
    for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t c = 0; c < g.c; ++c)
            for (std::size_t y = 0; y < g.h; ++y) {
                const std::size_t sy = clampi(static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(pad), s.h);
                for (std::size_t x = 0; x < g.w; ++x) {
                    const std::size_t sx = clampi(static_cast<std::ptrdiff_t>(x) - static_cast<std::ptrdiff_t>(pad), s.w);
                    out.at(n, c, sy, sx) += grad_out.at(n, c, y, x);
                }
            }
    return out;
}

}  // namespace cisr::nn

#endif  // CISRDCNN_TENSOR_HPP
