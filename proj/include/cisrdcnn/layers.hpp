#ifndef CISRDCNN_LAYERS_HPP
#define CISRDCNN_LAYERS_HPP

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace cisr::nn {

/// Convolution or transposed-convolution layer.
///
/// For a convolution `weights` is (out_ch, in_ch, k, k). For a transposed
/// convolution it is (in_ch, out_ch, k, k): the weight of the strided
/// convolution whose input-adjoint the layer computes, so the same tensor
/// drives both sides of the adjoint identity. `output_pad` only applies to the
/// transposed case and adds rows/columns at the bottom/right of the output.
struct ConvLayer {
    Tensor4 weights;
    std::vector<double> bias;
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t output_pad = 0;

    std::size_t kernel() const { return weights.shape().h; }
};

struct ConvGrads {
    Tensor4 input;
    Tensor4 weights;
    std::vector<double> bias;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

/// Output extent of a strided correlation, or 0 when the window does not fit.
inline std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad)
{
    if (in + 2 * pad < k)
        return 0;
    return (in + 2 * pad - k) / stride + 1;
}

/// Unfolds one (c, h, w) image into a (c*k*k) x (oh*ow) matrix.
inline void im2col(const double* src, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
    std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, double* col)
{
    const auto ih = static_cast<std::ptrdiff_t>(h);
    const auto iw = static_cast<std::ptrdiff_t>(w);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                double* row = col + ((ch * k + ky) * k + kx) * oh * ow;
                const double* plane = src + ch * h * w;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    double* dst = row + oy * ow;
                    if (y < 0 || y >= ih) {
                        std::fill_n(dst, ow, 0.0);
                        continue;
                    }
                    const double* line = plane + y * iw;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        dst[ox] = (x < 0 || x >= iw) ? 0.0 : line[x];
                    }
                }
            }
}

/// Adjoint of im2col: scatters-adds the columns back into a zeroed image.
inline void col2im(const double* col, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
    std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, double* dst)
{
    const auto ih = static_cast<std::ptrdiff_t>(h);
    const auto iw = static_cast<std::ptrdiff_t>(w);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                const double* row = col + ((ch * k + ky) * k + kx) * oh * ow;
                double* plane = dst + ch * h * w;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (y < 0 || y >= ih)
                        continue;
                    const double* srow = row + oy * ow;
                    double* line = plane + y * iw;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (x >= 0 && x < iw)
                            line[x] += srow[ox];
                    }
                }
            }
}

inline void check_layer(const ConvLayer& layer, std::size_t bias_len, const char* what)
{
    const Shape4& ws = layer.weights.shape();
    if (ws.h != ws.w || ws.h == 0)
        throw ShapeError(std::string(what) + ": kernel must be square and non-empty, got " + ws.str());
    if (layer.stride == 0)
        throw std::invalid_argument(std::string(what) + ": stride must be positive");
    if (layer.bias.size() != bias_len)
        throw ShapeError(std::string(what) + ": bias length " + std::to_string(layer.bias.size())
            + " does not match " + std::to_string(bias_len) + " channels of weights " + ws.str());
}

}  // namespace detail

inline Shape4 conv2d_output_shape(const Shape4& in, const ConvLayer& layer)
{
    const Shape4& ws = layer.weights.shape();
    if (in.c != ws.c)
        throw ShapeError("conv2d: input channels differ from weight in_ch", in, ws);
    const std::size_t k = ws.h;
    const std::size_t oh = detail::conv_extent(in.h, k, layer.stride, layer.pad);
    const std::size_t ow = detail::conv_extent(in.w, k, layer.stride, layer.pad);
    if (oh == 0 || ow == 0)
        throw ShapeError("conv2d: kernel does not fit padded input", in, ws);
    return {in.n, ws.n, oh, ow};
}

/// Zero-padded cross-correlation with per-output-channel bias.
inline Tensor4 conv2d_forward(const Tensor4& input, const ConvLayer& layer)
{
    const Shape4& ws = layer.weights.shape();
    detail::check_layer(layer, ws.n, "conv2d");
    const Shape4 out_shape = conv2d_output_shape(input.shape(), layer);
    const Shape4& is = input.shape();
    const std::size_t k = ws.h;
    const std::size_t rows = is.c * k * k;
    const std::size_t cols = out_shape.plane();

    Tensor4 out(out_shape);
    AlignedVector col(rows * cols);
    detail::ConstMapMat wmat(layer.weights.data().data(), ws.n, rows);
    for (std::size_t n = 0; n < is.n; ++n) {
        detail::im2col(input.plane(n, 0), is.c, is.h, is.w, k, layer.stride, layer.pad, out_shape.h, out_shape.w,
            col.data());
        detail::MapMat o(out.plane(n, 0), ws.n, cols);
        o.noalias() = wmat * detail::ConstMapMat(col.data(), rows, cols);
        for (std::size_t c = 0; c < ws.n; ++c)
            o.row(c).array() += layer.bias[c];
    }
    return out;
}

inline ConvGrads conv2d_backward(
    const Tensor4& input, const ConvLayer& layer, const Tensor4& grad_out, bool want_input_grad = true)
{
    const Shape4& ws = layer.weights.shape();
    detail::check_layer(layer, ws.n, "conv2d_backward");
    const Shape4 out_shape = conv2d_output_shape(input.shape(), layer);
    if (grad_out.shape() != out_shape)
        throw ShapeError("conv2d_backward: grad_out does not match forward output", grad_out.shape(), out_shape);
    const Shape4& is = input.shape();
    const std::size_t k = ws.h;
    const std::size_t rows = is.c * k * k;
    const std::size_t cols = out_shape.plane();

    ConvGrads g{want_input_grad ? Tensor4(is) : Tensor4(), Tensor4(ws), std::vector<double>(ws.n, 0.0)};
    AlignedVector col(rows * cols);
    AlignedVector dcol(want_input_grad ? rows * cols : 0);
    detail::ConstMapMat wmat(layer.weights.data().data(), ws.n, rows);
    detail::MapMat dw(g.weights.data().data(), ws.n, rows);
    for (std::size_t n = 0; n < is.n; ++n) {
        detail::ConstMapMat go(grad_out.plane(n, 0), ws.n, cols);
        detail::im2col(input.plane(n, 0), is.c, is.h, is.w, k, layer.stride, layer.pad, out_shape.h, out_shape.w,
            col.data());
        dw.noalias() += go * detail::ConstMapMat(col.data(), rows, cols).transpose();
        for (std::size_t c = 0; c < ws.n; ++c)
            g.bias[c] += go.row(c).sum();
        if (want_input_grad) {
            detail::MapMat dc(dcol.data(), rows, cols);
            dc.noalias() = wmat.transpose() * go;
            detail::col2im(dcol.data(), is.c, is.h, is.w, k, layer.stride, layer.pad, out_shape.h, out_shape.w,
                g.input.plane(n, 0));
        }
    }
    return g;
}

inline Shape4 deconv2d_output_shape(const Shape4& in, const ConvLayer& layer)
{
    const Shape4& ws = layer.weights.shape();
    if (in.c != ws.n)
        throw ShapeError("deconv2d: input channels differ from weight in_ch", in, ws);
    if (in.h == 0 || in.w == 0)
        throw ShapeError("deconv2d: empty spatial extent " + in.str());
    const std::size_t k = ws.h;
    const auto extent = [&](std::size_t len) -> std::size_t {
        const std::ptrdiff_t e = static_cast<std::ptrdiff_t>((len - 1) * layer.stride + k + layer.output_pad)
            - static_cast<std::ptrdiff_t>(2 * layer.pad);
        return e > 0 ? static_cast<std::size_t>(e) : 0;
    };
    const Shape4 out{in.n, ws.c, extent(in.h), extent(in.w)};
    if (out.h == 0 || out.w == 0 || layer.output_pad >= layer.stride)
        throw ShapeError("deconv2d: padding leaves no valid output", in, ws);
    return out;
}

/// Transposed convolution: the input-gradient map of the strided convolution
/// that `layer.weights` defines, plus bias.
inline Tensor4 deconv2d_forward(const Tensor4& input, const ConvLayer& layer)
{
    const Shape4& ws = layer.weights.shape();
    detail::check_layer(layer, ws.c, "deconv2d");
    if (layer.stride != 2)
        throw std::invalid_argument("deconv2d: unsupported stride " + std::to_string(layer.stride) + " (only 2)");
    const Shape4 out_shape = deconv2d_output_shape(input.shape(), layer);
    const Shape4& is = input.shape();
    const std::size_t k = ws.h;
    const std::size_t rows = ws.c * k * k;
    const std::size_t cols = is.plane();

    Tensor4 out(out_shape);
    AlignedVector col(rows * cols);
    detail::ConstMapMat wmat(layer.weights.data().data(), ws.n, rows);
    for (std::size_t n = 0; n < is.n; ++n) {
        detail::MapMat cm(col.data(), rows, cols);
        cm.noalias() = wmat.transpose() * detail::ConstMapMat(input.plane(n, 0), is.c, cols);
        detail::col2im(col.data(), ws.c, out_shape.h, out_shape.w, k, layer.stride, layer.pad, is.h, is.w,
            out.plane(n, 0));
        for (std::size_t c = 0; c < ws.c; ++c) {
            double* p = out.plane(n, c);
            for (std::size_t i = 0; i < out_shape.plane(); ++i)
                p[i] += layer.bias[c];
        }
    }
    return out;
}

inline ConvGrads deconv2d_backward(
    const Tensor4& input, const ConvLayer& layer, const Tensor4& grad_out, bool want_input_grad = true)
{
    const Shape4& ws = layer.weights.shape();
    detail::check_layer(layer, ws.c, "deconv2d_backward");
    if (layer.stride != 2)
        throw std::invalid_argument("deconv2d_backward: unsupported stride " + std::to_string(layer.stride));
    const Shape4 out_shape = deconv2d_output_shape(input.shape(), layer);
    if (grad_out.shape() != out_shape)
        throw ShapeError("deconv2d_backward: grad_out does not match forward output", grad_out.shape(), out_shape);
    const Shape4& is = input.shape();
    const std::size_t k = ws.h;
    const std::size_t rows = ws.c * k * k;
    const std::size_t cols = is.plane();

    ConvGrads g{want_input_grad ? Tensor4(is) : Tensor4(), Tensor4(ws), std::vector<double>(ws.c, 0.0)};
    AlignedVector col(rows * cols);
    detail::ConstMapMat wmat(layer.weights.data().data(), ws.n, rows);
    detail::MapMat dw(g.weights.data().data(), ws.n, rows);
    for (std::size_t n = 0; n < is.n; ++n) {
        detail::im2col(grad_out.plane(n, 0), ws.c, out_shape.h, out_shape.w, k, layer.stride, layer.pad, is.h,
            is.w, col.data());
        detail::ConstMapMat cm(col.data(), rows, cols);
        detail::ConstMapMat x(input.plane(n, 0), is.c, cols);
        dw.noalias() += x * cm.transpose();
        if (want_input_grad) {
            detail::MapMat gi(g.input.plane(n, 0), is.c, cols);
            gi.noalias() = wmat * cm;
        }
        for (std::size_t c = 0; c < ws.c; ++c) {
            const double* p = grad_out.plane(n, c);
            double s = 0.0;
            for (std::size_t i = 0; i < out_shape.plane(); ++i)
                s += p[i];
            g.bias[c] += s;
        }
    }
    return g;
}

enum class Mode { train, eval };

struct BatchNorm {
    std::vector<double> gamma, beta;
    std::vector<double> running_mean, running_var;
    double epsilon = 1e-5;
    double momentum = 0.1;
    Mode mode = Mode::train;

    static BatchNorm identity(std::size_t channels)
    {
        return {std::vector<double>(channels, 1.0), std::vector<double>(channels, 0.0),
            std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
    }
    std::size_t channels() const { return gamma.size(); }
};

/// Per-call state that batchnorm_backward needs.
struct BatchNormCache {
    Mode mode = Mode::eval;
    std::vector<double> inv_std;
    Tensor4 normalized;
};

struct BatchNormGrads {
    Tensor4 input;
    std::vector<double> gamma, beta;
};

namespace detail {

inline void check_bn(const Tensor4& input, const BatchNorm& bn)
{
    const Shape4& s = input.shape();
    if (s.n == 0 || s.h == 0 || s.w == 0)
        throw ShapeError("batchnorm: zero-size extent " + s.str());
    if (bn.channels() != s.c || bn.beta.size() != s.c || bn.running_mean.size() != s.c
        || bn.running_var.size() != s.c)
        throw ShapeError("batchnorm: parameter length " + std::to_string(bn.channels())
            + " does not match channels of " + s.str());
}

}  // namespace detail

/// Batch normalization. Train mode normalizes with the batch statistics over
/// (n, h, w) and folds them into the running statistics; eval mode applies the
/// running statistics and leaves `bn` untouched.
inline Tensor4 batchnorm_forward(const Tensor4& input, BatchNorm& bn, BatchNormCache* cache = nullptr)
{
    detail::check_bn(input, bn);
    const Shape4& s = input.shape();
    const std::size_t m = s.n * s.plane();
    Tensor4 out(s);
    if (cache) {
        cache->mode = bn.mode;
        cache->inv_std.assign(s.c, 0.0);
        cache->normalized = Tensor4(s);
    }
    for (std::size_t c = 0; c < s.c; ++c) {
        double mean = bn.running_mean[c];
        double var = bn.running_var[c];
        if (bn.mode == Mode::train) {
            double sum = 0.0;
            for (std::size_t n = 0; n < s.n; ++n) {
                const double* p = input.plane(n, c);
                for (std::size_t i = 0; i < s.plane(); ++i)
                    sum += p[i];
            }
            mean = sum / static_cast<double>(m);
            double sq = 0.0;
            for (std::size_t n = 0; n < s.n; ++n) {
                const double* p = input.plane(n, c);
                for (std::size_t i = 0; i < s.plane(); ++i)
                    sq += (p[i] - mean) * (p[i] - mean);
            }
            var = sq / static_cast<double>(m);
            const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : var;
            bn.running_mean[c] = (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * mean;
            bn.running_var[c] = (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * unbiased;
        }
        const double inv_std = 1.0 / std::sqrt(var + bn.epsilon);
        for (std::size_t n = 0; n < s.n; ++n) {
            const double* p = input.plane(n, c);
            double* o = out.plane(n, c);
            double* xh = cache ? cache->normalized.plane(n, c) : nullptr;
            for (std::size_t i = 0; i < s.plane(); ++i) {
                const double v = (p[i] - mean) * inv_std;
                if (xh)
                    xh[i] = v;
                o[i] = bn.gamma[c] * v + bn.beta[c];
            }
        }
        if (cache)
            cache->inv_std[c] = inv_std;
    }
    return out;
}

/// Eval-mode forward on immutable parameters.
inline Tensor4 batchnorm_inference(const Tensor4& input, const BatchNorm& bn)
{
    BatchNorm copy = bn;
    copy.mode = Mode::eval;
    return batchnorm_forward(input, copy);
}

inline BatchNormGrads batchnorm_backward(const Tensor4& grad_out, const BatchNorm& bn, const BatchNormCache& cache)
{
    require_same_shape(grad_out, cache.normalized, "batchnorm_backward");
    const Shape4& s = grad_out.shape();
    const double m = static_cast<double>(s.n * s.plane());
    BatchNormGrads g{Tensor4(s), std::vector<double>(s.c, 0.0), std::vector<double>(s.c, 0.0)};
    for (std::size_t c = 0; c < s.c; ++c) {
        double sum_dy = 0.0, sum_dy_xh = 0.0;
        for (std::size_t n = 0; n < s.n; ++n) {
            const double* dy = grad_out.plane(n, c);
            const double* xh = cache.normalized.plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) {
                sum_dy += dy[i];
                sum_dy_xh += dy[i] * xh[i];
            }
        }
        g.beta[c] = sum_dy;
        g.gamma[c] = sum_dy_xh;
        const double scale = bn.gamma[c] * cache.inv_std[c];
        for (std::size_t n = 0; n < s.n; ++n) {
            const double* dy = grad_out.plane(n, c);
            const double* xh = cache.normalized.plane(n, c);
            double* dx = g.input.plane(n, c);
            if (cache.mode == Mode::train) {
                for (std::size_t i = 0; i < s.plane(); ++i)
                    dx[i] = scale * (dy[i] - sum_dy / m - xh[i] * sum_dy_xh / m);
            } else {
                for (std::size_t i = 0; i < s.plane(); ++i)
                    dx[i] = scale * dy[i];
            }
        }
    }
    return g;
}

/// max(x, 0); zero maps to zero.
inline Tensor4 relu(const Tensor4& input)
{
    Tensor4 out = input;
    for (double& v : out.data())
        v = v > 0.0 ? v : 0.0;
    return out;
}

/// Passes gradient only where the forward input was strictly positive.
inline Tensor4 relu_backward(const Tensor4& input, const Tensor4& grad_out)
{
    require_same_shape(input, grad_out, "relu_backward");
    Tensor4 g(input.shape());
    for (std::size_t i = 0; i < g.size(); ++i)
        g[i] = input[i] > 0.0 ? grad_out[i] : 0.0;
    return g;
}

struct LossResult {
    double loss = 0.0;
    Tensor4 grad;
};

/// (1/2N) sum_i ||pred_i - target_i||_F^2 with N the batch size.
inline LossResult mse_loss(const Tensor4& pred, const Tensor4& target)
{
    require_same_shape(pred, target, "mse_loss");
    const Shape4& s = pred.shape();
    if (s.n == 0)
        throw ShapeError("mse_loss: empty batch " + s.str());
    const double inv_n = 1.0 / static_cast<double>(s.n);
    LossResult r{0.0, Tensor4(s)};
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        sum += d * d;
        r.grad[i] = d * inv_n;
    }
    r.loss = 0.5 * inv_n * sum;
    return r;
}

}  // namespace cisr::nn

#endif  // CISRDCNN_LAYERS_HPP
