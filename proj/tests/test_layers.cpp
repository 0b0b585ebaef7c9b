#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cisrdcnn/layers.hpp"

using namespace cisr::nn;

namespace {

Tensor4 randn(Shape4 s, std::mt19937_64& rng, double sd = 1.0)
{
    std::normal_distribution<double> d(0.0, sd);
    Tensor4 t(s);
    for (double& v : t.data())
        v = d(rng);
    return t;
}

ConvLayer rand_layer(Shape4 ws, std::size_t bias_len, std::size_t stride, std::size_t pad, std::mt19937_64& rng)
{
    ConvLayer l{randn(ws, rng), std::vector<double>(bias_len), stride, pad, 0};
    std::normal_distribution<double> d;
    for (double& b : l.bias)
        b = d(rng);
    return l;
}

// Direct quadruple loop over the correlation definition.
Tensor4 naive_conv(const Tensor4& x, const ConvLayer& l)
{
    const Shape4 is = x.shape(), ws = l.weights.shape();
    const std::size_t k = ws.h;
    const std::size_t oh = (is.h + 2 * l.pad - k) / l.stride + 1, ow = (is.w + 2 * l.pad - k) / l.stride + 1;
    Tensor4 out({is.n, ws.n, oh, ow});
    for (std::size_t n = 0; n < is.n; ++n)
        for (std::size_t o = 0; o < ws.n; ++o)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t xo = 0; xo < ow; ++xo) {
                    double s = l.bias[o];
                    for (std::size_t c = 0; c < is.c; ++c)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const auto iy = static_cast<std::ptrdiff_t>(y * l.stride + ky) - static_cast<std::ptrdiff_t>(l.pad);
                                const auto ix = static_cast<std::ptrdiff_t>(xo * l.stride + kx) - static_cast<std::ptrdiff_t>(l.pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(is.h) || ix >= static_cast<std::ptrdiff_t>(is.w))
                                    continue;
                                s += l.weights.at(o, c, ky, kx) * x.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
                            }
                    out.at(n, o, y, xo) = s;
                }
    return out;
}

void expect_close(const Tensor4& a, const Tensor4& b, double tol)
{
    ASSERT_EQ(a.shape(), b.shape());
    for (std::size_t i = 0; i < a.size(); ++i)
        ASSERT_NEAR(a[i], b[i], tol) << "at flat index " << i;
}

}  // namespace

TEST(Conv2d, MatchesNaiveLoop)
{
    std::mt19937_64 rng(1);
    for (auto [stride, pad, k] : {std::tuple{1u, 1u, 3u}, {1u, 0u, 3u}, {2u, 1u, 3u}, {2u, 4u, 9u}, {1u, 2u, 5u}}) {
        const Tensor4 x = randn({2, 3, 11, 9}, rng);
        const ConvLayer l = rand_layer({4, 3, k, k}, 4, stride, pad, rng);
        expect_close(conv2d_forward(x, l), naive_conv(x, l), 1e-12);
    }
}

TEST(Conv2d, SamePaddingPreservesSize)
{
    std::mt19937_64 rng(2);
    const ConvLayer l = rand_layer({5, 2, 3, 3}, 5, 1, 1, rng);
    EXPECT_EQ(conv2d_forward(randn({1, 2, 7, 13}, rng), l).shape(), (Shape4{1, 5, 7, 13}));
}

TEST(Conv2d, RejectsChannelMismatch)
{
    std::mt19937_64 rng(3);
    const ConvLayer l = rand_layer({5, 2, 3, 3}, 5, 1, 1, rng);
    EXPECT_THROW(conv2d_forward(randn({1, 3, 7, 7}, rng), l), ShapeError);
}

// <A x, y> = <x, A^T y>: the input gradient of a convolution is its adjoint.
TEST(Conv2d, BackwardInputIsAdjoint)
{
    std::mt19937_64 rng(4);
    const Tensor4 x = randn({2, 3, 10, 8}, rng);
    ConvLayer l = rand_layer({4, 3, 5, 5}, 4, 2, 2, rng);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
    const Tensor4 ax = conv2d_forward(x, l);
    const Tensor4 y = randn(ax.shape(), rng);
    const double lhs = dot(ax.data(), y.data());
    const double rhs = dot(x.data(), conv2d_backward(x, l, y).input.data());
    EXPECT_NEAR(lhs, rhs, 1e-10 * std::abs(lhs));
}

TEST(Deconv2d, IsAdjointOfStridedConv)
{
    std::mt19937_64 rng(5);
    for (std::size_t out_pad : {0u, 1u}) {
        // Weights (in_ch, out_ch, k, k): as a conv they map out_ch -> in_ch.
        ConvLayer l = rand_layer({3, 2, 9, 9}, 2, 2, 6, rng);
        l.output_pad = out_pad;
        std::fill(l.bias.begin(), l.bias.end(), 0.0);
        const Tensor4 y = randn({2, 3, 7, 6}, rng);
        const Tensor4 up = deconv2d_forward(y, l);
        ConvLayer as_conv = l;
        as_conv.bias.assign(3, 0.0);
        const Tensor4 x = randn(up.shape(), rng);
        const Tensor4 down = conv2d_forward(x, as_conv);
        ASSERT_EQ(down.shape(), y.shape());
        const double lhs = dot(down.data(), y.data());
        const double rhs = dot(x.data(), up.data());
        EXPECT_NEAR(lhs, rhs, 1e-10 * std::abs(lhs));
    }
}

TEST(Deconv2d, DoublesSizeWithScaleGeometry)
{
    std::mt19937_64 rng(6);
    ConvLayer l = rand_layer({4, 1, 9, 9}, 1, 2, 6, rng);
    l.output_pad = 1;
    // A 1-pixel halo around an h x w plane gives exactly 2h x 2w.
    EXPECT_EQ(deconv2d_forward(randn({1, 4, 12, 7}, rng), l).shape(), (Shape4{1, 1, 20, 10}));
    EXPECT_EQ(deconv2d_output_shape({1, 4, 22, 12}, l), (Shape4{1, 1, 40, 20}));
}

TEST(Deconv2d, RejectsOtherStrides)
{
    std::mt19937_64 rng(7);
    ConvLayer l = rand_layer({1, 1, 3, 3}, 1, 1, 1, rng);
    EXPECT_THROW(deconv2d_forward(randn({1, 1, 4, 4}, rng), l), std::invalid_argument);
}

TEST(BatchNorm, TrainModeNormalizesPerChannel)
{
    std::mt19937_64 rng(8);
    Tensor4 x = randn({4, 3, 5, 5}, rng, 3.0);
    for (std::size_t i = 0; i < x.size(); ++i)
        x[i] += 7.0;
    BatchNorm bn = BatchNorm::identity(3);
    bn.gamma = {2.0, 0.5, 1.0};
    bn.beta = {-1.0, 0.0, 3.0};
    const Tensor4 y = batchnorm_forward(x, bn);
    const double m = 4 * 25;
    for (std::size_t c = 0; c < 3; ++c) {
        double s = 0, ss = 0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) {
                const double v = y.plane(n, c)[i];
                s += v;
                ss += v * v;
            }
        const double mean = s / m, var = ss / m - mean * mean;
        EXPECT_NEAR(mean, bn.beta[c], 1e-10);
        EXPECT_NEAR(var, bn.gamma[c] * bn.gamma[c], 1e-3 * bn.gamma[c] * bn.gamma[c]);
    }
}

TEST(BatchNorm, RunningStatsUseMomentumAndUnbiasedVariance)
{
    Tensor4 x({2, 1, 1, 2}, std::vector<double>{1.0, 2.0, 3.0, 6.0});
    BatchNorm bn = BatchNorm::identity(1);
    batchnorm_forward(x, bn);
    // mean 3, unbiased variance ((4 + 1 + 0 + 9) / 3)
    EXPECT_NEAR(bn.running_mean[0], 0.1 * 3.0, 1e-15);
    EXPECT_NEAR(bn.running_var[0], 0.9 + 0.1 * 14.0 / 3.0, 1e-15);
}

TEST(BatchNorm, EvalModeUsesRunningStatsAndLeavesThemAlone)
{
    Tensor4 x({1, 1, 1, 3}, std::vector<double>{0.0, 1.0, 4.0});
    BatchNorm bn = BatchNorm::identity(1);
    bn.running_mean = {1.0};
    bn.running_var = {4.0};
    bn.gamma = {3.0};
    bn.beta = {0.5};
    bn.mode = Mode::eval;
    const Tensor4 y = batchnorm_forward(x, bn);
    const double inv = 1.0 / std::sqrt(4.0 + 1e-5);
    EXPECT_NEAR(y[0], 3.0 * (0.0 - 1.0) * inv + 0.5, 1e-14);
    EXPECT_NEAR(y[2], 3.0 * (4.0 - 1.0) * inv + 0.5, 1e-14);
    EXPECT_EQ(bn.running_mean[0], 1.0);
    EXPECT_EQ(bn.running_var[0], 4.0);
    EXPECT_EQ(batchnorm_inference(x, bn), y);
}

TEST(Relu, GradientIsZeroAtAndBelowZero)
{
    const Tensor4 x({1, 1, 1, 3}, std::vector<double>{-1.0, 0.0, 2.0});
    const Tensor4 g({1, 1, 1, 3}, 5.0);
    const Tensor4 r = relu_backward(x, g);
    EXPECT_EQ(r[0], 0.0);
    EXPECT_EQ(r[1], 0.0);
    EXPECT_EQ(r[2], 5.0);
    EXPECT_EQ(relu(x)[0], 0.0);
}

TEST(MseLoss, HalfMeanOfSquaredNormPerSample)
{
    const Tensor4 p({2, 1, 1, 2}, std::vector<double>{1.0, 2.0, 3.0, 4.0});
    const Tensor4 t({2, 1, 1, 2}, std::vector<double>{0.0, 0.0, 1.0, 1.0});
    const LossResult r = mse_loss(p, t);
    EXPECT_DOUBLE_EQ(r.loss, (1 + 4 + 4 + 9) / (2.0 * 2.0));
    EXPECT_DOUBLE_EQ(r.grad[3], 3.0 / 2.0);
}
