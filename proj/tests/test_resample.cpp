#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cisrdcnn/resample.hpp"
#include "fixtures.hpp"

using namespace cisr;
using namespace cisr::resample;

namespace {

Plane random_plane(std::size_t w, std::size_t h, unsigned seed)
{
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> d(0, 255);
    Plane p(w, h);
    for (double& v : p.values)
        v = d(rng);
    return p;
}

void expect_planes_near(const Plane& a, const Plane& b, double tol)
{
    ASSERT_EQ(a.width, b.width);
    ASSERT_EQ(a.height, b.height);
    for (std::size_t i = 0; i < a.values.size(); ++i)
        ASSERT_NEAR(a.values[i], b.values[i], tol) << "at (" << i % a.width << ", " << i / a.width << ")";
}

// Direct 2-D weighted sum over the outer product of the 1-D taps.
Plane non_separable(const Plane& in, double scale)
{
    const std::size_t ow = scaled_extent(in.width, scale), oh = scaled_extent(in.height, scale);
    const auto tx = contributions(in.width, ow, scale), ty = contributions(in.height, oh, scale);
    Plane out(ow, oh);
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double s = 0;
            for (std::size_t j = 0; j < ty[y].index.size(); ++j)
                for (std::size_t i = 0; i < tx[x].index.size(); ++i)
                    s += ty[y].weight[j] * tx[x].weight[i] * in.at(tx[x].index[i], ty[y].index[j]);
            out.at(x, y) = s;
        }
    return out;
}

}  // namespace

TEST(CubicKernel, InterpolatesAndIsNormalizedAtIntegerShifts)
{
    EXPECT_EQ(cubic_weight(0.0), 1.0);
    EXPECT_EQ(cubic_weight(1.0), 0.0);
    EXPECT_EQ(cubic_weight(2.0), 0.0);
    EXPECT_EQ(cubic_weight(-1.5), cubic_weight(1.5));
    for (double f : {0.1, 0.25, 0.5, 0.9})
        EXPECT_NEAR(cubic_weight(f + 1) + cubic_weight(f) + cubic_weight(1 - f) + cubic_weight(2 - f), 1.0, 1e-14);
}

TEST(ReflectIndex, IsHalfSampleSymmetric)
{
    EXPECT_EQ(reflect_index(-1, 5), 0u);
    EXPECT_EQ(reflect_index(-2, 5), 1u);
    EXPECT_EQ(reflect_index(5, 5), 4u);
    EXPECT_EQ(reflect_index(6, 5), 3u);
    EXPECT_EQ(reflect_index(-7, 3), 0u);
}

TEST(BicubicResize, MatchesReferenceDownscale)
{
    const Plane in = fixtures::read_matrix("fixtures/resize_input.txt");
    expect_planes_near(bicubic_resize(in, 0.5), fixtures::read_matrix("fixtures/resize_down.txt"), 1e-9);
}

TEST(BicubicResize, MatchesReferenceUpscale)
{
    const Plane in = fixtures::read_matrix("fixtures/resize_input.txt");
    expect_planes_near(bicubic_resize(in, 2.0), fixtures::read_matrix("fixtures/resize_up.txt"), 1e-9);
}

TEST(BicubicResize, SeparablePassesEqualDirectSum)
{
    for (double s : {0.5, 2.0, 0.75}) {
        const Plane in = random_plane(13, 10, 4);
        expect_planes_near(bicubic_resize(in, s), non_separable(in, s), 1e-9);
    }
}

TEST(BicubicResize, OutputDimsAreRoundedScale)
{
    const Plane in = random_plane(17, 10, 5);
    const Plane d = bicubic_resize(in, 0.5);
    EXPECT_EQ(d.width, 9u);
    EXPECT_EQ(d.height, 5u);
    const Plane u = bicubic_resize(in, 2.0);
    EXPECT_EQ(u.width, 34u);
    EXPECT_EQ(u.height, 20u);
}

TEST(BicubicResize, PreservesConstants)
{
    const Plane c(12, 8, 77.5);
    for (double s : {0.5, 2.0})
        for (double v : bicubic_resize(c, s).values)
            EXPECT_NEAR(v, 77.5, 1e-12);
}

TEST(BicubicResize, AntialiasingSuppressesAliasedFrequencies)
{
    // Period-3 stripes lie above the Nyquist rate of the half-size grid.
    Plane stripes(48, 8);
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 48; ++x)
            stripes.at(x, y) = (x % 3 == 0) ? 200.0 : 0.0;
    const auto amplitude = [](const Plane& p) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t x = 3; x + 3 < p.width; ++x) {
            lo = std::min(lo, p.at(x, 2));
            hi = std::max(hi, p.at(x, 2));
        }
        return hi - lo;
    };
    const double aa = amplitude(bicubic_resize(stripes, 0.5));
    const double raw = amplitude(bicubic_resize(stripes, 0.5, {.antialias = false}));
    EXPECT_LT(aa, 0.25 * raw) << aa << " vs " << raw;
}

TEST(BicubicResize, RejectsDegenerateInput)
{
    EXPECT_THROW(bicubic_resize(Plane(1, 1), 0.4), std::invalid_argument);
    EXPECT_THROW(bicubic_resize(Plane(4, 4), 0.0), std::invalid_argument);
    EXPECT_THROW(bicubic_resize(Plane(), 2.0), std::invalid_argument);
}

TEST(BicubicResize, EightBitVariantRoundsOnce)
{
    LumaImage img(6, 4);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        img.pixels[i] = static_cast<std::uint8_t>(i * 9);
    const LumaImage out = bicubic_resize(img, 2.0);
    const Plane ref = bicubic_resize(to_plane(img), 2.0);
    for (std::size_t i = 0; i < out.pixels.size(); ++i)
        EXPECT_EQ(out.pixels[i], static_cast<std::uint8_t>(std::clamp(std::round(ref.values[i]), 0.0, 255.0)));
}
