#include <gtest/gtest.h>

#include <set>

#include "cisrdcnn/gradcheck.hpp"

using namespace cisr::gradcheck;

namespace {

constexpr double kTolerance = 1e-4;

void expect_passes(const Result& r)
{
    EXPECT_GT(r.checked, 0u) << r.layer;
    EXPECT_LT(r.max_rel_error, kTolerance) << r.layer;
}

}  // namespace

class GradCheck : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(GradCheck, Conv2d) { expect_passes(check_conv2d(GetParam())); }
TEST_P(GradCheck, Deconv2d) { expect_passes(check_deconv2d(GetParam())); }
TEST_P(GradCheck, BatchNormTrain) { expect_passes(check_batchnorm(GetParam(), cisr::nn::Mode::train)); }
TEST_P(GradCheck, BatchNormEval) { expect_passes(check_batchnorm(GetParam(), cisr::nn::Mode::eval)); }
TEST_P(GradCheck, Relu) { expect_passes(check_relu(GetParam())); }
TEST_P(GradCheck, ResidualWithSkip) { expect_passes(check_residual(GetParam())); }

TEST_P(GradCheck, EndToEndLossCoversEveryLayerType)
{
    const auto results = check_end_to_end(GetParam());
    std::set<std::string> layers;
    for (const Result& r : results) {
        layers.insert(r.layer);
        expect_passes(r);
        EXPECT_GE(r.checked, 10u) << r.layer;
    }
    for (const char* l : {"end_to_end.input", "end_to_end.conv", "end_to_end.batchnorm", "end_to_end.deconv"})
        EXPECT_TRUE(layers.count(l)) << l;
}

INSTANTIATE_TEST_SUITE_P(Seeds, GradCheck, ::testing::Values(1, 2, 3, 4, 5));

TEST(GradCheckDetector, CatchesAWrongGradient)
{
    // A tracker fed a deliberately wrong analytic value must report a large error.
    double x = 2.0;
    detail::Tracker t("probe", {});
    t.check(x, 5.0, [&] { return x * x; });
    EXPECT_GT(t.result().max_rel_error, 0.1);
}

TEST(RelativeError, UsesTheFloorForTinyValues)
{
    EXPECT_EQ(relative_error(0.0, 0.0, 1e-8), 0.0);
    EXPECT_NEAR(relative_error(1e-12, 2e-12, 1e-8), 1e-4, 1e-12);
    EXPECT_NEAR(relative_error(1.0, 1.1, 1e-8), 0.1 / 1.1, 1e-12);
}
