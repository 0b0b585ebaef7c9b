#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "cisrdcnn/checkpoint.hpp"

using namespace cisr;
using namespace cisr::net;

namespace {

Network trained_like(unsigned seed)
{
    Network n = make_network({3, 2, 2, 4}, 30, seed);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0, 0.3);
    for (ParamView& p : parameters(n))
        for (double& v : p.values)
            v += d(rng);
    for (ConvBlock& b : n.db.blocks)
        for (double& v : b.bn.running_var)
            v = std::abs(v) + 0.1;
    n.meta.stage = "joint";
    return n;
}

}  // namespace

TEST(Checkpoint, RoundTripRestoresFloatRoundedParameters)
{
    const Network n = trained_like(1);
    const Network back = deserialize(serialize(n));
    EXPECT_EQ(back.arch, n.arch);
    EXPECT_EQ(back.meta.qf, 30);
    EXPECT_EQ(back.meta.stage, "joint");
    Network rounded = n;
    round_to_float(rounded);
    auto a = parameters(rounded);
    auto b = parameters(const_cast<Network&>(back));
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_TRUE(std::equal(a[i].values.begin(), a[i].values.end(), b[i].values.begin())) << a[i].name;
    EXPECT_EQ(serialize(back), serialize(n));
}

TEST(Checkpoint, RunningStatisticsAreStoredAsRecords)
{
    const Network n = trained_like(2);
    const auto bytes = serialize(n);
    const std::string s(bytes.begin(), bytes.end());
    EXPECT_NE(s.find("dbcnn.0.bn.running_var"), std::string::npos);
    EXPECT_EQ(s.substr(0, 4), "CISR");
}

TEST(Checkpoint, RoundTripReproducesOutputsWithinFloatError)
{
    Network n = trained_like(3);
    const Network back = deserialize(serialize(n));
    nn::Tensor4 z({1, 1, 9, 9});
    for (std::size_t i = 0; i < z.size(); ++i)
        z[i] = (i % 7) / 7.0;
    const auto a = cisrdcnn_forward(z, n), b = cisrdcnn_forward(z, back);
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_NEAR(a[i], b[i], 1e-5 * (1 + std::abs(a[i])));
}

TEST(Checkpoint, RejectsUnknownVersionAndCorruption)
{
    auto bytes = serialize(trained_like(4));
    auto bad_version = bytes;
    bad_version[4] = 2;
    EXPECT_THROW(deserialize(bad_version), CheckpointError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(deserialize(bad_magic), CheckpointError);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 3);
    EXPECT_THROW(deserialize(truncated), CheckpointError);
    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(deserialize(trailing), CheckpointError);
}

TEST(Checkpoint, FilesAndHashes)
{
    const Network n = trained_like(5);
    const auto dir = std::filesystem::temp_directory_path() / "cisrdcnn_ckpt_test";
    save_checkpoint(dir / "m.ckpt", n);
    const Network back = load_checkpoint(dir / "m.ckpt");
    EXPECT_EQ(checkpoint_hash(back), checkpoint_hash(n));
    EXPECT_NE(checkpoint_hash(trained_like(6)), checkpoint_hash(n));
    EXPECT_EQ(checkpoint_hash(n).size(), 16u);
    EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), io::IoError);
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, ContentHashIsFnv1a)
{
    EXPECT_EQ(content_hash({}), "cbf29ce484222325");
    EXPECT_EQ(content_hash({'a'}), "af63dc4c8601ec8c");
}
