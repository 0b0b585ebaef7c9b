#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "cisrdcnn/image_io.hpp"
#include "cisrdcnn/lbrc.hpp"
#include "fixtures.hpp"
#include "libjpeg_ref.hpp"

using namespace cisr;
using namespace cisr::lbrc;

namespace {

const net::Architecture kSmall{2, 2, 2, 4};

LumaImage load(const std::string& rel) { return io::load_image(fixtures::path(rel)).luma; }

class TempDir {
public:
    TempDir()
    {
        static int counter = 0;
        path_ = fs::temp_directory_path() / ("cisr_lbrc_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

net::Network model(int qf, const std::string& stage, std::uint64_t seed = 0)
{
    net::Network n = net::make_identity_network(kSmall, qf, seed);
    n.meta.stage = stage;
    return n;
}

// Center-aligned bilinear x2 with edge clamping, computed on the 0-255 scale.
std::vector<double> bilinear_x2(const LumaImage& in)
{
    const std::size_t w = in.width, h = in.height;
    std::vector<double> out(4 * w * h);
    const auto px = [&](double y, double x) {
        const auto cy = static_cast<std::size_t>(std::clamp(y, 0.0, static_cast<double>(h - 1)));
        const auto cx = static_cast<std::size_t>(std::clamp(x, 0.0, static_cast<double>(w - 1)));
        return static_cast<double>(in.at(cx, cy));
    };
    for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t x = 0; x < 2 * w; ++x) {
            const double sy = (y + 0.5) / 2 - 0.5, sx = (x + 0.5) / 2 - 0.5;
            const double fy = std::floor(sy), fx = std::floor(sx), wy = sy - fy, wx = sx - fx;
            out[y * 2 * w + x] = (1 - wy) * ((1 - wx) * px(fy, fx) + wx * px(fy, fx + 1))
                + wy * ((1 - wx) * px(fy + 1, fx) + wx * px(fy + 1, fx + 1));
        }
    return out;
}

RdPoint pt(const char* method, double bpp, double psnr) { return {method, 0, bpp, psnr, "img", "", 0}; }

}  // namespace

TEST(Lbrc, CodedPlaneIsHalfSizeAndCheaperThanDirectJpeg)
{
    for (const char* name : {"lbrc/flower.png", "lbrc/clock.png", "test/hubble.png", "test/moon.png"}) {
        const LumaImage x = load(name);
        for (int qf : {5, 10, 30, 60, 80}) {
            const Encoded e = lbrc_encode(x, qf);
            EXPECT_EQ(e.stream.width, x.width / 2);
            EXPECT_EQ(e.stream.height, x.height / 2);
            EXPECT_EQ(e.width, x.width);
            const double direct = jpeg::jpeg_encode(x, qf).bpp();
            EXPECT_LT(e.bpp(), direct) << name << " qf " << qf;
            EXPECT_DOUBLE_EQ(e.bpp(), 8.0 * e.stream.bytes.size() / (x.width * x.height));
        }
    }
    const Encoded e = lbrc_encode(load("lbrc/flower.png"), 10);
    EXPECT_EQ(e.stream.width, 128u);
    EXPECT_EQ(e.stream.height, 128u);
}

TEST(Lbrc, StreamDecodesUnderReferenceDecoder)
{
    const LumaImage x = load("lbrc/clock.png");
    for (int qf : {5, 20, 70}) {
        const Encoded e = lbrc_encode(x, qf);
        EXPECT_EQ(libjpeg_ref::decode(e.stream.bytes), jpeg::jpeg_decode(e.stream));
    }
}

TEST(Lbrc, RejectsOddOrTinyImages)
{
    EXPECT_THROW(lbrc_encode(LumaImage(65, 64), 10), std::invalid_argument);
    EXPECT_THROW(lbrc_encode(LumaImage(16, 16), 10), std::invalid_argument);
}

TEST(Lbrc, IdentityModelDecodesToBilinearUpsample)
{
    const LumaImage x = load("lbrc/flower.png");
    const Encoded e = lbrc_encode(x, 10);
    const LumaImage z = jpeg::jpeg_decode(e.stream);
    const net::Network m = model(10, "joint");
    const nn::Tensor4 out = net::tiled_forward(to_tensor(z), m, kInferenceTile, net::receptive_radius(m.arch));
    const auto expected = bilinear_x2(z);
    double err = 0;
    for (std::size_t i = 0; i < expected.size(); ++i)
        err = std::max(err, std::abs(out[i] * 255.0 - expected[i]));
    EXPECT_LT(err, 1e-6);

    const LumaImage img = lbrc_decode(e.stream, m);
    EXPECT_EQ(img.width, x.width);
    EXPECT_EQ(img.height, x.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        ASSERT_LE(std::abs(img.pixels[i] - expected[i]), 0.5 + 1e-6);
}

TEST(Lbrc, StreamQualityIsRecoveredFromTheTables)
{
    const LumaImage x = load("test/moon.png");
    for (int qf = 1; qf <= 100; ++qf) {
        const auto found = jpeg::stream_quality(jpeg::jpeg_encode(x, qf).bytes);
        ASSERT_TRUE(found.has_value()) << qf;
        EXPECT_EQ(jpeg::quant_table_from_qf(*found), jpeg::quant_table_from_qf(qf));
    }
    // Reference-encoded streams use the same scaling rule.
    EXPECT_EQ(jpeg::stream_quality(libjpeg_ref::encode(x, 37)), 37);
    EXPECT_FALSE(jpeg::stream_quality({0x00, 0x01, 0x02}).has_value());
}

TEST(ModelBank, PrefersLaterStagesAndSkipsUnusableFiles)
{
    TempDir tmp;
    net::save_checkpoint(tmp.path() / "a_dbcnn.ckpt", model(10, "dbcnn"));
    net::save_checkpoint(tmp.path() / "b_joint.ckpt", model(10, "joint", 1));
    net::save_checkpoint(tmp.path() / "c_qecnn.ckpt", model(10, "qecnn"));
    net::save_checkpoint(tmp.path() / "d.partial.ckpt", model(20, "dbcnn.partial"));
    net::save_checkpoint(tmp.path() / "e_q60.ckpt", model(60, "joint"));
    io::write_bytes(tmp.path() / "junk.ckpt", {1, 2, 3});
    io::write_bytes(tmp.path() / "notes.txt", {1, 2, 3});

    const ModelBank bank(tmp.path());
    EXPECT_EQ(bank.available(), (std::vector<int>{10, 60}));
    EXPECT_EQ(bank.skipped().size(), 2u);
    const Selection s = bank.select(10);
    EXPECT_TRUE(s.exact());
    EXPECT_EQ(s.entry->stage, "joint");
    EXPECT_EQ(s.entry->path.filename(), "b_joint.ckpt");
    EXPECT_EQ(s.entry->hash, net::checkpoint_hash(net::load_checkpoint(tmp.path() / "b_joint.ckpt")));
}

TEST(ModelBank, MissingModelListsAvailableQualities)
{
    TempDir tmp;
    net::save_checkpoint(tmp.path() / "q10.ckpt", model(10, "joint"));
    net::save_checkpoint(tmp.path() / "q60.ckpt", model(60, "joint"));
    const ModelBank bank(tmp.path());
    try {
        bank.select(30);
        FAIL() << "expected MissingModel";
    } catch (const MissingModel& e) {
        EXPECT_EQ(e.qf(), 30);
        EXPECT_EQ(e.available(), (std::vector<int>{10, 60}));
        EXPECT_NE(std::string(e.what()).find("available qf: 10, 60"), std::string::npos);
    }
    EXPECT_EQ(bank.select(30, true).entry->qf, 10);
    EXPECT_EQ(bank.select(35, true).entry->qf, 10);  // tie goes low
    EXPECT_EQ(bank.select(36, true).entry->qf, 60);
    EXPECT_FALSE(bank.select(36, true).exact());
    EXPECT_THROW(ModelBank(tmp.path() / "absent"), MissingModel);

    // Decoding picks the model from the stream's own tables.
    const Encoded e = lbrc_encode(load("lbrc/clock.png"), 60);
    const Decoded d = lbrc_decode(e.stream, bank);
    EXPECT_EQ(d.stream_qf, 60);
    EXPECT_TRUE(d.model.exact());
    EXPECT_THROW(lbrc_decode(lbrc_encode(load("lbrc/clock.png"), 20).stream, bank), MissingModel);
}

TEST(ModelBank, DefaultDirectoryComesFromEnvironment)
{
    ::setenv(ModelBank::kEnvVar, "/some/models", 1);
    EXPECT_EQ(ModelBank::default_dir(), fs::path("/some/models"));
    ::unsetenv(ModelBank::kEnvVar);
    EXPECT_FALSE(ModelBank::default_dir().has_value());
}

TEST(RdSweep, PointsAreOrderedAndAccounted)
{
    TempDir tmp;
    net::save_checkpoint(tmp.path() / "q10.ckpt", model(10, "joint"));
    const ModelBank bank(tmp.path());
    const LumaImage x = load("lbrc/flower.png");
    SweepOptions opt;
    const auto pts = rd_sweep(x, "flower", bank, opt);
    ASSERT_EQ(pts.size(), 2 * opt.qfs.size());
    const auto j = points_of(pts, "jpeg"), l = points_of(pts, "lbrc");
    for (std::size_t i = 1; i < j.size(); ++i) {
        EXPECT_LT(j[i - 1].bpp, j[i].bpp);
        EXPECT_LE(j[i - 1].psnr_db, j[i].psnr_db);  // coarser quantization never helps
        EXPECT_LT(l[i - 1].bpp, l[i].bpp);
    }
    for (const RdPoint& p : l) {
        const auto same = std::find_if(j.begin(), j.end(), [&](const RdPoint& q) { return q.qf == p.qf; });
        EXPECT_LT(p.bpp, same->bpp);
        EXPECT_EQ(p.model_hash, bank.select(10).entry->hash);
        EXPECT_EQ(p.model_qf, 10);
        EXPECT_EQ(p.bpp, lbrc_encode(x, p.qf).bpp());
        EXPECT_EQ(p.psnr_db, metrics::psnr(x, lbrc_decode(lbrc_encode(x, p.qf).stream, bank.select(10).entry->model), 2));
    }
    for (const RdPoint& p : j)
        EXPECT_TRUE(p.model_hash.empty());

    std::ostringstream csv;
    write_rd_csv_header(csv);
    write_rd_csv_row(csv, j.front());
    EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "method,qf,bpp,psnr_db,image_id,model_checkpoint_hash");
    EXPECT_NE(csv.str().find("\njpeg,5,"), std::string::npos);
    std::ostringstream dat;
    write_dat(dat, pts, "lbrc");
    std::size_t lines = 0;
    for (char c : dat.str())
        lines += c == '\n';
    EXPECT_EQ(lines, 1 + opt.qfs.size());
}

TEST(Crossover, FindsExactSignChanges)
{
    const std::vector<RdPoint> j = {pt("jpeg", 0.2, 20), pt("jpeg", 0.4, 26), pt("jpeg", 0.8, 32)};
    const std::vector<RdPoint> l = {pt("lbrc", 0.1, 21), pt("lbrc", 0.3, 25), pt("lbrc", 0.6, 28)};
    const Crossover c = crossover(j, l);
    EXPECT_DOUBLE_EQ(c.overlap.lo, 0.2);
    EXPECT_DOUBLE_EQ(c.overlap.hi, 0.6);
    ASSERT_EQ(c.lbrc_wins.size(), 1u);
    // At 0.2: lbrc 23, jpeg 20. At 0.3: 25 vs 23. At 0.4: 26 vs 26 exactly.
    EXPECT_DOUBLE_EQ(c.lbrc_wins[0].lo, 0.2);
    EXPECT_NEAR(c.lbrc_wins[0].hi, 0.4, 1e-12);
    EXPECT_DOUBLE_EQ(c.max_gain_db, 3.0);
    EXPECT_DOUBLE_EQ(c.max_gain_bpp, 0.2);
    EXPECT_TRUE(c.found());
    EXPECT_TRUE(c.low_rate_win());
}

TEST(Crossover, NeverExtrapolates)
{
    // lbrc beats jpeg only below the lowest jpeg rate, which is unmeasured territory.
    const std::vector<RdPoint> j = {pt("jpeg", 0.5, 25), pt("jpeg", 1.0, 30)};
    const std::vector<RdPoint> l = {pt("lbrc", 0.1, 40), pt("lbrc", 0.4, 40), pt("lbrc", 0.6, 20), pt("lbrc", 0.9, 22)};
    const Crossover c = crossover(j, l);
    EXPECT_DOUBLE_EQ(c.overlap.lo, 0.5);
    EXPECT_DOUBLE_EQ(c.overlap.hi, 0.9);
    ASSERT_EQ(c.lbrc_wins.size(), 1u);
    EXPECT_DOUBLE_EQ(c.lbrc_wins[0].lo, 0.5);

    const std::vector<RdPoint> far = {pt("lbrc", 0.01, 40), pt("lbrc", 0.2, 40)};
    const Crossover none = crossover(j, far);
    EXPECT_FALSE(none.found());
    EXPECT_FALSE(interpolate(points_of(j, "jpeg"), 0.2).has_value());
    EXPECT_DOUBLE_EQ(*interpolate(points_of(j, "jpeg"), 0.75), 27.5);
}

TEST(Crossover, HighRateOnlyWinIsNotALowRateWin)
{
    const std::vector<RdPoint> j = {pt("jpeg", 0.2, 25), pt("jpeg", 1.0, 30)};
    const std::vector<RdPoint> l = {pt("lbrc", 0.2, 20), pt("lbrc", 1.0, 35)};
    const Crossover c = crossover(j, l);
    ASSERT_TRUE(c.found());
    EXPECT_NEAR(c.lbrc_wins[0].lo, 0.6, 1e-12);
    EXPECT_FALSE(c.low_rate_win());
}
