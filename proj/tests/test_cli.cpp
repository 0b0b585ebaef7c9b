#include <gtest/gtest.h>
#include <json.hpp>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>

#include "cisrdcnn/cisrdcnn.hpp"
#include "fixtures.hpp"

using namespace cisr;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code = -1;
    std::string out;
    nlohmann::json summary;
};

CliResult run(const std::string& args, const std::string& env = {})
{
    const std::string cmd = env + (env.empty() ? "" : " ") + CISRDCNN_CLI_PATH + " " + args + " 2>/dev/null";
    CliResult r;
    FILE* p = ::popen(cmd.c_str(), "r");
    if (!p)
        return r;
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), buf.size(), p))
        r.out += buf.data();
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    const auto at = r.out.rfind("summary ");
    if (at != std::string::npos)
        r.summary = nlohmann::json::parse(r.out.substr(at + 8));
    return r;
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override
    {
        dir = fs::temp_directory_path()
            / ("cisr_cli_" + std::to_string(::getpid()) + "_"
                + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }
    std::string p(const std::string& name) const { return (dir / name).string(); }

    fs::path dir;
};

const std::string kMoon = fixtures::path("test/moon.png");
const net::Architecture kSmall{2, 2, 2, 4};

}  // namespace

TEST_F(CliTest, UsageErrorsExitWithOne)
{
    EXPECT_EQ(run("").code, 1);
    EXPECT_EQ(run("frobnicate").code, 1);
    EXPECT_EQ(run("eval --ref a.png").code, 1);
    EXPECT_EQ(run("eval --ref a.png --test b.png --bogus").code, 1);
    EXPECT_EQ(run("degrade --in a.png --qf 0 --out-y y.png --out-z z.png").code, 1);
    EXPECT_EQ(run("codec").code, 1);
    EXPECT_EQ(run("--help").code, 0);
}

TEST_F(CliTest, RuntimeFailuresExitWithTwo)
{
    EXPECT_EQ(run("eval --ref /nonexistent.png --test /nonexistent.png").code, 2);
    std::ofstream(p("bad.jpg")) << "not a jpeg";
    EXPECT_EQ(run("codec decode --in " + p("bad.jpg") + " --out " + p("o.png")).code, 2);
    std::ofstream(p("cfg.json")) << R"({"qf": 10, "strde": 32})";
    EXPECT_EQ(run("train --config " + p("cfg.json")).code, 2);
}

TEST_F(CliTest, EvalOfIdenticalImagesReportsSentinel)
{
    const CliResult r = run("eval --ref " + kMoon + " --test " + kMoon);
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(r.summary["psnr_db"], "inf");
    EXPECT_EQ(r.summary["ssim"].get<double>(), 1.0);
    EXPECT_NE(r.out.find("PSNR inf"), std::string::npos);
}

TEST_F(CliTest, FilePipelineMatchesInProcessMetrics)
{
    net::save_checkpoint(p("m.ckpt"), net::make_network(kSmall, 10, 4));
    ASSERT_EQ(run("degrade --in " + kMoon + " --qf 10 --out-y " + p("y.png") + " --out-z " + p("z.png")).code, 0);
    const CliResult sr = run("sr --in " + p("z.png") + " --model " + p("m.ckpt") + " --out " + p("x.png"));
    ASSERT_EQ(sr.code, 0);
    EXPECT_EQ(sr.summary["width"], 128);
    EXPECT_EQ(sr.summary["height"], 128);
    const CliResult ev = run("eval --ref " + kMoon + " --test " + p("x.png") + " --csv " + p("r.csv") + " --method cisr");
    ASSERT_EQ(ev.code, 0);

    const LumaImage x = io::load_image(kMoon).luma;
    const jpeg::Degraded d = jpeg::degrade(x, 10);
    const LumaImage out = super_resolve(d.z, net::load_checkpoint(p("m.ckpt")));
    EXPECT_EQ(io::load_image(p("x.png")).luma, out);
    EXPECT_DOUBLE_EQ(ev.summary["psnr_db"].get<double>(), metrics::psnr(x, out, 2));
    EXPECT_EQ(io::load_image(p("z.png")).luma, d.z);

    std::ifstream csv(p("r.csv"));
    std::string header, row;
    std::getline(csv, header);
    std::getline(csv, row);
    EXPECT_EQ(header, "image_id,method,qf,psnr,ssim,crop");
    EXPECT_EQ(row.rfind("x,cisr,", 0), 0u);
}

TEST_F(CliTest, CodecRoundTripMatchesLibrary)
{
    const CliResult e = run("codec encode --in " + kMoon + " --qf 30 --out " + p("m.jpg"));
    ASSERT_EQ(e.code, 0);
    const auto stream = jpeg::jpeg_encode(io::load_image(kMoon).luma, 30);
    EXPECT_EQ(io::read_bytes(p("m.jpg")), stream.bytes);
    EXPECT_EQ(e.summary["bytes"], stream.bytes.size());
    const CliResult d = run("codec decode --in " + p("m.jpg") + " --out " + p("m.pgm"));
    ASSERT_EQ(d.code, 0);
    EXPECT_EQ(d.summary["qf"], 30);
    EXPECT_EQ(io::load_image(p("m.pgm")).luma, jpeg::jpeg_decode(stream));
}

TEST_F(CliTest, GradCheckPasses)
{
    const CliResult r = run("grad-check --seeds 2 --seed 7");
    EXPECT_EQ(r.code, 0);
    EXPECT_TRUE(r.summary["passed"].get<bool>());
    EXPECT_LT(r.summary["max_rel_error"].get<double>(), 1e-4);
    EXPECT_TRUE(r.summary["layers"].contains("end_to_end.deconv"));
}

TEST_F(CliTest, RdCurveUsesModelDirectoryFromEnvironment)
{
    fs::create_directories(p("models"));
    net::Network n = net::make_identity_network(kSmall, 10);
    n.meta.stage = "joint";
    net::save_checkpoint(p("models") + "/q10.ckpt", n);
    const std::string args = "rd-curve --in " + fixtures::path("lbrc/flower.png") + " " + fixtures::path("lbrc/clock.png")
        + " --qfs 10,30,50 --out-csv " + p("rd.csv") + " --dat-dir " + p("dat");
    const CliResult r = run(args, "CISRDCNN_MODEL_DIR=" + p("models"));
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(r.summary["points"], 12);
    EXPECT_EQ(r.summary["images"].size(), 2u);
    std::ifstream csv(p("rd.csv"));
    std::string line;
    std::size_t rows = 0;
    std::getline(csv, line);
    EXPECT_EQ(line, "method,qf,bpp,psnr_db,image_id,model_checkpoint_hash");
    while (std::getline(csv, line))
        ++rows;
    EXPECT_EQ(rows, 12u);
    EXPECT_TRUE(fs::exists(p("dat") + "/lbrc.dat"));

    EXPECT_EQ(run(args, "CISRDCNN_MODEL_DIR=").code, 1);                  // no directory at all
    EXPECT_EQ(run(args + " --exact-qf", "CISRDCNN_MODEL_DIR=" + p("models")).code, 2);  // no qf 30 model
}

TEST_F(CliTest, SrFromDirectoryNeedsQuality)
{
    fs::create_directories(p("models"));
    net::Network n = net::make_identity_network(kSmall, 20);
    n.meta.stage = "joint";
    net::save_checkpoint(p("models") + "/q20.ckpt", n);
    fs::copy_file(kMoon, p("z.png"));  // 128x128
    EXPECT_EQ(run("sr --in " + p("z.png") + " --model " + p("models") + " --out " + p("o.png")).code, 1);
    const CliResult r = run("sr --in " + p("z.png") + " --model " + p("models") + " --qf 10 --out " + p("o.png"));
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(r.summary["model_qf"], 20);
    EXPECT_EQ(r.summary["width"], 256);
    EXPECT_EQ(io::load_image(p("o.png")).luma.height, 256u);
}

TEST_F(CliTest, TrainRunsAStageFromAConfigFile)
{
    fs::create_directories(p("imgs"));
    int i = 0;
    for (const auto& e : fs::directory_iterator(fixtures::path("train")))
        if (i++ < 3)
            fs::copy_file(e.path(), dir / "imgs" / e.path().filename());
    std::ofstream(p("cfg.json")) << R"({"qf": 10, "train_dir": "imgs", "output_dir": "run", "patch_size": 32,
        "stride": 32, "batch_size": 8, "augment": false, "val_fraction": 0.34,
        "architecture": {"k1": 2, "k2": 2, "k3": 2, "width": 4},
        "epochs": {"dbcnn": 1, "uscnn": 1, "qecnn": 1, "joint": 1}})";
    const CliResult r = run("train --config " + p("cfg.json") + " --stage 1 --seed 5");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(r.summary["seed"], 5);
    EXPECT_EQ(r.summary["stages"][0]["stage"], "dbcnn");
    EXPECT_TRUE(fs::exists(p("run/dbcnn.ckpt")));
    EXPECT_EQ(run("train --config " + p("cfg.json") + " --stage joint").code, 2);  // earlier stages missing
}
