// Command-line front end. Human-readable output goes to stdout; the last line
// of every successful run is "summary <json>". Exit codes: 0 success, 1 usage
// error, 2 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "cisrdcnn/cisrdcnn.hpp"

using namespace cisr;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

void summary(json j) { std::cout << "summary " << j.dump() << std::endl; }

json db_value(double v)
{
    if (std::isinf(v))
        return "inf";
    return v;
}

LumaImage load_luma(const fs::path& p)
{
    const io::LoadedImage img = io::load_image(p);
    if (img.converted_from_color)
        std::cerr << "note: " << p.string() << " is color; using its luminance\n";
    return img.luma;
}

fs::path model_dir_or_env(const std::string& flag)
{
    if (!flag.empty())
        return flag;
    if (auto d = lbrc::ModelBank::default_dir())
        return *d;
    throw CLI::RequiredError("--models-dir (or " + std::string(lbrc::ModelBank::kEnvVar) + ")");
}

struct Degrade {
    std::string in, out_y, out_z, out_stream;
    int qf = 10;

    void add(CLI::App& app)
    {
        auto* c = app.add_subcommand("degrade", "Downsample by 2 and JPEG-code an image");
        c->add_option("--in", in, "Input image (PNG or PGM)")->required();
        c->add_option("--qf", qf, "JPEG quality factor")->required()->check(CLI::Range(1, 100));
        c->add_option("--out-y", out_y, "Downsampled image before coding")->required();
        c->add_option("--out-z", out_z, "Decoded JPEG image")->required();
        c->add_option("--out-stream", out_stream, "Also write the JPEG stream");
        c->callback([this] { run(); });
    }

    void run() const
    {
        const LumaImage x = load_luma(in);
        const jpeg::Degraded d = jpeg::degrade(x, qf);
        io::save_image(out_y, d.y);
        io::save_image(out_z, d.z);
        if (!out_stream.empty())
            io::write_bytes(out_stream, d.stream.bytes);
        std::cout << "y " << d.y.width << "x" << d.y.height << ", stream " << d.stream.bytes.size() << " bytes\n";
        summary({{"command", "degrade"}, {"qf", qf}, {"width", d.y.width}, {"height", d.y.height},
            {"stream_bytes", d.stream.bytes.size()}, {"bpp_original", d.stream.bpp(x.width * x.height)}});
    }
};

struct Train {
    std::string config, stage = "all";
    std::optional<std::uint64_t> seed;
    bool resume = false;

    void add(CLI::App& app)
    {
        auto* c = app.add_subcommand("train", "Train stage 1, 2, 3, joint, or all of them in order");
        c->add_option("--config", config, "JSON training config")->required();
        c->add_option("--stage", stage, "1, 2, 3, joint or all")
            ->check(CLI::IsMember({"1", "2", "3", "joint", "all", "dbcnn", "uscnn", "qecnn"}));
        c->add_option("--seed", seed, "Override the config seed");
        c->add_flag("--resume", resume, "Skip stages whose checkpoint already exists");
        c->callback([this] { run(); });
    }

    void run() const
    {
        train::TrainConfig cfg = train::load_config(config);
        if (seed)
            cfg.seed = *seed;
        cfg.resume = cfg.resume || resume;
        train::Trainer t(cfg, &std::cout);
        std::vector<train::StageResult> results;
        if (stage == "all") {
            results = t.run_all();
        } else {
            results.push_back(t.run(train::parse_stage(stage)));
        }
        json stages = json::array();
        for (const auto& r : results) {
            json s = {{"stage", train::stage_name(r.stage)}, {"checkpoint", r.checkpoint.string()},
                {"resumed", r.resumed}};
            if (!r.curve.empty()) {
                s["initial_val_loss"] = r.curve.front().val_loss;
                s["final_val_loss"] = r.curve.back().val_loss;
                s["epochs"] = r.curve.size() - 1;
            }
            stages.push_back(s);
        }
        summary({{"command", "train"}, {"qf", cfg.qf}, {"seed", cfg.seed}, {"stages", stages},
            {"loss_curve", t.context().curve_path().string()}});
    }
};

struct Sr {
    std::string in, model, out;
    std::optional<int> qf;
    std::size_t tile = kInferenceTile;

    void add(CLI::App& app)
    {
        auto* c = app.add_subcommand("sr", "Restore and upscale a decoded JPEG image by 2");
        c->add_option("--in", in, "Decoded low-resolution image")->required();
        c->add_option("--model", model,
            "Checkpoint file, or a model directory (default $" + std::string(lbrc::ModelBank::kEnvVar) + ")");
        c->add_option("--qf", qf, "Quality factor for picking a model from a directory")->check(CLI::Range(1, 100));
        c->add_option("--out", out, "Output image")->required();
        c->add_option("--tile", tile, "Tile edge in input pixels")->check(CLI::PositiveNumber);
        c->callback([this] { run(); });
    }

    void run() const
    {
        const LumaImage z = load_luma(in);
        const fs::path source = model_dir_or_env(model);
        net::Network n;
        fs::path used = source;
        if (fs::is_directory(source)) {
            if (!qf)
                throw CLI::RequiredError("--qf (needed to pick a model from " + source.string() + ")");
            const lbrc::ModelBank bank(source);
            const lbrc::Selection s = bank.select(*qf, true);
            if (!s.exact())
                std::cerr << "note: no model for qf " << *qf << ", using qf " << s.entry->qf << "\n";
            n = s.entry->model;
            used = s.entry->path;
        } else {
            n = net::load_checkpoint(source);
        }
        const LumaImage x = super_resolve(z, n, tile);
        io::save_image(out, x);
        std::cout << z.width << "x" << z.height << " -> " << x.width << "x" << x.height << "\n";
        summary({{"command", "sr"}, {"width", x.width}, {"height", x.height}, {"model", used.string()},
            {"model_qf", n.meta.qf}, {"model_checkpoint_hash", net::checkpoint_hash(n)}});
    }
};

struct Eval {
    std::string ref, test, csv, id, method;
    std::size_t crop = 2;

    void add(CLI::App& app)
    {
        auto* c = app.add_subcommand("eval", "PSNR and SSIM on luminance");
        c->add_option("--ref", ref, "Reference image")->required();
        c->add_option("--test", test, "Test image")->required();
        c->add_option("--crop", crop, "Border pixels removed before comparison");
        c->add_option("--csv", csv, "Append a row to this CSV report");
        c->add_option("--id", id, "Image id for the CSV row");
        c->add_option("--method", method, "Method tag for the CSV row");
        c->callback([this] { run(); });
    }

    void run() const
    {
        const LumaImage a = load_luma(ref), b = load_luma(test);
        const metrics::MetricReport r = metrics::evaluate(a, b, crop, id.empty() ? fs::path(test).stem().string() : id, method);
        std::cout << "PSNR " << metrics::format_db(r.psnr_db) << " dB, SSIM " << r.ssim << "\n";
        if (!csv.empty()) {
            const bool fresh = !fs::exists(csv);
            std::ofstream os(csv, std::ios::app);
            if (!os)
                throw io::IoError("cannot write " + csv);
            if (fresh)
                metrics::write_csv_header(os);
            metrics::write_csv_row(os, r);
        }
        summary({{"command", "eval"}, {"psnr_db", db_value(r.psnr_db)}, {"ssim", r.ssim}, {"crop", crop}});
    }
};

struct RdCurve {
    std::vector<std::string> in;
    std::string models_dir, out_csv, dat_dir;
    std::vector<int> qfs = lbrc::kDefaultSweep;
    std::size_t crop = 2;
    bool exact = false;

    void add(CLI::App& app)
    {
        auto* c = app.add_subcommand("rd-curve", "Rate-distortion sweep of direct JPEG against LBRC");
        c->add_option("--in", in, "Original images")->required();
        c->add_option("--models-dir", models_dir,
            "Directory of checkpoints (default $" + std::string(lbrc::ModelBank::kEnvVar) + ")");
        c->add_option("--qfs", qfs, "Comma-separated quality factors")->delimiter(',')->check(CLI::Range(1, 100));
        c->add_option("--out-csv", out_csv, "CSV output")->required();
        c->add_option("--dat-dir", dat_dir, "Also write jpeg.dat and lbrc.dat here");
        c->add_option("--crop", crop, "Border pixels removed before PSNR");
        c->add_flag("--exact-qf", exact, "Require a model for every swept qf");
        c->callback([this] { run(); });
    }

    void run() const
    {
        const lbrc::ModelBank bank(model_dir_or_env(models_dir));
        for (const auto& s : bank.skipped())
            std::cerr << "note: skipped " << s << "\n";
        lbrc::SweepOptions opt{qfs, crop, !exact};
        std::vector<lbrc::RdPoint> all;
        json images = json::array();
        for (const std::string& path : in) {
            const std::string image_id = fs::path(path).stem().string();
            const auto pts = lbrc::rd_sweep(load_luma(path), image_id, bank, opt);
            const lbrc::Crossover c = lbrc::crossover(pts, pts);
            std::cout << image_id << ": ";
            if (c.found()) {
                std::cout << "lbrc ahead over";
                for (const auto& w : c.lbrc_wins)
                    std::cout << " [" << w.lo << ", " << w.hi << "]";
                std::cout << " bpp, max gain " << c.max_gain_db << " dB at " << c.max_gain_bpp << " bpp\n";
            } else {
                std::cout << "no matched-rate region where lbrc is ahead\n";
            }
            json wins = json::array();
            for (const auto& w : c.lbrc_wins)
                wins.push_back({w.lo, w.hi});
            images.push_back({{"image_id", image_id}, {"lbrc_wins_bpp", wins}, {"low_rate_win", c.low_rate_win()}});
            all.insert(all.end(), pts.begin(), pts.end());
        }
        std::ofstream os(out_csv);
        if (!os)
            throw io::IoError("cannot write " + out_csv);
        lbrc::write_rd_csv_header(os);
        for (const auto& p : all)
            lbrc::write_rd_csv_row(os, p);
        if (!dat_dir.empty()) {
            fs::create_directories(dat_dir);
            for (const char* m : {"jpeg", "lbrc"}) {
                std::ofstream d(fs::path(dat_dir) / (std::string(m) + ".dat"));
                lbrc::write_dat(d, all, m);
            }
        }
        summary({{"command", "rd-curve"}, {"points", all.size()}, {"csv", out_csv}, {"models", bank.available()},
            {"images", images}});
    }
};

struct GradCheck {
    std::size_t seeds = 5;
    std::uint64_t seed = 1;
    double threshold = 1e-4;
    int* exit_code = nullptr;

    void add(CLI::App& app, int& code)
    {
        exit_code = &code;
        auto* c = app.add_subcommand("grad-check", "Compare analytic gradients with central differences");
        c->add_option("--seeds", seeds, "Number of random seeds")->check(CLI::PositiveNumber);
        c->add_option("--seed", seed, "First seed");
        c->callback([this] { run(); });
    }

    void run() const
    {
        const auto results = gradcheck::run_suite(seeds, {}, seed);
        double worst = 0.0;
        json layers = json::object();
        for (const auto& r : results) {
            std::printf("%-22s max rel error %.3e  (%zu checked, %zu skipped at ReLU kinks)\n", r.layer.c_str(),
                r.max_rel_error, r.checked, r.skipped);
            worst = std::max(worst, r.max_rel_error);
            layers[r.layer] = r.max_rel_error;
        }
        const bool ok = worst < threshold;
        std::cout << (ok ? "all layers below " : "FAILED: some layer at or above ") << threshold << "\n";
        summary({{"command", "grad-check"}, {"seeds", seeds}, {"max_rel_error", worst}, {"passed", ok},
            {"layers", layers}});
        if (!ok)
            *exit_code = kRuntime;
    }
};

struct Codec {
    std::string in, out;
    int qf = 75;

    void add(CLI::App& app)
    {
        auto* c = app.add_subcommand("codec", "Baseline JPEG encode or decode");
        c->require_subcommand(1);
        auto* enc = c->add_subcommand("encode", "Image to JPEG stream");
        enc->add_option("--in", in, "Input image")->required();
        enc->add_option("--out", out, "Output JPEG")->required();
        enc->add_option("--qf", qf, "Quality factor")->check(CLI::Range(1, 100));
        enc->callback([this] { encode(); });
        auto* dec = c->add_subcommand("decode", "JPEG stream to image");
        dec->add_option("--in", in, "Input JPEG")->required();
        dec->add_option("--out", out, "Output image")->required();
        dec->callback([this] { decode(); });
    }

    void encode() const
    {
        const LumaImage img = load_luma(in);
        const jpeg::JpegStream s = jpeg::jpeg_encode(img, qf);
        io::write_bytes(out, s.bytes);
        std::cout << s.bytes.size() << " bytes, " << s.bpp() << " bpp\n";
        summary({{"command", "codec encode"}, {"qf", qf}, {"bytes", s.bytes.size()}, {"bpp", s.bpp()}});
    }

    void decode() const
    {
        const auto bytes = io::read_bytes(in);
        const LumaImage img = jpeg::jpeg_decode(bytes);
        io::save_image(out, img);
        std::cout << img.width << "x" << img.height << "\n";
        json j = {{"command", "codec decode"}, {"width", img.width}, {"height", img.height}};
        if (auto q = jpeg::stream_quality(bytes))
            j["qf"] = *q;
        summary(j);
    }
};

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Compressed-image super-resolution (x2) with deblocking, upsampling and enhancement networks"};
    app.require_subcommand(1);
    int code = 0;
    Degrade degrade;
    Train train;
    Sr sr;
    Eval eval;
    RdCurve rd;
    GradCheck gc;
    Codec codec;
    degrade.add(app);
    train.add(app);
    sr.add(app);
    eval.add(app);
    rd.add(app);
    gc.add(app, code);
    codec.add(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << "run '" << argv[0] << " --help' for usage\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return code;
}
