#ifndef CISRDCNN_LBRC_HPP
#define CISRDCNN_LBRC_HPP

// Low-bit-rate coding: downsample by 2, JPEG-code the small plane, and let
// the network restore full resolution after decoding. Rates are whole-file
// stream bits over the pixel count of the original image.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "degrade.hpp"
#include "inference.hpp"
#include "jpeg.hpp"
#include "metrics.hpp"
#include "resample.hpp"

namespace cisr::lbrc {

namespace fs = std::filesystem;

inline const std::vector<int> kDefaultSweep = {5, 10, 20, 30, 40, 50, 60, 70, 80};

struct Encoded {
    jpeg::JpegStream stream;  // the coded half-resolution plane
    std::size_t width = 0;    // original dimensions
    std::size_t height = 0;

    double bpp() const { return stream.bpp(width * height); }
};

inline Encoded lbrc_encode(const LumaImage& x, int qf)
{
    if (x.width % 2 || x.height % 2)
        throw std::invalid_argument("lbrc_encode: image " + std::to_string(x.width) + "x" + std::to_string(x.height)
            + " must have even dimensions");
    if (x.width < 2 * jpeg::kMinDegradeExtent || x.height < 2 * jpeg::kMinDegradeExtent)
        throw std::invalid_argument("lbrc_encode: image smaller than "
            + std::to_string(2 * jpeg::kMinDegradeExtent) + " px");
    return {jpeg::jpeg_encode(resample::bicubic_resize(x, 0.5), qf), x.width, x.height};
}

/// Decoded stream upscaled by the network; output is twice the coded plane.
inline LumaImage lbrc_decode(const jpeg::JpegStream& stream, const net::Network& model)
{
    return super_resolve(jpeg::jpeg_decode(stream), model);
}

// ---------------------------------------------------------------------------
// Model bank

class MissingModel : public std::runtime_error {
public:
    MissingModel(int qf, std::vector<int> available, const fs::path& dir)
        : std::runtime_error(message(qf, available, dir)), qf_(qf), available_(std::move(available))
    {
    }
    int qf() const { return qf_; }
    const std::vector<int>& available() const { return available_; }

private:
    static std::string message(int qf, const std::vector<int>& available, const fs::path& dir)
    {
        std::string s = "no model for qf " + std::to_string(qf) + " in " + dir.string() + "; available qf: ";
        if (available.empty())
            s += "none";
        for (std::size_t i = 0; i < available.size(); ++i)
            s += (i ? ", " : "") + std::to_string(available[i]);
        return s;
    }
    int qf_;
    std::vector<int> available_;
};

inline int stage_rank(const std::string& stage)
{
    if (stage == "joint")
        return 4;
    if (stage == "qecnn")
        return 3;
    if (stage == "uscnn")
        return 2;
    if (stage == "dbcnn")
        return 1;
    return 0;
}

struct BankEntry {
    int qf = 0;
    std::string stage;
    fs::path path;
    std::string hash;
    net::Network model;
};

struct Selection {
    const BankEntry* entry = nullptr;
    int requested_qf = 0;
    bool exact() const { return entry && entry->qf == requested_qf; }
};

/// Checkpoints found in a directory (non-recursive), one per qf. When several
/// files carry the same qf the most trained stage wins, then the lexically first path.
class ModelBank {
public:
    static constexpr const char* kEnvVar = "CISRDCNN_MODEL_DIR";

    explicit ModelBank(fs::path dir) : dir_(std::move(dir))
    {
        if (!fs::is_directory(dir_))
            throw MissingModel(0, {}, dir_);
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir_))
            if (e.is_regular_file() && e.path().extension() == ".ckpt")
                files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const fs::path& f : files) {
            net::Network n;
            try {
                n = net::load_checkpoint(f);
            } catch (const std::exception& e) {
                skipped_.push_back(f.filename().string() + ": " + e.what());
                continue;
            }
            if (stage_rank(n.meta.stage) == 0) {
                skipped_.push_back(f.filename().string() + ": stage '" + n.meta.stage + "' is not a finished stage");
                continue;
            }
            auto it = entries_.find(n.meta.qf);
            if (it != entries_.end() && stage_rank(it->second.stage) >= stage_rank(n.meta.stage))
                continue;
            BankEntry b{n.meta.qf, n.meta.stage, f, net::checkpoint_hash(n), std::move(n)};
            entries_.insert_or_assign(b.qf, std::move(b));
        }
    }

    /// Directory named by CISRDCNN_MODEL_DIR, when set.
    static std::optional<fs::path> default_dir()
    {
        if (const char* v = std::getenv(kEnvVar); v && *v)
            return fs::path(v);
        return std::nullopt;
    }

    const fs::path& dir() const { return dir_; }
    const std::vector<std::string>& skipped() const { return skipped_; }

    std::vector<int> available() const
    {
        std::vector<int> q;
        for (const auto& [qf, e] : entries_)
            q.push_back(qf);
        return q;
    }

    /// Model for `qf`. With `nearest`, falls back to the closest trained qf
    /// (ties go to the lower qf); the selection records which one was used.
    Selection select(int qf, bool nearest = false) const
    {
        if (auto it = entries_.find(qf); it != entries_.end())
            return {&it->second, qf};
        if (!nearest || entries_.empty())
            throw MissingModel(qf, available(), dir_);
        const BankEntry* best = nullptr;
        for (const auto& [q, e] : entries_)
            if (!best || std::abs(q - qf) < std::abs(best->qf - qf))
                best = &e;
        return {best, qf};
    }

private:
    fs::path dir_;
    std::map<int, BankEntry> entries_;
    std::vector<std::string> skipped_;
};

struct Decoded {
    LumaImage image;
    int stream_qf = 0;  // 0 when the quantization table is not a scaled standard one
    Selection model;
};

/// Decodes with the bank's model for the stream's quality factor.
inline Decoded lbrc_decode(const jpeg::JpegStream& stream, const ModelBank& bank, bool nearest = false)
{
    const std::optional<int> qf = jpeg::stream_quality(stream.bytes);
    if (!qf && !nearest)
        throw MissingModel(0, bank.available(), bank.dir());
    const Selection s = bank.select(qf.value_or(0), nearest);
    return {lbrc_decode(stream, s.entry->model), qf.value_or(0), s};
}

// ---------------------------------------------------------------------------
// Rate-distortion sweep

struct RdPoint {
    std::string method;  // "jpeg" or "lbrc"
    int qf = 0;
    double bpp = 0.0;
    double psnr_db = 0.0;
    std::string image_id;
    std::string model_hash;  // empty for jpeg
    int model_qf = 0;        // qf the model was trained for
};

struct SweepOptions {
    std::vector<int> qfs = kDefaultSweep;
    std::size_t crop = 2;
    bool nearest = true;
};

/// One direct-JPEG and one LBRC point per qf; each method's points are sorted by bpp.
inline std::vector<RdPoint> rd_sweep(
    const LumaImage& original, const std::string& image_id, const ModelBank& bank, const SweepOptions& opt = {})
{
    const LumaImage x = jpeg::crop_even(original);
    std::vector<RdPoint> jp, lb;
    for (int qf : opt.qfs) {
        const jpeg::JpegStream direct = jpeg::jpeg_encode(x, qf);
        jp.push_back({"jpeg", qf, direct.bpp(x.width * x.height),
            metrics::psnr(x, jpeg::jpeg_decode(direct), opt.crop), image_id, "", 0});

        const Selection s = bank.select(qf, opt.nearest);
        const Encoded e = lbrc_encode(x, qf);
        lb.push_back({"lbrc", qf, e.bpp(), metrics::psnr(x, lbrc_decode(e.stream, s.entry->model), opt.crop),
            image_id, s.entry->hash, s.entry->qf});
    }
    const auto by_bpp = [](const RdPoint& a, const RdPoint& b) { return a.bpp < b.bpp; };
    std::sort(jp.begin(), jp.end(), by_bpp);
    std::sort(lb.begin(), lb.end(), by_bpp);
    jp.insert(jp.end(), lb.begin(), lb.end());
    return jp;
}

inline std::vector<RdPoint> points_of(const std::vector<RdPoint>& pts, const std::string& method)
{
    std::vector<RdPoint> out;
    std::copy_if(pts.begin(), pts.end(), std::back_inserter(out), [&](const RdPoint& p) { return p.method == method; });
    std::sort(out.begin(), out.end(), [](const RdPoint& a, const RdPoint& b) { return a.bpp < b.bpp; });
    return out;
}

inline void write_rd_csv_header(std::ostream& os) { os << "method,qf,bpp,psnr_db,image_id,model_checkpoint_hash\n"; }

inline void write_rd_csv_row(std::ostream& os, const RdPoint& p)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", p.bpp);
    os << p.method << ',' << p.qf << ',' << buf << ',' << metrics::format_db(p.psnr_db) << ',' << p.image_id << ','
       << p.model_hash << '\n';
}

/// Two-column "bpp psnr" file for one method, gnuplot-ready.
inline void write_dat(std::ostream& os, const std::vector<RdPoint>& pts, const std::string& method)
{
    os << "# " << method << ": bpp psnr_db (whole-file stream bits / original pixels)\n";
    for (const RdPoint& p : points_of(pts, method)) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%.6f %.4f\n", p.bpp, p.psnr_db);
        os << buf;
    }
}

// ---------------------------------------------------------------------------
// Matched-rate comparison

/// Piecewise-linear PSNR(bpp) through sorted points; nullopt outside the measured range.
inline std::optional<double> interpolate(const std::vector<RdPoint>& sorted, double bpp)
{
    if (sorted.empty() || bpp < sorted.front().bpp || bpp > sorted.back().bpp)
        return std::nullopt;
    for (std::size_t i = 1; i < sorted.size(); ++i)
        if (bpp <= sorted[i].bpp) {
            const RdPoint &a = sorted[i - 1], &b = sorted[i];
            if (b.bpp == a.bpp)
                return std::max(a.psnr_db, b.psnr_db);
            const double t = (bpp - a.bpp) / (b.bpp - a.bpp);
            return a.psnr_db + t * (b.psnr_db - a.psnr_db);
        }
    return sorted.back().psnr_db;
}

struct Interval {
    double lo = 0.0, hi = 0.0;
};

struct Crossover {
    Interval overlap;                 // bpp range covered by both curves
    std::vector<Interval> lbrc_wins;  // sub-ranges where lbrc PSNR > jpeg PSNR
    double max_gain_db = -std::numeric_limits<double>::infinity();
    double max_gain_bpp = 0.0;

    bool found() const { return !lbrc_wins.empty(); }
    /// A winning range reaching into the lower half of the shared rates.
    bool low_rate_win() const
    {
        const double mid = 0.5 * (overlap.lo + overlap.hi);
        return std::any_of(lbrc_wins.begin(), lbrc_wins.end(), [&](const Interval& i) { return i.lo < mid; });
    }
};

/// Compares two curves only where both were measured. The PSNR gap is
/// linear between consecutive breakpoints of either curve, so sign changes
/// are located exactly.
inline Crossover crossover(const std::vector<RdPoint>& jpeg_pts, const std::vector<RdPoint>& lbrc_pts)
{
    const auto j = points_of(jpeg_pts, "jpeg"), l = points_of(lbrc_pts, "lbrc");
    Crossover c;
    if (j.size() < 2 || l.size() < 2)
        return c;
    c.overlap = {std::max(j.front().bpp, l.front().bpp), std::min(j.back().bpp, l.back().bpp)};
    if (c.overlap.lo >= c.overlap.hi)
        return c;
    std::vector<double> xs = {c.overlap.lo, c.overlap.hi};
    for (const auto* v : {&j, &l})
        for (const RdPoint& p : *v)
            if (p.bpp > c.overlap.lo && p.bpp < c.overlap.hi)
                xs.push_back(p.bpp);
    std::sort(xs.begin(), xs.end());
    xs.erase(std::unique(xs.begin(), xs.end()), xs.end());

    const auto gain = [&](double b) { return *interpolate(l, b) - *interpolate(j, b); };
    bool open = false;
    double open_lo = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double g = gain(xs[i]);
        if (g > c.max_gain_db) {
            c.max_gain_db = g;
            c.max_gain_bpp = xs[i];
        }
        if (i > 0) {
            const double g0 = gain(xs[i - 1]);
            if ((g0 > 0) != (g > 0) && g0 != g) {
                const double root = xs[i - 1] + (xs[i] - xs[i - 1]) * g0 / (g0 - g);
                if (g > 0) {
                    open = true;
                    open_lo = root;
                } else if (open) {
                    c.lbrc_wins.push_back({open_lo, root});
                    open = false;
                }
            }
        } else if (g > 0) {
            open = true;
            open_lo = xs[0];
        }
    }
    if (open)
        c.lbrc_wins.push_back({open_lo, xs.back()});
    return c;
}

}  // namespace cisr::lbrc

#endif  // CISRDCNN_LBRC_HPP
