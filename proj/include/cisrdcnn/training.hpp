#ifndef CISRDCNN_TRAINING_HPP
#define CISRDCNN_TRAINING_HPP

// Staged training: DBCNN on (z, y), USCNN on (y_hat, x), QECNN on (x_hat, x),
// then all three jointly on (z, x). Upstream sub-networks are frozen (eval
// mode) while a later stage trains; their outputs are computed once per stage
// and cached on disk under the upstream checkpoint hash.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "adam.hpp"
#include "checkpoint.hpp"
#include "degrade.hpp"
#include "image_io.hpp"
#include "network.hpp"

namespace cisr::train {

namespace fs = std::filesystem;
using nn::Mode;
using nn::Shape4;
using nn::Tensor4;

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Loss became non-finite; the last good checkpoint is left at `checkpoint`.
class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(const std::string& what, fs::path checkpoint)
        : std::runtime_error(what + "; last good checkpoint: " + checkpoint.string()), checkpoint_(std::move(checkpoint))
    {
    }
    const fs::path& checkpoint() const { return checkpoint_; }

private:
    fs::path checkpoint_;
};

enum class Stage { dbcnn, uscnn, qecnn, joint };

inline const char* stage_name(Stage s)
{
    switch (s) {
    case Stage::dbcnn: return "dbcnn";
    case Stage::uscnn: return "uscnn";
    case Stage::qecnn: return "qecnn";
    case Stage::joint: return "joint";
    }
    return "";
}

inline Stage parse_stage(const std::string& s)
{
    if (s == "1" || s == "dbcnn")
        return Stage::dbcnn;
    if (s == "2" || s == "uscnn")
        return Stage::uscnn;
    if (s == "3" || s == "qecnn")
        return Stage::qecnn;
    if (s == "joint")
        return Stage::joint;
    throw ConfigError("unknown stage '" + s + "' (expected 1, 2, 3 or joint)");
}

inline constexpr Stage kStages[] = {Stage::dbcnn, Stage::uscnn, Stage::qecnn, Stage::joint};

template <class T>
struct PerStage {
    T dbcnn{}, uscnn{}, qecnn{}, joint{};

    T& operator[](Stage s) { return s == Stage::dbcnn ? dbcnn : s == Stage::uscnn ? uscnn : s == Stage::qecnn ? qecnn : joint; }
    const T& operator[](Stage s) const { return const_cast<PerStage&>(*this)[s]; }
};

/// Upper bound on the patches used to re-estimate batch-norm statistics after an epoch.
inline constexpr std::size_t kRecalibrationPatches = 2048;

struct TrainConfig {
    int qf = 10;
    fs::path train_dir;
    fs::path output_dir = "run";
    std::size_t patch_size = 64;  // HR; LR patches are half this
    std::size_t stride = 32;      // HR
    std::size_t batch_size = 16;
    bool augment = true;  // all 8 rotations/flips of every patch
    std::size_t patches_per_epoch = 0;  // 0 = every training patch
    std::uint64_t seed = 1;
    double val_fraction = 0.1;
    net::Architecture architecture{};
    PerStage<std::size_t> epochs{20, 10, 10, 10};
    PerStage<double> learning_rate{1e-3, 1e-3, 1e-3, 1e-4};
    std::size_t plateau_patience = 3;
    double lr_decay = 0.5;
    double min_learning_rate = 1e-6;
    fs::path init_checkpoint;  // empty = fresh initialization
    bool zero_init_heads = true;  // fresh DBCNN/QECNN heads start at zero, so each branch starts as the identity
    bool resume = false;       // skip stages whose checkpoint already exists

    void validate() const
    {
        if (qf < 1 || qf > 100)
            throw ConfigError("qf must lie in [1, 100]");
        if (patch_size % 2 != 0 || patch_size < 8)
            throw ConfigError("patch_size must be even and at least 8");
        if (stride == 0 || stride % 16 != 0)
            throw ConfigError("stride must be a positive multiple of 16 so LR patches stay on the 8x8 block grid");
        if (batch_size == 0)
            throw ConfigError("batch_size must be positive");
        if (!(val_fraction > 0.0 && val_fraction < 1.0))
            throw ConfigError("val_fraction must lie in (0, 1)");
        if (architecture.k1 == 0 || architecture.k2 == 0 || architecture.k3 == 0 || architecture.width == 0)
            throw ConfigError("architecture depths and width must be positive");
        if (plateau_patience == 0)
            throw ConfigError("plateau_patience must be positive");
        if (!(lr_decay > 0.0 && lr_decay <= 1.0))
            throw ConfigError("lr_decay must lie in (0, 1]");
        for (Stage s : kStages)
            if (!(learning_rate[s] > 0.0))
                throw ConfigError(std::string("learning_rate.") + stage_name(s) + " must be positive");
    }
};

// ---------------------------------------------------------------------------
// Config file (JSON)

namespace detail {

using nlohmann::json;

template <class T>
void read_key(const json& j, const char* key, T& out)
{
    if (j.contains(key))
        out = j.at(key).get<T>();
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where)
{
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; }))
            throw ConfigError("unknown config key '" + where + it.key() + "'");
}

template <class T>
void read_per_stage(const json& j, const char* key, PerStage<T>& out)
{
    if (!j.contains(key))
        return;
    const json& s = j.at(key);
    reject_unknown(s, {"dbcnn", "uscnn", "qecnn", "joint"}, std::string(key) + ".");
    for (Stage st : kStages)
        read_key(s, stage_name(st), out[st]);
}

template <class T>
json per_stage_json(const PerStage<T>& p)
{
    json j;
    for (Stage s : kStages)
        j[stage_name(s)] = p[s];
    return j;
}

}  // namespace detail

/// Parses a JSON config; relative paths resolve against `base_dir`.
inline TrainConfig config_from_json(const nlohmann::json& j, const fs::path& base_dir = {})
{
    TrainConfig c;
    try {
        detail::reject_unknown(j,
            {"qf", "train_dir", "output_dir", "patch_size", "stride", "batch_size", "augment", "patches_per_epoch",
                "seed", "val_fraction", "architecture", "epochs", "learning_rate", "plateau_patience", "lr_decay",
                "min_learning_rate", "init_checkpoint", "zero_init_heads", "resume"},
            "");
        detail::read_key(j, "qf", c.qf);
        std::string s;
        const auto path_key = [&](const char* key, fs::path& out) {
            if (!j.contains(key))
                return;
            const fs::path p = j.at(key).get<std::string>();
            out = p.empty() || p.is_absolute() || base_dir.empty() ? p : base_dir / p;
        };
        path_key("train_dir", c.train_dir);
        path_key("output_dir", c.output_dir);
        path_key("init_checkpoint", c.init_checkpoint);
        detail::read_key(j, "patch_size", c.patch_size);
        detail::read_key(j, "stride", c.stride);
        detail::read_key(j, "batch_size", c.batch_size);
        detail::read_key(j, "augment", c.augment);
        detail::read_key(j, "patches_per_epoch", c.patches_per_epoch);
        detail::read_key(j, "seed", c.seed);
        detail::read_key(j, "val_fraction", c.val_fraction);
        detail::read_key(j, "plateau_patience", c.plateau_patience);
        detail::read_key(j, "lr_decay", c.lr_decay);
        detail::read_key(j, "min_learning_rate", c.min_learning_rate);
        detail::read_key(j, "zero_init_heads", c.zero_init_heads);
        detail::read_key(j, "resume", c.resume);
        if (j.contains("architecture")) {
            const auto& a = j.at("architecture");
            detail::reject_unknown(a, {"k1", "k2", "k3", "width"}, "architecture.");
            detail::read_key(a, "k1", c.architecture.k1);
            detail::read_key(a, "k2", c.architecture.k2);
            detail::read_key(a, "k3", c.architecture.k3);
            detail::read_key(a, "width", c.architecture.width);
        }
        detail::read_per_stage(j, "epochs", c.epochs);
        detail::read_per_stage(j, "learning_rate", c.learning_rate);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline nlohmann::json config_to_json(const TrainConfig& c)
{
    return {
        {"qf", c.qf},
        {"train_dir", c.train_dir.string()},
        {"output_dir", c.output_dir.string()},
        {"patch_size", c.patch_size},
        {"stride", c.stride},
        {"batch_size", c.batch_size},
        {"augment", c.augment},
        {"patches_per_epoch", c.patches_per_epoch},
        {"seed", c.seed},
        {"val_fraction", c.val_fraction},
        {"architecture",
            {{"k1", c.architecture.k1}, {"k2", c.architecture.k2}, {"k3", c.architecture.k3},
                {"width", c.architecture.width}}},
        {"epochs", detail::per_stage_json(c.epochs)},
        {"learning_rate", detail::per_stage_json(c.learning_rate)},
        {"plateau_patience", c.plateau_patience},
        {"lr_decay", c.lr_decay},
        {"min_learning_rate", c.min_learning_rate},
        {"init_checkpoint", c.init_checkpoint.string()},
        {"zero_init_heads", c.zero_init_heads},
        {"resume", c.resume},
    };
}

inline TrainConfig load_config(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return config_from_json(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Dataset

/// Aligned patches: x is 2p x 2p, y and z are p x p, all in [0, 1].
struct Triplet {
    std::size_t lr = 0;
    std::vector<double> x, y, z;
};

struct Dataset {
    std::vector<Triplet> train, val;
    std::vector<std::string> train_images, val_images;
    std::vector<std::string> skipped;  // "name: reason"

    std::size_t lr_side() const { return train.empty() ? 0 : train.front().lr; }
};

/// Square-patch symmetry t in [0, 8): t % 4 quarter turns after an optional
/// horizontal flip (t >= 4).
inline std::vector<double> dihedral(const std::vector<double>& src, std::size_t side, int t)
{
    std::vector<double> out(src.size());
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            std::size_t sy = y, sx = x;
            for (int r = 0; r < t % 4; ++r) {
                const std::size_t ny = side - 1 - sx, nx = sy;  // inverse of a clockwise quarter turn
                sy = ny;
                sx = nx;
            }
            if (t >= 4)
                sx = side - 1 - sx;
            out[y * side + x] = src[sy * side + sx];
        }
    return out;
}

inline Triplet dihedral(const Triplet& t, int k)
{
    return {t.lr, dihedral(t.x, 2 * t.lr, k), dihedral(t.y, t.lr, k), dihedral(t.z, t.lr, k)};
}

namespace detail {

inline std::vector<double> cut(const LumaImage& img, std::size_t x0, std::size_t y0, std::size_t side)
{
    std::vector<double> out(side * side);
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x)
            out[y * side + x] = img.at(x0 + x, y0 + y) / 255.0;
    return out;
}

inline std::vector<fs::path> list_images(const fs::path& dir)
{
    if (!fs::is_directory(dir))
        throw DatasetError("training directory " + dir.string() + " does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        std::string ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (e.is_regular_file() && (ext == ".png" || ext == ".pgm"))
            files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty())
        throw DatasetError("no .png or .pgm images in " + dir.string());
    return files;
}

}  // namespace detail

/// Degrades one whole image and cuts aligned patch triplets on the stride grid.
/// LR patch origins are multiples of the LR stride, itself a multiple of 8,
/// so every patch shares the JPEG block phase.
inline std::vector<Triplet> image_triplets(const LumaImage& img, const TrainConfig& cfg)
{
    const jpeg::Degraded d = jpeg::degrade(img, cfg.qf);
    const LumaImage x = jpeg::crop_even(img);
    const std::size_t p = cfg.patch_size / 2, s = cfg.stride / 2;
    std::vector<Triplet> out;
    for (std::size_t r = 0; r + p <= d.y.height; r += s)
        for (std::size_t c = 0; c + p <= d.y.width; c += s)
            out.push_back({p, detail::cut(x, 2 * c, 2 * r, 2 * p), detail::cut(d.y, c, r, p), detail::cut(d.z, c, r, p)});
    return out;
}

inline Dataset build_dataset(const fs::path& image_dir, const TrainConfig& cfg)
{
    cfg.validate();
    const auto files = detail::list_images(image_dir);
    std::vector<std::pair<std::string, LumaImage>> images;
    Dataset ds;
    for (const fs::path& f : files) {
        const LumaImage img = io::load_image(f).luma;
        if (img.width < cfg.patch_size || img.height < cfg.patch_size || img.width < jpeg::kMinDegradeExtent
            || img.height < jpeg::kMinDegradeExtent) {
            ds.skipped.push_back(f.filename().string() + ": " + std::to_string(img.width) + "x"
                + std::to_string(img.height) + " is smaller than the " + std::to_string(cfg.patch_size) + " px patch");
            continue;
        }
        images.emplace_back(f.filename().string(), img);
    }
    if (images.size() < 2)
        throw DatasetError("need at least 2 usable images in " + image_dir.string() + " for a train/validation split");

    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(cfg.seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(cfg.val_fraction * images.size())), 1, images.size() - 1);
    std::vector<bool> is_val(images.size(), false);
    for (std::size_t i = 0; i < n_val; ++i)
        is_val[order[i]] = true;

    for (std::size_t i = 0; i < images.size(); ++i) {
        auto triplets = image_triplets(images[i].second, cfg);
        if (is_val[i]) {
            ds.val_images.push_back(images[i].first);
            std::move(triplets.begin(), triplets.end(), std::back_inserter(ds.val));
            continue;
        }
        ds.train_images.push_back(images[i].first);
        for (const Triplet& t : triplets) {
            ds.train.push_back(t);
            if (cfg.augment)
                for (int k = 1; k < 8; ++k)
                    ds.train.push_back(dihedral(t, k));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Loss curves

struct CurveRow {
    std::size_t epoch = 0;
    Stage stage = Stage::dbcnn;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double learning_rate = 0.0;
};

inline void write_curve_header(std::ostream& os) { os << "epoch,stage,train_loss,val_loss\n"; }

inline void write_curve_row(std::ostream& os, const CurveRow& r)
{
    char buf[128];
    std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g\n", r.epoch, stage_name(r.stage), r.train_loss, r.val_loss);
    os << buf;
}

struct StageResult {
    Stage stage = Stage::dbcnn;
    std::vector<CurveRow> curve;
    fs::path checkpoint;
    bool resumed = false;  // loaded from an existing checkpoint instead of trained
};

// ---------------------------------------------------------------------------
// Stage problems

namespace detail {

/// Feature vectors of one split, either read from the dataset triplets or
/// owned (derived targets and cached upstream outputs).
struct Column {
    const std::vector<Triplet>* source = nullptr;
    std::vector<double> Triplet::*field = nullptr;
    std::vector<std::vector<double>> owned;
    std::size_t side = 0;

    const std::vector<double>& operator[](std::size_t i) const { return source ? (*source)[i].*field : owned[i]; }
};

inline Tensor4 gather(const Column& col, std::span<const std::size_t> idx)
{
    const std::size_t plane = col.side * col.side;
    Tensor4 t({idx.size(), 1, col.side, col.side});
    for (std::size_t b = 0; b < idx.size(); ++b)
        std::copy_n(col[idx[b]].begin(), plane, t.plane(b, 0));
    return t;
}

struct Split {
    Column input, target;
    std::size_t size = 0;
};

/// One stage's objective: maps an input batch to a prediction of its target,
/// optionally back-propagating into `grads`.
using Objective = std::function<double(const Tensor4& in, const Tensor4& target, net::Network& n, net::Network* grads)>;

inline Objective objective(Stage s)
{
    switch (s) {
    case Stage::dbcnn:
        return [](const Tensor4& in, const Tensor4& tgt, net::Network& n, net::Network* g) {
            net::ResidualCache c;
            const auto l = nn::mse_loss(net::residual_branch(in, n.db, g ? &c : nullptr), tgt);
            if (g)
                net::residual_branch_backward(l.grad, n.db, c, g->db);
            return l.loss;
        };
    case Stage::uscnn:
        return [](const Tensor4& in, const Tensor4& tgt, net::Network& n, net::Network* g) {
            net::UpsampleCache c;
            const auto l = nn::mse_loss(net::upsample_forward(in, n.us, g ? &c : nullptr), tgt);
            if (g)
                net::upsample_backward(l.grad, n.us, c, g->us);
            return l.loss;
        };
    case Stage::qecnn:
        return [](const Tensor4& in, const Tensor4& tgt, net::Network& n, net::Network* g) {
            net::ResidualCache c;
            const auto l = nn::mse_loss(net::residual_branch(in, n.qe, g ? &c : nullptr), tgt);
            if (g)
                net::residual_branch_backward(l.grad, n.qe, c, g->qe);
            return l.loss;
        };
    case Stage::joint:
        return [](const Tensor4& in, const Tensor4& tgt, net::Network& n, net::Network* g) {
            net::ForwardCache c;
            const auto l = nn::mse_loss(net::forward(in, n, g ? &c : nullptr), tgt);
            if (g)
                net::backward(l.grad, n, c, *g);
            return l.loss;
        };
    }
    throw std::logic_error("unknown stage");
}

inline std::vector<net::Part> trained_parts(Stage s)
{
    switch (s) {
    case Stage::dbcnn: return {net::Part::dbcnn};
    case Stage::uscnn: return {net::Part::uscnn};
    case Stage::qecnn: return {net::Part::qecnn};
    case Stage::joint: return {net::Part::dbcnn, net::Part::uscnn, net::Part::qecnn};
    }
    return {};
}

inline void set_stage_modes(net::Network& n, Stage s, Mode trained)
{
    net::set_mode(n, Mode::eval);
    for (net::Part p : trained_parts(s)) {
        if (p == net::Part::dbcnn)
            net::set_mode(n.db, trained);
        if (p == net::Part::uscnn)
            net::set_mode(n.us, trained);
        if (p == net::Part::qecnn)
            net::set_mode(n.qe, trained);
    }
}

inline std::vector<nn::BatchNorm*> batch_norms(net::Network& n, Stage s)
{
    std::vector<nn::BatchNorm*> out;
    const auto add = [&](std::vector<net::ConvBlock>& blocks) {
        for (auto& b : blocks)
            out.push_back(&b.bn);
    };
    for (net::Part p : trained_parts(s)) {
        if (p == net::Part::dbcnn)
            add(n.db.blocks);
        if (p == net::Part::uscnn)
            add(n.us.blocks);
        if (p == net::Part::qecnn)
            add(n.qe.blocks);
    }
    return out;
}

inline std::vector<double> flatten(const Tensor4& t, std::size_t b)
{
    return {t.plane(b, 0), t.plane(b, 0) + t.shape().plane()};
}

inline std::vector<double> difference(const std::vector<double>& a, const std::vector<double>& b)
{
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        d[i] = a[i] - b[i];
    return d;
}

/// Applies an eval-mode map to every vector of a column, in batches.
inline std::vector<std::vector<double>> map_column(const Column& in, std::size_t count, std::size_t batch,
    const std::function<Tensor4(const Tensor4&)>& f)
{
    std::vector<std::vector<double>> out;
    out.reserve(count);
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < count; start += batch) {
        idx.resize(std::min(batch, count - start));
        std::iota(idx.begin(), idx.end(), start);
        const Tensor4 r = f(gather(in, idx));
        for (std::size_t b = 0; b < idx.size(); ++b)
            out.push_back(flatten(r, b));
    }
    return out;
}

// Binary cache of a list of equal-length real vectors.
inline bool read_cache(const fs::path& p, std::vector<std::vector<double>>& out, std::size_t count, std::size_t len)
{
    std::ifstream in(p, std::ios::binary);
    if (!in)
        return false;
    std::uint64_t hdr[2] = {0, 0};
    in.read(reinterpret_cast<char*>(hdr), sizeof hdr);
    if (!in || hdr[0] != count || hdr[1] != len)
        return false;
    out.assign(count, std::vector<double>(len));
    for (auto& v : out)
        in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(len * sizeof(double)));
    return static_cast<bool>(in);
}

inline void write_cache(const fs::path& p, const std::vector<std::vector<double>>& data, std::size_t len)
{
    fs::create_directories(p.parent_path());
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        const std::uint64_t hdr[2] = {data.size(), len};
        out.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
        for (const auto& v : data)
            out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(len * sizeof(double)));
        if (!out)
            throw io::IoError("cannot write cache " + tmp.string());
    }
    fs::rename(tmp, p);
}

/// Fingerprint of the degraded inputs, so a cache never crosses datasets.
inline std::string dataset_fingerprint(const Dataset& ds)
{
    std::vector<std::uint8_t> bytes;
    const auto add = [&](const std::vector<Triplet>& ts) {
        for (const Triplet& t : ts)
            for (double v : t.z)
                bytes.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
        bytes.push_back(0xA5);
    };
    add(ds.train);
    add(ds.val);
    return net::content_hash(bytes);
}

}  // namespace detail

/// Inputs and targets of a stage for both splits. Upstream outputs (y_hat,
/// x_hat) are computed with the frozen upstream network, or read from the cache.
struct StageData {
    detail::Split train, val;
};

struct TrainContext {
    TrainConfig cfg;
    std::ostream* log = nullptr;

    fs::path checkpoint_path(Stage s) const { return cfg.output_dir / (std::string(stage_name(s)) + ".ckpt"); }
    fs::path partial_path(Stage s) const { return cfg.output_dir / (std::string(stage_name(s)) + ".partial.ckpt"); }
    fs::path curve_path() const { return cfg.output_dir / "loss_curve.csv"; }
    fs::path cache_dir() const { return cfg.output_dir / "cache"; }

    template <class... A>
    void info(const char* fmt, A... args) const
    {
        if (!log)
            return;
        char buf[512];
        std::snprintf(buf, sizeof buf, fmt, args...);
        *log << buf << '\n';
        log->flush();
    }
};

inline StageData stage_data(const Dataset& ds, Stage s, const net::Network& upstream, const TrainContext& ctx)
{
    StageData d;
    const std::size_t p = ds.train.empty() ? ds.val.front().lr : ds.train.front().lr;
    const std::size_t batch = std::max<std::size_t>(ctx.cfg.batch_size, 16);
    const auto field = [](const std::vector<Triplet>& ts, std::vector<double> Triplet::*f, std::size_t side) {
        detail::Column c;
        c.source = &ts;
        c.field = f;
        c.side = side;
        return c;
    };
    const auto make_owned = [](detail::Column& c, std::vector<std::vector<double>> v, std::size_t side) {
        c.side = side;
        c.owned = std::move(v);
    };

    const std::string key = net::checkpoint_hash(upstream) + "_" + detail::dataset_fingerprint(ds);
    const auto cached = [&](const char* what, const std::vector<Triplet>& ts, const char* split, std::size_t side,
                            const std::function<Tensor4(const Tensor4&)>& f, const detail::Column& in) {
        const fs::path path = ctx.cache_dir() / (std::string(what) + "_" + split + "_" + key + ".bin");
        std::vector<std::vector<double>> v;
        if (detail::read_cache(path, v, ts.size(), side * side)) {
            ctx.info("cache hit %s", path.string().c_str());
            return v;
        }
        v = detail::map_column(in, ts.size(), batch, f);
        detail::write_cache(path, v, side * side);
        return v;
    };

    for (int split = 0; split < 2; ++split) {
        const std::vector<Triplet>& ts = split == 0 ? ds.train : ds.val;
        detail::Split& out = split == 0 ? d.train : d.val;
        const char* sname = split == 0 ? "train" : "val";
        out.size = ts.size();
        switch (s) {
        case Stage::dbcnn: {
            out.input = field(ts, &Triplet::z, p);
            std::vector<std::vector<double>> r;
            r.reserve(ts.size());
            for (const Triplet& t : ts)
                r.push_back(detail::difference(t.y, t.z));
            make_owned(out.target, std::move(r), p);
            break;
        }
        case Stage::uscnn: {
            auto y_hat = cached("yhat", ts, sname, p,
                [&](const Tensor4& z) { return net::dbcnn_forward(z, upstream); }, field(ts, &Triplet::z, p));
            make_owned(out.input, std::move(y_hat), p);
            out.target = field(ts, &Triplet::x, 2 * p);
            break;
        }
        case Stage::qecnn: {
            auto x_hat = cached("xhat", ts, sname, 2 * p,
                [&](const Tensor4& z) { return net::uscnn_forward(net::dbcnn_forward(z, upstream), upstream); },
                field(ts, &Triplet::z, p));
            std::vector<std::vector<double>> r;
            r.reserve(ts.size());
            for (std::size_t i = 0; i < ts.size(); ++i)
                r.push_back(detail::difference(ts[i].x, x_hat[i]));
            make_owned(out.input, std::move(x_hat), 2 * p);
            make_owned(out.target, std::move(r), 2 * p);
            break;
        }
        case Stage::joint:
            out.input = field(ts, &Triplet::z, p);
            out.target = field(ts, &Triplet::x, 2 * p);
            break;
        }
    }
    return d;
}

/// Mean stage loss over a split in eval mode, accumulated in fixed batches.
inline double evaluate_loss(
    const detail::Split& split, Stage s, const net::Network& params, std::size_t batch = 32)
{
    if (split.size == 0)
        return std::numeric_limits<double>::quiet_NaN();
    net::Network n = params;
    net::set_mode(n, Mode::eval);
    const auto obj = detail::objective(s);
    double total = 0.0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < split.size; start += batch) {
        idx.resize(std::min(batch, split.size - start));
        std::iota(idx.begin(), idx.end(), start);
        total += obj(detail::gather(split.input, idx), detail::gather(split.target, idx), n, nullptr)
            * static_cast<double>(idx.size());
    }
    return total / static_cast<double>(split.size);
}

/// Replaces the batch-norm running statistics of the trained parts with the
/// average of per-batch statistics over `idx`, using the final weights. The
/// exponential average gathered during the epoch mixes stale weights and, on
/// short runs, its initial (0, 1) values.
inline void recalibrate_batch_norm(
    net::Network& n, const detail::Split& split, Stage s, std::span<const std::size_t> idx, std::size_t batch)
{
    auto bns = detail::batch_norms(n, s);
    if (bns.empty() || idx.empty())
        return;
    const auto obj = detail::objective(s);
    std::vector<double> saved;
    for (nn::BatchNorm* bn : bns)
        saved.push_back(bn->momentum);
    detail::set_stage_modes(n, s, Mode::train);
    std::size_t count = 0;
    for (std::size_t start = 0; start < idx.size(); start += batch) {
        const auto b = idx.subspan(start, std::min(batch, idx.size() - start));
        if (b.size() < 2)
            continue;
        ++count;
        for (nn::BatchNorm* bn : bns)
            bn->momentum = 1.0 / static_cast<double>(count);
        obj(detail::gather(split.input, b), detail::gather(split.target, b), n, nullptr);
    }
    for (std::size_t i = 0; i < bns.size(); ++i)
        bns[i]->momentum = saved[i];
    net::set_mode(n, Mode::eval);
}

/// Halves the learning rate once validation loss has not improved for
/// `patience` consecutive epochs.
class PlateauSchedule {
public:
    PlateauSchedule(double lr, double initial_loss, std::size_t patience, double decay, double floor)
        : lr_(lr), best_(initial_loss), patience_(patience), decay_(decay), floor_(floor)
    {
    }

    double rate() const { return lr_; }

    void observe(double val_loss)
    {
        if (val_loss < best_) {
            best_ = val_loss;
            stale_ = 0;
        } else if (++stale_ >= patience_) {
            lr_ = std::max(floor_, lr_ * decay_);
            stale_ = 0;
        }
    }

private:
    double lr_, best_;
    std::size_t patience_;
    double decay_, floor_;
    std::size_t stale_ = 0;
};

/// Trains one stage in place. Parameters outside the stage are never written.
/// Returns the per-epoch curve; epoch 0 is the eval-mode loss before training.
inline std::vector<CurveRow> train_stage(
    net::Network& n, const StageData& data, Stage s, const TrainContext& ctx, std::uint64_t seed)
{
    const TrainConfig& cfg = ctx.cfg;
    if (data.train.size == 0)
        throw DatasetError("no training patches");
    const auto obj = detail::objective(s);
    std::vector<CurveRow> curve;
    double lr = cfg.learning_rate[s];
    curve.push_back({0, s, evaluate_loss(data.train, s, n), evaluate_loss(data.val, s, n), lr});
    ctx.info("%s epoch 0: train %.6g val %.6g", stage_name(s), curve.back().train_loss, curve.back().val_loss);

    n.meta.stage = std::string(stage_name(s)) + ".partial";
    net::save_checkpoint(ctx.partial_path(s), n);

    nn::Adam adam;
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(data.train.size);
    std::iota(order.begin(), order.end(), 0);
    const std::size_t per_epoch = cfg.patches_per_epoch ? std::min(cfg.patches_per_epoch, order.size()) : order.size();
    PlateauSchedule schedule(lr, curve.back().val_loss, cfg.plateau_patience, cfg.lr_decay, cfg.min_learning_rate);

    for (std::size_t epoch = 1; epoch <= cfg.epochs[s]; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double sum = 0.0;
        std::size_t seen = 0;
        detail::set_stage_modes(n, s, Mode::train);
        for (std::size_t start = 0; start < per_epoch; start += cfg.batch_size) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, per_epoch - start));
            if (idx.size() < 2 && per_epoch > 1)
                continue;  // batch statistics need at least two samples
            net::Network grads = net::zeros_like(n);
            const double loss = obj(detail::gather(data.train.input, idx), detail::gather(data.train.target, idx), n, &grads);
            if (!std::isfinite(loss))
                throw TrainingDiverged(std::string(stage_name(s)) + " loss became non-finite in epoch "
                    + std::to_string(epoch), ctx.partial_path(s));
            std::vector<nn::ParamSlot> slots;
            for (net::Part p : detail::trained_parts(s)) {
                auto part = net::optimizer_slots(n, grads, p);
                slots.insert(slots.end(), part.begin(), part.end());
            }
            try {
                adam.step(slots, lr);
            } catch (const nn::NonFiniteGradient& e) {
                throw TrainingDiverged(std::string(stage_name(s)) + ": " + e.what(), ctx.partial_path(s));
            }
            sum += loss * static_cast<double>(idx.size());
            seen += idx.size();
        }
        recalibrate_batch_norm(n, data.train, s,
            std::span<const std::size_t>(order.data(), std::min(per_epoch, kRecalibrationPatches)), cfg.batch_size);
        const double val = evaluate_loss(data.val, s, n);
        curve.push_back({epoch, s, sum / static_cast<double>(std::max<std::size_t>(seen, 1)), val, lr});
        ctx.info("%s epoch %zu: train %.6g val %.6g lr %.3g", stage_name(s), epoch, curve.back().train_loss, val, lr);
        if (!std::isfinite(val))
            throw TrainingDiverged(std::string(stage_name(s)) + " validation loss became non-finite in epoch "
                + std::to_string(epoch), ctx.partial_path(s));
        net::save_checkpoint(ctx.partial_path(s), n);
        schedule.observe(val);
        lr = schedule.rate();
    }
    net::set_mode(n, Mode::eval);
    return curve;
}

// ---------------------------------------------------------------------------
// Orchestration

inline net::Network initial_network(const TrainConfig& cfg)
{
    if (!cfg.init_checkpoint.empty()) {
        net::Network n = net::load_checkpoint(cfg.init_checkpoint);
        if (!(n.arch == cfg.architecture))
            throw ConfigError("init_checkpoint architecture differs from the configured architecture");
        n.meta.qf = cfg.qf;
        n.meta.stage = "init";
        return n;
    }
    net::Network n = net::make_network(cfg.architecture, cfg.qf, cfg.seed);
    if (cfg.zero_init_heads)
        for (net::ResidualNet* r : {&n.db, &n.qe}) {
            r->head.weights.fill(0.0);
            std::fill(r->head.bias.begin(), r->head.bias.end(), 0.0);
        }
    return n;
}

class Trainer {
public:
    Trainer(TrainConfig cfg, std::ostream* log = nullptr) : ctx_{std::move(cfg), log}
    {
        ctx_.cfg.validate();
        fs::create_directories(ctx_.cfg.output_dir);
    }

    const TrainContext& context() const { return ctx_; }
    const Dataset& dataset()
    {
        if (!dataset_) {
            dataset_ = build_dataset(ctx_.cfg.train_dir, ctx_.cfg);
            ctx_.info("dataset: %zu train patches from %zu images, %zu val patches from %zu images, %zu skipped",
                dataset_->train.size(), dataset_->train_images.size(), dataset_->val.size(),
                dataset_->val_images.size(), dataset_->skipped.size());
            for (const auto& s : dataset_->skipped)
                ctx_.info("skipped %s", s.c_str());
        }
        return *dataset_;
    }
    void set_dataset(Dataset ds) { dataset_ = std::move(ds); }

    /// The network a stage starts from: the previous stage's checkpoint, or the
    /// initial network for stage 1.
    net::Network stage_input(Stage s)
    {
        if (s == Stage::dbcnn)
            return initial_network(ctx_.cfg);
        const Stage prev = s == Stage::uscnn ? Stage::dbcnn : s == Stage::qecnn ? Stage::uscnn : Stage::qecnn;
        const fs::path p = ctx_.checkpoint_path(prev);
        if (fs::exists(p))
            return net::load_checkpoint(p);
        if (s == Stage::joint && !ctx_.cfg.init_checkpoint.empty())
            return initial_network(ctx_.cfg);
        throw ConfigError(std::string("stage ") + stage_name(s) + " needs " + p.string()
            + " (run the earlier stages first)");
    }

    /// Trains one stage from its input checkpoint and writes `<stage>.ckpt`.
    /// The saved checkpoint is reloaded, so what later stages see is exactly the file.
    StageResult run(Stage s)
    {
        StageResult r{s, {}, ctx_.checkpoint_path(s)};
        if (ctx_.cfg.resume && fs::exists(r.checkpoint)) {
            r.resumed = true;
            ctx_.info("%s: resuming from %s", stage_name(s), r.checkpoint.string().c_str());
            return r;
        }
        net::Network n = stage_input(s);
        n.meta.qf = ctx_.cfg.qf;
        const StageData data = stage_data(dataset(), s, n, ctx_);
        r.curve = train_stage(n, data, s, ctx_, ctx_.cfg.seed * 1000003u + static_cast<std::uint64_t>(s));
        n.meta.stage = stage_name(s);
        net::save_checkpoint(r.checkpoint, n);
        fs::remove(ctx_.partial_path(s));
        append_curve(r.curve);
        return r;
    }

    /// Stages 1, 2, 3 and the joint stage in sequence.
    std::vector<StageResult> run_all()
    {
        if (!ctx_.cfg.resume)
            fs::remove(ctx_.curve_path());
        std::vector<StageResult> out;
        for (Stage s : kStages)
            out.push_back(run(s));
        return out;
    }

private:
    void append_curve(const std::vector<CurveRow>& rows) const
    {
        const bool fresh = !fs::exists(ctx_.curve_path());
        std::ofstream os(ctx_.curve_path(), std::ios::app);
        if (!os)
            throw io::IoError("cannot write " + ctx_.curve_path().string());
        if (fresh)
            write_curve_header(os);
        for (const CurveRow& r : rows)
            write_curve_row(os, r);
    }

    TrainContext ctx_;
    std::optional<Dataset> dataset_;
};

}  // namespace cisr::train

#endif  // CISRDCNN_TRAINING_HPP
