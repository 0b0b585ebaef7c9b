#ifndef CISRDCNN_GRADCHECK_HPP
#define CISRDCNN_GRADCHECK_HPP

// Central finite-difference checks of every analytic gradient in the network:
// each layer type alone, the residual sub-network with its skip, and the full
// end-to-end loss. Scalar objectives are <output, R> for a random probe R,
// except the end-to-end check, which uses the training loss itself.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "layers.hpp"
#include "network.hpp"

namespace cisr::gradcheck {

using nn::Shape4;
using nn::Tensor4;

struct Options {
    double step = 1e-6;
    /// Denominator floor of the relative error, for gradients that are ~0.
    double floor = 1e-8;
    /// Entries sampled per parameter group in network-level checks.
    std::size_t samples = 12;
};

struct Result {
    std::string layer;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // samples whose perturbation crossed a ReLU kink
};

inline double relative_error(double analytic, double numeric, double floor)
{
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {

inline Tensor4 randn(Shape4 s, std::mt19937_64& rng, double sd = 1.0)
{
    std::normal_distribution<double> d(0.0, sd);
    Tensor4 t(s);
    for (double& v : t.data())
        v = d(rng);
    return t;
}

inline std::vector<double> randn(std::size_t n, std::mt19937_64& rng, double sd = 1.0)
{
    std::normal_distribution<double> d(0.0, sd);
    std::vector<double> v(n);
    for (double& x : v)
        x = d(rng);
    return v;
}

inline double probe(const Tensor4& out, const Tensor4& r) { return nn::dot(out.data(), r.data()); }

class Tracker {
public:
    Tracker(std::string layer, Options opt) : res_{std::move(layer)}, opt_(opt) {}

    /// Compares `analytic` with the central difference of `loss` in `x`.
    void check(double& x, double analytic, const std::function<double()>& loss)
    {
        const double saved = x;
        x = saved + opt_.step;
        const double lp = loss();
        x = saved - opt_.step;
        const double lm = loss();
        x = saved;
        record(analytic, (lp - lm) / (2.0 * opt_.step));
    }

    void record(double analytic, double numeric)
    {
        res_.max_rel_error = std::max(res_.max_rel_error, relative_error(analytic, numeric, opt_.floor));
        ++res_.checked;
    }
    void skip() { ++res_.skipped; }

    void check_all(std::span<double> values, std::span<const double> analytic, const std::function<double()>& loss)
    {
        for (std::size_t i = 0; i < values.size(); ++i)
            check(values[i], analytic[i], loss);
    }

    Result result() const { return res_; }
    const Options& options() const { return opt_; }

private:
    Result res_;
    Options opt_;
};

}  // namespace detail

inline Result check_conv2d(std::uint64_t seed, Options opt = {})
{
    std::mt19937_64 rng(seed);
    detail::Tracker t("conv2d", opt);
    for (auto [stride, pad, k] : {std::tuple<std::size_t, std::size_t, std::size_t>{1, 1, 3}, {2, 1, 3}}) {
        Tensor4 x = detail::randn({2, 3, 7, 6}, rng);
        nn::ConvLayer l{detail::randn({4, 3, k, k}, rng, 0.5), detail::randn(4, rng), stride, pad, 0};
        const Tensor4 r = detail::randn(nn::conv2d_output_shape(x.shape(), l), rng);
        const auto g = nn::conv2d_backward(x, l, r);
        const auto loss = [&] { return detail::probe(nn::conv2d_forward(x, l), r); };
        t.check_all(x.data(), g.input.data(), loss);
        t.check_all(l.weights.data(), g.weights.data(), loss);
        t.check_all(l.bias, g.bias, loss);
    }
    return t.result();
}

inline Result check_deconv2d(std::uint64_t seed, Options opt = {})
{
    std::mt19937_64 rng(seed);
    detail::Tracker t("deconv2d", opt);
    Tensor4 x = detail::randn({2, 3, 5, 4}, rng);
    nn::ConvLayer l{detail::randn({3, 2, 9, 9}, rng, 0.3), detail::randn(2, rng), 2, 6, 1};
    const Tensor4 r = detail::randn(nn::deconv2d_output_shape(x.shape(), l), rng);
    const auto g = nn::deconv2d_backward(x, l, r);
    const auto loss = [&] { return detail::probe(nn::deconv2d_forward(x, l), r); };
    t.check_all(x.data(), g.input.data(), loss);
    t.check_all(l.weights.data(), g.weights.data(), loss);
    t.check_all(l.bias, g.bias, loss);
    return t.result();
}

inline Result check_batchnorm(std::uint64_t seed, nn::Mode mode, Options opt = {})
{
    std::mt19937_64 rng(seed);
    detail::Tracker t(mode == nn::Mode::train ? "batchnorm(train)" : "batchnorm(eval)", opt);
    Tensor4 x = detail::randn({3, 2, 4, 5}, rng, 2.0);
    nn::BatchNorm bn = nn::BatchNorm::identity(2);
    bn.gamma = detail::randn(2, rng);
    bn.beta = detail::randn(2, rng);
    bn.running_mean = detail::randn(2, rng);
    for (double& v : bn.running_var)
        v = 0.5 + std::abs(detail::randn(1, rng)[0]);
    bn.mode = mode;
    const Tensor4 r = detail::randn(x.shape(), rng);
    const auto loss = [&] {
        nn::BatchNorm copy = bn;
        return detail::probe(nn::batchnorm_forward(x, copy), r);
    };
    nn::BatchNorm fwd = bn;
    nn::BatchNormCache cache;
    nn::batchnorm_forward(x, fwd, &cache);
    const auto g = nn::batchnorm_backward(r, bn, cache);
    t.check_all(x.data(), g.input.data(), loss);
    t.check_all(bn.gamma, g.gamma, loss);
    t.check_all(bn.beta, g.beta, loss);
    return t.result();
}

inline Result check_relu(std::uint64_t seed, Options opt = {})
{
    std::mt19937_64 rng(seed);
    detail::Tracker t("relu", opt);
    Tensor4 x = detail::randn({2, 2, 5, 5}, rng);
    for (double& v : x.data())
        if (std::abs(v) < 0.05)
            v += v < 0 ? -0.05 : 0.05;  // keep finite differences off the kink
    const Tensor4 r = detail::randn(x.shape(), rng);
    const Tensor4 g = nn::relu_backward(x, r);
    t.check_all(x.data(), g.data(), [&] { return detail::probe(nn::relu(x), r); });
    return t.result();
}

namespace detail {

inline void append_signs(std::vector<bool>& out, const std::vector<net::BlockCache>& blocks)
{
    for (const auto& b : blocks)
        for (double v : b.normalized_out.data())
            out.push_back(v > 0.0);
}

/// Which ReLUs are active; a perturbation that changes this is not differentiable.
inline std::vector<bool> relu_signature(const net::ForwardCache& c)
{
    std::vector<bool> s;
    append_signs(s, c.db.blocks);
    append_signs(s, c.us.blocks);
    append_signs(s, c.qe.blocks);
    return s;
}

/// All parameters of one layer type, possibly spread over several records.
struct Group {
    std::string layer;
    std::vector<std::span<double>> values;
    std::vector<std::span<const double>> grads;

    std::size_t size() const
    {
        std::size_t n = 0;
        for (const auto& v : values)
            n += v.size();
        return n;
    }
    std::pair<double*, double> entry(std::size_t i) const
    {
        for (std::size_t k = 0; k < values.size(); ++k) {
            if (i < values[k].size())
                return {&values[k][i], grads[k][i]};
            i -= values[k].size();
        }
        throw std::out_of_range("gradient-check group index");
    }
};

inline void add_to_group(std::vector<Group>& groups, const std::string& layer, std::span<double> v,
    std::span<const double> g)
{
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& x) { return x.layer == layer; });
    if (it == groups.end()) {
        groups.push_back({layer, {}, {}});
        it = groups.end() - 1;
    }
    it->values.push_back(v);
    it->grads.push_back(g);
}

/// Checks `samples` random entries of every group; perturbations that flip a
/// ReLU are redrawn (up to a budget) and counted as skipped.
inline void check_sampled(std::vector<Result>& results, const std::vector<Group>& groups,
    const std::function<double(std::vector<bool>*)>& loss, const std::vector<bool>& base, std::mt19937_64& rng,
    const Options& opt)
{
    for (const Group& g : groups) {
        auto it = std::find_if(results.begin(), results.end(), [&](const Result& r) { return r.layer == g.layer; });
        if (it == results.end()) {
            results.push_back({g.layer});
            it = results.end() - 1;
        }
        const std::size_t total = g.size();
        const bool exhaustive = opt.samples >= total;
        std::uniform_int_distribution<std::size_t> pick(0, total - 1);
        std::size_t done = 0, attempts = 0;
        while (done < std::min(opt.samples, total) && attempts < (exhaustive ? total : 20 * opt.samples)) {
            const std::size_t i = exhaustive ? attempts : pick(rng);
            ++attempts;
            auto [xp, analytic] = g.entry(i);
            double& x = *xp;
            const double saved = x;
            std::vector<bool> sp, sm;
            x = saved + opt.step;
            const double lp = loss(&sp);
            x = saved - opt.step;
            const double lm = loss(&sm);
            x = saved;
            if (sp != base || sm != base) {
                ++it->skipped;
                continue;
            }
            it->max_rel_error = std::max(
                it->max_rel_error, relative_error(analytic, (lp - lm) / (2.0 * opt.step), opt.floor));
            ++it->checked;
            ++done;
        }
    }
}

inline std::string group_of(const std::string& name)
{
    if (name.find("deconv") != std::string::npos)
        return "deconv";
    if (name.find(".bn.") != std::string::npos)
        return "batchnorm";
    return "conv";
}

inline net::Architecture tiny_architecture() { return {3, 3, 3, 3}; }

}  // namespace detail

/// Residual sub-network x + f(x) with batch norm in training mode.
inline Result check_residual(std::uint64_t seed, Options opt = {})
{
    std::mt19937_64 rng(seed);
    net::Network n = net::make_network(detail::tiny_architecture(), 10, seed);
    Tensor4 x = detail::randn({2, 1, 6, 5}, rng);
    const Tensor4 r = detail::randn(x.shape(), rng);
    const auto loss = [&](std::vector<bool>* sig) {
        net::ResidualNet copy = n.db;
        net::ResidualCache c;
        const double v = detail::probe(net::residual_forward(x, copy, &c), r);
        if (sig) {
            sig->clear();
            detail::append_signs(*sig, c.blocks);
        }
        return v;
    };
    net::ResidualNet fwd = n.db;
    net::ResidualCache cache;
    net::residual_forward(x, fwd, &cache);
    net::Network grads = net::zeros_like(n);
    const Tensor4 gx = net::residual_backward(r, n.db, cache, grads.db);
    std::vector<bool> base;
    detail::append_signs(base, cache.blocks);

    std::vector<detail::Group> groups;
    detail::add_to_group(groups, "residual.input", x.data(), gx.data());
    auto pv = net::parameters(n, net::Part::dbcnn);
    auto gv = net::parameters(grads, net::Part::dbcnn);
    for (std::size_t i = 0; i < pv.size(); ++i)
        if (pv[i].trainable)
            detail::add_to_group(groups, "residual." + detail::group_of(pv[i].name), pv[i].values, gv[i].values);
    std::vector<Result> parts;
    Options all = opt;
    all.samples = 1u << 20;  // small enough to check every entry
    detail::check_sampled(parts, groups, loss, base, rng, all);
    Result out{"residual"};
    for (const Result& p : parts) {
        out.max_rel_error = std::max(out.max_rel_error, p.max_rel_error);
        out.checked += p.checked;
        out.skipped += p.skipped;
    }
    return out;
}

/// End-to-end training loss through all three sub-networks, per layer type.
inline std::vector<Result> check_end_to_end(std::uint64_t seed, Options opt = {})
{
    std::mt19937_64 rng(seed);
    net::Network n = net::make_network(detail::tiny_architecture(), 10, seed);
    // Perturb away from the bilinear start so every group has non-trivial gradients.
    for (net::ParamView& p : net::parameters(n))
        if (p.trainable)
            for (double& v : p.values)
                v += 0.1 * detail::randn(1, rng)[0];
    Tensor4 z = detail::randn({2, 1, 6, 5}, rng, 0.3);
    const Tensor4 x = detail::randn({2, 1, 12, 10}, rng, 0.3);

    const auto loss = [&](std::vector<bool>* sig) {
        net::Network copy = n;
        net::ForwardCache c;
        const double v = nn::mse_loss(net::forward(z, copy, &c), x).loss;
        if (sig)
            *sig = detail::relu_signature(c);
        return v;
    };
    net::Network fwd = n;
    net::ForwardCache cache;
    const auto lr = nn::mse_loss(net::forward(z, fwd, &cache), x);
    net::Network grads = net::zeros_like(n);
    const Tensor4 gz = net::backward(lr.grad, n, cache, grads);
    const std::vector<bool> base = detail::relu_signature(cache);

    std::vector<detail::Group> groups;
    detail::add_to_group(groups, "end_to_end.input", z.data(), gz.data());
    auto pv = net::parameters(n);
    auto gv = net::parameters(grads);
    for (std::size_t i = 0; i < pv.size(); ++i)
        if (pv[i].trainable)
            detail::add_to_group(groups, "end_to_end." + detail::group_of(pv[i].name), pv[i].values, gv[i].values);
    std::vector<Result> out;
    detail::check_sampled(out, groups, loss, base, rng, opt);
    return out;
}

/// Runs every check over `seeds`, reporting the maximum error per layer type.
inline std::vector<Result> run_suite(std::size_t seeds = 5, Options opt = {}, std::uint64_t first_seed = 1)
{
    std::vector<Result> merged;
    const auto merge = [&](const Result& r) {
        auto it = std::find_if(merged.begin(), merged.end(), [&](const Result& m) { return m.layer == r.layer; });
        if (it == merged.end()) {
            merged.push_back(r);
            return;
        }
        it->max_rel_error = std::max(it->max_rel_error, r.max_rel_error);
        it->checked += r.checked;
        it->skipped += r.skipped;
    };
    for (std::uint64_t s = first_seed; s < first_seed + seeds; ++s) {
        merge(check_conv2d(s, opt));
        merge(check_deconv2d(s, opt));
        merge(check_batchnorm(s, nn::Mode::train, opt));
        merge(check_batchnorm(s, nn::Mode::eval, opt));
        merge(check_relu(s, opt));
        merge(check_residual(s, opt));
        for (const Result& r : check_end_to_end(s, opt))
            merge(r);
    }
    return merged;
}

}  // namespace cisr::gradcheck

#endif  // CISRDCNN_GRADCHECK_HPP
