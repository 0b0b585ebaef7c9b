#ifndef CISRDCNN_NETWORK_HPP
#define CISRDCNN_NETWORK_HPP

// The three-stage compressed-image super-resolution network:
//
//   z --DBCNN--> y_hat --USCNN--> x_hat --QECNN--> x_final
//
// DBCNN and QECNN are residual: K-1 blocks of (3x3 conv, batch norm, ReLU)
// followed by a single-filter 3x3 conv whose output is added to the input.
// USCNN runs K2-1 such blocks and then a 9x9 stride-2 transposed convolution
// producing one plane at twice the resolution. The transposed convolution
// reads the block features together with the USCNN input plane itself; its
// weights on that plane start as a bilinear kernel and its weights on the
// features start at zero, so the untrained stage is a bilinear upsampler.
//
// All pixel values are in [0, 1].

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "adam.hpp"
#include "layers.hpp"
#include "tensor.hpp"

namespace cisr::net {

using nn::Mode;
using nn::Shape4;
using nn::Tensor4;

struct Architecture {
    std::size_t k1 = 20;  // DBCNN depth
    std::size_t k2 = 10;  // USCNN depth (including the transposed convolution)
    std::size_t k3 = 10;  // QECNN depth
    std::size_t width = 64;

    friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct Metadata {
    int qf = 0;
    int scale = 2;
    std::string stage = "init";
};

inline constexpr const char* kNormalization = "unit-interval:pixel/255";
inline constexpr std::size_t kDeconvKernel = 9;
inline constexpr std::size_t kDeconvPad = 6;  // after the 1-pixel replicate halo
inline constexpr std::size_t kHalo = 1;

struct ConvBlock {
    nn::ConvLayer conv;
    nn::BatchNorm bn;
};

/// DBCNN / QECNN.
struct ResidualNet {
    std::vector<ConvBlock> blocks;
    nn::ConvLayer head;
};

/// USCNN.
struct UpsampleNet {
    std::vector<ConvBlock> blocks;
    nn::ConvLayer deconv;
};

struct Network {
    Architecture arch;
    Metadata meta;
    ResidualNet db;
    UpsampleNet us;
    ResidualNet qe;
};

enum class Part { dbcnn, uscnn, qecnn };

// ---------------------------------------------------------------------------
// Construction

namespace detail {

inline nn::ConvLayer make_conv(std::size_t out_ch, std::size_t in_ch, std::size_t k, std::mt19937_64& rng)
{
    nn::ConvLayer l{Tensor4({out_ch, in_ch, k, k}), std::vector<double>(out_ch, 0.0), 1, k / 2, 0};
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in_ch * k * k)));
    for (double& w : l.weights.data())
        w = dist(rng);
    return l;
}

inline std::vector<ConvBlock> make_blocks(std::size_t count, std::size_t width, std::mt19937_64& rng)
{
    std::vector<ConvBlock> blocks;
    for (std::size_t i = 0; i < count; ++i)
        blocks.push_back({make_conv(width, i == 0 ? 1 : width, 3, rng), nn::BatchNorm::identity(width)});
    return blocks;
}

inline ResidualNet make_residual(std::size_t depth, std::size_t width, std::mt19937_64& rng)
{
    if (depth == 0)
        throw std::invalid_argument("residual sub-network depth must be >= 1");
    ResidualNet r;
    r.blocks = make_blocks(depth - 1, width, rng);
    r.head = make_conv(1, r.blocks.empty() ? 1 : width, 3, rng);
    return r;
}

}  // namespace detail

/// 1-D taps whose 2-D outer product makes the transposed convolution a
/// center-aligned bilinear x2 upsampler.
inline constexpr std::array<double, kDeconvKernel> kBilinearTaps = {0, 0, 0, 0.25, 0.75, 0.75, 0.25, 0, 0};

inline std::size_t deconv_input_channels(const UpsampleNet& us)
{
    return us.deconv.weights.shape().n;
}

/// Resets the transposed convolution to pure bilinear interpolation of the
/// pass-through plane (last input channel); feature weights and bias zeroed.
inline void set_bilinear_deconv(UpsampleNet& us)
{
    Tensor4& w = us.deconv.weights;
    w.fill(0.0);
    const std::size_t pass = w.shape().n - 1;
    for (std::size_t y = 0; y < kDeconvKernel; ++y)
        for (std::size_t x = 0; x < kDeconvKernel; ++x)
            w.at(pass, 0, y, x) = kBilinearTaps[y] * kBilinearTaps[x];
    std::fill(us.deconv.bias.begin(), us.deconv.bias.end(), 0.0);
}

inline Network make_network(Architecture arch, int qf, std::uint64_t seed)
{
    if (arch.k2 == 0 || arch.width == 0)
        throw std::invalid_argument("architecture needs k2 >= 1 and width >= 1");
    std::mt19937_64 rng(seed);
    Network n;
    n.arch = arch;
    n.meta.qf = qf;
    n.db = detail::make_residual(arch.k1, arch.width, rng);
    n.us.blocks = detail::make_blocks(arch.k2 - 1, arch.width, rng);
    const std::size_t in_ch = (n.us.blocks.empty() ? 0 : arch.width) + 1;
    n.us.deconv = {Tensor4({in_ch, 1, kDeconvKernel, kDeconvKernel}), std::vector<double>(1, 0.0), 2, kDeconvPad, 1};
    set_bilinear_deconv(n.us);
    n.qe = detail::make_residual(arch.k3, arch.width, rng);
    return n;
}

/// Zeroes every parameter of a residual branch so the sub-network is the identity.
inline void zero_residual_branch(ResidualNet& r)
{
    for (ConvBlock& b : r.blocks) {
        b.conv.weights.fill(0.0);
        std::fill(b.conv.bias.begin(), b.conv.bias.end(), 0.0);
        std::fill(b.bn.beta.begin(), b.bn.beta.end(), 0.0);
    }
    r.head.weights.fill(0.0);
    std::fill(r.head.bias.begin(), r.head.bias.end(), 0.0);
}

/// Zero residual branches and a bilinear USCNN with inert features.
inline Network make_identity_network(Architecture arch, int qf, std::uint64_t seed = 0)
{
    Network n = make_network(arch, qf, seed);
    zero_residual_branch(n.db);
    zero_residual_branch(n.qe);
    set_bilinear_deconv(n.us);
    return n;
}

inline void set_mode(std::vector<ConvBlock>& blocks, Mode m)
{
    for (ConvBlock& b : blocks)
        b.bn.mode = m;
}
inline void set_mode(ResidualNet& r, Mode m) { set_mode(r.blocks, m); }
inline void set_mode(UpsampleNet& u, Mode m) { set_mode(u.blocks, m); }
inline void set_mode(Network& n, Mode m)
{
    set_mode(n.db, m);
    set_mode(n.us, m);
    set_mode(n.qe, m);
}

// ---------------------------------------------------------------------------
// Named parameter views

struct ParamView {
    std::string name;
    std::span<double> values;
    std::vector<std::size_t> dims;
    bool trainable = true;
};

namespace detail {

inline void push_tensor(std::vector<ParamView>& out, std::string name, Tensor4& t)
{
    const Shape4& s = t.shape();
    out.push_back({std::move(name), t.data(), {s.n, s.c, s.h, s.w}, true});
}

inline void push_vector(std::vector<ParamView>& out, std::string name, std::vector<double>& v, bool trainable = true)
{
    out.push_back({std::move(name), v, {v.size()}, trainable});
}

inline void push_conv(std::vector<ParamView>& out, const std::string& prefix, nn::ConvLayer& c)
{
    push_tensor(out, prefix + ".weight", c.weights);
    push_vector(out, prefix + ".bias", c.bias);
}

inline void push_blocks(std::vector<ParamView>& out, const std::string& prefix, std::vector<ConvBlock>& blocks)
{
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = prefix + "." + std::to_string(i);
        // batch norm's shift subsumes a conv bias here, so the bias stays zero
        push_tensor(out, p + ".conv.weight", blocks[i].conv.weights);
        push_vector(out, p + ".bn.gamma", blocks[i].bn.gamma);
        push_vector(out, p + ".bn.beta", blocks[i].bn.beta);
        push_vector(out, p + ".bn.running_mean", blocks[i].bn.running_mean, false);
        push_vector(out, p + ".bn.running_var", blocks[i].bn.running_var, false);
    }
}

}  // namespace detail

inline const char* part_prefix(Part p)
{
    switch (p) {
    case Part::dbcnn: return "dbcnn";
    case Part::uscnn: return "uscnn";
    case Part::qecnn: return "qecnn";
    }
    return "";
}

inline std::vector<ParamView> parameters(Network& n, Part part)
{
    std::vector<ParamView> out;
    switch (part) {
    case Part::dbcnn:
        detail::push_blocks(out, "dbcnn", n.db.blocks);
        detail::push_conv(out, "dbcnn.head", n.db.head);
        break;
    case Part::uscnn:
        detail::push_blocks(out, "uscnn", n.us.blocks);
        detail::push_conv(out, "uscnn.deconv", n.us.deconv);
        break;
    case Part::qecnn:
        detail::push_blocks(out, "qecnn", n.qe.blocks);
        detail::push_conv(out, "qecnn.head", n.qe.head);
        break;
    }
    return out;
}

/// Every parameter and running statistic, in checkpoint order.
inline std::vector<ParamView> parameters(Network& n)
{
    std::vector<ParamView> out;
    for (Part p : {Part::dbcnn, Part::uscnn, Part::qecnn}) {
        auto v = parameters(n, p);
        out.insert(out.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
    }
    return out;
}

/// A zero-valued network with the same layout, used as a gradient accumulator.
inline Network zeros_like(const Network& n)
{
    Network z = n;
    for (ParamView& p : parameters(z))
        std::fill(p.values.begin(), p.values.end(), 0.0);
    return z;
}

/// Optimizer slots pairing trainable values of `part` with their gradients.
inline std::vector<nn::ParamSlot> optimizer_slots(Network& params, Network& grads, Part part)
{
    auto pv = parameters(params, part);
    auto gv = parameters(grads, part);
    std::vector<nn::ParamSlot> slots;
    for (std::size_t i = 0; i < pv.size(); ++i)
        if (pv[i].trainable)
            slots.push_back({pv[i].name, pv[i].values, gv[i].values});
    return slots;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct BlockCache {
    Tensor4 input;
    nn::BatchNormCache bn;
    Tensor4 normalized_out;  // batch-norm output, ReLU input
};

struct ResidualCache {
    std::vector<BlockCache> blocks;
    Tensor4 head_input;
};

struct UpsampleCache {
    std::vector<BlockCache> blocks;
    Tensor4 deconv_input;  // replicate-padded [features, input]
};

namespace detail {

inline void require_spatial(const Tensor4& x, const char* what)
{
    const Shape4& s = x.shape();
    if (s.c != 1)
        throw nn::ShapeError(std::string(what) + ": expected a single-channel input, got " + s.str());
    if (s.h < 3 || s.w < 3)
        throw nn::ShapeError(std::string(what) + ": spatial dims smaller than 3 in " + s.str());
}

inline Tensor4 blocks_forward(Tensor4 x, std::vector<ConvBlock>& blocks, std::vector<BlockCache>* cache)
{
    if (cache)
        cache->assign(blocks.size(), {});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        ConvBlock& b = blocks[i];
        Tensor4 c = nn::conv2d_forward(x, b.conv);
        if (cache) {
            BlockCache& bc = (*cache)[i];
            bc.input = std::move(x);
            bc.normalized_out = nn::batchnorm_forward(c, b.bn, &bc.bn);
            x = nn::relu(bc.normalized_out);
        } else {
            x = nn::relu(nn::batchnorm_forward(c, b.bn));
        }
    }
    return x;
}

/// Back-propagates through the block stack; returns the gradient w.r.t. its input.
inline Tensor4 blocks_backward(Tensor4 grad, const std::vector<ConvBlock>& blocks,
    const std::vector<BlockCache>& cache, std::vector<ConvBlock>& grads)
{
    for (std::size_t i = blocks.size(); i-- > 0;) {
        const BlockCache& bc = cache[i];
        const Tensor4 g_relu = nn::relu_backward(bc.normalized_out, grad);
        nn::BatchNormGrads gb = nn::batchnorm_backward(g_relu, blocks[i].bn, bc.bn);
        nn::ConvGrads gc = nn::conv2d_backward(bc.input, blocks[i].conv, gb.input, true);
        ConvBlock& acc = grads[i];
        nn::accumulate(acc.conv.weights, gc.weights);
        for (std::size_t c = 0; c < gb.gamma.size(); ++c) {
            acc.bn.gamma[c] += gb.gamma[c];
            acc.bn.beta[c] += gb.beta[c];
        }
        grad = std::move(gc.input);
    }
    return grad;
}

}  // namespace detail

/// f(x), the residual branch alone.
inline Tensor4 residual_branch(const Tensor4& x, ResidualNet& net, ResidualCache* cache = nullptr)
{
    detail::require_spatial(x, "residual sub-network");
    Tensor4 h = detail::blocks_forward(x, net.blocks, cache ? &cache->blocks : nullptr);
    Tensor4 out = nn::conv2d_forward(h, net.head);
    if (cache)
        cache->head_input = std::move(h);
    return out;
}

/// x + f(x).
inline Tensor4 residual_forward(const Tensor4& x, ResidualNet& net, ResidualCache* cache = nullptr)
{
    return nn::add(x, residual_branch(x, net, cache));
}

/// Gradient of the residual branch's output w.r.t. its input (skip not included).
inline Tensor4 residual_branch_backward(
    const Tensor4& grad_out, const ResidualNet& net, const ResidualCache& cache, ResidualNet& grads)
{
    nn::ConvGrads gh = nn::conv2d_backward(cache.head_input, net.head, grad_out, true);
    nn::accumulate(grads.head.weights, gh.weights);
    for (std::size_t c = 0; c < gh.bias.size(); ++c)
        grads.head.bias[c] += gh.bias[c];
    return detail::blocks_backward(std::move(gh.input), net.blocks, cache.blocks, grads.blocks);
}

/// Gradient of x + f(x) w.r.t. x, accumulating parameter gradients into `grads`.
inline Tensor4 residual_backward(
    const Tensor4& grad_out, const ResidualNet& net, const ResidualCache& cache, ResidualNet& grads)
{
    return nn::add(grad_out, residual_branch_backward(grad_out, net, cache, grads));
}

inline Tensor4 upsample_forward(const Tensor4& x, UpsampleNet& net, UpsampleCache* cache = nullptr)
{
    detail::require_spatial(x, "USCNN");
    Tensor4 stacked = net.blocks.empty()
        ? x
        : nn::concat_channels(detail::blocks_forward(x, net.blocks, cache ? &cache->blocks : nullptr), x);
    Tensor4 padded = nn::replicate_pad(stacked, kHalo);
    Tensor4 out = nn::deconv2d_forward(padded, net.deconv);
    if (cache)
        cache->deconv_input = std::move(padded);
    return out;
}

inline Tensor4 upsample_backward(
    const Tensor4& grad_out, const UpsampleNet& net, const UpsampleCache& cache, UpsampleNet& grads)
{
    nn::ConvGrads gd = nn::deconv2d_backward(cache.deconv_input, net.deconv, grad_out, true);
    nn::accumulate(grads.deconv.weights, gd.weights);
    for (std::size_t c = 0; c < gd.bias.size(); ++c)
        grads.deconv.bias[c] += gd.bias[c];
    Tensor4 g_stacked = nn::replicate_pad_backward(gd.input, kHalo);
    if (net.blocks.empty())
        return g_stacked;
    const std::size_t feat = g_stacked.shape().c - 1;
    Tensor4 g_input = nn::slice_channels(g_stacked, feat, 1);
    Tensor4 g_from_blocks =
        detail::blocks_backward(nn::slice_channels(g_stacked, 0, feat), net.blocks, cache.blocks, grads.blocks);
    nn::accumulate(g_input, g_from_blocks);
    return g_input;
}

struct ForwardCache {
    ResidualCache db;
    UpsampleCache us;
    ResidualCache qe;
};

/// End-to-end forward using whatever batch-norm modes the network carries.
inline Tensor4 forward(const Tensor4& z, Network& n, ForwardCache* cache = nullptr)
{
    Tensor4 y_hat = residual_forward(z, n.db, cache ? &cache->db : nullptr);
    Tensor4 x_hat = upsample_forward(y_hat, n.us, cache ? &cache->us : nullptr);
    return residual_forward(x_hat, n.qe, cache ? &cache->qe : nullptr);
}

/// Back-propagates the end-to-end loss gradient; returns d loss / d z.
inline Tensor4 backward(const Tensor4& grad_out, const Network& n, const ForwardCache& cache, Network& grads)
{
    Tensor4 g = residual_backward(grad_out, n.qe, cache.qe, grads.qe);
    g = upsample_backward(g, n.us, cache.us, grads.us);
    return residual_backward(g, n.db, cache.db, grads.db);
}

// Inference on frozen parameters (batch norm in eval mode).

inline Network eval_copy(const Network& p)
{
    Network n = p;
    set_mode(n, Mode::eval);
    return n;
}

inline Tensor4 dbcnn_forward(const Tensor4& z, const Network& p)
{
    Network n = eval_copy(p);
    return residual_forward(z, n.db);
}

inline Tensor4 uscnn_forward(const Tensor4& y_hat, const Network& p)
{
    Network n = eval_copy(p);
    return upsample_forward(y_hat, n.us);
}

inline Tensor4 qecnn_forward(const Tensor4& x_hat, const Network& p)
{
    Network n = eval_copy(p);
    return residual_forward(x_hat, n.qe);
}

inline Tensor4 cisrdcnn_forward(const Tensor4& z, const Network& p)
{
    Network n = eval_copy(p);
    return forward(z, n);
}

/// Input-side (LR) radius beyond which pixels cannot influence an output pixel.
inline std::size_t receptive_radius(const Architecture& a)
{
    // 3x3 convs: one LR pixel each in DBCNN/USCNN, one HR pixel each in QECNN;
    // the 9x9 stride-2 transposed convolution reaches three LR pixels.
    return a.k1 + (a.k2 - 1) + 3 + (a.k3 + 1) / 2;
}

/// Whole-image inference processed in overlapping tiles of `tile` LR pixels;
/// each tile carries a halo of `margin` pixels that is trimmed afterwards.
inline Tensor4 tiled_forward(const Tensor4& z, const Network& p, std::size_t tile, std::size_t margin)
{
    const Shape4& s = z.shape();
    if (s.n != 1 || s.c != 1)
        throw nn::ShapeError("tiled_forward expects a single 1x1xHxW plane, got " + s.str());
    if (tile == 0)
        throw std::invalid_argument("tiled_forward: tile must be positive");
    Network n = eval_copy(p);
    Tensor4 out({1, 1, 2 * s.h, 2 * s.w});
    for (std::size_t y0 = 0; y0 < s.h; y0 += tile)
        for (std::size_t x0 = 0; x0 < s.w; x0 += tile) {
            const std::size_t y1 = std::min(s.h, y0 + tile), x1 = std::min(s.w, x0 + tile);
            const std::size_t ey0 = y0 > margin ? y0 - margin : 0, ex0 = x0 > margin ? x0 - margin : 0;
            const std::size_t ey1 = std::min(s.h, y1 + margin), ex1 = std::min(s.w, x1 + margin);
            Tensor4 patch({1, 1, ey1 - ey0, ex1 - ex0});
            for (std::size_t y = ey0; y < ey1; ++y)
                std::copy_n(z.plane(0, 0) + y * s.w + ex0, ex1 - ex0, patch.plane(0, 0) + (y - ey0) * (ex1 - ex0));
            const Tensor4 r = forward(patch, n);
            const std::size_t rw = r.shape().w;
            for (std::size_t y = 2 * y0; y < 2 * y1; ++y)
                std::copy_n(r.plane(0, 0) + (y - 2 * ey0) * rw + (2 * x0 - 2 * ex0), 2 * (x1 - x0),
                    out.plane(0, 0) + y * 2 * s.w + 2 * x0);
        }
    return out;
}

}  // namespace cisr::net

#endif  // CISRDCNN_NETWORK_HPP
