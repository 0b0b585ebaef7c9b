#ifndef CISRDCNN_RESAMPLE_HPP
#define CISRDCNN_RESAMPLE_HPP

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "image.hpp"

namespace cisr::resample {

/// Keys cubic convolution kernel parameter.
inline constexpr double kCubicA = -0.5;

inline double cubic_weight(double x)
{
    const double ax = std::abs(x);
    const double a = kCubicA;
    if (ax <= 1.0)
        return (a + 2.0) * ax * ax * ax - (a + 3.0) * ax * ax + 1.0;
    if (ax < 2.0)
        return a * ax * ax * ax - 5.0 * a * ax * ax + 8.0 * a * ax - 4.0 * a;
    return 0.0;
}

struct ResizeOptions {
    /// Widen the kernel by 1/scale when shrinking.
    bool antialias = true;
};

/// Normalized taps for one output sample.
struct Taps {
    std::vector<std::size_t> index;
    std::vector<double> weight;
};

/// Half-sample-symmetric reflection of an arbitrary index into [0, len).
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t len)
{
    const auto period = static_cast<std::ptrdiff_t>(2 * len);
    std::ptrdiff_t m = i % period;
    if (m < 0)
        m += period;
    return static_cast<std::size_t>(m < static_cast<std::ptrdiff_t>(len) ? m : period - 1 - m);
}

/// Per-output-sample taps for a 1-D resize. Output sample u is centered at
/// input coordinate (u + 0.5) / scale - 0.5.
inline std::vector<Taps> contributions(std::size_t in_len, std::size_t out_len, double scale, ResizeOptions opt = {})
{
    const bool widen = scale < 1.0 && opt.antialias;
    const double kernel_width = widen ? 4.0 / scale : 4.0;
    const auto taps = static_cast<std::size_t>(std::ceil(kernel_width)) + 2;
    std::vector<Taps> out(out_len);
    for (std::size_t u = 0; u < out_len; ++u) {
        const double center = (static_cast<double>(u) + 0.5) / scale - 0.5;
        const auto left = static_cast<std::ptrdiff_t>(std::floor(center - kernel_width / 2.0));
        Taps& t = out[u];
        double sum = 0.0;
        for (std::size_t k = 0; k < taps; ++k) {
            const std::ptrdiff_t i = left + static_cast<std::ptrdiff_t>(k);
            const double d = center - static_cast<double>(i);
            const double w = widen ? scale * cubic_weight(scale * d) : cubic_weight(d);
            if (w == 0.0)
                continue;
            t.index.push_back(reflect_index(i, in_len));
            t.weight.push_back(w);
            sum += w;
        }
        for (double& w : t.weight)
            w /= sum;
    }
    return out;
}

inline std::size_t scaled_extent(std::size_t len, double scale)
{
    const double v = std::round(scale * static_cast<double>(len));
    if (v < 1.0)
        throw std::invalid_argument("bicubic_resize: output dimension < 1 for length " + std::to_string(len)
            + " at scale " + std::to_string(scale));
    return static_cast<std::size_t>(v);
}

/// Resamples along x only.
inline Plane resize_horizontal(const Plane& in, double scale, ResizeOptions opt = {})
{
    const std::size_t ow = scaled_extent(in.width, scale);
    const auto taps = contributions(in.width, ow, scale, opt);
    Plane out(ow, in.height);
    for (std::size_t y = 0; y < in.height; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double s = 0.0;
            for (std::size_t k = 0; k < taps[x].index.size(); ++k)
                s += taps[x].weight[k] * in.at(taps[x].index[k], y);
            out.at(x, y) = s;
        }
    return out;
}

/// Resamples along y only.
inline Plane resize_vertical(const Plane& in, double scale, ResizeOptions opt = {})
{
    const std::size_t oh = scaled_extent(in.height, scale);
    const auto taps = contributions(in.height, oh, scale, opt);
    Plane out(in.width, oh);
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t k = 0; k < taps[y].index.size(); ++k) {
            const double w = taps[y].weight[k];
            const std::size_t sy = taps[y].index[k];
            for (std::size_t x = 0; x < in.width; ++x)
                out.at(x, y) += w * in.at(x, sy);
        }
    return out;
}

/// Separable bicubic resize, horizontal pass first. Real-valued throughout.
inline Plane bicubic_resize(const Plane& in, double scale, ResizeOptions opt = {})
{
    if (!(scale > 0.0))
        throw std::invalid_argument("bicubic_resize: scale must be positive");
    if (in.width == 0 || in.height == 0)
        throw std::invalid_argument("bicubic_resize: empty input");
    return resize_vertical(resize_horizontal(in, scale, opt), scale, opt);
}

/// 8-bit variant: resampled in reals, rounded and clamped once at the end.
inline LumaImage bicubic_resize(const LumaImage& in, double scale, ResizeOptions opt = {})
{
    return to_luma_image(bicubic_resize(to_plane(in), scale, opt));
}

}  // namespace cisr::resample

#endif  // CISRDCNN_RESAMPLE_HPP
