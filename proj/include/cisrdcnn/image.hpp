#ifndef CISRDCNN_IMAGE_HPP
#define CISRDCNN_IMAGE_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace cisr {

/// Single-channel 8-bit image, row-major.
struct LumaImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;

    LumaImage() = default;
    LumaImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h, fill) {}
    LumaImage(std::size_t w, std::size_t h, std::vector<std::uint8_t> px) : width(w), height(h), pixels(std::move(px))
    {
        if (pixels.size() != w * h)
            throw std::invalid_argument("LumaImage: pixel count " + std::to_string(pixels.size())
                + " does not match " + std::to_string(w) + "x" + std::to_string(h));
    }

    std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
    std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

    friend bool operator==(const LumaImage&, const LumaImage&) = default;
};

/// Real-valued single-channel plane, row-major. No range restriction.
struct Plane {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<double> values;

    Plane() = default;
    Plane(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), values(w * h, fill) {}

    double& at(std::size_t x, std::size_t y) { return values[y * width + x]; }
    double at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
};

inline Plane to_plane(const LumaImage& img, double scale = 1.0)
{
    Plane p(img.width, img.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        p.values[i] = img.pixels[i] * scale;
    return p;
}

inline std::uint8_t quantize8(double v)
{
    return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
}

/// Rounds to nearest and clamps to [0, 255]; `scale` maps plane units to pixel units.
inline LumaImage to_luma_image(const Plane& p, double scale = 1.0)
{
    LumaImage img(p.width, p.height);
    for (std::size_t i = 0; i < p.values.size(); ++i)
        img.pixels[i] = quantize8(p.values[i] * scale);
    return img;
}

/// Copies the sub-rectangle [x0, x0+w) x [y0, y0+h).
inline LumaImage crop(const LumaImage& img, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h)
{
    if (x0 + w > img.width || y0 + h > img.height)
        throw std::invalid_argument("crop: rectangle exceeds image bounds");
    LumaImage out(w, h);
    for (std::size_t y = 0; y < h; ++y)
        std::copy_n(img.pixels.begin() + static_cast<std::ptrdiff_t>((y0 + y) * img.width + x0), w,
            out.pixels.begin() + static_cast<std::ptrdiff_t>(y * w));
    return out;
}

inline Plane crop(const Plane& p, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h)
{
    if (x0 + w > p.width || y0 + h > p.height)
        throw std::invalid_argument("crop: rectangle exceeds plane bounds");
    Plane out(w, h);
    for (std::size_t y = 0; y < h; ++y)
        std::copy_n(p.values.begin() + static_cast<std::ptrdiff_t>((y0 + y) * p.width + x0), w,
            out.values.begin() + static_cast<std::ptrdiff_t>(y * w));
    return out;
}

/// Pixel values mapped to [0, 1] as a 1x1xHxW tensor.
inline nn::Tensor4 to_tensor(const LumaImage& img)
{
    nn::Tensor4 t({1, 1, img.height, img.width});
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        t[i] = img.pixels[i] / 255.0;
    return t;
}

inline nn::Tensor4 to_tensor(const Plane& p)
{
    return nn::Tensor4({1, 1, p.height, p.width}, p.values);
}

inline Plane plane_of(const nn::Tensor4& t, std::size_t n = 0, std::size_t c = 0)
{
    Plane p(t.shape().w, t.shape().h);
    std::copy_n(t.plane(n, c), p.values.size(), p.values.begin());
    return p;
}

/// Inverse of to_tensor(LumaImage): scale by 255, round, clamp.
inline LumaImage to_luma_image(const nn::Tensor4& t)
{
    return to_luma_image(plane_of(t), 255.0);
}

}  // namespace cisr

#endif  // CISRDCNN_IMAGE_HPP
