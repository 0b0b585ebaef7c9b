#ifndef CISRDCNN_METRICS_HPP
#define CISRDCNN_METRICS_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "image.hpp"

namespace cisr {

/// Interleaved 8-bit RGB image.
struct RgbImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> rgb;  // 3 bytes per pixel
};

}  // namespace cisr

namespace cisr::metrics {

/// BT.601 studio-swing luma: Y = 16 + (65.481 R + 128.553 G + 24.966 B) / 255.
inline std::uint8_t luma_of(std::uint8_t r, std::uint8_t g, std::uint8_t b)
{
    return quantize8(16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0);
}

inline LumaImage to_luma(const RgbImage& img)
{
    if (img.rgb.size() != img.width * img.height * 3)
        throw std::invalid_argument("to_luma: RGB buffer size does not match dimensions");
    LumaImage out(img.width, img.height);
    for (std::size_t i = 0; i < out.pixels.size(); ++i)
        out.pixels[i] = luma_of(img.rgb[3 * i], img.rgb[3 * i + 1], img.rgb[3 * i + 2]);
    return out;
}

inline constexpr double kPeak = 255.0;

inline void require_same_dims(const LumaImage& a, const LumaImage& b, const char* what)
{
    if (a.width != b.width || a.height != b.height)
        throw std::invalid_argument(std::string(what) + ": dimension mismatch " + std::to_string(a.width) + "x"
            + std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" + std::to_string(b.height));
}

/// Removes `border` pixels from every side.
inline LumaImage shave(const LumaImage& img, std::size_t border)
{
    if (2 * border >= img.width || 2 * border >= img.height)
        throw std::invalid_argument("crop border " + std::to_string(border) + " leaves no pixels");
    return crop(img, border, border, img.width - 2 * border, img.height - 2 * border);
}

inline double mse(const LumaImage& a, const LumaImage& b)
{
    require_same_dims(a, b, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = static_cast<double>(a.pixels[i]) - static_cast<double>(b.pixels[i]);
        s += d * d;
    }
    return s / static_cast<double>(a.pixels.size());
}

/// 10 log10(255^2 / MSE) after shaving `crop` pixels; +infinity when identical.
inline double psnr(const LumaImage& a, const LumaImage& b, std::size_t crop = 0)
{
    require_same_dims(a, b, "psnr");
    const double m = crop ? mse(shave(a, crop), shave(b, crop)) : mse(a, b);
    if (m == 0.0)
        return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(kPeak * kPeak / m);
}

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma)
{
    std::vector<double> w(static_cast<std::size_t>(size * size));
    const int r = size / 2;
    double sum = 0.0;
    for (int y = -r; y <= r; ++y)
        for (int x = -r; x <= r; ++x) {
            const double v = std::exp(-(x * x + y * y) / (2.0 * sigma * sigma));
            w[static_cast<std::size_t>((y + r) * size + (x + r))] = v;
            sum += v;
        }
    for (double& v : w)
        v /= sum;
    return w;
}

}  // namespace detail

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
};

/// Single-scale SSIM: Gaussian-weighted local statistics over every fully
/// contained window position, averaged.
inline double ssim(const LumaImage& a_in, const LumaImage& b_in, std::size_t crop = 0, SsimOptions opt = {})
{
    require_same_dims(a_in, b_in, "ssim");
    const LumaImage a = crop ? shave(a_in, crop) : a_in;
    const LumaImage b = crop ? shave(b_in, crop) : b_in;
    const auto win = static_cast<std::size_t>(opt.window);
    if (a.width < win || a.height < win)
        throw std::invalid_argument("ssim: image smaller than the " + std::to_string(win) + "x" + std::to_string(win)
            + " window");
    const auto w = detail::gaussian_window(opt.window, opt.sigma);
    const double c1 = (opt.k1 * kPeak) * (opt.k1 * kPeak);
    const double c2 = (opt.k2 * kPeak) * (opt.k2 * kPeak);

    const std::size_t ow = a.width - win + 1, oh = a.height - win + 1;
    double total = 0.0;
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (std::size_t j = 0; j < win; ++j)
                for (std::size_t i = 0; i < win; ++i) {
                    const double g = w[j * win + i];
                    const double va = a.at(x + i, y + j), vb = b.at(x + i, y + j);
                    ma += g * va;
                    mb += g * vb;
                    saa += g * (va * va);
                    sbb += g * (vb * vb);
                    sab += g * (va * vb);
                }
            const double mab = ma * mb;
            const double vara = saa - ma * ma, varb = sbb - mb * mb, cov = sab - mab;
            total += ((2.0 * mab + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (vara + varb + c2));
        }
    return total / static_cast<double>(ow * oh);
}

struct MetricReport {
    std::string image_id;
    std::string method;
    int qf = 0;
    double psnr_db = 0.0;
    double ssim = 0.0;
    std::size_t crop_border = 2;
};

inline MetricReport evaluate(const LumaImage& ref, const LumaImage& test, std::size_t crop, std::string image_id = {},
    std::string method = {}, int qf = 0)
{
    return {std::move(image_id), std::move(method), qf, psnr(ref, test, crop), ssim(ref, test, crop), crop};
}

inline std::string format_db(double v)
{
    if (std::isinf(v))
        return "inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

inline void write_csv_header(std::ostream& os) { os << "image_id,method,qf,psnr,ssim,crop\n"; }

inline void write_csv_row(std::ostream& os, const MetricReport& r)
{
    char ssim_buf[32];
    std::snprintf(ssim_buf, sizeof ssim_buf, "%.6f", r.ssim);
    os << r.image_id << ',' << r.method << ',' << r.qf << ',' << format_db(r.psnr_db) << ',' << ssim_buf << ','
       << r.crop_border << '\n';
}

}  // namespace cisr::metrics

#endif  // CISRDCNN_METRICS_HPP
