#ifndef CISRDCNN_JPEG_HPP
#define CISRDCNN_JPEG_HPP

// Baseline sequential JPEG for single-component (luma) images.
//
// The encoder uses the standard luminance quantization table scaled by the
// usual quality-factor rule and the example Huffman tables from Annex K. The
// decoder accepts any baseline single-component stream and uses the 13-bit
// fixed-point inverse DCT of the Independent JPEG Group codec, so its pixel
// output matches that decoder bit for bit.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "image.hpp"

namespace cisr::jpeg {

using Block = std::array<double, 64>;

/// Zigzag position -> natural (row-major) index.
inline constexpr std::array<int, 64> kZigzag = {0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19,
    26, 33, 40, 48, 41, 34, 27, 20, 13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37,
    44, 51, 58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63};

inline constexpr std::array<int, 64> kBaseLumaTable = {16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60,
    55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51, 87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35,
    55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

/// 8x8 quantizer steps in natural order, each in [1, 255].
struct QuantTable {
    std::array<std::uint16_t, 64> q{};

    std::uint16_t at(int row, int col) const { return q[static_cast<std::size_t>(row * 8 + col)]; }
    friend bool operator==(const QuantTable&, const QuantTable&) = default;
};

inline QuantTable quant_table_from_qf(int qf)
{
    if (qf < 1 || qf > 100)
        throw std::invalid_argument("quality factor " + std::to_string(qf) + " outside [1, 100]");
    // integer division, as in the reference codec
    const int scale = qf < 50 ? 5000 / qf : 200 - 2 * qf;
    QuantTable t;
    for (std::size_t i = 0; i < 64; ++i)
        t.q[i] = static_cast<std::uint16_t>(std::clamp((kBaseLumaTable[i] * scale + 50) / 100, 1, 255));
    return t;
}

namespace detail {

/// Orthonormal DCT-II basis: basis[u][x] = c(u) cos((2x+1)u pi / 16).
inline const std::array<std::array<double, 8>, 8>& dct_basis()
{
    static const auto basis = [] {
        std::array<std::array<double, 8>, 8> b{};
        for (int u = 0; u < 8; ++u)
            for (int x = 0; x < 8; ++x) {
                const double c = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
                b[static_cast<std::size_t>(u)][static_cast<std::size_t>(x)] =
                    c * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
            }
        return b;
    }();
    return basis;
}

}  // namespace detail

/// 2-D orthonormal DCT-II of a level-shifted block (natural order).
inline Block dct8x8_forward(const Block& in)
{
    const auto& b = detail::dct_basis();
    Block tmp{}, out{};
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t u = 0; u < 8; ++u) {
            double s = 0.0;
            for (std::size_t x = 0; x < 8; ++x)
                s += b[u][x] * in[y * 8 + x];
            tmp[y * 8 + u] = s;
        }
    for (std::size_t v = 0; v < 8; ++v)
        for (std::size_t u = 0; u < 8; ++u) {
            double s = 0.0;
            for (std::size_t y = 0; y < 8; ++y)
                s += b[v][y] * tmp[y * 8 + u];
            out[v * 8 + u] = s;
        }
    return out;
}

inline Block dct8x8_inverse(const Block& in)
{
    const auto& b = detail::dct_basis();
    Block tmp{}, out{};
    for (std::size_t v = 0; v < 8; ++v)
        for (std::size_t x = 0; x < 8; ++x) {
            double s = 0.0;
            for (std::size_t u = 0; u < 8; ++u)
                s += b[u][x] * in[v * 8 + u];
            tmp[v * 8 + x] = s;
        }
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
            double s = 0.0;
            for (std::size_t v = 0; v < 8; ++v)
                s += b[v][y] * tmp[v * 8 + x];
            out[y * 8 + x] = s;
        }
    return out;
}

/// The 13-bit fixed-point "slow integer" forward DCT used by stock JPEG
/// encoders. `data` holds level-shifted samples in natural order and is
/// replaced by coefficients scaled by 8.
inline void fdct_islow(std::array<std::int32_t, 64>& data)
{
    constexpr int kConstBits = 13, kPass1Bits = 2;
    constexpr std::int64_t c0298 = 2446, c0390 = 3196, c0541 = 4433, c0765 = 6270, c0899 = 7373, c1175 = 9633,
                           c1501 = 12299, c1847 = 15137, c1961 = 16069, c2053 = 16819, c2562 = 20995, c3072 = 25172;
    const auto descale = [](std::int64_t x, int n) { return static_cast<std::int32_t>((x + (std::int64_t{1} << (n - 1))) >> n); };

    for (int pass = 0; pass < 2; ++pass) {
        const int step = pass == 0 ? 1 : 8;   // element stride within a line
        const int next = pass == 0 ? 8 : 1;   // stride between lines
        const int odd_shift = pass == 0 ? kConstBits - kPass1Bits : kConstBits + kPass1Bits;
        for (int line = 0; line < 8; ++line) {
            std::int32_t* d = data.data() + line * next;
            const auto at = [&](int i) -> std::int32_t& { return d[i * step]; };
            const std::int64_t tmp0 = at(0) + at(7), tmp7 = at(0) - at(7);
            const std::int64_t tmp1 = at(1) + at(6), tmp6 = at(1) - at(6);
            const std::int64_t tmp2 = at(2) + at(5), tmp5 = at(2) - at(5);
            const std::int64_t tmp3 = at(3) + at(4), tmp4 = at(3) - at(4);

            const std::int64_t tmp10 = tmp0 + tmp3, tmp13 = tmp0 - tmp3;
            const std::int64_t tmp11 = tmp1 + tmp2, tmp12 = tmp1 - tmp2;
            if (pass == 0) {
                at(0) = static_cast<std::int32_t>((tmp10 + tmp11) * (1 << kPass1Bits));
                at(4) = static_cast<std::int32_t>((tmp10 - tmp11) * (1 << kPass1Bits));
            } else {
                at(0) = descale(tmp10 + tmp11, kPass1Bits);
                at(4) = descale(tmp10 - tmp11, kPass1Bits);
            }
            const std::int64_t e = (tmp12 + tmp13) * c0541;
            at(2) = descale(e + tmp13 * c0765, odd_shift);
            at(6) = descale(e - tmp12 * c1847, odd_shift);

            std::int64_t z1 = tmp4 + tmp7, z2 = tmp5 + tmp6, z3 = tmp4 + tmp6, z4 = tmp5 + tmp7;
            const std::int64_t z5 = (z3 + z4) * c1175;
            const std::int64_t o4 = tmp4 * c0298, o5 = tmp5 * c2053, o6 = tmp6 * c3072, o7 = tmp7 * c1501;
            z1 *= -c0899;
            z2 *= -c2562;
            z3 = z3 * -c1961 + z5;
            z4 = z4 * -c0390 + z5;
            at(7) = descale(o4 + z1 + z3, odd_shift);
            at(5) = descale(o5 + z2 + z4, odd_shift);
            at(3) = descale(o6 + z2 + z3, odd_shift);
            at(1) = descale(o7 + z1 + z4, odd_shift);
        }
    }
}

/// Quantizes an `fdct_islow` coefficient (scaled by 8), rounding half away from zero.
inline int quantize_scaled(std::int32_t coef, int step)
{
    const std::int32_t q = step * 8;
    return coef < 0 ? -((-coef + q / 2) / q) : (coef + q / 2) / q;
}

/// The 13-bit fixed-point "slow integer" inverse DCT with its output range
/// limiter. `coef` holds quantized coefficients in natural order.
inline void idct_islow(const std::array<int, 64>& coef, const QuantTable& qt, std::uint8_t* out, std::size_t stride)
{
    constexpr int kConstBits = 13;
    constexpr int kPass1Bits = 2;
    constexpr std::int64_t k0_298631336 = 2446, k0_390180644 = 3196, k0_541196100 = 4433, k0_765366865 = 6270,
                           k0_899976223 = 7373, k1_175875602 = 9633, k1_501321110 = 12299, k1_847759065 = 15137,
                           k1_961570560 = 16069, k2_053119869 = 16819, k2_562915447 = 20995, k3_072711026 = 25172;
    const auto descale = [](std::int64_t x, int n) { return (x + (std::int64_t{1} << (n - 1))) >> n; };
    const auto range_limit = [](std::int64_t x) {
        int v = static_cast<int>(x & 1023);
        if (v >= 512)
            v -= 1024;
        return static_cast<std::uint8_t>(std::clamp(v + 128, 0, 255));
    };

    struct Odd {
        std::int64_t t0, t1, t2, t3;
    };
    const auto odd_part = [&](std::int64_t t0, std::int64_t t1, std::int64_t t2, std::int64_t t3) {
        std::int64_t z1 = t0 + t3, z2 = t1 + t2, z3 = t0 + t2, z4 = t1 + t3;
        const std::int64_t z5 = (z3 + z4) * k1_175875602;
        t0 *= k0_298631336;
        t1 *= k2_053119869;
        t2 *= k3_072711026;
        t3 *= k1_501321110;
        z1 *= -k0_899976223;
        z2 *= -k2_562915447;
        z3 *= -k1_961570560;
        z4 *= -k0_390180644;
        z3 += z5;
        z4 += z5;
        return Odd{t0 + z1 + z3, t1 + z2 + z4, t2 + z2 + z3, t3 + z1 + z4};
    };

    std::array<std::int64_t, 64> ws{};
    for (int col = 0; col < 8; ++col) {
        const auto in = [&](int row) {
            const auto i = static_cast<std::size_t>(row * 8 + col);
            return static_cast<std::int64_t>(coef[i]) * qt.q[i];
        };
        bool ac_zero = true;
        for (int r = 1; r < 8; ++r)
            ac_zero = ac_zero && coef[static_cast<std::size_t>(r * 8 + col)] == 0;
        if (ac_zero) {
            const std::int64_t dc = in(0) * (1 << kPass1Bits);
            for (int r = 0; r < 8; ++r)
                ws[static_cast<std::size_t>(r * 8 + col)] = dc;
            continue;
        }
        std::int64_t z2 = in(2), z3 = in(6);
        std::int64_t z1 = (z2 + z3) * k0_541196100;
        const std::int64_t tmp2 = z1 + z3 * -k1_847759065;
        const std::int64_t tmp3 = z1 + z2 * k0_765366865;
        z2 = in(0);
        z3 = in(4);
        const std::int64_t tmp0 = (z2 + z3) * (1 << kConstBits);
        const std::int64_t tmp1 = (z2 - z3) * (1 << kConstBits);
        const std::int64_t t10 = tmp0 + tmp3, t13 = tmp0 - tmp3, t11 = tmp1 + tmp2, t12 = tmp1 - tmp2;
        const Odd o = odd_part(in(7), in(5), in(3), in(1));
        const int sh = kConstBits - kPass1Bits;
        ws[static_cast<std::size_t>(0 * 8 + col)] = descale(t10 + o.t3, sh);
        ws[static_cast<std::size_t>(7 * 8 + col)] = descale(t10 - o.t3, sh);
        ws[static_cast<std::size_t>(1 * 8 + col)] = descale(t11 + o.t2, sh);
        ws[static_cast<std::size_t>(6 * 8 + col)] = descale(t11 - o.t2, sh);
        ws[static_cast<std::size_t>(2 * 8 + col)] = descale(t12 + o.t1, sh);
        ws[static_cast<std::size_t>(5 * 8 + col)] = descale(t12 - o.t1, sh);
        ws[static_cast<std::size_t>(3 * 8 + col)] = descale(t13 + o.t0, sh);
        ws[static_cast<std::size_t>(4 * 8 + col)] = descale(t13 - o.t0, sh);
    }
    for (std::size_t row = 0; row < 8; ++row) {
        const std::int64_t* w = ws.data() + row * 8;
        std::uint8_t* o = out + row * stride;
        const int sh = kConstBits + kPass1Bits + 3;
        std::int64_t z2 = w[2], z3 = w[6];
        std::int64_t z1 = (z2 + z3) * k0_541196100;
        const std::int64_t tmp2 = z1 + z3 * -k1_847759065;
        const std::int64_t tmp3 = z1 + z2 * k0_765366865;
        const std::int64_t tmp0 = (w[0] + w[4]) * (1 << kConstBits);
        const std::int64_t tmp1 = (w[0] - w[4]) * (1 << kConstBits);
        const std::int64_t t10 = tmp0 + tmp3, t13 = tmp0 - tmp3, t11 = tmp1 + tmp2, t12 = tmp1 - tmp2;
        const Odd od = odd_part(w[7], w[5], w[3], w[1]);
        o[0] = range_limit(descale(t10 + od.t3, sh));
        o[7] = range_limit(descale(t10 - od.t3, sh));
        o[1] = range_limit(descale(t11 + od.t2, sh));
        o[6] = range_limit(descale(t11 - od.t2, sh));
        o[2] = range_limit(descale(t12 + od.t1, sh));
        o[5] = range_limit(descale(t12 - od.t1, sh));
        o[3] = range_limit(descale(t13 + od.t0, sh));
        o[4] = range_limit(descale(t13 - od.t0, sh));
    }
}

// ---------------------------------------------------------------------------
// Huffman tables

struct HuffmanSpec {
    std::array<std::uint8_t, 16> counts{};  // codes of length 1..16
    std::vector<std::uint8_t> symbols;
};

inline const HuffmanSpec& std_dc_luma()
{
    static const HuffmanSpec spec{{0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0},
        {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}};
    return spec;
}

inline const HuffmanSpec& std_ac_luma()
{
    static const HuffmanSpec spec{{0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7d},
        {0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07, 0x22, 0x71,
            0x14, 0x32, 0x81, 0x91, 0xa1, 0x08, 0x23, 0x42, 0xb1, 0xc1, 0x15, 0x52, 0xd1, 0xf0, 0x24, 0x33, 0x62, 0x72,
            0x82, 0x09, 0x0a, 0x16, 0x17, 0x18, 0x19, 0x1a, 0x25, 0x26, 0x27, 0x28, 0x29, 0x2a, 0x34, 0x35, 0x36, 0x37,
            0x38, 0x39, 0x3a, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59,
            0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a, 0x83,
            0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9a, 0xa2, 0xa3,
            0xa4, 0xa5, 0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3,
            0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe1, 0xe2,
            0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea, 0xf1, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8, 0xf9,
            0xfa}};
    return spec;
}

/// Encoder view: code word and length for each symbol value.
struct HuffmanCodes {
    std::array<std::uint16_t, 256> code{};
    std::array<std::uint8_t, 256> length{};

    explicit HuffmanCodes(const HuffmanSpec& spec)
    {
        std::uint32_t c = 0;
        std::size_t k = 0;
        for (int len = 1; len <= 16; ++len) {
            for (int i = 0; i < spec.counts[static_cast<std::size_t>(len - 1)]; ++i, ++k) {
                code[spec.symbols[k]] = static_cast<std::uint16_t>(c++);
                length[spec.symbols[k]] = static_cast<std::uint8_t>(len);
            }
            c <<= 1;
        }
    }
};

// ---------------------------------------------------------------------------
// Streams and errors

struct JpegStream {
    std::vector<std::uint8_t> bytes;
    std::size_t width = 0;
    std::size_t height = 0;

    std::size_t bits() const { return bytes.size() * 8; }
    /// Stream bits per pixel of `pixel_count` pixels (defaults to the coded plane).
    double bpp(std::size_t pixel_count = 0) const
    {
        const std::size_t px = pixel_count ? pixel_count : width * height;
        return static_cast<double>(bits()) / static_cast<double>(px);
    }
};

class DecodeError : public std::runtime_error {
public:
    DecodeError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset)
    {
    }
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

// ---------------------------------------------------------------------------
// Encoder

namespace detail {

class BitWriter {
public:
    explicit BitWriter(std::vector<std::uint8_t>& out) : out_(out) {}

    void put(std::uint32_t bits, int count)
    {
        for (int i = count - 1; i >= 0; --i) {
            acc_ = static_cast<std::uint8_t>((acc_ << 1) | ((bits >> i) & 1u));
            if (++filled_ == 8)
                emit();
        }
    }

    /// Pads the final partial byte with one-bits.
    void flush()
    {
        while (filled_ != 0)
            put(1, 1);
    }

private:
    void emit()
    {
        out_.push_back(acc_);
        if (acc_ == 0xFF)
            out_.push_back(0x00);
        acc_ = 0;
        filled_ = 0;
    }

    std::vector<std::uint8_t>& out_;
    std::uint8_t acc_ = 0;
    int filled_ = 0;
};

inline int magnitude_category(int v)
{
    int a = v < 0 ? -v : v;
    int n = 0;
    while (a) {
        ++n;
        a >>= 1;
    }
    return n;
}

inline std::uint32_t magnitude_bits(int v, int cat)
{
    return static_cast<std::uint32_t>(v < 0 ? v + (1 << cat) - 1 : v);
}

inline void put_u16(std::vector<std::uint8_t>& out, std::size_t v)
{
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
}

inline void write_dht(std::vector<std::uint8_t>& out, int table_class, int id, const HuffmanSpec& spec)
{
    out.insert(out.end(), {0xFF, 0xC4});
    put_u16(out, 2 + 1 + 16 + spec.symbols.size());
    out.push_back(static_cast<std::uint8_t>((table_class << 4) | id));
    out.insert(out.end(), spec.counts.begin(), spec.counts.end());
    out.insert(out.end(), spec.symbols.begin(), spec.symbols.end());
}

}  // namespace detail

/// Baseline sequential encode of one luma plane. Edges are replicated out to
/// the next multiple of 8 before transform.
inline JpegStream jpeg_encode(const LumaImage& img, int qf)
{
    if (img.width == 0 || img.height == 0 || img.width > 65535 || img.height > 65535)
        throw std::invalid_argument("jpeg_encode: unsupported dimensions");
    const QuantTable qt = quant_table_from_qf(qf);
    const HuffmanCodes dc_codes(std_dc_luma());
    const HuffmanCodes ac_codes(std_ac_luma());

    JpegStream s;
    s.width = img.width;
    s.height = img.height;
    auto& out = s.bytes;
    out.insert(out.end(), {0xFF, 0xD8});
    // JFIF APP0, version 1.01, no density units, no thumbnail
    out.insert(out.end(), {0xFF, 0xE0, 0x00, 0x10, 'J', 'F', 'I', 'F', 0x00, 0x01, 0x01, 0x00, 0x00, 0x01, 0x00, 0x01,
                              0x00, 0x00});
    out.insert(out.end(), {0xFF, 0xDB, 0x00, 0x43, 0x00});
    for (int k : kZigzag)
        out.push_back(static_cast<std::uint8_t>(qt.q[static_cast<std::size_t>(k)]));
    out.insert(out.end(), {0xFF, 0xC0, 0x00, 0x0B, 0x08});
    detail::put_u16(out, img.height);
    detail::put_u16(out, img.width);
    out.insert(out.end(), {0x01, 0x01, 0x11, 0x00});
    detail::write_dht(out, 0, 0, std_dc_luma());
    detail::write_dht(out, 1, 0, std_ac_luma());
    out.insert(out.end(), {0xFF, 0xDA, 0x00, 0x08, 0x01, 0x01, 0x00, 0x00, 0x3F, 0x00});

    detail::BitWriter bw(out);
    const std::size_t bw_blocks = (img.width + 7) / 8;
    const std::size_t bh_blocks = (img.height + 7) / 8;
    int prev_dc = 0;
    for (std::size_t by = 0; by < bh_blocks; ++by)
        for (std::size_t bx = 0; bx < bw_blocks; ++bx) {
            std::array<std::int32_t, 64> blk{};
            for (std::size_t y = 0; y < 8; ++y) {
                const std::size_t sy = std::min(by * 8 + y, img.height - 1);
                for (std::size_t x = 0; x < 8; ++x) {
                    const std::size_t sx = std::min(bx * 8 + x, img.width - 1);
                    blk[y * 8 + x] = static_cast<std::int32_t>(img.at(sx, sy)) - 128;
                }
            }
            fdct_islow(blk);
            std::array<int, 64> zz{};
            for (std::size_t i = 0; i < 64; ++i) {
                const auto n = static_cast<std::size_t>(kZigzag[i]);
                zz[i] = quantize_scaled(blk[n], qt.q[n]);
            }

            const int diff = zz[0] - prev_dc;
            prev_dc = zz[0];
            const int dcat = detail::magnitude_category(diff);
            bw.put(dc_codes.code[static_cast<std::size_t>(dcat)], dc_codes.length[static_cast<std::size_t>(dcat)]);
            if (dcat)
                bw.put(detail::magnitude_bits(diff, dcat), dcat);

            int run = 0;
            for (std::size_t i = 1; i < 64; ++i) {
                if (zz[i] == 0) {
                    ++run;
                    continue;
                }
                while (run > 15) {
                    bw.put(ac_codes.code[0xF0], ac_codes.length[0xF0]);
                    run -= 16;
                }
                const int cat = detail::magnitude_category(zz[i]);
                const auto sym = static_cast<std::size_t>((run << 4) | cat);
                bw.put(ac_codes.code[sym], ac_codes.length[sym]);
                bw.put(detail::magnitude_bits(zz[i], cat), cat);
                run = 0;
            }
            if (run > 0)
                bw.put(ac_codes.code[0x00], ac_codes.length[0x00]);
        }
    bw.flush();
    out.insert(out.end(), {0xFF, 0xD9});
    return s;
}

// ---------------------------------------------------------------------------
// Decoder

namespace detail {

/// Decoder view of a Huffman table (canonical code ranges per length).
struct HuffmanDecoder {
    std::array<std::int32_t, 17> mincode{}, maxcode{}, valptr{};
    std::vector<std::uint8_t> symbols;
    bool defined = false;

    void build(const HuffmanSpec& spec)
    {
        symbols = spec.symbols;
        std::int32_t code = 0, k = 0;
        for (int len = 1; len <= 16; ++len) {
            const int n = spec.counts[static_cast<std::size_t>(len - 1)];
            valptr[static_cast<std::size_t>(len)] = k;
            mincode[static_cast<std::size_t>(len)] = code;
            code += n;
            k += n;
            maxcode[static_cast<std::size_t>(len)] = n ? code - 1 : -1;
            code <<= 1;
        }
        defined = true;
    }
};

class BitReader {
public:
    BitReader(const std::vector<std::uint8_t>& data, std::size_t pos) : d_(data), pos_(pos) {}

    int bit()
    {
        if (left_ == 0) {
            if (pos_ >= d_.size())
                throw DecodeError("truncated entropy-coded data", pos_);
            std::uint8_t b = d_[pos_];
            if (b == 0xFF) {
                if (pos_ + 1 >= d_.size())
                    throw DecodeError("truncated entropy-coded data", pos_);
                if (d_[pos_ + 1] != 0x00)
                    throw DecodeError("entropy-coded data ended before all blocks were decoded", pos_);
                pos_ += 2;
            } else {
                ++pos_;
            }
            cur_ = b;
            left_ = 8;
        }
        --left_;
        return (cur_ >> left_) & 1;
    }

    int bits(int n)
    {
        int v = 0;
        for (int i = 0; i < n; ++i)
            v = (v << 1) | bit();
        return v;
    }

    int decode(const HuffmanDecoder& h)
    {
        const std::size_t start = pos_;
        std::int32_t code = 0;
        for (int len = 1; len <= 16; ++len) {
            code = (code << 1) | bit();
            if (code <= h.maxcode[static_cast<std::size_t>(len)] && h.maxcode[static_cast<std::size_t>(len)] >= 0) {
                const auto idx = static_cast<std::size_t>(h.valptr[static_cast<std::size_t>(len)] + code
                    - h.mincode[static_cast<std::size_t>(len)]);
                return h.symbols[idx];
            }
        }
        throw DecodeError("invalid Huffman code", start);
    }

    /// Drops buffered bits and consumes an expected RSTn marker.
    void restart(int expected)
    {
        left_ = 0;
        if (pos_ + 1 >= d_.size() || d_[pos_] != 0xFF || d_[pos_ + 1] != 0xD0 + expected)
            throw DecodeError("expected RST" + std::to_string(expected) + " marker", pos_);
        pos_ += 2;
    }

    std::size_t position() const { return pos_; }

private:
    const std::vector<std::uint8_t>& d_;
    std::size_t pos_;
    std::uint8_t cur_ = 0;
    int left_ = 0;
};

inline int extend(int v, int cat)
{
    return cat == 0 ? 0 : (v < (1 << (cat - 1)) ? v - (1 << cat) + 1 : v);
}

}  // namespace detail

/// Decodes a baseline single-component stream: dequantize, inverse DCT,
/// unshift and clamp, then crop the block padding.
inline LumaImage jpeg_decode(const std::vector<std::uint8_t>& data)
{
    std::array<QuantTable, 4> qtables{};
    std::array<bool, 4> qdefined{};
    std::array<detail::HuffmanDecoder, 4> dc_tables, ac_tables;
    std::size_t width = 0, height = 0;
    int comp_id = -1, comp_q = 0;
    std::size_t restart_interval = 0;
    bool have_frame = false;

    const auto u16 = [&](std::size_t p) {
        if (p + 1 >= data.size())
            throw DecodeError("truncated marker segment", p);
        return static_cast<std::size_t>((data[p] << 8) | data[p + 1]);
    };

    if (data.size() < 4 || data[0] != 0xFF || data[1] != 0xD8)
        throw DecodeError("missing SOI marker", 0);
    std::size_t pos = 2;
    while (true) {
        if (pos >= data.size())
            throw DecodeError("stream ended before a scan was found", pos);
        if (data[pos] != 0xFF)
            throw DecodeError("expected marker", pos);
        while (pos < data.size() && data[pos] == 0xFF)
            ++pos;  // fill bytes
        if (pos >= data.size())
            throw DecodeError("truncated marker", pos);
        const std::uint8_t marker = data[pos++];
        const std::size_t seg = pos;
        if (marker == 0xD9)
            throw DecodeError("EOI before any scan", seg - 2);
        const std::size_t len = u16(seg);
        if (len < 2 || seg + len > data.size())
            throw DecodeError("marker segment length out of range", seg);
        const std::size_t end = seg + len;
        std::size_t p = seg + 2;

        switch (marker) {
        case 0xDB:  // DQT
            while (p < end) {
                const int pq = data[p] >> 4, tq = data[p] & 15;
                if (tq > 3)
                    throw DecodeError("bad quantization table id", p);
                ++p;
                const std::size_t need = pq ? 128 : 64;
                if (p + need > end)
                    throw DecodeError("truncated DQT", p);
                for (std::size_t i = 0; i < 64; ++i) {
                    const std::uint16_t v = pq ? static_cast<std::uint16_t>((data[p + 2 * i] << 8) | data[p + 2 * i + 1])
                                               : data[p + i];
                    qtables[static_cast<std::size_t>(tq)].q[static_cast<std::size_t>(kZigzag[i])] = v;
                }
                qdefined[static_cast<std::size_t>(tq)] = true;
                p += need;
            }
            break;
        case 0xC0:
        case 0xC1: {  // SOF0 / SOF1 (Huffman, sequential)
            if (end - p < 9)
                throw DecodeError("truncated frame header", p);
            if (data[p] != 8)
                throw DecodeError("only 8-bit sample precision is supported", p);
            height = u16(p + 1);
            width = u16(p + 3);
            const int ncomp = data[p + 5];
            if (ncomp != 1)
                throw DecodeError("only single-component streams are supported (found "
                        + std::to_string(ncomp) + ")", p + 5);
            if (width == 0 || height == 0)
                throw DecodeError("zero image dimension", p + 1);
            comp_id = data[p + 6];
            comp_q = data[p + 8] & 3;
            have_frame = true;
            break;
        }
        case 0xC2: case 0xC3: case 0xC5: case 0xC6: case 0xC7: case 0xC9: case 0xCA: case 0xCB:
        case 0xCD: case 0xCE: case 0xCF:
            throw DecodeError("unsupported JPEG process (progressive, lossless or arithmetic)", seg - 2);
        case 0xC4:  // DHT
            while (p < end) {
                const int tc = data[p] >> 4, th = data[p] & 15;
                if (tc > 1 || th > 3)
                    throw DecodeError("bad Huffman table class/id", p);
                ++p;
                if (p + 16 > end)
                    throw DecodeError("truncated DHT", p);
                HuffmanSpec spec;
                std::size_t total = 0;
                for (std::size_t i = 0; i < 16; ++i) {
                    spec.counts[i] = data[p + i];
                    total += data[p + i];
                }
                p += 16;
                if (p + total > end || total > 256)
                    throw DecodeError("truncated DHT symbol list", p);
                spec.symbols.assign(data.begin() + static_cast<std::ptrdiff_t>(p),
                    data.begin() + static_cast<std::ptrdiff_t>(p + total));
                p += total;
                (tc == 0 ? dc_tables : ac_tables)[static_cast<std::size_t>(th)].build(spec);
            }
            break;
        case 0xDD:  // DRI
            restart_interval = u16(p);
            break;
        case 0xDA: {  // SOS
            if (!have_frame)
                throw DecodeError("scan before frame header", seg - 2);
            if (end - p < 6)
                throw DecodeError("truncated scan header", p);
            if (data[p] != 1 || data[p + 1] != comp_id)
                throw DecodeError("scan does not reference the frame's single component", p);
            const int td = data[p + 2] >> 4, ta = data[p + 2] & 15;
            if (td > 3 || ta > 3 || !dc_tables[static_cast<std::size_t>(td)].defined
                || !ac_tables[static_cast<std::size_t>(ta)].defined)
                throw DecodeError("scan references an undefined Huffman table", p + 2);
            if (!qdefined[static_cast<std::size_t>(comp_q)])
                throw DecodeError("frame references an undefined quantization table", p);
            if (data[p + 3] != 0 || data[p + 4] != 63 || data[p + 5] != 0)
                throw DecodeError("scan is not baseline sequential", p + 3);

            const QuantTable& qt = qtables[static_cast<std::size_t>(comp_q)];
            const auto& dct = dc_tables[static_cast<std::size_t>(td)];
            const auto& act = ac_tables[static_cast<std::size_t>(ta)];
            const std::size_t bw_blocks = (width + 7) / 8, bh_blocks = (height + 7) / 8;
            LumaImage padded(bw_blocks * 8, bh_blocks * 8);
            detail::BitReader br(data, end);
            int pred = 0;
            std::size_t mcu = 0;
            int next_rst = 0;
            for (std::size_t by = 0; by < bh_blocks; ++by)
                for (std::size_t bx = 0; bx < bw_blocks; ++bx, ++mcu) {
                    if (restart_interval && mcu && mcu % restart_interval == 0) {
                        br.restart(next_rst);
                        next_rst = (next_rst + 1) & 7;
                        pred = 0;
                    }
                    std::array<int, 64> coef{};
                    const int dcat = br.decode(dct);
                    if (dcat > 11)
                        throw DecodeError("DC magnitude category out of range", br.position());
                    pred += detail::extend(br.bits(dcat), dcat);
                    coef[0] = pred;
                    for (std::size_t k = 1; k < 64;) {
                        const int rs = br.decode(act);
                        const int run = rs >> 4, cat = rs & 15;
                        if (cat == 0) {
                            if (run == 15) {
                                k += 16;
                                continue;
                            }
                            break;
                        }
                        k += static_cast<std::size_t>(run);
                        if (k > 63)
                            throw DecodeError("AC coefficient index out of range", br.position());
                        coef[static_cast<std::size_t>(kZigzag[k])] = detail::extend(br.bits(cat), cat);
                        ++k;
                    }
                    idct_islow(coef, qt, &padded.pixels[by * 8 * padded.width + bx * 8], padded.width);
                }
            return crop(padded, 0, 0, width, height);
        }
        default:
            if (marker >= 0xD0 && marker <= 0xD7)
                throw DecodeError("restart marker outside a scan", seg - 2);
            break;  // APPn, COM and others are skipped
        }
        pos = end;
    }
}

inline LumaImage jpeg_decode(const JpegStream& stream) { return jpeg_decode(stream.bytes); }

/// Quality factor whose scaled standard table equals the stream's first
/// quantization table, if any does.
inline std::optional<int> stream_quality(const std::vector<std::uint8_t>& data)
{
    std::size_t pos = 2;
    if (data.size() < 4 || data[0] != 0xFF || data[1] != 0xD8)
        return std::nullopt;
    while (pos + 4 <= data.size() && data[pos] == 0xFF) {
        const std::uint8_t marker = data[pos + 1];
        const std::size_t len = static_cast<std::size_t>((data[pos + 2] << 8) | data[pos + 3]);
        if (marker == 0xDA || pos + 2 + len > data.size())
            break;
        if (marker == 0xDB && len >= 67 && (data[pos + 4] >> 4) == 0) {
            QuantTable t;
            for (std::size_t i = 0; i < 64; ++i)
                t.q[static_cast<std::size_t>(kZigzag[i])] = data[pos + 5 + i];
            for (int qf = 1; qf <= 100; ++qf)
                if (quant_table_from_qf(qf) == t)
                    return qf;
            return std::nullopt;
        }
        pos += 2 + len;
    }
    return std::nullopt;
}

}  // namespace cisr::jpeg

#endif  // CISRDCNN_JPEG_HPP
