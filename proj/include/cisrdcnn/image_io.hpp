#ifndef CISRDCNN_IMAGE_IO_HPP
#define CISRDCNN_IMAGE_IO_HPP

#include <png.h>

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "image.hpp"
#include "metrics.hpp"

namespace cisr::io {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot create " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw IoError("write failed for " + path.string());
}

/// Parses a binary P5 graymap with maxval <= 255.
inline LumaImage decode_pgm(const std::vector<std::uint8_t>& bytes, const std::string& name = "<memory>")
{
    std::size_t pos = 0;
    const auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n')
                    ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    const auto number = [&] {
        skip_space();
        std::size_t v = 0;
        bool any = false;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + (bytes[pos++] - '0');
            any = true;
        }
        if (!any)
            throw IoError(name + ": malformed P5 header");
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
        throw IoError(name + ": not a binary P5 graymap");
    pos = 2;
    const std::size_t w = number(), h = number(), maxval = number();
    if (maxval == 0 || maxval > 255)
        throw IoError(name + ": only 8-bit P5 is supported");
    ++pos;  // single whitespace before raster
    if (pos + w * h > bytes.size())
        throw IoError(name + ": truncated P5 raster");
    return LumaImage(w, h,
        std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
            bytes.begin() + static_cast<std::ptrdiff_t>(pos + w * h)));
}

inline std::vector<std::uint8_t> encode_pgm(const LumaImage& img)
{
    const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    return out;
}

struct LoadedImage {
    LumaImage luma;
    bool converted_from_color = false;
};

inline LoadedImage decode_png(const std::vector<std::uint8_t>& bytes, const std::string& name = "<memory>")
{
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
        throw IoError(name + ": " + image.message);
    const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
    image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
        const std::string msg = image.message;
        png_image_free(&image);
        throw IoError(name + ": " + msg);
    }
    if (!color)
        return {LumaImage(image.width, image.height, std::move(buf)), false};
    return {metrics::to_luma(RgbImage{image.width, image.height, std::move(buf)}), true};
}

inline std::vector<std::uint8_t> encode_png(const LumaImage& img)
{
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_GRAY;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.pixels.data(), 0, nullptr))
        throw IoError(std::string("png encode: ") + image.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.pixels.data(), 0, nullptr))
        throw IoError(std::string("png encode: ") + image.message);
    out.resize(size);
    return out;
}

inline bool is_png(const std::vector<std::uint8_t>& b)
{
    return b.size() >= 8 && b[0] == 0x89 && b[1] == 'P' && b[2] == 'N' && b[3] == 'G';
}

/// Loads a P5 or PNG file by content; colour PNGs are reduced to luma.
inline LoadedImage load_image(const std::filesystem::path& path)
{
    const auto bytes = read_bytes(path);
    if (is_png(bytes))
        return decode_png(bytes, path.string());
    return {decode_pgm(bytes, path.string()), false};
}

/// Writes PNG for a ".png" extension, P5 otherwise.
inline void save_image(const std::filesystem::path& path, const LumaImage& img)
{
    std::string ext = path.extension().string();
    for (char& c : ext)
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    write_bytes(path, ext == ".png" ? encode_png(img) : encode_pgm(img));
}

}  // namespace cisr::io

#endif  // CISRDCNN_IMAGE_IO_HPP
