#ifndef CISRDCNN_DEGRADE_HPP
#define CISRDCNN_DEGRADE_HPP

#include <stdexcept>
#include <string>

#include "image.hpp"
#include "jpeg.hpp"
#include "resample.hpp"

namespace cisr::jpeg {

/// Observation pair of the degradation model: y is the blurred and
/// downsampled image, z its JPEG-compressed version.
struct Degraded {
    LumaImage y;
    LumaImage z;
    JpegStream stream;
};

inline constexpr std::size_t kMinDegradeExtent = 16;

/// Crops odd trailing rows/columns so both dimensions are even.
inline LumaImage crop_even(const LumaImage& img)
{
    return crop(img, 0, 0, img.width & ~std::size_t{1}, img.height & ~std::size_t{1});
}

inline Degraded degrade(const LumaImage& img, int qf, resample::ResizeOptions opt = {})
{
    if (img.width < kMinDegradeExtent || img.height < kMinDegradeExtent)
        throw std::invalid_argument("degrade: image " + std::to_string(img.width) + "x" + std::to_string(img.height)
            + " smaller than " + std::to_string(kMinDegradeExtent) + " px");
    const LumaImage x = crop_even(img);
    Degraded d;
    d.y = resample::bicubic_resize(x, 0.5, opt);
    d.stream = jpeg_encode(d.y, qf);
    d.z = jpeg_decode(d.stream);
    return d;
}

}  // namespace cisr::jpeg

#endif  // CISRDCNN_DEGRADE_HPP
