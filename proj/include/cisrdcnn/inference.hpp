#ifndef CISRDCNN_INFERENCE_HPP
#define CISRDCNN_INFERENCE_HPP

#include <cstddef>

#include "image.hpp"
#include "network.hpp"
#include "resample.hpp"

namespace cisr {

/// LR tile edge used for whole-image inference.
inline constexpr std::size_t kInferenceTile = 96;

/// Super-resolves a decoded JPEG plane by 2 with a trained network.
inline LumaImage super_resolve(const LumaImage& z, const net::Network& model, std::size_t tile = kInferenceTile)
{
    return to_luma_image(net::tiled_forward(to_tensor(z), model, tile, net::receptive_radius(model.arch)));
}

/// The reference upscaler the network is compared against.
inline LumaImage bicubic_upscale(const LumaImage& z) { return resample::bicubic_resize(z, 2.0); }

}  // namespace cisr

#endif  // CISRDCNN_INFERENCE_HPP
