#ifndef CISRDCNN_CISRDCNN_HPP
#define CISRDCNN_CISRDCNN_HPP

#include "adam.hpp"
#include "checkpoint.hpp"
#include "degrade.hpp"
#include "gradcheck.hpp"
#include "image.hpp"
#include "image_io.hpp"
#include "inference.hpp"
#include "jpeg.hpp"
#include "layers.hpp"
#include "lbrc.hpp"
#include "metrics.hpp"
#include "network.hpp"
#include "resample.hpp"
#include "tensor.hpp"
#include "training.hpp"

#endif  // CISRDCNN_CISRDCNN_HPP
