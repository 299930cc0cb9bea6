#pragma once

#include <vector>

#include "wmlab/image.hpp"
#include "wmlab/nn/networks.hpp"

namespace wmlab::nn {

/// Packs same-shaped HWC images into an NCHW batch.
Tensor to_tensor(const std::vector<const ImageTensor*>& images);
Tensor to_tensor(const std::vector<ImageTensor>& images);
Tensor to_tensor(const ImageTensor& image);

/// Sample `i` of `t` as an image, clamped into [0,1].
ImageTensor to_image(const Tensor& t, int i);

/// Channel-replicated copy of a single-channel batch.
Tensor repeat_channels(const Tensor& t, int channels);

/// Runs `net` over `images` in fixed-size batches and clamps every output.
std::vector<ImageTensor> map_images(const Network& net,
                                    const std::vector<ImageTensor>& images,
                                    int batch = 32);

}  // namespace wmlab::nn
