#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "wmlab/image.hpp"

namespace wmlab {

/// 8-bit PNG codec. Pixels map linearly between [0,1] and 0..255; encoding
/// rounds to the nearest level. Grayscale and RGB are supported.
std::vector<unsigned char> encode_png(const ImageTensor& img);
/// Decodes gray, gray+alpha, RGB, RGBA and palette PNGs; alpha is dropped.
/// With `channels` set to 1 or 3 the result is converted to that layout.
ImageTensor decode_png(const std::vector<unsigned char>& bytes, int channels = 0);

void write_png(const std::filesystem::path& file, const ImageTensor& img);
ImageTensor read_png(const std::filesystem::path& file, int channels = 0);

std::string png_base64(const ImageTensor& img);
ImageTensor png_from_base64(const std::string& text, int channels = 0);

/// Baseline JPEG at the given quality (1..100), 4:2:0 chroma subsampling for
/// RGB, decoded back to [0,1].
ImageTensor jpeg_roundtrip(const ImageTensor& img, int quality);

/// Snap every value to the nearest 8-bit level, as a PNG round trip would.
ImageTensor quantize8(const ImageTensor& img);

}  // namespace wmlab
