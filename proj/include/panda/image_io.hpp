#pragma once

#include <string>

#include "panda/image.hpp"

namespace panda {

// PNG and JPEG round the codec support out; anything else is rejected by
// extension before a decode is attempted.
bool is_supported_image(const std::string& path);

// Decodes to 8-bit planar. Grayscale stays 1-channel, color becomes 3
// (alpha is dropped). Raises FileNotFound / UndecodableImage.
ImageU8 load_image(const std::string& path);

// 8-bit PNG writer for 1- or 3-channel images.
void save_png(const std::string& path, const ImageU8& img);

}  // namespace panda
