#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "panda/tensor.hpp"

namespace panda {

// 8-bit image in planar [C, H, W] order.
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<uint8_t> data;  // planar, c-major

    bool empty() const { return data.empty(); }
    int64_t plane() const { return int64_t(width) * height; }
    uint8_t& at(int c, int y, int x) { return data[size_t((int64_t(c) * height + y) * width + x)]; }
    uint8_t at(int c, int y, int x) const {
        return data[size_t((int64_t(c) * height + y) * width + x)];
    }
};

// v -> (v/255 - 0.5) / 0.5, landing exactly in [-1, 1]
Tensor<float> normalize_image(const ImageU8& img);

// inverse of normalize_image; clamps to [0, 255] and rounds to nearest
ImageU8 denormalize_image(const Tensor<float>& chw);

// float-space helpers used by batching and augmentation
Tensor<float> resize_bilinear(const Tensor<float>& chw, int out_h, int out_w);
ImageU8 resize_bilinear_u8(const ImageU8& img, int out_h, int out_w);

// exact right-angle rotation; quarter_turns in {0,1,2,3}, counter-clockwise
Tensor<float> rotate90(const Tensor<float>& chw, int quarter_turns);

// replicate a single-channel image to n channels, or average down to one
ImageU8 convert_channels(const ImageU8& img, int channels);

}  // namespace panda
