#include "panda/image.hpp"

#include <algorithm>
#include <cmath>

#include "panda/error.hpp"

namespace panda {

Tensor<float> normalize_image(const ImageU8& img) {
    Tensor<float> out(Shape{img.channels, img.height, img.width});
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = (float(img.data[size_t(i)]) / 255.0f - 0.5f) / 0.5f;
    return out;
}

ImageU8 denormalize_image(const Tensor<float>& chw) {
    if (chw.ndim() != 3) raise(ErrorCode::ShapeMismatch, "denormalize expects [C,H,W]");
    ImageU8 img;
    img.channels = chw.dim(0);
    img.height = chw.dim(1);
    img.width = chw.dim(2);
    img.data.resize(size_t(chw.numel()));
    for (int64_t i = 0; i < chw.numel(); ++i) {
        float v = (chw[i] * 0.5f + 0.5f) * 255.0f;
        img.data[size_t(i)] = static_cast<uint8_t>(std::clamp(std::lround(v), 0l, 255l));
    }
    return img;
}

Tensor<float> resize_bilinear(const Tensor<float>& chw, int out_h, int out_w) {
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    Tensor<float> out(Shape{C, out_h, out_w});
    if (H == out_h && W == out_w) {
        std::copy_n(chw.data(), chw.numel(), out.data());
        return out;
    }
    // align-corners-off convention: sample at pixel centers
    float sy = float(H) / float(out_h);
    float sx = float(W) / float(out_w);
    for (int c = 0; c < C; ++c) {
        const float* src = chw.data() + int64_t(c) * H * W;
        float* dst = out.data() + int64_t(c) * out_h * out_w;
        for (int y = 0; y < out_h; ++y) {
            float fy = (y + 0.5f) * sy - 0.5f;
            int y0 = int(std::floor(fy));
            float wy = fy - y0;
            int y0c = std::clamp(y0, 0, H - 1), y1c = std::clamp(y0 + 1, 0, H - 1);
            for (int x = 0; x < out_w; ++x) {
                float fx = (x + 0.5f) * sx - 0.5f;
                int x0 = int(std::floor(fx));
                float wx = fx - x0;
                int x0c = std::clamp(x0, 0, W - 1), x1c = std::clamp(x0 + 1, 0, W - 1);
                float v00 = src[int64_t(y0c) * W + x0c], v01 = src[int64_t(y0c) * W + x1c];
                float v10 = src[int64_t(y1c) * W + x0c], v11 = src[int64_t(y1c) * W + x1c];
                dst[int64_t(y) * out_w + x] = v00 * (1 - wy) * (1 - wx) + v01 * (1 - wy) * wx +
                                               v10 * wy * (1 - wx) + v11 * wy * wx;
            }
        }
    }
    return out;
}

ImageU8 resize_bilinear_u8(const ImageU8& img, int out_h, int out_w) {
    if (img.height == out_h && img.width == out_w) return img;
    Tensor<float> f(Shape{img.channels, img.height, img.width});
    for (int64_t i = 0; i < f.numel(); ++i) f[i] = float(img.data[size_t(i)]);
    Tensor<float> r = resize_bilinear(f, out_h, out_w);
    ImageU8 out;
    out.channels = img.channels;
    out.height = out_h;
    out.width = out_w;
    out.data.resize(size_t(r.numel()));
    for (int64_t i = 0; i < r.numel(); ++i)
        out.data[size_t(i)] = static_cast<uint8_t>(std::clamp(std::lround(r[i]), 0l, 255l));
    return out;
}

Tensor<float> rotate90(const Tensor<float>& chw, int quarter_turns) {
    int q = ((quarter_turns % 4) + 4) % 4;
    if (q == 0) return chw;
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    int OH = (q % 2 == 0) ? H : W;
    int OW = (q % 2 == 0) ? W : H;
    Tensor<float> out(Shape{C, OH, OW});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                int oy, ox;
                switch (q) {
                    case 1: oy = W - 1 - x; ox = y; break;
                    case 2: oy = H - 1 - y; ox = W - 1 - x; break;
                    default: oy = x; ox = H - 1 - y; break;
                }
                out[(int64_t(c) * OH + oy) * OW + ox] = chw[(int64_t(c) * H + y) * W + x];
            }
    return out;
}

ImageU8 convert_channels(const ImageU8& img, int channels) {
    if (img.channels == channels) return img;
    ImageU8 out;
    out.width = img.width;
    out.height = img.height;
    out.channels = channels;
    out.data.resize(size_t(int64_t(channels) * img.plane()));
    if (img.channels == 1) {
        for (int c = 0; c < channels; ++c)
            std::copy_n(img.data.data(), img.plane(), out.data.data() + int64_t(c) * img.plane());
        return out;
    }
    if (channels == 1) {
        for (int64_t i = 0; i < img.plane(); ++i) {
            int acc = 0;
            for (int c = 0; c < img.channels; ++c)
                acc += img.data[size_t(int64_t(c) * img.plane() + i)];
            out.data[size_t(i)] = static_cast<uint8_t>(acc / img.channels);
        }
        return out;
    }
    raise(ErrorCode::ShapeMismatch,
          "convert_channels: " + std::to_string(img.channels) + " -> " + std::to_string(channels));
}

}  // namespace panda
