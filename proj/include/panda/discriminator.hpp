#pragma once

// Fine-grained critic: residual backbone -> attention maps -> bilinear
// attention pooling -> 1x1 discriminative filter bank -> global max pooling
// -> sigmoid probability. Also hosts the attention-guided augmentation used
// on real samples during training.

#include <iostream>
#include <vector>

#include "panda/config.hpp"
#include "panda/image.hpp"
#include "panda/nn.hpp"

namespace panda {

// position of the strongest filter response (the 1x1 patch of highest
// discrimination) plus the spatial peak of the attention map it came from
struct DiscrimLocation {
    int map_index = 0;
    int filter_index = 0;
    int feat_y = 0;
    int feat_x = 0;
};

template <typename T>
struct DiscOutput {
    ag::Var<T> probs;      // [N], strictly in (0,1)
    ag::Var<T> logits;     // [N]
    ag::Var<T> attention;  // [N, M, h, w]
    ag::Var<T> responses;  // [N, M, K] filter bank response matrix
    std::vector<DiscrimLocation> locations;
};

template <typename T>
class Discriminator {
public:
    Discriminator() = default;

    Discriminator(const RunConfig& cfg, Rng& rng) : cfg_(cfg) {
        stem_ = nn::Conv2d<T>(cfg.channels, cfg.disc_base_channels, 3, 1, 1, rng);
        int ch = cfg.disc_base_channels;
        for (int s = 0; s < cfg.disc_stages; ++s) {
            int out_ch = stage_channels(s);
            downs_.emplace_back(ch, out_ch, rng);
            for (int b = 0; b < cfg.disc_blocks_per_stage; ++b)
                blocks_.emplace_back(out_ch, rng);
            ch = out_ch;
        }
        feat_channels_ = ch;
        attention_conv_ = nn::Conv2d<T>(feat_channels_, cfg.attention_maps, 1, 1, 0, rng);
        filter_bank_ = nn::Linear<T>(feat_channels_, cfg.filter_bank_size, rng);
    }

    int feat_channels() const { return feat_channels_; }
    const RunConfig& config() const { return cfg_; }

    ag::Var<T> backbone_features(const ag::Var<T>& x) const {
        const auto& s = x.value().shape();
        if (s.size() != 4 || s[1] != cfg_.channels || s[2] != cfg_.image_size ||
            s[3] != cfg_.image_size)
            raise(ErrorCode::ShapeMismatch, "discriminator input " + shape_str(s));
        ag::Var<T> h = stem_.forward(x);
        size_t bi = 0;
        for (int st = 0; st < cfg_.disc_stages; ++st) {
            h = downs_[size_t(st)].forward(h);
            for (int b = 0; b < cfg_.disc_blocks_per_stage; ++b) h = blocks_[bi++].forward(h);
        }
        return h;
    }

    // 1x1 convolution + ReLU keeps the maps nonnegative
    ag::Var<T> attention_maps(const ag::Var<T>& features) const {
        return ag::relu(attention_conv_.forward(features));
    }

    // spatial-mean pooling of maps x features, then signed sqrt and per-row
    // L2 normalization
    ag::Var<T> bilinear_attention_pool(const ag::Var<T>& features, const ag::Var<T>& maps) const {
        auto raw = ag::bap_pool(features, maps);
        return ag::row_l2_normalize(ag::signed_sqrt(raw, T(1e-4)));
    }

    ag::Var<T> filter_responses(const ag::Var<T>& bap) const {
        const auto& s = bap.value().shape();  // [N, M, C]
        auto flat = ag::reshape(bap, Shape{s[0] * s[1], s[2]});
        auto resp = filter_bank_.forward(flat);
        return ag::reshape(resp, Shape{s[0], s[1], cfg_.filter_bank_size});
    }

    static ag::Var<T> logit_from_responses(const ag::Var<T>& responses) {
        const auto& s = responses.value().shape();
        return ag::global_max(ag::reshape(responses, Shape{s[0], s[1] * s[2]}));
    }

    DiscOutput<T> discriminate(const ag::Var<T>& x) const {
        DiscOutput<T> out;
        auto feats = backbone_features(x);
        out.attention = attention_maps(feats);
        auto bap = bilinear_attention_pool(feats, out.attention);
        out.responses = filter_responses(bap);
        out.logits = logit_from_responses(out.responses);
        out.probs = ag::sigmoid(out.logits);
        out.locations = locate(out.responses.value(), out.attention.value());
        return out;
    }

    nn::ParamList<T> params() {
        nn::ParamList<T> out;
        stem_.params(out, "disc.stem");
        for (size_t i = 0; i < downs_.size(); ++i)
            downs_[i].params(out, "disc.down" + std::to_string(i));
        for (size_t i = 0; i < blocks_.size(); ++i)
            blocks_[i].params(out, "disc.block" + std::to_string(i));
        attention_conv_.params(out, "disc.attention");
        filter_bank_.params(out, "disc.filter_bank");
        return out;
    }

private:
    int stage_channels(int s) const {
        int mult = 1 << std::min(s, 3);
        return cfg_.disc_base_channels * mult;
    }

    std::vector<DiscrimLocation> locate(const Tensor<T>& responses,
                                        const Tensor<T>& attention) const {
        int N = responses.dim(0), M = responses.dim(1), K = responses.dim(2);
        int h = attention.dim(2), w = attention.dim(3);
        std::vector<DiscrimLocation> locs(size_t(N));
        for (int n = 0; n < N; ++n) {
            const T* r = responses.data() + int64_t(n) * M * K;
            int64_t best = 0;
            for (int64_t i = 1; i < int64_t(M) * K; ++i)
                if (r[i] > r[best]) best = i;
            DiscrimLocation& L = locs[size_t(n)];
            L.map_index = int(best / K);
            L.filter_index = int(best % K);
            const T* a = attention.data() + (int64_t(n) * M + L.map_index) * h * w;
            int64_t ab = 0;
            for (int64_t i = 1; i < int64_t(h) * w; ++i)
                if (a[i] > a[ab]) ab = i;
            L.feat_y = int(ab / w);
            L.feat_x = int(ab % w);
        }
        return locs;
    }

    RunConfig cfg_;
    int feat_channels_ = 0;
    nn::Conv2d<T> stem_;
    std::vector<nn::DownBlock<T>> downs_;
    std::vector<nn::ResBlock<T>> blocks_;
    nn::Conv2d<T> attention_conv_;
    nn::Linear<T> filter_bank_;
};

// ---------------------------------------------------------------------------
// attention-guided augmentation (training-time, real samples only)
// ---------------------------------------------------------------------------

template <typename T>
struct AugmentResult {
    Tensor<T> images;
    int degenerate_count = 0;  // all-zero maps passed through unchanged
};

// generic bilinear resize for a single [C, H, W] plane stack
template <typename T>
Tensor<T> bilinear_resize_chw(const Tensor<T>& chw, int out_h, int out_w) {
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    Tensor<T> out(Shape{C, out_h, out_w});
    T sy = T(H) / T(out_h), sx = T(W) / T(out_w);
    for (int c = 0; c < C; ++c) {
        const T* src = chw.data() + int64_t(c) * H * W;
        T* dst = out.data() + int64_t(c) * out_h * out_w;
        for (int y = 0; y < out_h; ++y) {
            T fy = (T(y) + T(0.5)) * sy - T(0.5);
            int y0 = int(std::floor(fy));
            T wy = fy - T(y0);
            int y0c = std::clamp(y0, 0, H - 1), y1c = std::clamp(y0 + 1, 0, H - 1);
            for (int x = 0; x < out_w; ++x) {
                T fx = (T(x) + T(0.5)) * sx - T(0.5);
                int x0 = int(std::floor(fx));
                T wx = fx - T(x0);
                int x0c = std::clamp(x0, 0, W - 1), x1c = std::clamp(x0 + 1, 0, W - 1);
                dst[int64_t(y) * out_w + x] =
                    src[int64_t(y0c) * W + x0c] * (T(1) - wy) * (T(1) - wx) +
                    src[int64_t(y0c) * W + x1c] * (T(1) - wy) * wx +
                    src[int64_t(y1c) * W + x0c] * wy * (T(1) - wx) +
                    src[int64_t(y1c) * W + x1c] * wy * wx;
            }
        }
    }
    return out;
}

// Per sample: pick one attention map at random; with probability 1/2 crop the
// bounding box of its above-threshold region and resize it back to full frame
// (attention cropping), otherwise zero that region (attention dropping).
// Threshold is 0.5 x map max. All-zero maps leave the sample unchanged.
template <typename T>
AugmentResult<T> attention_augment(const Tensor<T>& images, const Tensor<T>& maps, Rng& rng,
                                   bool warn = true) {
    int N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    int M = maps.dim(1), mh = maps.dim(2), mw = maps.dim(3);
    if (maps.dim(0) != N)
        raise(ErrorCode::ShapeMismatch, "attention_augment batch mismatch");
    AugmentResult<T> result;
    result.images = images;
    for (int n = 0; n < N; ++n) {
        int m = int(rng.next_int(0, M - 1));
        bool crop = rng.next_uniform() < 0.5;
        const T* map = maps.data() + (int64_t(n) * M + m) * mh * mw;
        T mx = map[0];
        for (int64_t i = 1; i < int64_t(mh) * mw; ++i) mx = std::max(mx, map[i]);
        if (mx <= T(0)) {
            ++result.degenerate_count;
            if (warn)
                std::cerr << "warning: degenerate (all-zero) attention map, sample "
                          << n << " left unchanged\n";
            continue;
        }
        T thr = T(0.5) * mx;
        int y0 = mh, y1 = -1, x0 = mw, x1 = -1;
        for (int y = 0; y < mh; ++y)
            for (int x = 0; x < mw; ++x)
                if (map[int64_t(y) * mw + x] >= thr) {
                    y0 = std::min(y0, y);
                    y1 = std::max(y1, y);
                    x0 = std::min(x0, x);
                    x1 = std::max(x1, x);
                }
        // map the feature-grid box to image coordinates
        int iy0 = y0 * H / mh, iy1 = (y1 + 1) * H / mh;
        int ix0 = x0 * W / mw, ix1 = (x1 + 1) * W / mw;
        iy1 = std::min(iy1, H);
        ix1 = std::min(ix1, W);
        if (crop) {
            int ch = iy1 - iy0, cw = ix1 - ix0;
            Tensor<T> patch(Shape{C, ch, cw});
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < ch; ++y)
                    for (int x = 0; x < cw; ++x)
                        patch[(int64_t(c) * ch + y) * cw + x] =
                            images.at(n, c, iy0 + y, ix0 + x);
            Tensor<T> up = bilinear_resize_chw(patch, H, W);
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x)
                        result.images.at(n, c, y, x) = up[(int64_t(c) * H + y) * W + x];
        } else {
            for (int c = 0; c < C; ++c)
                for (int y = iy0; y < iy1; ++y)
                    for (int x = ix0; x < ix1; ++x) result.images.at(n, c, y, x) = T(0);
        }
    }
    return result;
}

}  // namespace panda
