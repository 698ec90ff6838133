#pragma once

// The variational generator: a low-level encoder feeding a higher-order
// encoder, decoded back through a skip combination of the high decode path
// with the low-level feature map, plus two training-only re-encoders that
// map the decoded outputs back into both latent spaces.

#include <optional>
#include <utility>
#include <vector>

#include "panda/config.hpp"
#include "panda/nn.hpp"

namespace panda {

enum class GenMode { Train, Infer };

template <typename T>
struct GaussianLatentV {
    ag::Var<T> mean;
    ag::Var<T> logvar;
};

// sample = mean + exp(logvar/2) * eps; deterministic mode short-circuits to
// the mean so inference produces stable scores
template <typename T>
ag::Var<T> reparameterize(const GaussianLatentV<T>& lat, Rng& rng, bool deterministic = false) {
    check_same_shape(lat.mean.value().shape(), lat.logvar.value().shape(), "reparameterize");
    if (!lat.mean.value().all_finite() || !lat.logvar.value().all_finite())
        raise(ErrorCode::NonFiniteLatent, "latent mean/logvar contains non-finite values");
    if (deterministic) return lat.mean;
    ag::Var<T> eps(Tensor<T>::randn(lat.mean.value().shape(), rng), false);
    auto sigma = ag::exp_op(ag::scale(lat.logvar, T(0.5)));
    return ag::add(lat.mean, ag::mul(sigma, eps));
}

template <typename T>
struct GenOutput {
    ag::Var<T> x_prime;
    GaussianLatentV<T> z_low;
    std::optional<GaussianLatentV<T>> z_high;  // absent when the high path is ablated
    ag::Var<T> z_low_sample;
    ag::Var<T> z_high_sample;     // undefined when high path off
    ag::Var<T> skip_features;     // pre-latent low-level feature map
    ag::Var<T> decoded_high;      // feature map entering the skip combination
    ag::Var<T> z_prime_low;       // train mode only (and only if E1_low enabled)
    ag::Var<T> z_prime_high;      // train mode only (and only if E1_high active)
};

template <typename T>
class Generator {
public:
    Generator() = default;

    Generator(const RunConfig& cfg, Rng& rng) : cfg_(cfg) {
        int stages = cfg.gen_stages();
        int in_ch = cfg.channels;
        for (int i = 0; i < stages; ++i) {
            int out_ch = stage_channels(i);
            e0_low_stages_.emplace_back(in_ch, out_ch, rng);
            in_ch = out_ch;
        }
        skip_channels_ = in_ch;
        e0_mean_head_ = nn::Conv2d<T>(skip_channels_, cfg.z_low_channels, 3, 1, 1, rng);
        e0_logvar_head_ = nn::Conv2d<T>(skip_channels_, cfg.z_low_channels, 3, 1, 1, rng, true);

        if (cfg.enable_high_path) {
            high_feat_channels_ = skip_channels_ * 2;
            e0_high_stage_ = nn::DownBlock<T>(cfg.z_low_channels, high_feat_channels_, rng);
            e0_high_mean_head_ =
                nn::Conv2d<T>(high_feat_channels_, cfg.z_high_channels, 3, 1, 1, rng);
            e0_high_logvar_head_ =
                nn::Conv2d<T>(high_feat_channels_, cfg.z_high_channels, 3, 1, 1, rng, true);
            d0_high_ = nn::UpBlock<T>(cfg.z_high_channels, skip_channels_, rng);
        } else {
            z_adapter_ = nn::Conv2d<T>(cfg.z_low_channels, skip_channels_, 3, 1, 1, rng);
        }

        int dec_in = cfg.skip_mode == SkipMode::Concat ? 2 * skip_channels_ : skip_channels_;
        int ch = dec_in;
        for (int i = stages - 2; i >= 0; --i) {
            int out_ch = stage_channels(i);
            d0_low_stages_.emplace_back(ch, out_ch, rng);
            ch = out_ch;
        }
        d0_out_ = nn::ConvTranspose2d<T>(ch, cfg.channels, 4, 2, 1, rng);

        if (cfg.enable_e1_low) {
            int ein = cfg.channels;
            for (int i = 0; i < stages; ++i) {
                int out_ch = stage_channels(i);
                e1_low_stages_.emplace_back(ein, out_ch, rng);
                ein = out_ch;
            }
            e1_low_head_ = nn::Conv2d<T>(skip_channels_, cfg.z_low_channels, 3, 1, 1, rng);
        }
        if (cfg.e1_high_active()) {
            e1_high_stage_ = nn::DownBlock<T>(skip_channels_, high_feat_channels_, rng);
            e1_high_head_ =
                nn::Conv2d<T>(high_feat_channels_, cfg.z_high_channels, 3, 1, 1, rng);
        }
    }

    const RunConfig& config() const { return cfg_; }
    int skip_channels() const { return skip_channels_; }

    // -- encoders -----------------------------------------------------------

    std::pair<GaussianLatentV<T>, ag::Var<T>> encode_low(const ag::Var<T>& x) const {
        check_input(x);
        ag::Var<T> h = x;
        for (const auto& s : e0_low_stages_) h = s.forward(h);
        GaussianLatentV<T> lat{e0_mean_head_.forward(h), e0_logvar_head_.forward(h)};
        return {lat, h};
    }

    GaussianLatentV<T> encode_high(const ag::Var<T>& z_low_sample) const {
        const auto& s = z_low_sample.value().shape();
        if (s.size() != 4 || s[1] != cfg_.z_low_channels || s[2] != cfg_.z_low_size() ||
            s[3] != cfg_.z_low_size())
            raise(ErrorCode::ShapeMismatch, "encode_high input " + shape_str(s));
        auto h = e0_high_stage_.forward(z_low_sample);
        return {e0_high_mean_head_.forward(h), e0_high_logvar_head_.forward(h)};
    }

    // -- decoders -----------------------------------------------------------

    ag::Var<T> decode_high(const ag::Var<T>& z_high_sample) const {
        return d0_high_.forward(z_high_sample);
    }

    ag::Var<T> combine_skip(const ag::Var<T>& decoded, const ag::Var<T>& skip,
                            SkipMode mode) const {
        switch (mode) {
            case SkipMode::Multiply: return ag::mul(decoded, skip);
            case SkipMode::Concat: return ag::concat_channels(decoded, skip);
        }
        raise(ErrorCode::UnknownSkipMode, "skip mode value out of enum range");
    }

    ag::Var<T> decode_low(const ag::Var<T>& combined) const {
        ag::Var<T> h = combined;
        for (const auto& s : d0_low_stages_) h = s.forward(h);
        return ag::tanh_op(d0_out_.forward(h));
    }

    // full decode path from the top latent sample plus the skip source
    ag::Var<T> decode(const ag::Var<T>& z_top_sample, const ag::Var<T>& skip,
                      SkipMode mode) const {
        ag::Var<T> d = cfg_.enable_high_path ? decode_high(z_top_sample)
                                             : z_adapter_.forward(z_top_sample);
        return decode_low(combine_skip(d, skip, mode));
    }

    // decode ignoring the skip connection entirely (test oracle for the
    // multiplicative identity)
    ag::Var<T> decode_no_skip(const ag::Var<T>& z_top_sample) const {
        ag::Var<T> d = cfg_.enable_high_path ? decode_high(z_top_sample)
                                             : z_adapter_.forward(z_top_sample);
        if (cfg_.skip_mode == SkipMode::Concat)
            raise(ErrorCode::UnknownSkipMode, "no-skip decode is defined for multiply mode");
        return decode_low(d);
    }

    // -- training-only re-encoders -------------------------------------------

    std::pair<ag::Var<T>, ag::Var<T>> reencode(const ag::Var<T>& x_prime,
                                               const ag::Var<T>& decoded_high) const {
        ag::Var<T> zpl, zph;
        if (cfg_.enable_e1_low) {
            ag::Var<T> h = x_prime;
            for (const auto& s : e1_low_stages_) h = s.forward(h);
            zpl = e1_low_head_.forward(h);
            e1_access_count_ += e1_low_param_count();
        }
        if (cfg_.e1_high_active()) {
            auto h = e1_high_stage_.forward(decoded_high);
            zph = e1_high_head_.forward(h);
            e1_access_count_ += e1_high_param_count();
        }
        return {zpl, zph};
    }

    // -- composed forward ------------------------------------------------------

    GenOutput<T> generate(const ag::Var<T>& x, GenMode mode, Rng& rng) const {
        GenOutput<T> out;
        auto [lat_low, skip] = encode_low(x);
        out.z_low = lat_low;
        out.skip_features = skip;
        out.z_low_sample = reparameterize(lat_low, rng, mode == GenMode::Infer);

        ag::Var<T> top_sample;
        if (cfg_.enable_high_path) {
            auto lat_high = encode_high(out.z_low_sample);
            out.z_high = lat_high;
            out.z_high_sample = reparameterize(lat_high, rng, mode == GenMode::Infer);
            out.decoded_high = decode_high(out.z_high_sample);
        } else {
            out.decoded_high = z_adapter_.forward(out.z_low_sample);
        }
        out.x_prime = decode_low(combine_skip(out.decoded_high, skip, cfg_.skip_mode));

        if (mode == GenMode::Train) {
            auto [zpl, zph] = reencode(out.x_prime, out.decoded_high);
            out.z_prime_low = zpl;
            out.z_prime_high = zph;
        }
        return out;
    }

    // -- parameter registry -----------------------------------------------------

    nn::ParamList<T> params() {
        nn::ParamList<T> out;
        for (size_t i = 0; i < e0_low_stages_.size(); ++i)
            e0_low_stages_[i].params(out, "e0_low.stage" + std::to_string(i));
        e0_mean_head_.params(out, "e0_low.mean_head");
        e0_logvar_head_.params(out, "e0_low.logvar_head");
        if (cfg_.enable_high_path) {
            e0_high_stage_.params(out, "e0_high.stage0");
            e0_high_mean_head_.params(out, "e0_high.mean_head");
            e0_high_logvar_head_.params(out, "e0_high.logvar_head");
            d0_high_.params(out, "d0_high.stage0");
        } else {
            z_adapter_.params(out, "z_adapter");
        }
        for (size_t i = 0; i < d0_low_stages_.size(); ++i)
            d0_low_stages_[i].params(out, "d0_low.stage" + std::to_string(i));
        d0_out_.params(out, "d0_low.out");
        if (cfg_.enable_e1_low) {
            for (size_t i = 0; i < e1_low_stages_.size(); ++i)
                e1_low_stages_[i].params(out, "e1_low.stage" + std::to_string(i));
            e1_low_head_.params(out, "e1_low.head");
        }
        if (cfg_.e1_high_active()) {
            e1_high_stage_.params(out, "e1_high.stage0");
            e1_high_head_.params(out, "e1_high.head");
        }
        return out;
    }

    // parameters on the inference path only (excludes E1)
    nn::ParamList<T> inference_params() {
        nn::ParamList<T> all = params();
        nn::ParamList<T> out;
        for (auto& p : all)
            if (p.name.rfind("e1_", 0) != 0) out.push_back(p);
        return out;
    }

    int64_t e1_access_count() const { return e1_access_count_; }
    void reset_e1_access_count() const { e1_access_count_ = 0; }

private:
    int stage_channels(int i) const {
        int mult = 1 << std::min(i, 3);
        return cfg_.gen_base_channels * mult;
    }

    void check_input(const ag::Var<T>& x) const {
        const auto& s = x.value().shape();
        if (s.size() != 4 || s[1] != cfg_.channels || s[2] != cfg_.image_size ||
            s[3] != cfg_.image_size)
            raise(ErrorCode::ShapeMismatch,
                  "generator input " + shape_str(s) + ", configured for [N," +
                      std::to_string(cfg_.channels) + "," + std::to_string(cfg_.image_size) +
                      "," + std::to_string(cfg_.image_size) + "]");
    }

    int64_t e1_low_param_count() const {
        int64_t n = 0;
        auto self = const_cast<Generator*>(this);
        nn::ParamList<T> tmp;
        for (size_t i = 0; i < self->e1_low_stages_.size(); ++i)
            self->e1_low_stages_[i].params(tmp, "x");
        self->e1_low_head_.params(tmp, "x");
        for (auto& p : tmp) n += p.var->value().numel();
        return n;
    }

    int64_t e1_high_param_count() const {
        int64_t n = 0;
        auto self = const_cast<Generator*>(this);
        nn::ParamList<T> tmp;
        self->e1_high_stage_.params(tmp, "x");
        self->e1_high_head_.params(tmp, "x");
        for (auto& p : tmp) n += p.var->value().numel();
        return n;
    }

    RunConfig cfg_;
    int skip_channels_ = 0;
    int high_feat_channels_ = 0;

    std::vector<nn::DownBlock<T>> e0_low_stages_;
    nn::Conv2d<T> e0_mean_head_, e0_logvar_head_;

    nn::DownBlock<T> e0_high_stage_;
    nn::Conv2d<T> e0_high_mean_head_, e0_high_logvar_head_;
    nn::UpBlock<T> d0_high_;
    nn::Conv2d<T> z_adapter_;

    std::vector<nn::UpBlock<T>> d0_low_stages_;
    nn::ConvTranspose2d<T> d0_out_;

    std::vector<nn::DownBlock<T>> e1_low_stages_;
    nn::Conv2d<T> e1_low_head_;
    nn::DownBlock<T> e1_high_stage_;
    nn::Conv2d<T> e1_high_head_;

    mutable int64_t e1_access_count_ = 0;
};

}  // namespace panda
