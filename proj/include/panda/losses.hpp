#pragma once

// Training objectives. The scalar functions mirror the in-graph builders
// exactly; scoring and tests use the scalar forms, the training loop builds
// graphs.

#include <cmath>

#include "panda/autograd.hpp"
#include "panda/config.hpp"

namespace panda {

inline constexpr double kProbEps = 1e-7;

struct LossBreakdown {
    double l_rec = 0;
    double l_adv_g = 0;
    double l_z_low = 0;
    double l_z_high = 0;
    double l_total_g = 0;
    double l_d = 0;
};

inline double clamp_prob(double c) {
    return std::min(std::max(c, kProbEps), 1.0 - kProbEps);
}

// ---------------------------------------------------------------------------
// scalar forms
// ---------------------------------------------------------------------------

// mean over the batch of per-sample L2 norms of the pixel difference
template <typename T>
double pixel_reconstruction_loss(const Tensor<T>& x, const Tensor<T>& x_prime) {
    check_same_shape(x.shape(), x_prime.shape(), "reconstruction_loss");
    int n_batch = x.ndim() > 0 ? x.dim(0) : 1;
    int64_t per = x.numel() / n_batch;
    double total = 0;
    for (int n = 0; n < n_batch; ++n) {
        double s = 0;
        for (int64_t i = 0; i < per; ++i) {
            double d = double(x[int64_t(n) * per + i]) - double(x_prime[int64_t(n) * per + i]);
            s += d * d;
        }
        total += std::sqrt(s);
    }
    return total / n_batch;
}

template <typename T>
double latent_loss(const Tensor<T>& z0, const Tensor<T>& z1) {
    check_same_shape(z0.shape(), z1.shape(), "latent_loss");
    int n_batch = z0.ndim() > 0 ? z0.dim(0) : 1;
    int64_t per = z0.numel() / n_batch;
    double total = 0;
    for (int n = 0; n < n_batch; ++n) {
        double s = 0;
        for (int64_t i = 0; i < per; ++i) {
            double d = double(z0[int64_t(n) * per + i]) - double(z1[int64_t(n) * per + i]);
            s += d * d;
        }
        total += std::sqrt(s);
    }
    return total / n_batch;
}

// adversarial term entering the generator objective
inline double generator_adv_term(double c_x_prime, AdvMode mode = AdvMode::NonSaturating) {
    double c = clamp_prob(c_x_prime);
    return mode == AdvMode::NonSaturating ? -std::log(c) : std::log(1.0 - c);
}

// L_rec + adversarial term + L_z_low + L_z_high
inline double generator_objective(double l_rec, double c_x_prime, double l_z_low,
                                  double l_z_high, AdvMode mode = AdvMode::NonSaturating) {
    if (!(c_x_prime > 0.0 && c_x_prime < 1.0))
        raise(ErrorCode::DomainError,
              "generator_objective: critic score must lie in (0,1), got " +
                  std::to_string(c_x_prime));
    return l_rec + generator_adv_term(c_x_prime, mode) + l_z_low + l_z_high;
}

// -log(C(x)) - log(1 - C(x')), probabilities clamped before the logs
inline double discriminator_objective(double c_x, double c_x_prime) {
    return -std::log(clamp_prob(c_x)) - std::log(1.0 - clamp_prob(c_x_prime));
}

// ---------------------------------------------------------------------------
// graph builders
// ---------------------------------------------------------------------------

template <typename T>
ag::Var<T> pixel_reconstruction_loss_g(const ag::Var<T>& x, const ag::Var<T>& x_prime) {
    return ag::batch_l2_mean(ag::sub(x, x_prime));
}

template <typename T>
ag::Var<T> latent_loss_g(const ag::Var<T>& z0, const ag::Var<T>& z1) {
    check_same_shape(z0.value().shape(), z1.value().shape(), "latent_loss");
    return ag::batch_l2_mean(ag::sub(z1, z0));
}

// mean over the batch of the generator adversarial term given critic probs [N]
template <typename T>
ag::Var<T> generator_adv_term_g(const ag::Var<T>& c_x_prime,
                                AdvMode mode = AdvMode::NonSaturating) {
    if (mode == AdvMode::NonSaturating)
        return ag::mean(ag::neg(ag::log_clamped(c_x_prime, T(kProbEps))));
    return ag::mean(ag::log_one_minus_clamped(c_x_prime, T(kProbEps)));
}

// mean over the batch of -log(c_real) - log(1 - c_fake)
template <typename T>
ag::Var<T> discriminator_objective_g(const ag::Var<T>& c_real, const ag::Var<T>& c_fake) {
    auto t_real = ag::neg(ag::log_clamped(c_real, T(kProbEps)));
    auto t_fake = ag::neg(ag::log_one_minus_clamped(c_fake, T(kProbEps)));
    return ag::add(ag::mean(t_real), ag::mean(t_fake));
}

}  // namespace panda
