#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmix/gaussian.hpp"
#include "fmix/modality.hpp"
#include "fmix/rng.hpp"
#include "fmix/synth.hpp"

namespace fmix {

/// Synthetic two-modality Gaussian population for the theorem checks:
/// modality 1 ~ N(mu_c, sigma^2 I_d), modality 2 ~ N(mu_l, sigma^2 I_d),
/// independent across modalities.
struct TheoremSpec {
    std::size_t dim_per_modality = 32;
    std::vector<double> mu_c;
    std::vector<double> mu_l;
    double sigma = 1.0;

    static TheoremSpec constant_offset(std::size_t d, double offset, double sigma = 1.0) {
        TheoremSpec s;
        s.dim_per_modality = d;
        s.mu_c.assign(d, 0.0);
        s.mu_l.assign(d, offset);
        s.sigma = sigma;
        return s;
    }
};

struct TheoremReport {
    double mean_d2_id = 0.0;
    double mean_d2_outlier = 0.0;
    std::vector<double> predicted_mean_shift;
    std::vector<double> empirical_mean_shift;
    std::size_t bound_violations = 0;
    double mean_loglik_id = 0.0;
    double mean_loglik_outlier = 0.0;
    std::size_t n_trials = 0;

    // supporting statistics for the gates
    double se_d2_id = 0.0;
    double se_d2_outlier = 0.0;
    std::vector<double> se_mean_shift;
    double analytic_shift_d2 = 0.0;  // dmu^T Sigma^-1 dmu from the spec
    double max_deviation = 0.0;
    double max_bound = 0.0;
};

struct GateResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

/// Mean shift introduced by swapping n_swap of d dimensions:
/// (N/d) * [mu_l - mu_c; mu_c - mu_l].
inline std::vector<double> predicted_mean_shift(std::span<const double> mu_c,
                                                std::span<const double> mu_l,
                                                std::size_t n_swap, std::size_t d) {
    if (mu_c.size() != d || mu_l.size() != d)
        throw std::invalid_argument("predicted_mean_shift: vectors must have length d");
    if (n_swap > d)
        throw std::invalid_argument("predicted_mean_shift: n_swap exceeds d");
    const double p = static_cast<double>(n_swap) / static_cast<double>(d);
    std::vector<double> shift(2 * d);
    for (std::size_t i = 0; i < d; ++i) {
        shift[i] = p * (mu_l[i] - mu_c[i]);
        shift[d + i] = p * (mu_c[i] - mu_l[i]);
    }
    return shift;
}

namespace detail {

inline ModalitySet draw_population(const TheoremSpec& spec, std::size_t rows,
                                   RandomSource& rng) {
    const std::size_t d = spec.dim_per_modality;
    ModalitySet ms;
    ms.blocks.emplace_back(rows, d);
    ms.blocks.emplace_back(rows, d);
    ms.modality_names = {"modality1", "modality2"};
    for (std::size_t r = 0; r < rows; ++r) {
        auto a = ms.blocks[0].row(r);
        auto b = ms.blocks[1].row(r);
        for (std::size_t j = 0; j < d; ++j) a[j] = spec.mu_c[j] + spec.sigma * rng.normal();
        for (std::size_t j = 0; j < d; ++j) b[j] = spec.mu_l[j] + spec.sigma * rng.normal();
    }
    return ms;
}

inline GaussianMoments exact_moments(const TheoremSpec& spec) {
    const std::size_t d = spec.dim_per_modality;
    std::vector<double> mean(2 * d);
    std::copy(spec.mu_c.begin(), spec.mu_c.end(), mean.begin());
    std::copy(spec.mu_l.begin(), spec.mu_l.end(), mean.begin() + d);
    FeatureMatrix cov(2 * d, 2 * d, 0.0);
    for (std::size_t i = 0; i < 2 * d; ++i) cov.at(i, i) = spec.sigma * spec.sigma;
    return make_moments(std::move(mean), std::move(cov));
}

struct MeanSe {
    double mean = 0.0;
    double se = 0.0;
};

inline MeanSe mean_and_se(std::span<const double> xs) {
    const auto n = static_cast<double>(xs.size());
    double mean = 0.0;
    for (const double x : xs) mean += x;
    mean /= n;
    double var = 0.0;
    for (const double x : xs) var += (x - mean) * (x - mean);
    var /= (n - 1.0);
    return {mean, std::sqrt(var / n)};
}

}  // namespace detail

struct Theorem1Options {
    bool use_exact_moments = false;    // default: estimate from a held-out sample
    std::size_t held_out_rows = 100000;
};

/// Monte-Carlo check that swap-synthesized outliers sit in low-likelihood
/// regions: E[D^2] of ID near 2d, outlier D^2 larger by at least the
/// mean-shift quadratic form, likelihood ordering, empirical mean shift
/// matching the predicted one. One fresh mask per trial row.
inline TheoremReport verify_theorem1(const TheoremSpec& spec, MixingConfig cfg,
                                     std::size_t n_trials,
                                     const Theorem1Options& opts = {}) {
    const std::size_t d = spec.dim_per_modality;
    if (spec.mu_c.size() != d || spec.mu_l.size() != d)
        throw std::invalid_argument("verify_theorem1: mean vectors must have length d");
    if (spec.mu_c == spec.mu_l)
        throw std::invalid_argument("verify_theorem1: requires mu_c != mu_l");
    if (cfg.n_swap > d)
        throw std::invalid_argument("verify_theorem1: n_swap exceeds modality width");
    if (n_trials < 2)
        throw std::invalid_argument("verify_theorem1: need at least 2 trials");

    RandomSource rng = cfg.rng;
    GaussianMoments moments;
    if (opts.use_exact_moments) {
        moments = detail::exact_moments(spec);
    } else {
        RandomSource held_rng = rng.split("held-out");
        const ModalitySet held = detail::draw_population(spec, opts.held_out_rows, held_rng);
        moments = estimate_moments(concat(held));
    }

    RandomSource draw_rng = rng.split("trials");
    const ModalitySet id_set = detail::draw_population(spec, n_trials, draw_rng);

    cfg.per_sample_masks = true;  // each row is one independent trial
    cfg.rng = rng.split("masks");
    const SynthesisResult synth = feature_mixing(id_set, cfg);

    const FeatureMatrix id_flat = concat(id_set);
    const FeatureMatrix out_flat = concat(synth.outliers);

    std::vector<double> d2_id(n_trials), d2_out(n_trials);
    for (std::size_t r = 0; r < n_trials; ++r) {
        d2_id[r] = mahalanobis_sq(id_flat.row(r), moments);
        d2_out[r] = mahalanobis_sq(out_flat.row(r), moments);
    }

    TheoremReport rep;
    rep.n_trials = n_trials;
    const auto id_stats = detail::mean_and_se(d2_id);
    const auto out_stats = detail::mean_and_se(d2_out);
    rep.mean_d2_id = id_stats.mean;
    rep.se_d2_id = id_stats.se;
    rep.mean_d2_outlier = out_stats.mean;
    rep.se_d2_outlier = out_stats.se;

    // loglik is affine in D^2 under the same moments
    const double log_2pi = 1.8378770664093454835606594728112353;
    const double base = -0.5 * (static_cast<double>(2 * d) * log_2pi + moments.log_det);
    rep.mean_loglik_id = base - 0.5 * rep.mean_d2_id;
    rep.mean_loglik_outlier = base - 0.5 * rep.mean_d2_outlier;

    rep.predicted_mean_shift = predicted_mean_shift(spec.mu_c, spec.mu_l, cfg.n_swap, d);
    rep.empirical_mean_shift.resize(2 * d);
    rep.se_mean_shift.resize(2 * d);
    std::vector<double> column(n_trials);
    for (std::size_t c = 0; c < 2 * d; ++c) {
        for (std::size_t r = 0; r < n_trials; ++r) column[r] = out_flat.at(r, c);
        const auto stats = detail::mean_and_se(column);
        const double true_mean = c < d ? spec.mu_c[c] : spec.mu_l[c - d];
        rep.empirical_mean_shift[c] = stats.mean - true_mean;
        rep.se_mean_shift[c] = stats.se;
    }

    // dmu^T Sigma^-1 dmu for the isotropic spec covariance
    double shift_sq = 0.0;
    for (const double v : rep.predicted_mean_shift) shift_sq += v * v;
    rep.analytic_shift_d2 = shift_sq / (spec.sigma * spec.sigma);
    return rep;
}

/// Gate evaluation for theorem 1, 3-sigma tolerances throughout.
inline std::vector<GateResult> theorem1_gates(const TheoremReport& rep, std::size_t d) {
    std::vector<GateResult> gates;
    const double two_d = static_cast<double>(2 * d);

    const double id_err = std::abs(rep.mean_d2_id - two_d);
    gates.push_back({"mean_d2_id_near_2d", id_err <= 3.0 * rep.se_d2_id,
                     "mean=" + std::to_string(rep.mean_d2_id) +
                         " target=" + std::to_string(two_d) +
                         " 3se=" + std::to_string(3.0 * rep.se_d2_id)});

    gates.push_back({"outlier_d2_exceeds_id", rep.mean_d2_outlier > rep.mean_d2_id,
                     "outlier=" + std::to_string(rep.mean_d2_outlier) +
                         " id=" + std::to_string(rep.mean_d2_id)});

    const double excess = rep.mean_d2_outlier - two_d;
    const double floor = rep.analytic_shift_d2 - 3.0 * rep.se_d2_outlier;
    gates.push_back({"outlier_d2_exceeds_shift_term", excess >= floor,
                     "excess=" + std::to_string(excess) +
                         " floor=" + std::to_string(floor)});

    gates.push_back({"likelihood_ordering", rep.mean_loglik_outlier < rep.mean_loglik_id,
                     "outlier=" + std::to_string(rep.mean_loglik_outlier) +
                         " id=" + std::to_string(rep.mean_loglik_id)});

    bool shift_ok = true;
    double worst = 0.0;
    std::size_t worst_coord = 0;
    for (std::size_t c = 0; c < rep.predicted_mean_shift.size(); ++c) {
        const double err =
            std::abs(rep.empirical_mean_shift[c] - rep.predicted_mean_shift[c]);
        const double tol = 3.0 * rep.se_mean_shift[c];
        if (err > tol) shift_ok = false;
        if (rep.se_mean_shift[c] > 0.0 && err / rep.se_mean_shift[c] > worst) {
            worst = err / rep.se_mean_shift[c];
            worst_coord = c;
        }
    }
    gates.push_back({"mean_shift_matches_prediction", shift_ok,
                     "worst |err|/se=" + std::to_string(worst) + " at coord " +
                         std::to_string(worst_coord)});
    return gates;
}

/// Deterministic deviation bound: every synthesized row must satisfy
/// ||F_o - F||_2 <= sqrt(2 N) * delta with delta the per-row maximum
/// cross-modality difference. Each trial is one full FM invocation.
inline TheoremReport verify_theorem2(const ModalitySet& ms, MixingConfig cfg,
                                     std::size_t n_trials) {
    if (ms.n_blocks() != 2)
        throw std::invalid_argument("verify_theorem2: expects a 2-block ModalitySet");
    validate_modalities(ms);

    TheoremReport rep;
    rep.n_trials = n_trials;
    RandomSource rng = cfg.rng;
    const double bound_factor = std::sqrt(2.0 * static_cast<double>(cfg.n_swap));

    for (std::size_t t = 0; t < n_trials; ++t) {
        MixingConfig trial_cfg = cfg;
        trial_cfg.rng = rng.split(t);
        const SynthesisResult synth = feature_mixing(ms, trial_cfg);
        for (std::size_t r = 0; r < ms.n_rows(); ++r) {
            double dev_sq = 0.0;
            for (std::size_t b = 0; b < 2; ++b) {
                const auto orig = ms.blocks[b].row(r);
                const auto noisy = synth.outliers.blocks[b].row(r);
                for (std::size_t j = 0; j < orig.size(); ++j) {
                    const double diff = noisy[j] - orig[j];
                    dev_sq += diff * diff;
                }
            }
            const double delta =
                cross_modal_delta(ms.blocks[0].row(r), ms.blocks[1].row(r));
            const double bound = bound_factor * delta;
            const double deviation = std::sqrt(dev_sq);
            rep.max_deviation = std::max(rep.max_deviation, deviation);
            rep.max_bound = std::max(rep.max_bound, bound);
            // 1e-9 relative slack absorbs summation rounding in the tight case
            if (deviation > bound * (1.0 + 1e-9)) ++rep.bound_violations;
        }
    }
    return rep;
}

}  // namespace fmix
