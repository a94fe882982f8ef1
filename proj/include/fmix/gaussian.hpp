#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "fmix/matrix.hpp"
#include "fmix/rng.hpp"

namespace fmix {

/// Mean and covariance of one population, with the Cholesky factor, inverse
/// and log-determinant cached. cov is the regularized matrix the cache was
/// built from, so cov * cov_inverse stays close to identity.
struct GaussianMoments {
    std::vector<double> mean;
    FeatureMatrix cov;
    FeatureMatrix cov_inverse;
    FeatureMatrix chol;  // lower triangular L with cov = L L^T
    double log_det = 0.0;

    std::size_t dim() const { return mean.size(); }
};

namespace detail {

/// In-place lower Cholesky. Returns false on a non-positive pivot.
inline bool cholesky(const FeatureMatrix& a, FeatureMatrix& l) {
    const std::size_t d = a.n_rows;
    l = FeatureMatrix(d, d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = a.at(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l.at(i, k) * l.at(j, k);
            if (i == j) {
                if (!(s > 0.0)) return false;
                l.at(i, i) = std::sqrt(s);
            } else {
                l.at(i, j) = s / l.at(j, j);
            }
        }
    }
    return true;
}

inline void forward_solve(const FeatureMatrix& l, std::span<const double> b,
                          std::span<double> x) {
    const std::size_t d = l.n_rows;
    for (std::size_t i = 0; i < d; ++i) {
        double s = b[i];
        for (std::size_t k = 0; k < i; ++k) s -= l.at(i, k) * x[k];
        x[i] = s / l.at(i, i);
    }
}

inline void backward_solve_transposed(const FeatureMatrix& l, std::span<const double> b,
                                      std::span<double> x) {
    const std::size_t d = l.n_rows;
    for (std::size_t ii = d; ii-- > 0;) {
        double s = b[ii];
        for (std::size_t k = ii + 1; k < d; ++k) s -= l.at(k, ii) * x[k];
        x[ii] = s / l.at(ii, ii);
    }
}

}  // namespace detail

/// Builds the cached factorization for a given mean and covariance. If the
/// covariance is not positive definite, shrinks towards eps * I with
/// eps = 1e-6 * trace/d (absolute floor 1e-6), escalating tenfold as needed.
inline GaussianMoments make_moments(std::vector<double> mean, FeatureMatrix cov) {
    const std::size_t d = mean.size();
    if (cov.n_rows != d || cov.n_cols != d)
        throw std::invalid_argument("make_moments: covariance shape does not match mean");
    GaussianMoments gm;
    gm.mean = std::move(mean);
    gm.cov = std::move(cov);

    double trace = 0.0;
    for (std::size_t i = 0; i < d; ++i) trace += gm.cov.at(i, i);
    double eps = 1e-6 * trace / static_cast<double>(d);
    if (!(eps > 0.0)) eps = 1e-6;

    if (!detail::cholesky(gm.cov, gm.chol)) {
        for (int attempt = 0; attempt < 40; ++attempt) {
            for (std::size_t i = 0; i < d; ++i) gm.cov.at(i, i) += eps;
            if (detail::cholesky(gm.cov, gm.chol)) break;
            eps *= 10.0;
        }
        if (gm.chol.n_rows != d)
            throw std::runtime_error("make_moments: covariance could not be regularized");
    }

    gm.log_det = 0.0;
    for (std::size_t i = 0; i < d; ++i) gm.log_det += 2.0 * std::log(gm.chol.at(i, i));

    // inverse via two triangular solves per unit column
    gm.cov_inverse = FeatureMatrix(d, d, 0.0);
    std::vector<double> e(d, 0.0), y(d, 0.0), x(d, 0.0);
    for (std::size_t c = 0; c < d; ++c) {
        e.assign(d, 0.0);
        e[c] = 1.0;
        detail::forward_solve(gm.chol, e, y);
        detail::backward_solve_transposed(gm.chol, y, x);
        for (std::size_t r = 0; r < d; ++r) gm.cov_inverse.at(r, c) = x[r];
    }
    return gm;
}

/// Sample mean and 1/(n-1) covariance of the rows. Needs at least 2 rows;
/// rank-deficient covariances are shrunk towards epsilon * I. Callers that
/// need a well-conditioned fit (e.g. class-conditional sampling) should
/// require n >= d + 2 themselves.
inline GaussianMoments estimate_moments(const FeatureMatrix& fm) {
    const std::size_t n = fm.n_rows;
    const std::size_t d = fm.n_cols;
    if (n < 2)
        throw std::invalid_argument("estimate_moments: need at least 2 rows");

    std::vector<double> mean(d, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = fm.row(r);
        for (std::size_t c = 0; c < d; ++c) mean[c] += row[c];
    }
    for (double& m : mean) m /= static_cast<double>(n);

    FeatureMatrix cov(d, d, 0.0);
    std::vector<double> centered(d);
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = fm.row(r);
        for (std::size_t c = 0; c < d; ++c) centered[c] = row[c] - mean[c];
        for (std::size_t i = 0; i < d; ++i) {
            const double ci = centered[i];
            double* covrow = cov.row(i).data();
            for (std::size_t j = i; j < d; ++j) covrow[j] += ci * centered[j];
        }
    }
    const double norm = 1.0 / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i; j < d; ++j) {
            cov.at(i, j) *= norm;
            cov.at(j, i) = cov.at(i, j);
        }
    return make_moments(std::move(mean), std::move(cov));
}

/// Squared Mahalanobis distance (x - mu)^T Sigma^-1 (x - mu), evaluated as
/// the squared norm of the whitened deviation.
inline double mahalanobis_sq(std::span<const double> x, const GaussianMoments& gm) {
    const std::size_t d = gm.dim();
    if (x.size() != d)
        throw std::invalid_argument("mahalanobis_sq: dimension mismatch");
    std::vector<double> diff(d), z(d);
    for (std::size_t i = 0; i < d; ++i) diff[i] = x[i] - gm.mean[i];
    detail::forward_solve(gm.chol, diff, z);
    double s = 0.0;
    for (const double v : z) s += v * v;
    return s;
}

/// Gaussian log density: -(d log 2pi + log|Sigma| + D^2)/2.
inline double gaussian_loglik(std::span<const double> x, const GaussianMoments& gm) {
    constexpr double log_2pi = 1.8378770664093454835606594728112353;
    return -0.5 * (static_cast<double>(gm.dim()) * log_2pi + gm.log_det +
                   mahalanobis_sq(x, gm));
}

/// Draw from N(mean, cov) as mean + L z.
inline void sample_gaussian(const GaussianMoments& gm, RandomSource& rng,
                            std::span<double> out) {
    const std::size_t d = gm.dim();
    std::vector<double> z(d);
    for (double& v : z) v = rng.normal();
    for (std::size_t i = 0; i < d; ++i) {
        double s = gm.mean[i];
        for (std::size_t k = 0; k <= i; ++k) s += gm.chol.at(i, k) * z[k];
        out[i] = s;
    }
}

}  // namespace fmix
