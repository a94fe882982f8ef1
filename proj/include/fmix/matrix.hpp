#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace fmix {

/// Dense row-major matrix of doubles; rows are samples, columns are feature
/// dimensions.
struct FeatureMatrix {
    std::vector<double> data;
    std::size_t n_rows = 0;
    std::size_t n_cols = 0;

    FeatureMatrix() = default;
    FeatureMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : data(rows * cols, fill), n_rows(rows), n_cols(cols) {}

    double& at(std::size_t r, std::size_t c) { return data[r * n_cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * n_cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * n_cols, n_cols}; }
    std::span<const double> row(std::size_t r) const {
        return {data.data() + r * n_cols, n_cols};
    }

    bool same_shape(const FeatureMatrix& other) const {
        return n_rows == other.n_rows && n_cols == other.n_cols;
    }
};

/// Boundary check for externally supplied matrices: finite entries, nonzero
/// shape. Internal transforms of validated inputs keep the invariant.
inline void validate_matrix(const FeatureMatrix& fm, const char* what = "FeatureMatrix") {
    if (fm.n_rows < 1 || fm.n_cols < 1)
        throw std::invalid_argument(std::string(what) + ": shape must be at least 1x1");
    if (fm.data.size() != fm.n_rows * fm.n_cols)
        throw std::invalid_argument(std::string(what) + ": storage does not match shape");
    for (const double v : fm.data)
        if (!std::isfinite(v))
            throw std::invalid_argument(std::string(what) + ": non-finite entry");
}

}  // namespace fmix
