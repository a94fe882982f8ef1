#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "fmix/gaussian.hpp"
#include "fmix/matrix.hpp"
#include "fmix/modality.hpp"
#include "fmix/rng.hpp"

namespace fmix {

/// Settings for the dimension-swap synthesizers. n_swap is the number of
/// selected feature dimensions per modality. By default one index pair is
/// drawn per call and shared by every row; per_sample_masks draws a fresh
/// pair per row instead.
struct MixingConfig {
    std::size_t n_swap = 0;
    bool per_sample_masks = false;
    bool record_row_masks = false;  // keep per-row masks (per-sample mode only)
    RandomSource rng{0};
};

/// Synthesized outliers plus the index sets that produced them. masks_used
/// holds one index set per modality when a single mask was shared across the
/// batch; in per-sample-mask mode it is empty and row_masks (if requested)
/// holds row -> modality -> indices.
struct SynthesisResult {
    ModalitySet outliers;
    std::vector<std::vector<std::size_t>> masks_used;
    std::vector<std::vector<std::vector<std::size_t>>> row_masks;
    double elapsed_seconds = 0.0;
};

namespace detail {

class StopWatch {
public:
    StopWatch() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_)
            .count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

/// Applies one cyclic dimension swap over all blocks of a single row:
/// block i's selected dimensions receive block (i+1 mod k)'s selected
/// dimensions, all reads from the original values.
inline void swap_row(const ModalitySet& in, ModalitySet& out, std::size_t row,
                     const std::vector<std::vector<std::size_t>>& selections) {
    const std::size_t k = in.n_blocks();
    const std::size_t n = selections.front().size();
    for (std::size_t b = 0; b < k; ++b) {
        const std::size_t src_block = (b + 1) % k;
        const auto src = in.blocks[src_block].row(row);
        auto dst = out.blocks[b].row(row);
        const auto& sel_dst = selections[b];
        const auto& sel_src = selections[src_block];
        for (std::size_t p = 0; p < n; ++p) dst[sel_dst[p]] = src[sel_src[p]];
    }
}

inline void check_swap_widths(const ModalitySet& ms, std::size_t n_swap) {
    for (const auto& b : ms.blocks)
        if (n_swap > b.n_cols)
            throw std::invalid_argument("feature mixing: n_swap exceeds a modality width");
}

}  // namespace detail

/// Swap with caller-chosen index sets, one per modality, matched by
/// position. Works for 2 blocks (pair swap) and k >= 3 blocks (cyclic).
inline SynthesisResult feature_mixing_masked(
    const ModalitySet& ms, const std::vector<std::vector<std::size_t>>& selections) {
    if (selections.size() != ms.n_blocks())
        throw std::invalid_argument("feature_mixing_masked: one selection per modality");
    const std::size_t n = selections.front().size();
    for (std::size_t b = 0; b < ms.n_blocks(); ++b) {
        if (selections[b].size() != n)
            throw std::invalid_argument("feature_mixing_masked: selections must match in size");
        for (const auto idx : selections[b])
            if (idx >= ms.blocks[b].n_cols)
                throw std::invalid_argument("feature_mixing_masked: index out of range");
    }
    detail::StopWatch timer;
    SynthesisResult res;
    res.outliers = ms;
    res.masks_used = selections;
    for (std::size_t r = 0; r < ms.n_rows(); ++r)
        detail::swap_row(ms, res.outliers, r, selections);
    res.elapsed_seconds = timer.seconds();
    return res;
}

/// Swaps n_swap randomly selected feature dimensions between the two
/// modalities. Selected indices are matched by draw order; unselected
/// entries are bit-identical to the input.
inline SynthesisResult feature_mixing(const ModalitySet& ms, MixingConfig cfg) {
    if (ms.n_blocks() != 2)
        throw std::invalid_argument("feature_mixing: expects exactly 2 modalities");
    detail::check_swap_widths(ms, cfg.n_swap);

    detail::StopWatch timer;
    SynthesisResult res;
    res.outliers = ms;
    const std::size_t rows = ms.n_rows();
    if (cfg.per_sample_masks) {
        std::vector<std::vector<std::size_t>> sel(2);
        for (std::size_t r = 0; r < rows; ++r) {
            sel[0] = cfg.rng.sample_indices(ms.blocks[0].n_cols, cfg.n_swap);
            sel[1] = cfg.rng.sample_indices(ms.blocks[1].n_cols, cfg.n_swap);
            detail::swap_row(ms, res.outliers, r, sel);
            if (cfg.record_row_masks) res.row_masks.push_back(sel);
        }
    } else {
        res.masks_used.push_back(cfg.rng.sample_indices(ms.blocks[0].n_cols, cfg.n_swap));
        res.masks_used.push_back(cfg.rng.sample_indices(ms.blocks[1].n_cols, cfg.n_swap));
        for (std::size_t r = 0; r < rows; ++r)
            detail::swap_row(ms, res.outliers, r, res.masks_used);
    }
    res.elapsed_seconds = timer.seconds();
    return res;
}

/// Tri-or-more-modal variant: block i's selection receives block
/// (i+1 mod k)'s selection, simultaneously for all i.
inline SynthesisResult feature_mixing_cyclic(const ModalitySet& ms, MixingConfig cfg) {
    if (ms.n_blocks() < 3)
        throw std::invalid_argument(
            "feature_mixing_cyclic: needs at least 3 modalities (use feature_mixing)");
    detail::check_swap_widths(ms, cfg.n_swap);

    detail::StopWatch timer;
    SynthesisResult res;
    res.outliers = ms;
    const std::size_t k = ms.n_blocks();
    const std::size_t rows = ms.n_rows();
    if (cfg.per_sample_masks) {
        std::vector<std::vector<std::size_t>> sel(k);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t b = 0; b < k; ++b)
                sel[b] = cfg.rng.sample_indices(ms.blocks[b].n_cols, cfg.n_swap);
            detail::swap_row(ms, res.outliers, r, sel);
        }
    } else {
        for (std::size_t b = 0; b < k; ++b)
            res.masks_used.push_back(cfg.rng.sample_indices(ms.blocks[b].n_cols, cfg.n_swap));
        for (std::size_t r = 0; r < rows; ++r)
            detail::swap_row(ms, res.outliers, r, res.masks_used);
    }
    res.elapsed_seconds = timer.seconds();
    return res;
}

/// Unimodal variant: the matrix is split into left/right halves treated as
/// pseudo-modalities; the result is re-joined to the original width.
inline SynthesisResult feature_mixing_unimodal(const FeatureMatrix& fm, MixingConfig cfg) {
    if (fm.n_cols % 2 != 0)
        throw std::invalid_argument("feature_mixing_unimodal: width must be even");
    const std::size_t half = fm.n_cols / 2;
    if (cfg.n_swap > half)
        throw std::invalid_argument("feature_mixing_unimodal: n_swap exceeds half width");

    ModalitySet halves;
    halves.blocks.resize(2);
    halves.blocks[0] = FeatureMatrix(fm.n_rows, half);
    halves.blocks[1] = FeatureMatrix(fm.n_rows, half);
    for (std::size_t r = 0; r < fm.n_rows; ++r) {
        const auto src = fm.row(r);
        std::copy(src.begin(), src.begin() + half, halves.blocks[0].row(r).begin());
        std::copy(src.begin() + half, src.end(), halves.blocks[1].row(r).begin());
    }

    detail::StopWatch timer;
    SynthesisResult mixed = feature_mixing(halves, std::move(cfg));

    SynthesisResult res;
    res.masks_used = std::move(mixed.masks_used);
    FeatureMatrix joined(fm.n_rows, fm.n_cols);
    for (std::size_t r = 0; r < fm.n_rows; ++r) {
        auto dst = joined.row(r);
        const auto left = mixed.outliers.blocks[0].row(r);
        const auto right = mixed.outliers.blocks[1].row(r);
        std::copy(left.begin(), left.end(), dst.begin());
        std::copy(right.begin(), right.end(), dst.begin() + half);
    }
    res.outliers.blocks.push_back(std::move(joined));
    res.elapsed_seconds = timer.seconds();
    return res;
}

/// Per-row diagnostics for mixup_synth.
struct MixupTrace {
    std::vector<std::size_t> partner;
    std::vector<double> lambda;
};

/// Mixup baseline: each output row is a Beta(alpha, alpha) blend of the row
/// and a random distinct partner, applied to the concatenated features and
/// re-split into blocks. forced_lambda pins the blend weight for degenerate
/// cases.
inline SynthesisResult mixup_synth(const ModalitySet& ms, double alpha, RandomSource& rng,
                                   std::optional<double> forced_lambda = {},
                                   MixupTrace* trace = nullptr) {
    if (ms.n_rows() < 2)
        throw std::invalid_argument("mixup_synth: needs at least 2 rows");
    if (!(alpha > 0.0))
        throw std::invalid_argument("mixup_synth: alpha must be positive");

    detail::StopWatch timer;
    const FeatureMatrix flat = concat(ms);
    const std::size_t rows = flat.n_rows;
    if (trace) {
        trace->partner.assign(rows, 0);
        trace->lambda.assign(rows, 0.0);
    }
    FeatureMatrix out(rows, flat.n_cols);
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t partner = static_cast<std::size_t>(rng.next_below(rows - 1));
        if (partner >= r) ++partner;
        const double lam = forced_lambda ? *forced_lambda : rng.beta(alpha, alpha);
        const auto a = flat.row(r);
        const auto b = flat.row(partner);
        auto dst = out.row(r);
        for (std::size_t c = 0; c < flat.n_cols; ++c)
            dst[c] = lam * a[c] + (1.0 - lam) * b[c];
        if (trace) {
            trace->partner[r] = partner;
            trace->lambda[r] = lam;
        }
    }
    SynthesisResult res;
    res.outliers = split_like(out, ms);
    res.elapsed_seconds = timer.seconds();
    return res;
}

/// VOS-style baseline: fits a class-conditional Gaussian per ID class on the
/// concatenated features, draws candidates from it, and keeps the
/// lowest-likelihood fraction as outliers.
inline SynthesisResult vos_synth(const LabeledFeatureSet& lfs, std::size_t n_candidates,
                                 double keep_fraction, RandomSource& rng) {
    if (!(keep_fraction > 0.0) || keep_fraction > 1.0)
        throw std::invalid_argument("vos_synth: keep_fraction must be in (0, 1]");
    if (n_candidates == 0)
        throw std::invalid_argument("vos_synth: n_candidates must be positive");
    validate_labeled(lfs);

    detail::StopWatch timer;
    const FeatureMatrix flat = concat(lfs.features);
    const std::size_t d = flat.n_cols;

    std::vector<std::vector<std::size_t>> class_rows(lfs.n_id_classes);
    for (std::size_t r = 0; r < lfs.n_rows(); ++r)
        if (!lfs.is_ood[r]) class_rows[lfs.labels[r]].push_back(r);

    const auto n_keep = static_cast<std::size_t>(
        std::llround(keep_fraction * static_cast<double>(n_candidates)));
    const std::size_t keep = std::clamp<std::size_t>(n_keep, 1, n_candidates);

    FeatureMatrix kept(static_cast<std::size_t>(lfs.n_id_classes) * keep, d);
    std::size_t out_row = 0;
    FeatureMatrix candidates(n_candidates, d);
    std::vector<std::pair<double, std::size_t>> ranked(n_candidates);
    for (std::int32_t c = 0; c < lfs.n_id_classes; ++c) {
        const auto& rows = class_rows[c];
        if (rows.size() < d + 2)
            throw std::invalid_argument("vos_synth: class has fewer than d + 2 ID samples");
        FeatureMatrix class_feats(rows.size(), d);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto src = flat.row(rows[i]);
            std::copy(src.begin(), src.end(), class_feats.row(i).begin());
        }
        const GaussianMoments gm = estimate_moments(class_feats);

        for (std::size_t i = 0; i < n_candidates; ++i) {
            sample_gaussian(gm, rng, candidates.row(i));
            // lowest likelihood == highest Mahalanobis distance under gm
            ranked[i] = {mahalanobis_sq(candidates.row(i), gm), i};
        }
        std::sort(ranked.begin(), ranked.end(),
                  [](const auto& a, const auto& b) { return a.first > b.first; });
        for (std::size_t i = 0; i < keep; ++i) {
            const auto src = candidates.row(ranked[i].second);
            std::copy(src.begin(), src.end(), kept.row(out_row++).begin());
        }
    }

    SynthesisResult res;
    ModalitySet layout = lfs.features;
    for (auto& b : layout.blocks) b = FeatureMatrix(1, b.n_cols);
    res.outliers = split_like(kept, layout);
    res.outliers.modality_names = lfs.features.modality_names;
    res.elapsed_seconds = timer.seconds();
    return res;
}

/// Per-row diagnostics for npmix_synth, for tests and inspection.
struct NpMixTrace {
    std::vector<std::size_t> neighbor_index;
    std::vector<double> beta;
};

/// Nearest-neighbor expansion baseline (approximation; the original method
/// is defined elsewhere and used here only as a speed/quality reference).
/// For each ID row, draws k_neighbors candidate rows, takes the nearest
/// candidate of a different class, and emits F + beta * (F_nn - F) with beta
/// uniform in beta_range.
inline SynthesisResult npmix_synth(const LabeledFeatureSet& lfs, std::size_t k_neighbors,
                                   std::pair<double, double> beta_range, RandomSource& rng,
                                   NpMixTrace* trace = nullptr) {
    if (k_neighbors < 1)
        throw std::invalid_argument("npmix_synth: k_neighbors must be at least 1");
    validate_labeled(lfs);

    detail::StopWatch timer;
    const FeatureMatrix flat = concat(lfs.features);
    std::vector<std::size_t> id_rows;
    for (std::size_t r = 0; r < lfs.n_rows(); ++r)
        if (!lfs.is_ood[r]) id_rows.push_back(r);

    bool multi_class = false;
    for (std::size_t i = 1; i < id_rows.size(); ++i)
        if (lfs.labels[id_rows[i]] != lfs.labels[id_rows[0]]) {
            multi_class = true;
            break;
        }
    if (!multi_class)
        throw std::invalid_argument("npmix_synth: needs at least 2 ID classes");

    const std::size_t d = flat.n_cols;
    FeatureMatrix out(id_rows.size(), d);
    if (trace) {
        trace->neighbor_index.assign(id_rows.size(), 0);
        trace->beta.assign(id_rows.size(), 0.0);
    }

    const std::size_t pool = id_rows.size();
    for (std::size_t i = 0; i < pool; ++i) {
        const std::size_t r = id_rows[i];
        const auto self = flat.row(r);
        const std::int32_t own_class = lfs.labels[r];

        std::size_t best = pool;  // sentinel: none found yet
        double best_dist = std::numeric_limits<double>::infinity();
        for (int attempt = 0; attempt < 16 && best == pool; ++attempt) {
            for (std::size_t k = 0; k < k_neighbors; ++k) {
                const auto cand = static_cast<std::size_t>(rng.next_below(pool));
                if (lfs.labels[id_rows[cand]] == own_class) continue;
                const auto other = flat.row(id_rows[cand]);
                double dist = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    const double diff = self[c] - other[c];
                    dist += diff * diff;
                }
                if (dist < best_dist) {
                    best_dist = dist;
                    best = cand;
                }
            }
        }
        if (best == pool) {
            // random draws kept missing other classes; scan the pool
            for (std::size_t cand = 0; cand < pool; ++cand) {
                if (lfs.labels[id_rows[cand]] == own_class) continue;
                const auto other = flat.row(id_rows[cand]);
                double dist = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    const double diff = self[c] - other[c];
                    dist += diff * diff;
                }
                if (dist < best_dist) {
                    best_dist = dist;
                    best = cand;
                }
            }
        }

        const double beta = rng.uniform(beta_range.first, beta_range.second);
        const auto nn = flat.row(id_rows[best]);
        auto dst = out.row(i);
        for (std::size_t c = 0; c < d; ++c) dst[c] = self[c] + beta * (nn[c] - self[c]);
        if (trace) {
            trace->neighbor_index[i] = id_rows[best];
            trace->beta[i] = beta;
        }
    }

    SynthesisResult res;
    ModalitySet layout = lfs.features;
    for (auto& b : layout.blocks) b = FeatureMatrix(1, b.n_cols);
    res.outliers = split_like(out, layout);
    res.outliers.modality_names = lfs.features.modality_names;
    res.elapsed_seconds = timer.seconds();
    return res;
}

/// Largest absolute cross-modality feature difference of one sample:
/// max_{i,j} |Fc_i - Fl_j|. This is the delta in the deviation bound
/// sqrt(2 N) * delta.
inline double cross_modal_delta(std::span<const double> fc, std::span<const double> fl) {
    double max_c = -std::numeric_limits<double>::infinity();
    double min_c = std::numeric_limits<double>::infinity();
    for (const double v : fc) {
        max_c = std::max(max_c, v);
        min_c = std::min(min_c, v);
    }
    double max_l = -std::numeric_limits<double>::infinity();
    double min_l = std::numeric_limits<double>::infinity();
    for (const double v : fl) {
        max_l = std::max(max_l, v);
        min_l = std::min(min_l, v);
    }
    return std::max(max_c - min_l, max_l - min_c);
}

}  // namespace fmix
