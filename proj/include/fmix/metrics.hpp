#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "fmix/matrix.hpp"

namespace fmix {

/// OOD separation metrics plus closed-set accuracy. All values in [0, 1].
struct MetricsReport {
    double auroc = 0.0;
    double aupr = 0.0;
    double fpr_at_95 = 0.0;
    double id_accuracy = 0.0;
    std::size_t n_id = 0;
    std::size_t n_ood = 0;
};

namespace detail {

struct ScoredFlag {
    double score;
    bool ood;
};

inline std::vector<ScoredFlag> sorted_descending(std::span<const double> scores,
                                                 std::span<const std::uint8_t> is_ood) {
    if (scores.size() != is_ood.size())
        throw std::invalid_argument("metrics: score/flag size mismatch");
    std::vector<ScoredFlag> v(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!std::isfinite(scores[i]))
            throw std::invalid_argument("metrics: non-finite score");
        v[i] = {scores[i], is_ood[i] != 0};
    }
    std::sort(v.begin(), v.end(),
              [](const ScoredFlag& a, const ScoredFlag& b) { return a.score > b.score; });
    return v;
}

}  // namespace detail

/// Mann-Whitney AUROC: the probability that a random ID row outscores a
/// random OOD row, ties counted half. Exact, O(n log n).
inline double auroc_exact(std::span<const double> scores,
                          std::span<const std::uint8_t> is_ood) {
    auto v = detail::sorted_descending(scores, is_ood);
    std::size_t n_id = 0, n_ood = 0;
    for (const auto& e : v) (e.ood ? n_ood : n_id)++;
    if (n_id == 0 || n_ood == 0)
        throw std::invalid_argument("auroc: need at least one ID and one OOD row");

    // Walk tie groups from the top; ID rows beat all OOD rows strictly below
    // and half of the OOD rows inside their own group.
    double wins = 0.0;
    std::size_t ood_below = n_ood;
    std::size_t i = 0;
    while (i < v.size()) {
        std::size_t j = i;
        std::size_t group_id = 0, group_ood = 0;
        while (j < v.size() && v[j].score == v[i].score) {
            (v[j].ood ? group_ood : group_id)++;
            ++j;
        }
        ood_below -= group_ood;
        wins += static_cast<double>(group_id) *
                (static_cast<double>(ood_below) + 0.5 * static_cast<double>(group_ood));
        i = j;
    }
    return wins / (static_cast<double>(n_id) * static_cast<double>(n_ood));
}

/// O(n_id * n_ood) pairwise AUROC oracle with half-weight ties.
inline double brute_force_auroc(std::span<const double> scores,
                                std::span<const std::uint8_t> is_ood) {
    std::vector<double> id, ood;
    for (std::size_t i = 0; i < scores.size(); ++i)
        (is_ood[i] ? ood : id).push_back(scores[i]);
    if (id.empty() || ood.empty())
        throw std::invalid_argument("brute_force_auroc: need both populations");
    if (id.size() * ood.size() > 1000000)
        throw std::invalid_argument("brute_force_auroc: instance too large");
    double wins = 0.0;
    for (const double a : id)
        for (const double b : ood) {
            if (a > b)
                wins += 1.0;
            else if (a == b)
                wins += 0.5;
        }
    return wins / (static_cast<double>(id.size()) * static_cast<double>(ood.size()));
}

/// Exact average precision with OOD as the positive class, ranked by negated
/// higher-is-ID score. Tie groups are processed as single threshold steps.
inline double aupr_ood_positive(std::span<const double> scores,
                                std::span<const std::uint8_t> is_ood) {
    auto v = detail::sorted_descending(scores, is_ood);
    std::size_t n_ood = 0;
    for (const auto& e : v)
        if (e.ood) ++n_ood;
    if (n_ood == 0 || n_ood == v.size())
        throw std::invalid_argument("aupr: need both populations");

    // Ascending score = descending "OOD-ness".
    std::reverse(v.begin(), v.end());
    double ap = 0.0;
    std::size_t tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < v.size()) {
        std::size_t j = i;
        std::size_t group_tp = 0, group_fp = 0;
        while (j < v.size() && v[j].score == v[i].score) {
            (v[j].ood ? group_tp : group_fp)++;
            ++j;
        }
        tp += group_tp;
        fp += group_fp;
        if (group_tp > 0) {
            const double precision =
                static_cast<double>(tp) / static_cast<double>(tp + fp);
            ap += static_cast<double>(group_tp) * precision;
        }
        i = j;
    }
    return ap / static_cast<double>(n_ood);
}

/// FPR@95: fraction of OOD rows accepted as ID at the tightest threshold
/// that still keeps ID true-positive rate at or above 95% (ties are ID).
inline double fpr_at_95_tpr(std::span<const double> scores,
                            std::span<const std::uint8_t> is_ood) {
    auto v = detail::sorted_descending(scores, is_ood);
    std::size_t n_id = 0, n_ood = 0;
    for (const auto& e : v) (e.ood ? n_ood : n_id)++;
    if (n_id == 0 || n_ood == 0)
        throw std::invalid_argument("fpr_at_95: need both populations");

    const double needed = 0.95 * static_cast<double>(n_id);
    std::size_t id_seen = 0, ood_seen = 0;
    std::size_t i = 0;
    while (i < v.size()) {
        std::size_t j = i;
        std::size_t group_id = 0, group_ood = 0;
        while (j < v.size() && v[j].score == v[i].score) {
            (v[j].ood ? group_ood : group_id)++;
            ++j;
        }
        id_seen += group_id;
        ood_seen += group_ood;
        if (static_cast<double>(id_seen) >= needed)
            return static_cast<double>(ood_seen) / static_cast<double>(n_ood);
        i = j;
    }
    return 1.0;  // unreachable for valid inputs: eta = min score gives TPR 1
}

/// AUROC, AUPR and FPR@95 from higher-is-ID scores. id_accuracy is left for
/// the caller (it needs logits and labels, not scores).
inline MetricsReport compute_ood_metrics(std::span<const double> scores,
                                         std::span<const std::uint8_t> is_ood) {
    MetricsReport rep;
    for (const auto f : is_ood) (f ? rep.n_ood : rep.n_id)++;
    if (rep.n_id == 0 || rep.n_ood == 0)
        throw std::invalid_argument("compute_ood_metrics: need at least one ID and one OOD row");
    rep.auroc = auroc_exact(scores, is_ood);
    rep.aupr = aupr_ood_positive(scores, is_ood);
    rep.fpr_at_95 = fpr_at_95_tpr(scores, is_ood);
    return rep;
}

/// Fraction of rows whose argmax logit equals the label; argmax ties break
/// to the lowest class index.
inline double id_accuracy(const FeatureMatrix& lm, std::span<const std::int32_t> labels) {
    if (labels.size() != lm.n_rows)
        throw std::invalid_argument("id_accuracy: label count mismatch");
    if (lm.n_rows == 0) return 0.0;
    std::size_t correct = 0;
    for (std::size_t r = 0; r < lm.n_rows; ++r) {
        const auto z = lm.row(r);
        std::size_t best = 0;
        for (std::size_t j = 1; j < z.size(); ++j)
            if (z[j] > z[best]) best = j;
        if (static_cast<std::size_t>(labels[r]) == best) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(lm.n_rows);
}

}  // namespace fmix
