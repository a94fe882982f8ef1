#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "fmix/matrix.hpp"

namespace fmix {

using LogitMatrix = FeatureMatrix;  // [n x C] pre-softmax
using ProbMatrix = FeatureMatrix;   // [n x C] rows sum to 1

/// Scalar loss with its gradient with respect to the logits behind the
/// input. Keeping every gradient in logit space lets losses compose through
/// a single softmax.
struct LossValue {
    double value = 0.0;
    FeatureMatrix grad_logits;
};

/// Loss over per-modality (and optionally fused) heads, with one logit-space
/// gradient per head.
struct CrossModalLossValue {
    double value = 0.0;
    FeatureMatrix grad_logits_c;
    FeatureMatrix grad_logits_l;
    FeatureMatrix grad_logits_fused;  // empty when the loss has no fused term
};

constexpr double kProbFloor = 1e-12;

namespace detail {

inline void check_labels(const FeatureMatrix& m, std::span<const std::int32_t> labels) {
    if (labels.size() != m.n_rows)
        throw std::invalid_argument("labels: count does not match rows");
    for (const auto y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= m.n_cols)
            throw std::invalid_argument("labels: class index out of range");
}

inline void check_prob_rows(const ProbMatrix& pm, const char* what) {
    for (std::size_t r = 0; r < pm.n_rows; ++r) {
        double s = 0.0;
        for (const double v : pm.row(r)) {
            if (v < -1e-9 || v > 1.0 + 1e-9)
                throw std::invalid_argument(std::string(what) + ": entry outside [0, 1]");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-6)
            throw std::invalid_argument(std::string(what) + ": row does not sum to 1");
    }
}

/// dL/dlogits from dL/dprobs for one row: p .* (g - <g, p>).
inline void softmax_backward_row(std::span<const double> p, std::span<const double> g,
                                 std::span<double> out) {
    double dot = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) dot += g[j] * p[j];
    for (std::size_t j = 0; j < p.size(); ++j) out[j] = p[j] * (g[j] - dot);
}

inline double clamped_log(double p) { return std::log(std::max(p, kProbFloor)); }

}  // namespace detail

/// Row-wise softmax with max subtraction.
inline ProbMatrix softmax(const LogitMatrix& lm) {
    ProbMatrix pm(lm.n_rows, lm.n_cols);
    for (std::size_t r = 0; r < lm.n_rows; ++r) {
        const auto z = lm.row(r);
        auto p = pm.row(r);
        const double zmax = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (std::size_t j = 0; j < z.size(); ++j) {
            p[j] = std::exp(z[j] - zmax);
            sum += p[j];
        }
        for (std::size_t j = 0; j < z.size(); ++j) p[j] /= sum;
    }
    return pm;
}

/// Mean negative log-likelihood of the labelled class.
inline LossValue cross_entropy(const LogitMatrix& lm, std::span<const std::int32_t> labels) {
    detail::check_labels(lm, labels);
    const ProbMatrix pm = softmax(lm);
    const double inv_n = 1.0 / static_cast<double>(lm.n_rows);
    LossValue out;
    out.grad_logits = FeatureMatrix(lm.n_rows, lm.n_cols);
    for (std::size_t r = 0; r < lm.n_rows; ++r) {
        const auto p = pm.row(r);
        auto g = out.grad_logits.row(r);
        out.value -= detail::clamped_log(p[labels[r]]);
        for (std::size_t j = 0; j < p.size(); ++j) g[j] = p[j] * inv_n;
        g[labels[r]] -= inv_n;
    }
    out.value *= inv_n;
    return out;
}

/// Focal loss: mean of alpha_y * (1 - p_y)^lambda * (-log p_y). With
/// lambda = 0 and unit alpha this reduces to cross_entropy.
inline LossValue focal_loss(const LogitMatrix& lm, std::span<const std::int32_t> labels,
                            std::span<const double> alpha, double lambda) {
    detail::check_labels(lm, labels);
    if (lambda < 0.0) throw std::invalid_argument("focal_loss: lambda must be nonnegative");
    if (!alpha.empty()) {
        if (alpha.size() != lm.n_cols)
            throw std::invalid_argument("focal_loss: alpha size must equal class count");
        for (const double a : alpha)
            if (!(a > 0.0)) throw std::invalid_argument("focal_loss: alpha must be positive");
    }

    const ProbMatrix pm = softmax(lm);
    const double inv_n = 1.0 / static_cast<double>(lm.n_rows);
    LossValue out;
    out.grad_logits = FeatureMatrix(lm.n_rows, lm.n_cols);
    std::vector<double> gp(lm.n_cols);
    for (std::size_t r = 0; r < lm.n_rows; ++r) {
        const auto p = pm.row(r);
        const std::size_t y = static_cast<std::size_t>(labels[r]);
        const double w = alpha.empty() ? 1.0 : alpha[y];
        const double py = p[y];
        const double u = 1.0 - py;
        const double logp = detail::clamped_log(py);

        out.value += w * (lambda == 0.0 ? -logp : -std::pow(u, lambda) * logp);

        // d/dp [-(1-p)^l log p]; the l > 0 branch vanishes as p -> 1
        double dldp;
        if (lambda == 0.0) {
            dldp = -1.0 / std::max(py, kProbFloor);
        } else if (u <= 0.0) {
            dldp = 0.0;
        } else {
            dldp = lambda * std::pow(u, lambda - 1.0) * logp -
                   std::pow(u, lambda) / std::max(py, kProbFloor);
        }
        std::fill(gp.begin(), gp.end(), 0.0);
        gp[y] = w * inv_n * dldp;
        detail::softmax_backward_row(p, gp, out.grad_logits.row(r));
    }
    out.value *= inv_n;
    return out;
}

namespace detail {

/// Jaccard-extension weights for one class: errors sorted descending, ground
/// truth in the same order. Returns the weight vector aligned to the sorted
/// order.
inline std::vector<double> lovasz_grad_sorted(std::span<const double> fg_sorted) {
    const std::size_t n = fg_sorted.size();
    double gts = 0.0;
    for (const double v : fg_sorted) gts += v;
    std::vector<double> weights(n);
    double cum_fg = 0.0, cum_bg = 0.0, prev_jac = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        cum_fg += fg_sorted[k];
        cum_bg += 1.0 - fg_sorted[k];
        const double inter = gts - cum_fg;
        const double uni = gts + cum_bg;
        const double jac = 1.0 - (uni > 0.0 ? inter / uni : 0.0);
        weights[k] = jac - prev_jac;
        prev_jac = jac;
    }
    return weights;
}

}  // namespace detail

/// Per-class Lovász term: errors m(c) sorted descending, dotted with the
/// Jaccard-extension weights. Exposed for the vertex-property checks.
inline double lovasz_class_term(const ProbMatrix& pm, std::span<const std::int32_t> labels,
                                std::size_t cls) {
    const std::size_t n = pm.n_rows;
    std::vector<double> errors(n), fg(n);
    for (std::size_t r = 0; r < n; ++r) {
        const bool is_cls = static_cast<std::size_t>(labels[r]) == cls;
        fg[r] = is_cls ? 1.0 : 0.0;
        errors[r] = is_cls ? 1.0 - pm.at(r, cls) : pm.at(r, cls);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return errors[a] > errors[b]; });
    std::vector<double> fg_sorted(n);
    for (std::size_t k = 0; k < n; ++k) fg_sorted[k] = fg[order[k]];
    const auto weights = detail::lovasz_grad_sorted(fg_sorted);
    double term = 0.0;
    for (std::size_t k = 0; k < n; ++k) term += errors[order[k]] * weights[k];
    return term;
}

/// Lovász-softmax: mean over classes present in the batch of the per-class
/// Jaccard-extension term. Input must already be a probability matrix.
inline LossValue lovasz_softmax(const ProbMatrix& pm, std::span<const std::int32_t> labels) {
    detail::check_labels(pm, labels);
    detail::check_prob_rows(pm, "lovasz_softmax");

    const std::size_t n = pm.n_rows;
    const std::size_t n_classes = pm.n_cols;
    std::vector<bool> present(n_classes, false);
    for (const auto y : labels) present[static_cast<std::size_t>(y)] = true;
    const auto n_present = static_cast<double>(
        std::count(present.begin(), present.end(), true));

    LossValue out;
    out.grad_logits = FeatureMatrix(n, n_classes);
    FeatureMatrix grad_probs(n, n_classes);

    std::vector<double> errors(n), fg(n), fg_sorted(n);
    std::vector<std::size_t> order(n);
    for (std::size_t cls = 0; cls < n_classes; ++cls) {
        if (!present[cls]) continue;
        for (std::size_t r = 0; r < n; ++r) {
            const bool is_cls = static_cast<std::size_t>(labels[r]) == cls;
            fg[r] = is_cls ? 1.0 : 0.0;
            errors[r] = is_cls ? 1.0 - pm.at(r, cls) : pm.at(r, cls);
        }
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return errors[a] > errors[b];
        });
        for (std::size_t k = 0; k < n; ++k) fg_sorted[k] = fg[order[k]];
        const auto weights = detail::lovasz_grad_sorted(fg_sorted);
        for (std::size_t k = 0; k < n; ++k) {
            const std::size_t r = order[k];
            out.value += errors[r] * weights[k];
            // d err / d p_{r,cls} is -1 on ground-truth rows, +1 elsewhere
            grad_probs.at(r, cls) += (fg[r] > 0.5 ? -1.0 : 1.0) * weights[k] / n_present;
        }
    }
    out.value /= n_present;

    for (std::size_t r = 0; r < n; ++r)
        detail::softmax_backward_row(pm.row(r), grad_probs.row(r), out.grad_logits.row(r));
    return out;
}

/// Mean negative prediction entropy, in [-log C, 0]. Minimizing this
/// maximizes the entropy of the predictions.
inline LossValue entropy_max_loss(const LogitMatrix& lm) {
    const ProbMatrix pm = softmax(lm);
    const double inv_n = 1.0 / static_cast<double>(lm.n_rows);
    LossValue out;
    out.grad_logits = FeatureMatrix(lm.n_rows, lm.n_cols);
    std::vector<double> gp(lm.n_cols);
    for (std::size_t r = 0; r < lm.n_rows; ++r) {
        const auto p = pm.row(r);
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double logp = detail::clamped_log(p[j]);
            out.value += p[j] * logp;
            gp[j] = (logp + 1.0) * inv_n;
        }
        detail::softmax_backward_row(p, gp, out.grad_logits.row(r));
    }
    out.value *= inv_n;
    return out;
}

enum class A2dDistance { l1, l2, hellinger };

/// Discrepancy loss between the two modality heads on the non-ground-truth
/// classes: the ground-truth column is removed per row, the rest is
/// renormalized, and the mean distance is negated (maximized).
inline CrossModalLossValue a2d_loss(const ProbMatrix& o_c, const ProbMatrix& o_l,
                                    std::span<const std::int32_t> labels,
                                    A2dDistance distance = A2dDistance::l1) {
    if (!o_c.same_shape(o_l))
        throw std::invalid_argument("a2d_loss: modality outputs must share shape");
    if (o_c.n_cols < 2) throw std::invalid_argument("a2d_loss: needs at least 2 classes");
    detail::check_labels(o_c, labels);
    detail::check_prob_rows(o_c, "a2d_loss o_c");
    detail::check_prob_rows(o_l, "a2d_loss o_l");

    const std::size_t n = o_c.n_rows;
    const std::size_t n_classes = o_c.n_cols;
    const double inv_n = 1.0 / static_cast<double>(n);

    CrossModalLossValue out;
    out.grad_logits_c = FeatureMatrix(n, n_classes);
    out.grad_logits_l = FeatureMatrix(n, n_classes);

    std::vector<double> bar_c(n_classes), bar_l(n_classes);
    std::vector<double> gp_c(n_classes), gp_l(n_classes);
    for (std::size_t r = 0; r < n; ++r) {
        const auto pc = o_c.row(r);
        const auto pl = o_l.row(r);
        const std::size_t y = static_cast<std::size_t>(labels[r]);
        const double sc = std::max(1.0 - pc[y], kProbFloor);
        const double sl = std::max(1.0 - pl[y], kProbFloor);
        for (std::size_t j = 0; j < n_classes; ++j) {
            bar_c[j] = j == y ? 0.0 : pc[j] / sc;
            bar_l[j] = j == y ? 0.0 : pl[j] / sl;
        }

        // distance value and its gradient wrt the renormalized entries
        double dist = 0.0;
        std::vector<double> dd_c(n_classes, 0.0), dd_l(n_classes, 0.0);
        switch (distance) {
            case A2dDistance::l1:
                for (std::size_t j = 0; j < n_classes; ++j) {
                    if (j == y) continue;
                    const double diff = bar_c[j] - bar_l[j];
                    dist += std::abs(diff);
                    const double s = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
                    dd_c[j] = s;
                    dd_l[j] = -s;
                }
                break;
            case A2dDistance::l2: {
                double sq = 0.0;
                for (std::size_t j = 0; j < n_classes; ++j) {
                    if (j == y) continue;
                    const double diff = bar_c[j] - bar_l[j];
                    sq += diff * diff;
                }
                dist = std::sqrt(sq);
                const double denom = std::max(dist, kProbFloor);
                for (std::size_t j = 0; j < n_classes; ++j) {
                    if (j == y) continue;
                    dd_c[j] = (bar_c[j] - bar_l[j]) / denom;
                    dd_l[j] = -dd_c[j];
                }
                break;
            }
            case A2dDistance::hellinger: {
                double sq = 0.0;
                for (std::size_t j = 0; j < n_classes; ++j) {
                    if (j == y) continue;
                    const double diff = std::sqrt(bar_c[j]) - std::sqrt(bar_l[j]);
                    sq += diff * diff;
                }
                dist = std::sqrt(0.5 * sq);
                const double denom = std::max(4.0 * dist, kProbFloor);
                for (std::size_t j = 0; j < n_classes; ++j) {
                    if (j == y) continue;
                    const double diff = std::sqrt(bar_c[j]) - std::sqrt(bar_l[j]);
                    dd_c[j] = diff / (denom * std::max(std::sqrt(bar_c[j]), kProbFloor));
                    dd_l[j] = -diff / (denom * std::max(std::sqrt(bar_l[j]), kProbFloor));
                }
                break;
            }
        }
        out.value -= inv_n * dist;

        // chain through the renormalization: bar_j = p_j / (1 - p_y), j != y
        double dot_c = 0.0, dot_l = 0.0;
        for (std::size_t j = 0; j < n_classes; ++j) {
            dot_c += dd_c[j] * bar_c[j];
            dot_l += dd_l[j] * bar_l[j];
        }
        for (std::size_t j = 0; j < n_classes; ++j) {
            gp_c[j] = j == y ? -inv_n * dot_c / sc : -inv_n * dd_c[j] / sc;
            gp_l[j] = j == y ? -inv_n * dot_l / sl : -inv_n * dd_l[j] / sl;
        }
        // the gt column feeds every bar_j through the denominator
        // d bar_j / d p_y = p_j / s^2 = bar_j / s, handled via dot above
        detail::softmax_backward_row(pc, gp_c, out.grad_logits_c.row(r));
        detail::softmax_backward_row(pl, gp_l, out.grad_logits_l.row(r));
    }
    return out;
}

/// Cross-modal KL consistency: KL(O^c || O) + KL(O^l || O), meaned over
/// rows. q is clamped at 1e-12; 0 log 0 is 0.
inline CrossModalLossValue xmuda_loss(const ProbMatrix& o_c, const ProbMatrix& o_l,
                                      const ProbMatrix& o_fused) {
    if (!o_c.same_shape(o_l) || !o_c.same_shape(o_fused))
        throw std::invalid_argument("xmuda_loss: all three outputs must share shape");
    detail::check_prob_rows(o_c, "xmuda_loss o_c");
    detail::check_prob_rows(o_l, "xmuda_loss o_l");
    detail::check_prob_rows(o_fused, "xmuda_loss o_fused");

    const std::size_t n = o_c.n_rows;
    const std::size_t n_classes = o_c.n_cols;
    const double inv_n = 1.0 / static_cast<double>(n);

    CrossModalLossValue out;
    out.grad_logits_c = FeatureMatrix(n, n_classes);
    out.grad_logits_l = FeatureMatrix(n, n_classes);
    out.grad_logits_fused = FeatureMatrix(n, n_classes);

    std::vector<double> gp_c(n_classes), gp_l(n_classes), gp_q(n_classes);
    for (std::size_t r = 0; r < n; ++r) {
        const auto pc = o_c.row(r);
        const auto pl = o_l.row(r);
        const auto q = o_fused.row(r);
        std::fill(gp_q.begin(), gp_q.end(), 0.0);
        for (std::size_t j = 0; j < n_classes; ++j) {
            const double qc = std::max(q[j], kProbFloor);
            const double log_q = std::log(qc);
            const double log_pc = detail::clamped_log(pc[j]);
            const double log_pl = detail::clamped_log(pl[j]);
            out.value += inv_n * (pc[j] * (log_pc - log_q) + pl[j] * (log_pl - log_q));
            gp_c[j] = inv_n * (log_pc - log_q + 1.0);
            gp_l[j] = inv_n * (log_pl - log_q + 1.0);
            gp_q[j] = -inv_n * (pc[j] + pl[j]) / qc;
        }
        detail::softmax_backward_row(pc, gp_c, out.grad_logits_c.row(r));
        detail::softmax_backward_row(pl, gp_l, out.grad_logits_l.row(r));
        detail::softmax_backward_row(q, gp_q, out.grad_logits_fused.row(r));
    }
    return out;
}

enum class TaskMode { segmentation, detection };
enum class CrossModalMode { none, a2d, xmuda };

struct CombinedLossConfig {
    double gamma1 = 0.0;
    double gamma2 = 0.0;
    TaskMode mode = TaskMode::detection;
    CrossModalMode cross_modal = CrossModalMode::none;
};

/// Parts feeding the combined objective. Provided parts must share the
/// gradient shape.
struct LossParts {
    std::optional<LossValue> cls;     // detection classification term
    std::optional<LossValue> foc;     // segmentation focal term
    std::optional<LossValue> lov;     // segmentation Lovász term
    std::optional<LossValue> ent;     // entropy maximization term
    std::optional<LossValue> xmodal;  // cross-modal term (a2d or xmuda)
};

/// Weighted sum of the configured parts; values and gradients combine
/// linearly with weights 1, gamma1 and gamma2.
inline LossValue combined_loss(const LossParts& parts, const CombinedLossConfig& cfg) {
    if (!(cfg.gamma1 >= 0.0) || !(cfg.gamma2 >= 0.0))
        throw std::invalid_argument("combined_loss: gamma weights must be nonnegative");

    std::vector<std::pair<const LossValue*, double>> terms;
    if (cfg.mode == TaskMode::segmentation) {
        if (!parts.foc || !parts.lov)
            throw std::invalid_argument("combined_loss: segmentation needs foc and lov parts");
        terms.emplace_back(&*parts.foc, 1.0);
        terms.emplace_back(&*parts.lov, 1.0);
    } else {
        if (!parts.cls)
            throw std::invalid_argument("combined_loss: detection needs the cls part");
        terms.emplace_back(&*parts.cls, 1.0);
    }
    if (parts.ent)
        terms.emplace_back(&*parts.ent, cfg.gamma1);
    else if (cfg.gamma1 != 0.0)
        throw std::invalid_argument("combined_loss: gamma1 set but ent part missing");
    if (parts.xmodal) {
        if (cfg.cross_modal == CrossModalMode::none)
            throw std::invalid_argument("combined_loss: xmodal part given but mode is none");
        terms.emplace_back(&*parts.xmodal, cfg.gamma2);
    } else if (cfg.cross_modal != CrossModalMode::none && cfg.gamma2 != 0.0) {
        throw std::invalid_argument("combined_loss: cross-modal mode set but part missing");
    }

    LossValue out;
    const FeatureMatrix& ref = terms.front().first->grad_logits;
    out.grad_logits = FeatureMatrix(ref.n_rows, ref.n_cols);
    for (const auto& [part, weight] : terms) {
        if (!part->grad_logits.same_shape(ref))
            throw std::invalid_argument("combined_loss: part gradient shapes disagree");
        out.value += weight * part->value;
        for (std::size_t i = 0; i < out.grad_logits.data.size(); ++i)
            out.grad_logits.data[i] += weight * part->grad_logits.data[i];
    }
    return out;
}

}  // namespace fmix
