#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmix/losses.hpp"
#include "fmix/matrix.hpp"

namespace fmix {

enum class ScoreMethod { msp, maxlogit, energy, entropy, gen };

inline ScoreMethod parse_score_method(const std::string& name) {
    if (name == "msp") return ScoreMethod::msp;
    if (name == "maxlogit") return ScoreMethod::maxlogit;
    if (name == "energy") return ScoreMethod::energy;
    if (name == "entropy") return ScoreMethod::entropy;
    if (name == "gen") return ScoreMethod::gen;
    throw std::invalid_argument("unknown score method: " + name);
}

inline const char* score_method_name(ScoreMethod m) {
    switch (m) {
        case ScoreMethod::msp: return "msp";
        case ScoreMethod::maxlogit: return "maxlogit";
        case ScoreMethod::energy: return "energy";
        case ScoreMethod::entropy: return "entropy";
        case ScoreMethod::gen: return "gen";
    }
    return "?";
}

struct ScoreParams {
    double temperature = 1.0;  // energy
    double gen_gamma = 0.1;    // gen exponent, in (0, 1)
    std::size_t gen_top_m = 0;  // 0 means min(10, C)
};

/// Per-row confidence scores, normalized so that higher always means more
/// in-distribution. Entropy and GEN are negated relative to their raw
/// definitions to keep that convention.
inline std::vector<double> score(const LogitMatrix& lm, ScoreMethod method,
                                 const ScoreParams& params = {}) {
    validate_matrix(lm, "score logits");
    std::vector<double> out(lm.n_rows);
    switch (method) {
        case ScoreMethod::msp: {
            const ProbMatrix pm = softmax(lm);
            for (std::size_t r = 0; r < lm.n_rows; ++r) {
                const auto p = pm.row(r);
                out[r] = *std::max_element(p.begin(), p.end());
            }
            break;
        }
        case ScoreMethod::maxlogit:
            for (std::size_t r = 0; r < lm.n_rows; ++r) {
                const auto z = lm.row(r);
                out[r] = *std::max_element(z.begin(), z.end());
            }
            break;
        case ScoreMethod::energy: {
            const double t = params.temperature;
            if (!(t > 0.0))
                throw std::invalid_argument("energy score: temperature must be positive");
            for (std::size_t r = 0; r < lm.n_rows; ++r) {
                const auto z = lm.row(r);
                const double zmax = *std::max_element(z.begin(), z.end());
                double s = 0.0;
                for (const double v : z) s += std::exp((v - zmax) / t);
                out[r] = zmax + t * std::log(s);
            }
            break;
        }
        case ScoreMethod::entropy: {
            const ProbMatrix pm = softmax(lm);
            for (std::size_t r = 0; r < lm.n_rows; ++r) {
                double neg_h = 0.0;
                for (const double p : pm.row(r))
                    if (p > 0.0) neg_h += p * std::log(p);
                out[r] = neg_h;  // -H(p): higher = more confident = more ID
            }
            break;
        }
        case ScoreMethod::gen: {
            const double g = params.gen_gamma;
            if (!(g > 0.0) || !(g < 1.0))
                throw std::invalid_argument("gen score: gamma must be in (0, 1)");
            std::size_t top_m = params.gen_top_m;
            if (top_m == 0) top_m = std::min<std::size_t>(10, lm.n_cols);
            if (top_m > lm.n_cols)
                throw std::invalid_argument("gen score: top_m exceeds class count");
            const ProbMatrix pm = softmax(lm);
            std::vector<double> p(lm.n_cols);
            for (std::size_t r = 0; r < lm.n_rows; ++r) {
                const auto row = pm.row(r);
                p.assign(row.begin(), row.end());
                std::partial_sort(p.begin(), p.begin() + top_m, p.end(),
                                  std::greater<double>());
                double gen = 0.0;
                for (std::size_t j = 0; j < top_m; ++j)
                    gen += std::pow(p[j], g) * std::pow(1.0 - p[j], g);
                out[r] = -gen;  // negated generalized entropy, higher = ID
            }
            break;
        }
    }
    return out;
}

/// Threshold rule: a sample is ID iff its score is at least eta (ties are
/// ID).
inline std::vector<std::uint8_t> threshold_decide(const std::vector<double>& scores,
                                                  double eta) {
    std::vector<std::uint8_t> out(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] >= eta ? 1 : 0;
    return out;
}

}  // namespace fmix
