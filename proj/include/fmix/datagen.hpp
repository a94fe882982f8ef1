#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmix/modality.hpp"
#include "fmix/rng.hpp"

namespace fmix {

/// Synthetic multimodal Gaussian-cluster dataset. Class means are drawn at
/// class_mean_scale per modality; modality 2's means are shifted by
/// modality_mean_offset so the two modality populations differ in mean. OOD
/// class means come from the same distribution as ID means, so OOD
/// difficulty is unseen-ness, not distance.
struct GeneratorSpec {
    std::size_t n_id_classes = 6;
    std::size_t n_ood_classes = 2;
    std::vector<std::size_t> dim_per_modality = {32, 32};
    double class_mean_scale = 1.0;
    double within_class_std = 0.7;
    std::vector<double> modality_mean_offset = {1.0};  // scalar (size 1) or per-dim
    std::size_t samples_per_class = 500;
    std::uint64_t seed = 1;
    /// Role of each underlying class (true = OOD). Empty means the first
    /// n_id_classes are ID and the rest OOD. Class means depend only on the
    /// class index, so re-rolling roles keeps the geometry fixed.
    std::vector<bool> class_is_ood;
};

inline void validate_spec(const GeneratorSpec& spec) {
    if (spec.n_id_classes < 2)
        throw std::invalid_argument("GeneratorSpec: need at least 2 ID classes");
    if (spec.dim_per_modality.empty())
        throw std::invalid_argument("GeneratorSpec: need at least one modality");
    for (const auto d : spec.dim_per_modality)
        if (d < 1) throw std::invalid_argument("GeneratorSpec: modality dims must be >= 1");
    if (!(spec.within_class_std > 0.0))
        throw std::invalid_argument("GeneratorSpec: within_class_std must be positive");
    if (spec.samples_per_class < 1)
        throw std::invalid_argument("GeneratorSpec: samples_per_class must be >= 1");
    if (!spec.class_is_ood.empty()) {
        if (spec.class_is_ood.size() != spec.n_id_classes + spec.n_ood_classes)
            throw std::invalid_argument("GeneratorSpec: role list size mismatch");
        std::size_t id = 0;
        for (const bool ood : spec.class_is_ood)
            if (!ood) ++id;
        if (id != spec.n_id_classes)
            throw std::invalid_argument("GeneratorSpec: role list disagrees with ID count");
    }
    if (spec.modality_mean_offset.size() > 1 && spec.dim_per_modality.size() > 1 &&
        spec.modality_mean_offset.size() != spec.dim_per_modality[1])
        throw std::invalid_argument("GeneratorSpec: offset vector must match modality 2 width");
}

struct GeneratedData {
    LabeledFeatureSet train;  // ID rows only
    LabeledFeatureSet test;   // ID and OOD rows, flagged
};

namespace detail {

inline std::vector<std::vector<std::vector<double>>> draw_class_means(
    const GeneratorSpec& spec) {
    const std::size_t n_classes = spec.n_id_classes + spec.n_ood_classes;
    RandomSource rng = RandomSource(spec.seed).split("class-means");
    std::vector<std::vector<std::vector<double>>> means(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) {
        means[c].resize(spec.dim_per_modality.size());
        for (std::size_t m = 0; m < spec.dim_per_modality.size(); ++m) {
            auto& mu = means[c][m];
            mu.resize(spec.dim_per_modality[m]);
            for (auto& v : mu) v = spec.class_mean_scale * rng.normal();
            if (m == 1 && !spec.modality_mean_offset.empty()) {
                for (std::size_t j = 0; j < mu.size(); ++j)
                    mu[j] += spec.modality_mean_offset.size() == 1
                                 ? spec.modality_mean_offset[0]
                                 : spec.modality_mean_offset[j];
            }
        }
    }
    return means;
}

inline LabeledFeatureSet sample_split(const GeneratorSpec& spec,
                                      const std::vector<std::vector<std::vector<double>>>& means,
                                      bool include_ood, RandomSource rng) {
    const std::size_t n_classes = spec.n_id_classes + spec.n_ood_classes;
    std::vector<bool> roles = spec.class_is_ood;
    if (roles.empty()) {
        roles.assign(n_classes, false);
        for (std::size_t c = spec.n_id_classes; c < n_classes; ++c) roles[c] = true;
    }

    // ID label = rank of the class among ID classes; OOD rows get sentinel C.
    std::vector<std::int32_t> id_label(n_classes, -1);
    std::int32_t next = 0;
    for (std::size_t c = 0; c < n_classes; ++c)
        if (!roles[c]) id_label[c] = next++;

    std::vector<std::size_t> keep;
    for (std::size_t c = 0; c < n_classes; ++c)
        if (include_ood || !roles[c]) keep.push_back(c);

    LabeledFeatureSet out;
    out.n_id_classes = static_cast<std::int32_t>(spec.n_id_classes);
    const std::size_t rows = keep.size() * spec.samples_per_class;
    for (std::size_t m = 0; m < spec.dim_per_modality.size(); ++m) {
        out.features.blocks.emplace_back(rows, spec.dim_per_modality[m]);
        out.features.modality_names.push_back("modality" + std::to_string(m + 1));
    }
    out.labels.resize(rows);
    out.is_ood.resize(rows);

    std::size_t row = 0;
    for (const std::size_t c : keep) {
        RandomSource class_rng = rng.split(c);
        for (std::size_t s = 0; s < spec.samples_per_class; ++s, ++row) {
            for (std::size_t m = 0; m < spec.dim_per_modality.size(); ++m) {
                auto dst = out.features.blocks[m].row(row);
                const auto& mu = means[c][m];
                for (std::size_t j = 0; j < dst.size(); ++j)
                    dst[j] = mu[j] + spec.within_class_std * class_rng.normal();
            }
            out.is_ood[row] = roles[c] ? 1 : 0;
            out.labels[row] = roles[c]
                                  ? LabeledFeatureSet::ood_sentinel(out.n_id_classes)
                                  : id_label[c];
        }
    }
    return out;
}

}  // namespace detail

/// Deterministic per seed: train holds ID rows only, test holds fresh ID and
/// OOD draws with is_ood flags.
inline GeneratedData generate(const GeneratorSpec& spec) {
    validate_spec(spec);
    const auto means = detail::draw_class_means(spec);
    const RandomSource root(spec.seed);
    GeneratedData out;
    out.train = detail::sample_split(spec, means, false, root.split("train"));
    out.test = detail::sample_split(spec, means, true, root.split("test"));
    return out;
}

/// Reassigns which classes play ID and which play OOD; class means are tied
/// to class indices, so any split is over the same geometry.
inline GeneratorSpec split_roles(const GeneratorSpec& spec, const std::vector<bool>& role_map) {
    const std::size_t n_classes = spec.n_id_classes + spec.n_ood_classes;
    if (role_map.size() != n_classes)
        throw std::invalid_argument("split_roles: role map must cover every class");
    std::size_t n_id = 0;
    for (const bool ood : role_map)
        if (!ood) ++n_id;
    if (n_id < 2) throw std::invalid_argument("split_roles: need at least 2 ID classes");
    GeneratorSpec out = spec;
    out.n_id_classes = n_id;
    out.n_ood_classes = n_classes - n_id;
    out.class_is_ood = role_map;
    return out;
}

}  // namespace fmix
