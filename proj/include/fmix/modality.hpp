#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmix/matrix.hpp"

namespace fmix {

/// Ordered per-modality feature blocks with equal row counts. Concatenation
/// order is the block order.
struct ModalitySet {
    std::vector<FeatureMatrix> blocks;
    std::vector<std::string> modality_names;

    std::size_t n_rows() const { return blocks.empty() ? 0 : blocks.front().n_rows; }
    std::size_t n_blocks() const { return blocks.size(); }
    std::size_t total_width() const {
        std::size_t w = 0;
        for (const auto& b : blocks) w += b.n_cols;
        return w;
    }
};

inline void validate_modalities(const ModalitySet& ms) {
    if (ms.blocks.empty()) throw std::invalid_argument("ModalitySet: needs at least one block");
    const std::size_t rows = ms.blocks.front().n_rows;
    for (const auto& b : ms.blocks) {
        validate_matrix(b, "ModalitySet block");
        if (b.n_rows != rows)
            throw std::invalid_argument("ModalitySet: blocks disagree on row count");
    }
    if (!ms.modality_names.empty() && ms.modality_names.size() != ms.blocks.size())
        throw std::invalid_argument("ModalitySet: name count does not match block count");
}

/// Feature-axis concatenation, block order preserved.
inline FeatureMatrix concat(const ModalitySet& ms) {
    validate_modalities(ms);
    const std::size_t rows = ms.n_rows();
    FeatureMatrix out(rows, ms.total_width());
    for (std::size_t r = 0; r < rows; ++r) {
        double* dst = out.row(r).data();
        for (const auto& b : ms.blocks) {
            const auto src = b.row(r);
            dst = std::copy(src.begin(), src.end(), dst);
        }
    }
    return out;
}

/// Inverse of concat for a known block layout.
inline ModalitySet split_like(const FeatureMatrix& fm, const ModalitySet& layout) {
    if (fm.n_cols != layout.total_width())
        throw std::invalid_argument("split_like: width does not match layout");
    ModalitySet out;
    out.modality_names = layout.modality_names;
    std::size_t offset = 0;
    for (const auto& b : layout.blocks) {
        FeatureMatrix block(fm.n_rows, b.n_cols);
        for (std::size_t r = 0; r < fm.n_rows; ++r) {
            const auto src = fm.row(r);
            std::copy(src.begin() + offset, src.begin() + offset + b.n_cols,
                      block.row(r).begin());
        }
        offset += b.n_cols;
        out.blocks.push_back(std::move(block));
    }
    return out;
}

/// ModalitySet plus labels and ID/OOD flags. ID rows carry class labels in
/// 0..n_id_classes-1; OOD rows carry the sentinel label n_id_classes.
struct LabeledFeatureSet {
    ModalitySet features;
    std::vector<std::int32_t> labels;
    std::vector<std::uint8_t> is_ood;
    std::int32_t n_id_classes = 0;

    std::size_t n_rows() const { return labels.size(); }
    static constexpr std::int32_t ood_sentinel(std::int32_t n_id_classes) {
        return n_id_classes;
    }
};

inline void validate_labeled(const LabeledFeatureSet& lfs) {
    validate_modalities(lfs.features);
    if (lfs.labels.size() != lfs.features.n_rows() || lfs.is_ood.size() != lfs.labels.size())
        throw std::invalid_argument("LabeledFeatureSet: label/flag counts disagree with rows");
    if (lfs.n_id_classes < 1)
        throw std::invalid_argument("LabeledFeatureSet: needs at least one ID class");
    for (std::size_t i = 0; i < lfs.labels.size(); ++i) {
        if (lfs.is_ood[i]) {
            if (lfs.labels[i] != LabeledFeatureSet::ood_sentinel(lfs.n_id_classes))
                throw std::invalid_argument("LabeledFeatureSet: OOD row without sentinel label");
        } else if (lfs.labels[i] < 0 || lfs.labels[i] >= lfs.n_id_classes) {
            throw std::invalid_argument("LabeledFeatureSet: ID label out of range");
        }
    }
}

}  // namespace fmix
