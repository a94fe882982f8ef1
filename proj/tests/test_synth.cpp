#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "fmix/gaussian.hpp"
#include "fmix/synth.hpp"

using namespace fmix;

namespace {

ModalitySet two_blocks(std::initializer_list<double> a, std::initializer_list<double> b) {
    ModalitySet ms;
    FeatureMatrix fa(1, a.size()), fb(1, b.size());
    std::copy(a.begin(), a.end(), fa.data.begin());
    std::copy(b.begin(), b.end(), fb.data.begin());
    ms.blocks = {std::move(fa), std::move(fb)};
    return ms;
}

ModalitySet random_blocks(std::size_t rows, std::vector<std::size_t> widths,
                          RandomSource& rng) {
    ModalitySet ms;
    for (const auto w : widths) {
        FeatureMatrix b(rows, w);
        for (auto& v : b.data) v = rng.normal();
        ms.blocks.push_back(std::move(b));
    }
    return ms;
}

std::vector<double> sorted_row(const ModalitySet& ms, std::size_t r) {
    std::vector<double> vals;
    for (const auto& b : ms.blocks) {
        const auto row = b.row(r);
        vals.insert(vals.end(), row.begin(), row.end());
    }
    std::sort(vals.begin(), vals.end());
    return vals;
}

}  // namespace

TEST_CASE("feature mixing with zero swaps is the identity") {
    RandomSource rng(1);
    ModalitySet ms = random_blocks(5, {4, 6}, rng);
    const auto res = feature_mixing(ms, {.n_swap = 0, .rng = RandomSource(2)});
    for (std::size_t b = 0; b < 2; ++b)
        CHECK(res.outliers.blocks[b].data == ms.blocks[b].data);
}

TEST_CASE("full ordered swap exchanges the modalities") {
    const ModalitySet ms = two_blocks({1, 2, 3}, {4, 5, 6});
    const auto res = feature_mixing_masked(ms, {{0, 1, 2}, {0, 1, 2}});
    CHECK(res.outliers.blocks[0].data == std::vector<double>{4, 5, 6});
    CHECK(res.outliers.blocks[1].data == std::vector<double>{1, 2, 3});

    ModalitySet joined;
    joined.blocks = res.outliers.blocks;
    CHECK(concat(joined).data == std::vector<double>{4, 5, 6, 1, 2, 3});
}

TEST_CASE("every single-swap selection of the 2-D example hits the bound exactly") {
    const ModalitySet ms = two_blocks({0, 0}, {10, 10});
    const double expected = std::sqrt(2.0) * 10.0;  // sqrt(2 N) * delta, N = 1, delta = 10
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            const auto res = feature_mixing_masked(ms, {{i}, {j}});
            double dev_sq = 0.0;
            for (std::size_t b = 0; b < 2; ++b)
                for (std::size_t c = 0; c < 2; ++c) {
                    const double d = res.outliers.blocks[b].at(0, c) - ms.blocks[b].at(0, c);
                    dev_sq += d * d;
                }
            CHECK(std::sqrt(dev_sq) == Catch::Approx(expected));
            CHECK(cross_modal_delta(ms.blocks[0].row(0), ms.blocks[1].row(0)) == 10.0);
        }
}

TEST_CASE("feature mixing rejects oversized swap counts") {
    const ModalitySet ms = two_blocks({1, 2}, {3, 4, 5});
    CHECK_THROWS_AS(feature_mixing(ms, {.n_swap = 3, .rng = RandomSource(0)}),
                    std::invalid_argument);
    // n_swap up to the smaller width is fine even when widths differ
    CHECK_NOTHROW(feature_mixing(ms, {.n_swap = 2, .rng = RandomSource(0)}));
}

TEST_CASE("feature mixing permutes entries within each row") {
    RandomSource rng(5);
    ModalitySet ms = random_blocks(6, {8, 8}, rng);
    for (const bool per_sample : {false, true}) {
        auto res = feature_mixing(
            ms, {.n_swap = 3, .per_sample_masks = per_sample, .rng = RandomSource(9)});
        for (std::size_t r = 0; r < ms.n_rows(); ++r)
            CHECK(sorted_row(res.outliers, r) == sorted_row(ms, r));
    }
}

TEST_CASE("feature mixing is deterministic given the seed") {
    RandomSource rng(6);
    ModalitySet ms = random_blocks(4, {5, 5}, rng);
    const MixingConfig cfg{.n_swap = 2, .rng = RandomSource(77)};
    const auto a = feature_mixing(ms, cfg);
    const auto b = feature_mixing(ms, cfg);
    CHECK(a.outliers.blocks[0].data == b.outliers.blocks[0].data);
    CHECK(a.masks_used == b.masks_used);
}

TEST_CASE("cyclic mixing rotates single dimensions") {
    ModalitySet ms;
    for (const double v : {1.0, 2.0, 3.0}) {
        FeatureMatrix b(1, 1);
        b.at(0, 0) = v;
        ms.blocks.push_back(std::move(b));
    }
    const auto res = feature_mixing_cyclic(ms, {.n_swap = 1, .rng = RandomSource(3)});
    CHECK(res.outliers.blocks[0].at(0, 0) == 2.0);
    CHECK(res.outliers.blocks[1].at(0, 0) == 3.0);
    CHECK(res.outliers.blocks[2].at(0, 0) == 1.0);
}

TEST_CASE("cyclic mixing conserves the entry sum and refuses k < 3") {
    RandomSource rng(8);
    ModalitySet ms = random_blocks(3, {4, 4, 4}, rng);
    const auto res = feature_mixing_cyclic(ms, {.n_swap = 2, .rng = RandomSource(4)});
    double before = 0.0, after = 0.0;
    for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t i = 0; i < ms.blocks[b].data.size(); ++i) {
            before += ms.blocks[b].data[i];
            after += res.outliers.blocks[b].data[i];
        }
    CHECK(after == Catch::Approx(before).epsilon(1e-12));

    ModalitySet two = random_blocks(3, {4, 4}, rng);
    CHECK_THROWS_AS(feature_mixing_cyclic(two, {.n_swap = 1, .rng = RandomSource(0)}),
                    std::invalid_argument);
    CHECK(feature_mixing_cyclic(ms, {.n_swap = 0, .rng = RandomSource(0)})
              .outliers.blocks[1]
              .data == ms.blocks[1].data);
}

TEST_CASE("unimodal mixing swaps between the halves") {
    FeatureMatrix fm(1, 4);
    fm.data = {1, 2, 3, 4};

    const auto ident = feature_mixing_unimodal(fm, {.n_swap = 0, .rng = RandomSource(2)});
    CHECK(ident.outliers.blocks[0].data == fm.data);

    // full half swap via the masked primitive on the two halves
    ModalitySet halves = two_blocks({1, 2}, {3, 4});
    const auto swapped = feature_mixing_masked(halves, {{0, 1}, {0, 1}});
    ModalitySet joined;
    joined.blocks = swapped.outliers.blocks;
    CHECK(concat(joined).data == std::vector<double>{3, 4, 1, 2});

    FeatureMatrix odd(1, 3);
    odd.data = {1, 2, 3};
    CHECK_THROWS_AS(feature_mixing_unimodal(odd, {.n_swap = 1, .rng = RandomSource(0)}),
                    std::invalid_argument);
}

TEST_CASE("unimodal mixing preserves the multiset of entries") {
    RandomSource rng(12);
    FeatureMatrix fm(5, 8);
    for (auto& v : fm.data) v = rng.normal();
    const auto res = feature_mixing_unimodal(fm, {.n_swap = 2, .rng = RandomSource(13)});
    REQUIRE(res.outliers.blocks.size() == 1);
    for (std::size_t r = 0; r < fm.n_rows; ++r) {
        std::vector<double> before(fm.row(r).begin(), fm.row(r).end());
        std::vector<double> after(res.outliers.blocks[0].row(r).begin(),
                                  res.outliers.blocks[0].row(r).end());
        std::sort(before.begin(), before.end());
        std::sort(after.begin(), after.end());
        CHECK(before == after);
    }
}

TEST_CASE("mixup degenerate lambdas") {
    ModalitySet ms;
    FeatureMatrix block(2, 2);
    block.data = {0, 0, 2, 2};
    ms.blocks.push_back(std::move(block));

    RandomSource rng(1);
    const auto keep = mixup_synth(ms, 1.0, rng, 1.0);
    CHECK(keep.outliers.blocks[0].data == ms.blocks[0].data);

    RandomSource rng2(1);
    const auto mid = mixup_synth(ms, 1.0, rng2, 0.5);
    CHECK(mid.outliers.blocks[0].data == std::vector<double>{1, 1, 1, 1});
}

TEST_CASE("mixup outputs stay in the convex hull of their parents") {
    RandomSource data_rng(21);
    ModalitySet ms = random_blocks(40, {3, 4}, data_rng);
    const FeatureMatrix flat = concat(ms);

    RandomSource rng(22);
    MixupTrace trace;
    const auto res = mixup_synth(ms, 0.4, rng, {}, &trace);
    const FeatureMatrix out = concat(res.outliers);
    for (std::size_t r = 0; r < out.n_rows; ++r) {
        const auto self = flat.row(r);
        const auto partner = flat.row(trace.partner[r]);
        for (std::size_t c = 0; c < out.n_cols; ++c) {
            const double lo = std::min(self[c], partner[c]);
            const double hi = std::max(self[c], partner[c]);
            CHECK(out.at(r, c) >= lo - 1e-12);
            CHECK(out.at(r, c) <= hi + 1e-12);
        }
    }
}

TEST_CASE("mixup rejects single-row input") {
    ModalitySet ms;
    ms.blocks.emplace_back(1, 3, 1.0);
    RandomSource rng(0);
    CHECK_THROWS_AS(mixup_synth(ms, 1.0, rng), std::invalid_argument);
}

namespace {

LabeledFeatureSet gaussian_classes(std::size_t n_classes, std::size_t per_class,
                                   std::size_t dim, double spread, RandomSource& rng) {
    LabeledFeatureSet lfs;
    const std::size_t rows = n_classes * per_class;
    lfs.features.blocks.emplace_back(rows, dim);
    lfs.n_id_classes = static_cast<std::int32_t>(n_classes);
    lfs.labels.resize(rows);
    lfs.is_ood.assign(rows, 0);
    std::size_t r = 0;
    for (std::size_t c = 0; c < n_classes; ++c)
        for (std::size_t s = 0; s < per_class; ++s, ++r) {
            auto row = lfs.features.blocks[0].row(r);
            for (auto& v : row) v = spread * static_cast<double>(c) + rng.normal();
            lfs.labels[r] = static_cast<std::int32_t>(c);
        }
    return lfs;
}

}  // namespace

TEST_CASE("vos keeps the requested fraction, lowest likelihood first") {
    RandomSource rng(31);
    const LabeledFeatureSet lfs = gaussian_classes(1, 60, 3, 0.0, rng);

    RandomSource synth_rng_a(7);
    const auto all = vos_synth(lfs, 400, 1.0, synth_rng_a);
    CHECK(all.outliers.blocks[0].n_rows == 400);

    RandomSource synth_rng_b(7);  // same stream: same candidate draw
    const auto kept = vos_synth(lfs, 400, 0.25, synth_rng_b);
    CHECK(kept.outliers.blocks[0].n_rows == 100);

    const GaussianMoments gm = estimate_moments(lfs.features.blocks[0]);
    auto mean_d2 = [&](const FeatureMatrix& m) {
        double s = 0.0;
        for (std::size_t r = 0; r < m.n_rows; ++r) s += mahalanobis_sq(m.row(r), gm);
        return s / static_cast<double>(m.n_rows);
    };
    CHECK(mean_d2(kept.outliers.blocks[0]) >= mean_d2(all.outliers.blocks[0]));
}

TEST_CASE("vos kept tail clears the 0.90 quantile of its own candidate draw") {
    RandomSource rng(41);
    const LabeledFeatureSet lfs = gaussian_classes(1, 400, 4, 0.0, rng);

    RandomSource synth_rng_a(9);
    const auto candidates = vos_synth(lfs, 10000, 1.0, synth_rng_a);
    RandomSource synth_rng_b(9);
    const auto kept = vos_synth(lfs, 10000, 0.05, synth_rng_b);
    REQUIRE(kept.outliers.blocks[0].n_rows == 500);

    const GaussianMoments gm = estimate_moments(lfs.features.blocks[0]);
    std::vector<double> d2(candidates.outliers.blocks[0].n_rows);
    for (std::size_t r = 0; r < d2.size(); ++r)
        d2[r] = mahalanobis_sq(candidates.outliers.blocks[0].row(r), gm);
    std::sort(d2.begin(), d2.end());
    const double q90 = d2[static_cast<std::size_t>(0.90 * static_cast<double>(d2.size()))];

    double min_kept = 1e300;
    for (std::size_t r = 0; r < kept.outliers.blocks[0].n_rows; ++r)
        min_kept = std::min(min_kept, mahalanobis_sq(kept.outliers.blocks[0].row(r), gm));
    CHECK(min_kept >= q90);
}

TEST_CASE("vos argument checks") {
    RandomSource rng(51);
    const LabeledFeatureSet lfs = gaussian_classes(2, 10, 3, 4.0, rng);
    RandomSource synth_rng(1);
    CHECK_THROWS_AS(vos_synth(lfs, 100, 0.0, synth_rng), std::invalid_argument);
    CHECK_THROWS_AS(vos_synth(lfs, 0, 0.5, synth_rng), std::invalid_argument);

    // class with fewer than d + 2 samples
    const LabeledFeatureSet tiny = gaussian_classes(1, 4, 3, 0.0, rng);
    CHECK_THROWS_AS(vos_synth(tiny, 10, 0.5, synth_rng), std::invalid_argument);
}

TEST_CASE("npmix degenerate betas and the extrapolation bound") {
    RandomSource rng(61);
    const LabeledFeatureSet lfs = gaussian_classes(3, 30, 5, 3.0, rng);
    const FeatureMatrix flat = concat(lfs.features);

    RandomSource s1(5);
    const auto frozen = npmix_synth(lfs, 8, {0.0, 0.0}, s1);
    CHECK(concat(frozen.outliers).data == flat.data);

    RandomSource s2(5);
    NpMixTrace trace;
    const auto jumped = npmix_synth(lfs, 8, {1.0, 1.0}, s2, &trace);
    const FeatureMatrix out = concat(jumped.outliers);
    for (std::size_t r = 0; r < out.n_rows; ++r) {
        const auto nn = flat.row(trace.neighbor_index[r]);
        for (std::size_t c = 0; c < out.n_cols; ++c)
            CHECK(out.at(r, c) == Catch::Approx(nn[c]).margin(1e-12));
        CHECK(lfs.labels[trace.neighbor_index[r]] != lfs.labels[r]);
    }

    RandomSource s3(5);
    NpMixTrace trace2;
    const auto stretched = npmix_synth(lfs, 8, {0.5, 1.5}, s3, &trace2);
    const FeatureMatrix out2 = concat(stretched.outliers);
    for (std::size_t r = 0; r < out2.n_rows; ++r) {
        const auto self = flat.row(r);
        const auto nn = flat.row(trace2.neighbor_index[r]);
        double dev = 0.0, gap = 0.0;
        for (std::size_t c = 0; c < out2.n_cols; ++c) {
            dev += (out2.at(r, c) - self[c]) * (out2.at(r, c) - self[c]);
            gap += (nn[c] - self[c]) * (nn[c] - self[c]);
        }
        CHECK(std::sqrt(dev) <= 1.5 * std::sqrt(gap) + 1e-12);
    }
}

TEST_CASE("npmix requires at least two classes") {
    RandomSource rng(71);
    const LabeledFeatureSet lfs = gaussian_classes(1, 20, 3, 0.0, rng);
    RandomSource s(1);
    CHECK_THROWS_AS(npmix_synth(lfs, 4, {0.5, 1.5}, s), std::invalid_argument);
}

TEST_CASE("synthesizers are deterministic given the seed") {
    RandomSource rng(81);
    const LabeledFeatureSet lfs = gaussian_classes(2, 20, 4, 2.0, rng);

    RandomSource a(3), b(3);
    const auto ma = mixup_synth(lfs.features, 1.0, a);
    const auto mb = mixup_synth(lfs.features, 1.0, b);
    CHECK(concat(ma.outliers).data == concat(mb.outliers).data);

    RandomSource c(3), d(3);
    const auto na = npmix_synth(lfs, 4, {0.5, 1.5}, c);
    const auto nb = npmix_synth(lfs, 4, {0.5, 1.5}, d);
    CHECK(concat(na.outliers).data == concat(nb.outliers).data);

    RandomSource e(3), f(3);
    const auto va = vos_synth(lfs, 50, 0.2, e);
    const auto vb = vos_synth(lfs, 50, 0.2, f);
    CHECK(concat(va.outliers).data == concat(vb.outliers).data);
}
