#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmix/losses.hpp"
#include "fmix/matrix.hpp"
#include "fmix/modality.hpp"
#include "fmix/rng.hpp"
#include "fmix/synth.hpp"

namespace fmix {

namespace linalg {

/// out = a[n x k] * b[k x m] (+ bias per row when given)
inline FeatureMatrix matmul(const FeatureMatrix& a, const FeatureMatrix& b,
                            const std::vector<double>* bias = nullptr) {
    if (a.n_cols != b.n_rows) throw std::invalid_argument("matmul: inner dims disagree");
    FeatureMatrix out(a.n_rows, b.n_cols, 0.0);
    for (std::size_t i = 0; i < a.n_rows; ++i) {
        const auto arow = a.row(i);
        auto orow = out.row(i);
        for (std::size_t k = 0; k < a.n_cols; ++k) {
            const double av = arow[k];
            const auto brow = b.row(k);
            for (std::size_t j = 0; j < b.n_cols; ++j) orow[j] += av * brow[j];
        }
        if (bias)
            for (std::size_t j = 0; j < b.n_cols; ++j) orow[j] += (*bias)[j];
    }
    return out;
}

/// out = a^T[k x n] * b[n x m]
inline FeatureMatrix matmul_at_b(const FeatureMatrix& a, const FeatureMatrix& b) {
    if (a.n_rows != b.n_rows) throw std::invalid_argument("matmul_at_b: rows disagree");
    FeatureMatrix out(a.n_cols, b.n_cols, 0.0);
    for (std::size_t r = 0; r < a.n_rows; ++r) {
        const auto arow = a.row(r);
        const auto brow = b.row(r);
        for (std::size_t i = 0; i < a.n_cols; ++i) {
            const double av = arow[i];
            auto orow = out.row(i);
            for (std::size_t j = 0; j < b.n_cols; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

/// out = a[n x m] * b^T[m x k]
inline FeatureMatrix matmul_a_bt(const FeatureMatrix& a, const FeatureMatrix& b) {
    if (a.n_cols != b.n_cols) throw std::invalid_argument("matmul_a_bt: cols disagree");
    FeatureMatrix out(a.n_rows, b.n_rows, 0.0);
    for (std::size_t i = 0; i < a.n_rows; ++i) {
        const auto arow = a.row(i);
        auto orow = out.row(i);
        for (std::size_t j = 0; j < b.n_rows; ++j) {
            const auto brow = b.row(j);
            double s = 0.0;
            for (std::size_t k = 0; k < a.n_cols; ++k) s += arow[k] * brow[k];
            orow[j] = s;
        }
    }
    return out;
}

inline std::vector<double> column_sums(const FeatureMatrix& a) {
    std::vector<double> out(a.n_cols, 0.0);
    for (std::size_t r = 0; r < a.n_rows; ++r) {
        const auto row = a.row(r);
        for (std::size_t c = 0; c < a.n_cols; ++c) out[c] += row[c];
    }
    return out;
}

}  // namespace linalg

struct LinearLayer {
    FeatureMatrix w;  // [in x out]
    std::vector<double> b;
};

struct StreamLayout {
    std::size_t input_width = 32;
    std::size_t hidden1 = 64;
    std::size_t hidden2 = 24;
};

struct NetConfig {
    std::vector<StreamLayout> streams = {StreamLayout{}, StreamLayout{}};
    std::size_t head_hidden = 32;
    std::size_t n_classes = 6;
    bool modal_heads = false;
};

/// Two-stream rectifier network with late fusion: each modality passes
/// through two hidden layers; the penultimate features are concatenated and
/// fed to a two-layer classification head (hidden rectifier + linear out).
/// Optional per-modality linear heads support the cross-modal losses.
struct TwoStreamNet {
    struct Stream {
        LinearLayer l1, l2;
    };
    std::vector<Stream> streams;
    LinearLayer head_hidden;  // [sum hidden2 x head width]
    LinearLayer head_out;     // [head width x C]
    std::vector<LinearLayer> modal_heads;
    std::size_t n_classes = 0;
    std::uint64_t version = 0;  // bumped on every parameter update

    std::size_t fused_input_width() const { return head_hidden.w.n_rows; }
};

inline TwoStreamNet init_net(const NetConfig& cfg, RandomSource rng) {
    if (cfg.streams.empty()) throw std::invalid_argument("init_net: needs streams");
    if (cfg.n_classes < 2) throw std::invalid_argument("init_net: needs at least 2 classes");
    if (cfg.head_hidden < 1) throw std::invalid_argument("init_net: head width must be >= 1");
    auto he_layer = [&](std::size_t in, std::size_t out) {
        LinearLayer l;
        l.w = FeatureMatrix(in, out);
        const double scale = std::sqrt(2.0 / static_cast<double>(in));
        for (auto& v : l.w.data) v = scale * rng.normal();
        l.b.assign(out, 0.0);
        return l;
    };
    TwoStreamNet net;
    net.n_classes = cfg.n_classes;
    std::size_t fused_in = 0;
    for (const auto& s : cfg.streams) {
        TwoStreamNet::Stream stream;
        stream.l1 = he_layer(s.input_width, s.hidden1);
        stream.l2 = he_layer(s.hidden1, s.hidden2);
        net.streams.push_back(std::move(stream));
        fused_in += s.hidden2;
    }
    net.head_hidden = he_layer(fused_in, cfg.head_hidden);
    net.head_out = he_layer(cfg.head_hidden, cfg.n_classes);
    if (cfg.modal_heads)
        for (const auto& s : cfg.streams)
            net.modal_heads.push_back(he_layer(s.hidden2, cfg.n_classes));
    return net;
}

namespace detail {

inline FeatureMatrix relu(const FeatureMatrix& z) {
    FeatureMatrix out = z;
    for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
    return out;
}

}  // namespace detail

/// Fused-head forward on arbitrary fused features; used for both the ID and
/// the outlier branch.
struct HeadCache {
    FeatureMatrix input, hz, ha;
};

inline LogitMatrix head_forward(const TwoStreamNet& net, const FeatureMatrix& fused_input,
                                HeadCache* cache = nullptr) {
    FeatureMatrix hz = linalg::matmul(fused_input, net.head_hidden.w, &net.head_hidden.b);
    FeatureMatrix ha = detail::relu(hz);
    LogitMatrix logits = linalg::matmul(ha, net.head_out.w, &net.head_out.b);
    if (cache) {
        cache->input = fused_input;
        cache->hz = std::move(hz);
        cache->ha = std::move(ha);
    }
    return logits;
}

struct StreamCache {
    FeatureMatrix input, z1, a1, z2, a2;
};

struct ForwardResult {
    ModalitySet stream_feats;  // penultimate features per modality
    LogitMatrix fused_logits;
    std::vector<LogitMatrix> modal_logits;  // empty unless the net has heads
    // backward context
    std::vector<StreamCache> caches;
    HeadCache head_cache;
    const TwoStreamNet* net = nullptr;
    std::uint64_t net_version = 0;
};

inline ForwardResult forward(const TwoStreamNet& net, const ModalitySet& ms) {
    if (ms.n_blocks() != net.streams.size())
        throw std::invalid_argument("forward: modality count does not match streams");
    for (std::size_t s = 0; s < net.streams.size(); ++s)
        if (ms.blocks[s].n_cols != net.streams[s].l1.w.n_rows)
            throw std::invalid_argument("forward: input width does not match stream " +
                                        std::to_string(s));

    ForwardResult res;
    res.net = &net;
    res.net_version = net.version;
    for (std::size_t s = 0; s < net.streams.size(); ++s) {
        StreamCache cache;
        cache.input = ms.blocks[s];
        cache.z1 = linalg::matmul(cache.input, net.streams[s].l1.w, &net.streams[s].l1.b);
        cache.a1 = detail::relu(cache.z1);
        cache.z2 = linalg::matmul(cache.a1, net.streams[s].l2.w, &net.streams[s].l2.b);
        cache.a2 = detail::relu(cache.z2);
        res.stream_feats.blocks.push_back(cache.a2);
        res.caches.push_back(std::move(cache));
    }
    res.stream_feats.modality_names = ms.modality_names;
    res.fused_logits = head_forward(net, concat(res.stream_feats), &res.head_cache);
    for (std::size_t s = 0; s < net.modal_heads.size(); ++s)
        res.modal_logits.push_back(
            linalg::matmul(res.caches[s].a2, net.modal_heads[s].w, &net.modal_heads[s].b));
    return res;
}

struct NetGradients {
    std::vector<TwoStreamNet::Stream> streams;
    LinearLayer head_hidden;
    LinearLayer head_out;
    std::vector<LinearLayer> modal_heads;

    static NetGradients zeros_like(const TwoStreamNet& net) {
        NetGradients g;
        auto zero_layer = [](const LinearLayer& l) {
            LinearLayer z;
            z.w = FeatureMatrix(l.w.n_rows, l.w.n_cols, 0.0);
            z.b.assign(l.b.size(), 0.0);
            return z;
        };
        for (const auto& s : net.streams)
            g.streams.push_back({zero_layer(s.l1), zero_layer(s.l2)});
        g.head_hidden = zero_layer(net.head_hidden);
        g.head_out = zero_layer(net.head_out);
        for (const auto& h : net.modal_heads) g.modal_heads.push_back(zero_layer(h));
        return g;
    }
};

namespace detail {

inline void add_into(FeatureMatrix& acc, const FeatureMatrix& inc) {
    for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += inc.data[i];
}

inline void add_into(std::vector<double>& acc, const std::vector<double>& inc) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += inc[i];
}

inline void add_into(NetGradients& acc, const NetGradients& inc) {
    for (std::size_t s = 0; s < acc.streams.size(); ++s) {
        add_into(acc.streams[s].l1.w, inc.streams[s].l1.w);
        add_into(acc.streams[s].l1.b, inc.streams[s].l1.b);
        add_into(acc.streams[s].l2.w, inc.streams[s].l2.w);
        add_into(acc.streams[s].l2.b, inc.streams[s].l2.b);
    }
    add_into(acc.head_hidden.w, inc.head_hidden.w);
    add_into(acc.head_hidden.b, inc.head_hidden.b);
    add_into(acc.head_out.w, inc.head_out.w);
    add_into(acc.head_out.b, inc.head_out.b);
    for (std::size_t s = 0; s < acc.modal_heads.size(); ++s) {
        add_into(acc.modal_heads[s].w, inc.modal_heads[s].w);
        add_into(acc.modal_heads[s].b, inc.modal_heads[s].b);
    }
}

/// Backprop from a gradient on a2 down through one stream.
inline void stream_backward(const TwoStreamNet::Stream& stream, const StreamCache& cache,
                            const FeatureMatrix& grad_a2, TwoStreamNet::Stream& grads) {
    FeatureMatrix grad_z2 = grad_a2;
    for (std::size_t i = 0; i < grad_z2.data.size(); ++i)
        if (cache.z2.data[i] <= 0.0) grad_z2.data[i] = 0.0;
    add_into(grads.l2.w, linalg::matmul_at_b(cache.a1, grad_z2));
    add_into(grads.l2.b, linalg::column_sums(grad_z2));

    FeatureMatrix grad_a1 = linalg::matmul_a_bt(grad_z2, stream.l2.w);
    for (std::size_t i = 0; i < grad_a1.data.size(); ++i)
        if (cache.z1.data[i] <= 0.0) grad_a1.data[i] = 0.0;
    add_into(grads.l1.w, linalg::matmul_at_b(cache.input, grad_a1));
    add_into(grads.l1.b, linalg::column_sums(grad_a1));
}

}  // namespace detail

/// Head backward shared by the ID and outlier branches: accumulates the two
/// head layers' gradients and returns the gradient on the fused input.
inline FeatureMatrix head_backward(const TwoStreamNet& net, const HeadCache& cache,
                                   const FeatureMatrix& grad_logits, NetGradients& grads) {
    detail::add_into(grads.head_out.w, linalg::matmul_at_b(cache.ha, grad_logits));
    detail::add_into(grads.head_out.b, linalg::column_sums(grad_logits));
    FeatureMatrix grad_ha = linalg::matmul_a_bt(grad_logits, net.head_out.w);
    for (std::size_t i = 0; i < grad_ha.data.size(); ++i)
        if (cache.hz.data[i] <= 0.0) grad_ha.data[i] = 0.0;
    detail::add_into(grads.head_hidden.w, linalg::matmul_at_b(cache.input, grad_ha));
    detail::add_into(grads.head_hidden.b, linalg::column_sums(grad_ha));
    return linalg::matmul_a_bt(grad_ha, net.head_hidden.w);
}

/// Backward pass for the ID branch: gradients on the fused logits and
/// (optionally) the modal logits propagate into every parameter. An extra
/// per-stream gradient on the penultimate features may be supplied (the
/// outlier branch delivers its feature gradient that way).
inline NetGradients backward(const TwoStreamNet& net, const ForwardResult& cache,
                             const FeatureMatrix& grad_fused_logits,
                             const std::vector<FeatureMatrix>* grad_modal_logits = nullptr,
                             const std::vector<FeatureMatrix>* extra_grad_feats = nullptr) {
    if (cache.net != &net || cache.net_version != net.version)
        throw std::logic_error("backward: cache is stale for this net");
    if (!grad_fused_logits.same_shape(cache.fused_logits))
        throw std::invalid_argument("backward: fused gradient shape mismatch");

    NetGradients grads = NetGradients::zeros_like(net);
    const FeatureMatrix grad_fused_input =
        head_backward(net, cache.head_cache, grad_fused_logits, grads);

    std::size_t offset = 0;
    for (std::size_t s = 0; s < net.streams.size(); ++s) {
        const std::size_t width = cache.caches[s].a2.n_cols;
        FeatureMatrix grad_a2(cache.caches[s].a2.n_rows, width, 0.0);
        for (std::size_t r = 0; r < grad_a2.n_rows; ++r) {
            const auto src = grad_fused_input.row(r);
            auto dst = grad_a2.row(r);
            for (std::size_t c = 0; c < width; ++c) dst[c] = src[offset + c];
        }
        offset += width;

        if (grad_modal_logits && s < grad_modal_logits->size() &&
            (*grad_modal_logits)[s].n_rows > 0) {
            const FeatureMatrix& gm = (*grad_modal_logits)[s];
            if (net.modal_heads.size() <= s)
                throw std::invalid_argument("backward: modal gradient without modal head");
            detail::add_into(grads.modal_heads[s].w,
                             linalg::matmul_at_b(cache.caches[s].a2, gm));
            detail::add_into(grads.modal_heads[s].b, linalg::column_sums(gm));
            detail::add_into(grad_a2, linalg::matmul_a_bt(gm, net.modal_heads[s].w));
        }
        if (extra_grad_feats && s < extra_grad_feats->size() &&
            (*extra_grad_feats)[s].n_rows > 0)
            detail::add_into(grad_a2, (*extra_grad_feats)[s]);

        detail::stream_backward(net.streams[s], cache.caches[s], grad_a2, grads.streams[s]);
    }
    return grads;
}

inline void apply_gradients(TwoStreamNet& net, const NetGradients& grads, double step_size) {
    auto step_layer = [step_size](LinearLayer& l, const LinearLayer& g) {
        for (std::size_t i = 0; i < l.w.data.size(); ++i)
            l.w.data[i] -= step_size * g.w.data[i];
        for (std::size_t i = 0; i < l.b.size(); ++i) l.b[i] -= step_size * g.b[i];
    };
    for (std::size_t s = 0; s < net.streams.size(); ++s) {
        step_layer(net.streams[s].l1, grads.streams[s].l1);
        step_layer(net.streams[s].l2, grads.streams[s].l2);
    }
    step_layer(net.head_hidden, grads.head_hidden);
    step_layer(net.head_out, grads.head_out);
    for (std::size_t s = 0; s < net.modal_heads.size(); ++s)
        step_layer(net.modal_heads[s], grads.modal_heads[s]);
    ++net.version;
}

enum class SynthMethod { none, feature_mixing, mixup, vos, npmix };

inline SynthMethod parse_synth_method(const std::string& name) {
    if (name == "none") return SynthMethod::none;
    if (name == "feature_mixing" || name == "fm") return SynthMethod::feature_mixing;
    if (name == "mixup") return SynthMethod::mixup;
    if (name == "vos") return SynthMethod::vos;
    if (name == "npmix") return SynthMethod::npmix;
    throw std::invalid_argument("unknown synthesis method: " + name);
}

inline const char* synth_method_name(SynthMethod m) {
    switch (m) {
        case SynthMethod::none: return "none";
        case SynthMethod::feature_mixing: return "feature_mixing";
        case SynthMethod::mixup: return "mixup";
        case SynthMethod::vos: return "vos";
        case SynthMethod::npmix: return "npmix";
    }
    return "?";
}

struct TrainConfig {
    std::size_t steps = 1500;
    /// Steps at the start trained with the plain closed-set objective before
    /// the outlier branch switches on (the reference pipeline pre-trains
    /// with cross-entropy before outlier optimization).
    std::size_t pretrain_steps = 0;
    std::size_t batch_size = 256;
    double step_size = 0.05;
    SynthMethod synth_method = SynthMethod::none;
    std::size_t n_swap = 10;  // swapped dims on the penultimate features
    bool per_sample_masks = false;
    /// When false, the entropy branch updates only the fused head; the
    /// synthesized features are treated as constants (no gradient into the
    /// streams through the synthesis step).
    bool outlier_feature_grad = true;
    double mixup_alpha = 1.0;
    std::size_t vos_candidates = 512;
    double vos_keep = 0.25;
    std::size_t npmix_k = 16;
    std::pair<double, double> npmix_beta{0.5, 1.5};
    CombinedLossConfig loss;
    double focal_lambda = 2.0;
    std::uint64_t seed = 1;
};

struct TrainLogRow {
    std::size_t step = 0;
    double loss_total = 0.0;
    double loss_cls = 0.0;     // focal + Lovász in segmentation mode
    double loss_ent = 0.0;     // pre-gamma1 entropy term (negative entropy)
    double loss_xmodal = 0.0;  // pre-gamma2 cross-modal term
};

struct TrainLog {
    std::vector<TrainLogRow> rows;
};

namespace detail {

/// Routes the outlier-branch feature gradient back through the synthesis
/// step. Feature mixing is a permutation of entries, so its backward is the
/// inverse permutation; mixup and npmix are affine in their parents; vos
/// samples fresh points, so no gradient reaches the features.
struct SynthBackward {
    SynthMethod method = SynthMethod::none;
    std::vector<std::vector<std::size_t>> masks;  // feature_mixing, shared mask
    std::vector<std::vector<std::vector<std::size_t>>> row_masks;  // per-sample mode
    MixupTrace mixup;
    NpMixTrace npmix;

    std::vector<FeatureMatrix> feature_grads(const ModalitySet& feats,
                                             const ModalitySet& grad_outlier) const {
        std::vector<FeatureMatrix> grads;
        for (const auto& b : feats.blocks) grads.emplace_back(b.n_rows, b.n_cols, 0.0);
        switch (method) {
            case SynthMethod::feature_mixing: {
                // identity part first, then re-route the swapped positions
                for (std::size_t b = 0; b < grads.size(); ++b)
                    grads[b].data = grad_outlier.blocks[b].data;
                for (std::size_t b = 0; b < grads.size(); ++b) {
                    const std::size_t other = (b + 1) % grads.size();
                    for (std::size_t r = 0; r < grads[b].n_rows; ++r) {
                        const auto& sel = masks.empty() ? row_masks[r] : masks;
                        for (std::size_t p = 0; p < sel[b].size(); ++p) {
                            const std::size_t dst_col = sel[b][p];
                            const std::size_t src_col = sel[other][p];
                            const double g = grad_outlier.blocks[b].at(r, dst_col);
                            grads[b].at(r, dst_col) -= g;
                            grads[other].at(r, src_col) += g;
                        }
                    }
                }
                break;
            }
            case SynthMethod::mixup: {
                for (std::size_t b = 0; b < grads.size(); ++b)
                    for (std::size_t r = 0; r < grads[b].n_rows; ++r) {
                        const double lam = mixup.lambda[r];
                        const std::size_t partner = mixup.partner[r];
                        const auto g_out = grad_outlier.blocks[b].row(r);
                        auto g_self = grads[b].row(r);
                        auto g_partner = grads[b].row(partner);
                        for (std::size_t c = 0; c < g_out.size(); ++c) {
                            g_self[c] += lam * g_out[c];
                            g_partner[c] += (1.0 - lam) * g_out[c];
                        }
                    }
                break;
            }
            case SynthMethod::npmix: {
                for (std::size_t b = 0; b < grads.size(); ++b)
                    for (std::size_t r = 0; r < grads[b].n_rows; ++r) {
                        const double beta = npmix.beta[r];
                        const std::size_t nn = npmix.neighbor_index[r];
                        const auto g_out = grad_outlier.blocks[b].row(r);
                        auto g_self = grads[b].row(r);
                        auto g_nn = grads[b].row(nn);
                        for (std::size_t c = 0; c < g_out.size(); ++c) {
                            g_self[c] += (1.0 - beta) * g_out[c];
                            g_nn[c] += beta * g_out[c];
                        }
                    }
                break;
            }
            case SynthMethod::vos:
            case SynthMethod::none:
                for (auto& g : grads) g = FeatureMatrix(0, 0);
                break;
        }
        return grads;
    }
};

}  // namespace detail

struct TrainResult {
    TrainLog log;
};

/// One training run: per step, classification/segmentation losses on an ID
/// batch, plus (when enabled) entropy maximization on outliers synthesized
/// from the batch's penultimate stream features and pushed through the
/// fused head only. Constant-step gradient descent on the total.
inline TrainResult train(TwoStreamNet& net, const LabeledFeatureSet& data,
                         const TrainConfig& cfg) {
    validate_labeled(data);
    for (const auto flag : data.is_ood)
        if (flag)
            throw std::invalid_argument("train: training data must not contain OOD rows");
    if (cfg.steps < 1) throw std::invalid_argument("train: steps must be >= 1");
    if (!(cfg.step_size > 0.0))
        throw std::invalid_argument("train: step_size must be positive");
    if (static_cast<std::size_t>(data.n_id_classes) != net.n_classes)
        throw std::invalid_argument("train: class count does not match the net");

    const std::size_t n = data.n_rows();
    const std::size_t batch = std::min(cfg.batch_size, n);
    RandomSource root(cfg.seed);
    RandomSource batch_rng = root.split("batches");
    RandomSource synth_rng = root.split("synthesis");

    const bool cross_modal = cfg.loss.cross_modal != CrossModalMode::none;
    if (cross_modal && net.modal_heads.empty())
        throw std::invalid_argument("train: cross-modal loss needs per-modality heads");

    TrainResult result;
    result.log.rows.reserve(cfg.steps);

    ModalitySet batch_feats;
    for (const auto& b : data.features.blocks)
        batch_feats.blocks.emplace_back(batch, b.n_cols);
    std::vector<std::int32_t> batch_labels(batch);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto idx = batch_rng.sample_indices(n, batch);
        for (std::size_t i = 0; i < batch; ++i) {
            batch_labels[i] = data.labels[idx[i]];
            for (std::size_t b = 0; b < batch_feats.blocks.size(); ++b) {
                const auto src = data.features.blocks[b].row(idx[i]);
                std::copy(src.begin(), src.end(), batch_feats.blocks[b].row(i).begin());
            }
        }

        const ForwardResult fwd = forward(net, batch_feats);

        // ID objective on the fused logits
        LossParts parts;
        if (cfg.loss.mode == TaskMode::segmentation) {
            parts.foc = focal_loss(fwd.fused_logits, batch_labels, {}, cfg.focal_lambda);
            parts.lov = lovasz_softmax(softmax(fwd.fused_logits), batch_labels);
        } else {
            parts.cls = cross_entropy(fwd.fused_logits, batch_labels);
        }
        CombinedLossConfig id_cfg = cfg.loss;
        id_cfg.gamma1 = 0.0;  // the entropy branch runs on different rows
        id_cfg.cross_modal = CrossModalMode::none;
        LossValue id_loss = combined_loss(parts, id_cfg);
        FeatureMatrix grad_fused = id_loss.grad_logits;

        // cross-modal branch on the per-modality heads
        double xmodal_value = 0.0;
        std::vector<FeatureMatrix> grad_modal;
        if (cross_modal) {
            grad_modal.resize(net.modal_heads.size());
            const ProbMatrix pc = softmax(fwd.modal_logits[0]);
            const ProbMatrix pl = softmax(fwd.modal_logits[1]);
            CrossModalLossValue xm;
            if (cfg.loss.cross_modal == CrossModalMode::a2d) {
                xm = a2d_loss(pc, pl, batch_labels);
            } else {
                xm = xmuda_loss(pc, pl, softmax(fwd.fused_logits));
                for (std::size_t i = 0; i < grad_fused.data.size(); ++i)
                    grad_fused.data[i] += cfg.loss.gamma2 * xm.grad_logits_fused.data[i];
            }
            xmodal_value = xm.value;
            // heads are anchored by plain cross-entropy
            const LossValue ce_c = cross_entropy(fwd.modal_logits[0], batch_labels);
            const LossValue ce_l = cross_entropy(fwd.modal_logits[1], batch_labels);
            grad_modal[0] = ce_c.grad_logits;
            grad_modal[1] = ce_l.grad_logits;
            for (std::size_t i = 0; i < grad_modal[0].data.size(); ++i) {
                grad_modal[0].data[i] += cfg.loss.gamma2 * xm.grad_logits_c.data[i];
                grad_modal[1].data[i] += cfg.loss.gamma2 * xm.grad_logits_l.data[i];
            }
        }

        // outlier branch: synthesize from penultimate features, score with
        // the fused head only, maximize prediction entropy
        double ent_value = 0.0;
        NetGradients grads;
        const bool outlier_branch =
            cfg.synth_method != SynthMethod::none && step >= cfg.pretrain_steps;
        if (outlier_branch) {
            detail::SynthBackward synth_bw;
            synth_bw.method = cfg.synth_method;
            SynthesisResult synth;
            RandomSource step_rng = synth_rng.split(step);
            switch (cfg.synth_method) {
                case SynthMethod::feature_mixing: {
                    MixingConfig mix{.n_swap = cfg.n_swap,
                                     .per_sample_masks = cfg.per_sample_masks,
                                     .record_row_masks = cfg.per_sample_masks,
                                     .rng = step_rng};
                    synth = feature_mixing(fwd.stream_feats, mix);
                    synth_bw.masks = synth.masks_used;
                    synth_bw.row_masks = synth.row_masks;
                    break;
                }
                case SynthMethod::mixup:
                    synth = mixup_synth(fwd.stream_feats, cfg.mixup_alpha, step_rng, {},
                                        &synth_bw.mixup);
                    break;
                case SynthMethod::vos: {
                    LabeledFeatureSet feats;
                    feats.features = fwd.stream_feats;
                    feats.labels = batch_labels;
                    feats.is_ood.assign(batch, 0);
                    feats.n_id_classes = static_cast<std::int32_t>(net.n_classes);
                    synth = vos_synth(feats, cfg.vos_candidates, cfg.vos_keep, step_rng);
                    break;
                }
                case SynthMethod::npmix: {
                    LabeledFeatureSet feats;
                    feats.features = fwd.stream_feats;
                    feats.labels = batch_labels;
                    feats.is_ood.assign(batch, 0);
                    feats.n_id_classes = static_cast<std::int32_t>(net.n_classes);
                    synth = npmix_synth(feats, cfg.npmix_k, cfg.npmix_beta, step_rng,
                                        &synth_bw.npmix);
                    break;
                }
                case SynthMethod::none: break;
            }

            HeadCache outlier_cache;
            const LogitMatrix outlier_logits =
                head_forward(net, concat(synth.outliers), &outlier_cache);
            const LossValue ent = entropy_max_loss(outlier_logits);
            ent_value = ent.value;

            FeatureMatrix grad_out_logits = ent.grad_logits;
            for (auto& v : grad_out_logits.data) v *= cfg.loss.gamma1;

            grads = NetGradients::zeros_like(net);
            const FeatureMatrix grad_outlier_input =
                head_backward(net, outlier_cache, grad_out_logits, grads);

            // gradient on the outlier features, mapped back through synthesis
            std::vector<FeatureMatrix> feat_grads;
            if (cfg.outlier_feature_grad) {
                ModalitySet grad_outlier = split_like(grad_outlier_input, synth.outliers);
                feat_grads = synth_bw.feature_grads(fwd.stream_feats, grad_outlier);
            }

            const NetGradients id_grads =
                backward(net, fwd, grad_fused, cross_modal ? &grad_modal : nullptr,
                         cfg.outlier_feature_grad ? &feat_grads : nullptr);
            detail::add_into(grads, id_grads);
        } else {
            grads = backward(net, fwd, grad_fused, cross_modal ? &grad_modal : nullptr);
        }

        TrainLogRow row;
        row.step = step;
        row.loss_cls = id_loss.value;
        row.loss_ent = ent_value;
        row.loss_xmodal = xmodal_value;
        row.loss_total =
            id_loss.value + cfg.loss.gamma1 * ent_value + cfg.loss.gamma2 * xmodal_value;
        result.log.rows.push_back(row);

        apply_gradients(net, grads, cfg.step_size);
    }
    return result;
}

}  // namespace fmix
