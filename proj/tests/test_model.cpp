#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fmix/datagen.hpp"
#include "fmix/metrics.hpp"
#include "fmix/model.hpp"

using namespace fmix;

namespace {

NetConfig tiny_config(bool modal_heads = false) {
    NetConfig cfg;
    cfg.streams = {StreamLayout{3, 5, 4}, StreamLayout{2, 4, 3}};
    cfg.n_classes = 3;
    cfg.modal_heads = modal_heads;
    return cfg;
}

ModalitySet random_inputs(std::size_t rows, const NetConfig& cfg, RandomSource& rng) {
    ModalitySet ms;
    for (const auto& s : cfg.streams) {
        FeatureMatrix b(rows, s.input_width);
        for (auto& v : b.data) v = rng.normal();
        ms.blocks.push_back(std::move(b));
    }
    return ms;
}

/// Zero-init biases can park a rectifier input exactly on its kink (a fully
/// gated hidden row gives z2 == b2 == 0), where two-sided differences and
/// the subgradient legitimately disagree. Randomize biases before
/// finite-difference checks.
void randomize_biases(TwoStreamNet& net, RandomSource rng) {
    auto jitter = [&](std::vector<double>& b) {
        for (auto& v : b) v = 0.1 * rng.normal();
    };
    for (auto& s : net.streams) {
        jitter(s.l1.b);
        jitter(s.l2.b);
    }
    jitter(net.head_hidden.b);
    jitter(net.head_out.b);
    for (auto& h : net.modal_heads) jitter(h.b);
}

std::vector<double*> parameter_view(TwoStreamNet& net) {
    std::vector<double*> out;
    auto add_layer = [&](LinearLayer& l) {
        for (auto& v : l.w.data) out.push_back(&v);
        for (auto& v : l.b) out.push_back(&v);
    };
    for (auto& s : net.streams) {
        add_layer(s.l1);
        add_layer(s.l2);
    }
    add_layer(net.head_hidden);
    add_layer(net.head_out);
    for (auto& h : net.modal_heads) add_layer(h);
    return out;
}

std::vector<double> gradient_view(const NetGradients& grads) {
    std::vector<double> out;
    auto add_layer = [&](const LinearLayer& l) {
        out.insert(out.end(), l.w.data.begin(), l.w.data.end());
        out.insert(out.end(), l.b.begin(), l.b.end());
    };
    for (const auto& s : grads.streams) {
        add_layer(s.l1);
        add_layer(s.l2);
    }
    add_layer(grads.head_hidden);
    add_layer(grads.head_out);
    for (const auto& h : grads.modal_heads) add_layer(h);
    return out;
}

}  // namespace

TEST_CASE("forward with zero weights gives zero logits") {
    const NetConfig cfg = tiny_config();
    TwoStreamNet net = init_net(cfg, RandomSource(1));
    for (auto& s : net.streams) {
        std::fill(s.l1.w.data.begin(), s.l1.w.data.end(), 0.0);
        std::fill(s.l2.w.data.begin(), s.l2.w.data.end(), 0.0);
    }
    std::fill(net.head_hidden.w.data.begin(), net.head_hidden.w.data.end(), 0.0);
    std::fill(net.head_out.w.data.begin(), net.head_out.w.data.end(), 0.0);

    RandomSource rng(2);
    const ModalitySet ms = random_inputs(4, cfg, rng);
    const ForwardResult res = forward(net, ms);
    for (const double v : res.fused_logits.data) CHECK(v == 0.0);
}

TEST_CASE("doubling the fused head doubles the fused logits") {
    const NetConfig cfg = tiny_config();
    TwoStreamNet net = init_net(cfg, RandomSource(3));
    RandomSource rng(4);
    const ModalitySet ms = random_inputs(4, cfg, rng);
    const ForwardResult before = forward(net, ms);

    for (auto& v : net.head_out.w.data) v *= 2.0;
    for (auto& v : net.head_out.b) v *= 2.0;
    const ForwardResult after = forward(net, ms);
    for (std::size_t i = 0; i < before.fused_logits.data.size(); ++i)
        CHECK(after.fused_logits.data[i] ==
              Catch::Approx(2.0 * before.fused_logits.data[i]).margin(1e-12));
}

TEST_CASE("forward is deterministic") {
    const NetConfig cfg = tiny_config(true);
    const TwoStreamNet net = init_net(cfg, RandomSource(5));
    RandomSource rng(6);
    const ModalitySet ms = random_inputs(8, cfg, rng);
    const ForwardResult a = forward(net, ms);
    const ForwardResult b = forward(net, ms);
    CHECK(a.fused_logits.data == b.fused_logits.data);
    REQUIRE(a.modal_logits.size() == 2);
    CHECK(a.modal_logits[0].data == b.modal_logits[0].data);
    CHECK(concat(a.stream_feats).data == concat(b.stream_feats).data);
}

TEST_CASE("forward rejects mismatched widths") {
    const NetConfig cfg = tiny_config();
    const TwoStreamNet net = init_net(cfg, RandomSource(7));
    ModalitySet ms;
    ms.blocks.emplace_back(2, 3, 0.1);
    ms.blocks.emplace_back(2, 5, 0.1);  // stream 1 expects width 2
    CHECK_THROWS_AS(forward(net, ms), std::invalid_argument);
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
    const NetConfig cfg = tiny_config(true);
    const TwoStreamNet net = init_net(cfg, RandomSource(8));
    RandomSource rng(9);
    const ModalitySet ms = random_inputs(4, cfg, rng);
    const ForwardResult fwd = forward(net, ms);
    const FeatureMatrix zero(fwd.fused_logits.n_rows, fwd.fused_logits.n_cols, 0.0);
    const NetGradients grads = backward(net, fwd, zero);
    for (const double g : gradient_view(grads)) CHECK(g == 0.0);
}

TEST_CASE("backward rejects a stale cache") {
    const NetConfig cfg = tiny_config();
    TwoStreamNet net = init_net(cfg, RandomSource(10));
    RandomSource rng(11);
    const ModalitySet ms = random_inputs(4, cfg, rng);
    const ForwardResult fwd = forward(net, ms);
    const FeatureMatrix g(fwd.fused_logits.n_rows, fwd.fused_logits.n_cols, 0.1);
    apply_gradients(net, NetGradients::zeros_like(net), 0.0);  // bumps the version
    CHECK_THROWS_AS(backward(net, fwd, g), std::logic_error);
}

TEST_CASE("network backward matches finite differences") {
    const NetConfig cfg = tiny_config(true);
    TwoStreamNet net = init_net(cfg, RandomSource(12));
    randomize_biases(net, RandomSource(120));
    RandomSource rng(13);
    const ModalitySet ms = random_inputs(5, cfg, rng);
    std::vector<std::int32_t> labels(5);
    for (auto& y : labels) y = static_cast<std::int32_t>(rng.next_below(cfg.n_classes));

    // objective: CE on fused + CE on both modal heads + xmuda consistency
    auto objective = [&](const TwoStreamNet& n) {
        const ForwardResult f = forward(n, ms);
        double v = cross_entropy(f.fused_logits, labels).value;
        v += cross_entropy(f.modal_logits[0], labels).value;
        v += cross_entropy(f.modal_logits[1], labels).value;
        v += 0.5 * xmuda_loss(softmax(f.modal_logits[0]), softmax(f.modal_logits[1]),
                              softmax(f.fused_logits))
                       .value;
        return v;
    };

    const ForwardResult fwd = forward(net, ms);
    const LossValue ce = cross_entropy(fwd.fused_logits, labels);
    const auto xm = xmuda_loss(softmax(fwd.modal_logits[0]), softmax(fwd.modal_logits[1]),
                               softmax(fwd.fused_logits));
    FeatureMatrix grad_fused = ce.grad_logits;
    for (std::size_t i = 0; i < grad_fused.data.size(); ++i)
        grad_fused.data[i] += 0.5 * xm.grad_logits_fused.data[i];
    std::vector<FeatureMatrix> grad_modal(2);
    grad_modal[0] = cross_entropy(fwd.modal_logits[0], labels).grad_logits;
    grad_modal[1] = cross_entropy(fwd.modal_logits[1], labels).grad_logits;
    for (std::size_t i = 0; i < grad_modal[0].data.size(); ++i) {
        grad_modal[0].data[i] += 0.5 * xm.grad_logits_c.data[i];
        grad_modal[1].data[i] += 0.5 * xm.grad_logits_l.data[i];
    }
    const NetGradients grads = backward(net, fwd, grad_fused, &grad_modal);
    const std::vector<double> flat = gradient_view(grads);

    const auto params = parameter_view(net);
    REQUIRE(params.size() == flat.size());
    const double h = 1e-5;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double orig = *params[i];
        *params[i] = orig + h;
        const double up = objective(net);
        *params[i] = orig - h;
        const double down = objective(net);
        *params[i] = orig;
        const double fd = (up - down) / (2.0 * h);
        const double denom = std::max(1.0, std::abs(flat[i]));
        INFO("param " << i << " fd=" << fd << " analytic=" << flat[i]);
        CHECK(std::abs(fd - flat[i]) / denom <= 1e-4);
    }
}

TEST_CASE("full step gradient including the outlier branch matches finite differences") {
    const NetConfig cfg = tiny_config();
    TwoStreamNet net = init_net(cfg, RandomSource(14));
    randomize_biases(net, RandomSource(140));
    RandomSource rng(15);
    const ModalitySet ms = random_inputs(6, cfg, rng);
    std::vector<std::int32_t> labels(6);
    for (auto& y : labels) y = static_cast<std::int32_t>(rng.next_below(cfg.n_classes));

    // fixed masks so the objective is a deterministic function of the params
    const std::vector<std::vector<std::size_t>> masks{{0, 2}, {1, 0}};
    const double gamma1 = 3.0;

    auto objective = [&](const TwoStreamNet& n) {
        const ForwardResult f = forward(n, ms);
        const double id_part = cross_entropy(f.fused_logits, labels).value;
        const SynthesisResult synth = feature_mixing_masked(f.stream_feats, masks);
        const LogitMatrix outlier_logits = head_forward(n, concat(synth.outliers));
        return id_part + gamma1 * entropy_max_loss(outlier_logits).value;
    };

    const ForwardResult fwd = forward(net, ms);
    const LossValue id_loss = cross_entropy(fwd.fused_logits, labels);
    const SynthesisResult synth = feature_mixing_masked(fwd.stream_feats, masks);
    HeadCache outlier_cache;
    const LogitMatrix outlier_logits =
        head_forward(net, concat(synth.outliers), &outlier_cache);
    const LossValue ent = entropy_max_loss(outlier_logits);

    FeatureMatrix grad_out_logits = ent.grad_logits;
    for (auto& v : grad_out_logits.data) v *= gamma1;

    NetGradients total = NetGradients::zeros_like(net);
    const FeatureMatrix grad_outlier_input =
        head_backward(net, outlier_cache, grad_out_logits, total);
    const ModalitySet grad_outlier = split_like(grad_outlier_input, synth.outliers);

    detail::SynthBackward synth_bw;
    synth_bw.method = SynthMethod::feature_mixing;
    synth_bw.masks = masks;
    const auto feat_grads = synth_bw.feature_grads(fwd.stream_feats, grad_outlier);

    const NetGradients id_grads =
        backward(net, fwd, id_loss.grad_logits, nullptr, &feat_grads);
    for (std::size_t s = 0; s < net.streams.size(); ++s) {
        detail::add_into(total.streams[s].l1.w, id_grads.streams[s].l1.w);
        detail::add_into(total.streams[s].l1.b, id_grads.streams[s].l1.b);
        detail::add_into(total.streams[s].l2.w, id_grads.streams[s].l2.w);
        detail::add_into(total.streams[s].l2.b, id_grads.streams[s].l2.b);
    }
    detail::add_into(total.head_hidden.w, id_grads.head_hidden.w);
    detail::add_into(total.head_hidden.b, id_grads.head_hidden.b);
    detail::add_into(total.head_out.w, id_grads.head_out.w);
    detail::add_into(total.head_out.b, id_grads.head_out.b);

    const std::vector<double> flat = gradient_view(total);
    const auto params = parameter_view(net);
    REQUIRE(params.size() == flat.size());
    const double h = 1e-5;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double orig = *params[i];
        *params[i] = orig + h;
        const double up = objective(net);
        *params[i] = orig - h;
        const double down = objective(net);
        *params[i] = orig;
        const double fd = (up - down) / (2.0 * h);
        const double denom = std::max(1.0, std::abs(flat[i]));
        INFO("param " << i << " fd=" << fd << " analytic=" << flat[i]);
        CHECK(std::abs(fd - flat[i]) / denom <= 1e-4);
    }
}

TEST_CASE("batch gradient is the sum of per-sample gradients") {
    const NetConfig cfg = tiny_config();
    TwoStreamNet net = init_net(cfg, RandomSource(16));
    RandomSource rng(17);
    const ModalitySet ms = random_inputs(3, cfg, rng);
    std::vector<std::int32_t> labels{0, 2, 1};

    // sum (not mean) of per-row CE so the decomposition is exact
    const ForwardResult fwd = forward(net, ms);
    LossValue ce = cross_entropy(fwd.fused_logits, labels);
    for (auto& v : ce.grad_logits.data) v *= 3.0;
    const auto full = gradient_view(backward(net, fwd, ce.grad_logits));

    std::vector<double> summed(full.size(), 0.0);
    for (std::size_t r = 0; r < 3; ++r) {
        ModalitySet one;
        for (const auto& b : ms.blocks) {
            FeatureMatrix m(1, b.n_cols);
            std::copy(b.row(r).begin(), b.row(r).end(), m.row(0).begin());
            one.blocks.push_back(std::move(m));
        }
        const std::vector<std::int32_t> y{labels[r]};
        const ForwardResult f = forward(net, one);
        const LossValue part = cross_entropy(f.fused_logits, y);
        const auto g = gradient_view(backward(net, f, part.grad_logits));
        for (std::size_t i = 0; i < g.size(); ++i) summed[i] += g[i];
    }
    for (std::size_t i = 0; i < full.size(); ++i)
        CHECK(full[i] == Catch::Approx(summed[i]).margin(1e-10));
}

namespace {

GeneratedData separable_data(std::uint64_t seed = 42) {
    GeneratorSpec spec;
    spec.n_id_classes = 4;
    spec.n_ood_classes = 1;
    spec.dim_per_modality = {8, 8};
    spec.class_mean_scale = 10.0;
    spec.within_class_std = 1.0;
    spec.samples_per_class = 200;
    spec.seed = seed;
    return generate(spec);
}

}  // namespace

TEST_CASE("training reaches high accuracy on a separable problem") {
    const GeneratedData data = separable_data();

    NetConfig net_cfg;
    net_cfg.streams = {StreamLayout{8, 32, 8}, StreamLayout{8, 32, 8}};
    net_cfg.n_classes = 4;
    TwoStreamNet net = init_net(net_cfg, RandomSource(100));

    TrainConfig cfg;
    cfg.steps = 2000;
    cfg.batch_size = 64;
    cfg.step_size = 0.05;
    cfg.loss.mode = TaskMode::detection;
    cfg.seed = 7;
    train(net, data.train, cfg);

    const ForwardResult fwd = forward(net, data.train.features);
    CHECK(id_accuracy(fwd.fused_logits, data.train.labels) >= 0.95);
}

TEST_CASE("training is bit-reproducible and refuses OOD rows") {
    const GeneratedData data = separable_data(43);

    NetConfig net_cfg;
    net_cfg.streams = {StreamLayout{8, 16, 6}, StreamLayout{8, 16, 6}};
    net_cfg.n_classes = 4;

    TrainConfig cfg;
    cfg.steps = 50;
    cfg.batch_size = 32;
    cfg.synth_method = SynthMethod::feature_mixing;
    cfg.n_swap = 3;
    cfg.loss.gamma1 = 3.0;
    cfg.seed = 9;

    TwoStreamNet a = init_net(net_cfg, RandomSource(1));
    TwoStreamNet b = init_net(net_cfg, RandomSource(1));
    const TrainResult ra = train(a, data.train, cfg);
    const TrainResult rb = train(b, data.train, cfg);
    CHECK(a.head_out.w.data == b.head_out.w.data);
    CHECK(a.head_hidden.w.data == b.head_hidden.w.data);
    CHECK(a.streams[0].l1.w.data == b.streams[0].l1.w.data);
    REQUIRE(ra.log.rows.size() == rb.log.rows.size());
    for (std::size_t i = 0; i < ra.log.rows.size(); ++i)
        CHECK(ra.log.rows[i].loss_total == rb.log.rows[i].loss_total);

    TwoStreamNet c = init_net(net_cfg, RandomSource(1));
    CHECK_THROWS_AS(train(c, data.test, cfg), std::invalid_argument);
}

TEST_CASE("entropy optimization raises outlier entropy over training") {
    const GeneratedData data = separable_data(44);

    NetConfig net_cfg;
    net_cfg.streams = {StreamLayout{8, 32, 8}, StreamLayout{8, 32, 8}};
    net_cfg.n_classes = 4;
    TwoStreamNet net = init_net(net_cfg, RandomSource(5));

    TrainConfig cfg;
    cfg.steps = 800;
    cfg.batch_size = 64;
    cfg.synth_method = SynthMethod::feature_mixing;
    cfg.n_swap = 4;
    cfg.loss.gamma1 = 3.0;
    cfg.seed = 11;
    const TrainResult res = train(net, data.train, cfg);

    // loss_ent is the negative entropy of the outlier branch
    const double first_entropy = -res.log.rows.front().loss_ent;
    const double last_entropy = -res.log.rows.back().loss_ent;
    CHECK(last_entropy > first_entropy);
}

TEST_CASE("outlier branch leaves label-anchored heads untouched") {
    const GeneratedData data = separable_data(45);

    NetConfig net_cfg;
    net_cfg.streams = {StreamLayout{8, 16, 6}, StreamLayout{8, 16, 6}};
    net_cfg.n_classes = 4;
    net_cfg.modal_heads = true;
    TwoStreamNet net = init_net(net_cfg, RandomSource(2));
    const auto heads_before = net.modal_heads;

    TrainConfig cfg;
    cfg.steps = 20;
    cfg.batch_size = 32;
    cfg.synth_method = SynthMethod::feature_mixing;
    cfg.n_swap = 3;
    cfg.loss.gamma1 = 3.0;
    cfg.loss.cross_modal = CrossModalMode::none;  // no label-side use of the heads
    cfg.seed = 3;
    train(net, data.train, cfg);

    // entropy gradients flow through streams and the fused head only
    for (std::size_t s = 0; s < net.modal_heads.size(); ++s) {
        CHECK(net.modal_heads[s].w.data == heads_before[s].w.data);
        CHECK(net.modal_heads[s].b == heads_before[s].b);
    }
}

TEST_CASE("cross-modal training modes run and log the extra term") {
    const GeneratedData data = separable_data(46);

    NetConfig net_cfg;
    net_cfg.streams = {StreamLayout{8, 16, 6}, StreamLayout{8, 16, 6}};
    net_cfg.n_classes = 4;
    net_cfg.modal_heads = true;

    for (const auto mode : {CrossModalMode::a2d, CrossModalMode::xmuda}) {
        TwoStreamNet net = init_net(net_cfg, RandomSource(4));
        TrainConfig cfg;
        cfg.steps = 30;
        cfg.batch_size = 32;
        cfg.synth_method = SynthMethod::feature_mixing;
        cfg.n_swap = 2;
        cfg.loss.gamma1 = 3.0;
        cfg.loss.gamma2 = mode == CrossModalMode::a2d ? 1.0 : 0.5;
        cfg.loss.cross_modal = mode;
        cfg.seed = 13;
        const TrainResult res = train(net, data.train, cfg);
        bool any_xmodal = false;
        for (const auto& row : res.log.rows)
            if (row.loss_xmodal != 0.0) any_xmodal = true;
        CHECK(any_xmodal);
    }
}

TEST_CASE("segmentation-mode training runs with focal and Lovász terms") {
    const GeneratedData data = separable_data(47);

    NetConfig net_cfg;
    net_cfg.streams = {StreamLayout{8, 16, 6}, StreamLayout{8, 16, 6}};
    net_cfg.n_classes = 4;
    TwoStreamNet net = init_net(net_cfg, RandomSource(6));

    TrainConfig cfg;
    cfg.steps = 300;
    cfg.batch_size = 64;
    cfg.loss.mode = TaskMode::segmentation;
    cfg.synth_method = SynthMethod::feature_mixing;
    cfg.n_swap = 3;
    cfg.loss.gamma1 = 3.0;
    cfg.seed = 17;
    const TrainResult res = train(net, data.train, cfg);
    CHECK(res.log.rows.back().loss_cls < res.log.rows.front().loss_cls);

    const ForwardResult fwd = forward(net, data.train.features);
    CHECK(id_accuracy(fwd.fused_logits, data.train.labels) >= 0.9);
}
