#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "avfuse/fusion.hpp"
#include "avfuse/gradcheck.hpp"

using namespace avfuse;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (double& v : m.data) v = rng.normal();
    return m;
}

UtterancePair random_pair(Rng& rng) {
    UtterancePair p;
    p.speaker_id = "s";
    p.utterance_id_audio = p.utterance_id_visual = "u";
    p.audio_emb.resize(kAudioDim);
    p.visual_emb.resize(kVisualDim);
    for (double& v : p.audio_emb) v = rng.normal();
    for (double& v : p.visual_emb) v = rng.normal();
    return p;
}

std::vector<GradCheckBlock> afn_blocks(AfnParams& params, const AfnParams& grads) {
    return {
        {"audio_fc1_w", &params.audio.fc1.weight, &grads.audio.fc1.weight},
        {"audio_fc1_b", &params.audio.fc1.bias, &grads.audio.fc1.bias},
        {"audio_bn_gamma", &params.audio.bn.gamma, &grads.audio.bn.gamma},
        {"audio_bn_beta", &params.audio.bn.beta, &grads.audio.bn.beta},
        {"audio_fc2_w", &params.audio.fc2.weight, &grads.audio.fc2.weight},
        {"audio_fc2_b", &params.audio.fc2.bias, &grads.audio.fc2.bias},
        {"visual_fc1_w", &params.visual.fc1.weight, &grads.visual.fc1.weight},
        {"visual_fc1_b", &params.visual.fc1.bias, &grads.visual.fc1.bias},
        {"visual_bn_gamma", &params.visual.bn.gamma, &grads.visual.bn.gamma},
        {"visual_bn_beta", &params.visual.bn.beta, &grads.visual.bn.beta},
        {"visual_fc2_w", &params.visual.fc2.weight, &grads.visual.fc2.weight},
        {"visual_fc2_b", &params.visual.fc2.bias, &grads.visual.fc2.bias},
        {"attention_w", &params.attention.weight, &grads.attention.weight},
        {"attention_b", &params.attention.bias, &grads.attention.bias},
    };
}

}  // namespace

TEST_CASE("transform_modality handles an absent modality without NaN") {
    Rng rng(1);
    TransformStack stack(kAudioDim);
    stack.init(rng);  // biases start at zero
    const std::vector<double> zero(kAudioDim, 0.0);
    const auto out = transform_modality(stack, zero, Mode::Eval);
    REQUIRE(out.size() == kTransformDim);
    for (double v : out) CHECK(std::isfinite(v));
}

TEST_CASE("transform_modality eval mode is deterministic") {
    Rng rng(2);
    TransformStack stack(kVisualDim);
    stack.init(rng);
    std::vector<double> emb(kVisualDim);
    for (double& v : emb) v = rng.normal();
    const auto a = transform_modality(stack, emb, Mode::Eval);
    const auto b = transform_modality(stack, emb, Mode::Eval);
    CHECK(a == b);
}

TEST_CASE("attention_weights matches softmax-of-affine oracle") {
    Rng rng(3);
    DenseLayer att(2, kFusedDim);

    std::vector<double> ea(kTransformDim), ev(kTransformDim);
    for (double& v : ea) v = rng.normal();
    for (double& v : ev) v = rng.normal();

    SECTION("zero layer gives equal weights") {
        const auto w = attention_weights(att, ea, ev);
        CHECK(w[0] == Catch::Approx(0.5));
        CHECK(w[1] == Catch::Approx(0.5));
    }

    SECTION("saturated bias") {
        att.bias(0, 0) = 20.0;
        att.bias(0, 1) = -20.0;
        const auto w = attention_weights(att, ea, ev);
        CHECK(w[0] == Catch::Approx(1.0).margin(1e-12));
        CHECK(w[1] == Catch::Approx(0.0).margin(1e-12));
    }

    SECTION("random parameters against the direct formula") {
        att.init_kaiming_uniform(rng);
        for (double& v : att.bias.data) v = rng.normal();
        const auto w = attention_weights(att, ea, ev);
        double logits[2];
        for (int o = 0; o < 2; ++o) {
            logits[o] = att.bias(0, o);
            for (std::size_t i = 0; i < kTransformDim; ++i) {
                logits[o] += att.weight(o, i) * ea[i];
                logits[o] += att.weight(o, kTransformDim + i) * ev[i];
            }
        }
        const double z = std::exp(logits[0]) + std::exp(logits[1]);
        CHECK(w[0] == Catch::Approx(std::exp(logits[0]) / z));
        CHECK(w[1] == Catch::Approx(std::exp(logits[1]) / z));
        CHECK(w[0] + w[1] == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("fused embeddings are unit norm with weights summing to one") {
    Rng rng(4);
    AfnParams params = AfnParams::make(rng);
    for (int trial = 0; trial < 10; ++trial) {
        const UtterancePair pair = random_pair(rng);
        const FusedEmbedding e = fuse_forward(params, pair);
        CHECK(norm2(e.vector) == Catch::Approx(1.0).margin(1e-6));
        CHECK(e.attention_weights[0] > 0.0);
        CHECK(e.attention_weights[1] > 0.0);
        CHECK(e.attention_weights[0] + e.attention_weights[1] ==
              Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("hard-saturated attention zeroes the gated half exactly") {
    Rng rng(5);
    AfnParams params = AfnParams::make(rng);
    // Logit gap of 1600 underflows the visual weight to exactly zero.
    params.attention.bias(0, 0) = 800.0;
    params.attention.bias(0, 1) = -800.0;

    const UtterancePair pair = random_pair(rng);
    auto [audio, visual] = batch_inputs(Batch{1, 1, {pair}, {std::nullopt}, {0}});
    FusionCache cache;
    fuse_batch_forward(params, audio, visual, Mode::Eval, false, &cache);
    CHECK(cache.attention_weights(0, 1) == 0.0);
    for (std::size_t i = kTransformDim; i < kFusedDim; ++i) CHECK(cache.gated(0, i) == 0.0);

    // Chain-rule limit: no gradient reaches the visual transform.
    Matrix upstream = random_matrix(1, kFusedDim, rng);
    const AfnParams grads = fuse_batch_backward(params, cache, upstream);
    for (double v : grads.visual.fc1.weight.data) CHECK(v == 0.0);
    for (double v : grads.visual.fc2.weight.data) CHECK(v == 0.0);
    for (double v : grads.visual.bn.gamma.data) CHECK(v == 0.0);
}

TEST_CASE("input scale is absorbed by the mandatory input normalization") {
    Rng rng(6);
    AfnParams params = AfnParams::make(rng);
    UtterancePair pair = random_pair(rng);
    const FusedEmbedding base = fuse_forward(params, pair);

    UtterancePair scaled = pair;
    for (double& v : scaled.audio_emb) v *= 4.0;  // power of two: exact
    for (double& v : scaled.visual_emb) v *= 4.0;
    const FusedEmbedding same = fuse_forward(params, scaled);
    CHECK(same.vector == base.vector);

    UtterancePair scaled3 = pair;
    for (double& v : scaled3.audio_emb) v *= 3.0;
    for (double& v : scaled3.visual_emb) v *= 3.0;
    const FusedEmbedding close3 = fuse_forward(params, scaled3);
    for (std::size_t i = 0; i < kFusedDim; ++i)
        CHECK(close3.vector[i] == Catch::Approx(base.vector[i]).margin(1e-12));
}

TEST_CASE("zero upstream yields zero parameter gradients") {
    Rng rng(7);
    AfnParams params = AfnParams::make(rng);
    Matrix audio = random_matrix(4, kAudioDim, rng);
    Matrix visual = random_matrix(4, kVisualDim, rng);
    FusionCache cache;
    fuse_batch_forward(params, audio, visual, Mode::Train, false, &cache);
    const AfnParams grads = fuse_batch_backward(params, cache, Matrix(4, kFusedDim, 0.0));
    AfnParams reference;
    const auto blocks = afn_blocks(reference, grads);
    for (const auto& b : blocks)
        for (double v : b.analytic->data) CHECK(v == 0.0);
}

TEST_CASE("fusion backward passes finite differences in train mode") {
    Rng rng(8);
    AfnParams params = AfnParams::make(rng);
    // Nonzero biases and attention weights exercise every gradient path.
    for (double& v : params.audio.fc1.bias.data) v = 0.05 * rng.normal();
    for (double& v : params.visual.fc1.bias.data) v = 0.05 * rng.normal();
    for (double& v : params.attention.weight.data) v = 0.02 * rng.normal();

    Matrix audio = random_matrix(6, kAudioDim, rng);
    Matrix visual = random_matrix(6, kVisualDim, rng);
    const Matrix readout = random_matrix(6, kFusedDim, rng);

    auto forward = [&]() {
        const Matrix fused = fuse_batch_forward(params, audio, visual, Mode::Train, false);
        double s = 0.0;
        for (std::size_t i = 0; i < fused.size(); ++i) s += fused.data[i] * readout.data[i];
        return s;
    };
    FusionCache cache;
    fuse_batch_forward(params, audio, visual, Mode::Train, false, &cache);
    const AfnParams grads = fuse_batch_backward(params, cache, readout);

    GradCheckOptions opts;
    opts.max_coords_per_block = 40;
    opts.sample_seed = 99;
    const auto report = grad_check(forward, afn_blocks(params, grads), opts);
    INFO("worst block: " << report.worst_block);
    CHECK(report.max_rel_error < 1e-4);
}
