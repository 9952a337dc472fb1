#include <gtest/gtest.h>

#include "mdsgen/model.hpp"

using namespace mds;

namespace {

ModelConfig nano() { return ModelConfig::preset("Nano"); }

// random nonzero modulation so blocks are not identities
void warm_up(ModelParams& p, Rng& rng) {
    auto bump = [&](const TensorPtr& t, float s) {
        for (auto& v : t->data) v = s * (float)rng.normal();
    };
    for (auto& b : p.blocks) {
        bump(b.ada_w, 0.05f);
        bump(b.ada_b, 0.05f);
    }
    bump(p.side.ada_w, 0.05f);
    bump(p.side.ada_b, 0.05f);
    bump(p.final_ada_w, 0.05f);
    bump(p.final_w, 0.05f);
    bump(p.final_b, 0.05f);
}

}  // namespace

TEST(Patchify, ExplicitSmallCase) {
    // C=1, F=2, T=4, p=2 -> 2 tokens of 4 elems in (pi, pj) order
    auto z = Tensor::from_data({1, 2, 4}, {0, 1, 2, 3, 10, 11, 12, 13});
    auto t = patchify(z, 2);
    ASSERT_EQ(t->shape, (std::vector<int>{2, 4}));
    EXPECT_FLOAT_EQ(t->data[0], 0);
    EXPECT_FLOAT_EQ(t->data[1], 1);
    EXPECT_FLOAT_EQ(t->data[2], 10);
    EXPECT_FLOAT_EQ(t->data[3], 11);
    EXPECT_FLOAT_EQ(t->data[4], 2);
    EXPECT_FLOAT_EQ(t->data[5], 3);
    EXPECT_FLOAT_EQ(t->data[6], 12);
    EXPECT_FLOAT_EQ(t->data[7], 13);
}

TEST(Patchify, RoundTripBitExactOverRandomShapes) {
    Rng rng(1);
    for (int trial = 0; trial < 30; ++trial) {
        int p = 1 + (int)rng.randint(3);
        int c = 1 + (int)rng.randint(4);
        int f = p * (1 + (int)rng.randint(6));
        int t = p * (1 + (int)rng.randint(6));
        auto z = Tensor::randn({c, f, t}, rng);
        auto tok = patchify(z, p);
        ASSERT_EQ(tok->shape, (std::vector<int>{(f / p) * (t / p), p * p * c}));
        auto back = unpatchify(tok, c, f, t, p);
        for (size_t i = 0; i < z->numel(); ++i) EXPECT_EQ(back->data[i], z->data[i]);
    }
}

TEST(Patchify, FullScaleLatentShape) {
    Rng rng(2);
    auto z = Tensor::randn({4, 16, 64}, rng);
    auto tok = patchify(z, 2);
    EXPECT_EQ(tok->shape, (std::vector<int>{256, 16}));
    EXPECT_THROW(patchify(Tensor::randn({4, 15, 64}, rng), 2), ShapeError);
}

TEST(Forward, ZeroInitOutputsExactZero) {
    // final projection is zero-init, so a fresh model is the zero function
    Rng rng(3);
    auto p = ModelParams::init(nano(), rng);
    auto x = Tensor::randn({4, 8, 32}, rng);
    auto cond = Tensor::randn({1, 64}, rng);
    auto out = forward_full(x, cond, 500, p);
    ASSERT_EQ(out->shape, x->shape);
    for (float v : out->data) EXPECT_EQ(v, 0.0f);
}

TEST(Forward, ShapeAndErrorChecks) {
    Rng rng(4);
    auto p = ModelParams::init(nano(), rng);
    auto x = Tensor::randn({4, 8, 32}, rng);
    EXPECT_THROW(forward_full(Tensor::randn({4, 8, 30}, rng), nullptr, 1, p), ShapeError);
    EXPECT_THROW(forward_full(x, Tensor::randn({1, 32}, rng), 1, p), ShapeError);
    EXPECT_THROW(conditioning_vector(-1, nullptr, p), ValueError);
    auto out = forward_full(x, nullptr, 1000, p);  // null cond = pure time conditioning
    EXPECT_EQ(out->shape, x->shape);
}

TEST(Forward, CondChangesOutput) {
    Rng rng(5);
    auto p = ModelParams::init(nano(), rng);
    warm_up(p, rng);
    auto x = Tensor::randn({4, 8, 32}, rng);
    auto c1 = Tensor::randn({1, 64}, rng);
    auto c2 = Tensor::randn({1, 64}, rng);
    auto o1 = forward_full(x, c1, 300, p);
    auto o2 = forward_full(x, c2, 300, p);
    double d = 0;
    for (size_t i = 0; i < o1->numel(); ++i) d += std::abs((double)o1->data[i] - o2->data[i]);
    EXPECT_GT(d, 1e-4);
}

TEST(MaskedBranch, RatioZeroEqualsFullBitExact) {
    // zero-init side gates make the interpolator an exact identity, so the
    // masked branch with nothing masked is the full branch
    Rng rng(6);
    auto p = ModelParams::init(nano(), rng);
    // randomize everything except the side block's zero gates
    for (auto& b : p.blocks) {
        for (auto& v : b.ada_w->data) v = 0.05f * (float)rng.normal();
        for (auto& v : b.ada_b->data) v = 0.05f * (float)rng.normal();
    }
    for (auto& v : p.final_ada_w->data) v = 0.05f * (float)rng.normal();
    for (auto& v : p.final_w->data) v = 0.05f * (float)rng.normal();
    auto x = Tensor::randn({4, 8, 32}, rng);
    auto cond = Tensor::randn({1, 64}, rng);
    Rng mrng(7);
    auto m = make_mask({4, 16}, MaskStrategy::TAM, 0.0f, mrng);
    auto full = forward_full(x, cond, 123, p);
    auto masked = forward_masked(x, cond, 123, m, p);
    for (size_t i = 0; i < full->numel(); ++i) EXPECT_EQ(masked->data[i], full->data[i]);
}

TEST(MaskedBranch, FullPathIgnoresSideAndMaskToken) {
    // the branch-discard invariant at the forward level: randomizing the
    // training-only tensors cannot change the inference path
    Rng rng(8);
    auto p = ModelParams::init(nano(), rng);
    warm_up(p, rng);
    auto x = Tensor::randn({4, 8, 32}, rng);
    auto cond = Tensor::randn({1, 64}, rng);
    auto before = forward_full(x, cond, 777, p);
    Rng vandal(9);
    for (auto& [name, t] : std::map<std::string, TensorPtr>{{"mt", p.mask_token}}) {
        (void)name;
        for (auto& v : t->data) v = (float)vandal.normal();
    }
    std::map<std::string, TensorPtr> side;
    p.side.collect("side", side);
    for (auto& [name, t] : side)
        for (auto& v : t->data) v = (float)vandal.normal();
    auto after = forward_full(x, cond, 777, p);
    for (size_t i = 0; i < before->numel(); ++i) EXPECT_EQ(after->data[i], before->data[i]);
}

TEST(MaskedBranch, NonzeroRatioDiffersFromFull) {
    Rng rng(10);
    auto p = ModelParams::init(nano(), rng);
    warm_up(p, rng);
    auto x = Tensor::randn({4, 8, 32}, rng);
    auto cond = Tensor::randn({1, 64}, rng);
    Rng mrng(11);
    auto m = make_mask({4, 16}, MaskStrategy::TAM, 0.3f, mrng);
    auto full = forward_full(x, cond, 400, p);
    auto masked = forward_masked(x, cond, 400, m, p);
    double d = 0;
    for (size_t i = 0; i < full->numel(); ++i)
        d += std::abs((double)full->data[i] - masked->data[i]);
    EXPECT_GT(d, 1e-4);
    // grid mismatch guard
    Rng mrng2(12);
    auto bad = make_mask({8, 8}, MaskStrategy::SAM, 0.3f, mrng2);
    EXPECT_THROW(forward_masked(x, cond, 400, bad, p), ShapeError);
}

TEST(MaskedBranch, MaskTokenAndSideReceiveGradients) {
    Rng rng(13);
    auto p = ModelParams::init(nano(), rng);
    warm_up(p, rng);
    auto x = Tensor::randn({4, 8, 32}, rng);
    auto eps = Tensor::randn({4, 8, 32}, rng);
    Rng mrng(14);
    auto m = make_mask({4, 16}, MaskStrategy::TAM, 0.5f, mrng);
    for (auto& q : p.trainable()) q->zero_grad();
    backward(mse(forward_masked(x, nullptr, 100, m, p), eps));
    auto gnorm = [](const TensorPtr& t) {
        double n = 0;
        for (float g : t->grad) n += (double)g * g;
        return std::sqrt(n);
    };
    EXPECT_GT(gnorm(p.mask_token), 0.0);
    EXPECT_GT(gnorm(p.side.wq), 0.0);
    // and the full branch leaves them untouched
    for (auto& q : p.trainable()) q->zero_grad();
    backward(mse(forward_full(x, nullptr, 100, p), eps));
    EXPECT_EQ(gnorm(p.mask_token), 0.0);
    EXPECT_EQ(gnorm(p.side.wq), 0.0);
}

TEST(Forward, GradCheckFullModel) {
    // acceptance-grade: AD vs central differences across every parameter
    ModelConfig cfg = nano();
    Rng rng(15);
    auto p = ModelParams::init(cfg, rng);
    warm_up(p, rng);
    auto x = Tensor::randn({4, 8, 32}, rng);
    auto cond = Tensor::randn({1, 64}, rng);
    auto eps = Tensor::randn({4, 8, 32}, rng);
    std::vector<TensorPtr> params;
    for (auto& [k, v] : p.inference_named()) params.push_back(v);
    Rng crng(16);
    double err = grad_check([&] { return mse(forward_full(x, cond, 250, p), eps); }, params,
                            1e-3, crng, 3);
    EXPECT_LT(err, 1e-3);
}

TEST(Params, NanoAnalyticEqualsEnumeration) {
    Rng rng(17);
    auto cfg = nano();
    auto p = ModelParams::init(cfg, rng);
    EXPECT_EQ(count_params(cfg), count_params_enumerated(p));
}

TEST(Params, PublishedScaleBands) {
    // B ~ 131M, S ~ 33M, L ~ 461M published sizes
    auto b = count_params(ModelConfig::preset("B"));
    EXPECT_LT(std::abs((double)b - 131e6) / 131e6, 0.05);
    auto s = count_params(ModelConfig::preset("S"));
    EXPECT_LT(std::abs((double)s - 33e6) / 33e6, 0.05);
    auto l = count_params(ModelConfig::preset("L"));
    EXPECT_LT(std::abs((double)l - 461e6) / 461e6, 0.05);
}

TEST(Params, PresetValidation) {
    EXPECT_THROW(ModelConfig::preset("XXL"), ConfigError);
    ModelConfig c = nano();
    c.n2 = 4;  // == layers
    EXPECT_THROW(c.validate(), ConfigError);
    c = nano();
    c.hidden = 65;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(PosEmbed, RowsDistinctAndDeterministic) {
    auto cfg = nano();
    auto a = make_pos_embed(cfg);
    auto b = make_pos_embed(cfg);
    EXPECT_EQ(a->data, b->data);
    int n = cfg.total_tokens(), d = cfg.hidden;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            double dist = 0;
            for (int k = 0; k < d; ++k) {
                double diff = a->data[(size_t)i * d + k] - a->data[(size_t)j * d + k];
                dist += diff * diff;
            }
            EXPECT_GT(dist, 1e-6) << "tokens " << i << "," << j;
        }
}

TEST(Timestep, FeaturesDeterministicAndDistinct) {
    auto a = timestep_features(17);
    auto b = timestep_features(17);
    EXPECT_EQ(a->data, b->data);
    auto c = timestep_features(18);
    double d = 0;
    for (size_t i = 0; i < a->numel(); ++i) d += std::abs((double)a->data[i] - c->data[i]);
    EXPECT_GT(d, 1e-3);
}
