#include <gtest/gtest.h>

#include "mdsgen/diffusion.hpp"

using namespace mds;

namespace {

ModelConfig nano() { return ModelConfig::preset("Nano"); }

void warm_up(ModelParams& p, Rng& rng) {
    for (auto& b : p.blocks) {
        for (auto& v : b.ada_w->data) v = 0.05f * (float)rng.normal();
        for (auto& v : b.ada_b->data) v = 0.05f * (float)rng.normal();
    }
    for (auto& v : p.final_ada_w->data) v = 0.05f * (float)rng.normal();
    for (auto& v : p.final_w->data) v = 0.05f * (float)rng.normal();
}

}  // namespace

TEST(Schedule, IdentityAndMonotonicity) {
    auto s = NoiseSchedule::linear();
    EXPECT_EQ(s.T, 1000);
    EXPECT_DOUBLE_EQ(s.alpha_bar[0], 1.0);
    EXPECT_NEAR(s.beta[1], 1e-4, 1e-12);
    EXPECT_NEAR(s.beta[1000], 2e-2, 1e-12);
    for (int t = 1; t <= s.T; ++t) {
        double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
        EXPECT_NEAR(a * a + b * b, 1.0, 1e-6) << "t=" << t;
        EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]) << "t=" << t;
    }
    EXPECT_THROW(NoiseSchedule::linear(0), ConfigError);
    EXPECT_THROW(NoiseSchedule::linear(10, 2e-2, 1e-4), ConfigError);
}

TEST(QSample, ClosedFormAndRangeErrors) {
    auto s = NoiseSchedule::linear();
    Rng rng(1);
    auto x0 = Tensor::randn({2, 4, 4}, rng);
    auto zero = Tensor::create({2, 4, 4});
    // eps = 0 -> scaled x0 exactly by the closed form
    for (int t : {1, 500, 1000}) {
        auto xt = q_sample(x0, t, zero, s);
        float a = (float)std::sqrt(s.alpha_bar[t]);
        for (size_t i = 0; i < x0->numel(); ++i)
            EXPECT_FLOAT_EQ(xt->data[i], a * x0->data[i]);
    }
    // x0 = 0 -> scaled eps
    auto eps = Tensor::randn({2, 4, 4}, rng);
    auto xt = q_sample(zero, 700, eps, s);
    float b = (float)std::sqrt(1.0 - s.alpha_bar[700]);
    for (size_t i = 0; i < eps->numel(); ++i) EXPECT_FLOAT_EQ(xt->data[i], b * eps->data[i]);
    EXPECT_THROW(q_sample(x0, 0, zero, s), ValueError);
    EXPECT_THROW(q_sample(x0, 1001, zero, s), ValueError);
    EXPECT_THROW(q_sample(x0, 5, Tensor::randn({2, 4, 5}, rng), s), ShapeError);
}

TEST(QSample, MonteCarloMoments) {
    auto s = NoiseSchedule::linear();
    int t = 600;
    double x0v = 0.8;
    auto x0 = Tensor::from_data({1, 1, 1}, {(float)x0v});
    Rng rng(2);
    const int n = 10000;
    double sum = 0, sum2 = 0;
    for (int i = 0; i < n; ++i) {
        auto eps = Tensor::randn({1, 1, 1}, rng);
        double v = q_sample(x0, t, eps, s)->data[0];
        sum += v;
        sum2 += v * v;
    }
    double mean = sum / n, var = sum2 / n - mean * mean;
    double want_mean = std::sqrt(s.alpha_bar[t]) * x0v;
    double want_var = 1.0 - s.alpha_bar[t];
    EXPECT_NEAR(mean, want_mean, 3.0 * std::sqrt(want_var / n));
    EXPECT_NEAR(var, want_var, 0.05 * want_var);
}

TEST(Guidance, WeightScheduleAnalytics) {
    GuidanceConfig g;  // w_max 5, alpha 0.01, 25 steps
    // derived value of the declared formula at the first step
    EXPECT_NEAR(guidance_weight(0, 25, g), 1.0 + 4.0 * std::pow(1.0 / 25.0, 0.01), 1e-6);
    EXPECT_NEAR(guidance_weight(0, 25, g), 4.874, 1e-3);
    EXPECT_FLOAT_EQ(guidance_weight(24, 25, g), 5.0f);  // boundary: w_max exactly
    for (int i = 1; i < 25; ++i)
        EXPECT_GE(guidance_weight(i, 25, g), guidance_weight(i - 1, 25, g));
    GuidanceConfig flat = g;
    flat.w_max = 1.0f;
    for (int i = 0; i < 25; ++i) EXPECT_FLOAT_EQ(guidance_weight(i, 25, flat), 1.0f);
    EXPECT_THROW(guidance_weight(-1, 25, g), ConfigError);
    EXPECT_THROW(guidance_weight(25, 25, g), ConfigError);
    GuidanceConfig bad = g;
    bad.w_max = 0.5f;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = g;
    bad.cond_dropout = 1.0f;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Guidance, CfgPredictContracts) {
    Rng rng(3);
    auto p = ModelParams::init(nano(), rng);
    warm_up(p, rng);
    NoGradGuard ng;
    auto x = Tensor::randn({4, 8, 32}, rng);
    auto cond = Tensor::randn({1, 64}, rng);
    auto zero = Tensor::create({1, 64});
    auto ec = forward_full(x, cond, 400, p);
    auto eu = forward_full(x, zero, 400, p);
    // w = 1: bit-exact conditional
    auto w1 = cfg_predict(x, cond, 400, 1.0f, p);
    for (size_t i = 0; i < ec->numel(); ++i) EXPECT_EQ(w1->data[i], ec->data[i]);
    // w = 0: bit-exact unconditional
    auto w0 = cfg_predict(x, cond, 400, 0.0f, p);
    for (size_t i = 0; i < eu->numel(); ++i) EXPECT_EQ(w0->data[i], eu->data[i]);
    // general w: linear extrapolation
    auto w3 = cfg_predict(x, cond, 400, 3.0f, p);
    for (size_t i = 0; i < ec->numel(); ++i)
        EXPECT_FLOAT_EQ(w3->data[i], eu->data[i] + 3.0f * (ec->data[i] - eu->data[i]));
    EXPECT_THROW(cfg_predict(x, cond, 400, -0.5f, p), ConfigError);
}

TEST(Guidance, EqualBranchesMakeWeightIrrelevant) {
    // zero-init model: both branches output zero, so any w gives zero
    Rng rng(4);
    auto p = ModelParams::init(nano(), rng);
    NoGradGuard ng;
    auto x = Tensor::randn({4, 8, 32}, rng);
    auto cond = Tensor::randn({1, 64}, rng);
    for (float w : {0.0f, 1.0f, 5.0f}) {
        auto out = cfg_predict(x, cond, 10, w, p);
        for (float v : out->data) EXPECT_EQ(v, 0.0f);
    }
}

TEST(Sampler, DdimTimestepsUniformStride) {
    auto ts = ddim_timesteps(1000, 25);
    ASSERT_EQ(ts.size(), 25u);
    for (int i = 0; i < 25; ++i) EXPECT_EQ(ts[i], 40 * (i + 1));
    auto full = ddim_timesteps(50, 50);
    for (int i = 0; i < 50; ++i) EXPECT_EQ(full[i], i + 1);
    EXPECT_THROW(ddim_timesteps(10, 11), ConfigError);
    EXPECT_THROW(ddim_timesteps(10, 0), ConfigError);
}

TEST(Sampler, DdimSameSeedBitIdentical) {
    Rng rng(5);
    auto p = ModelParams::init(nano(), rng);
    warm_up(p, rng);
    auto sched = NoiseSchedule::linear();
    auto cond = Tensor::randn({1, 64}, rng);
    GuidanceConfig g;
    Rng a(42), b(42);
    auto x1 = sample(cond, g, p, sched, a);
    auto x2 = sample(cond, g, p, sched, b);
    EXPECT_EQ(x1->shape, (std::vector<int>{4, 8, 32}));
    for (size_t i = 0; i < x1->numel(); ++i) EXPECT_EQ(x1->data[i], x2->data[i]);
    // different seed differs
    Rng c(43);
    auto x3 = sample(cond, g, p, sched, c);
    double d = 0;
    for (size_t i = 0; i < x1->numel(); ++i) d += std::abs((double)x1->data[i] - x3->data[i]);
    EXPECT_GT(d, 1e-3);
}

TEST(Sampler, DdpmRunsAndDiffersAcrossSeeds) {
    Rng rng(6);
    auto p = ModelParams::init(nano(), rng);
    warm_up(p, rng);
    auto sched = NoiseSchedule::linear(50);  // short chain keeps the test fast
    auto cond = Tensor::randn({1, 64}, rng);
    GuidanceConfig g;
    g.ddim = false;
    Rng a(7), b(7), c(8);
    auto x1 = sample(cond, g, p, sched, a);
    auto x2 = sample(cond, g, p, sched, b);
    for (size_t i = 0; i < x1->numel(); ++i) EXPECT_EQ(x1->data[i], x2->data[i]);
    auto x3 = sample(cond, g, p, sched, c);
    double d = 0;
    for (size_t i = 0; i < x1->numel(); ++i) d += std::abs((double)x1->data[i] - x3->data[i]);
    EXPECT_GT(d, 1e-3);
}

TEST(Sampler, DdimMatchesDdpmMeanPathInOneDim) {
    // 1-D check with the exact-noise predictor for a known x0: both update
    // rules recover x0, so their endpoints agree far below the 1e-4 band
    auto s = NoiseSchedule::linear();
    double x0 = 0.7, epsT = 1.1;
    auto eps_exact = [&](double x, int t) {
        return (x - std::sqrt(s.alpha_bar[t]) * x0) / std::sqrt(1.0 - s.alpha_bar[t]);
    };
    double xT = std::sqrt(s.alpha_bar[s.T]) * x0 + std::sqrt(1.0 - s.alpha_bar[s.T]) * epsT;
    double xd = xT, xp = xT;
    for (int t = s.T; t >= 1; --t) {
        auto dc = ddim_coeffs(s, t, t - 1);
        xd = dc.c0 * xd + dc.c1 * eps_exact(xd, t);
        auto pc = ddpm_coeffs(s, t);
        xp = pc.mean_x * (xp - pc.mean_eps * eps_exact(xp, t));  // mean path: no noise
    }
    EXPECT_NEAR(xd, x0, 1e-8);
    EXPECT_NEAR(xp, x0, 1e-8);
    EXPECT_NEAR(xd, xp, 1e-4);
    EXPECT_NEAR(ddpm_coeffs(s, 1).sigma, 0.0, 0.0);  // final step adds no noise
}

TEST(Eq1, GroundTruthEpsilonStubGivesZeroLoss) {
    // the spec'd stub check through the exact loss math train_step uses
    auto sched = NoiseSchedule::linear();
    Rng rng(8);
    auto x0 = Tensor::randn({4, 8, 32}, rng);
    auto eps = Tensor::randn({4, 8, 32}, rng);
    auto cond = Tensor::randn({1, 64}, rng);
    Rng mrng(9);
    auto m = make_mask({4, 16}, MaskStrategy::TAM, 0.3f, mrng);
    PredictFn stub = [&](const TensorPtr&, const TensorPtr&, int, const TokenMask*) {
        return eps;
    };
    auto terms = eq1_terms(stub, x0, cond, 500, eps, &m, sched);
    double total = terms.loss_full->item() + terms.loss_masked->item();
    EXPECT_LT(total, 1e-10);
}

TEST(Eq1, LambdaZeroReducesToFullBranchExactly) {
    Rng rng(10);
    auto st = TrainState::init(nano(), Rng(11));
    std::vector<TrainSample> batch;
    for (int i = 0; i < 3; ++i)
        batch.push_back({Tensor::randn({4, 8, 32}, rng), Tensor::randn({1, 64}, rng)});
    auto lb = train_step(st, batch, {MaskStrategy::TAM, 0.3f}, 0.0f);
    EXPECT_EQ(lb.total, lb.loss_full);
    EXPECT_EQ(lb.loss_masked, 0.0);
    // strategy none behaves identically
    auto lb2 = train_step(st, batch, {MaskStrategy::None, 0.3f}, 1.0f);
    EXPECT_EQ(lb2.total, lb2.loss_full);
}

TEST(Eq1, FreshModelLossNearUnitNoiseEnergy) {
    // zero-output model: E||eps - 0||^2 = 1 per element in expectation
    Rng rng(12);
    auto st = TrainState::init(nano(), Rng(13));
    std::vector<TrainSample> batch;
    for (int i = 0; i < 8; ++i)
        batch.push_back({Tensor::randn({4, 8, 32}, rng), Tensor::randn({1, 64}, rng)});
    auto lb = train_step(st, batch, {MaskStrategy::TAM, 0.3f}, 1.0f);
    EXPECT_NEAR(lb.loss_full, 1.0, 0.15);
    EXPECT_NEAR(lb.loss_masked, 1.0, 0.15);
    EXPECT_EQ(st.step, 1);
    EXPECT_TRUE(std::isfinite(lb.total));
    EXPECT_THROW(train_step(st, {}, {MaskStrategy::TAM, 0.3f}, 1.0f), ConfigError);
}

TEST(Ema, InitCopyAndFrozenEquality) {
    Rng rng(14);
    std::vector<TensorPtr> params{Tensor::randn({3, 4}, rng, 1.0f, true),
                                  Tensor::randn({5}, rng, 1.0f, true)};
    Ema ema;
    ema.init(params, 0.999f);
    for (size_t i = 0; i < params.size(); ++i) EXPECT_EQ(ema.shadow[i]->data, params[i]->data);
    // frozen parameters: any number of updates keeps ema == params bit-exact
    for (int s = 0; s < 50; ++s) ema.update(params);
    for (size_t i = 0; i < params.size(); ++i) EXPECT_EQ(ema.shadow[i]->data, params[i]->data);
    // moving parameters: shadow tracks with the stated recurrence
    float before = ema.shadow[0]->data[0];
    params[0]->data[0] += 1.0f;
    ema.update(params);
    EXPECT_FLOAT_EQ(ema.shadow[0]->data[0],
                    before + (1.0f - 0.999f) * (params[0]->data[0] - before));
}

TEST(Dropout, FrequencyMatchesConfiguredProbability) {
    Rng rng(15);
    const int n = 10000;
    int dropped = 0;
    for (int i = 0; i < n; ++i) dropped += rng.uniform() < 0.1;
    EXPECT_NEAR(dropped / (double)n, 0.1, 0.01);
}

TEST(Training, ShortRunLossTrendsDown) {
    Rng rng(16);
    auto st = TrainState::init(nano(), Rng(17), 5e-4f, 0.99f);
    // tiny fixed dataset so a short run shows movement
    std::vector<TrainSample> pool;
    for (int i = 0; i < 4; ++i)
        pool.push_back({Tensor::randn({4, 8, 32}, rng), Tensor::randn({1, 64}, rng)});
    double first = 0, last = 0;
    const int steps = 40;
    for (int s = 0; s < steps; ++s) {
        std::vector<TrainSample> batch{pool[s % pool.size()]};
        auto lb = train_step(st, batch, {MaskStrategy::TAM, 0.3f}, 1.0f);
        if (s < 5) first += lb.total;
        if (s >= steps - 5) last += lb.total;
    }
    EXPECT_LT(last, first);
    EXPECT_EQ(st.step, steps);
}
