#include <gtest/gtest.h>

#include "mdsgen/masking.hpp"

using namespace mds;

TEST(MakeMask, RatioZeroMasksNothing) {
    Rng rng(1);
    TokenGrid g{8, 32};
    for (auto s : {MaskStrategy::TAM, MaskStrategy::SAM, MaskStrategy::FAM}) {
        auto m = make_mask(g, s, 0.0f, rng);
        EXPECT_EQ(m.masked_count(), 0);
    }
}

TEST(MakeMask, RatioOutOfRangeThrows) {
    Rng rng(1);
    TokenGrid g{8, 32};
    EXPECT_THROW(make_mask(g, MaskStrategy::TAM, 1.0f, rng), ConfigError);
    EXPECT_THROW(make_mask(g, MaskStrategy::TAM, -0.1f, rng), ConfigError);
}

TEST(MakeMask, QuantizationRuleOnFullGrid) {
    Rng rng(2);
    TokenGrid g{8, 32};
    // round-half-up: TAM masks round(0.3*32)=10 columns -> 80 tokens
    auto tam = make_mask(g, MaskStrategy::TAM, 0.3f, rng);
    EXPECT_EQ(tam.masked_count(), 80);
    EXPECT_EQ(tam.visible_count(), 176);
    // SAM masks round(0.3*256)=77 tokens
    auto sam = make_mask(g, MaskStrategy::SAM, 0.3f, rng);
    EXPECT_EQ(sam.masked_count(), 77);
}

TEST(MakeMask, PropertySuiteOverRandomDraws) {
    // acceptance-grade property sweep: structure + exact counts
    Rng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
        TokenGrid g{1 + (int)rng.randint(12), 1 + (int)rng.randint(40)};
        float ratio = (float)rng.uniform(0.0, 0.999);
        MaskStrategy s = trial % 3 == 0   ? MaskStrategy::TAM
                         : trial % 3 == 1 ? MaskStrategy::SAM
                                          : MaskStrategy::FAM;
        auto m = make_mask(g, s, ratio, rng);
        auto quant = [](float r, int units) {
            int n = (int)std::floor((double)r * units + 0.5);
            return std::min(std::max(n, 0), units - 1);
        };
        if (s == MaskStrategy::TAM) {
            EXPECT_EQ(m.masked_count(), quant(ratio, g.cols) * g.rows);
            EXPECT_EQ(m.masked_count() % g.rows, 0);
            for (int c = 0; c < g.cols; ++c) {
                int cnt = 0;
                for (int r = 0; r < g.rows; ++r) cnt += m.masked(r, c);
                EXPECT_TRUE(cnt == 0 || cnt == g.rows) << "partial column";
            }
        } else if (s == MaskStrategy::FAM) {
            EXPECT_EQ(m.masked_count(), quant(ratio, g.rows) * g.cols);
            EXPECT_EQ(m.masked_count() % g.cols, 0);
            for (int r = 0; r < g.rows; ++r) {
                int cnt = 0;
                for (int c = 0; c < g.cols; ++c) cnt += m.masked(r, c);
                EXPECT_TRUE(cnt == 0 || cnt == g.cols) << "partial row";
            }
        } else {
            EXPECT_EQ(m.masked_count(), quant(ratio, g.total()));
        }
        EXPECT_GE(m.visible_count(), 1);  // at least one token stays visible
    }
}

TEST(MakeMask, ColumnMarginalsUniform) {
    Rng rng(5);
    TokenGrid g{8, 32};
    std::vector<int> hits(32, 0);
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        auto m = make_mask(g, MaskStrategy::TAM, 0.3f, rng);
        for (int c = 0; c < 32; ++c) hits[c] += m.masked(0, c);
    }
    for (int c = 0; c < 32; ++c)
        EXPECT_NEAR(hits[c] / (double)draws, 10.0 / 32.0, 0.02) << "column " << c;
}

TEST(GatherScatter, ZeroRatioIsIdentity) {
    Rng rng(7);
    TokenGrid g{2, 4};
    auto m = make_mask(g, MaskStrategy::SAM, 0.0f, rng);
    auto x = Tensor::randn({8, 3}, rng);
    std::vector<int> idx;
    auto vis = gather_visible(x, m, idx);
    ASSERT_EQ(vis->shape[0], 8);
    for (size_t i = 0; i < x->numel(); ++i) EXPECT_EQ(vis->data[i], x->data[i]);
    auto mt = Tensor::randn({1, 3}, rng);
    auto back = scatter_full(vis, m, mt);
    for (size_t i = 0; i < x->numel(); ++i) EXPECT_EQ(back->data[i], x->data[i]);
}

TEST(GatherScatter, ExplicitSmallCase) {
    // 4 tokens, mask {1,3} -> visible {0,2} in order
    TokenMask m;
    m.grid = {1, 4};
    m.mask = {0, 1, 0, 1};
    auto x = Tensor::from_data({4, 2}, {0, 1, 10, 11, 20, 21, 30, 31});
    std::vector<int> idx;
    auto vis = gather_visible(x, m, idx);
    ASSERT_EQ(vis->shape[0], 2);
    EXPECT_EQ(idx, (std::vector<int>{0, 2}));
    EXPECT_FLOAT_EQ(vis->data[0], 0);
    EXPECT_FLOAT_EQ(vis->data[2], 20);
    auto mt = Tensor::from_data({1, 2}, {-5, -6});
    auto full = scatter_full(vis, m, mt);
    EXPECT_FLOAT_EQ(full->data[0 * 2 + 0], 0);
    EXPECT_FLOAT_EQ(full->data[1 * 2 + 0], -5);
    EXPECT_FLOAT_EQ(full->data[1 * 2 + 1], -6);
    EXPECT_FLOAT_EQ(full->data[2 * 2 + 0], 20);
    EXPECT_FLOAT_EQ(full->data[3 * 2 + 1], -6);
}

TEST(GatherScatter, AllButOneMasked) {
    TokenMask m;
    m.grid = {1, 4};
    m.mask = {1, 1, 0, 1};
    auto x = Tensor::from_data({1, 2}, {7, 8});
    auto mt = Tensor::from_data({1, 2}, {1, 2});
    auto full = scatter_full(x, m, mt);
    for (int r = 0; r < 4; ++r) {
        if (r == 2) {
            EXPECT_FLOAT_EQ(full->data[r * 2 + 0], 7);
        } else {
            EXPECT_FLOAT_EQ(full->data[r * 2 + 0], 1);
            EXPECT_FLOAT_EQ(full->data[r * 2 + 1], 2);
        }
    }
}

TEST(GatherScatter, RoundTripLosslessAtVisiblePositions) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        TokenGrid g{1 + (int)rng.randint(8), 1 + (int)rng.randint(16)};
        MaskStrategy s = trial % 3 == 0   ? MaskStrategy::TAM
                         : trial % 3 == 1 ? MaskStrategy::SAM
                                          : MaskStrategy::FAM;
        auto m = make_mask(g, s, (float)rng.uniform(0.0, 0.9), rng);
        auto x = Tensor::randn({g.total(), 5}, rng);
        auto mt = Tensor::randn({1, 5}, rng);
        std::vector<int> idx;
        auto full = scatter_full(gather_visible(x, m, idx), m, mt);
        for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c) {
                int tok = r * g.cols + c;
                for (int j = 0; j < 5; ++j) {
                    float want = m.masked(r, c) ? mt->data[j] : x->data[(size_t)tok * 5 + j];
                    EXPECT_EQ(full->data[(size_t)tok * 5 + j], want);
                }
            }
    }
}

TEST(GatherScatter, TamMaskedColumnsCarryMaskToken) {
    Rng rng(13);
    TokenGrid g{8, 32};
    auto m = make_mask(g, MaskStrategy::TAM, 0.3f, rng);
    auto x = Tensor::randn({g.total(), 4}, rng);
    auto mt = Tensor::randn({1, 4}, rng);
    std::vector<int> idx;
    auto full = scatter_full(gather_visible(x, m, idx), m, mt);
    int masked_cols = 0;
    for (int c = 0; c < 32; ++c) {
        if (!m.masked(0, c)) continue;
        ++masked_cols;
        for (int r = 0; r < 8; ++r)
            for (int j = 0; j < 4; ++j)
                EXPECT_EQ(full->data[(size_t)(r * 32 + c) * 4 + j], mt->data[j]);
    }
    EXPECT_EQ(masked_cols, 10);
}

TEST(GatherScatter, ShapeMismatchThrows) {
    Rng rng(17);
    TokenGrid g{2, 4};
    auto m = make_mask(g, MaskStrategy::SAM, 0.5f, rng);
    auto wrong = Tensor::randn({5, 3}, rng);
    std::vector<int> idx;
    EXPECT_THROW(gather_visible(wrong, m, idx), ShapeError);
    auto badvis = Tensor::randn({m.visible_count() + 1, 3}, rng);
    auto mt = Tensor::randn({1, 3}, rng);
    EXPECT_THROW(scatter_full(badvis, m, mt), ShapeError);
}
