#pragma once

#include <vector>

#include "mdsgen/ops.hpp"

namespace mds {

enum class CombinerMode { LearnableWeight, NaiveAverage, AttentionPool };

inline CombinerMode combiner_mode_from_string(const std::string& s) {
    if (s == "learnable_weight") return CombinerMode::LearnableWeight;
    if (s == "naive_average") return CombinerMode::NaiveAverage;
    if (s == "attention_pool") return CombinerMode::AttentionPool;
    throw ConfigError("unknown combiner mode: " + s);
}

inline std::string to_string(CombinerMode m) {
    switch (m) {
        case CombinerMode::LearnableWeight: return "learnable_weight";
        case CombinerMode::NaiveAverage: return "naive_average";
        default: return "attention_pool";
    }
}

// MLP projection of per-frame features plus the frame-axis combiner.
// learnable_weight implements the 1x1 convolution over the frame axis:
// exactly L_V scalars + one bias.
struct ReducerParams {
    int feat_dim = 512;
    int hidden = 0;   // D
    int frames = 0;   // L_V
    CombinerMode mode = CombinerMode::LearnableWeight;

    TensorPtr mlp_w;       // [512, D]
    TensorPtr mlp_b;       // [D]
    TensorPtr comb_w;      // learnable: [L_V]
    TensorPtr comb_b;      // learnable: [1]
    TensorPtr pool_query;  // attention_pool: [1, D]

    static ReducerParams init(int frames, int hidden, CombinerMode mode, Rng& rng,
                              int feat_dim = 512) {
        ReducerParams p;
        p.feat_dim = feat_dim;
        p.hidden = hidden;
        p.frames = frames;
        p.mode = mode;
        float s = 1.0f / std::sqrt((float)feat_dim);
        p.mlp_w = Tensor::randn({feat_dim, hidden}, rng, s, true);
        p.mlp_b = Tensor::create({hidden}, true);
        if (mode == CombinerMode::LearnableWeight) {
            // uniform init so the combiner starts as a mean
            p.comb_w = Tensor::from_data({frames}, std::vector<float>(frames, 1.0f / frames),
                                         true);
            p.comb_b = Tensor::create({1}, true);
        } else if (mode == CombinerMode::AttentionPool) {
            p.pool_query = Tensor::randn({1, hidden}, rng, 0.02f, true);
        }
        return p;
    }

    std::vector<TensorPtr> trainable() const {
        std::vector<TensorPtr> t{mlp_w, mlp_b};
        if (mode == CombinerMode::LearnableWeight) {
            t.push_back(comb_w);
            t.push_back(comb_b);
        } else if (mode == CombinerMode::AttentionPool) {
            t.push_back(pool_query);
        }
        return t;
    }
};

// v: [L_V, 512] frame features -> 1 x D condition vector (differentiable)
inline TensorPtr reduce(const TensorPtr& v, const ReducerParams& p) {
    if (v->ndim() != 2 || v->shape[1] != p.feat_dim)
        throw ShapeError("reduce: feature dim mismatch");
    int lv = v->shape[0];
    auto h = gelu(add_rowvec(matmul(v, p.mlp_w), p.mlp_b));  // [L_V, D]
    switch (p.mode) {
        case CombinerMode::NaiveAverage: {
            auto ones = Tensor::from_data({1, lv}, std::vector<float>(lv, 1.0f / lv));
            return matmul(ones, h);
        }
        case CombinerMode::LearnableWeight: {
            if ((int)p.comb_w->numel() != lv)
                throw ShapeError("reduce: combiner weight count != frames");
            auto w = reshape(p.comb_w, {1, lv});
            auto ones = Tensor::from_data({1, p.hidden}, std::vector<float>(p.hidden, 1.0f));
            return add(matmul(w, h), matmul(reshape(p.comb_b, {1, 1}), ones));
        }
        case CombinerMode::AttentionPool: {
            float sc = 1.0f / std::sqrt((float)p.hidden);
            auto scores = softmax_lastdim(scale(matmul_nt(p.pool_query, h), sc));  // [1, L_V]
            return matmul(scores, h);
        }
    }
    throw ConfigError("reduce: bad combiner mode");
}

struct RedundancyResult {
    double mean_cosine = 0.0;
    int zero_norm_rows = 0;  // excluded from the mean
};

// mean pairwise cosine similarity over all unordered frame pairs
inline RedundancyResult redundancy_score(const TensorPtr& v) {
    if (v->ndim() != 2 || v->shape[0] < 2)
        throw ShapeError("redundancy_score: need at least 2 frames");
    int lv = v->shape[0], d = v->shape[1];
    std::vector<double> norms(lv, 0.0);
    std::vector<int> keep;
    RedundancyResult out;
    for (int i = 0; i < lv; ++i) {
        double n = 0.0;
        for (int j = 0; j < d; ++j) {
            double x = v->data[(size_t)i * d + j];
            n += x * x;
        }
        norms[i] = std::sqrt(n);
        if (norms[i] > 0.0)
            keep.push_back(i);
        else
            ++out.zero_norm_rows;
    }
    double acc = 0.0;
    size_t pairs = 0;
    for (size_t a = 0; a < keep.size(); ++a)
        for (size_t b = a + 1; b < keep.size(); ++b, ++pairs) {
            int i = keep[a], j = keep[b];
            double dot = 0.0;
            for (int k = 0; k < d; ++k)
                dot += (double)v->data[(size_t)i * d + k] * v->data[(size_t)j * d + k];
            acc += dot / (norms[i] * norms[j]);
        }
    out.mean_cosine = pairs ? acc / (double)pairs : 0.0;
    return out;
}

struct CombinerReport {
    std::vector<float> raw;      // one per frame channel
    std::vector<float> softmax;  // normalized view
};

inline CombinerReport inspect_combiner(const ReducerParams& p) {
    if (p.mode != CombinerMode::LearnableWeight)
        throw ConfigError("inspect_combiner: reducer is not in learnable_weight mode");
    CombinerReport r;
    r.raw.assign(p.comb_w->data.begin(), p.comb_w->data.end());
    float mx = r.raw[0];
    for (float w : r.raw) mx = std::max(mx, w);
    double z = 0.0;
    r.softmax.resize(r.raw.size());
    for (size_t i = 0; i < r.raw.size(); ++i) {
        r.softmax[i] = std::exp(r.raw[i] - mx);
        z += r.softmax[i];
    }
    for (auto& s : r.softmax) s = (float)(s / z);
    return r;
}

}  // namespace mds
