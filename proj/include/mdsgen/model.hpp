#pragma once

#include <map>
#include <string>
#include <vector>

#include "mdsgen/masking.hpp"
#include "mdsgen/ops.hpp"

namespace mds {

struct ModelConfig {
    int layers = 4;   // N = N1 + N2
    int hidden = 64;  // D
    int heads = 4;
    int patch = 2;
    int n2 = 1;  // decoder depth, in [1, N)
    int grid_rows = 4, grid_cols = 16;  // token grid = (F/p, T/p)
    int latent_channels = 4;
    static constexpr int kTimeFreqDim = 256;  // sinusoidal timestep embedding width

    int n1() const { return layers - n2; }
    int total_tokens() const { return grid_rows * grid_cols; }
    int token_dim() const { return patch * patch * latent_channels; }

    void validate() const {
        if (n2 < 1 || n2 >= layers) throw ConfigError("ModelConfig: N2 must be in [1, N)");
        if (hidden % heads != 0) throw ConfigError("ModelConfig: hidden not divisible by heads");
        if (layers < 2 || hidden < 1 || heads < 1 || patch < 1)
            throw ConfigError("ModelConfig: non-positive dimension");
        if (grid_rows < 1 || grid_cols < 1) throw ConfigError("ModelConfig: empty token grid");
    }

    // scalability presets; Nano is the desk-scale test preset
    static ModelConfig preset(const std::string& name) {
        ModelConfig c;
        if (name == "Nano") {
            c.layers = 4; c.hidden = 64; c.heads = 4; c.n2 = 1;
        } else if (name == "T") {
            c.layers = 12; c.hidden = 192; c.heads = 3; c.n2 = 4;
        } else if (name == "S") {
            c.layers = 12; c.hidden = 384; c.heads = 6; c.n2 = 4;
        } else if (name == "B") {
            c.layers = 12; c.hidden = 768; c.heads = 12; c.n2 = 4;
        } else if (name == "L") {
            c.layers = 24; c.hidden = 1024; c.heads = 16; c.n2 = 4;
        } else {
            throw ConfigError("unknown model preset: " + name);
        }
        // full-scale presets default to the 8x32 grid of the 4x16x64 latent
        if (name != "Nano") { c.grid_rows = 8; c.grid_cols = 32; }
        return c;
    }
};

// one adaLN-Zero transformer block
struct BlockParams {
    TensorPtr wq, bq, wk, bk, wv, bv, wo, bo;  // attention
    TensorPtr mw1, mb1, mw2, mb2;              // MLP (4x expansion)
    TensorPtr ada_w, ada_b;                    // c -> 6 modulation signals, zero-init

    static BlockParams init(int d, Rng& rng) {
        BlockParams b;
        float s = 1.0f / std::sqrt((float)d);
        auto lin = [&](int in, int out) { return Tensor::randn({in, out}, rng, 1.0f / std::sqrt((float)in), true); };
        (void)s;
        b.wq = lin(d, d); b.bq = Tensor::create({d}, true);
        b.wk = lin(d, d); b.bk = Tensor::create({d}, true);
        b.wv = lin(d, d); b.bv = Tensor::create({d}, true);
        b.wo = lin(d, d); b.bo = Tensor::create({d}, true);
        b.mw1 = lin(d, 4 * d); b.mb1 = Tensor::create({4 * d}, true);
        b.mw2 = lin(4 * d, d); b.mb2 = Tensor::create({d}, true);
        b.ada_w = Tensor::create({d, 6 * d}, true);  // zero-init (adaLN-Zero)
        b.ada_b = Tensor::create({6 * d}, true);
        return b;
    }

    void collect(const std::string& prefix, std::map<std::string, TensorPtr>& out) const {
        out[prefix + ".wq"] = wq; out[prefix + ".bq"] = bq;
        out[prefix + ".wk"] = wk; out[prefix + ".bk"] = bk;
        out[prefix + ".wv"] = wv; out[prefix + ".bv"] = bv;
        out[prefix + ".wo"] = wo; out[prefix + ".bo"] = bo;
        out[prefix + ".mw1"] = mw1; out[prefix + ".mb1"] = mb1;
        out[prefix + ".mw2"] = mw2; out[prefix + ".mb2"] = mb2;
        out[prefix + ".ada_w"] = ada_w; out[prefix + ".ada_b"] = ada_b;
    }
};

namespace model_detail {

// standard 1-D sincos table for positions 0..len-1 into dim components
inline void sincos_1d(int len, int dim, float pos_scale, std::vector<float>& out, int stride,
                      int offset) {
    int half = dim / 2;
    for (int p = 0; p < len; ++p)
        for (int i = 0; i < half; ++i) {
            double freq = std::pow(10000.0, -2.0 * i / dim);
            double a = p * pos_scale * freq;
            out[(size_t)p * stride + offset + i] = (float)std::sin(a);
            out[(size_t)p * stride + offset + half + i] = (float)std::cos(a);
        }
}

}  // namespace model_detail

// fixed 2-D sinusoidal positional table over (row, col), [total, D]
inline TensorPtr make_pos_embed(const ModelConfig& cfg) {
    int d = cfg.hidden, rows = cfg.grid_rows, cols = cfg.grid_cols;
    if (d % 4 != 0) throw ConfigError("pos embed: hidden must be divisible by 4");
    auto pe = Tensor::create({rows * cols, d});
    int half = d / 2;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            size_t row = (size_t)(r * cols + c) * d;
            for (int i = 0; i < half / 2; ++i) {
                double fr = std::pow(10000.0, -2.0 * i / half);
                pe->data[row + i] = (float)std::sin(r * fr);
                pe->data[row + half / 2 + i] = (float)std::cos(r * fr);
                pe->data[row + half + i] = (float)std::sin(c * fr);
                pe->data[row + half + half / 2 + i] = (float)std::cos(c * fr);
            }
        }
    return pe;
}

struct ModelParams {
    ModelConfig cfg;

    TensorPtr patch_w, patch_b;            // token embed: [p*p*C, D], [D]
    TensorPtr pos_embed;                   // fixed buffer [total, D]
    TensorPtr t_w1, t_b1, t_w2, t_b2;      // timestep MLP: 256 -> D -> D
    std::vector<BlockParams> blocks;       // N = N1 + N2
    BlockParams side;                      // MTANet side-interpolator (training only)
    TensorPtr mask_token;                  // [1, D], training only
    TensorPtr final_ada_w, final_ada_b;    // c -> shift/scale for final LN
    TensorPtr final_w, final_b;            // [D, p*p*C] zero-init, [p*p*C]
    TensorPtr ln_g, ln_b;                  // shared non-affine LN constants

    static ModelParams init(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        ModelParams p;
        p.cfg = cfg;
        int d = cfg.hidden, td = cfg.token_dim();
        p.patch_w = Tensor::randn({td, d}, rng, 1.0f / std::sqrt((float)td), true);
        p.patch_b = Tensor::create({d}, true);
        p.pos_embed = make_pos_embed(cfg);
        p.t_w1 = Tensor::randn({ModelConfig::kTimeFreqDim, d}, rng,
                               1.0f / std::sqrt((float)ModelConfig::kTimeFreqDim), true);
        p.t_b1 = Tensor::create({d}, true);
        p.t_w2 = Tensor::randn({d, d}, rng, 1.0f / std::sqrt((float)d), true);
        p.t_b2 = Tensor::create({d}, true);
        for (int i = 0; i < cfg.layers; ++i) p.blocks.push_back(BlockParams::init(d, rng));
        p.side = BlockParams::init(d, rng);
        p.mask_token = Tensor::randn({1, d}, rng, 0.02f, true);
        p.final_ada_w = Tensor::create({d, 2 * d}, true);  // zero-init
        p.final_ada_b = Tensor::create({2 * d}, true);
        p.final_w = Tensor::create({d, td}, true);  // zero-init
        p.final_b = Tensor::create({td}, true);
        p.ln_g = Tensor::from_data({d}, std::vector<float>(d, 1.0f));
        p.ln_b = Tensor::create({d});
        return p;
    }

    // the parameters sampling actually uses; excludes the training-only
    // side-interpolator and mask token, and the fixed positional buffer
    std::map<std::string, TensorPtr> inference_named() const {
        std::map<std::string, TensorPtr> out;
        out["patch.w"] = patch_w; out["patch.b"] = patch_b;
        out["time.w1"] = t_w1; out["time.b1"] = t_b1;
        out["time.w2"] = t_w2; out["time.b2"] = t_b2;
        for (size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect("blocks." + std::to_string(i), out);
        out["final.ada_w"] = final_ada_w; out["final.ada_b"] = final_ada_b;
        out["final.w"] = final_w; out["final.b"] = final_b;
        return out;
    }

    std::map<std::string, TensorPtr> all_named() const {
        auto out = inference_named();
        side.collect("side", out);
        out["mask_token"] = mask_token;
        return out;
    }

    std::vector<TensorPtr> trainable() const {
        std::vector<TensorPtr> t;
        for (auto& [k, v] : all_named()) t.push_back(v);
        return t;
    }
};

namespace model_detail {

// taped element permutation: out[i] = x[src[i]]
inline TensorPtr permute_elems(const TensorPtr& x, std::vector<int> shape,
                               std::shared_ptr<std::vector<size_t>> src) {
    auto out = detail::make_out(std::move(shape), {x});
    if (out->numel() != x->numel() || src->size() != x->numel())
        throw ShapeError("permute: element count mismatch");
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = x->data[(*src)[i]];
    if (PreciseMode::enabled) {
        out->ddata.resize(out->numel());
        for (size_t i = 0; i < out->numel(); ++i) out->ddata[i] = x->dval((*src)[i]);
        detail::sync_from_shadow(*out);
    }
    if (detail::taped(out))
        out->backward_fn = [x, src](Tensor& o) {
            x->ensure_grad();
            for (size_t i = 0; i < o.numel(); ++i) x->grad[(*src)[i]] += o.grad[i];
        };
    return out;
}

// index map token element (t, j) -> flat latent element
inline std::shared_ptr<std::vector<size_t>> patch_index(int c, int f, int tt, int p) {
    int gr = f / p, gc = tt / p;
    auto src = std::make_shared<std::vector<size_t>>((size_t)c * f * tt);
    size_t i = 0;
    for (int r = 0; r < gr; ++r)
        for (int col = 0; col < gc; ++col)
            for (int ci = 0; ci < c; ++ci)
                for (int pi = 0; pi < p; ++pi)
                    for (int pj = 0; pj < p; ++pj)
                        (*src)[i++] = ((size_t)ci * f + r * p + pi) * tt + col * p + pj;
    return src;
}

}  // namespace model_detail

// [C,F,T] -> [total, p*p*C] raw patch tokens; exactly invertible
inline TensorPtr patchify(const TensorPtr& z, int p) {
    if (z->ndim() != 3) throw ShapeError("patchify: expected [C,F,T]");
    int c = z->shape[0], f = z->shape[1], t = z->shape[2];
    if (f % p != 0 || t % p != 0) throw ShapeError("patchify: dims not divisible by patch");
    return model_detail::permute_elems(z, {(f / p) * (t / p), p * p * c},
                                       model_detail::patch_index(c, f, t, p));
}

inline TensorPtr unpatchify(const TensorPtr& tokens, int c, int f, int t, int p) {
    if (tokens->ndim() != 2 || tokens->shape[0] != (f / p) * (t / p) ||
        tokens->shape[1] != p * p * c)
        throw ShapeError("unpatchify: token shape inconsistent with target");
    auto fwd = model_detail::patch_index(c, f, t, p);
    auto inv = std::make_shared<std::vector<size_t>>(fwd->size());
    for (size_t i = 0; i < fwd->size(); ++i) (*inv)[(*fwd)[i]] = i;
    return model_detail::permute_elems(tokens, {c, f, t}, inv);
}

// deterministic sinusoidal timestep features, [1, 256]
inline TensorPtr timestep_features(int t) {
    int dim = ModelConfig::kTimeFreqDim, half = dim / 2;
    auto out = Tensor::create({1, dim});
    for (int i = 0; i < half; ++i) {
        double freq = std::pow(10000.0, -(double)i / half);
        out->data[i] = (float)std::sin(t * freq);
        out->data[half + i] = (float)std::cos(t * freq);
    }
    return out;
}

// c = MLP(sincos(t)) + cond; cond may be null (pure unconditional path)
inline TensorPtr conditioning_vector(int t, const TensorPtr& cond, const ModelParams& p) {
    if (t < 0) throw ValueError("conditioning: negative timestep");
    auto te = add_rowvec(
        matmul(gelu(add_rowvec(matmul(timestep_features(t), p.t_w1), p.t_b1)), p.t_w2),
        p.t_b2);
    if (!cond) return te;
    if (cond->ndim() != 2 || cond->shape[0] != 1 || cond->shape[1] != p.cfg.hidden)
        throw ShapeError("conditioning: cond must be 1 x hidden");
    return add(te, cond);
}

namespace model_detail {

inline TensorPtr modulate(const TensorPtr& x, const TensorPtr& shift, const TensorPtr& scale) {
    // x * (1 + scale) + shift, broadcast over rows
    return add_rowvec(add(x, mul_rowvec(x, scale)), shift);
}

// one adaLN-Zero block; c is the (already activated upstream) condition [1,D]
inline TensorPtr dit_block(const TensorPtr& x, const TensorPtr& c, const BlockParams& b,
                           const ModelParams& p) {
    auto mod = add_rowvec(matmul(gelu(c), b.ada_w), b.ada_b);  // [1, 6D]
    int d = p.cfg.hidden;
    auto s1 = slice_cols(mod, 0, d), sc1 = slice_cols(mod, d, 2 * d),
         g1 = slice_cols(mod, 2 * d, 3 * d), s2 = slice_cols(mod, 3 * d, 4 * d),
         sc2 = slice_cols(mod, 4 * d, 5 * d), g2 = slice_cols(mod, 5 * d, 6 * d);
    auto h = modulate(layer_norm(x, p.ln_g, p.ln_b), s1, sc1);
    auto q = add_rowvec(matmul(h, b.wq), b.bq);
    auto k = add_rowvec(matmul(h, b.wk), b.bk);
    auto v = add_rowvec(matmul(h, b.wv), b.bv);
    auto att = add_rowvec(matmul(attention(q, k, v, p.cfg.heads), b.wo), b.bo);
    auto x1 = add(x, mul_rowvec(att, g1));
    auto h2 = modulate(layer_norm(x1, p.ln_g, p.ln_b), s2, sc2);
    auto mlp = add_rowvec(matmul(gelu(add_rowvec(matmul(h2, b.mw1), b.mb1)), b.mw2), b.mb2);
    return add(x1, mul_rowvec(mlp, g2));
}

inline TensorPtr final_layer(const TensorPtr& x, const TensorPtr& c, const ModelParams& p) {
    auto mod = add_rowvec(matmul(gelu(c), p.final_ada_w), p.final_ada_b);
    int d = p.cfg.hidden;
    auto h = modulate(layer_norm(x, p.ln_g, p.ln_b), slice_cols(mod, 0, d),
                      slice_cols(mod, d, 2 * d));
    return add_rowvec(matmul(h, p.final_w), p.final_b);
}

inline void check_latent(const TensorPtr& x, const ModelConfig& cfg) {
    if (x->ndim() != 3 || x->shape[0] != cfg.latent_channels ||
        x->shape[1] != cfg.grid_rows * cfg.patch || x->shape[2] != cfg.grid_cols * cfg.patch)
        throw ShapeError("forward: latent shape inconsistent with model config");
}

}  // namespace model_detail

// Eq.-1 first-branch forward: the inference path. Re-adds the positional
// embedding before the decoder blocks (the artifact the masked branch leaves
// behind) so both branches share one decoder contract.
inline TensorPtr forward_full(const TensorPtr& x_t, const TensorPtr& cond, int t,
                              const ModelParams& p) {
    model_detail::check_latent(x_t, p.cfg);
    auto c = conditioning_vector(t, cond, p);
    auto x = add(matmul(patchify(x_t, p.cfg.patch), p.patch_w), p.pos_embed);
    x = add_rowvec(x, p.patch_b);
    for (int i = 0; i < p.cfg.n1(); ++i) x = model_detail::dit_block(x, c, p.blocks[i], p);
    x = add(x, p.pos_embed);
    for (int i = p.cfg.n1(); i < p.cfg.layers; ++i)
        x = model_detail::dit_block(x, c, p.blocks[i], p);
    auto out = model_detail::final_layer(x, c, p);
    return unpatchify(out, p.cfg.latent_channels, p.cfg.grid_rows * p.cfg.patch,
                      p.cfg.grid_cols * p.cfg.patch, p.cfg.patch);
}

// Eq.-1 second-branch forward: encoder sees only visible tokens; the scattered
// sequence (mask tokens + re-added positions) passes through the
// side-interpolator before the shared decoder.
inline TensorPtr forward_masked(const TensorPtr& x_t, const TensorPtr& cond, int t,
                                const TokenMask& m, const ModelParams& p) {
    model_detail::check_latent(x_t, p.cfg);
    if (m.grid.rows != p.cfg.grid_rows || m.grid.cols != p.cfg.grid_cols)
        throw ShapeError("forward_masked: mask grid does not match model grid");
    auto c = conditioning_vector(t, cond, p);
    auto x = add(matmul(patchify(x_t, p.cfg.patch), p.patch_w), p.pos_embed);
    x = add_rowvec(x, p.patch_b);
    std::vector<int> idx;
    auto vis = gather_visible(x, m, idx);
    for (int i = 0; i < p.cfg.n1(); ++i) vis = model_detail::dit_block(vis, c, p.blocks[i], p);
    auto full = scatter_full(vis, m, p.mask_token);
    full = add(full, p.pos_embed);
    full = model_detail::dit_block(full, c, p.side, p);
    for (int i = p.cfg.n1(); i < p.cfg.layers; ++i)
        full = model_detail::dit_block(full, c, p.blocks[i], p);
    auto out = model_detail::final_layer(full, c, p);
    return unpatchify(out, p.cfg.latent_channels, p.cfg.grid_rows * p.cfg.patch,
                      p.cfg.grid_cols * p.cfg.patch, p.cfg.patch);
}

// analytic inference-path parameter count (excludes the discarded masked
// branch: side-interpolator + mask token; the positional table is a fixed
// buffer, not a parameter)
inline long long count_params(const ModelConfig& cfg) {
    cfg.validate();
    long long d = cfg.hidden, td = cfg.token_dim(), tf = ModelConfig::kTimeFreqDim;
    long long patch = td * d + d;
    long long tmlp = tf * d + d + d * d + d;
    long long attn = 4 * (d * d + d);
    long long mlp = d * 4 * d + 4 * d + 4 * d * d + d;
    long long ada = d * 6 * d + 6 * d;
    long long block = attn + mlp + ada;
    long long fin = d * 2 * d + 2 * d + d * td + td;
    return patch + tmlp + cfg.layers * block + fin;
}

// cross-check: enumeration of the stored inference-path tensors
inline long long count_params_enumerated(const ModelParams& p) {
    long long n = 0;
    for (auto& [k, v] : p.inference_named()) n += (long long)v->numel();
    return n;
}

}  // namespace mds
