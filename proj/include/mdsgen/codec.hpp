#pragma once

#include <map>
#include <vector>

#include "mdsgen/audio.hpp"
#include "mdsgen/optim.hpp"
#include "mdsgen/ops.hpp"

namespace mds {

// Latents are plain [C, F, T] tensors throughout.

enum class CodecMode { IdentityPatch, ConvVae };

inline CodecMode codec_mode_from_string(const std::string& s) {
    if (s == "identity_patch") return CodecMode::IdentityPatch;
    if (s == "conv_vae") return CodecMode::ConvVae;
    throw ConfigError("unknown codec mode: " + s);
}

inline std::string to_string(CodecMode m) {
    return m == CodecMode::IdentityPatch ? "identity_patch" : "conv_vae";
}

// conv_vae: 3 stride-2 stages {32, 64, 128} down to 4 latent channels (8x per
// axis); identity_patch: exact space-to-depth with zero trainable parameters.
struct CodecParams {
    CodecMode mode = CodecMode::IdentityPatch;
    int in_channels = 1;  // mono1 = 1, rgb3 = 3
    int patch = 2;        // identity_patch block size
    static constexpr int kLatentChannels = 4;

    // conv_vae weights; empty in identity_patch mode
    std::map<std::string, TensorPtr> w;

    static CodecParams identity(int patch = 2, int in_channels = 1) {
        CodecParams p;
        p.mode = CodecMode::IdentityPatch;
        p.patch = patch;
        p.in_channels = in_channels;
        return p;
    }

    static CodecParams conv_vae(int in_channels, Rng& rng) {
        CodecParams p;
        p.mode = CodecMode::ConvVae;
        p.in_channels = in_channels;
        auto conv = [&](const std::string& name, int co, int ci, int k) {
            float s = 1.0f / std::sqrt((float)(ci * k * k));
            p.w[name + ".w"] = Tensor::randn({co, ci, k, k}, rng, s, true);
            p.w[name + ".b"] = Tensor::create({co}, true);
        };
        conv("enc1", 32, in_channels, 3);
        conv("enc2", 64, 32, 3);
        conv("enc3", 128, 64, 3);
        conv("enc_mu", kLatentChannels, 128, 3);
        conv("enc_lv", kLatentChannels, 128, 3);
        conv("dec0", 128, kLatentChannels, 3);
        conv("dec1", 64, 128, 3);
        conv("dec2", 32, 64, 3);
        conv("dec3", in_channels, 32, 3);
        return p;
    }

    std::vector<TensorPtr> trainable() const {
        std::vector<TensorPtr> t;
        for (auto& [k, v] : w) t.push_back(v);
        return t;
    }

    int spatial_divisor() const { return mode == CodecMode::IdentityPatch ? patch : 8; }
    int latent_channels() const {
        return mode == CodecMode::IdentityPatch ? in_channels * patch * patch
                                                : kLatentChannels;
    }
};

namespace codec_detail {

inline void check_divisible(const TensorPtr& x, int d, const char* op) {
    if (x->ndim() != 3) throw ShapeError(std::string(op) + ": expected [C,H,W] input");
    if (x->shape[1] % d != 0 || x->shape[2] % d != 0)
        throw ShapeError(std::string(op) + ": spatial dims not divisible by downsample factor");
}

// space-to-depth: [C,H,W] -> [C*p*p, H/p, W/p]; exact and invertible
inline TensorPtr space_to_depth(const TensorPtr& x, int p) {
    int c = x->shape[0], h = x->shape[1], w = x->shape[2];
    int ho = h / p, wo = w / p;
    auto out = Tensor::create({c * p * p, ho, wo});
    for (int ci = 0; ci < c; ++ci)
        for (int pi = 0; pi < p; ++pi)
            for (int pj = 0; pj < p; ++pj) {
                int co = (ci * p + pi) * p + pj;
                for (int i = 0; i < ho; ++i)
                    for (int j = 0; j < wo; ++j)
                        out->data[((size_t)co * ho + i) * wo + j] =
                            x->data[((size_t)ci * h + i * p + pi) * w + j * p + pj];
            }
    return out;
}

inline TensorPtr depth_to_space(const TensorPtr& z, int p, int c_out) {
    int cz = z->shape[0], ho = z->shape[1], wo = z->shape[2];
    if (cz != c_out * p * p) throw ShapeError("decode: latent channels inconsistent with patch");
    auto out = Tensor::create({c_out, ho * p, wo * p});
    int h = ho * p, w = wo * p;
    for (int ci = 0; ci < c_out; ++ci)
        for (int pi = 0; pi < p; ++pi)
            for (int pj = 0; pj < p; ++pj) {
                int co = (ci * p + pi) * p + pj;
                for (int i = 0; i < ho; ++i)
                    for (int j = 0; j < wo; ++j)
                        out->data[((size_t)ci * h + i * p + pi) * w + j * p + pj] =
                            z->data[((size_t)co * ho + i) * wo + j];
            }
    return out;
}

inline TensorPtr enc_trunk(const TensorPtr& x, const CodecParams& p) {
    auto& w = p.w;
    auto h1 = gelu(conv2d(x, w.at("enc1.w"), w.at("enc1.b"), 2, 1));
    auto h2 = gelu(conv2d(h1, w.at("enc2.w"), w.at("enc2.b"), 2, 1));
    return gelu(conv2d(h2, w.at("enc3.w"), w.at("enc3.b"), 2, 1));
}

}  // namespace codec_detail

inline TensorPtr mel_to_tensor(const MelSpectrogram& m) {
    return Tensor::from_data({1, m.bins, m.frames}, m.values);
}

inline TensorPtr rgb_to_tensor(const RgbMel& m) {
    return Tensor::from_data({3, m.bins, m.frames}, m.values);
}

inline MelSpectrogram tensor_to_mel(const TensorPtr& x) {
    if (x->ndim() != 3 || x->shape[0] != 1) throw ShapeError("tensor_to_mel: expected [1,F,T]");
    MelSpectrogram m(x->shape[1], x->shape[2]);
    m.values = x->data;
    return m;
}

inline RgbMel tensor_to_rgb(const TensorPtr& x) {
    if (x->ndim() != 3 || x->shape[0] != 3) throw ShapeError("tensor_to_rgb: expected [3,F,T]");
    RgbMel m(x->shape[1], x->shape[2]);
    m.values = x->data;
    return m;
}

// deterministic (posterior-mean) encode
inline TensorPtr encode(const TensorPtr& x, const CodecParams& p) {
    codec_detail::check_divisible(x, p.spatial_divisor(), "encode");
    if (x->shape[0] != p.in_channels) throw ShapeError("encode: channel count mismatch");
    if (p.mode == CodecMode::IdentityPatch) return codec_detail::space_to_depth(x, p.patch);
    auto h = codec_detail::enc_trunk(x, p);
    return conv2d(h, p.w.at("enc_mu.w"), p.w.at("enc_mu.b"), 1, 1);
}

inline TensorPtr decode(const TensorPtr& z, const CodecParams& p) {
    if (z->ndim() != 3) throw ShapeError("decode: expected [C,F,T] latent");
    if (p.mode == CodecMode::IdentityPatch)
        return codec_detail::depth_to_space(z, p.patch, p.in_channels);
    if (z->shape[0] != CodecParams::kLatentChannels)
        throw ShapeError("decode: latent channel count mismatch");
    auto h = gelu(conv2d(z, p.w.at("dec0.w"), p.w.at("dec0.b"), 1, 1));
    h = gelu(conv2d(upsample2x(h), p.w.at("dec1.w"), p.w.at("dec1.b"), 1, 1));
    h = gelu(conv2d(upsample2x(h), p.w.at("dec2.w"), p.w.at("dec2.b"), 1, 1));
    return conv2d(upsample2x(h), p.w.at("dec3.w"), p.w.at("dec3.b"), 1, 1);
}

struct CodecTrainResult {
    std::vector<double> loss_curve;  // one entry per step
};

// reconstruction + small KL-to-unit-Gaussian objective; sampled latents are
// used only here, diffusion always sees the deterministic mean encode
inline CodecTrainResult train_codec(CodecParams& p, const std::vector<TensorPtr>& dataset,
                                    int steps, float lr, Rng& rng, float kl_weight = 1e-4f) {
    if (p.mode != CodecMode::ConvVae) throw ConfigError("train_codec: codec is not conv_vae");
    if (steps < 0) throw ConfigError("train_codec: steps must be >= 0");
    CodecTrainResult res;
    if (steps == 0) return res;
    if (dataset.empty()) throw ConfigError("train_codec: empty dataset");
    auto params = p.trainable();
    Adam opt(lr);
    opt.bind(params);
    for (int s = 0; s < steps; ++s) {
        auto x = dataset[rng.randint(dataset.size())];
        auto h = codec_detail::enc_trunk(x, p);
        auto mu = conv2d(h, p.w.at("enc_mu.w"), p.w.at("enc_mu.b"), 1, 1);
        auto lv = conv2d(h, p.w.at("enc_lv.w"), p.w.at("enc_lv.b"), 1, 1);
        // z = mu + exp(lv/2) * eps
        auto eps = Tensor::randn(mu->shape, rng);
        auto z = add(mu, mul(exp_op(scale(lv, 0.5f)), eps));
        auto recon = decode(z, p);
        auto rec_loss = mse(recon, x);
        // KL(N(mu, e^lv) || N(0, I)) = -1/2 mean(1 + lv - mu^2 - e^lv)
        auto kl = scale(mean(sub(sub(add_scalar(lv, 1.0f), mul(mu, mu)), exp_op(lv))), -0.5f);
        auto loss = add(rec_loss, scale(kl, kl_weight));
        double lval = loss->item();
        if (!std::isfinite(lval)) throw TrainingError("train_codec: loss diverged (NaN/Inf)");
        res.loss_curve.push_back(lval);
        for (auto& q : params) q->zero_grad();
        backward(loss);
        opt.step(params);
    }
    return res;
}

// dataset-wide latent standardization: mean shift + scalar std
struct LatentScale {
    float mean = 0.0f;
    float std = 1.0f;
};

inline LatentScale compute_latent_scale(const std::vector<TensorPtr>& latents) {
    double s = 0.0, s2 = 0.0;
    size_t n = 0;
    for (auto& z : latents) {
        for (float v : z->data) {
            s += v;
            s2 += (double)v * v;
        }
        n += z->numel();
    }
    if (n == 0) throw ConfigError("compute_latent_scale: no data");
    double m = s / n;
    double var = s2 / n - m * m;
    LatentScale sc;
    sc.mean = (float)m;
    sc.std = (float)std::sqrt(std::max(var, 1e-12));
    return sc;
}

inline TensorPtr standardize_latent(const TensorPtr& z, const LatentScale& s) {
    auto out = Tensor::create(z->shape);
    for (size_t i = 0; i < z->numel(); ++i) out->data[i] = (z->data[i] - s.mean) / s.std;
    return out;
}

inline TensorPtr unstandardize_latent(const TensorPtr& z, const LatentScale& s) {
    auto out = Tensor::create(z->shape);
    for (size_t i = 0; i < z->numel(); ++i) out->data[i] = z->data[i] * s.std + s.mean;
    return out;
}

}  // namespace mds
