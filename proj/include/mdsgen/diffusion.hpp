#pragma once

#include <functional>
#include <vector>

#include "mdsgen/model.hpp"
#include "mdsgen/optim.hpp"

namespace mds {

// linear beta schedule; alpha_bar[0] == 1 so index t in [0, T] reads
// alpha_bar after t noising steps
struct NoiseSchedule {
    int T = 1000;
    std::vector<double> beta;       // [T+1], beta[0] unused
    std::vector<double> alpha;      // [T+1]
    std::vector<double> alpha_bar;  // [T+1], alpha_bar[0] = 1

    static NoiseSchedule linear(int T = 1000, double beta1 = 1e-4, double betaT = 2e-2) {
        if (T < 1 || beta1 <= 0.0 || betaT >= 1.0 || beta1 >= betaT)
            throw ConfigError("NoiseSchedule: need 0 < beta1 < betaT < 1");
        NoiseSchedule s;
        s.T = T;
        s.beta.assign(T + 1, 0.0);
        s.alpha.assign(T + 1, 1.0);
        s.alpha_bar.assign(T + 1, 1.0);
        for (int t = 1; t <= T; ++t) {
            s.beta[t] = T == 1 ? beta1 : beta1 + (betaT - beta1) * (t - 1) / (double)(T - 1);
            s.alpha[t] = 1.0 - s.beta[t];
            s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
        }
        return s;
    }

    void check_t(int t) const {
        if (t < 1 || t > T) throw ValueError("timestep out of [1, T]");
    }
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline TensorPtr q_sample(const TensorPtr& x0, int t, const TensorPtr& eps,
                          const NoiseSchedule& s) {
    s.check_t(t);
    if (!x0->same_shape(*eps)) throw ShapeError("q_sample: eps shape mismatch");
    float a = (float)std::sqrt(s.alpha_bar[t]);
    float b = (float)std::sqrt(1.0 - s.alpha_bar[t]);
    auto out = Tensor::create(x0->shape);
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = a * x0->data[i] + b * eps->data[i];
    return out;
}

struct GuidanceConfig {
    float w_max = 5.0f;
    float alpha = 0.01f;      // power scale
    float cond_dropout = 0.10f;
    bool ddim = true;
    int steps = 25;

    void validate() const {
        if (w_max < 1.0f) throw ConfigError("GuidanceConfig: w_max must be >= 1");
        if (alpha <= 0.0f) throw ConfigError("GuidanceConfig: alpha must be > 0");
        if (cond_dropout < 0.0f || cond_dropout >= 1.0f)
            throw ConfigError("GuidanceConfig: dropout must be in [0, 1)");
        if (steps < 1) throw ConfigError("GuidanceConfig: steps must be >= 1");
    }
};

// dynamic CFG weight, monotone non-decreasing toward the data end of sampling
inline float guidance_weight(int i, int S, const GuidanceConfig& g) {
    if (i < 0 || i >= S) throw ConfigError("guidance_weight: step index out of range");
    return 1.0f + (g.w_max - 1.0f) * (float)std::pow((double)(i + 1) / S, (double)g.alpha);
}

inline float guidance_weight(int i, const GuidanceConfig& g) {
    return guidance_weight(i, g.steps, g);
}

// eps_u + w (eps_c - eps_u); w == 1 and w == 0 short-circuit so the stated
// bit-exactness contracts hold
inline TensorPtr cfg_predict(const TensorPtr& x_t, const TensorPtr& cond, int t, float w,
                             const ModelParams& p) {
    if (w < 0.0f) throw ConfigError("cfg_predict: w must be >= 0");
    auto zero_cond = Tensor::create({1, p.cfg.hidden});
    if (w == 1.0f) return forward_full(x_t, cond, t, p);
    if (w == 0.0f) return forward_full(x_t, zero_cond, t, p);
    auto ec = forward_full(x_t, cond, t, p);
    auto eu = forward_full(x_t, zero_cond, t, p);
    auto out = Tensor::create(ec->shape);
    for (size_t i = 0; i < out->numel(); ++i)
        out->data[i] = eu->data[i] + w * (ec->data[i] - eu->data[i]);
    return out;
}

// ------------------------------------------------------------------ training

struct TrainSample {
    TensorPtr x0;    // standardized latent [C,F,T]
    TensorPtr cond;  // [1,D], may be tape-connected to reducer parameters
};

struct MaskConfig {
    MaskStrategy strategy = MaskStrategy::TAM;
    float ratio = 0.3f;
};

struct TrainState {
    ModelParams model;
    std::vector<TensorPtr> params;  // model + any extra trainable tensors
    Adam opt;
    Ema ema;
    NoiseSchedule sched;
    GuidanceConfig guidance;
    long long step = 0;
    Rng rng;

    static TrainState init(const ModelConfig& cfg, Rng rng_, float lr = 5e-4f,
                           float ema_decay = 0.9999f,
                           const std::vector<TensorPtr>& extra = {}) {
        TrainState s;
        s.rng = rng_;
        s.model = ModelParams::init(cfg, s.rng);
        s.params = s.model.trainable();
        for (auto& e : extra) s.params.push_back(e);
        s.opt = Adam(lr);
        s.opt.bind(s.params);
        s.ema.init(s.params, ema_decay);
        s.sched = NoiseSchedule::linear();
        return s;
    }
};

struct LossBreakdown {
    double loss_full = 0.0;
    double loss_masked = 0.0;
    double total = 0.0;
};

// predictor seam: the trained model in production, any stub in tests;
// a null mask selects the full (inference-path) branch
using PredictFn = std::function<TensorPtr(const TensorPtr& x_t, const TensorPtr& cond, int t,
                                          const TokenMask* m)>;

inline PredictFn model_predictor(const ModelParams& p) {
    return [&p](const TensorPtr& x_t, const TensorPtr& cond, int t, const TokenMask* m) {
        return m ? forward_masked(x_t, cond, t, *m, p) : forward_full(x_t, cond, t, p);
    };
}

// per-sample Eq. 1 terms; both branches share x_t = q_sample(x0, t, eps)
struct Eq1Terms {
    TensorPtr loss_full;
    TensorPtr loss_masked;  // null when the masked branch is off
};

inline Eq1Terms eq1_terms(const PredictFn& predict, const TensorPtr& x0, const TensorPtr& cond,
                          int t, const TensorPtr& eps, const TokenMask* m,
                          const NoiseSchedule& sched) {
    auto x_t = q_sample(x0, t, eps, sched);
    Eq1Terms out;
    out.loss_full = mse(predict(x_t, cond, t, nullptr), eps);
    if (m) out.loss_masked = mse(predict(x_t, cond, t, m), eps);
    return out;
}

// One Eq.-1 step: both branches share t, eps, x_t and the (possibly dropped)
// condition; the masked branch draws a fresh mask per sample. lambda == 0 or
// strategy none skips the masked branch so total == loss_full exactly.
inline LossBreakdown train_step(TrainState& st, const std::vector<TrainSample>& batch,
                                const MaskConfig& mc, float lambda) {
    if (batch.empty()) throw ConfigError("train_step: empty batch");
    bool masked_branch = lambda != 0.0f && mc.strategy != MaskStrategy::None;
    auto& p = st.model;
    TokenGrid grid{p.cfg.grid_rows, p.cfg.grid_cols};
    auto predict = model_predictor(p);
    TensorPtr total_full, total_masked;
    for (auto& s : batch) {
        int t = 1 + (int)st.rng.randint(st.sched.T);
        auto eps = Tensor::randn(s.x0->shape, st.rng);
        TensorPtr cond = s.cond;
        if (st.guidance.cond_dropout > 0.0f && st.rng.uniform() < st.guidance.cond_dropout)
            cond = Tensor::create({1, p.cfg.hidden});  // exact zero vector
        TokenMask m;
        if (masked_branch) m = make_mask(grid, mc.strategy, mc.ratio, st.rng);
        auto terms = eq1_terms(predict, s.x0, cond, t, eps, masked_branch ? &m : nullptr,
                               st.sched);
        total_full = total_full ? add(total_full, terms.loss_full) : terms.loss_full;
        if (masked_branch)
            total_masked =
                total_masked ? add(total_masked, terms.loss_masked) : terms.loss_masked;
    }
    float inv = 1.0f / (float)batch.size();
    auto loss_full = scale(total_full, inv);
    TensorPtr loss = loss_full;
    TensorPtr loss_masked;
    if (masked_branch) {
        loss_masked = scale(total_masked, inv);
        loss = add(loss_full, scale(loss_masked, lambda));
    }
    LossBreakdown out;
    out.loss_full = loss_full->item();
    out.loss_masked = masked_branch ? loss_masked->item() : 0.0;
    out.total = loss->item();
    if (!std::isfinite(out.total))
        throw TrainingError("train_step: NaN/Inf loss at step " + std::to_string(st.step));
    for (auto& q : st.params) q->zero_grad();
    backward(loss);
    st.opt.step(st.params);
    st.ema.update(st.params);
    ++st.step;
    return out;
}

// swap EMA shadows into the live parameter tensors (used for sampling)
inline void load_ema_into(ModelParams& model, const std::vector<TensorPtr>& params,
                          const Ema& ema) {
    (void)model;
    for (size_t i = 0; i < params.size(); ++i) params[i]->data = ema.shadow[i]->data;
}

// ------------------------------------------------------------------ sampling

// optional classifier-guidance hook: returns a gradient-shaped tensor added to
// the noise prediction; no classifier ships with the artifact
using ClassifierGradFn = std::function<TensorPtr(const TensorPtr& x_t, int t)>;

inline std::vector<int> ddim_timesteps(int T, int S) {
    if (S < 1 || S > T) throw ConfigError("ddim: steps must be in [1, T]");
    std::vector<int> ts(S);
    for (int i = 0; i < S; ++i) ts[i] = (int)((long long)(i + 1) * T / S);
    return ts;
}

// x_{tp} = c0 x_t + c1 eps_hat (eta = 0)
struct DdimCoeffs {
    double c0, c1;
};

inline DdimCoeffs ddim_coeffs(const NoiseSchedule& s, int t, int tp) {
    s.check_t(t);
    if (tp < 0 || tp >= t) throw ValueError("ddim_coeffs: need 0 <= tp < t");
    double ab = s.alpha_bar[t], abp = s.alpha_bar[tp];
    return {std::sqrt(abp / ab),
            std::sqrt(1.0 - abp) - std::sqrt(abp * (1.0 - ab) / ab)};
}

// x_{t-1} = mean_x (x_t - mean_eps eps_hat) + sigma z
struct DdpmCoeffs {
    double mean_x, mean_eps, sigma;
};

inline DdpmCoeffs ddpm_coeffs(const NoiseSchedule& s, int t) {
    s.check_t(t);
    double ab = s.alpha_bar[t], abp = s.alpha_bar[t - 1];
    return {1.0 / std::sqrt(s.alpha[t]), s.beta[t] / std::sqrt(1.0 - ab),
            t > 1 ? std::sqrt((1.0 - abp) / (1.0 - ab) * s.beta[t]) : 0.0};
}

// DDIM (eta = 0) over a uniform-stride timestep subset, or ancestral DDPM over
// all T steps; per-step dynamic CFG. Deterministic given rng state for DDIM.
inline TensorPtr sample(const TensorPtr& cond, const GuidanceConfig& g, const ModelParams& p,
                        const NoiseSchedule& sched, Rng& rng,
                        const ClassifierGradFn& cg = nullptr, float cg_weight = 0.0f) {
    g.validate();
    NoGradGuard ng;
    std::vector<int> shape{p.cfg.latent_channels, p.cfg.grid_rows * p.cfg.patch,
                           p.cfg.grid_cols * p.cfg.patch};
    auto x = Tensor::randn(shape, rng);
    auto apply_cg = [&](TensorPtr eps_hat, int t) {
        if (!cg || cg_weight == 0.0f) return eps_hat;
        auto gvec = cg(x, t);
        auto out = Tensor::create(eps_hat->shape);
        for (size_t i = 0; i < out->numel(); ++i)
            out->data[i] = eps_hat->data[i] - cg_weight * gvec->data[i];
        return out;
    };
    if (g.ddim) {
        auto ts = ddim_timesteps(sched.T, g.steps);
        int S = (int)ts.size();
        for (int i = S - 1; i >= 0; --i) {
            int t = ts[i], tp = i > 0 ? ts[i - 1] : 0;
            float w = guidance_weight(S - 1 - i, S, g);
            auto eh = apply_cg(cfg_predict(x, cond, t, w, p), t);
            auto c = ddim_coeffs(sched, t, tp);
            auto nx = Tensor::create(x->shape);
            for (size_t j = 0; j < x->numel(); ++j)
                nx->data[j] = (float)(c.c0 * x->data[j] + c.c1 * eh->data[j]);
            x = nx;
        }
    } else {
        for (int t = sched.T; t >= 1; --t) {
            float w = guidance_weight(sched.T - t, sched.T, g);
            auto eh = apply_cg(cfg_predict(x, cond, t, w, p), t);
            auto c = ddpm_coeffs(sched, t);
            auto nx = Tensor::create(x->shape);
            for (size_t j = 0; j < x->numel(); ++j) {
                double z = t > 1 ? rng.normal() : 0.0;
                nx->data[j] =
                    (float)(c.mean_x * (x->data[j] - c.mean_eps * eh->data[j]) + c.sigma * z);
            }
            x = nx;
        }
    }
    return x;
}

}  // namespace mds
