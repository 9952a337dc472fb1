#pragma once

#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "mdsgen/codec.hpp"
#include "mdsgen/diffusion.hpp"
#include "mdsgen/metrics.hpp"
#include "mdsgen/serialize.hpp"
#include "mdsgen/toy.hpp"
#include "mdsgen/vision.hpp"

namespace mds {

struct RunConfig {
    std::string preset = "Nano";
    int n2_override = -1;  // -1 keeps the preset default

    std::string mask_strategy = "TAM";
    float mask_ratio = 0.3f;
    float lambda = 1.0f;

    float w_max = 5.0f;
    float cfg_alpha = 0.01f;
    float cond_dropout = 0.10f;
    std::string sampler = "ddim";
    int sample_steps = 25;

    std::string codec_mode = "identity_patch";
    std::string channel_layout = "mono1";  // mono1 | rgb3
    std::string channel_mode = "G";        // selection when rgb3
    int codec_train_steps = 300;           // conv_vae pre-training budget

    std::string reducer_mode = "learnable_weight";

    int toy_classes = 4;
    int toy_n = 512;
    float toy_sigma = 0.05f;

    int steps = 2000;
    int batch_size = 8;
    float lr = 5e-4f;
    float ema_decay = 0.9999f;
    int checkpoint_every = 500;
    uint64_t seed = 7;
    std::string out_dir = "out";

    nlohmann::json to_json() const {
        return nlohmann::json{
            {"preset", preset}, {"n2_override", n2_override},
            {"mask_strategy", mask_strategy}, {"mask_ratio", mask_ratio},
            {"lambda", lambda}, {"w_max", w_max}, {"cfg_alpha", cfg_alpha},
            {"cond_dropout", cond_dropout}, {"sampler", sampler},
            {"sample_steps", sample_steps}, {"codec_mode", codec_mode},
            {"channel_layout", channel_layout}, {"channel_mode", channel_mode},
            {"codec_train_steps", codec_train_steps}, {"reducer_mode", reducer_mode},
            {"toy_classes", toy_classes}, {"toy_n", toy_n}, {"toy_sigma", toy_sigma},
            {"steps", steps}, {"batch_size", batch_size}, {"lr", lr},
            {"ema_decay", ema_decay}, {"checkpoint_every", checkpoint_every},
            {"seed", seed}, {"out_dir", out_dir}};
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        auto get = [&](const char* k, auto& v) {
            if (j.contains(k)) v = j.at(k).get<std::decay_t<decltype(v)>>();
        };
        get("preset", c.preset); get("n2_override", c.n2_override);
        get("mask_strategy", c.mask_strategy); get("mask_ratio", c.mask_ratio);
        get("lambda", c.lambda); get("w_max", c.w_max); get("cfg_alpha", c.cfg_alpha);
        get("cond_dropout", c.cond_dropout); get("sampler", c.sampler);
        get("sample_steps", c.sample_steps); get("codec_mode", c.codec_mode);
        get("channel_layout", c.channel_layout); get("channel_mode", c.channel_mode);
        get("codec_train_steps", c.codec_train_steps); get("reducer_mode", c.reducer_mode);
        get("toy_classes", c.toy_classes); get("toy_n", c.toy_n);
        get("toy_sigma", c.toy_sigma); get("steps", c.steps);
        get("batch_size", c.batch_size); get("lr", c.lr); get("ema_decay", c.ema_decay);
        get("checkpoint_every", c.checkpoint_every); get("seed", c.seed);
        get("out_dir", c.out_dir);
        return c;
    }

    void validate() const {
        (void)ModelConfig::preset(preset);
        (void)mask_strategy_from_string(mask_strategy);
        (void)codec_mode_from_string(codec_mode);
        (void)combiner_mode_from_string(reducer_mode);
        if (channel_layout != "mono1" && channel_layout != "rgb3")
            throw ConfigError("config: channel_layout must be mono1 or rgb3");
        (void)channel_mode_from_string(channel_mode);
        if (sampler != "ddim" && sampler != "ddpm")
            throw ConfigError("config: sampler must be ddim or ddpm");
        if (mask_ratio < 0.0f || mask_ratio >= 1.0f)
            throw ConfigError("config: mask_ratio must be in [0, 1)");
        if (lambda < 0.0f) throw ConfigError("config: lambda must be >= 0");
        if (steps < 0 || batch_size < 1) throw ConfigError("config: bad training sizes");
        if (toy_classes < 2 || toy_n < 1) throw ConfigError("config: bad toy spec");
        GuidanceConfig g{w_max, cfg_alpha, cond_dropout, sampler == "ddim", sample_steps};
        g.validate();
    }
};

inline RunConfig default_config() { return RunConfig{}; }

// Everything one training/eval run owns.
struct Pipeline {
    RunConfig rc;
    ToySpec spec;
    std::vector<ToyPair> data;
    CodecParams codec;
    LatentScale scale;
    std::vector<TensorPtr> latents;  // standardized, parallel to data
    ModelConfig mcfg;
    ReducerParams reducer;
    TrainState st;
    MaskConfig mask_cfg;
};

namespace trainer_detail {

inline TensorPtr codec_input(const ToyPair& pair, const RunConfig& rc) {
    if (rc.channel_layout == "rgb3") return rgb_to_tensor(replicate_channels(pair.mel));
    return mel_to_tensor(pair.mel);
}

}  // namespace trainer_detail

inline Pipeline build_pipeline(const RunConfig& rc) {
    rc.validate();
    Pipeline p;
    p.rc = rc;
    p.spec.num_classes = rc.toy_classes;
    p.spec.feature_noise = rc.toy_sigma;
    p.spec.validate();

    Rng data_rng(rc.seed, 1);
    p.data = generate_dataset(p.spec, rc.toy_n, data_rng);

    int in_ch = rc.channel_layout == "rgb3" ? 3 : 1;
    if (rc.codec_mode == "identity_patch") {
        p.codec = CodecParams::identity(2, in_ch);
    } else {
        Rng codec_rng(rc.seed, 3);
        p.codec = CodecParams::conv_vae(in_ch, codec_rng);
        std::vector<TensorPtr> mels;
        for (auto& d : p.data) mels.push_back(trainer_detail::codec_input(d, rc));
        if (rc.codec_train_steps > 0)
            train_codec(p.codec, mels, rc.codec_train_steps, 1e-3f, codec_rng);
    }

    {
        NoGradGuard ng;
        std::vector<TensorPtr> raw;
        for (auto& d : p.data)
            raw.push_back(encode(trainer_detail::codec_input(d, rc), p.codec));
        p.scale = compute_latent_scale(raw);
        for (auto& z : raw) p.latents.push_back(standardize_latent(z, p.scale));
    }

    p.mcfg = ModelConfig::preset(rc.preset);
    if (rc.n2_override > 0) p.mcfg.n2 = rc.n2_override;
    int div = p.codec.spatial_divisor();
    p.mcfg.latent_channels = p.codec.latent_channels();
    p.mcfg.grid_rows = p.spec.mel.mel_bins / div / p.mcfg.patch;
    p.mcfg.grid_cols = p.spec.mel_frames / div / p.mcfg.patch;
    p.mcfg.validate();

    Rng reducer_rng(rc.seed, 4);
    p.reducer = ReducerParams::init(p.spec.feature_frames, p.mcfg.hidden,
                                    combiner_mode_from_string(rc.reducer_mode), reducer_rng);
    p.st = TrainState::init(p.mcfg, Rng(rc.seed, 2), rc.lr, rc.ema_decay,
                            p.reducer.trainable());
    p.st.guidance = GuidanceConfig{rc.w_max, rc.cfg_alpha, rc.cond_dropout,
                                   rc.sampler == "ddim", rc.sample_steps};
    p.mask_cfg = MaskConfig{mask_strategy_from_string(rc.mask_strategy), rc.mask_ratio};
    return p;
}

// ---------------------------------------------------------------- checkpoints

inline void save_checkpoint(const Pipeline& p, const std::string& path) {
    TensorContainer c;
    for (auto& [name, t] : p.st.model.all_named()) c.put("model." + name, t);
    auto red = p.reducer.trainable();
    for (size_t i = 0; i < red.size(); ++i) c.put("reducer." + std::to_string(i), red[i]);
    for (size_t i = 0; i < p.st.ema.shadow.size(); ++i)
        c.put("ema." + std::to_string(i), p.st.ema.shadow[i]);
    for (size_t i = 0; i < p.st.opt.m.size(); ++i) {
        auto m = Tensor::create(p.st.params[i]->shape);
        m->data = p.st.opt.m[i];
        auto v = Tensor::create(p.st.params[i]->shape);
        v->data = p.st.opt.v[i];
        c.put("adam.m." + std::to_string(i), m);
        c.put("adam.v." + std::to_string(i), v);
    }
    c.manifest["config"] = p.rc.to_json();
    c.manifest["step"] = p.st.step;
    c.manifest["adam_steps"] = p.st.opt.step_count;
    c.manifest["latent_mean"] = p.scale.mean;
    c.manifest["latent_std"] = p.scale.std;
    c.manifest["codec_mode"] = p.rc.codec_mode;
    c.manifest["rng"] = {{"seed", p.st.rng.seed()},     {"stream", p.st.rng.stream()},
                         {"counter", p.st.rng.counter()}, {"buf_pos", p.st.rng.buf_pos()},
                         {"has_spare", p.st.rng.has_spare()}, {"spare", p.st.rng.spare()}};
    c.save(path);
}

inline Pipeline load_checkpoint(const std::string& path) {
    auto c = TensorContainer::load(path);
    RunConfig rc = RunConfig::from_json(c.manifest.at("config"));
    auto p = build_pipeline(rc);
    for (auto& [name, t] : p.st.model.all_named()) t->data = c.get("model." + name)->data;
    auto red = p.reducer.trainable();
    for (size_t i = 0; i < red.size(); ++i)
        red[i]->data = c.get("reducer." + std::to_string(i))->data;
    for (size_t i = 0; i < p.st.params.size(); ++i) {
        p.st.ema.shadow[i]->data = c.get("ema." + std::to_string(i))->data;
        p.st.opt.m[i] = c.get("adam.m." + std::to_string(i))->data;
        p.st.opt.v[i] = c.get("adam.v." + std::to_string(i))->data;
    }
    p.st.step = c.manifest.at("step").get<long long>();
    p.st.opt.step_count = c.manifest.at("adam_steps").get<long long>();
    p.scale.mean = c.manifest.at("latent_mean").get<float>();
    p.scale.std = c.manifest.at("latent_std").get<float>();
    auto& r = c.manifest.at("rng");
    p.st.rng = Rng(r.at("seed").get<uint64_t>(), r.at("stream").get<uint64_t>());
    p.st.rng.restore(r.at("counter").get<uint64_t>(), r.at("buf_pos").get<uint32_t>(),
                     r.at("has_spare").get<bool>(), r.at("spare").get<double>());
    return p;
}

// ------------------------------------------------------------------ training

struct LossRow {
    long long step;
    double loss_full, loss_masked, total;
};

inline std::vector<LossRow> train_run(Pipeline& p, int steps,
                                      const std::string& csv_path = "",
                                      const std::string& ckpt_dir = "") {
    std::ofstream csv;
    bool fresh = true;
    if (!csv_path.empty()) {
        fresh = !std::filesystem::exists(csv_path) || p.st.step == 0;
        csv.open(csv_path, fresh ? std::ios::trunc : std::ios::app);
        if (fresh) csv << "step,loss_full,loss_masked,total\n";
    }
    std::vector<LossRow> rows;
    for (int s = 0; s < steps; ++s) {
        std::vector<TrainSample> batch;
        for (int b = 0; b < p.rc.batch_size; ++b) {
            size_t i = p.st.rng.randint(p.latents.size());
            batch.push_back({p.latents[i], reduce(p.data[i].features, p.reducer)});
        }
        auto lb = train_step(p.st, batch, p.mask_cfg, p.rc.lambda);
        rows.push_back({p.st.step, lb.loss_full, lb.loss_masked, lb.total});
        if (csv.is_open())
            csv << p.st.step << ',' << lb.loss_full << ',' << lb.loss_masked << ','
                << lb.total << '\n';
        if (!ckpt_dir.empty() && p.rc.checkpoint_every > 0 &&
            p.st.step % p.rc.checkpoint_every == 0)
            save_checkpoint(p, ckpt_dir + "/ckpt_" + std::to_string(p.st.step) + ".mdt");
    }
    return rows;
}

// ------------------------------------------------------------------ sampling

struct ParamSnapshot {
    std::vector<std::vector<float>> data;
};

inline ParamSnapshot snapshot_params(const std::vector<TensorPtr>& params) {
    ParamSnapshot s;
    for (auto& p : params) s.data.push_back(p->data);
    return s;
}

inline void restore_params(const std::vector<TensorPtr>& params, const ParamSnapshot& s) {
    for (size_t i = 0; i < params.size(); ++i) params[i]->data = s.data[i];
}

// RAII: swap EMA weights in for sampling, restore the live weights after
struct EmaScope {
    const std::vector<TensorPtr>& params;
    ParamSnapshot saved;
    EmaScope(const std::vector<TensorPtr>& params_, const Ema& ema)
        : params(params_), saved(snapshot_params(params_)) {
        for (size_t i = 0; i < params.size(); ++i) params[i]->data = ema.shadow[i]->data;
    }
    ~EmaScope() { restore_params(params, saved); }
};

// full generation path: features -> cond -> sampler -> latent -> codec -> mel.
// unconditional uses the exact zero condition with w == 1 (a single pass that
// equals the w == 0 definition since both branches coincide).
inline MelSpectrogram generate_mel(Pipeline& p, const TensorPtr& features, Rng& rng,
                                   bool unconditional = false) {
    NoGradGuard ng;
    TensorPtr cond;
    GuidanceConfig g = p.st.guidance;
    if (unconditional) {
        cond = Tensor::create({1, p.mcfg.hidden});
        g.w_max = 1.0f;
    } else {
        cond = reduce(features, p.reducer);
    }
    auto z = sample(cond, g, p.st.model, p.st.sched, rng);
    auto x = decode(unstandardize_latent(z, p.scale), p.codec);
    for (auto& v : x->data) v = std::min(std::max(v, -1.0f), 1.0f);
    MelSpectrogram mel;
    if (p.rc.channel_layout == "rgb3")
        mel = select_channel(tensor_to_rgb(x), channel_mode_from_string(p.rc.channel_mode));
    else
        mel = tensor_to_mel(x);
    return mel;
}

// --------------------------------------------------------------------- eval

// n generated samples, conditioned on dataset pairs round-robin; alignment is
// judged by the oracle against the conditioning pair's event labels
inline MetricReport evaluate(Pipeline& p, int n, Rng& rng, bool use_ema = true,
                             bool unconditional = false) {
    if (n < 1) throw ConfigError("evaluate: n must be >= 1");
    std::vector<std::vector<double>> probs_real, probs_gen;
    std::vector<std::vector<double>> feat_real, feat_gen;
    int hits = 0, events = 0;
    auto run = [&]() {
        for (int i = 0; i < n; ++i) {
            auto& pair = p.data[i % p.data.size()];
            auto mel = generate_mel(p, pair.features, rng, unconditional);
            auto al = oracle_alignment(mel, pair.events, p.spec);
            for (bool h : al.hits) hits += h;
            events += (int)al.hits.size();
            probs_real.push_back(oracle_class_probs(pair.mel, p.spec));
            probs_gen.push_back(oracle_class_probs(mel, p.spec));
            feat_real.push_back(probs_real.back());
            feat_gen.push_back(probs_gen.back());
        }
    };
    if (use_ema) {
        EmaScope scope(p.st.params, p.st.ema);
        run();
    } else {
        run();
    }
    MetricReport r;
    r.alignment_acc = (double)hits / (double)events;
    r.inception = inception_score(probs_gen);
    r.mean_kl = mean_kl(probs_real, probs_gen);
    std::vector<double> mu1, s1, mu2, s2;
    gaussian_moments(feat_real, mu1, s1);
    gaussian_moments(feat_gen, mu2, s2);
    r.frechet = frechet_distance(mu1, s1, mu2, s2);
    return r;
}

}  // namespace mds
