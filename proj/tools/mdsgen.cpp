// mdsgen: batch front-end for training, sampling and analysis.
// Exit codes: 0 success, 2 usage/config error, 3 numerical failure.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mdsgen/trainer.hpp"

namespace fs = std::filesystem;
using namespace mds;

namespace {

RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    nlohmann::json j;
    f >> j;
    auto rc = RunConfig::from_json(j);
    rc.validate();
    return rc;
}

void ensure_outdir(const std::string& dir, bool overwrite) {
    if (fs::exists(dir) && !fs::is_directory(dir))
        throw IoError("output path exists and is not a directory: " + dir);
    if (fs::exists(dir) && !overwrite && !fs::is_empty(dir))
        throw ConfigError("output dir not empty (use --overwrite): " + dir);
    fs::create_directories(dir);
}

void save_mel(const MelSpectrogram& mel, const std::string& path) {
    TensorContainer c;
    c.put("mel", Tensor::from_data({mel.bins, mel.frames}, mel.values));
    c.save(path);
}

TensorPtr load_features(const std::string& path) {
    auto c = TensorContainer::load(path);
    return c.get("features");
}

int cmd_train(const std::string& config_path, int steps_override, long long seed_override,
              const std::string& out_override, bool overwrite, const std::string& resume) {
    Pipeline p = resume.empty() ? [&] {
        auto rc = load_config(config_path);
        if (steps_override >= 0) rc.steps = steps_override;
        if (seed_override >= 0) rc.seed = (uint64_t)seed_override;
        if (!out_override.empty()) rc.out_dir = out_override;
        return build_pipeline(rc);
    }() : load_checkpoint(resume);
    if (!resume.empty() && steps_override >= 0) p.rc.steps = steps_override;
    ensure_outdir(p.rc.out_dir, overwrite || !resume.empty());
    int remaining = p.rc.steps - (int)p.st.step;
    save_checkpoint(p, p.rc.out_dir + "/ckpt_0.mdt");
    if (remaining > 0) train_run(p, remaining, p.rc.out_dir + "/loss.csv", p.rc.out_dir);
    save_checkpoint(p, p.rc.out_dir + "/ckpt_final.mdt");
    std::cout << "trained to step " << p.st.step << ", checkpoint at " << p.rc.out_dir
              << "/ckpt_final.mdt\n";
    return 0;
}

int cmd_sample(const std::string& ckpt, const std::string& features_path, int n,
               const std::string& out, long long seed, bool overwrite, bool unconditional) {
    auto p = load_checkpoint(ckpt);
    ensure_outdir(out, overwrite);
    Rng rng(seed >= 0 ? (uint64_t)seed : p.rc.seed, 100);
    TensorPtr feats = features_path.empty() ? nullptr : load_features(features_path);
    EmaScope scope(p.st.params, p.st.ema);
    for (int i = 0; i < n; ++i) {
        auto f = feats ? feats : p.data[i % p.data.size()].features;
        auto mel = generate_mel(p, f, rng, unconditional);
        std::string stem = out + "/sample_" + std::to_string(i);
        save_mel(mel, stem + ".mel");
        Rng gl_rng(rng.seed(), 200 + i);
        auto wav = griffin_lim(mel, p.spec.mel, 32, gl_rng);
        write_wav(stem + ".wav", wav);
    }
    std::cout << "wrote " << n << " samples to " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, int n, const std::string& out, long long seed,
             bool overwrite) {
    auto p = load_checkpoint(ckpt);
    ensure_outdir(out, overwrite);
    Rng rng(seed >= 0 ? (uint64_t)seed : p.rc.seed, 101);
    auto cond = evaluate(p, n, rng);
    Rng rng2(seed >= 0 ? (uint64_t)seed : p.rc.seed, 102);
    auto uncond = evaluate(p, n, rng2, true, true);
    nlohmann::json j = {{"conditional",
                         {{"frechet", cond.frechet},
                          {"inception_score", cond.inception},
                          {"mean_kl", cond.mean_kl},
                          {"alignment_acc", cond.alignment_acc}}},
                        {"unconditional", {{"alignment_acc", uncond.alignment_acc}}}};
    std::ofstream f(out + "/metrics.json");
    f << j.dump(2) << "\n";
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_ablate(const std::string& axis, const std::string& config_path, const std::string& out,
               long long seed, bool overwrite, int steps_override, int eval_n) {
    auto rc = load_config(config_path);
    if (seed >= 0) rc.seed = (uint64_t)seed;
    if (steps_override >= 0) rc.steps = steps_override;
    ensure_outdir(out, overwrite);
    struct Variant {
        std::string label;
        RunConfig rc;
    };
    std::vector<Variant> variants;
    if (axis == "mask_strategy") {
        for (std::string s : {"none", "SAM", "FAM", "TAM"}) {
            auto v = rc;
            v.mask_strategy = s;
            if (s == "none") v.lambda = 0.0f;
            variants.push_back({s, v});
        }
    } else if (axis == "mask_ratio") {
        for (float r : {0.3f, 0.5f, 0.7f}) {
            auto v = rc;
            v.mask_ratio = r;
            variants.push_back({"ratio_" + std::to_string(r).substr(0, 3), v});
        }
    } else if (axis == "n2") {
        int layers = ModelConfig::preset(rc.preset).layers;
        for (int n2 : {1, 2, layers / 2}) {
            if (n2 >= layers) continue;
            auto v = rc;
            v.n2_override = n2;
            variants.push_back({"n2_" + std::to_string(n2), v});
        }
    } else if (axis == "reducer") {
        for (std::string m : {"learnable_weight", "naive_average", "attention_pool"}) {
            auto v = rc;
            v.reducer_mode = m;
            variants.push_back({m, v});
        }
    } else if (axis == "preset") {
        for (std::string m : {"Nano", "T"}) {
            auto v = rc;
            v.preset = m;
            variants.push_back({m, v});
        }
    } else {
        throw ConfigError("ablate: unknown axis " + axis);
    }
    std::ofstream csv(out + "/ablate_" + axis + ".csv");
    csv << "variant,final_loss,frechet,inception_score,mean_kl,alignment_acc\n";
    for (auto& v : variants) {
        v.rc.out_dir = out + "/" + v.label;
        ensure_outdir(v.rc.out_dir, true);
        auto p = build_pipeline(v.rc);
        auto rows = train_run(p, v.rc.steps, v.rc.out_dir + "/loss.csv", "");
        double final_loss = rows.empty() ? 0.0 : rows.back().total;
        Rng rng(v.rc.seed, 101);
        auto rep = evaluate(p, eval_n, rng);
        csv << v.label << ',' << final_loss << ',' << rep.frechet << ',' << rep.inception
            << ',' << rep.mean_kl << ',' << rep.alignment_acc << '\n';
        std::cout << v.label << ": align=" << rep.alignment_acc << " loss=" << final_loss
                  << "\n";
    }
    return 0;
}

int cmd_analyze(const std::string& features_path, const std::string& out, long long seed,
                bool overwrite) {
    ensure_outdir(out, overwrite);
    auto feats = load_features(features_path);
    auto red = redundancy_score(feats);
    nlohmann::json j = {{"mean_cosine", red.mean_cosine},
                        {"zero_norm_rows", red.zero_norm_rows}};
    std::ofstream rf(out + "/redundancy.json");
    rf << j.dump(2) << "\n";
    Rng rng(seed >= 0 ? (uint64_t)seed : 7, 4);
    auto params = ReducerParams::init(feats->shape[0], 64, CombinerMode::LearnableWeight, rng);
    auto rep = inspect_combiner(params);
    std::ofstream wf(out + "/combiner_weights.csv");
    wf << "frame_index,raw_weight,softmax_weight\n";
    for (size_t i = 0; i < rep.raw.size(); ++i)
        wf << i << ',' << rep.raw[i] << ',' << rep.softmax[i] << '\n';
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_bench(const std::string& preset, int reps, const std::string& out, long long seed,
              bool overwrite) {
    ensure_outdir(out, overwrite);
    Rng rng(seed >= 0 ? (uint64_t)seed : 7, 5);
    auto cfg = ModelConfig::preset(preset);
    auto r = bench(cfg, reps, rng);
    std::ofstream csv(out + "/bench.csv");
    csv << "preset,param_count,peak_resident_bytes,per_sample_seconds\n";
    csv << preset << ',' << r.param_count << ',' << r.peak_resident << ','
        << r.per_sample_seconds << '\n';
    std::cout << preset << ": params=" << r.param_count
              << " peak_bytes=" << r.peak_resident << " fwd_s=" << r.per_sample_seconds
              << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vision-conditioned masked diffusion transformer for audio, desk scale"};
    app.require_subcommand(1);

    std::string config = "config.json", out, ckpt, features, axis = "mask_strategy";
    std::string init_out = "config.json";
    std::string preset = "Nano", resume;
    long long seed = -1;
    int steps = -1, n = 4, reps = 3, eval_n = 16;
    bool overwrite = false, unconditional = false;

    auto* c_init = app.add_subcommand("init-config", "write a default config file");
    c_init->add_option("--out", init_out, "config file path");
    c_init->add_flag("--overwrite", overwrite);

    auto* c_train = app.add_subcommand("train", "train a model from a config");
    c_train->add_option("--config", config);
    c_train->add_option("--steps", steps);
    c_train->add_option("--seed", seed);
    c_train->add_option("--out", out);
    c_train->add_option("--resume", resume, "resume from a checkpoint");
    c_train->add_flag("--overwrite", overwrite);

    auto* c_sample = app.add_subcommand("sample", "generate mel + WAV from a checkpoint");
    c_sample->add_option("--ckpt", ckpt)->required();
    c_sample->add_option("--features", features, "tensor container with a 'features' entry");
    c_sample->add_option("--n", n);
    c_sample->add_option("--out", out)->required();
    c_sample->add_option("--seed", seed);
    c_sample->add_flag("--overwrite", overwrite);
    c_sample->add_flag("--unconditional", unconditional);

    auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on the toy oracle");
    c_eval->add_option("--ckpt", ckpt)->required();
    c_eval->add_option("--n", n);
    c_eval->add_option("--out", out)->required();
    c_eval->add_option("--seed", seed);
    c_eval->add_flag("--overwrite", overwrite);

    auto* c_ablate = app.add_subcommand("ablate", "train/evaluate variants along one axis");
    c_ablate->add_option("--axis", axis,
                         "mask_strategy | mask_ratio | n2 | reducer | preset");
    c_ablate->add_option("--config", config);
    c_ablate->add_option("--out", out)->required();
    c_ablate->add_option("--seed", seed);
    c_ablate->add_option("--steps", steps);
    c_ablate->add_option("--eval-n", eval_n);
    c_ablate->add_flag("--overwrite", overwrite);

    auto* c_analyze = app.add_subcommand("analyze", "redundancy + combiner weight reports");
    c_analyze->add_option("--features", features)->required();
    c_analyze->add_option("--out", out)->required();
    c_analyze->add_option("--seed", seed);
    c_analyze->add_flag("--overwrite", overwrite);

    auto* c_bench = app.add_subcommand("bench", "parameter/memory/time benchmark");
    c_bench->add_option("--preset", preset);
    c_bench->add_option("--reps", reps);
    c_bench->add_option("--out", out)->required();
    c_bench->add_option("--seed", seed);
    c_bench->add_flag("--overwrite", overwrite);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*c_init) {
            if (std::filesystem::exists(init_out) && !overwrite)
                throw ConfigError("config exists (use --overwrite): " + init_out);
            std::ofstream f(init_out);
            if (!f) throw IoError("cannot write: " + init_out);
            f << default_config().to_json().dump(2) << "\n";
            std::cout << "wrote " << init_out << "\n";
            return 0;
        }
        if (*c_train) return cmd_train(config, steps, seed, out, overwrite, resume);
        if (*c_sample) return cmd_sample(ckpt, features, n, out, seed, overwrite, unconditional);
        if (*c_eval) return cmd_eval(ckpt, n, out, seed, overwrite);
        if (*c_ablate) return cmd_ablate(axis, config, out, seed, overwrite, steps, eval_n);
        if (*c_analyze) return cmd_analyze(features, out, seed, overwrite);
        if (*c_bench) return cmd_bench(preset, reps, out, seed, overwrite);
    } catch (const TrainingError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ValueError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
