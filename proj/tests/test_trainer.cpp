#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mdsgen/trainer.hpp"

using namespace mds;
namespace fs = std::filesystem;

namespace {

RunConfig small_config() {
    RunConfig rc;
    rc.toy_n = 12;
    rc.batch_size = 2;
    rc.steps = 4;
    rc.checkpoint_every = 2;
    rc.ema_decay = 0.99f;
    rc.seed = 21;
    return rc;
}

std::string tmp_path(const std::string& name) {
    return (fs::temp_directory_path() / name).string();
}

void expect_params_equal(const Pipeline& a, const Pipeline& b) {
    ASSERT_EQ(a.st.params.size(), b.st.params.size());
    for (size_t i = 0; i < a.st.params.size(); ++i) {
        EXPECT_EQ(a.st.params[i]->data, b.st.params[i]->data) << "param " << i;
        EXPECT_EQ(a.st.ema.shadow[i]->data, b.st.ema.shadow[i]->data) << "ema " << i;
        EXPECT_EQ(a.st.opt.m[i], b.st.opt.m[i]) << "adam.m " << i;
        EXPECT_EQ(a.st.opt.v[i], b.st.opt.v[i]) << "adam.v " << i;
    }
}

}  // namespace

TEST(RunConfig, JsonRoundTripPreservesEveryField) {
    RunConfig rc = small_config();
    rc.preset = "Nano";
    rc.n2_override = 2;
    rc.mask_strategy = "SAM";
    rc.mask_ratio = 0.45f;
    rc.lambda = 0.5f;
    rc.w_max = 3.0f;
    rc.cfg_alpha = 0.2f;
    rc.cond_dropout = 0.15f;
    rc.sampler = "ddpm";
    rc.sample_steps = 10;
    rc.codec_mode = "conv_vae";
    rc.channel_layout = "rgb3";
    rc.channel_mode = "Mean";
    rc.codec_train_steps = 7;
    rc.reducer_mode = "attention_pool";
    rc.toy_classes = 3;
    rc.toy_sigma = 0.02f;
    rc.lr = 1e-3f;
    rc.out_dir = "elsewhere";
    auto j = rc.to_json();
    auto back = RunConfig::from_json(j);
    EXPECT_EQ(back.to_json(), j);
}

TEST(RunConfig, MissingKeysKeepDefaults) {
    auto c = RunConfig::from_json(nlohmann::json{{"steps", 99}, {"preset", "Nano"}});
    RunConfig d;
    EXPECT_EQ(c.steps, 99);
    EXPECT_EQ(c.mask_strategy, d.mask_strategy);
    EXPECT_FLOAT_EQ(c.lr, d.lr);
    EXPECT_EQ(c.out_dir, d.out_dir);
}

TEST(RunConfig, ValidateRejectsBadValues) {
    auto bad = [](auto&& mutate) {
        RunConfig rc;
        mutate(rc);
        EXPECT_THROW(rc.validate(), ConfigError);
    };
    bad([](RunConfig& rc) { rc.preset = "Mega"; });
    bad([](RunConfig& rc) { rc.sampler = "euler"; });
    bad([](RunConfig& rc) { rc.mask_ratio = 1.0f; });
    bad([](RunConfig& rc) { rc.mask_ratio = -0.1f; });
    bad([](RunConfig& rc) { rc.lambda = -1.0f; });
    bad([](RunConfig& rc) { rc.batch_size = 0; });
    bad([](RunConfig& rc) { rc.channel_layout = "yuv"; });
    bad([](RunConfig& rc) { rc.toy_classes = 1; });
    EXPECT_NO_THROW(RunConfig{}.validate());
}

TEST(Pipeline, BuildIsDeterministicAndShapesLineUp) {
    auto rc = small_config();
    auto a = build_pipeline(rc);
    auto b = build_pipeline(rc);
    ASSERT_EQ(a.latents.size(), (size_t)rc.toy_n);
    // identity_patch: 16x64 mel -> 4ch 8x32 latent -> patch 2 grid 4x16
    EXPECT_EQ(a.mcfg.grid_rows, 4);
    EXPECT_EQ(a.mcfg.grid_cols, 16);
    EXPECT_EQ(a.latents[0]->shape, (std::vector<int>{4, 8, 32}));
    for (size_t i = 0; i < a.latents.size(); ++i)
        EXPECT_EQ(a.latents[i]->data, b.latents[i]->data);
    expect_params_equal(a, b);
    EXPECT_FLOAT_EQ(a.scale.mean, b.scale.mean);
    EXPECT_FLOAT_EQ(a.scale.std, b.scale.std);
}

TEST(Checkpoint, SaveLoadRestoresEverythingBitExact) {
    auto rc = small_config();
    auto p = build_pipeline(rc);
    train_run(p, 3);
    std::string path = tmp_path("mds_ckpt_roundtrip.mdt");
    save_checkpoint(p, path);
    auto q = load_checkpoint(path);
    expect_params_equal(p, q);
    EXPECT_EQ(q.st.step, p.st.step);
    EXPECT_EQ(q.st.opt.step_count, p.st.opt.step_count);
    EXPECT_EQ(q.st.rng.counter(), p.st.rng.counter());
    EXPECT_EQ(q.st.rng.buf_pos(), p.st.rng.buf_pos());
    // the restored run must continue exactly like the original
    auto r1 = train_run(p, 2);
    auto r2 = train_run(q, 2);
    for (size_t i = 0; i < r1.size(); ++i) {
        EXPECT_EQ(r1[i].step, r2[i].step);
        EXPECT_DOUBLE_EQ(r1[i].total, r2[i].total);
    }
    expect_params_equal(p, q);
    fs::remove(path);
}

TEST(Checkpoint, ResumedRunMatchesSingleRunBitExact) {
    auto rc = small_config();
    auto whole = build_pipeline(rc);
    train_run(whole, 6);

    auto part = build_pipeline(rc);
    train_run(part, 3);
    std::string path = tmp_path("mds_ckpt_resume.mdt");
    save_checkpoint(part, path);
    auto resumed = load_checkpoint(path);
    train_run(resumed, 3);

    expect_params_equal(whole, resumed);
    EXPECT_EQ(whole.st.step, resumed.st.step);
    fs::remove(path);
}

TEST(Training, LossCsvHasHeaderAndOneRowPerStep) {
    auto rc = small_config();
    auto p = build_pipeline(rc);
    std::string path = tmp_path("mds_loss.csv");
    fs::remove(path);
    train_run(p, 3, path);
    std::ifstream in(path);
    std::string line;
    ASSERT_TRUE(std::getline(in, line));
    EXPECT_EQ(line, "step,loss_full,loss_masked,total");
    int rows = 0;
    while (std::getline(in, line)) {
        ++rows;
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 3);
    }
    EXPECT_EQ(rows, 3);
    fs::remove(path);
}

TEST(Training, CsvAppendsOnResumeAndTruncatesOnFreshRun) {
    auto rc = small_config();
    auto p = build_pipeline(rc);
    std::string path = tmp_path("mds_loss_resume.csv");
    fs::remove(path);
    train_run(p, 2, path);
    train_run(p, 2, path);  // step > 0 and file exists -> append
    std::ifstream in(path);
    int lines = 0;
    std::string line;
    while (std::getline(in, line)) ++lines;
    EXPECT_EQ(lines, 1 + 4);
    in.close();
    auto q = build_pipeline(rc);  // step == 0 -> truncate
    train_run(q, 1, path);
    std::ifstream in2(path);
    lines = 0;
    while (std::getline(in2, line)) ++lines;
    EXPECT_EQ(lines, 1 + 1);
    fs::remove(path);
}

TEST(Training, CheckpointFilesWrittenAtConfiguredCadence) {
    auto rc = small_config();  // checkpoint_every == 2
    auto p = build_pipeline(rc);
    std::string dir = tmp_path("mds_ckpt_dir");
    fs::remove_all(dir);
    fs::create_directories(dir);
    train_run(p, 5, "", dir);
    EXPECT_TRUE(fs::exists(dir + "/ckpt_2.mdt"));
    EXPECT_TRUE(fs::exists(dir + "/ckpt_4.mdt"));
    EXPECT_FALSE(fs::exists(dir + "/ckpt_3.mdt"));
    fs::remove_all(dir);
}

TEST(Sampling, EmaScopeSwapsAndRestoresWeights) {
    auto rc = small_config();
    auto p = build_pipeline(rc);
    train_run(p, 2);  // live weights drift from the EMA shadow
    auto before = snapshot_params(p.st.params);
    {
        EmaScope scope(p.st.params, p.st.ema);
        for (size_t i = 0; i < p.st.params.size(); ++i)
            EXPECT_EQ(p.st.params[i]->data, p.st.ema.shadow[i]->data);
    }
    for (size_t i = 0; i < p.st.params.size(); ++i)
        EXPECT_EQ(p.st.params[i]->data, before.data[i]);
}

TEST(Sampling, GenerateMelIsSeedDeterministic) {
    auto rc = small_config();
    auto p = build_pipeline(rc);
    train_run(p, 2);
    Rng a(33), b(33), c(34);
    auto m1 = generate_mel(p, p.data[0].features, a);
    auto m2 = generate_mel(p, p.data[0].features, b);
    auto m3 = generate_mel(p, p.data[0].features, c);
    EXPECT_EQ(m1.values, m2.values);
    EXPECT_NE(m1.values, m3.values);
    EXPECT_EQ(m1.bins, p.spec.mel.mel_bins);
    EXPECT_EQ(m1.frames, p.spec.mel_frames);
    for (float v : m1.values) {
        EXPECT_GE(v, -1.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(Sampling, UnconditionalIgnoresTheProvidedFeatures) {
    auto rc = small_config();
    auto p = build_pipeline(rc);
    Rng a(35), b(35);
    auto m1 = generate_mel(p, p.data[0].features, a, true);
    auto m2 = generate_mel(p, p.data[1].features, b, true);
    EXPECT_EQ(m1.values, m2.values);
}

TEST(Eval, ReportIsDeterministicAndInRange) {
    auto rc = small_config();
    auto p = build_pipeline(rc);
    train_run(p, 2);
    Rng a(36), b(36);
    auto r1 = evaluate(p, 4, a);
    auto r2 = evaluate(p, 4, b);
    EXPECT_DOUBLE_EQ(r1.alignment_acc, r2.alignment_acc);
    EXPECT_DOUBLE_EQ(r1.frechet, r2.frechet);
    EXPECT_DOUBLE_EQ(r1.inception, r2.inception);
    EXPECT_GE(r1.alignment_acc, 0.0);
    EXPECT_LE(r1.alignment_acc, 1.0);
    EXPECT_GE(r1.frechet, 0.0);
    EXPECT_GE(r1.inception, 1.0 - 1e-9);
    Rng c(37);
    EXPECT_THROW(evaluate(p, 0, c), ConfigError);
}
