#include <gtest/gtest.h>

#include <cstdlib>
#include <cstring>
#include <limits>

#include "fmrnet/config.hpp"
#include "fmrnet/pipeline.hpp"
#include "fmrnet/procedural.hpp"
#include "fmrnet/training.hpp"
#include "test_support.hpp"

using namespace fmrnet;
using namespace fmrnet::pipeline;
using fmrnet::testing::random_image;

namespace {

nn::ArchConfig small_arch() {
  nn::ArchConfig c;
  c.patch = 16;
  c.blocks = 2;
  c.base_channels = 8;
  c.gfrm_levels = {1};
  c.perceptual_blocks = {1, 2};
  c.memory_size = 16;
  c.aux_widths = {32, 16};
  c.addressing_widths = {32};
  return c;
}

// Briefly trained model with a memory bank; enough to exercise every path.
std::unique_ptr<FmrNet<float>> ready_model(std::uint64_t seed = 0) {
  auto m = std::make_unique<FmrNet<float>>(small_arch(), seed);
  std::mt19937_64 rng(seed + 1);
  std::vector<Image> images;
  for (int i = 0; i < 4; ++i) images.push_back(procedural::striped_texture(32, 32, 1, procedural::StripeParams{}, rng));
  train::TrainOptions opt;
  opt.schedule.t1 = 3;
  opt.schedule.t2 = 3;
  opt.schedule.batch_size = 4;
  train::train_phase1(*m, images, opt);
  train::build_memory(*m, images, 4, 0);
  train::train_phase2(*m, images, opt);
  return m;
}

}  // namespace

TEST(Interchange, RoundTripBitIdentical) {
  interchange::Message m;
  m.encoder_fingerprint = 0x0123456789abcdefULL;
  std::mt19937_64 rng(1);
  std::normal_distribution<float> d;
  Tensor<float> a({2, 3, 4}), b({5});
  for (auto& v : a.values()) v = d(rng);
  b.values()[0] = -0.0f;
  b.values()[1] = std::numeric_limits<float>::denorm_min();
  b.values()[2] = std::numeric_limits<float>::infinity();
  b.values()[3] = 1e30f;
  m.tensors = {{"a", a}, {"b", b}};
  const auto bytes = interchange::encode(m);
  EXPECT_EQ(bytes.substr(0, 4), "FMRX");
  auto back = interchange::decode(bytes);
  EXPECT_EQ(back.encoder_fingerprint, m.encoder_fingerprint);
  ASSERT_EQ(back.tensors.size(), 2u);
  EXPECT_EQ(back.get("a").shape(), a.shape());
  EXPECT_EQ(std::memcmp(back.get("a").data(), a.data(), a.size() * 4), 0);
  EXPECT_EQ(std::memcmp(back.get("b").data(), b.data(), b.size() * 4), 0);
  EXPECT_EQ(interchange::encode(back), bytes);
  EXPECT_THROW(back.get("c"), interchange::FormatError);
}

TEST(Interchange, CorruptionRejected) {
  interchange::Message m;
  m.tensors = {{"a", Tensor<float>({3, 3}, 1.0f)}};
  const auto bytes = interchange::encode(m);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(interchange::decode(bad), interchange::FormatError);
  bad = bytes;
  bad[4] = 2;
  try {
    interchange::decode(bad);
    FAIL() << "expected FormatError";
  } catch (const interchange::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  bad = bytes;
  bad[6] = 7;
  EXPECT_THROW(interchange::decode(bad), interchange::FormatError);
  for (std::size_t cut : {std::size_t{3}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(interchange::decode(bytes.substr(0, cut)), interchange::FormatError) << cut;
  }
  EXPECT_THROW(interchange::decode(bytes + "x"), interchange::FormatError);
}

TEST(DecideExit, Policies) {
  ExitPolicy t{ExitMode::threshold, 1.0};
  EXPECT_EQ(decide_exit(t, {0.0, 0.0, 0.0}), Decision::exit_early);
  EXPECT_EQ(decide_exit(t, {0.2, 1.5, 0.1}), Decision::continue_to_pixel);
  EXPECT_EQ(decide_exit(t, {1.0}), Decision::exit_early);
  EXPECT_EQ(decide_exit({ExitMode::always_pixel, std::nullopt}, {0.0}), Decision::continue_to_pixel);
  EXPECT_EQ(decide_exit({ExitMode::always_patch, std::nullopt}, {99.0}), Decision::exit_early);
  EXPECT_THROW(decide_exit({ExitMode::threshold, std::nullopt}, {0.0}), std::invalid_argument);
}

TEST(Inference, NoMemoryIsAnError) {
  FmrNet<float> m(small_arch(), 0);
  try {
    infer_pixel(m, random_image(32, 32, 1, 1));
    FAIL() << "expected logic_error";
  } catch (const std::logic_error& e) {
    EXPECT_NE(std::string(e.what()).find("phase-2 checkpoint required"), std::string::npos);
  }
  EXPECT_THROW(infer_patch_level(m, random_image(32, 32, 1, 1)), std::logic_error);
}

TEST(Inference, PixelResultShapesAndPayloads) {
  auto m = ready_model();
  auto img = random_image(40, 36, 1, 2);
  auto r = infer_pixel(*m, img);
  EXPECT_EQ(r.level, Level::pixel);
  ASSERT_TRUE(r.maps.has_value());
  EXPECT_TRUE(r.patch_scores.empty());
  EXPECT_EQ(r.maps->fused.rows(), 40);
  EXPECT_EQ(r.maps->fused.cols(), 36);
  EXPECT_EQ(r.reconstruction.height(), 40);
  EXPECT_EQ(r.origins.size(), slice_patches(img, 16, 16).size());
  EXPECT_THROW(infer_pixel(*m, random_image(32, 32, 3, 1)), std::invalid_argument);
}

TEST(Inference, PatchLevelSkipsDecoderAndGfrm) {
  auto m = ready_model();
  auto img = random_image(48, 48, 1, 3);
  const auto dec = m->decoder.forward_calls(), gf = m->gfrm.forward_calls(), addr = m->addressing.forward_calls();
  auto r = infer_patch_level(*m, img);
  EXPECT_EQ(m->decoder.forward_calls(), dec);
  EXPECT_EQ(m->gfrm.forward_calls(), gf);
  EXPECT_EQ(m->addressing.forward_calls(), addr);
  EXPECT_EQ(r.level, Level::patch);
  EXPECT_FALSE(r.maps.has_value());
  ASSERT_EQ(r.patch_scores.size(), 9u);
  for (double s : r.patch_scores) EXPECT_GE(s, 0.0);
  infer_pixel(*m, img);
  EXPECT_GT(m->decoder.forward_calls(), dec);
  EXPECT_GT(m->gfrm.forward_calls(), gf);
}

TEST(Inference, PatchScoresMatchBruteForce) {
  auto m = ready_model();
  auto img = random_image(32, 32, 1, 4);
  auto r = infer_patch_level(*m, img);
  auto grid = slice_patches(img, 16, 16);
  NoGradGuard ng;
  m->encoder.eval();
  auto z = m->encoder.forward(Var<float>::constant(to_batch<float>(grid.patches))).latent_vectors();
  auto expect = cmfm::patch_anomaly_scores(z.value(), m->memory_bank());
  ASSERT_EQ(expect.size(), r.patch_scores.size());
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(r.patch_scores[i], expect[i], 1e-5 * (1 + expect[i]));
}

TEST(Inference, AutoFollowsPolicy) {
  auto m = ready_model();
  auto img = random_image(32, 32, 1, 5);
  EXPECT_EQ(infer_auto(*m, img, {ExitMode::always_patch, std::nullopt}).level, Level::patch);
  EXPECT_EQ(infer_auto(*m, img, {ExitMode::always_pixel, std::nullopt}).level, Level::pixel);
  EXPECT_EQ(infer_auto(*m, img, {ExitMode::threshold, 1e9}).level, Level::patch);
  EXPECT_EQ(infer_auto(*m, img, {ExitMode::threshold, -1.0}).level, Level::pixel);
}

TEST(Inference, CalibratedThresholdAboveTrainingScores) {
  auto m = ready_model();
  std::vector<Image> imgs{random_image(32, 32, 1, 6), random_image(32, 32, 1, 7)};
  const double t = calibrate_exit_threshold(*m, imgs, {}, 0.1, 1.0);
  double best = 0;
  for (const auto& img : imgs)
    for (double s : infer_patch_level(*m, img).patch_scores) best = std::max(best, s);
  EXPECT_NEAR(t, 1.1 * best, 1e-12);
  for (const auto& img : imgs) EXPECT_EQ(infer_auto(*m, img, {ExitMode::threshold, t}).level, Level::patch);
}

TEST(Split, EquivalentToMonolithicOnTenImages) {
  auto m = ready_model();
  PipelineConfig cfg;
  cfg.stride = 12;
  for (std::uint64_t i = 0; i < 10; ++i) {
    auto img = random_image(32 + static_cast<int>(i % 3) * 5, 40, 1, 100 + i);
    auto mono = infer_pixel(*m, img, cfg);
    const auto bytes = split_export(*m, img, cfg);
    auto split = split_resume(*m, bytes, cfg);
    ASSERT_TRUE(split.maps.has_value());
    EXPECT_LE((split.maps->fused - mono.maps->fused).abs().maxCoeff(), 1e-6);
    EXPECT_LE((split.maps->gms - mono.maps->gms).abs().maxCoeff(), 1e-6);
    auto patch = infer_patch_level(*m, img, cfg);
    auto msg = from_message(interchange::decode(bytes));
    ASSERT_EQ(msg.patch_scores.size(), patch.patch_scores.size());
    for (std::size_t k = 0; k < msg.patch_scores.size(); ++k)
      EXPECT_EQ(static_cast<double>(msg.patch_scores[k]), patch.patch_scores[k]);
    EXPECT_EQ(msg.image, img);
  }
}

TEST(Split, StaleFingerprintRefused) {
  auto a = ready_model(0), b = ready_model(1);
  const auto bytes = split_export(*a, random_image(32, 32, 1, 8));
  try {
    split_resume(*b, bytes);
    FAIL() << "expected invalid_argument";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("fingerprint"), std::string::npos);
  }
  EXPECT_THROW(split_resume(*a, bytes.substr(0, bytes.size() - 8)), interchange::FormatError);
}

TEST(Config, DefaultsAndOverrides) {
  ::unsetenv("FMRNET_SEED");
  auto d = config::defaults();
  EXPECT_EQ(d.arch.canonical(), nn::ArchConfig::tiny().canonical());
  EXPECT_EQ(d.training.weights.rec1, 100.0);
  EXPECT_EQ(d.pipeline.inspection.k_sigma, 3.0);
  auto c = config::from_key_values(config::parse_ini(
      "[general]\nseed = 12\n[arch]\npreset = full\n[train]\nt1 = 5\nw_adv1 = 0.5\n"
      "[synth]\nmask.area_range = 0.02, 0.04\n[inspect]\nssim_mode = strict\n[pipeline]\nexit_mode = always_pixel\n"));
  EXPECT_EQ(c.seed, 12u);
  EXPECT_EQ(c.training.schedule.seed, 12u);
  EXPECT_EQ(c.arch.patch, 64);
  EXPECT_EQ(c.training.schedule.t1, 5);
  EXPECT_EQ(c.training.weights.adv1, 0.5);
  EXPECT_EQ(c.training.synth.mask.area_min, 0.02);
  EXPECT_EQ(c.training.synth.mask.area_max, 0.04);
  EXPECT_EQ(c.pipeline.inspection.ssim_mode, inspect::SsimMode::strict);
  EXPECT_EQ(c.exit.mode, ExitMode::always_pixel);
}

TEST(Config, UnknownKeyAndBadValuesRejected) {
  try {
    config::from_key_values(config::parse_ini("[train]\nlearning_rat = 0.1\n"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.learning_rat"), std::string::npos);
  }
  EXPECT_THROW(config::from_key_values(config::parse_ini("[train]\nt1 = abc\n")), ConfigError);
  EXPECT_THROW(config::from_key_values(config::parse_ini("[inspect]\nmedian_kernel = 4\n")), ConfigError);
  EXPECT_THROW(config::from_key_values(config::parse_ini("[arch]\npatch = 20\n")), ConfigError);
}

TEST(Config, SeedEnvironmentOverride) {
  ::setenv("FMRNET_SEED", "99", 1);
  auto c = config::from_key_values(config::parse_ini("[general]\nseed = 12\n"));
  ::unsetenv("FMRNET_SEED");
  EXPECT_EQ(c.seed, 99u);
}
