#pragma once

// Desk-scale end-to-end run: procedural striped corpus, both training phases,
// memory establishment and pixel/patch evaluation on held-out defect images.

#include <chrono>
#include <cstdint>
#include <random>
#include <vector>

#include "fmrnet/defect_synthesis.hpp"
#include "fmrnet/inspection.hpp"
#include "fmrnet/model.hpp"
#include "fmrnet/pipeline.hpp"
#include "fmrnet/procedural.hpp"
#include "fmrnet/training.hpp"

namespace fmrnet::smoke {

struct SmokeConfig {
  int train_images = 200;
  int test_images = 50;
  int image_size = 64;
  nn::ArchConfig arch = nn::ArchConfig::tiny();
  train::TrainOptions training;
  int memory_stride = 16;
  pipeline::PipelineConfig inference;
  double ambiguous_coverage = 0.02;  // patches with 0 < coverage < this are left out of the patch AUC
  procedural::StripeParams texture;
  std::uint64_t seed = 0;

  SmokeConfig() {
    training.schedule.t1 = 2000;
    training.schedule.t2 = 1000;
    training.schedule.batch_size = 16;
  }
};

struct Corpus {
  std::vector<Image> train;
  std::vector<Image> test;
  std::vector<Map2D> masks;  // ground truth for test images
};

inline Corpus make_corpus(const SmokeConfig& cfg) {
  Corpus c;
  const int s = cfg.image_size, ch = cfg.arch.image_channels;
  std::mt19937_64 train_rng(cfg.seed * 1000003ULL + 11), test_rng(cfg.seed * 1000003ULL + 29);
  for (int i = 0; i < cfg.train_images; ++i) c.train.push_back(procedural::striped_texture(s, s, ch, cfg.texture, train_rng));
  synth::SynthConfig sc = cfg.training.synth;
  const auto pool = synth::AnomalySourcePool::procedural();
  for (int i = 0; i < cfg.test_images; ++i) {
    Image clean = procedural::striped_texture(s, s, ch, cfg.texture, test_rng);
    auto pair = synth::make_training_pair(clean, sc, pool, test_rng(), synth::DefectMode::destructive);
    Map2D mask(s, s);
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) mask(y, x) = pair.mask.at(0, y, x);
    c.test.push_back(std::move(pair.synthetic));
    c.masks.push_back(std::move(mask));
  }
  return c;
}

struct SmokeResult {
  double pixel_auc = 0;
  double patch_auc = 0;
  int patch_positives = 0, patch_negatives = 0, patch_excluded = 0;
  std::vector<double> patch_ms, pixel_ms;  // per test image
  train::PhaseReport phase1, phase2;
  double memory_seconds = 0;
};

// Fraction of each patch covered by the ground-truth mask.
inline std::vector<double> patch_coverage(const Map2D& mask, const std::vector<PatchOrigin>& origins, int patch) {
  std::vector<double> out;
  for (const auto& o : origins) out.push_back(mask.block(o.row, o.col, patch, patch).mean());
  return out;
}

inline SmokeResult evaluate(FmrNet<float>& model, const Corpus& corpus, const SmokeConfig& cfg) {
  SmokeResult r;
  std::vector<double> pixel_scores, patch_scores;
  std::vector<int> pixel_labels, patch_labels;
  for (std::size_t i = 0; i < corpus.test.size(); ++i) {
    const auto& img = corpus.test[i];
    auto patch = pipeline::infer_patch_level(model, img, cfg.inference);
    auto pixel = pipeline::infer_pixel(model, img, cfg.inference);
    r.patch_ms.push_back(patch.timing.total_ms);
    r.pixel_ms.push_back(pixel.timing.total_ms);
    const auto& fused = pixel.maps->fused;
    const auto& mask = corpus.masks[i];
    for (Eigen::Index k = 0; k < fused.size(); ++k) {
      pixel_scores.push_back(fused.data()[k]);
      pixel_labels.push_back(mask.data()[k] > 0.5 ? 1 : 0);
    }
    auto cov = patch_coverage(mask, patch.origins, model.config().patch);
    for (std::size_t k = 0; k < cov.size(); ++k) {
      if (cov[k] > 0.0 && cov[k] < cfg.ambiguous_coverage) {
        ++r.patch_excluded;
        continue;
      }
      const int label = cov[k] > 0.0 ? 1 : 0;
      (label ? r.patch_positives : r.patch_negatives)++;
      patch_scores.push_back(patch.patch_scores[k]);
      patch_labels.push_back(label);
    }
  }
  r.pixel_auc = inspect::auc_roc(pixel_scores, pixel_labels);
  r.patch_auc = inspect::auc_roc(patch_scores, patch_labels);
  return r;
}

// Trains a fresh model on the corpus and evaluates it.
inline SmokeResult run(FmrNet<float>& model, const Corpus& corpus, const SmokeConfig& cfg) {
  auto p1 = train::train_phase1(model, corpus.train, cfg.training);
  const auto t0 = std::chrono::steady_clock::now();
  train::build_memory(model, corpus.train, cfg.memory_stride, cfg.seed);
  const double mem_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  auto p2 = train::train_phase2(model, corpus.train, cfg.training);
  auto r = evaluate(model, corpus, cfg);
  r.phase1 = std::move(p1);
  r.phase2 = std::move(p2);
  r.memory_seconds = mem_s;
  return r;
}

}  // namespace fmrnet::smoke
