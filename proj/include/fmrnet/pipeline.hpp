#pragma once

// Inference paths: pixel-level reconstruction with multimodal maps, the
// early-exit patch-level path, and the edge/cloud split around the encoder.

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmrnet/cmfm.hpp"
#include "fmrnet/imaging.hpp"
#include "fmrnet/inspection.hpp"
#include "fmrnet/interchange.hpp"
#include "fmrnet/model.hpp"

namespace fmrnet::pipeline {

enum class Level { patch, pixel };

inline std::string to_string(Level l) { return l == Level::patch ? "patch" : "pixel"; }

enum class ExitMode { always_patch, always_pixel, threshold };

struct ExitPolicy {
  ExitMode mode = ExitMode::threshold;
  std::optional<double> patch_score_threshold;
};

struct PipelineConfig {
  int stride = 0;  // 0 means stride = patch size
  int batch = 64;
  inspect::InspectionConfig inspection;
};

struct StageTiming {
  double encode_ms = 0, score_ms = 0, decode_ms = 0, inspect_ms = 0, total_ms = 0;
};

struct InferenceResult {
  Level level = Level::pixel;
  std::vector<PatchOrigin> origins;
  std::vector<double> patch_scores;  // patch level only
  std::optional<inspect::AnomalyMapSet> maps;  // pixel level only
  Image reconstruction;                        // pixel level only
  StageTiming timing;
};

// Everything the cloud tail needs, as produced by the edge head.
struct EdgeFeatures {
  Image image;
  int patch = 0;
  int stride = 0;
  std::vector<PatchOrigin> origins;
  Tensor<float> latent;                 // [N, C, s, s]
  std::map<int, Tensor<float>> skips;   // GFRM level -> [N, C_l, s_l, s_l]
  std::vector<float> patch_scores;
  std::uint64_t encoder_fingerprint = 0;
};

namespace detail {

using Clock = std::chrono::steady_clock;
inline double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

inline int resolve_stride(const PipelineConfig& cfg, int patch) { return cfg.stride > 0 ? cfg.stride : patch; }

inline Tensor<float> slice_rows(const Tensor<float>& t, int begin, int end) {
  Shape s = t.shape();
  const std::size_t row = t.size() / static_cast<std::size_t>(s[0]);
  s[0] = end - begin;
  std::vector<float> d(t.data() + begin * row, t.data() + end * row);
  return Tensor<float>(s, std::move(d));
}

inline Tensor<float> concat_rows(const std::vector<Tensor<float>>& parts) {
  Shape s = parts.front().shape();
  s[0] = 0;
  std::vector<float> d;
  for (const auto& p : parts) {
    s[0] += p.dim(0);
    d.insert(d.end(), p.values().begin(), p.values().end());
  }
  return Tensor<float>(s, std::move(d));
}

}  // namespace detail

// Encoder pass over every sliding-window patch, plus nearest-entry scores
// when a memory bank is present.
inline EdgeFeatures edge_head(FmrNet<float>& model, const Image& image, const PipelineConfig& cfg,
                              StageTiming* timing = nullptr) {
  const auto& arch = model.config();
  if (image.channels() != arch.image_channels)
    throw std::invalid_argument("image has " + std::to_string(image.channels()) + " channels, model expects " +
                                std::to_string(arch.image_channels));
  NoGradGuard ng;
  model.encoder.eval();
  EdgeFeatures f;
  f.image = image;
  f.patch = arch.patch;
  f.stride = detail::resolve_stride(cfg, arch.patch);
  auto t0 = detail::Clock::now();
  auto grid = slice_patches(image, f.patch, f.stride);
  f.origins = grid.origins;
  std::vector<Tensor<float>> latents;
  std::map<int, std::vector<Tensor<float>>> skips;
  for (std::size_t b = 0; b < grid.patches.size(); b += static_cast<std::size_t>(cfg.batch)) {
    const std::size_t e = std::min(grid.patches.size(), b + static_cast<std::size_t>(cfg.batch));
    std::vector<Image> chunk(grid.patches.begin() + static_cast<std::ptrdiff_t>(b),
                             grid.patches.begin() + static_cast<std::ptrdiff_t>(e));
    auto enc = model.encoder.forward(Var<float>::constant(to_batch<float>(chunk)));
    latents.push_back(enc.latent.value());
    for (int l : arch.gfrm_levels) skips[l].push_back(enc.level(l).value());
  }
  f.latent = detail::concat_rows(latents);
  for (auto& [l, parts] : skips) f.skips[l] = detail::concat_rows(parts);
  if (timing) timing->encode_ms = detail::ms_since(t0);
  f.encoder_fingerprint = model.encoder_fingerprint();
  if (model.has_memory()) {
    auto t1 = detail::Clock::now();
    const auto& bank = model.memory_bank();
    if (bank.encoder_fingerprint() != f.encoder_fingerprint)
      throw std::logic_error("memory bank does not belong to this encoder");
    const int n = f.latent.dim(0);
    for (double s : cmfm::patch_anomaly_scores(f.latent.reshaped({n, arch.latent_dim()}), bank))
      f.patch_scores.push_back(static_cast<float>(s));
    if (timing) timing->score_ms = detail::ms_since(t1);
  }
  return f;
}

// Substitution, GFRM-edited decoding and multimodal inspection from edge
// features.
inline InferenceResult cloud_tail(FmrNet<float>& model, const EdgeFeatures& f, const PipelineConfig& cfg) {
  if (!model.has_memory()) throw std::logic_error("phase-2 checkpoint required: model has no memory bank");
  if (f.encoder_fingerprint != model.encoder_fingerprint())
    throw std::invalid_argument("encoder fingerprint mismatch between features and model");
  const auto& arch = model.config();
  NoGradGuard ng;
  model.train_mode(false);
  InferenceResult res;
  res.level = Level::pixel;
  res.origins = f.origins;
  auto t0 = detail::Clock::now();
  const int n = f.latent.dim(0);
  std::vector<Image> recs;
  for (int b = 0; b < n; b += cfg.batch) {
    const int e = std::min(n, b + cfg.batch);
    nn::EncoderOutput<float> enc;
    // only the GFRM levels and the latent are consulted by the decoder
    enc.features.resize(static_cast<std::size_t>(arch.blocks));
    for (const auto& [l, t] : f.skips) enc.features[static_cast<std::size_t>(l - 1)] = Var<float>::constant(detail::slice_rows(t, b, e));
    enc.latent = Var<float>::constant(detail::slice_rows(f.latent, b, e));
    enc.features.back() = enc.latent;
    auto r = model.decode(std::move(enc), true).decoded.reconstruction.value();
    for (int i = 0; i < e - b; ++i) recs.push_back(image_from_batch(r, i));
  }
  res.timing.decode_ms = detail::ms_since(t0);
  auto t1 = detail::Clock::now();
  const int p = f.patch;
  std::vector<Map2D> gms, ssim, residual;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto& o = f.origins[i];
    auto m = inspect::anomaly_maps(f.image.crop(o.row, o.col, p, p), recs[i], cfg.inspection);
    gms.push_back(std::move(m.gms));
    ssim.push_back(std::move(m.ssim));
    residual.push_back(std::move(m.residual));
  }
  const int h = f.image.height(), w = f.image.width();
  inspect::AnomalyMapSet maps;
  maps.gms = reassemble(f.origins, h, w, p, gms);
  maps.ssim = reassemble(f.origins, h, w, p, ssim);
  maps.residual = reassemble(f.origins, h, w, p, residual);
  inspect::fuse_in_place(maps, cfg.inspection);
  res.maps = std::move(maps);
  PatchGrid grid;
  grid.origins = f.origins;
  grid.source_height = h;
  grid.source_width = w;
  grid.patch = p;
  grid.stride = f.stride;
  res.reconstruction = reassemble_image(grid, recs);
  res.timing.inspect_ms = detail::ms_since(t1);
  return res;
}

inline InferenceResult infer_pixel(FmrNet<float>& model, const Image& image, const PipelineConfig& cfg = {}) {
  if (!model.has_memory()) throw std::logic_error("phase-2 checkpoint required: model has no memory bank");
  auto t0 = detail::Clock::now();
  StageTiming head;
  auto f = edge_head(model, image, cfg, &head);
  auto res = cloud_tail(model, f, cfg);
  res.timing.encode_ms = head.encode_ms;
  res.timing.score_ms = head.score_ms;
  res.timing.total_ms = detail::ms_since(t0);
  return res;
}

// Early exit after the encoder: nearest-entry distances only.
inline InferenceResult infer_patch_level(FmrNet<float>& model, const Image& image, const PipelineConfig& cfg = {}) {
  if (!model.has_memory()) throw std::logic_error("phase-2 checkpoint required: model has no memory bank");
  auto t0 = detail::Clock::now();
  InferenceResult res;
  res.level = Level::patch;
  auto f = edge_head(model, image, cfg, &res.timing);
  res.origins = f.origins;
  res.patch_scores.assign(f.patch_scores.begin(), f.patch_scores.end());
  res.timing.total_ms = detail::ms_since(t0);
  return res;
}

// ------------------------------------------------------------------ early exit

enum class Decision { exit_early, continue_to_pixel };

inline Decision decide_exit(const ExitPolicy& policy, const std::vector<double>& patch_scores) {
  switch (policy.mode) {
    case ExitMode::always_patch: return Decision::exit_early;
    case ExitMode::always_pixel: return Decision::continue_to_pixel;
    case ExitMode::threshold: break;
  }
  if (!policy.patch_score_threshold) throw std::invalid_argument("threshold exit policy requires a calibrated threshold");
  for (double s : patch_scores)
    if (s > *policy.patch_score_threshold) return Decision::continue_to_pixel;
  return Decision::exit_early;
}

// (1 + k * margin) times the largest patch score over the training images.
inline double calibrate_exit_threshold(FmrNet<float>& model, const std::vector<Image>& training_images,
                                       const PipelineConfig& cfg, double margin = 0.1, double k = 1.0) {
  double best = 0.0;
  for (const auto& img : training_images)
    for (double s : infer_patch_level(model, img, cfg).patch_scores) best = std::max(best, s);
  return (1.0 + k * margin) * best;
}

inline InferenceResult infer_auto(FmrNet<float>& model, const Image& image, const ExitPolicy& policy,
                                  const PipelineConfig& cfg = {}) {
  auto t0 = detail::Clock::now();
  StageTiming head;
  auto f = edge_head(model, image, cfg, &head);
  std::vector<double> scores(f.patch_scores.begin(), f.patch_scores.end());
  InferenceResult res;
  if (decide_exit(policy, scores) == Decision::exit_early) {
    res.level = Level::patch;
    res.origins = f.origins;
    res.patch_scores = std::move(scores);
  } else {
    res = cloud_tail(model, f, cfg);
  }
  res.timing.encode_ms = head.encode_ms;
  res.timing.score_ms = head.score_ms;
  res.timing.total_ms = detail::ms_since(t0);
  return res;
}

// ------------------------------------------------------------------ split

inline interchange::Message to_message(const EdgeFeatures& f) {
  interchange::Message m;
  m.encoder_fingerprint = f.encoder_fingerprint;
  const int c = f.image.channels(), h = f.image.height(), w = f.image.width();
  m.tensors.push_back({"image", Tensor<float>({c, h, w}, f.image.values())});
  m.tensors.push_back({"meta", Tensor<float>({3}, std::vector<float>{static_cast<float>(f.patch), static_cast<float>(f.stride),
                                                                     static_cast<float>(f.origins.size())})});
  std::vector<float> coords;
  for (const auto& o : f.origins) coords.push_back(static_cast<float>(o.row)), coords.push_back(static_cast<float>(o.col));
  m.tensors.push_back({"origins", Tensor<float>({static_cast<int>(f.origins.size()), 2}, std::move(coords))});
  m.tensors.push_back({"latent", f.latent});
  for (const auto& [l, t] : f.skips) m.tensors.push_back({"skip." + std::to_string(l), t});
  m.tensors.push_back({"patch_scores", Tensor<float>({static_cast<int>(f.patch_scores.size())}, f.patch_scores)});
  return m;
}

inline EdgeFeatures from_message(const interchange::Message& m) {
  EdgeFeatures f;
  f.encoder_fingerprint = m.encoder_fingerprint;
  const auto& img = m.get("image");
  if (img.rank() != 3) throw interchange::FormatError("interchange: image tensor must be [C,H,W]");
  f.image = Image(img.dim(1), img.dim(2), img.dim(0));
  f.image.values() = img.storage();
  const auto& meta = m.get("meta");
  if (meta.size() != 3) throw interchange::FormatError("interchange: malformed meta tensor");
  f.patch = static_cast<int>(meta[0]);
  f.stride = static_cast<int>(meta[1]);
  const auto& coords = m.get("origins");
  if (coords.rank() != 2 || coords.dim(1) != 2 || static_cast<float>(coords.dim(0)) != meta[2])
    throw interchange::FormatError("interchange: malformed origins tensor");
  for (int i = 0; i < coords.dim(0); ++i)
    f.origins.push_back({static_cast<int>(coords[2 * i]), static_cast<int>(coords[2 * i + 1])});
  f.latent = m.get("latent");
  if (f.latent.rank() != 4 || f.latent.dim(0) != coords.dim(0))
    throw interchange::FormatError("interchange: latent does not match patch count");
  for (const auto& t : m.tensors)
    if (t.name.rfind("skip.", 0) == 0) f.skips[std::stoi(t.name.substr(5))] = t.tensor;
  const auto& scores = m.get("patch_scores");
  f.patch_scores = scores.storage();
  return f;
}

inline std::string split_export(FmrNet<float>& model, const Image& image, const PipelineConfig& cfg = {}) {
  return interchange::encode(to_message(edge_head(model, image, cfg)));
}

inline InferenceResult split_resume(FmrNet<float>& model, std::string_view bytes, const PipelineConfig& cfg = {}) {
  auto f = from_message(interchange::decode(bytes));
  if (f.encoder_fingerprint != model.encoder_fingerprint())
    throw std::invalid_argument("encoder fingerprint mismatch: features were produced by a different encoder");
  for (int l : model.config().gfrm_levels)
    if (!f.skips.count(l)) throw interchange::FormatError("interchange: missing skip features for level " + std::to_string(l));
  return cloud_tail(model, f, cfg);
}

}  // namespace fmrnet::pipeline
