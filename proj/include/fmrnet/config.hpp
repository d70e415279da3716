#pragma once

// INI-style configuration. Keys are addressed as "section.key"; keys may
// themselves contain dots (e.g. [synth] mask.area_range). Unknown keys are
// rejected so typos surface early.
//
//   [general]  seed
//   [arch]     preset (tiny|full), image_channels, patch, blocks, base_channels, max_channels,
//              memory_size, gfrm_levels, perceptual_blocks, texton_size, trainable_smoothing,
//              aux_widths, addressing_widths
//   [train]    t1, t2, learning_rate, beta1, beta2, batch_size, clip_norm, w_rec1, w_adv1, w_lat1,
//              w_rec2, w_adv2, epsilon, psi, perceptual_reduction (sum|mean), saturating_gan,
//              checkpoint_every, loss_log, memory_stride, kmeans_iterations
//   [synth]    lambda_range, mode_probs (occlusion,destructive), mask.shapes, mask.area_range,
//              mask.count, source_dir
//   [inspect]  c0, c1, c2, ssim_window, ssim_sigma, ssim_mode (covariance|strict), median_kernel,
//              normalize_maps, k_sigma
//   [pipeline] stride, batch, exit_mode (threshold|always_patch|always_pixel), exit_threshold,
//              exit_margin, exit_k
//   [data]     root, height, width, noise_p
//
// FMRNET_SEED in the environment overrides general.seed.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "fmrnet/defect_synthesis.hpp"
#include "fmrnet/imaging.hpp"
#include "fmrnet/inspection.hpp"
#include "fmrnet/networks.hpp"
#include "fmrnet/pipeline.hpp"
#include "fmrnet/training.hpp"

namespace fmrnet::config {

using KeyValues = std::map<std::string, std::string>;

struct DataConfig {
  std::filesystem::path root;
  int height = 0;  // 0 keeps the file's size
  int width = 0;
  double noise_p = 0.0;
};

struct AppConfig {
  std::uint64_t seed = 0;
  nn::ArchConfig arch = nn::ArchConfig::tiny();
  train::TrainOptions training;
  int memory_stride = 16;
  int kmeans_iterations = 100;
  pipeline::PipelineConfig pipeline;
  pipeline::ExitPolicy exit;
  double exit_margin = 0.1;
  double exit_k = 1.0;
  DataConfig data;
  std::filesystem::path synth_source_dir;

  std::optional<std::pair<int, int>> working_size() const {
    if (data.height > 0 && data.width > 0) return std::make_pair(data.height, data.width);
    return std::nullopt;
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  const auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": expected a number, got '" + v + "'");
  }
}

inline int to_int(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d != static_cast<int>(d)) throw ConfigError("config key " + key + ": expected an integer, got '" + v + "'");
  return static_cast<int>(d);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key " + key + ": expected a boolean, got '" + v + "'");
}

inline std::vector<int> to_ints(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const auto& s : split_list(v)) out.push_back(to_int(key, s));
  return out;
}

inline std::vector<double> to_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& s : split_list(v)) out.push_back(to_double(key, s));
  return out;
}

inline std::pair<double, double> to_range(const std::string& key, const std::string& v) {
  auto d = to_doubles(key, v);
  if (d.size() != 2) throw ConfigError("config key " + key + ": expected 'low,high'");
  return {d[0], d[1]};
}

}  // namespace detail

inline KeyValues flatten(const boost::property_tree::ptree& tree) {
  KeyValues kv;
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      kv[section] = detail::trim(body.data());
      continue;
    }
    for (const auto& [key, value] : body) kv[section + "." + key] = detail::trim(value.data());
  }
  return kv;
}

inline KeyValues read_ini(const std::filesystem::path& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("cannot parse config: ") + e.what());
  }
  return flatten(tree);
}

inline KeyValues parse_ini(const std::string& text) {
  std::istringstream is(text);
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("cannot parse config: ") + e.what());
  }
  return flatten(tree);
}

inline AppConfig from_key_values(const KeyValues& kv_in) {
  KeyValues kv = kv_in;
  AppConfig c;
  if (auto it = kv.find("arch.preset"); it != kv.end()) {
    if (it->second == "full") c.arch = nn::ArchConfig::full();
    else if (it->second != "tiny") throw ConfigError("arch.preset must be tiny or full");
    kv.erase(it);
  }
  auto& a = c.arch;
  auto& s = c.training.schedule;
  auto& w = c.training.weights;
  auto& sy = c.training.synth;
  auto& in = c.pipeline.inspection;
  using namespace detail;
  for (const auto& [key, v] : kv) {
    if (key == "general.seed") c.seed = static_cast<std::uint64_t>(to_int(key, v));
    else if (key == "arch.image_channels") a.image_channels = to_int(key, v);
    else if (key == "arch.patch") a.patch = to_int(key, v);
    else if (key == "arch.blocks") a.blocks = to_int(key, v);
    else if (key == "arch.base_channels") a.base_channels = to_int(key, v);
    else if (key == "arch.max_channels") a.max_channels = to_int(key, v);
    else if (key == "arch.memory_size") a.memory_size = to_int(key, v);
    else if (key == "arch.gfrm_levels") a.gfrm_levels = to_ints(key, v);
    else if (key == "arch.perceptual_blocks") a.perceptual_blocks = to_ints(key, v);
    else if (key == "arch.texton_size") a.texton_size = to_int(key, v);
    else if (key == "arch.trainable_smoothing") a.trainable_smoothing = to_bool(key, v);
    else if (key == "arch.aux_widths") a.aux_widths = to_ints(key, v);
    else if (key == "arch.addressing_widths") a.addressing_widths = to_ints(key, v);
    else if (key == "train.t1") s.t1 = to_int(key, v);
    else if (key == "train.t2") s.t2 = to_int(key, v);
    else if (key == "train.learning_rate") s.learning_rate = to_double(key, v);
    else if (key == "train.beta1") s.beta1 = to_double(key, v);
    else if (key == "train.beta2") s.beta2 = to_double(key, v);
    else if (key == "train.batch_size") s.batch_size = to_int(key, v);
    else if (key == "train.clip_norm") s.clip_norm = to_double(key, v);
    else if (key == "train.w_rec1") w.rec1 = to_double(key, v);
    else if (key == "train.w_adv1") w.adv1 = to_double(key, v);
    else if (key == "train.w_lat1") w.lat1 = to_double(key, v);
    else if (key == "train.w_rec2") w.rec2 = to_double(key, v);
    else if (key == "train.w_adv2") w.adv2 = to_double(key, v);
    else if (key == "train.epsilon") w.epsilon = to_double(key, v);
    else if (key == "train.psi") w.psi = to_doubles(key, v);
    else if (key == "train.perceptual_reduction") {
      if (v == "sum") w.perceptual_reduction = train::Reduction::sum;
      else if (v == "mean") w.perceptual_reduction = train::Reduction::mean;
      else throw ConfigError("train.perceptual_reduction must be sum or mean");
    } else if (key == "train.saturating_gan") w.saturating_gan = to_bool(key, v);
    else if (key == "train.checkpoint_every") c.training.checkpoint_every = to_int(key, v);
    else if (key == "train.loss_log") c.training.loss_log = v;
    else if (key == "train.memory_stride") c.memory_stride = to_int(key, v);
    else if (key == "train.kmeans_iterations") c.kmeans_iterations = to_int(key, v);
    else if (key == "synth.lambda_range") std::tie(sy.lambda_min, sy.lambda_max) = to_range(key, v);
    else if (key == "synth.mode_probs") {
      auto [occ, des] = to_range(key, v);
      if (occ < 0 || des < 0 || occ + des <= 0) throw ConfigError("synth.mode_probs must be non-negative");
      sy.occlusion_probability = occ / (occ + des);
    } else if (key == "synth.mask.shapes") {
      sy.mask.shapes.clear();
      for (const auto& n : split_list(v)) {
        try {
          sy.mask.shapes.push_back(synth::parse_mask_shape(n));
        } catch (const std::exception& e) {
          throw ConfigError(std::string("synth.mask.shapes: ") + e.what());
        }
      }
    } else if (key == "synth.mask.area_range") std::tie(sy.mask.area_min, sy.mask.area_max) = to_range(key, v);
    else if (key == "synth.mask.count") sy.mask.count = to_int(key, v);
    else if (key == "synth.source_dir") c.synth_source_dir = v;
    else if (key == "inspect.c0") in.c0 = to_double(key, v);
    else if (key == "inspect.c1") in.c1 = to_double(key, v);
    else if (key == "inspect.c2") in.c2 = to_double(key, v);
    else if (key == "inspect.ssim_window") in.ssim_window = to_int(key, v);
    else if (key == "inspect.ssim_sigma") in.ssim_sigma = to_double(key, v);
    else if (key == "inspect.ssim_mode") {
      if (v == "covariance") in.ssim_mode = inspect::SsimMode::covariance;
      else if (v == "strict") in.ssim_mode = inspect::SsimMode::strict;
      else throw ConfigError("inspect.ssim_mode must be covariance or strict");
    } else if (key == "inspect.median_kernel") in.median_kernel = to_int(key, v);
    else if (key == "inspect.normalize_maps") in.normalize_maps = to_bool(key, v);
    else if (key == "inspect.k_sigma") in.k_sigma = to_double(key, v);
    else if (key == "pipeline.stride") c.pipeline.stride = to_int(key, v);
    else if (key == "pipeline.batch") c.pipeline.batch = to_int(key, v);
    else if (key == "pipeline.exit_mode") {
      if (v == "threshold") c.exit.mode = pipeline::ExitMode::threshold;
      else if (v == "always_patch") c.exit.mode = pipeline::ExitMode::always_patch;
      else if (v == "always_pixel") c.exit.mode = pipeline::ExitMode::always_pixel;
      else throw ConfigError("pipeline.exit_mode must be threshold, always_patch or always_pixel");
    } else if (key == "pipeline.exit_threshold") c.exit.patch_score_threshold = to_double(key, v);
    else if (key == "pipeline.exit_margin") c.exit_margin = to_double(key, v);
    else if (key == "pipeline.exit_k") c.exit_k = to_double(key, v);
    else if (key == "data.root") c.data.root = v;
    else if (key == "data.height") c.data.height = to_int(key, v);
    else if (key == "data.width") c.data.width = to_int(key, v);
    else if (key == "data.noise_p") c.data.noise_p = to_double(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  if (const char* env = std::getenv("FMRNET_SEED"); env && *env) {
    try {
      c.seed = std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("FMRNET_SEED is not an integer: ") + env);
    }
  }
  c.training.schedule.seed = c.seed;
  try {
    c.arch.validate();
    c.training.schedule.validate();
    c.training.weights.validate();
    c.pipeline.inspection.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.pipeline.batch < 1) throw ConfigError("pipeline.batch must be >= 1");
  if (c.memory_stride < 1) throw ConfigError("train.memory_stride must be >= 1");
  if (!c.synth_source_dir.empty()) c.training.pool = synth::AnomalySourcePool::from_directory(c.synth_source_dir);
  return c;
}

inline AppConfig load(const std::filesystem::path& path) { return from_key_values(read_ini(path)); }

inline AppConfig defaults() { return from_key_values({}); }

}  // namespace fmrnet::config
