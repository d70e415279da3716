// Command-line front end: synthesis previews, training, memory establishment,
// inspection, dataset evaluation, split execution and the desk-scale smoke run.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fmrnet/checkpoint.hpp"
#include "fmrnet/config.hpp"
#include "fmrnet/defect_synthesis.hpp"
#include "fmrnet/imaging.hpp"
#include "fmrnet/inspection.hpp"
#include "fmrnet/pipeline.hpp"
#include "fmrnet/smoke.hpp"
#include "fmrnet/training.hpp"

namespace fs = std::filesystem;
using fmrnet::FmrNet;
using nlohmann::json;

namespace {

fmrnet::config::AppConfig load_config(const std::string& path) {
  return path.empty() ? fmrnet::config::defaults() : fmrnet::config::load(path);
}

std::vector<fmrnet::Image> load_training_images(const fmrnet::config::AppConfig& cfg) {
  if (cfg.data.root.empty()) throw fmrnet::ConfigError("data.root is not set");
  auto index = fmrnet::load_split(cfg.data.root, fmrnet::Split::train);
  std::vector<fmrnet::Image> out;
  for (const auto& e : index.entries)
    out.push_back(fmrnet::load_image(e.image_path, cfg.arch.image_channels, cfg.working_size()));
  std::cerr << "loaded " << out.size() << " training images\n";
  return out;
}

// A model for inference: from the checkpoint's own architecture, or checked
// against the config when one is given.
std::unique_ptr<FmrNet<float>> open_model(const std::string& ckpt, const std::string& config_path,
                                          const fmrnet::config::AppConfig& cfg, fmrnet::checkpoint::Info* info) {
  if (config_path.empty()) return fmrnet::checkpoint::load(ckpt, info);
  auto model = std::make_unique<FmrNet<float>>(cfg.arch, cfg.seed);
  *info = fmrnet::checkpoint::load_into(ckpt, *model);
  return model;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + p.string());
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

json timing_json(const fmrnet::pipeline::StageTiming& t) {
  return {{"encode_ms", t.encode_ms}, {"score_ms", t.score_ms}, {"decode_ms", t.decode_ms},
          {"inspect_ms", t.inspect_ms}, {"total_ms", t.total_ms}};
}

// Writes maps and a metrics record for one inference result.
void write_result(const fs::path& out_dir, const std::string& stem, const fmrnet::pipeline::InferenceResult& r,
                  const fmrnet::inspect::InspectionConfig& icfg, bool all_maps) {
  fs::create_directories(out_dir);
  json rec;
  rec["level"] = fmrnet::pipeline::to_string(r.level);
  rec["timing"] = timing_json(r.timing);
  if (r.level == fmrnet::pipeline::Level::patch) {
    json patches = json::array();
    for (std::size_t i = 0; i < r.origins.size(); ++i)
      patches.push_back({{"row", r.origins[i].row}, {"col", r.origins[i].col}, {"score", r.patch_scores[i]}});
    rec["patches"] = patches;
  } else {
    const auto& m = *r.maps;
    fmrnet::inspect::Threshold t;
    auto mask = fmrnet::inspect::binarize_ksigma(m.fused, icfg.k_sigma, &t);
    const double peak = std::max(m.fused.maxCoeff(), 1e-12);
    fmrnet::save_map_png16(out_dir / (stem + "_fused.png"), m.fused, peak);
    fmrnet::save_map_png16(out_dir / (stem + "_mask.png"), mask, 1.0);
    if (all_maps) {
      fmrnet::save_map_png16(out_dir / (stem + "_gms.png"), m.gms, 1.0);
      fmrnet::save_map_png16(out_dir / (stem + "_ssim.png"), m.ssim.min(1.0).max(0.0), 1.0);
      fmrnet::save_map_png16(out_dir / (stem + "_residual.png"), m.residual, 1.0);
      fmrnet::save_image(out_dir / (stem + "_reconstruction.png"), r.reconstruction);
    }
    rec["fused_png_scale"] = peak;
    rec["threshold"] = {{"value", t.value}, {"mean", t.mean}, {"std", t.stddev}, {"k", icfg.k_sigma}};
    rec["flagged_pixels"] = static_cast<long>(mask.sum());
    rec["max_fused"] = m.fused.maxCoeff();
  }
  std::ofstream(out_dir / (stem + ".json")) << rec.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fmrnet: reconstruction-based textured-surface defect inspection"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("-c,--config", config_path, "INI configuration file")->check(CLI::ExistingFile);

  // synthesize
  auto* syn = app.add_subcommand("synthesize", "write synthetic defect previews for a defect-free image");
  std::string syn_input, syn_out, syn_mode = "random";
  int syn_count = 8;
  syn->add_option("--input", syn_input, "defect-free image")->required()->check(CLI::ExistingFile);
  syn->add_option("--out", syn_out, "output directory")->required();
  syn->add_option("--count", syn_count, "number of samples")->check(CLI::PositiveNumber);
  syn->add_option("--mode", syn_mode, "occlusion, destructive or random")
      ->check(CLI::IsMember({"occlusion", "destructive", "random"}));

  // train
  auto* tr = app.add_subcommand("train", "run training phases");
  std::string tr_phase = "all", tr_out, tr_resume;
  tr->add_option("--phase", tr_phase, "1, 2 or all")->check(CLI::IsMember({"1", "2", "all"}));
  tr->add_option("--out", tr_out, "checkpoint to write")->required();
  tr->add_option("--resume", tr_resume, "checkpoint to start from (required for --phase 2)")->check(CLI::ExistingFile);

  // build-memory
  auto* bm = app.add_subcommand("build-memory", "establish the memory bank from training patches");
  std::string bm_in, bm_out;
  bm->add_option("--checkpoint", bm_in, "phase-1 checkpoint")->required()->check(CLI::ExistingFile);
  bm->add_option("--out", bm_out, "checkpoint to write")->required();

  // inspect
  auto* in = app.add_subcommand("inspect", "inspect one image");
  std::string in_ckpt, in_image, in_out, in_level = "pixel";
  bool in_all = false;
  in->add_option("--checkpoint", in_ckpt)->required()->check(CLI::ExistingFile);
  in->add_option("--image", in_image)->required()->check(CLI::ExistingFile);
  in->add_option("--out", in_out, "output directory")->required();
  in->add_option("--level", in_level)->check(CLI::IsMember({"patch", "pixel", "auto"}));
  in->add_flag("--all-maps", in_all, "also write per-modality maps and the reconstruction");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "dataset metrics over the test split");
  std::string ev_ckpt, ev_out, ev_csv;
  ev->add_option("--checkpoint", ev_ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--out", ev_out, "metrics JSON")->required();
  ev->add_option("--csv", ev_csv, "per-image CSV");

  // split
  auto* se = app.add_subcommand("split-export", "edge head: encode an image and write interchange bytes");
  std::string se_ckpt, se_image, se_out;
  se->add_option("--checkpoint", se_ckpt)->required()->check(CLI::ExistingFile);
  se->add_option("--image", se_image)->required()->check(CLI::ExistingFile);
  se->add_option("--out", se_out, "interchange file")->required();
  auto* sr = app.add_subcommand("split-resume", "cloud tail: resume pixel-level inference from interchange bytes");
  std::string sr_ckpt, sr_in, sr_out;
  bool sr_all = false;
  sr->add_option("--checkpoint", sr_ckpt)->required()->check(CLI::ExistingFile);
  sr->add_option("--in", sr_in, "interchange file")->required()->check(CLI::ExistingFile);
  sr->add_option("--out", sr_out, "output directory")->required();
  sr->add_flag("--all-maps", sr_all);

  // smoke
  auto* sm = app.add_subcommand("smoke", "desk-scale end-to-end run on a procedural corpus");
  int sm_t1 = 2000, sm_t2 = 1000;
  std::string sm_out;
  sm->add_option("--t1", sm_t1)->check(CLI::PositiveNumber);
  sm->add_option("--t2", sm_t2)->check(CLI::PositiveNumber);
  sm->add_option("--out", sm_out, "report JSON");
  bool sm_report_only = false;
  sm->add_flag("--report-only", sm_report_only, "exit 0 once the report is written, whatever the metrics");

  CLI11_PARSE(app, argc, argv);

  try {
    auto cfg = load_config(config_path);

    if (*syn) {
      auto img = fmrnet::load_image(syn_input, cfg.arch.image_channels, cfg.working_size());
      fs::create_directories(syn_out);
      const auto& pool = cfg.training.pool;
      for (int i = 0; i < syn_count; ++i) {
        std::optional<fmrnet::synth::DefectMode> mode;
        if (syn_mode == "occlusion") mode = fmrnet::synth::DefectMode::occlusion;
        if (syn_mode == "destructive") mode = fmrnet::synth::DefectMode::destructive;
        auto pair = fmrnet::synth::make_training_pair(img, cfg.training.synth, pool, cfg.seed * 7919 + i, mode);
        const std::string stem = "synthetic_" + std::to_string(i);
        fmrnet::save_image(fs::path(syn_out) / (stem + ".png"), pair.synthetic);
        fmrnet::save_image(fs::path(syn_out) / (stem + "_mask.png"), pair.mask);
        std::cout << stem << ' ' << (pair.mode == fmrnet::synth::DefectMode::occlusion ? "occlusion" : "destructive")
                  << " lambda=" << pair.lambda << " area=" << fmrnet::synth::mask_fraction(pair.mask) << '\n';
      }
      return 0;
    }

    if (*tr) {
      auto images = load_training_images(cfg);
      auto model = std::make_unique<FmrNet<float>>(cfg.arch, cfg.seed);
      if (!tr_resume.empty()) fmrnet::checkpoint::load_into(tr_resume, *model);
      cfg.training.report_every = 100;
      fmrnet::train::Phase current = fmrnet::train::Phase::phase1;
      cfg.training.on_checkpoint = [&](fmrnet::train::Phase p, int it) {
        fmrnet::checkpoint::save(tr_out, *model, p, it);
      };
      if (tr_phase == "1" || tr_phase == "all") {
        auto r = fmrnet::train::train_phase1(*model, images, cfg.training);
        fmrnet::checkpoint::save(tr_out, *model, current, cfg.training.schedule.t1);
        std::cerr << "phase 1 done in " << r.seconds << " s\n";
      }
      if (tr_phase == "2" || tr_phase == "all") {
        if (tr_phase == "2" && tr_resume.empty()) throw fmrnet::ConfigError("--phase 2 needs --resume <phase-1 checkpoint>");
        if (!model->has_memory() || model->memory_bank().encoder_fingerprint() != model->encoder_fingerprint()) {
          fmrnet::train::build_memory(*model, images, cfg.memory_stride, cfg.seed, cfg.kmeans_iterations);
          std::cerr << "memory bank established (" << model->memory_bank().size() << " entries)\n";
        }
        current = fmrnet::train::Phase::phase2;
        auto r = fmrnet::train::train_phase2(*model, images, cfg.training);
        const double thr = fmrnet::pipeline::calibrate_exit_threshold(*model, images, cfg.pipeline, cfg.exit_margin, cfg.exit_k);
        fmrnet::checkpoint::save(tr_out, *model, current, cfg.training.schedule.t2, thr);
        std::cerr << "phase 2 done in " << r.seconds << " s; exit threshold " << thr << '\n';
      }
      return 0;
    }

    if (*bm) {
      auto images = load_training_images(cfg);
      auto model = std::make_unique<FmrNet<float>>(cfg.arch, cfg.seed);
      auto info = fmrnet::checkpoint::load_into(bm_in, *model);
      fmrnet::train::build_memory(*model, images, cfg.memory_stride, cfg.seed, cfg.kmeans_iterations);
      fmrnet::checkpoint::save(bm_out, *model, info.phase, info.iteration);
      std::cout << "memory bank: " << model->memory_bank().size() << " x " << model->memory_bank().dimension() << '\n';
      return 0;
    }

    if (*in) {
      fmrnet::checkpoint::Info info;
      auto model = open_model(in_ckpt, config_path, cfg, &info);
      auto img = fmrnet::load_image(in_image, model->config().image_channels, cfg.working_size());
      if (cfg.data.noise_p > 0) img = fmrnet::inject_speckle(img, cfg.data.noise_p, cfg.seed);
      fmrnet::pipeline::InferenceResult r;
      if (in_level == "patch") r = fmrnet::pipeline::infer_patch_level(*model, img, cfg.pipeline);
      else if (in_level == "pixel") r = fmrnet::pipeline::infer_pixel(*model, img, cfg.pipeline);
      else {
        auto policy = cfg.exit;
        if (!policy.patch_score_threshold) policy.patch_score_threshold = info.exit_threshold;
        r = fmrnet::pipeline::infer_auto(*model, img, policy, cfg.pipeline);
      }
      write_result(in_out, fs::path(in_image).stem().string(), r, cfg.pipeline.inspection, in_all);
      std::cout << "level " << fmrnet::pipeline::to_string(r.level) << ", " << r.timing.total_ms << " ms\n";
      return 0;
    }

    if (*ev) {
      fmrnet::checkpoint::Info info;
      auto model = open_model(ev_ckpt, config_path, cfg, &info);
      if (cfg.data.root.empty()) throw fmrnet::ConfigError("data.root is not set");
      auto test = fmrnet::load_split(cfg.data.root, fmrnet::Split::test);
      std::vector<double> pixel_scores, image_scores;
      std::vector<int> pixel_labels, image_labels;
      fmrnet::inspect::PrfResult total;
      std::ofstream csv;
      if (!ev_csv.empty()) {
        csv.open(ev_csv);
        csv << "image,type,label,max_patch_score,max_fused,flagged_pixels\n";
      }
      for (const auto& e : test.entries) {
        auto img = fmrnet::load_image(e.image_path, model->config().image_channels, cfg.working_size());
        if (cfg.data.noise_p > 0) img = fmrnet::inject_speckle(img, cfg.data.noise_p, cfg.seed);
        auto r = fmrnet::pipeline::infer_pixel(*model, img, cfg.pipeline);
        auto p = fmrnet::pipeline::infer_patch_level(*model, img, cfg.pipeline);
        const double img_score = p.patch_scores.empty() ? 0.0 : *std::max_element(p.patch_scores.begin(), p.patch_scores.end());
        image_scores.push_back(img_score);
        image_labels.push_back(e.label == fmrnet::Label::defective);
        const auto& fused = r.maps->fused;
        auto mask = fmrnet::inspect::binarize_ksigma(fused, cfg.pipeline.inspection.k_sigma);
        if (csv) csv << e.image_path.string() << ',' << e.defect_type << ',' << (e.label == fmrnet::Label::defective) << ','
                     << img_score << ',' << fused.maxCoeff() << ',' << mask.sum() << '\n';
        if (e.mask_absent) continue;
        fmrnet::Map2D truth = e.mask_path ? fmrnet::load_mask(*e.mask_path, std::make_pair(img.height(), img.width()))
                                          : fmrnet::Map2D::Zero(img.height(), img.width());
        auto c = fmrnet::inspect::prf(mask, truth);
        total.tp += c.tp, total.fp += c.fp, total.tn += c.tn, total.fn += c.fn;
        for (Eigen::Index k = 0; k < fused.size(); ++k) {
          pixel_scores.push_back(fused.data()[k]);
          pixel_labels.push_back(truth.data()[k] > 0.5);
        }
      }
      json out;
      auto auc_or_null = [](const std::vector<double>& s, const std::vector<int>& l) -> json {
        try {
          return fmrnet::inspect::auc_roc(s, l);
        } catch (const std::invalid_argument&) {
          return nullptr;
        }
      };
      out["images"] = test.entries.size();
      out["pixel_auc_roc"] = auc_or_null(pixel_scores, pixel_labels);
      out["image_auc_roc_patch_level"] = auc_or_null(image_scores, image_labels);
      const double prec = total.tp + total.fp ? static_cast<double>(total.tp) / (total.tp + total.fp) : 0.0;
      const double rec = total.tp + total.fn ? static_cast<double>(total.tp) / (total.tp + total.fn) : 0.0;
      out["precision"] = prec;
      out["recall"] = rec;
      out["f1"] = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
      out["counts"] = {{"tp", total.tp}, {"fp", total.fp}, {"tn", total.tn}, {"fn", total.fn}};
      out["k_sigma"] = cfg.pipeline.inspection.k_sigma;
      out["warnings"] = test.warnings;
      std::ofstream(ev_out) << out.dump(2) << '\n';
      std::cout << out.dump(2) << '\n';
      return 0;
    }

    if (*se) {
      fmrnet::checkpoint::Info info;
      auto model = open_model(se_ckpt, config_path, cfg, &info);
      auto img = fmrnet::load_image(se_image, model->config().image_channels, cfg.working_size());
      auto bytes = fmrnet::pipeline::split_export(*model, img, cfg.pipeline);
      write_bytes(se_out, bytes);
      std::cout << "wrote " << bytes.size() << " bytes\n";
      return 0;
    }

    if (*sr) {
      fmrnet::checkpoint::Info info;
      auto model = open_model(sr_ckpt, config_path, cfg, &info);
      auto r = fmrnet::pipeline::split_resume(*model, read_bytes(sr_in), cfg.pipeline);
      write_result(sr_out, fs::path(sr_in).stem().string(), r, cfg.pipeline.inspection, sr_all);
      return 0;
    }

    if (*sm) {
      fmrnet::smoke::SmokeConfig sc;
      sc.seed = cfg.seed;
      sc.training.schedule.t1 = sm_t1;
      sc.training.schedule.t2 = sm_t2;
      sc.training.schedule.seed = cfg.seed;
      sc.training.report_every = 100;
      auto corpus = fmrnet::smoke::make_corpus(sc);
      FmrNet<float> model(sc.arch, sc.seed);
      auto r = fmrnet::smoke::run(model, corpus, sc);
      bool ordered = true;
      for (std::size_t i = 0; i < r.patch_ms.size(); ++i) ordered = ordered && r.patch_ms[i] < r.pixel_ms[i];
      json out{{"pixel_auc_roc", r.pixel_auc},
               {"patch_auc_roc", r.patch_auc},
               {"patch_positives", r.patch_positives},
               {"patch_negatives", r.patch_negatives},
               {"patch_excluded", r.patch_excluded},
               {"patch_faster_than_pixel_on_every_image", ordered},
               {"phase1_seconds", r.phase1.seconds},
               {"phase2_seconds", r.phase2.seconds}};
      if (!sm_out.empty()) std::ofstream(sm_out) << out.dump(2) << '\n';
      std::cout << out.dump(2) << '\n';
      if (sm_report_only) return 0;
      return (r.pixel_auc >= 0.85 && r.patch_auc >= 0.90 && ordered) ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
