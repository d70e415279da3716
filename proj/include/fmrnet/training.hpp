#pragma once

// Losses and the two-phase optimization loop.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fmrnet/cmfm.hpp"
#include "fmrnet/defect_synthesis.hpp"
#include "fmrnet/imaging.hpp"
#include "fmrnet/model.hpp"

namespace fmrnet::train {

enum class Phase { phase1 = 1, phase2 = 2 };

inline std::string to_string(Phase p) { return p == Phase::phase1 ? "phase1" : "phase2"; }

enum class Reduction { sum, mean };

struct LossWeights {
  double rec1 = 100.0, adv1 = 1.0, lat1 = 1.0;
  double rec2 = 100.0, adv2 = 1.0;
  double epsilon = 1e-5;
  std::vector<double> psi;  // per perceptual block; empty means 1/(number of blocks) each
  Reduction perceptual_reduction = Reduction::sum;
  bool saturating_gan = false;

  void validate() const {
    for (double w : {rec1, adv1, lat1, rec2, adv2})
      if (!(w >= 0.0)) throw std::invalid_argument("loss weights must be non-negative");
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("epsilon must lie in (0,1)");
    for (double p : psi)
      if (!(p >= 0.0)) throw std::invalid_argument("perceptual weights must be non-negative");
  }
};

struct Schedule {
  int t1 = 2000;
  int t2 = 1000;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int batch_size = 16;
  double clip_norm = 10.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (t1 < 1 || t2 < 1) throw std::invalid_argument("T1 and T2 must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  }
};

// ------------------------------------------------------------------ losses

// Conv and fully connected weight tensors of the given modules (batch-norm
// scales and biases excluded).
template <class T>
std::vector<Var<T>> regularized_weights(const std::vector<nn::Module<T>*>& modules) {
  std::vector<Var<T>> out;
  for (auto* m : modules)
    for (const auto& p : m->parameters()) {
      const auto& n = p.name;
      const bool weight = n.size() >= 7 && n.compare(n.size() - 7, 7, ".weight") == 0;
      if (weight && n.find(".bn.") == std::string::npos) out.push_back(p.var);
    }
  return out;
}

// Per-pixel mean squared error plus epsilon * sum of Frobenius norms.
template <class T>
Var<T> loss_rec(const Var<T>& image, const Var<T>& rec, const std::vector<Var<T>>& weights, double epsilon) {
  if (image.shape() != rec.shape())
    throw std::invalid_argument("loss_rec: " + shape_str(image.shape()) + " vs " + shape_str(rec.shape()));
  auto loss = ops::mean(ops::square(ops::sub(image, rec)));
  if (epsilon != 0.0 && !weights.empty()) {
    Var<T> reg = ops::frobenius_norm(weights.front());
    for (std::size_t i = 1; i < weights.size(); ++i) reg = ops::add(reg, ops::frobenius_norm(weights[i]));
    loss = ops::add(loss, ops::scale(reg, static_cast<T>(epsilon)));
  }
  return loss;
}

template <class T>
struct GanTerms {
  Var<T> generator;      // minimized by the reconstruction network
  Var<T> discriminator;  // minimized by the discriminator, equals -(value of the game)
};

// Both sides from discriminator logits. The caller decides what is detached.
template <class T>
GanTerms<T> loss_gan(const Var<T>& real_logit, const Var<T>& fake_logit, bool saturating = false) {
  GanTerms<T> g;
  g.discriminator = ops::add(ops::mean(ops::bce_with_logits(real_logit, T(1))),
                             ops::mean(ops::bce_with_logits(fake_logit, T(0))));
  // saturating: log(1 - D(fake)) = -softplus(logit)
  g.generator = saturating ? ops::scale(ops::mean(ops::bce_with_logits(fake_logit, T(0))), T(-1))
                           : ops::mean(ops::bce_with_logits(fake_logit, T(1)));
  return g;
}

// E[log D(I)] + E[log(1 - D(I_rec))]
inline double gan_value(const std::vector<double>& d_real, const std::vector<double>& d_fake) {
  double a = 0, b = 0;
  for (double d : d_real) a += std::log(d);
  for (double d : d_fake) b += std::log(1.0 - d);
  return a / static_cast<double>(d_real.size()) + b / static_cast<double>(d_fake.size());
}

inline std::vector<double> perceptual_psi(const std::vector<int>& blocks, const std::vector<double>& psi) {
  if (psi.empty()) return std::vector<double>(blocks.size(), 1.0 / static_cast<double>(blocks.size()));
  if (psi.size() != blocks.size()) throw std::invalid_argument("one perceptual weight per block is required");
  return psi;
}

// sum_l psi_l |D_l(I) - D_l(I_rec)|_1, averaged over the batch. With
// Reduction::mean the L1 distance is divided by the per-sample element count.
template <class T>
Var<T> loss_perceptual(const std::vector<Var<T>>& real_features, const std::vector<Var<T>>& fake_features,
                       const std::vector<int>& blocks, const std::vector<double>& psi,
                       Reduction reduction = Reduction::sum) {
  const auto w = perceptual_psi(blocks, psi);
  Var<T> total;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& a = real_features.at(static_cast<std::size_t>(blocks[i] - 1));
    const auto& b = fake_features.at(static_cast<std::size_t>(blocks[i] - 1));
    if (a.shape() != b.shape()) throw std::invalid_argument("loss_perceptual: feature shape mismatch");
    const double n = a.dim(0);
    const double per_sample = static_cast<double>(a.size()) / n;
    const double norm = reduction == Reduction::sum ? n : n * per_sample;
    auto term = ops::scale(ops::sum(ops::abs(ops::sub(a, b))), static_cast<T>(w[i] / norm));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

template <class T>
struct AdvTerms {
  Var<T> total, gan, perceptual;
};

// Generator side of the adversarial loss. Real features are treated as fixed
// targets.
template <class T>
AdvTerms<T> loss_adv(nn::Discriminator<T>& dis, const Var<T>& image, const Var<T>& rec, const LossWeights& w) {
  const auto& cfg = dis.config();
  nn::DiscriminatorOutput<T> real;
  {
    NoGradGuard ng;
    real = dis.forward(image);
  }
  auto fake = dis.forward(rec);
  AdvTerms<T> out;
  out.gan = loss_gan(real.logit, fake.logit, w.saturating_gan).generator;
  out.perceptual = loss_perceptual(real.features, fake.features, cfg.perceptual_blocks, w.psi, w.perceptual_reduction);
  out.total = ops::add(out.gan, out.perceptual);
  return out;
}

template <class T>
Var<T> loss_latent_batch(nn::AuxClassifier<T>& aux, const Var<T>& r0, const Var<T>& r_pos, const Var<T>& r_neg) {
  return cmfm::latent_loss(aux, r0, r_pos, r_neg);
}

template <class T>
struct LossTerms {
  Var<T> total;
  double rec = 0, gan = 0, perceptual = 0, lat = 0;
};

template <class T>
LossTerms<T> loss_phase1(const Var<T>& rec_loss, const AdvTerms<T>& adv, const Var<T>& lat, const LossWeights& w) {
  LossTerms<T> t;
  t.total = ops::add(ops::add(ops::scale(rec_loss, static_cast<T>(w.rec1)), ops::scale(adv.total, static_cast<T>(w.adv1))),
                     ops::scale(lat, static_cast<T>(w.lat1)));
  t.rec = rec_loss.item();
  t.gan = adv.gan.item();
  t.perceptual = adv.perceptual.item();
  t.lat = lat.item();
  return t;
}

// The reconstruction target is the clean source patch, not the synthetic input.
template <class T>
LossTerms<T> loss_phase2(const Var<T>& rec_loss, const AdvTerms<T>& adv, const LossWeights& w) {
  LossTerms<T> t;
  t.total = ops::add(ops::scale(rec_loss, static_cast<T>(w.rec2)), ops::scale(adv.total, static_cast<T>(w.adv2)));
  t.rec = rec_loss.item();
  t.gan = adv.gan.item();
  t.perceptual = adv.perceptual.item();
  return t;
}

// ------------------------------------------------------------------ optimizer

template <class T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
       double clip_norm = 0.0)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), clip_(clip_norm) {
    for (const auto& p : params_) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // Applies one update; returns the global gradient norm before clipping.
  double step() {
    double sq = 0.0;
    for (const auto& p : params_)
      if (p.has_grad())
        for (T g : p.grad().values()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    const double factor = (clip_ > 0.0 && norm > clip_) ? clip_ / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto& value = p.mutable_value();
      const auto& grad = p.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = grad[i] * factor;
        m[i] = static_cast<T>(b1_ * m[i] + (1.0 - b1_) * g);
        v[i] = static_cast<T>(b2_ * v[i] + (1.0 - b2_) * g * g);
        value[i] -= static_cast<T>(lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
      }
    }
    return norm;
  }

  std::size_t parameter_count() const noexcept { return params_.size(); }

 private:
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> m_, v_;
  double lr_, b1_, b2_, eps_, clip_;
  int t_ = 0;
};

template <class T>
std::vector<Var<T>> trainable_parameters(const std::vector<nn::Module<T>*>& modules) {
  std::vector<Var<T>> out;
  for (auto* m : modules)
    for (const auto& p : m->parameters())
      if (p.var.requires_grad()) out.push_back(p.var);
  return out;
}

// ------------------------------------------------------------------ sampling

class PatchSampler {
 public:
  PatchSampler(const std::vector<Image>& images, int patch, std::uint64_t seed) : images_(&images), patch_(patch), rng_(seed) {
    if (images.empty()) throw std::invalid_argument("no training images");
    for (const auto& img : images)
      if (img.height() < patch || img.width() < patch)
        throw std::invalid_argument("training image smaller than the patch size");
  }

  std::size_t pick_image() { return std::uniform_int_distribution<std::size_t>(0, images_->size() - 1)(rng_); }

  PatchOrigin pick_origin(const Image& img) {
    return {std::uniform_int_distribution<int>(0, img.height() - patch_)(rng_),
            std::uniform_int_distribution<int>(0, img.width() - patch_)(rng_)};
  }

  Image crop(const Image& img, PatchOrigin o) const { return img.crop(o.row, o.col, patch_, patch_); }
  const Image& image(std::size_t i) const { return (*images_)[i]; }
  std::uint64_t next_seed() { return rng_(); }

 private:
  const std::vector<Image>* images_;
  int patch_;
  std::mt19937_64 rng_;
};

template <class T>
nn::EncoderOutput<T> slice_encoded(const nn::EncoderOutput<T>& enc, int begin, int end) {
  nn::EncoderOutput<T> out;
  for (const auto& f : enc.features) out.features.push_back(ops::slice_batch(f, begin, end));
  out.latent = out.features.back();
  return out;
}

// ------------------------------------------------------------------ loop

struct LossRecord {
  Phase phase = Phase::phase1;
  int iteration = 0;
  double total = 0, rec = 0, gan = 0, perceptual = 0, lat = 0, dis = 0, grad_norm = 0;
};

struct TrainOptions {
  Schedule schedule;
  LossWeights weights;
  synth::SynthConfig synth;
  synth::AnomalySourcePool pool = synth::AnomalySourcePool::procedural();
  std::filesystem::path loss_log;  // CSV, appended; empty disables
  int checkpoint_every = 0;
  std::function<void(Phase, int)> on_checkpoint;
  int report_every = 0;  // progress lines on stderr; 0 disables
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void append_csv(const std::filesystem::path& path, const LossRecord& r) {
  if (path.empty()) return;
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream os(path, std::ios::app);
  if (fresh) os << "phase,iteration,total,rec,gan,perceptual,lat,dis,grad_norm\n";
  os << static_cast<int>(r.phase) << ',' << r.iteration << std::setprecision(9) << ',' << r.total << ',' << r.rec << ','
     << r.gan << ',' << r.perceptual << ',' << r.lat << ',' << r.dis << ',' << r.grad_norm << '\n';
}

inline void check_finite(const LossRecord& r) {
  for (double v : {r.total, r.rec, r.gan, r.perceptual, r.lat, r.dis})
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os << "non-finite loss in " << to_string(r.phase) << " at iteration " << r.iteration << ": total=" << r.total
         << " rec=" << r.rec << " gan=" << r.gan << " perceptual=" << r.perceptual << " lat=" << r.lat
         << " dis=" << r.dis << " grad_norm=" << r.grad_norm;
      throw TrainingDiverged(os.str());
    }
}

// One discriminator update on real patches versus detached reconstructions.
template <class T>
double discriminator_step(FmrNet<T>& model, Adam<T>& opt, const Var<T>& real, const Var<T>& fake, bool saturating) {
  opt.zero_grad();
  auto r = model.discriminator.forward(real);
  auto f = model.discriminator.forward(fake.detach());
  auto loss = loss_gan(r.logit, f.logit, saturating).discriminator;
  const double value = loss.item();
  loss.backward();
  opt.step();
  return value;
}

// Marks exactly the listed modules trainable (the GFRM keeps its own flag) and
// restores the previous flags on destruction.
template <class T>
class TrainableScope {
 public:
  TrainableScope(FmrNet<T>& model, const std::vector<nn::Module<T>*>& active) : model_(model) {
    for (auto* m : model.modules()) {
      saved_.push_back(m->trainable());
      if (m == &model.gfrm) continue;
      m->set_trainable(std::find(active.begin(), active.end(), m) != active.end());
    }
    if (std::find(active.begin(), active.end(), &model.gfrm) == active.end()) model.gfrm.set_trainable(false);
  }
  ~TrainableScope() {
    auto mods = model_.modules();
    for (std::size_t i = 0; i < mods.size(); ++i) mods[i]->set_trainable(saved_[i]);
  }
  TrainableScope(const TrainableScope&) = delete;
  TrainableScope& operator=(const TrainableScope&) = delete;

 private:
  FmrNet<T>& model_;
  std::vector<bool> saved_;
};

}  // namespace detail

struct PhaseReport {
  std::vector<LossRecord> history;
  double seconds = 0.0;
};

// First phase: reconstruction of clean patches with the
// contrastive latent loss. Updates E, D, GFRM (when trainable), C_A and Dis.
template <class T>
PhaseReport train_phase1(FmrNet<T>& model, const std::vector<Image>& images, const TrainOptions& opt) {
  opt.schedule.validate();
  opt.weights.validate();
  const auto& cfg = model.config();
  const auto& s = opt.schedule;
  const auto& w = opt.weights;
  PatchSampler sampler(images, cfg.patch, s.seed * 2654435761ULL + 1);

  detail::TrainableScope<T> scope(model, {&model.encoder, &model.decoder, &model.gfrm, &model.aux});
  model.discriminator.set_trainable(false);
  Adam<T> gen_opt(trainable_parameters<T>({&model.encoder, &model.decoder, &model.gfrm, &model.aux}), s.learning_rate,
                  s.beta1, s.beta2, 1e-8, s.clip_norm);
  model.discriminator.set_trainable(true);
  Adam<T> dis_opt(trainable_parameters<T>({&model.discriminator}), s.learning_rate, s.beta1, s.beta2, 1e-8, s.clip_norm);
  const auto reg = regularized_weights<T>({&model.encoder, &model.decoder, &model.aux});

  model.train_mode(true);
  model.addressing.eval();
  PhaseReport report;
  const auto start = std::chrono::steady_clock::now();
  const int n = s.batch_size;
  for (int it = 1; it <= s.t1; ++it) {
    std::vector<Image> p0, pp, pn;
    for (int b = 0; b < n; ++b) {
      const auto idx = sampler.pick_image();
      const Image& img = sampler.image(idx);
      const auto o0 = sampler.pick_origin(img);
      auto op = sampler.pick_origin(img);
      for (int tries = 0; op == o0 && tries < 16; ++tries) op = sampler.pick_origin(img);
      const auto on = sampler.pick_origin(img);
      p0.push_back(sampler.crop(img, o0));
      pp.push_back(sampler.crop(img, op));
      pn.push_back(synth::make_training_pair(sampler.crop(img, on), opt.synth, opt.pool, sampler.next_seed()).synthetic);
    }
    std::vector<Image> all = p0;
    all.insert(all.end(), pp.begin(), pp.end());
    all.insert(all.end(), pn.begin(), pn.end());
    auto x = Var<T>::constant(to_batch<T>(all));
    auto target = Var<T>::constant(to_batch<T>(p0));

    auto enc = model.encoder.forward(x);
    auto codes = enc.latent_vectors();
    auto r0 = ops::slice_batch(codes, 0, n), rp = ops::slice_batch(codes, n, 2 * n), rn = ops::slice_batch(codes, 2 * n, 3 * n);
    auto rec = model.decode(slice_encoded(enc, 0, n), false).decoded.reconstruction;

    LossRecord rec_log;
    rec_log.phase = Phase::phase1;
    rec_log.iteration = it;
    rec_log.dis = detail::discriminator_step(model, dis_opt, target, rec, w.saturating_gan);

    model.discriminator.set_trainable(false);
    gen_opt.zero_grad();
    auto adv = loss_adv(model.discriminator, target, rec, w);
    auto lr = loss_rec(target, rec, reg, w.epsilon);
    auto lat = loss_latent_batch(model.aux, r0, rp, rn);
    auto terms = loss_phase1(lr, adv, lat, w);
    rec_log.total = terms.total.item();
    rec_log.rec = terms.rec;
    rec_log.gan = terms.gan;
    rec_log.perceptual = terms.perceptual;
    rec_log.lat = terms.lat;
    detail::check_finite(rec_log);
    terms.total.backward();
    rec_log.grad_norm = gen_opt.step();
    model.discriminator.set_trainable(true);

    report.history.push_back(rec_log);
    detail::append_csv(opt.loss_log, rec_log);
    if (opt.report_every > 0 && it % opt.report_every == 0)
      std::fprintf(stderr, "[phase1 %5d] total %.4f rec %.5f gan %.3f per %.3f lat %.4f dis %.3f\n", it, rec_log.total,
                   rec_log.rec, rec_log.gan, rec_log.perceptual, rec_log.lat, rec_log.dis);
    if (opt.checkpoint_every > 0 && opt.on_checkpoint && it % opt.checkpoint_every == 0) opt.on_checkpoint(Phase::phase1, it);
  }
  model.train_mode(false);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// Latent codes of defect-free sliding-window patches, one row per patch,
// computed with the encoder in evaluation mode.
template <class T>
Eigen::MatrixXd collect_latent_codes(FmrNet<T>& model, const std::vector<Image>& images, int stride, int batch = 64) {
  const auto& cfg = model.config();
  NoGradGuard ng;
  model.encoder.eval();
  std::vector<Image> patches;
  for (const auto& img : images) {
    auto grid = slice_patches(img, cfg.patch, stride);
    patches.insert(patches.end(), grid.patches.begin(), grid.patches.end());
  }
  Eigen::MatrixXd codes(static_cast<Eigen::Index>(patches.size()), cfg.latent_dim());
  for (std::size_t b = 0; b < patches.size(); b += static_cast<std::size_t>(batch)) {
    const std::size_t e = std::min(patches.size(), b + static_cast<std::size_t>(batch));
    std::vector<Image> chunk(patches.begin() + static_cast<std::ptrdiff_t>(b), patches.begin() + static_cast<std::ptrdiff_t>(e));
    auto z = model.encoder.forward(Var<T>::constant(to_batch<T>(chunk))).latent_vectors().value();
    const int k = cfg.latent_dim();
    for (std::size_t i = 0; i < chunk.size(); ++i)
      for (int j = 0; j < k; ++j) codes(static_cast<Eigen::Index>(b + i), j) = z[i * static_cast<std::size_t>(k) + j];
  }
  return codes;
}

// k-means over the training latent codes; the bank is bound to the current
// encoder state.
template <class T>
void build_memory(FmrNet<T>& model, const std::vector<Image>& images, int stride, std::uint64_t seed,
                  int max_iterations = 100) {
  auto codes = collect_latent_codes(model, images, stride);
  model.memory = cmfm::establish_memory(codes, model.config().memory_size, seed, model.encoder_fingerprint(),
                                        max_iterations);
}

// Second phase: restoration of synthetic defects through the
// memory. The encoder runs in evaluation mode with frozen parameters; only D,
// A_N, GFRM (when trainable) and Dis are updated.
template <class T>
PhaseReport train_phase2(FmrNet<T>& model, const std::vector<Image>& images, const TrainOptions& opt) {
  opt.schedule.validate();
  opt.weights.validate();
  if (!model.has_memory()) throw std::logic_error("phase 2 requires an established memory bank");
  if (model.memory_bank().encoder_fingerprint() != model.encoder_fingerprint())
    throw std::logic_error("memory bank was built from a different encoder state");
  const auto& cfg = model.config();
  const auto& s = opt.schedule;
  const auto& w = opt.weights;
  PatchSampler sampler(images, cfg.patch, s.seed * 2654435761ULL + 2);

  detail::TrainableScope<T> scope(model, {&model.decoder, &model.gfrm, &model.addressing});
  model.discriminator.set_trainable(false);
  Adam<T> gen_opt(trainable_parameters<T>({&model.decoder, &model.gfrm, &model.addressing}), s.learning_rate, s.beta1,
                  s.beta2, 1e-8, s.clip_norm);
  model.discriminator.set_trainable(true);
  Adam<T> dis_opt(trainable_parameters<T>({&model.discriminator}), s.learning_rate, s.beta1, s.beta2, 1e-8, s.clip_norm);
  const auto reg = regularized_weights<T>({&model.decoder, &model.addressing});

  model.train_mode(true);
  model.encoder.eval();
  model.aux.eval();
  PhaseReport report;
  const auto start = std::chrono::steady_clock::now();
  for (int it = 1; it <= s.t2; ++it) {
    std::vector<Image> clean, synthetic;
    for (int b = 0; b < s.batch_size; ++b) {
      const Image& img = sampler.image(sampler.pick_image());
      auto p0 = sampler.crop(img, sampler.pick_origin(img));
      synthetic.push_back(synth::make_training_pair(p0, opt.synth, opt.pool, sampler.next_seed()).synthetic);
      clean.push_back(std::move(p0));
    }
    auto target = Var<T>::constant(to_batch<T>(clean));
    auto input = Var<T>::constant(to_batch<T>(synthetic));
    auto rec = model.reconstruct(input, true).decoded.reconstruction;

    LossRecord rec_log;
    rec_log.phase = Phase::phase2;
    rec_log.iteration = it;
    rec_log.dis = detail::discriminator_step(model, dis_opt, target, rec, w.saturating_gan);

    model.discriminator.set_trainable(false);
    gen_opt.zero_grad();
    auto adv = loss_adv(model.discriminator, target, rec, w);
    auto terms = loss_phase2(loss_rec(target, rec, reg, w.epsilon), adv, w);
    rec_log.total = terms.total.item();
    rec_log.rec = terms.rec;
    rec_log.gan = terms.gan;
    rec_log.perceptual = terms.perceptual;
    detail::check_finite(rec_log);
    terms.total.backward();
    rec_log.grad_norm = gen_opt.step();
    model.discriminator.set_trainable(true);

    report.history.push_back(rec_log);
    detail::append_csv(opt.loss_log, rec_log);
    if (opt.report_every > 0 && it % opt.report_every == 0)
      std::fprintf(stderr, "[phase2 %5d] total %.4f rec %.5f gan %.3f per %.3f dis %.3f\n", it, rec_log.total,
                   rec_log.rec, rec_log.gan, rec_log.perceptual, rec_log.dis);
    if (opt.checkpoint_every > 0 && opt.on_checkpoint && it % opt.checkpoint_every == 0) opt.on_checkpoint(Phase::phase2, it);
  }
  model.train_mode(false);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace fmrnet::train
