#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmrnet/gfrm.hpp"
#include "fmrnet/module.hpp"
#include "fmrnet/ops.hpp"

namespace fmrnet::nn {

// Architecture of every subnetwork. Block indices below are 1-based encoder
// block numbers; block i produces a map of side patch / 2^i.
struct ArchConfig {
  int image_channels = 1;
  int patch = 32;
  int blocks = 3;
  int base_channels = 16;
  int max_channels = 512;
  int kernel = 4;
  int stride = 2;
  double leaky_slope = 0.2;
  int memory_size = 128;                      // L
  std::vector<int> gfrm_levels{1, 2};         // skip levels routed through the GFRM
  std::vector<int> perceptual_blocks{2, 3};   // discriminator blocks used by the perceptual loss
  int texton_size = 2;
  bool trainable_smoothing = false;
  std::vector<int> aux_widths{512, 256};      // followed by a single logit
  std::vector<int> addressing_widths{256};    // followed by L logits

  // Desk-scale preset used by tests and the smoke run.
  static ArchConfig tiny() { return ArchConfig{}; }

  // Full-size network: 64x64 RGB patches, five blocks, 512 memory entries,
  // GFRM at EL3/EL4, perceptual features from blocks 3 and 4.
  static ArchConfig full() {
    ArchConfig c;
    c.image_channels = 3;
    c.patch = 64;
    c.blocks = 5;
    c.base_channels = 64;
    c.memory_size = 512;
    c.gfrm_levels = {3, 4};
    c.perceptual_blocks = {3, 4};
    return c;
  }

  int block_channels(int block) const { return std::min(base_channels << (block - 1), max_channels); }
  int block_side(int block) const { return patch >> block; }
  int latent_channels() const { return block_channels(blocks); }
  int latent_side() const { return block_side(blocks); }
  int latent_dim() const { return latent_channels() * latent_side() * latent_side(); }
  bool has_gfrm(int level) const {
    return std::find(gfrm_levels.begin(), gfrm_levels.end(), level) != gfrm_levels.end();
  }

  void validate() const {
    if (image_channels != 1 && image_channels != 3) throw std::invalid_argument("image_channels must be 1 or 3");
    if (blocks < 1) throw std::invalid_argument("blocks must be >= 1");
    // the latent map must keep an even side of at least 2
    if (patch <= 0 || patch % (1 << (blocks + 1)) != 0)
      throw std::invalid_argument("patch side " + std::to_string(patch) + " is not divisible by 2^" +
                                  std::to_string(blocks) + " with an even latent side");
    if (memory_size < 1) throw std::invalid_argument("memory_size must be positive");
    for (int l : gfrm_levels) {
      if (l < 1 || l >= blocks) throw std::invalid_argument("gfrm level " + std::to_string(l) + " out of range");
      if (block_side(l) % texton_size != 0)
        throw std::invalid_argument("gfrm level " + std::to_string(l) + " not divisible by texton size");
    }
    for (int b : perceptual_blocks)
      if (b < 1 || b > blocks) throw std::invalid_argument("perceptual block " + std::to_string(b) + " out of range");
  }

  // Canonical text form; its digest is the checkpoint config fingerprint.
  std::string canonical() const {
    std::ostringstream os;
    auto list = [&os](const std::vector<int>& v) {
      for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    };
    os << "channels=" << image_channels << ";patch=" << patch << ";blocks=" << blocks << ";base=" << base_channels
       << ";max=" << max_channels << ";kernel=" << kernel << ";stride=" << stride << ";slope=" << leaky_slope
       << ";L=" << memory_size << ";gfrm=";
    list(gfrm_levels);
    os << ";per=";
    list(perceptual_blocks);
    os << ";texton=" << texton_size << ";trainable_smoothing=" << trainable_smoothing << ";aux=";
    list(aux_widths);
    os << ";addr=";
    list(addressing_widths);
    return os.str();
  }

  std::uint64_t fingerprint() const { return Fnv1a().update(canonical()).value(); }
};

// conv 4x4/2 -> batch norm -> leaky ReLU
template <class T>
struct DownBlock {
  Var<T> weight, gamma, beta;
  ops::BatchNormStats<T>* stats = nullptr;
};

template <class T>
class ConvStack : public Module<T> {
 public:
  ConvStack(std::string name, const ArchConfig& cfg, std::mt19937_64& rng) : Module<T>(std::move(name)), cfg_(cfg) {
    cfg_.validate();
    int in = cfg_.image_channels;
    for (int b = 1; b <= cfg_.blocks; ++b) {
      const int out = cfg_.block_channels(b);
      const std::string p = "block" + std::to_string(b);
      DownBlock<T> blk;
      blk.weight = this->register_parameter(p + ".conv.weight",
                                            normal_init<T>({out, in, cfg_.kernel, cfg_.kernel}, 0.02, rng));
      blk.gamma = this->register_parameter(p + ".bn.weight", Tensor<T>({out}, T(1)));
      blk.beta = this->register_parameter(p + ".bn.bias", Tensor<T>({out}, T(0)));
      blk.stats = &this->register_batch_norm(p + ".bn", out);
      blocks_.push_back(blk);
      in = out;
    }
  }

  const ArchConfig& config() const noexcept { return cfg_; }

  // Returns the output of every block; the last one is the deepest map.
  std::vector<Var<T>> run(const Var<T>& x) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != cfg_.image_channels || s[2] != s[3] || s[2] % (1 << cfg_.blocks) != 0 ||
        s[2] != cfg_.patch)
      throw std::invalid_argument(this->name() + ": input " + shape_str(s) + " incompatible with " +
                                  std::to_string(cfg_.blocks) + " blocks on " + std::to_string(cfg_.patch) +
                                  "px patches");
    std::vector<Var<T>> feats;
    Var<T> h = x;
    Var<T> none;
    for (auto& blk : blocks_) {
      h = ops::conv2d(h, blk.weight, none, cfg_.stride, (cfg_.kernel - cfg_.stride) / 2);
      h = ops::batch_norm(h, blk.gamma, blk.beta, *blk.stats, this->training());
      h = ops::leaky_relu(h, static_cast<T>(cfg_.leaky_slope));
      feats.push_back(h);
    }
    return feats;
  }

 protected:
  ArchConfig cfg_;
  std::vector<DownBlock<T>> blocks_;
};

template <class T>
struct EncoderOutput {
  Var<T> latent;                  // [N, C_latent, s, s]
  std::vector<Var<T>> features;   // per block, features[i] is block i+1
  Var<T> latent_vectors() const { return ops::reshape(latent, {latent.dim(0), latent.dim(1) * latent.dim(2) * latent.dim(3)}); }
  const Var<T>& level(int block) const { return features.at(static_cast<std::size_t>(block - 1)); }
};

template <class T>
class Encoder : public ConvStack<T> {
 public:
  Encoder(const ArchConfig& cfg, std::mt19937_64& rng) : ConvStack<T>("encoder", cfg, rng) {}

  EncoderOutput<T> forward(const Var<T>& x) {
    this->count_forward();
    EncoderOutput<T> out;
    out.features = this->run(x);
    out.latent = out.features.back();
    return out;
  }
};

template <class T>
struct DiscriminatorOutput {
  Var<T> logit;                  // [N, 1]
  std::vector<Var<T>> features;  // per block, after activation
  Var<T> probability() const { return ops::sigmoid(logit); }
};

// Same conv stack as the encoder with a global linear head on top.
template <class T>
class Discriminator : public ConvStack<T> {
 public:
  Discriminator(const ArchConfig& cfg, std::mt19937_64& rng) : ConvStack<T>("discriminator", cfg, rng) {
    const int in = cfg.latent_dim();
    head_w_ = this->register_parameter("head.weight", glorot_init<T>(1, in, rng));
    head_b_ = this->register_parameter("head.bias", Tensor<T>({1}, T(0)));
  }

  DiscriminatorOutput<T> forward(const Var<T>& x) {
    this->count_forward();
    DiscriminatorOutput<T> out;
    out.features = this->run(x);
    const auto& last = out.features.back();
    auto flat = ops::reshape(last, {last.dim(0), static_cast<int>(last.size() / last.dim(0))});
    out.logit = ops::linear(flat, head_w_, head_b_);
    return out;
  }

 private:
  Var<T> head_w_, head_b_;
};

// Fully connected stack with leaky ReLU between layers and a linear output.
template <class T>
class Mlp : public Module<T> {
 public:
  Mlp(std::string name, int in, const std::vector<int>& widths, double slope, std::mt19937_64& rng)
      : Module<T>(std::move(name)), slope_(slope) {
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::string p = "fc" + std::to_string(i + 1);
      weights_.push_back(this->register_parameter(p + ".weight", glorot_init<T>(widths[i], in, rng)));
      biases_.push_back(this->register_parameter(p + ".bias", Tensor<T>({widths[i]}, T(0))));
      in = widths[i];
    }
  }

  Var<T> logits(const Var<T>& x) {
    this->count_forward();
    Var<T> h = x;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      h = ops::linear(h, weights_[i], biases_[i]);
      if (i + 1 < weights_.size()) h = ops::leaky_relu(h, static_cast<T>(slope_));
    }
    return h;
  }

 private:
  double slope_;
  std::vector<Var<T>> weights_, biases_;
};

// C_A: latent vector -> probability of being a normal (defect-free) patch.
template <class T>
class AuxClassifier : public Mlp<T> {
 public:
  AuxClassifier(const ArchConfig& cfg, std::mt19937_64& rng)
      : Mlp<T>("aux_classifier", cfg.latent_dim(), with_output(cfg.aux_widths, 1), cfg.leaky_slope, rng) {}

  Var<T> probability(const Var<T>& latent_vectors) { return ops::sigmoid(this->logits(latent_vectors)); }

 private:
  static std::vector<int> with_output(std::vector<int> w, int out) {
    w.push_back(out);
    return w;
  }
};

// A_N: latent vector -> affinity query over the L memory entries.
template <class T>
class AddressingNet : public Mlp<T> {
 public:
  AddressingNet(const ArchConfig& cfg, std::mt19937_64& rng)
      : Mlp<T>("addressing_net", cfg.latent_dim(), with_output(cfg.addressing_widths, cfg.memory_size),
               cfg.leaky_slope, rng) {}

  Var<T> query(const Var<T>& latent_vectors) { return ops::softmax_lastdim(this->logits(latent_vectors)); }

 private:
  static std::vector<int> with_output(std::vector<int> w, int out) {
    w.push_back(out);
    return w;
  }
};

template <class T>
struct DecoderOutput {
  Var<T> reconstruction;              // [N, C, P, P] in (0,1)
  std::map<int, Var<T>> memory_maps;  // decoder activation per GFRM level
  std::map<int, Var<T>> edited_maps;  // GFRM output per level
};

// Transposed-conv upsampling blocks mirroring the encoder. At every GFRM level
// the block output F (the memory-generated map) and the encoder skip map F_D
// go through the GFRM and the result is concatenated to F.
template <class T>
class Decoder : public Module<T> {
 public:
  Decoder(const ArchConfig& cfg, std::mt19937_64& rng) : Module<T>("decoder"), cfg_(cfg) {
    cfg_.validate();
    int in = cfg_.latent_channels();
    for (int level = cfg_.blocks - 1; level >= 0; --level) {
      const bool last = level == 0;
      const int out = last ? cfg_.image_channels : cfg_.block_channels(level);
      const std::string p = "up" + std::to_string(cfg_.blocks - level);
      UpBlock blk;
      blk.level = level;
      blk.weight = this->register_parameter(p + ".deconv.weight",
                                            normal_init<T>({in, out, cfg_.kernel, cfg_.kernel}, 0.02, rng));
      if (last) {
        blk.bias = this->register_parameter(p + ".deconv.bias", Tensor<T>({out}, T(0)));
      } else {
        blk.gamma = this->register_parameter(p + ".bn.weight", Tensor<T>({out}, T(1)));
        blk.beta = this->register_parameter(p + ".bn.bias", Tensor<T>({out}, T(0)));
        blk.stats = &this->register_batch_norm(p + ".bn", out);
      }
      blocks_.push_back(blk);
      in = (!last && cfg_.has_gfrm(level)) ? 2 * out : out;
    }
  }

  const ArchConfig& config() const noexcept { return cfg_; }

  // `skips` maps a GFRM level to the encoder feature map at that level.
  DecoderOutput<T> forward(const Var<T>& latent, const std::map<int, Var<T>>& skips, gfrm::Gfrm<T>& gfrm) {
    this->count_forward();
    const auto& s = latent.shape();
    if (s.size() != 4 || s[1] != cfg_.latent_channels() || s[2] != cfg_.latent_side() || s[3] != cfg_.latent_side())
      throw std::invalid_argument("decoder: latent " + shape_str(s) + " does not match the configured architecture");
    DecoderOutput<T> out;
    Var<T> h = latent;
    const int pad = (cfg_.kernel - cfg_.stride) / 2;
    Var<T> none;
    for (auto& blk : blocks_) {
      if (blk.level == 0) {
        h = ops::conv_transpose2d(h, blk.weight, blk.bias, cfg_.stride, pad);
        out.reconstruction = ops::sigmoid(h);
        break;
      }
      h = ops::conv_transpose2d(h, blk.weight, none, cfg_.stride, pad);
      h = ops::batch_norm(h, blk.gamma, blk.beta, *blk.stats, this->training());
      h = ops::leaky_relu(h, static_cast<T>(cfg_.leaky_slope));
      if (cfg_.has_gfrm(blk.level)) {
        auto it = skips.find(blk.level);
        if (it == skips.end())
          throw std::invalid_argument("decoder: missing skip input for level " + std::to_string(blk.level));
        auto edited = gfrm.forward(it->second, h);
        out.memory_maps[blk.level] = h;
        out.edited_maps[blk.level] = edited;
        h = ops::concat_channels(h, edited);
      }
    }
    return out;
  }

 private:
  struct UpBlock {
    int level = 0;
    Var<T> weight, bias, gamma, beta;
    ops::BatchNormStats<T>* stats = nullptr;
  };
  ArchConfig cfg_;
  std::vector<UpBlock> blocks_;
};

// Skip maps the decoder needs from an encoder pass.
template <class T>
std::map<int, Var<T>> gfrm_skips(const ArchConfig& cfg, const EncoderOutput<T>& enc) {
  std::map<int, Var<T>> skips;
  for (int l : cfg.gfrm_levels) skips[l] = enc.level(l);
  return skips;
}

}  // namespace fmrnet::nn
