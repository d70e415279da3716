#pragma once

// The full set of subnetworks plus the (optional) memory bank.

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "fmrnet/cmfm.hpp"
#include "fmrnet/gfrm.hpp"
#include "fmrnet/networks.hpp"

namespace fmrnet {

template <class T>
struct Reconstruction {
  nn::EncoderOutput<T> encoded;
  Var<T> query;          // [N, L] when the memory path was used
  Var<T> decoder_input;  // z or z_hat as a latent map
  nn::DecoderOutput<T> decoded;
};

template <class T = float>
class FmrNet {
 public:
  explicit FmrNet(const nn::ArchConfig& cfg, std::uint64_t seed = 0)
      : cfg_(validated(cfg)),
        rng_(seed),
        encoder(cfg_, rng_),
        decoder(cfg_, rng_),
        gfrm(cfg_.texton_size, cfg_.trainable_smoothing),
        discriminator(cfg_, rng_),
        aux(cfg_, rng_),
        addressing(cfg_, rng_) {}

  FmrNet(const FmrNet&) = delete;
  FmrNet& operator=(const FmrNet&) = delete;

  const nn::ArchConfig& config() const noexcept { return cfg_; }
  std::uint64_t config_fingerprint() const { return cfg_.fingerprint(); }

  std::vector<nn::Module<T>*> modules() {
    return {&encoder, &decoder, &gfrm, &discriminator, &aux, &addressing};
  }

  void train_mode(bool on) {
    for (auto* m : modules()) m->train(on);
  }

  std::uint64_t encoder_fingerprint() { return encoder.digest(); }

  bool has_memory() const noexcept { return memory.has_value(); }

  const cmfm::MemoryBank& memory_bank() const {
    if (!memory) throw std::logic_error("phase-2 checkpoint required: model has no memory bank");
    return *memory;
  }

  // z_hat = A_N(z) M, reshaped back to the latent map layout.
  std::pair<Var<T>, Var<T>> substitute(const Var<T>& latent_map) {
    const auto& bank = memory_bank();
    const int n = latent_map.dim(0);
    auto z = ops::reshape(latent_map, {n, cfg_.latent_dim()});
    auto q = cmfm::address(addressing, z);
    auto zhat = cmfm::substitute(q, bank);
    return {ops::reshape(zhat, latent_map.shape()), q};
  }

  // Decoder tail from an encoder pass. With use_memory the latent goes
  // through addressing and substitution first.
  Reconstruction<T> decode(nn::EncoderOutput<T> enc, bool use_memory) {
    Reconstruction<T> r;
    r.encoded = std::move(enc);
    if (use_memory) {
      std::tie(r.decoder_input, r.query) = substitute(r.encoded.latent);
    } else {
      r.decoder_input = r.encoded.latent;
    }
    r.decoded = decoder.forward(r.decoder_input, nn::gfrm_skips(cfg_, r.encoded), gfrm);
    return r;
  }

  Reconstruction<T> reconstruct(const Var<T>& patches, bool use_memory) {
    return decode(encoder.forward(patches), use_memory);
  }

 private:
  static nn::ArchConfig validated(const nn::ArchConfig& c) {
    c.validate();
    return c;
  }

  nn::ArchConfig cfg_;
  std::mt19937_64 rng_;

 public:
  nn::Encoder<T> encoder;
  nn::Decoder<T> decoder;
  gfrm::Gfrm<T> gfrm;
  nn::Discriminator<T> discriminator;
  nn::AuxClassifier<T> aux;
  nn::AddressingNet<T> addressing;
  std::optional<cmfm::MemoryBank> memory;
};

}  // namespace fmrnet
