#pragma once

// Global feature rearrangement: the memory-generated feature map F is cut
// into KxKxC textons, every KxK window of the skip feature map F_D is matched
// against them by cosine similarity (a stride-K correlation), the softmax
// similarities are smoothed spatially, and the edited map G is rebuilt by a
// stride-K transposed convolution that uses the textons as filters.

#include <string>
#include <vector>

#include "fmrnet/module.hpp"
#include "fmrnet/ops.hpp"

namespace fmrnet::gfrm {

// Norms below this are treated as zero; cosine with a zero vector is 0.
inline constexpr double kZeroNormGuard = 1e-8;

template <class T>
struct TextonBank {
  Var<T> textons;  // [N, count, C*K*K], row-major blocks of the source map
  int channels = 0;
  int height = 0;
  int width = 0;
  int size = 0;  // K

  int grid_h() const { return height / size; }
  int grid_w() const { return width / size; }
  int count() const { return grid_h() * grid_w(); }
};

template <class T>
struct SimilarityStack {
  Var<T> maps;  // [N, grid_h*grid_w, count]: for each location, weights over textons
  int grid_h = 0;
  int grid_w = 0;
};

template <class T>
TextonBank<T> decompose_textons(const Var<T>& feature_map, int k) {
  const auto& s = feature_map.shape();
  if (s.size() != 4) throw std::invalid_argument("decompose_textons: expected NCHW feature map");
  TextonBank<T> bank;
  bank.textons = ops::unfold_blocks(feature_map, k);
  bank.channels = s[1];
  bank.height = s[2];
  bank.width = s[3];
  bank.size = k;
  return bank;
}

// Cosine similarity of every stride-K window of F_D with every texton, before
// the softmax. [N, positions, count].
template <class T>
Var<T> cosine_scores(const Var<T>& skip_map, const TextonBank<T>& bank) {
  const auto& s = skip_map.shape();
  if (s.size() != 4 || s[1] != bank.channels)
    throw std::invalid_argument("gfrm similarity: channel mismatch between skip map " + shape_str(s) +
                                " and textons with " + std::to_string(bank.channels) + " channels");
  if (s[0] != bank.textons.dim(0))
    throw std::invalid_argument("gfrm similarity: batch mismatch");
  const T eps = static_cast<T>(kZeroNormGuard);
  auto windows = ops::l2_normalize_lastdim(ops::unfold_blocks(skip_map, bank.size), eps);
  auto textons = ops::l2_normalize_lastdim(bank.textons, eps);
  return ops::bmm(windows, textons, /*transpose_b=*/true);
}

template <class T>
SimilarityStack<T> similarity(const Var<T>& skip_map, const TextonBank<T>& bank) {
  const auto& s = skip_map.shape();
  SimilarityStack<T> out;
  out.maps = ops::softmax_lastdim(cosine_scores(skip_map, bank));
  out.grid_h = s[2] / bank.size;
  out.grid_w = s[3] / bank.size;
  return out;
}

template <class T>
SimilarityStack<T> smooth_similarity(const SimilarityStack<T>& s, const Var<T>& kernel) {
  SimilarityStack<T> out = s;
  out.maps = ops::smooth_grid(s.maps, s.grid_h, s.grid_w, kernel);
  return out;
}

template <class T>
Var<T> rearrange(const SimilarityStack<T>& s, const TextonBank<T>& bank) {
  const auto& m = s.maps.shape();
  if (m.size() != 3 || m[2] != bank.count() || m[0] != bank.textons.dim(0))
    throw std::invalid_argument("gfrm rearrange: similarity stack " + shape_str(m) + " does not match " +
                                std::to_string(bank.count()) + " textons");
  const int pos = s.grid_h * s.grid_w;
  if (pos != m[1]) throw std::invalid_argument("gfrm rearrange: grid/layout mismatch");
  auto blocks = ops::bmm(s.maps, bank.textons);
  return ops::fold_blocks(blocks, bank.channels, s.grid_h * bank.size, s.grid_w * bank.size, bank.size);
}

// Holds the 3x3 smoothing kernel, parameterized as exp(logits) so it stays
// positive. The logits start at zero (uniform kernel); they are only trained
// when the module is marked trainable.
template <class T>
class Gfrm : public nn::Module<T> {
 public:
  Gfrm(int texton_size, bool trainable_smoothing)
      : nn::Module<T>("gfrm"), texton_size_(texton_size), smoothing_logits_(this->register_parameter(
                                                                  "smoothing_logits", Tensor<T>({3, 3}, T(0)))) {
    this->set_trainable(trainable_smoothing);
  }

  int texton_size() const noexcept { return texton_size_; }

  Var<T> kernel() const { return ops::exp(smoothing_logits_); }

  Var<T> forward(const Var<T>& skip_map, const Var<T>& memory_map) {
    this->count_forward();
    if (skip_map.shape() != memory_map.shape())
      throw std::invalid_argument("gfrm: skip map " + shape_str(skip_map.shape()) + " and memory-generated map " +
                                  shape_str(memory_map.shape()) + " differ");
    auto bank = decompose_textons(memory_map, texton_size_);
    auto s = similarity(skip_map, bank);
    return rearrange(smooth_similarity(s, kernel()), bank);
  }

 private:
  int texton_size_;
  Var<T> smoothing_logits_;
};

}  // namespace fmrnet::gfrm
