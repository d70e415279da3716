#pragma once

// Contrastive memory feature module: the latent loss that makes encoder codes
// discriminative, k-means memory establishment, affinity-based substitution
// of latent codes and the nearest-entry patch anomaly score.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fmrnet/digest.hpp"
#include "fmrnet/networks.hpp"
#include "fmrnet/ops.hpp"

namespace fmrnet::cmfm {

// -[y log x + (1-y) log(1-x)] for a single prediction.
inline double bce(double x, double y) {
  if (!std::isfinite(x) || x < 0.0 || x > 1.0) throw std::domain_error("bce: prediction outside [0,1]");
  return -(y * std::log(x) + (1.0 - y) * std::log(1.0 - x));
}

// Per-triplet latent loss from the classifier logits of R+ and R- and the
// codes R0, R+ ([N, D] each):
//   mean(BCE(C_A(R+), 1), BCE(C_A(R-), 0)) + ||R+ - R0||_2
// averaged over the batch.
template <class T>
Var<T> latent_loss(const Var<T>& logit_pos, const Var<T>& logit_neg, const Var<T>& r0, const Var<T>& r_pos) {
  if (r0.shape() != r_pos.shape()) throw std::invalid_argument("latent_loss: R0 and R+ differ in shape");
  for (const auto* l : {&logit_pos, &logit_neg})
    for (T v : l->value().values())
      if (!std::isfinite(v)) throw std::domain_error("latent_loss: non-finite classifier output");
  auto bce_terms = ops::scale(ops::add(ops::bce_with_logits(logit_pos, T(1)), ops::bce_with_logits(logit_neg, T(0))),
                              T(0.5));
  auto distance = ops::norm_lastdim(ops::sub(r_pos, r0));
  return ops::add(ops::mean(bce_terms), ops::mean(distance));
}

// Convenience overload running the classifier.
template <class T>
Var<T> latent_loss(nn::AuxClassifier<T>& classifier, const Var<T>& r0, const Var<T>& r_pos, const Var<T>& r_neg) {
  return latent_loss(classifier.logits(r_pos), classifier.logits(r_neg), r0, r_pos);
}

// L x K matrix of normal-texture prototypes. Content is fixed at construction;
// only read access is exposed.
class MemoryBank {
 public:
  using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  MemoryBank() = default;
  MemoryBank(Matrix entries, std::uint64_t encoder_fingerprint)
      : entries_(std::move(entries)), encoder_fingerprint_(encoder_fingerprint) {
    if (entries_.rows() == 0 || entries_.cols() == 0) throw std::invalid_argument("memory bank must be non-empty");
  }

  bool empty() const noexcept { return entries_.size() == 0; }
  int size() const noexcept { return static_cast<int>(entries_.rows()); }          // L
  int dimension() const noexcept { return static_cast<int>(entries_.cols()); }     // K
  const Matrix& entries() const noexcept { return entries_; }
  std::uint64_t encoder_fingerprint() const noexcept { return encoder_fingerprint_; }

  std::uint64_t digest() const {
    Fnv1a h;
    h.update(entries_.data(), static_cast<std::size_t>(entries_.size()) * sizeof(float));
    h.update(&encoder_fingerprint_, sizeof encoder_fingerprint_);
    return h.value();
  }

  template <class T>
  Var<T> as_constant() const {
    Tensor<T> t({size(), dimension()});
    for (Eigen::Index i = 0; i < entries_.size(); ++i) t[static_cast<std::size_t>(i)] = static_cast<T>(entries_.data()[i]);
    return Var<T>::constant(std::move(t));
  }

 private:
  Matrix entries_;
  std::uint64_t encoder_fingerprint_ = 0;
};

struct KMeansOptions {
  int clusters = 512;
  int max_iterations = 100;
  std::uint64_t seed = 0;
  double tolerance = 0.0;  // stop when no assignment changes (and shift <= tolerance)
};

struct KMeansResult {
  Eigen::MatrixXd centroids;  // clusters x dim
  std::vector<int> assignment;
  int iterations = 0;
};

// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded with
// the point farthest from its current centroid.
inline KMeansResult kmeans(const Eigen::MatrixXd& data, const KMeansOptions& opt) {
  const Eigen::Index n = data.rows();
  const int k = opt.clusters;
  if (k < 1) throw std::invalid_argument("kmeans: cluster count must be positive");
  if (n < k)
    throw std::invalid_argument("kmeans: " + std::to_string(n) + " samples cannot form " + std::to_string(k) +
                                " clusters; use a smaller memory size");
  std::mt19937_64 rng(opt.seed);
  KMeansResult res;
  res.centroids.resize(k, data.cols());
  Eigen::VectorXd sqnorm = data.rowwise().squaredNorm();

  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  res.centroids.row(0) = data.row(pick(rng));
  Eigen::VectorXd closest = (data.rowwise() - res.centroids.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = closest.sum();
    Eigen::Index chosen = 0;
    if (total <= 0.0) {
      chosen = pick(rng);
    } else {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng), acc = 0.0;
      for (chosen = 0; chosen < n - 1; ++chosen) {
        acc += closest(chosen);
        if (acc >= r) break;
      }
    }
    res.centroids.row(c) = data.row(chosen);
    closest = closest.cwiseMin((data.rowwise() - res.centroids.row(c)).rowwise().squaredNorm());
  }

  res.assignment.assign(static_cast<std::size_t>(n), -1);
  Eigen::VectorXd best(n);
  for (int it = 0; it < opt.max_iterations; ++it) {
    res.iterations = it + 1;
    // squared distances via |x|^2 - 2 x.c + |c|^2
    Eigen::MatrixXd cross = data * res.centroids.transpose();
    Eigen::VectorXd cnorm = res.centroids.rowwise().squaredNorm();
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      int arg = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = sqnorm(i) - 2.0 * cross(i, c) + cnorm(c);
        if (d < bd) bd = d, arg = c;
      }
      best(i) = std::max(bd, 0.0);
      if (res.assignment[static_cast<std::size_t>(i)] != arg) changed = true;
      res.assignment[static_cast<std::size_t>(i)] = arg;
    }
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, data.cols());
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int c = res.assignment[static_cast<std::size_t>(i)];
      sums.row(c) += data.row(i);
      ++counts[static_cast<std::size_t>(c)];
    }
    double shift = 0.0;
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) {
        Eigen::Index far = 0;
        best.maxCoeff(&far);
        res.centroids.row(c) = data.row(far);
        best(far) = 0.0;
        changed = true;
        continue;
      }
      Eigen::RowVectorXd next = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
      shift = std::max(shift, (next - res.centroids.row(c)).norm());
      res.centroids.row(c) = next;
    }
    if (!changed && shift <= opt.tolerance) break;
  }
  return res;
}

// Clusters the latent codes of defect-free patches ([n, K] rows) into the
// L-entry bank.
inline MemoryBank establish_memory(const Eigen::MatrixXd& latent_codes, int memory_size, std::uint64_t seed,
                                   std::uint64_t encoder_fingerprint, int max_iterations = 100) {
  KMeansOptions opt;
  opt.clusters = memory_size;
  opt.seed = seed;
  opt.max_iterations = max_iterations;
  auto km = kmeans(latent_codes, opt);
  return MemoryBank(km.centroids.cast<float>(), encoder_fingerprint);
}

// Q = A_N(z); rows of [N, L] on the probability simplex.
template <class T>
Var<T> address(nn::AddressingNet<T>& net, const Var<T>& latent_vectors) {
  return net.query(latent_vectors);
}

// z_hat = Q M, i.e. each row is the Q-weighted combination of memory entries.
template <class T>
Var<T> substitute(const Var<T>& query, const MemoryBank& bank) {
  if (query.value().rank() != 2 || query.dim(1) != bank.size())
    throw std::invalid_argument("substitute: query width " + std::to_string(query.dim(-1)) +
                                " does not match memory size " + std::to_string(bank.size()));
  return ops::matmul(query, bank.as_constant<T>());
}

// Euclidean distance from z to its nearest memory entry.
inline double patch_anomaly_score(std::span<const float> z, const MemoryBank& bank) {
  if (static_cast<int>(z.size()) != bank.dimension())
    throw std::invalid_argument("patch_anomaly_score: latent dimension mismatch");
  Eigen::Map<const Eigen::RowVectorXf> zv(z.data(), static_cast<Eigen::Index>(z.size()));
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < bank.size(); ++i) {
    const double d = (bank.entries().row(i).cast<double>() - zv.cast<double>()).squaredNorm();
    best = std::min(best, d);
  }
  return std::sqrt(best);
}

// Scores for every row of [N, K].
inline std::vector<double> patch_anomaly_scores(const Tensor<float>& latent_vectors, const MemoryBank& bank) {
  const int n = latent_vectors.dim(0), k = latent_vectors.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i)] =
        patch_anomaly_score(std::span<const float>(latent_vectors.data() + static_cast<std::size_t>(i) * k, k), bank);
  return out;
}

}  // namespace fmrnet::cmfm
