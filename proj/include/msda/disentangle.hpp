#pragma once

#include <cstddef>
#include <vector>

#include "msda/nets.hpp"
#include "msda/rng.hpp"
#include "msda/tensor.hpp"

namespace msda {

struct EntropyEstimatorConfig {
  std::size_t embed_dim = 32;
  std::size_t n_identities = 1;  // K, width of the one-hot condition
  std::size_t n_mixture = 10;
  std::size_t cond_hidden = 512;
  double fit_lr = 0.01;
};

// Learnable diagonal Gaussian mixture density over embeddings. The marginal
// density uses the base parameters directly; the conditional density adds
// per-identity offsets produced by a conditioning net over one-hot identities,
// so a zeroed conditioning net makes both densities coincide. The net is
// evaluated on the K-row identity matrix and gathered per sample, which is
// algebraically identical to feeding each sample's one-hot row.
struct EntropyEstimator {
  EntropyEstimatorConfig cfg;
  Tensor weight_logits;  // (n_mixture)
  Tensor means;          // (n_mixture * embed_dim)
  Tensor log_scales;     // (n_mixture * embed_dim), clamped in-op to [-6, 4]
  Mlp cond;              // K -> cond_hidden -> n_mixture * (1 + 2 * embed_dim)

  static EntropyEstimator init(const EntropyEstimatorConfig& cfg, Rng& rng);
  std::vector<Tensor> params() const;

  // copies strided sample rows into the mixture means (cheap warm start)
  void seed_means(const Tensor& h);

  // per-row log p-hat(h); detach_params freezes estimator parameters so
  // gradients reach only h
  Tensor log_density(const Tensor& h, bool detach_params = false) const;
  Tensor log_density(const Tensor& h, const std::vector<int>& ids,
                     bool detach_params = false) const;
};

Tensor ids_to_onehot(const std::vector<int>& ids, std::size_t k);
// validates each row holds exactly one 1 and zeros elsewhere
std::vector<int> onehot_to_ids(const Tensor& onehot);

// -mean log p-hat(h); batch must have at least 2 rows
Tensor marginal_entropy(const EntropyEstimator& est, const Tensor& h);

Tensor conditional_entropy(const EntropyEstimator& est, const Tensor& h,
                           const std::vector<int>& ids);
Tensor conditional_entropy(const EntropyEstimator& est, const Tensor& h, const Tensor& onehot);

// One plain gradient step on the estimator parameters minimizing the summed
// marginal + conditional NLL of the (internally detached) batch. Returns the
// post-step NLL.
double estimator_fit_step(EntropyEstimator& est, const Tensor& h, const std::vector<int>& ids);

// L_d = H(h) + H(h|Y'), estimator parameters held constant so the gradient
// flows to h only. The mutual-information variant uses H(h) - H(h|Y').
Tensor disentangle_loss(const EntropyEstimator& est, const Tensor& h,
                        const std::vector<int>& ids, bool mi_variant = false);

}  // namespace msda
