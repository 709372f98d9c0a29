#include "msda/disentangle.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace msda {

EntropyEstimator EntropyEstimator::init(const EntropyEstimatorConfig& cfg, Rng& rng) {
  if (cfg.embed_dim == 0 || cfg.n_identities == 0 || cfg.n_mixture == 0)
    throw std::invalid_argument("EntropyEstimator: dims must be positive");
  EntropyEstimator est;
  est.cfg = cfg;
  est.weight_logits = Tensor::zeros({cfg.n_mixture}, true);
  const std::size_t n_mu = cfg.n_mixture * cfg.embed_dim;
  std::vector<double> mu(n_mu);
  for (auto& v : mu) v = rng.normal();
  est.means = Tensor::from({n_mu}, std::move(mu), true);
  est.log_scales = Tensor::zeros({cfg.n_mixture * cfg.embed_dim}, true);
  est.cond = Mlp::init(cfg.n_identities, cfg.cond_hidden,
                       cfg.n_mixture * (1 + 2 * cfg.embed_dim), rng);
  return est;
}

std::vector<Tensor> EntropyEstimator::params() const {
  std::vector<Tensor> out{weight_logits, means, log_scales};
  for (const auto& p : cond.params()) out.push_back(p);
  return out;
}

void EntropyEstimator::seed_means(const Tensor& h) {
  if (h.ndim() != 2 || h.shape()[1] != cfg.embed_dim || h.shape()[0] == 0)
    throw std::invalid_argument("seed_means: batch shape " + shape_str(h.shape()) +
                                " does not match embed_dim " + std::to_string(cfg.embed_dim));
  auto& mu = means.mutable_data();
  const std::size_t rows = h.shape()[0], d = cfg.embed_dim;
  for (std::size_t k = 0; k < cfg.n_mixture; ++k) {
    const std::size_t r = (k * 97) % rows;
    for (std::size_t j = 0; j < d; ++j) mu[k * d + j] = h.at(r, j);
  }
}

namespace {

void check_embed(const EntropyEstimator& est, const Tensor& h) {
  if (h.ndim() != 2 || h.shape()[1] != est.cfg.embed_dim)
    throw std::invalid_argument("EntropyEstimator: batch shape " + shape_str(h.shape()) +
                                " does not match embed_dim " +
                                std::to_string(est.cfg.embed_dim));
}

void check_ids(const EntropyEstimator& est, const Tensor& h, const std::vector<int>& ids) {
  if (ids.size() != h.shape()[0])
    throw std::invalid_argument("EntropyEstimator: " + std::to_string(ids.size()) +
                                " ids for " + std::to_string(h.shape()[0]) + " rows");
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= est.cfg.n_identities)
      throw std::invalid_argument("EntropyEstimator: identity " + std::to_string(id) +
                                  " out of range [0," + std::to_string(est.cfg.n_identities) +
                                  ")");
}

}  // namespace

Tensor EntropyEstimator::log_density(const Tensor& h, bool detach_params) const {
  check_embed(*this, h);
  if (detach_params)
    return mixture_log_density(h, weight_logits.detach(), means.detach(), log_scales.detach());
  return mixture_log_density(h, weight_logits, means, log_scales);
}

Tensor EntropyEstimator::log_density(const Tensor& h, const std::vector<int>& ids,
                                     bool detach_params) const {
  check_embed(*this, h);
  check_ids(*this, h, ids);
  const std::size_t K = cfg.n_mixture, d = cfg.embed_dim;
  Mlp net = cond;
  Tensor wl = weight_logits, mu = means, ls = log_scales;
  if (detach_params) {
    net = Mlp{cond.w1.detach(), cond.b1.detach(), cond.w2.detach(), cond.b2.detach()};
    wl = wl.detach();
    mu = mu.detach();
    ls = ls.detach();
  }
  Tensor table = net.forward(Tensor::eye(cfg.n_identities));  // (n_id, K*(1+2d))
  Tensor rows = take_rows(table, ids);
  Tensor wl_rows = add(slice_cols(rows, 0, K), wl);
  Tensor mu_rows = add(slice_cols(rows, K, K + K * d), mu);
  Tensor ls_rows = add(slice_cols(rows, K + K * d, K + 2 * K * d), ls);
  return mixture_log_density(h, wl_rows, mu_rows, ls_rows);
}

Tensor ids_to_onehot(const std::vector<int>& ids, std::size_t k) {
  std::vector<double> d(ids.size() * k, 0.0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= k)
      throw std::invalid_argument("ids_to_onehot: id " + std::to_string(ids[i]) +
                                  " out of range [0," + std::to_string(k) + ")");
    d[i * k + static_cast<std::size_t>(ids[i])] = 1.0;
  }
  return Tensor::from({ids.size(), k}, std::move(d));
}

std::vector<int> onehot_to_ids(const Tensor& onehot) {
  if (onehot.ndim() != 2)
    throw std::invalid_argument("onehot_to_ids: expected 2-D, got " + shape_str(onehot.shape()));
  const std::size_t n = onehot.shape()[0], k = onehot.shape()[1];
  std::vector<int> ids(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double v = onehot.at(i, j);
      if (v == 1.0) {
        if (ids[i] != -1)
          throw std::invalid_argument("onehot_to_ids: multiple ones in row " + std::to_string(i));
        ids[i] = static_cast<int>(j);
      } else if (v != 0.0) {
        throw std::invalid_argument("onehot_to_ids: non-binary entry " + std::to_string(v) +
                                    " in row " + std::to_string(i));
      }
    }
    if (ids[i] == -1)
      throw std::invalid_argument("onehot_to_ids: no one set in row " + std::to_string(i));
  }
  return ids;
}

namespace {

void check_batch(const Tensor& h, const char* op) {
  if (h.ndim() != 2 || h.shape()[0] < 2)
    throw std::invalid_argument(std::string(op) + ": need a batch of at least 2 rows, got " +
                                shape_str(h.shape()));
}

}  // namespace

Tensor marginal_entropy(const EntropyEstimator& est, const Tensor& h) {
  check_batch(h, "marginal_entropy");
  return neg(mean(est.log_density(h)));
}

Tensor conditional_entropy(const EntropyEstimator& est, const Tensor& h,
                           const std::vector<int>& ids) {
  check_batch(h, "conditional_entropy");
  return neg(mean(est.log_density(h, ids)));
}

Tensor conditional_entropy(const EntropyEstimator& est, const Tensor& h, const Tensor& onehot) {
  if (onehot.ndim() != 2 || onehot.shape()[1] != est.cfg.n_identities)
    throw std::invalid_argument("conditional_entropy: one-hot shape " +
                                shape_str(onehot.shape()) + " does not match " +
                                std::to_string(est.cfg.n_identities) + " identities");
  return conditional_entropy(est, h, onehot_to_ids(onehot));
}

double estimator_fit_step(EntropyEstimator& est, const Tensor& h, const std::vector<int>& ids) {
  Tensor hd = h.detach();
  check_batch(hd, "estimator_fit_step");
  check_ids(est, hd, ids);
  Tensor nll = add(marginal_entropy(est, hd), conditional_entropy(est, hd, ids));
  backward(nll);
  for (auto& p : est.params()) {
    auto n = p.node();
    if (n->grad.size() != n->data.size()) continue;
    for (std::size_t i = 0; i < n->data.size(); ++i) n->data[i] -= est.cfg.fit_lr * n->grad[i];
    n->grad.clear();
  }
  return add(marginal_entropy(est, hd), conditional_entropy(est, hd, ids)).value();
}

Tensor disentangle_loss(const EntropyEstimator& est, const Tensor& h,
                        const std::vector<int>& ids, bool mi_variant) {
  check_batch(h, "disentangle_loss");
  check_ids(est, h, ids);
  Tensor hm = neg(mean(est.log_density(h, true)));
  Tensor hc = neg(mean(est.log_density(h, ids, true)));
  return mi_variant ? sub(hm, hc) : add(hm, hc);
}

}  // namespace msda
