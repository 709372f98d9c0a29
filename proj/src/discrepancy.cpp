#include "msda/discrepancy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "msda/log.hpp"

namespace msda {

void KernelSpec::validate() const {
  if (!(base_bandwidth > 0.0))
    throw std::invalid_argument("KernelSpec: base_bandwidth must be > 0");
  if (scale_set.empty()) throw std::invalid_argument("KernelSpec: scale_set must be non-empty");
  for (double s : scale_set)
    if (!(s > 0.0)) throw std::invalid_argument("KernelSpec: scale multipliers must be > 0");
}

namespace {

void check_pair(const char* op, const Tensor& x, const Tensor& y) {
  if (!x.defined() || !y.defined() || x.ndim() != 2 || y.ndim() != 2 || x.shape()[0] == 0 ||
      y.shape()[0] == 0)
    throw std::invalid_argument(std::string(op) + ": both sets must be non-empty 2-D batches");
  if (x.shape()[1] != y.shape()[1])
    throw std::invalid_argument(std::string(op) + ": width mismatch " + shape_str(x.shape()) +
                                " vs " + shape_str(y.shape()));
}

bool usable(const Tensor& t) { return t.defined() && t.ndim() == 2 && t.shape()[0] > 0; }

Tensor one_term(const Tensor& x, const Tensor& y, const DiscOptions& opt) {
  Tensor m = opt.fixed ? mmd2(x, y, *opt.fixed) : mmd2(x, y);
  return opt.take_sqrt ? sqrt_eps(m, 1e-12) : m;
}

}  // namespace

double median_bandwidth(const Tensor& x, const Tensor& y) {
  check_pair("median_bandwidth", x, y);
  const std::size_t m = x.shape()[0], n = y.shape()[0], d = x.shape()[1];
  if (m + n < 2)
    throw std::invalid_argument("median_bandwidth: need at least 2 pooled rows");
  std::vector<const double*> rows;
  rows.reserve(m + n);
  for (std::size_t i = 0; i < m; ++i) rows.push_back(x.data().data() + i * d);
  for (std::size_t i = 0; i < n; ++i) rows.push_back(y.data().data() + i * d);
  std::vector<double> dists;
  dists.reserve((m + n) * (m + n - 1) / 2);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        const double diff = rows[i][t] - rows[j][t];
        s += diff * diff;
      }
      dists.push_back(std::sqrt(s));
    }
  std::sort(dists.begin(), dists.end());
  const std::size_t k = dists.size();
  const double med = k % 2 ? dists[k / 2] : 0.5 * (dists[k / 2 - 1] + dists[k / 2]);
  return med > 0.0 ? med : 1.0;
}

namespace {

// mmd2 is symmetric; fixing a canonical argument order makes the floating
// point result exactly symmetric as well.
bool canonical_before(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return a.shape() < b.shape();
  return std::lexicographical_compare(a.data().begin(), a.data().end(), b.data().begin(),
                                      b.data().end());
}

}  // namespace

Tensor mmd2(const Tensor& x_in, const Tensor& y_in, const KernelSpec& kernel) {
  check_pair("mmd2", x_in, y_in);
  kernel.validate();
  const bool swap = canonical_before(y_in, x_in);
  const Tensor& x = swap ? y_in : x_in;
  const Tensor& y = swap ? x_in : y_in;
  Tensor dxx = pairwise_sqdist(x, x);
  Tensor dyy = pairwise_sqdist(y, y);
  Tensor dxy = pairwise_sqdist(x, y);
  Tensor total = Tensor::scalar(0.0);
  for (double s : kernel.scale_set) {
    const double sigma = kernel.base_bandwidth * s;
    const double c = -1.0 / (2.0 * sigma * sigma);
    Tensor term = sub(add(mean(exp(scale(dxx, c))), mean(exp(scale(dyy, c)))),
                      scale(mean(exp(scale(dxy, c))), 2.0));
    total = add(total, term);
  }
  return total;
}

Tensor mmd2(const Tensor& x, const Tensor& y) {
  KernelSpec k;
  k.base_bandwidth = median_bandwidth(x, y);
  return mmd2(x, y, k);
}

Tensor intra_class_disc(const std::vector<std::vector<Tensor>>& src,
                        const std::vector<Tensor>& tgt, const DiscOptions& opt) {
  const std::size_t n_class = tgt.size();
  for (const auto& subject : src)
    if (subject.size() != n_class)
      throw std::invalid_argument("intra_class_disc: subject has " +
                                  std::to_string(subject.size()) + " class slots, expected " +
                                  std::to_string(n_class));
  Tensor total = Tensor::scalar(0.0);
  std::size_t count = 0;
  for (const auto& subject : src)
    for (std::size_t c = 0; c < n_class; ++c) {
      if (!usable(subject[c]) || !usable(tgt[c])) continue;
      total = add(total, one_term(subject[c], tgt[c], opt));
      ++count;
    }
  if (count == 0) {
    log_warn("intra_class_disc: no evaluable (subject, class) pair");
    return Tensor::scalar(0.0);
  }
  return scale(total, 1.0 / static_cast<double>(count));
}

Tensor inter_class_disc(const std::vector<std::vector<Tensor>>& src,
                        const std::vector<Tensor>& tgt, const DiscOptions& opt) {
  const std::size_t n_class = tgt.size();
  for (const auto& subject : src)
    if (subject.size() != n_class)
      throw std::invalid_argument("inter_class_disc: subject has " +
                                  std::to_string(subject.size()) + " class slots, expected " +
                                  std::to_string(n_class));
  std::size_t confident = 0;
  for (const auto& t : tgt)
    if (usable(t)) ++confident;
  if (confident < 2) {
    log_warn("inter_class_disc: fewer than two confident classes");
    return Tensor::scalar(0.0);
  }
  Tensor total = Tensor::scalar(0.0);
  std::size_t count = 0;
  for (const auto& subject : src)
    for (std::size_t c = 0; c < n_class; ++c) {
      if (!usable(subject[c])) continue;
      for (std::size_t o = 0; o < n_class; ++o) {
        if (o == c || !usable(tgt[o])) continue;
        total = add(total, one_term(subject[c], tgt[o], opt));
        ++count;
      }
    }
  if (count == 0) {
    log_warn("inter_class_disc: no evaluable (subject, class, class') triple");
    return Tensor::scalar(0.0);
  }
  return scale(total, 1.0 / static_cast<double>(count));
}

Tensor agnostic_disc(const std::vector<Tensor>& src_outside, const Tensor& tgt_unconfident,
                     const DiscOptions& opt) {
  if (!usable(tgt_unconfident)) return Tensor::scalar(0.0);
  Tensor total = Tensor::scalar(0.0);
  std::size_t count = 0;
  for (const auto& s : src_outside) {
    if (!usable(s)) continue;
    total = add(total, one_term(s, tgt_unconfident, opt));
    ++count;
  }
  if (count == 0) {
    log_warn("agnostic_disc: no subject with samples outside the confident class set");
    return Tensor::scalar(0.0);
  }
  return scale(total, 1.0 / static_cast<double>(count));
}

Tensor class_aware_loss(const std::vector<Tensor>& intra, const std::vector<Tensor>& inter) {
  if (intra.size() != inter.size() || intra.empty())
    throw std::invalid_argument("class_aware_loss: need matching per-modality intra/inter lists");
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t m = 0; m < intra.size(); ++m) total = add(total, sub(intra[m], inter[m]));
  return total;
}

Tensor class_agnostic_loss(const std::vector<Tensor>& agnostic) {
  if (agnostic.empty())
    throw std::invalid_argument("class_agnostic_loss: need at least one modality");
  Tensor total = Tensor::scalar(0.0);
  for (const auto& a : agnostic) total = add(total, a);
  return total;
}

}  // namespace msda
