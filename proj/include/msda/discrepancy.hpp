#pragma once

#include <vector>

#include "msda/tensor.hpp"

namespace msda {

// Multi-scale Gaussian kernel: sum over scale_set of exp(-d^2 / (2 (base*s)^2)).
struct KernelSpec {
  double base_bandwidth = 1.0;
  std::vector<double> scale_set{0.25, 0.5, 1.0, 2.0, 4.0};

  void validate() const;
};

// Median of pairwise Euclidean distances over the pooled rows of x and y;
// returns 1.0 when the median is zero. The result is treated as a constant
// (no gradient flows through bandwidth selection).
double median_bandwidth(const Tensor& x, const Tensor& y);

// Biased V-statistic MMD^2 (diagonals included), differentiable w.r.t. x and y.
Tensor mmd2(const Tensor& x, const Tensor& y, const KernelSpec& kernel);

// Convenience form: median-heuristic bandwidth recomputed on this pooled pair.
Tensor mmd2(const Tensor& x, const Tensor& y);

// Options shared by the three discrepancy aggregates. When `fixed` is set its
// bandwidth is used everywhere instead of the per-pair median; `take_sqrt`
// replaces each MMD^2 term by sqrt(MMD^2 + eps).
struct DiscOptions {
  const KernelSpec* fixed = nullptr;
  bool take_sqrt = false;
};

// Average over evaluable (subject, class) pairs of mmd2 between a subject's
// class-c samples and the target's confident class-c samples. Entries may be
// undefined tensors (subject lacks the class / class not confident); such
// pairs are skipped and the normalizer counts only evaluated pairs. No
// evaluable pair at all -> 0 with a warning.
//   src: [subject][class] embeddings, tgt: [class] confident target embeddings
Tensor intra_class_disc(const std::vector<std::vector<Tensor>>& src,
                        const std::vector<Tensor>& tgt, const DiscOptions& opt = {});

// Average over subjects, classes c, and opposing confident classes c' != c of
// mmd2(src[a][c], tgt[c']). Fewer than two confident classes -> 0 with warning.
Tensor inter_class_disc(const std::vector<std::vector<Tensor>>& src,
                        const std::vector<Tensor>& tgt, const DiscOptions& opt = {});

// Average over subjects of mmd2 between a subject's outside-confident-set
// samples and the non-confident target pool. Empty target pool -> 0
// (agnostic term inactive); no contributing subject -> 0 with warning.
Tensor agnostic_disc(const std::vector<Tensor>& src_outside, const Tensor& tgt_unconfident,
                     const DiscOptions& opt = {});

// Sum over modalities of (intra - inter); may be negative.
Tensor class_aware_loss(const std::vector<Tensor>& intra, const std::vector<Tensor>& inter);

// Sum over modalities of the agnostic discrepancies.
Tensor class_agnostic_loss(const std::vector<Tensor>& agnostic);

}  // namespace msda
