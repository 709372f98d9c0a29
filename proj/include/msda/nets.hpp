#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "msda/rng.hpp"
#include "msda/tensor.hpp"

namespace msda {

enum class Modality { visual, physio };
const char* modality_name(Modality m);

// Two affine layers with a relu between: in -> hidden -> out.
struct Mlp {
  Tensor w1, b1, w2, b2;

  static Mlp init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);
  Tensor forward(const Tensor& x) const;  // (B, in) -> (B, out)
  std::vector<Tensor> params() const;

  std::size_t in_dim() const { return w1.shape()[0]; }
  std::size_t hidden_dim() const { return w1.shape()[1]; }
  std::size_t out_dim() const { return w2.shape()[1]; }
};

// Per-modality encoder producing the embeddings every other module consumes.
struct Backbone {
  Modality modality = Modality::visual;
  Mlp net;

  Tensor embed(const Tensor& x) const;  // (B, input_dim) -> (B, embed_dim)
  std::vector<Tensor> params() const { return net.params(); }
};

// Per-modality expression classifier over embeddings.
struct ExpressionHead {
  Mlp net;
  Tensor classify(const Tensor& h) const;  // (B, embed_dim) -> (B, C)
  std::vector<Tensor> params() const { return net.params(); }
};

// Identity classifier used as a monitoring probe; it only ever sees detached
// embeddings, so its training never touches backbone parameters.
struct IdentityHead {
  Mlp net;
  Tensor classify(const Tensor& h) const;
  std::vector<Tensor> params() const { return net.params(); }
};

// Classifier over the concatenated pair of modality embeddings.
struct FusionHead {
  Mlp net;
  Tensor classify(const Tensor& fused) const;  // (B, 2*embed_dim) -> (B, C)
  std::vector<Tensor> params() const { return net.params(); }
};

// Row-wise concatenation of the two modality embeddings.
Tensor fuse(const Tensor& h_v, const Tensor& h_p);

// mean over batch of -log softmax(logits)[label]
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// top-1 accuracy; argmax ties resolve to the lowest index
double accuracy(const Tensor& logits, const std::vector<int>& labels);

double identity_probe_accuracy(const IdentityHead& head, const Tensor& h,
                               const std::vector<int>& ids);

// Deterministic full-batch SGD fit (momentum 0.9) used for monitoring probes.
void fit_probe(Mlp& net, const Tensor& x, const std::vector<int>& labels, int epochs, double lr);

}  // namespace msda
