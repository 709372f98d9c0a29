#include "msda/nets.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace msda {

const char* modality_name(Modality m) { return m == Modality::visual ? "visual" : "physio"; }

namespace {

Tensor glorot(std::size_t in, std::size_t out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> d(in * out);
  for (auto& v : d) v = rng.uniform(-limit, limit);
  return Tensor::from({in, out}, std::move(d), true);
}

void check_input(const char* op, const Tensor& x, std::size_t want) {
  if (x.ndim() != 2 || x.shape()[1] != want)
    throw std::invalid_argument(std::string(op) + ": input shape " + shape_str(x.shape()) +
                                " does not match expected width " + std::to_string(want));
}

}  // namespace

Mlp Mlp::init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
  Mlp m;
  m.w1 = glorot(in, hidden, rng);
  m.b1 = Tensor::zeros({hidden}, true);
  m.w2 = glorot(hidden, out, rng);
  m.b2 = Tensor::zeros({out}, true);
  return m;
}

Tensor Mlp::forward(const Tensor& x) const {
  check_input("Mlp::forward", x, in_dim());
  return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2);
}

std::vector<Tensor> Mlp::params() const { return {w1, b1, w2, b2}; }

Tensor Backbone::embed(const Tensor& x) const {
  if (x.ndim() != 2 || x.shape()[1] != net.in_dim())
    throw std::invalid_argument(std::string("embed[") + modality_name(modality) +
                                "]: input shape " + shape_str(x.shape()) +
                                " does not match input_dim " + std::to_string(net.in_dim()));
  return net.forward(x);
}

Tensor ExpressionHead::classify(const Tensor& h) const {
  check_input("ExpressionHead::classify", h, net.in_dim());
  return net.forward(h);
}

Tensor IdentityHead::classify(const Tensor& h) const {
  check_input("IdentityHead::classify", h, net.in_dim());
  return net.forward(h);
}

Tensor FusionHead::classify(const Tensor& fused) const {
  check_input("FusionHead::classify", fused, net.in_dim());
  return net.forward(fused);
}

Tensor fuse(const Tensor& h_v, const Tensor& h_p) {
  if (h_v.ndim() != 2 || h_p.ndim() != 2 || h_v.shape()[0] != h_p.shape()[0])
    throw std::invalid_argument("fuse: row-count mismatch " + shape_str(h_v.shape()) + " vs " +
                                shape_str(h_p.shape()));
  return concat(h_v, h_p);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2 || logits.shape()[0] != labels.size())
    throw std::invalid_argument("cross_entropy: logits shape " + shape_str(logits.shape()) +
                                " does not match " + std::to_string(labels.size()) + " labels");
  const int c = static_cast<int>(logits.shape()[1]);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= c)
      throw std::invalid_argument("cross_entropy: label " + std::to_string(labels[i]) +
                                  " out of range [0," + std::to_string(c) + ") at row " +
                                  std::to_string(i));
  return mean(neg(pick(log_softmax(logits), labels)));
}

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2 || logits.shape()[0] != labels.size())
    throw std::invalid_argument("accuracy: logits shape " + shape_str(logits.shape()) +
                                " does not match " + std::to_string(labels.size()) + " labels");
  if (labels.empty()) throw std::invalid_argument("accuracy: empty batch");
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    if (static_cast<int>(best) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

double identity_probe_accuracy(const IdentityHead& head, const Tensor& h,
                               const std::vector<int>& ids) {
  return accuracy(head.classify(h.detach()), ids);
}

void fit_probe(Mlp& net, const Tensor& x, const std::vector<int>& labels, int epochs, double lr) {
  Tensor input = x.detach();
  Sgd opt(net.params(), {.lr = lr, .momentum = 0.9});
  for (int e = 0; e < epochs; ++e) {
    backward(cross_entropy(net.forward(input), labels));
    opt.step();
  }
}

}  // namespace msda
