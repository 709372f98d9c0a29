#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace msda {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily during backward
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};
}  // namespace detail

// Dense row-major tensor with reverse-mode autodiff. Ops executed on tensors
// that require gradients are recorded on a dynamic tape; backward() walks the
// tape once in reverse topological order. Values are doubles throughout.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor eye(std::size_t n);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t rows() const;  // first dim (1-D tensors count as one row)
  std::size_t cols() const;  // last dim

  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& mutable_data() { return node_->data; }
  double value() const;             // scalar tensors only
  double at(std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v);
  bool is_leaf() const { return node_->leaf; }
  const std::vector<double>& grad() const;
  bool has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }
  void clear_grad() { node_->grad.clear(); }

  // Leaf copy that shares nothing with the tape.
  Tensor detach() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

// ---- forward ops (all record themselves on the tape when needed) ----

Tensor matmul(const Tensor& a, const Tensor& b);
// same shape, or (m,n)+(n) broadcasting the vector over rows
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // domain error on non-positive entries
Tensor sqrt_eps(const Tensor& a, double eps);
Tensor softmax(const Tensor& a);      // row-wise
Tensor log_softmax(const Tensor& a);  // row-wise, stable
Tensor mean(const Tensor& a);         // all elements -> scalar
Tensor sum(const Tensor& a);          // all elements -> scalar
Tensor concat(const Tensor& a, const Tensor& b);  // along last axis
Tensor row_l2_norm(const Tensor& a);              // (m,n) -> (m)
// (m,d),(n,d) -> (m,n) of squared euclidean distances
Tensor pairwise_sqdist(const Tensor& a, const Tensor& b);
// per-row column pick: out[i] = a[i, idx[i]]
Tensor pick(const Tensor& a, const std::vector<int>& idx);
// row gather: out[i] = a[idx[i], :]; backward scatter-adds
Tensor take_rows(const Tensor& a, const std::vector<int>& idx);
Tensor slice_cols(const Tensor& a, std::size_t from, std::size_t to);

// Row-wise log density of a diagonal Gaussian mixture.
//   h:             (B, d)
//   weight_logits: (K) shared or (B, K) per row
//   means:         (K*d) shared or (B, K*d)
//   log_scales:    (K*d) shared or (B, K*d); clamped to [-6, 4] in the op
// Returns (B). Gradients flow to all four inputs.
Tensor mixture_log_density(const Tensor& h, const Tensor& weight_logits,
                           const Tensor& means, const Tensor& log_scales);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Accumulates d loss / d leaf into every requires_grad leaf reachable from
// loss. loss must be scalar.
void backward(const Tensor& loss);

// ---- SGD with momentum, weight decay and a cosine epoch schedule ----

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.0;
  double weight_decay = 0.0;
  double eta_min = 0.0;
  int total_epochs = 1;
};

class Sgd {
 public:
  Sgd(std::vector<Tensor> params, SgdConfig cfg);

  void set_epoch(int epoch);  // cosine decay from lr down to eta_min
  double current_lr() const { return lr_now_; }
  void step();  // v <- m*v + g + wd*p; p <- p - lr*v; grads cleared
  void zero_grad();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  SgdConfig cfg_;
  double lr_now_;
};

// Max over coordinates of |autodiff - central difference| / (|cd| + 1e-8).
// f must be a pure scalar function of its argument.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps);

}  // namespace msda
