#include "msda/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace msda {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

NodePtr make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  n->leaf = true;
  return n;
}

bool any_requires(const std::vector<NodePtr>& parents) {
  for (const auto& p : parents)
    if (p->requires_grad) return true;
  return false;
}

Tensor make_result(Shape shape, std::vector<double> data, std::vector<NodePtr> parents,
                   std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  if (any_requires(parents)) {
    n->requires_grad = true;
    n->leaf = false;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor::wrap(std::move(n));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                              shape_str(b));
}

[[noreturn]] void shape_error(const char* op, const Shape& a) {
  throw std::invalid_argument(std::string(op) + ": unsupported shape " + shape_str(a));
}

// interpret 1-D and 2-D tensors as a matrix view
void as_matrix(const Tensor& t, const char* op, std::size_t& r, std::size_t& c) {
  if (t.ndim() == 1) {
    r = 1;
    c = t.shape()[0];
  } else if (t.ndim() == 2) {
    r = t.shape()[0];
    c = t.shape()[1];
  } else {
    shape_error(op, t.shape());
  }
}

void accumulate(Node& parent, const std::vector<double>& contrib) {
  parent.ensure_grad();
  double* g = parent.grad.data();
  const double* c = contrib.data();
  for (std::size_t i = 0; i < contrib.size(); ++i) g[i] += c[i];
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << ")";
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return wrap(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto n = shape_numel(shape);
  return wrap(make_leaf(std::move(shape), std::vector<double>(n, v), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) + " needs " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(data.size()));
  return wrap(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return wrap(make_leaf({1}, {v}, requires_grad));
}

Tensor Tensor::eye(std::size_t n) {
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return wrap(make_leaf({n, n}, std::move(d), false));
}

std::size_t Tensor::rows() const { return ndim() <= 1 ? std::size_t(1) : node_->shape[0]; }

std::size_t Tensor::cols() const {
  return node_->shape.empty() ? std::size_t(1) : node_->shape.back();
}

double Tensor::value() const {
  if (numel() != 1) throw std::invalid_argument("Tensor::value: tensor is not scalar, shape " +
                                                shape_str(node_->shape));
  return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return node_->data[r * cols() + c];
}

void Tensor::set_requires_grad(bool v) {
  if (!node_->leaf && !v)
    throw std::logic_error("set_requires_grad: cannot disable gradients on a recorded op result");
  node_->requires_grad = v;
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.size() != node_->data.size())
    throw std::logic_error("Tensor::grad: no gradient populated");
  return node_->grad;
}

Tensor Tensor::detach() const {
  return wrap(make_leaf(node_->shape, node_->data, false));
}

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0])
    shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  {
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* C = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t l = 0; l < k; ++l) {
        const double av = A[i * k + l];
        if (av == 0.0) continue;
        const double* Br = B + l * n;
        double* Cr = C + i * n;
        for (std::size_t j = 0; j < n; ++j) Cr[j] += av * Br[j];
      }
  }
  auto an = a.node(), bn = b.node();
  return make_result({m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](Node& self) {
    const double* G = self.grad.data();
    if (an->requires_grad) {
      std::vector<double> da(m * k, 0.0);
      const double* B = bn->data.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          const double* Gr = G + i * n;
          const double* Br = B + l * n;
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += Gr[j] * Br[j];
          da[i * k + l] = s;
        }
      accumulate(*an, da);
    }
    if (bn->requires_grad) {
      std::vector<double> db(k * n, 0.0);
      const double* A = an->data.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          const double av = A[i * k + l];
          if (av == 0.0) continue;
          const double* Gr = G + i * n;
          double* Dr = db.data() + l * n;
          for (std::size_t j = 0; j < n; ++j) Dr[j] += av * Gr[j];
        }
      accumulate(*bn, db);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  auto an = a.node(), bn = b.node();
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_result(a.shape(), std::move(out), {an, bn}, [an, bn](Node& self) {
      if (an->requires_grad) accumulate(*an, self.grad);
      if (bn->requires_grad) accumulate(*bn, self.grad);
    });
  }
  // (m,n) + (n): broadcast the vector over rows
  if (a.ndim() == 2 && b.ndim() == 1 && a.shape()[1] == b.shape()[0]) {
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] + b.data()[j];
    return make_result({m, n}, std::move(out), {an, bn}, [an, bn, m, n](Node& self) {
      if (an->requires_grad) accumulate(*an, self.grad);
      if (bn->requires_grad) {
        std::vector<double> db(n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) db[j] += self.grad[i * n + j];
        accumulate(*bn, db);
      }
    });
  }
  shape_error("add", a.shape(), b.shape());
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) accumulate(*an, self.grad);
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        bn->grad[i] += self.grad[i] * an->data[i];
    }
  });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  auto an = a.node();
  return make_result(a.shape(), std::move(out), {an}, [an, s](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * s;
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  auto an = a.node();
  return make_result(a.shape(), std::move(out), {an}, [an](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (an->data[i] > 0.0) an->grad[i] += self.grad[i];
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
  auto an = a.node();
  return make_result(a.shape(), std::move(out), {an}, [an](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i] * self.data[i];
  });
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(a.data()[i] > 0.0))
      throw std::domain_error("log: non-positive value " + std::to_string(a.data()[i]) +
                              " at index " + std::to_string(i));
    out[i] = std::log(a.data()[i]);
  }
  auto an = a.node();
  return make_result(a.shape(), std::move(out), {an}, [an](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] / an->data[i];
  });
}

Tensor sqrt_eps(const Tensor& a, double eps) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = a.data()[i] + eps;
    if (!(v > 0.0)) throw std::domain_error("sqrt_eps: value + eps is not positive");
    out[i] = std::sqrt(v);
  }
  auto an = a.node();
  return make_result(a.shape(), std::move(out), {an}, [an](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i] * 0.5 / self.data[i];
  });
}

namespace {

// shared row-wise forward for softmax / log_softmax
void softmax_rows(const double* x, double* y, std::size_t m, std::size_t n, bool log_form) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = x + i * n;
    double* yr = y + i * n;
    double mx = xr[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xr[j] - mx);
    if (log_form) {
      const double lz = std::log(z);
      for (std::size_t j = 0; j < n; ++j) yr[j] = xr[j] - mx - lz;
    } else {
      for (std::size_t j = 0; j < n; ++j) yr[j] = std::exp(xr[j] - mx) / z;
    }
  }
}

}  // namespace

Tensor softmax(const Tensor& a) {
  std::size_t m, n;
  as_matrix(a, "softmax", m, n);
  std::vector<double> out(m * n);
  softmax_rows(a.data().data(), out.data(), m, n, false);
  auto an = a.node();
  return make_result(a.shape(), std::move(out), {an}, [an, m, n](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.data.data() + i * n;
      const double* g = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      double* d = an->grad.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) d[j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& a) {
  std::size_t m, n;
  as_matrix(a, "log_softmax", m, n);
  std::vector<double> out(m * n);
  softmax_rows(a.data().data(), out.data(), m, n, true);
  auto an = a.node();
  return make_result(a.shape(), std::move(out), {an}, [an, m, n](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.data.data() + i * n;
      const double* g = self.grad.data() + i * n;
      double gsum = 0.0;
      for (std::size_t j = 0; j < n; ++j) gsum += g[j];
      double* d = an->grad.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) d[j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
}

namespace {

Tensor reduce_all(const Tensor& a, bool take_mean, const char* /*op*/) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double denom = take_mean ? static_cast<double>(a.numel()) : 1.0;
  auto an = a.node();
  return make_result({1}, {s / denom}, {an}, [an, denom](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const double g = self.grad[0] / denom;
    for (auto& v : an->grad) v += g;
  });
}

}  // namespace

Tensor mean(const Tensor& a) { return reduce_all(a, true, "mean"); }
Tensor sum(const Tensor& a) { return reduce_all(a, false, "sum"); }

Tensor concat(const Tensor& a, const Tensor& b) {
  if (a.ndim() != b.ndim()) shape_error("concat", a.shape(), b.shape());
  if (a.ndim() == 1) {
    std::vector<double> out(a.numel() + b.numel());
    std::copy(a.data().begin(), a.data().end(), out.begin());
    std::copy(b.data().begin(), b.data().end(), out.begin() + a.numel());
    auto an = a.node(), bn = b.node();
    const std::size_t na = a.numel();
    return make_result({out.size()}, std::move(out), {an, bn}, [an, bn, na](Node& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < na; ++i) an->grad[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < bn->data.size(); ++i) bn->grad[i] += self.grad[na + i];
      }
    });
  }
  if (a.ndim() != 2 || a.shape()[0] != b.shape()[0])
    throw std::invalid_argument("concat: row count mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const std::size_t m = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
  std::vector<double> out(m * (ca + cb));
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(a.data().begin() + i * ca, a.data().begin() + (i + 1) * ca,
              out.begin() + i * (ca + cb));
    std::copy(b.data().begin() + i * cb, b.data().begin() + (i + 1) * cb,
              out.begin() + i * (ca + cb) + ca);
  }
  auto an = a.node(), bn = b.node();
  return make_result({m, ca + cb}, std::move(out), {an, bn}, [an, bn, m, ca, cb](Node& self) {
    const std::size_t c = ca + cb;
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < ca; ++j) an->grad[i * ca + j] += self.grad[i * c + j];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < cb; ++j) bn->grad[i * cb + j] += self.grad[i * c + ca + j];
    }
  });
}

Tensor row_l2_norm(const Tensor& a) {
  std::size_t m, n;
  as_matrix(a, "row_l2_norm", m, n);
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = a.data()[i * n + j];
      s += v * v;
    }
    out[i] = std::sqrt(s);
  }
  auto an = a.node();
  return make_result({m}, std::move(out), {an}, [an, m, n](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const double norm = self.data[i];
      if (norm == 0.0) continue;
      const double g = self.grad[i] / norm;
      for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += g * an->data[i * n + j];
    }
  });
}

Tensor pairwise_sqdist(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1])
    shape_error("pairwise_sqdist", a.shape(), b.shape());
  const std::size_t m = a.shape()[0], n = b.shape()[0], d = a.shape()[1];
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a.data().data() + i * d;
    for (std::size_t j = 0; j < n; ++j) {
      const double* br = b.data().data() + j * d;
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        const double diff = ar[t] - br[t];
        s += diff * diff;
      }
      out[i * n + j] = s;
    }
  }
  auto an = a.node(), bn = b.node();
  return make_result({m, n}, std::move(out), {an, bn}, [an, bn, m, n, d](Node& self) {
    const double* G = self.grad.data();
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    if (!an->requires_grad && !bn->requires_grad) return;
    for (std::size_t i = 0; i < m; ++i) {
      const double* ar = an->data.data() + i * d;
      for (std::size_t j = 0; j < n; ++j) {
        const double g2 = 2.0 * G[i * n + j];
        if (g2 == 0.0) continue;
        const double* br = bn->data.data() + j * d;
        for (std::size_t t = 0; t < d; ++t) {
          const double diff = ar[t] - br[t];
          if (an->requires_grad) an->grad[i * d + t] += g2 * diff;
          if (bn->requires_grad) bn->grad[j * d + t] -= g2 * diff;
        }
      }
    }
  });
}

Tensor pick(const Tensor& a, const std::vector<int>& idx) {
  if (a.ndim() != 2) shape_error("pick", a.shape());
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (idx.size() != m)
    throw std::invalid_argument("pick: need one index per row, got " + std::to_string(idx.size()) +
                                " for " + std::to_string(m) + " rows");
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    const int j = idx[i];
    if (j < 0 || static_cast<std::size_t>(j) >= n)
      throw std::invalid_argument("pick: index " + std::to_string(j) + " out of range [0," +
                                  std::to_string(n) + ") at row " + std::to_string(i));
    out[i] = a.data()[i * n + static_cast<std::size_t>(j)];
  }
  auto an = a.node();
  return make_result({m}, std::move(out), {an}, [an, idx, n](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      an->grad[i * n + static_cast<std::size_t>(idx[i])] += self.grad[i];
  });
}

Tensor take_rows(const Tensor& a, const std::vector<int>& idx) {
  if (a.ndim() != 2) shape_error("take_rows", a.shape());
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(idx.size() * c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const int j = idx[i];
    if (j < 0 || static_cast<std::size_t>(j) >= r)
      throw std::invalid_argument("take_rows: row index " + std::to_string(j) +
                                  " out of range [0," + std::to_string(r) + ")");
    std::copy(a.data().begin() + j * c, a.data().begin() + (j + 1) * c, out.begin() + i * c);
  }
  auto an = a.node();
  return make_result({idx.size(), c}, std::move(out), {an}, [an, idx, c](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const std::size_t j = static_cast<std::size_t>(idx[i]);
      for (std::size_t t = 0; t < c; ++t) an->grad[j * c + t] += self.grad[i * c + t];
    }
  });
}

Tensor slice_cols(const Tensor& a, std::size_t from, std::size_t to) {
  if (a.ndim() != 2) shape_error("slice_cols", a.shape());
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (from > to || to > n)
    throw std::invalid_argument("slice_cols: range [" + std::to_string(from) + "," +
                                std::to_string(to) + ") invalid for " + std::to_string(n) +
                                " columns");
  const std::size_t w = to - from;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy(a.data().begin() + i * n + from, a.data().begin() + i * n + to, out.begin() + i * w);
  auto an = a.node();
  return make_result({m, w}, std::move(out), {an}, [an, m, n, from, w](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t t = 0; t < w; ++t) an->grad[i * n + from + t] += self.grad[i * w + t];
  });
}

namespace {

constexpr double kMinLogScale = -6.0;
constexpr double kMaxLogScale = 4.0;

struct MixtureDims {
  std::size_t batch, n_mix, dim;
  std::size_t stride_w, stride_md;  // 0 when the parameter row is shared
};

MixtureDims mixture_dims(const Tensor& h, const Tensor& wl, const Tensor& mu, const Tensor& ls) {
  if (h.ndim() != 2) shape_error("mixture_log_density", h.shape());
  MixtureDims d{};
  d.batch = h.shape()[0];
  d.dim = h.shape()[1];
  auto row_width = [&](const Tensor& t, const char* what) -> std::pair<std::size_t, std::size_t> {
    if (t.ndim() == 1) return {t.shape()[0], 0};
    if (t.ndim() == 2 && t.shape()[0] == d.batch) return {t.shape()[1], t.shape()[1]};
    throw std::invalid_argument(std::string("mixture_log_density: ") + what + " shape " +
                                shape_str(t.shape()) + " must be 1-D or have " +
                                std::to_string(d.batch) + " rows");
  };
  auto [wn, ws] = row_width(wl, "weight_logits");
  d.n_mix = wn;
  d.stride_w = ws;
  auto [mn, ms] = row_width(mu, "means");
  auto [sn, ss] = row_width(ls, "log_scales");
  if (mn != d.n_mix * d.dim || sn != d.n_mix * d.dim)
    throw std::invalid_argument("mixture_log_density: means/log_scales width " +
                                std::to_string(mn) + "/" + std::to_string(sn) + " != n_mix*dim = " +
                                std::to_string(d.n_mix * d.dim));
  if (ms != ss && (ms == 0 || ss == 0))
    throw std::invalid_argument("mixture_log_density: means and log_scales must both be shared "
                                "or both per-row");
  d.stride_md = ms;
  return d;
}

}  // namespace

Tensor mixture_log_density(const Tensor& h, const Tensor& weight_logits, const Tensor& means,
                           const Tensor& log_scales) {
  const MixtureDims md = mixture_dims(h, weight_logits, means, log_scales);
  const std::size_t B = md.batch, K = md.n_mix, D = md.dim;
  for (double v : h.data())
    if (!std::isfinite(v)) throw std::domain_error("mixture_log_density: non-finite input");

  std::vector<double> out(B);
  auto resp = std::make_shared<std::vector<double>>(B * K);  // posterior responsibilities
  const double* H = h.data().data();
  const double* WL = weight_logits.data().data();
  const double* MU = means.data().data();
  const double* LS = log_scales.data().data();

  std::vector<double> a(K);
  for (std::size_t b = 0; b < B; ++b) {
    const double* wl = WL + b * md.stride_w;
    const double* mu = MU + b * md.stride_md;
    const double* ls = LS + b * md.stride_md;
    const double* hr = H + b * D;
    // normalized log weights
    double wmax = wl[0];
    for (std::size_t k = 1; k < K; ++k) wmax = std::max(wmax, wl[k]);
    double wz = 0.0;
    for (std::size_t k = 0; k < K; ++k) wz += std::exp(wl[k] - wmax);
    const double lwz = wmax + std::log(wz);
    for (std::size_t k = 0; k < K; ++k) {
      double s = wl[k] - lwz;
      for (std::size_t j = 0; j < D; ++j) {
        const double se = std::clamp(ls[k * D + j], kMinLogScale, kMaxLogScale);
        const double z = (hr[j] - mu[k * D + j]) * std::exp(-se);
        s += -0.5 * kLog2Pi - se - 0.5 * z * z;
      }
      a[k] = s;
    }
    double amax = a[0];
    for (std::size_t k = 1; k < K; ++k) amax = std::max(amax, a[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(a[k] - amax);
    const double L = amax + std::log(z);
    out[b] = L;
    for (std::size_t k = 0; k < K; ++k) (*resp)[b * K + k] = std::exp(a[k] - L);
  }

  auto hn = h.node(), wn = weight_logits.node(), mn = means.node(), sn = log_scales.node();
  return make_result(
      {B}, std::move(out), {hn, wn, mn, sn}, [hn, wn, mn, sn, md, resp](Node& self) {
        const std::size_t B = md.batch, K = md.n_mix, D = md.dim;
        const double* H = hn->data.data();
        const double* WL = wn->data.data();
        const double* MU = mn->data.data();
        const double* LS = sn->data.data();
        if (hn->requires_grad) hn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (mn->requires_grad) mn->ensure_grad();
        if (sn->requires_grad) sn->ensure_grad();
        std::vector<double> smw(K);
        for (std::size_t b = 0; b < B; ++b) {
          const double g = self.grad[b];
          if (g == 0.0) continue;
          const double* wl = WL + b * md.stride_w;
          const double* mu = MU + b * md.stride_md;
          const double* ls = LS + b * md.stride_md;
          const double* hr = H + b * D;
          const double* r = resp->data() + b * K;
          if (wn->requires_grad) {
            double wmax = wl[0];
            for (std::size_t k = 1; k < K; ++k) wmax = std::max(wmax, wl[k]);
            double wz = 0.0;
            for (std::size_t k = 0; k < K; ++k) wz += std::exp(wl[k] - wmax);
            for (std::size_t k = 0; k < K; ++k) smw[k] = std::exp(wl[k] - wmax) / wz;
            double* gw = wn->grad.data() + b * md.stride_w;
            for (std::size_t k = 0; k < K; ++k) gw[k] += g * (r[k] - smw[k]);
          }
          for (std::size_t k = 0; k < K; ++k) {
            const double gk = g * r[k];
            if (gk == 0.0) continue;
            for (std::size_t j = 0; j < D; ++j) {
              const double raw = ls[k * D + j];
              const double se = std::clamp(raw, kMinLogScale, kMaxLogScale);
              const double inv_var = std::exp(-2.0 * se);
              const double diff = hr[j] - mu[k * D + j];
              const double zz = diff * diff * inv_var;
              if (hn->requires_grad) hn->grad[b * D + j] -= gk * diff * inv_var;
              if (mn->requires_grad) mn->grad[b * md.stride_md + k * D + j] += gk * diff * inv_var;
              if (sn->requires_grad && raw >= kMinLogScale && raw <= kMaxLogScale)
                sn->grad[b * md.stride_md + k * D + j] += gk * (zz - 1.0);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw std::invalid_argument("backward: loss is not connected to any gradient-tracked tensor");

  // iterative post-order DFS over gradient-tracked parents
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  struct Frame {
    detail::Node* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      detail::Node* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

Sgd::Sgd(std::vector<Tensor> params, SgdConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.lr > 0.0)) throw std::invalid_argument("Sgd: learning_rate must be > 0");
  if (cfg_.momentum < 0.0 || cfg_.momentum >= 1.0)
    throw std::invalid_argument("Sgd: momentum must be in [0,1)");
  if (cfg_.weight_decay < 0.0) throw std::invalid_argument("Sgd: weight_decay must be >= 0");
  if (cfg_.eta_min > cfg_.lr) throw std::invalid_argument("Sgd: eta_min must be <= learning_rate");
  if (cfg_.total_epochs < 1) throw std::invalid_argument("Sgd: total_epochs must be >= 1");
  lr_now_ = cfg_.lr;
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
}

void Sgd::set_epoch(int epoch) {
  const double t = std::min<double>(epoch, cfg_.total_epochs) / cfg_.total_epochs;
  lr_now_ = cfg_.eta_min + (cfg_.lr - cfg_.eta_min) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

void Sgd::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto n = params_[i].node();
    // A parameter the loss never touched has an empty grad buffer; treat it as
    // zero gradient so momentum decays and weight decay still applies.
    const bool has_grad = n->grad.size() == n->data.size();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < n->data.size(); ++j) {
      const double g = has_grad ? n->grad[j] : 0.0;
      v[j] = cfg_.momentum * v[j] + g + cfg_.weight_decay * n->data[j];
      n->data[j] -= lr_now_ * v[j];
    }
    n->grad.clear();
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.node()->grad.clear();
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps) {
  if (!(eps > 0.0) || eps > 1e-3)
    throw std::invalid_argument("finite_diff_check: eps must be in (0, 1e-3]");
  Tensor xc = Tensor::from(x.shape(), x.data(), true);
  Tensor loss = f(xc);
  const double f0 = loss.value();
  if (!std::isfinite(f0)) throw std::domain_error("finite_diff_check: f(x) is not finite");
  backward(loss);
  const std::vector<double> g = xc.grad();

  double max_rel = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    std::vector<double> dp = x.data(), dm = x.data();
    dp[i] += eps;
    dm[i] -= eps;
    const double fp = f(Tensor::from(x.shape(), std::move(dp), false)).value();
    const double fm = f(Tensor::from(x.shape(), std::move(dm), false)).value();
    const double fd = (fp - fm) / (2.0 * eps);
    const double rel = std::abs(g[i] - fd) / (std::abs(fd) + 1e-8);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace msda
