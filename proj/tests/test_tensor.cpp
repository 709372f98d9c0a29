#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "msda/rng.hpp"
#include "msda/tensor.hpp"

using namespace msda;

TEST_CASE("forward op basics") {
  Tensor s = softmax(Tensor::from({3}, {0.0, 0.0, 0.0}));
  for (int i = 0; i < 3; ++i) CHECK(s.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  Tensor r = relu(Tensor::from({2}, {-1.0, 2.0}));
  CHECK(r.at(0) == 0.0);
  CHECK(r.at(1) == 2.0);

  Tensor a = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor p = matmul(Tensor::eye(3), a);
  for (std::size_t i = 0; i < 6; ++i) CHECK(p.at(i) == a.at(i));

  Tensor d = pairwise_sqdist(Tensor::from({2, 2}, {0, 0, 1, 0}), Tensor::from({1, 2}, {0, 1}));
  CHECK(d.at(0, 0) == doctest::Approx(1.0));
  CHECK(d.at(1, 0) == doctest::Approx(2.0));

  Tensor c = concat(Tensor::from({2, 1}, {1, 2}), Tensor::from({2, 2}, {3, 4, 5, 6}));
  CHECK(c.shape() == Shape{2, 3});
  CHECK(c.at(0, 0) == 1.0);
  CHECK(c.at(0, 2) == 4.0);
  CHECK(c.at(1, 1) == 5.0);

  Tensor n = row_l2_norm(Tensor::from({2, 2}, {3, 4, 0, 0}));
  CHECK(n.at(0) == doctest::Approx(5.0));
  CHECK(n.at(1) == 0.0);
}

TEST_CASE("op error contracts") {
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), std::invalid_argument);
  CHECK_THROWS_WITH_AS(add(Tensor::zeros({2}), Tensor::zeros({3})),
                       "add: shape mismatch (2) vs (3)", std::invalid_argument);
  CHECK_THROWS_AS(log(Tensor::from({1}, {-1.0})), std::domain_error);
  CHECK_THROWS_AS(log(Tensor::from({1}, {0.0})), std::domain_error);
  CHECK_THROWS_AS(backward(Tensor::zeros({2}, true)), std::invalid_argument);
  CHECK_THROWS_AS(pick(Tensor::zeros({2, 2}), {0, 5}), std::invalid_argument);
  CHECK_THROWS_AS(take_rows(Tensor::zeros({2, 2}), {3}), std::invalid_argument);
}

TEST_CASE("backward basics") {
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  Tensor y = Tensor::from({2}, {1.0, 2.0}, true);
  backward(sum(mul(y, y)));
  CHECK(y.grad()[0] == doctest::Approx(2.0));
  CHECK(y.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("gradient accumulation across branches") {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  backward(add(sum(x), sum(mul(x, x))));  // d/dx = 1 + 2x
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(x.grad()[1] == doctest::Approx(5.0));
}

TEST_CASE("broadcast bias add backward") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor b = Tensor::from({3}, {0.5, 0.5, 0.5}, true);
  backward(sum(add(a, b)));
  for (double g : a.grad()) CHECK(g == 1.0);
  for (double g : b.grad()) CHECK(g == 2.0);
}

TEST_CASE("cross-entropy gradient matches finite differences") {
  Rng rng(7);
  std::vector<double> xd(2 * 3), wd(3 * 4);
  for (auto& v : xd) v = rng.normal();
  for (auto& v : wd) v = rng.normal();
  Tensor x = Tensor::from({2, 3}, xd);
  std::vector<int> labels{1, 3};
  auto f = [&](const Tensor& w) {
    return mean(neg(pick(log_softmax(matmul(x, w)), labels)));
  };
  CHECK(finite_diff_check(f, Tensor::from({3, 4}, wd), 1e-5) < 1e-5);
}

TEST_CASE("finite differences through composite ops") {
  Rng rng(11);
  std::vector<double> xd(4 * 3);
  for (auto& v : xd) v = rng.normal();
  Tensor other = Tensor::from({2, 3}, {0.3, -0.2, 0.5, 1.0, 0.1, -0.4});

  auto quad = [](const Tensor& t) { return sum(mul(t, t)); };
  CHECK(finite_diff_check(quad, Tensor::from({4, 3}, xd), 1e-5) < 1e-6);

  auto sq = [&](const Tensor& t) { return sum(pairwise_sqdist(t, other)); };
  CHECK(finite_diff_check(sq, Tensor::from({4, 3}, xd), 1e-5) < 1e-6);

  auto mix = [&](const Tensor& t) {
    Tensor sm = softmax(t);
    Tensor picked = take_rows(sm, {2, 0, 1});
    Tensor left = slice_cols(picked, 0, 2);
    return mean(mul(row_l2_norm(concat(left, picked)), Tensor::from({3}, {1.0, -2.0, 0.5})));
  };
  CHECK(finite_diff_check(mix, Tensor::from({4, 3}, xd), 1e-5) < 1e-4);

  auto expo = [](const Tensor& t) { return sum(log(add(exp(t), Tensor::full(t.shape(), 1.0)))); };
  CHECK(finite_diff_check(expo, Tensor::from({4, 3}, xd), 1e-5) < 1e-6);

  auto root = [](const Tensor& t) { return sum(sqrt_eps(mul(t, t), 1e-6)); };
  CHECK(finite_diff_check(root, Tensor::from({4, 3}, xd), 1e-5) < 1e-4);
}

namespace {

// independent reference: diagonal Gaussian mixture log density, plain loops
double ref_mix_logpdf(const std::vector<double>& h, const std::vector<double>& wl,
                      const std::vector<double>& mu, const std::vector<double>& ls) {
  const std::size_t K = wl.size(), d = h.size();
  double lwz = 0.0;
  {
    double m = *std::max_element(wl.begin(), wl.end());
    double z = 0.0;
    for (double v : wl) z += std::exp(v - m);
    lwz = m + std::log(z);
  }
  std::vector<double> comp(K);
  for (std::size_t k = 0; k < K; ++k) {
    double s = wl[k] - lwz;
    for (std::size_t j = 0; j < d; ++j) {
      double se = std::min(4.0, std::max(-6.0, ls[k * d + j]));
      double sig = std::exp(se);
      double z = (h[j] - mu[k * d + j]) / sig;
      s += -0.5 * std::log(2.0 * 3.14159265358979323846) - se - 0.5 * z * z;
    }
    comp[k] = s;
  }
  double m = *std::max_element(comp.begin(), comp.end());
  double z = 0.0;
  for (double v : comp) z += std::exp(v - m);
  return m + std::log(z);
}

}  // namespace

TEST_CASE("mixture log density matches reference and finite differences") {
  const std::size_t B = 4, K = 3, d = 2;
  Rng rng(23);
  std::vector<double> hd(B * d), wld(K), mud(K * d), lsd(K * d);
  for (auto& v : hd) v = rng.normal();
  for (auto& v : wld) v = rng.normal();
  for (auto& v : mud) v = rng.normal();
  for (auto& v : lsd) v = rng.uniform(-1.5, 1.0);

  Tensor h = Tensor::from({B, d}, hd);
  Tensor wl = Tensor::from({K}, wld);
  Tensor mu = Tensor::from({K * d}, mud);
  Tensor ls = Tensor::from({K * d}, lsd);
  Tensor out = mixture_log_density(h, wl, mu, ls);
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> hb(hd.begin() + b * d, hd.begin() + (b + 1) * d);
    CHECK(out.at(b) == doctest::Approx(ref_mix_logpdf(hb, wld, mud, lsd)).epsilon(1e-12));
  }

  auto fh = [&](const Tensor& t) { return mean(mixture_log_density(t, wl, mu, ls)); };
  CHECK(finite_diff_check(fh, h, 1e-5) < 1e-4);
  auto fw = [&](const Tensor& t) { return mean(mixture_log_density(h, t, mu, ls)); };
  CHECK(finite_diff_check(fw, wl, 1e-5) < 1e-4);
  auto fm = [&](const Tensor& t) { return mean(mixture_log_density(h, wl, t, ls)); };
  CHECK(finite_diff_check(fm, mu, 1e-5) < 1e-4);
  auto fs = [&](const Tensor& t) { return mean(mixture_log_density(h, wl, mu, t)); };
  CHECK(finite_diff_check(fs, ls, 1e-5) < 1e-4);

  // per-row conditional parameters take the same path
  std::vector<double> wlb(B * K), mub(B * K * d), lsb(B * K * d);
  for (auto& v : wlb) v = rng.normal();
  for (auto& v : mub) v = rng.normal();
  for (auto& v : lsb) v = rng.uniform(-1.0, 1.0);
  Tensor out2 = mixture_log_density(h, Tensor::from({B, K}, wlb), Tensor::from({B, K * d}, mub),
                                    Tensor::from({B, K * d}, lsb));
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> hb(hd.begin() + b * d, hd.begin() + (b + 1) * d);
    std::vector<double> wb(wlb.begin() + b * K, wlb.begin() + (b + 1) * K);
    std::vector<double> mb(mub.begin() + b * K * d, mub.begin() + (b + 1) * K * d);
    std::vector<double> sb(lsb.begin() + b * K * d, lsb.begin() + (b + 1) * K * d);
    CHECK(out2.at(b) == doctest::Approx(ref_mix_logpdf(hb, wb, mb, sb)).epsilon(1e-12));
  }
  auto fw2 = [&](const Tensor& t) {
    return mean(mixture_log_density(h, t, Tensor::from({B, K * d}, mub),
                                    Tensor::from({B, K * d}, lsb)));
  };
  CHECK(finite_diff_check(fw2, Tensor::from({B, K}, wlb), 1e-5) < 1e-4);

  // log scales past the clamp act as the boundary value and get no gradient
  std::vector<double> hot(K * d, 10.0);
  std::vector<double> at4(K * d, 4.0);
  Tensor o_hot = mixture_log_density(h, wl, mu, Tensor::from({K * d}, hot));
  Tensor o_at4 = mixture_log_density(h, wl, mu, Tensor::from({K * d}, at4));
  for (std::size_t b = 0; b < B; ++b) CHECK(o_hot.at(b) == doctest::Approx(o_at4.at(b)));
  Tensor ls_hot = Tensor::from({K * d}, hot, true);
  backward(mean(mixture_log_density(h, wl, mu, ls_hot)));
  for (double g : ls_hot.grad()) CHECK(g == 0.0);
}

TEST_CASE("sgd steps") {
  {
    Tensor p = Tensor::from({1}, {0.0}, true);
    Sgd opt({p}, {.lr = 0.1});
    p.node()->grad = {1.0};
    opt.step();
    CHECK(p.at(0) == doctest::Approx(-0.1));
  }
  {
    Tensor p = Tensor::from({1}, {0.0}, true);
    Sgd opt({p}, {.lr = 0.1, .momentum = 0.9});
    p.node()->grad = {1.0};
    opt.step();
    p.node()->grad = {1.0};
    opt.step();
    CHECK(p.at(0) == doctest::Approx(-0.29));
  }
  {
    Tensor p = Tensor::from({1}, {1.0}, true);
    Sgd opt({p}, {.lr = 0.1, .weight_decay = 0.5});
    p.node()->grad = {0.0};
    opt.step();
    CHECK(p.at(0) == doctest::Approx(0.95));
  }
  {
    // a parameter the loss never reached steps as if its gradient were zero
    Tensor p = Tensor::from({1}, {1.0}, true);
    Sgd opt({p}, {.lr = 0.1});
    opt.step();
    CHECK(p.at(0) == doctest::Approx(1.0));
  }
  {
    Tensor p = Tensor::from({1}, {1.0}, true);
    Sgd opt({p}, {.lr = 0.1, .weight_decay = 0.5});
    opt.step();
    CHECK(p.at(0) == doctest::Approx(0.95));
  }
  {
    Tensor p = Tensor::from({1}, {0.0}, true);
    Sgd opt({p}, {.lr = 0.1, .momentum = 0.9});
    p.node()->grad = {1.0};
    opt.step();
    opt.step();  // velocity keeps decaying without a fresh gradient
    CHECK(p.at(0) == doctest::Approx(-0.19));
  }
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  Tensor p = Tensor::from({1}, {0.0}, true);
  Sgd opt({p}, {.lr = 0.1, .eta_min = 0.01, .total_epochs = 10});
  opt.set_epoch(0);
  CHECK(opt.current_lr() == doctest::Approx(0.1));
  opt.set_epoch(5);
  CHECK(opt.current_lr() == doctest::Approx(0.055));
  opt.set_epoch(10);
  CHECK(opt.current_lr() == doctest::Approx(0.01));
  opt.set_epoch(99);
  CHECK(opt.current_lr() == doctest::Approx(0.01));
}

TEST_CASE("training trajectories are bit-deterministic") {
  auto run = [] {
    Rng rng(5);
    std::vector<double> wd(6), xd(8 * 3), td(8 * 2);
    for (auto& v : wd) v = rng.normal();
    for (auto& v : xd) v = rng.normal();
    for (auto& v : td) v = rng.normal();
    Tensor w = Tensor::from({3, 2}, wd, true);
    Tensor x = Tensor::from({8, 3}, xd);
    Tensor t = Tensor::from({8, 2}, td);
    Sgd opt({w}, {.lr = 0.05, .momentum = 0.9, .weight_decay = 5e-4});
    for (int it = 0; it < 5; ++it) {
      Tensor diff = sub(matmul(x, w), t);
      backward(mean(mul(diff, diff)));
      opt.step();
    }
    return w.data();
  };
  auto a = run(), b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("finite_diff_check validates inputs") {
  auto f = [](const Tensor& t) { return sum(t); };
  CHECK_THROWS_AS(finite_diff_check(f, Tensor::zeros({2}), 0.0), std::invalid_argument);
  CHECK_THROWS_AS(finite_diff_check(f, Tensor::zeros({2}), 1e-2), std::invalid_argument);
  auto bad = [](const Tensor& t) { return log(sum(t)); };
  CHECK_THROWS_AS(finite_diff_check(bad, Tensor::from({2}, {-1.0, 0.5}), 1e-5),
                  std::domain_error);
}

TEST_CASE("rng determinism, fork independence and moments") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng base(42);
  Rng f1 = base.fork(1), f2 = base.fork(2);
  CHECK(f1.next_u64() != f2.next_u64());
  Rng base2(42);
  Rng f1b = base2.fork(1);
  Rng f1r = Rng(42).fork(1);
  CHECK(f1b.next_u64() == f1r.next_u64());

  Rng u(3);
  for (int i = 0; i < 1000; ++i) {
    double v = u.uniform();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
    int k = u.uniform_int(7);
    CHECK(k >= 0);
    CHECK(k < 7);
  }
  CHECK_THROWS_AS(u.uniform_int(0), std::invalid_argument);

  Rng g(9);
  double s = 0.0, s2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double v = g.normal();
    s += v;
    s2 += v * v;
  }
  CHECK(std::abs(s / n) < 0.05);
  CHECK(std::abs(s2 / n - 1.0) < 0.05);

  std::vector<int> perm(10);
  std::iota(perm.begin(), perm.end(), 0);
  Rng sh(1);
  sh.shuffle(perm);
  std::vector<int> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 10; ++i) CHECK(sorted[i] == i);
  CHECK(hash_tag("visual") != hash_tag("physio"));
  CHECK(hash_tag("visual") == hash_tag("visual"));
}
