#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <vector>

#include "msda/datagen.hpp"
#include "msda/log.hpp"
#include "msda/nets.hpp"

using namespace msda;
namespace fs = std::filesystem;

namespace {

BenchmarkSpec small_spec() {
  BenchmarkSpec s;
  s.n_classes = 3;
  s.n_sources = 6;
  s.n_targets = 2;
  s.samples_per_subject = 60;
  s.d_v = 8;
  s.d_p = 4;
  s.n_groups = 2;
  s.seed = 11;
  return s;
}

Tensor concat_features(const SubjectDataset& s) { return concat(s.visual, s.physio); }

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::vector<double> mean_row(const Tensor& t) {
  std::vector<double> m(t.cols(), 0.0);
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[j] += t.at(i, j);
  for (auto& v : m) v /= static_cast<double>(t.rows());
  return m;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
}

}  // namespace

TEST_CASE("spec validation") {
  BenchmarkSpec s = small_spec();
  s.n_classes = 1;
  CHECK_THROWS_AS(generate_benchmark(s), std::invalid_argument);
  s = small_spec();
  s.n_sources = 3;
  CHECK_THROWS_AS(generate_benchmark(s), std::invalid_argument);
  s = small_spec();
  s.samples_per_subject = 8;
  CHECK_THROWS_AS(generate_benchmark(s), std::invalid_argument);
  s = small_spec();
  s.n_groups = 1;
  CHECK_THROWS_AS(generate_benchmark(s), std::invalid_argument);
  s = small_spec();
  s.identity_leak = -0.1;
  CHECK_THROWS_AS(generate_benchmark(s), std::invalid_argument);
  s = small_spec();
  s.n_sources = 4;  // two per group is infeasible
  CHECK_THROWS_AS(generate_benchmark(s), std::invalid_argument);
}

TEST_CASE("benchmark structure") {
  BenchmarkSpec spec = small_spec();
  auto subjects = generate_benchmark(spec);
  REQUIRE(subjects.size() == 8);
  CHECK(subjects[0].subject_id == "s00");
  CHECK(subjects[5].subject_id == "s05");
  CHECK(subjects[6].subject_id == "t00");
  CHECK(subjects[7].subject_id == "t01");
  for (std::size_t k = 0; k < subjects.size(); ++k) {
    const auto& s = subjects[k];
    CHECK(s.role == (k < 6 ? Role::source : Role::target));
    CHECK(s.identity == static_cast<int>(k));
    CHECK(s.size() == 60);
    CHECK(s.visual.shape() == Shape{60, 8});
    CHECK(s.physio.shape() == Shape{60, 4});
    std::vector<int> counts(3, 0);
    for (int y : s.labels) counts[static_cast<std::size_t>(y)]++;
    for (int c : counts) CHECK(c == 20);
  }
}

TEST_CASE("no-shift limit is perfectly transferable") {
  BenchmarkSpec spec = small_spec();
  spec.shift_strength = 0.0;
  spec.identity_leak = 0.0;
  spec.noise_reliable = 0.0;
  spec.noise_unreliable = 0.0;
  auto subjects = generate_benchmark(spec);

  std::vector<double> xs;
  std::vector<int> ys;
  for (std::size_t k = 0; k < 6; ++k) {
    Tensor f = concat_features(subjects[k]);
    xs.insert(xs.end(), f.data().begin(), f.data().end());
    ys.insert(ys.end(), subjects[k].labels.begin(), subjects[k].labels.end());
  }
  Tensor train = Tensor::from({ys.size(), 12}, xs);
  Rng rng(1);
  Mlp clf = Mlp::init(12, 32, 3, rng);
  fit_probe(clf, train, ys, 150, 0.05);
  const double src_acc = accuracy(clf.forward(train), ys);
  for (std::size_t k = 6; k < 8; ++k) {
    const double acc = accuracy(clf.forward(concat_features(subjects[k])), subjects[k].labels);
    CHECK(acc >= 0.95);
    CHECK(acc >= src_acc - 0.05);
  }
}

TEST_CASE("identity leak is linearly decodable when noise is off") {
  BenchmarkSpec spec = small_spec();
  spec.identity_leak = 3.0;
  spec.noise_reliable = 0.0;
  spec.noise_unreliable = 0.0;
  auto subjects = generate_benchmark(spec);

  std::vector<double> xtr, xte;
  std::vector<int> ytr, yte;
  for (const auto& s : subjects) {
    Tensor f = concat_features(s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      auto& xs = i % 2 ? xte : xtr;
      auto& ys = i % 2 ? yte : ytr;
      for (std::size_t j = 0; j < 12; ++j) xs.push_back(f.at(i, j));
      ys.push_back(s.identity);
    }
  }
  Tensor train = Tensor::from({ytr.size(), 12}, xtr);
  Tensor test = Tensor::from({yte.size(), 12}, xte);
  Tensor w = Tensor::zeros({12, 8}, true);
  Tensor b = Tensor::zeros({8}, true);
  Sgd opt({w, b}, {.lr = 0.5, .momentum = 0.9});
  for (int e = 0; e < 300; ++e) {
    backward(cross_entropy(add(matmul(train, w), b), ytr));
    opt.step();
  }
  CHECK(accuracy(add(matmul(test, w), b), yte) >= 0.9);
}

TEST_CASE("reliable modality has the smaller residual variance") {
  auto subjects = generate_benchmark(small_spec());
  auto residual_var = [](const SubjectDataset& s, const Tensor& f) {
    std::map<int, std::vector<int>> rows;
    for (std::size_t i = 0; i < s.size(); ++i) rows[s.labels[i]].push_back(static_cast<int>(i));
    double acc = 0.0;
    std::size_t n = 0;
    for (auto& [cls, idx] : rows) {
      std::vector<double> mu(f.cols(), 0.0);
      for (int i : idx)
        for (std::size_t j = 0; j < f.cols(); ++j) mu[j] += f.at(static_cast<std::size_t>(i), j);
      for (auto& v : mu) v /= static_cast<double>(idx.size());
      for (int i : idx)
        for (std::size_t j = 0; j < f.cols(); ++j) {
          const double d = f.at(static_cast<std::size_t>(i), j) - mu[j];
          acc += d * d;
          ++n;
        }
    }
    return acc / static_cast<double>(n);
  };
  const auto& t0 = subjects[6];  // local 0: visual-reliable
  const auto& t1 = subjects[7];  // local 1: physio-reliable
  CHECK(residual_var(t0, t0.visual) < residual_var(t0, t0.physio));
  CHECK(residual_var(t1, t1.physio) < residual_var(t1, t1.visual));
}

TEST_CASE("within-group similarity beats cross-group similarity") {
  double within = 0.0, cross = 0.0;
  std::size_t nw = 0, nc = 0;
  for (int seed = 0; seed < 5; ++seed) {
    BenchmarkSpec spec = small_spec();
    spec.seed = 100 + static_cast<std::uint64_t>(seed);
    auto subjects = generate_benchmark(spec);
    for (std::size_t t = 6; t < 8; ++t) {
      const std::size_t tg = (t - 6) % spec.n_groups;
      auto tm = mean_row(concat_features(subjects[t]));
      for (std::size_t s = 0; s < 6; ++s) {
        const double c = cosine(tm, mean_row(concat_features(subjects[s])));
        if (s % spec.n_groups == tg) {
          within += c;
          ++nw;
        } else {
          cross += c;
          ++nc;
        }
      }
    }
  }
  CHECK(within / static_cast<double>(nw) > cross / static_cast<double>(nc));
}

TEST_CASE("dataset files are deterministic and round trip") {
  const fs::path base = fs::temp_directory_path() / "msda_datagen_test";
  fs::remove_all(base);
  auto subjects = generate_benchmark(small_spec());
  write_dataset(subjects, (base / "a").string());
  write_dataset(generate_benchmark(small_spec()), (base / "b").string());
  for (const char* sub : {"s00", "s03", "t01"}) {
    CHECK(slurp(base / "a" / sub / "samples.csv") == slurp(base / "b" / sub / "samples.csv"));
    CHECK(slurp(base / "a" / sub / "meta.json") == slurp(base / "b" / sub / "meta.json"));
  }

  auto loaded = read_dataset((base / "a").string());
  REQUIRE(loaded.size() == subjects.size());
  for (std::size_t k = 0; k < loaded.size(); ++k) {
    CHECK(loaded[k].subject_id == subjects[k].subject_id);
    CHECK(loaded[k].role == subjects[k].role);
    CHECK(loaded[k].identity == subjects[k].identity);
    CHECK(loaded[k].labels == subjects[k].labels);
    REQUIRE(loaded[k].visual.shape() == subjects[k].visual.shape());
    REQUIRE(loaded[k].physio.shape() == subjects[k].physio.shape());
    for (std::size_t i = 0; i < loaded[k].visual.numel(); ++i)
      CHECK(loaded[k].visual.at(i) == subjects[k].visual.at(i));
    for (std::size_t i = 0; i < loaded[k].physio.numel(); ++i)
      CHECK(loaded[k].physio.at(i) == subjects[k].physio.at(i));
  }
  fs::remove_all(base);
}

TEST_CASE("malformed files produce located diagnostics") {
  const fs::path base = fs::temp_directory_path() / "msda_datagen_bad";
  fs::remove_all(base);
  auto subjects = generate_benchmark(small_spec());
  subjects.resize(1);

  write_dataset(subjects, base.string());
  {
    std::string csv = slurp(base / "s00" / "samples.csv");
    csv.replace(csv.find("v_0"), 3, "q_0");
    std::ofstream(base / "s00" / "samples.csv") << csv;
    CHECK_THROWS_WITH_AS(read_dataset(base.string()),
                         doctest::Contains("line 1"), std::runtime_error);
  }
  write_dataset(subjects, base.string());
  {
    std::string csv = slurp(base / "s00" / "samples.csv");
    const std::size_t cut = csv.find('\n', csv.find('\n') + 1);  // keep header + truncate row 2
    csv = csv.substr(0, cut - 20) + "\n";
    std::ofstream(base / "s00" / "samples.csv") << csv;
    CHECK_THROWS_WITH_AS(read_dataset(base.string()),
                         doctest::Contains("line 2"), std::runtime_error);
  }
  write_dataset(subjects, base.string());
  {
    std::ofstream(base / "s00" / "meta.json") << "{\"subject_id\": \"s00\", \"role\": \"source\"}";
    CHECK_THROWS_WITH_AS(read_dataset(base.string()),
                         doctest::Contains("identity"), std::runtime_error);
  }
  fs::remove_all(base);
  CHECK_THROWS_AS(read_dataset((base / "nope").string()), std::runtime_error);
}

TEST_CASE("stratified target split") {
  BenchmarkSpec spec = small_spec();
  spec.n_classes = 4;
  spec.samples_per_subject = 100;
  auto subjects = generate_benchmark(spec);
  const auto& t = subjects.back();

  auto split = split_target(t, {0.6, 0.2, 0.2}, 7);
  CHECK(split.train.size() == 60);
  CHECK(split.val.size() == 20);
  CHECK(split.test.size() == 20);
  for (const auto* part : {&split.train, &split.val, &split.test}) {
    std::vector<int> counts(4, 0);
    for (int y : part->labels) counts[static_cast<std::size_t>(y)]++;
    const int per = static_cast<int>(part->size()) / 4;
    for (int c : counts) CHECK(std::abs(c - per) <= 1);
  }

  // disjoint and exhaustive on feature rows
  std::multiset<double> first_coords;
  for (const auto* part : {&split.train, &split.val, &split.test})
    for (std::size_t i = 0; i < part->size(); ++i) first_coords.insert(part->visual.at(i, 0));
  std::multiset<double> original;
  for (std::size_t i = 0; i < t.size(); ++i) original.insert(t.visual.at(i, 0));
  CHECK(first_coords == original);

  auto all = split_target(t, {1.0, 0.0, 0.0}, 7);
  CHECK(all.train.size() == 100);
  CHECK(all.val.size() == 0);
  CHECK(all.test.size() == 0);

  auto again = split_target(t, {0.6, 0.2, 0.2}, 7);
  CHECK(again.train.labels == split.train.labels);
  for (std::size_t i = 0; i < again.train.visual.numel(); ++i)
    CHECK(again.train.visual.at(i) == split.train.visual.at(i));

  CHECK_THROWS_AS(split_target(t, {0.5, 0.2, 0.2}, 7), std::invalid_argument);

  SubjectDataset tiny;
  tiny.subject_id = "t99";
  tiny.role = Role::target;
  tiny.identity = 9;
  tiny.labels = {0, 0, 0, 0, 1, 1};
  tiny.visual = Tensor::from({6, 1}, {0, 1, 2, 3, 4, 5});
  tiny.physio = Tensor::from({6, 1}, {0, 1, 2, 3, 4, 5});
  set_warnings_enabled(false);
  auto fallback = split_target(tiny, {0.5, 0.25, 0.25}, 3);
  set_warnings_enabled(true);
  CHECK(fallback.train.size() + fallback.val.size() + fallback.test.size() == 6);
}
