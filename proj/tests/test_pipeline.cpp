#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "msda/log.hpp"
#include "msda/pipeline.hpp"
#include "test_util.hpp"

using namespace msda;
namespace fs = std::filesystem;

namespace {

BenchmarkSpec tiny_benchmark(std::uint64_t seed = 11, bool shifted = true) {
  BenchmarkSpec s;
  s.n_classes = 3;
  s.n_sources = 6;
  s.n_targets = 2;
  s.samples_per_subject = 60;
  s.d_v = 8;
  s.d_p = 4;
  s.n_groups = 2;
  s.seed = seed;
  if (!shifted) {
    s.shift_strength = 0.0;
    s.identity_leak = 0.0;
    s.noise_reliable = 0.0;
    s.noise_unreliable = 0.0;
  }
  return s;
}

PipelineConfig tiny_config(std::uint64_t seed = 1) {
  PipelineConfig c;
  c.source_epochs = 8;
  c.adapt_epochs = 4;
  c.embed_dim = 8;
  c.hidden_dim = 16;
  c.n_mixture = 4;
  c.cond_hidden = 16;
  c.seed = seed;
  return c;
}

std::uint64_t bundle_hash(const ModelBundle& b) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const Tensor& t) { h ^= data_hash(t.data()); h *= 1099511628211ull; };
  for (const Tensor& t : b.model_params()) mix(t);
  for (const Tensor& t : b.est_v.params()) mix(t);
  for (const Tensor& t : b.est_p.params()) mix(t);
  for (const Tensor& t : b.id_head_v.params()) mix(t);
  for (const Tensor& t : b.id_head_p.params()) mix(t);
  return h;
}

bool same_metrics(const RunMetrics& a, const RunMetrics& b) {
  if (a.epochs.size() != b.epochs.size() || a.final_test_acc != b.final_test_acc) return false;
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    const auto& x = a.epochs[i];
    const auto& y = b.epochs[i];
    if (x.loss_s != y.loss_s || x.loss_unsup != y.loss_unsup || x.loss_agn != y.loss_agn ||
        x.loss_aw != y.loss_aw || x.n_confident != y.n_confident || x.val_acc != y.val_acc ||
        x.test_acc != y.test_acc)
      return false;
  }
  return true;
}

// f(x) = relu(x) - relu(-x) = x
Mlp identity_mlp(std::size_t d) {
  std::vector<double> w1(d * 2 * d, 0.0), w2(2 * d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    w1[i * 2 * d + i] = 1.0;
    w1[i * 2 * d + d + i] = -1.0;
    w2[i * d + i] = 1.0;
    w2[(d + i) * d + i] = -1.0;
  }
  Mlp net;
  net.w1 = Tensor::from({d, 2 * d}, w1, true);
  net.b1 = Tensor::zeros({2 * d}, true);
  net.w2 = Tensor::from({2 * d, d}, w2, true);
  net.b2 = Tensor::zeros({d}, true);
  return net;
}

}  // namespace

TEST_CASE("config validation") {
  PipelineConfig c = tiny_config();
  c.tau_ss = 1.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.tau_pl = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.weights.aw = -0.1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.adapt_epochs = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK_NOTHROW(tiny_config().validate());
}

TEST_CASE("checkpoint round trip is bit-exact") {
  Rng rng(3);
  ModelBundle b = ModelBundle::init(8, 4, 3, 6, tiny_config(), rng);
  const fs::path path = fs::temp_directory_path() / "msda_bundle.json";
  save_bundle(b, path.string());
  ModelBundle loaded = load_bundle(path.string());
  CHECK(bundle_hash(loaded) == bundle_hash(b));
  CHECK(loaded.d_v == 8);
  CHECK(loaded.n_identities == 6);
  CHECK(loaded.est_v.cfg.n_mixture == b.est_v.cfg.n_mixture);

  // clone shares nothing with the original
  ModelBundle copy = b.clone();
  copy.backbone_v.net.w1.mutable_data()[0] += 1.0;
  CHECK(bundle_hash(copy) != bundle_hash(b));
  CHECK(bundle_hash(b.clone()) == bundle_hash(b));

  fs::remove(path);
  CHECK_THROWS_WITH_AS(load_bundle(path.string()), doctest::Contains("msda_bundle.json"),
                       std::runtime_error);
}

TEST_CASE("source stage learns separable data") {
  auto subjects = generate_benchmark(tiny_benchmark(5, false));
  auto sources = std::vector<SubjectDataset>(subjects.begin(), subjects.begin() + 6);
  PipelineConfig cfg = tiny_config(2);
  cfg.source_epochs = 20;
  cfg.lr = 0.02;
  auto [bundle, metrics] = train_source_stage(sources, cfg);
  REQUIRE(metrics.epochs.size() == 20);

  std::vector<double> xs;
  std::vector<int> ys;
  for (const auto& s : sources) {
    xs.insert(xs.end(), s.visual.data().begin(), s.visual.data().end());
    ys.insert(ys.end(), s.labels.begin(), s.labels.end());
  }
  const Tensor xv = Tensor::from({ys.size(), 8}, xs);
  CHECK(accuracy(bundle.head_v.classify(bundle.backbone_v.embed(xv)), ys) >= 0.95);
  CHECK(metrics.epochs.back().loss_s < metrics.epochs.front().loss_s);

  CHECK_THROWS_AS(train_source_stage({}, cfg), std::invalid_argument);
}

TEST_CASE("source stage determinism and disentanglement toggles") {
  auto subjects = generate_benchmark(tiny_benchmark(7));
  auto sources = std::vector<SubjectDataset>(subjects.begin(), subjects.begin() + 6);
  PipelineConfig cfg = tiny_config(9);

  auto [b1, m1] = train_source_stage(sources, cfg);
  auto [b2, m2] = train_source_stage(sources, cfg);
  CHECK(bundle_hash(b1) == bundle_hash(b2));
  CHECK(same_metrics(m1, m2));

  // lambda_d = 0 leaves the estimators exactly at their initialization and
  // changes the trained weights relative to the disentangled run
  PipelineConfig plain = cfg;
  plain.weights.disentangle = 0.0;
  auto [b3, m3] = train_source_stage(sources, plain);
  Rng root(plain.seed);
  Rng fork = root.fork(hash_tag("model_init"));
  ModelBundle fresh = ModelBundle::init(8, 4, 3, 6, plain, fork);
  CHECK(data_hash(b3.est_v.means.data()) == data_hash(fresh.est_v.means.data()));
  CHECK(data_hash(b3.est_v.weight_logits.data()) ==
        data_hash(fresh.est_v.weight_logits.data()));
  CHECK(data_hash(b1.est_v.means.data()) != data_hash(fresh.est_v.means.data()));
  CHECK(bundle_hash(b3) != bundle_hash(b1));
}

TEST_CASE("evaluate") {
  // hand-built bundle whose fusion output equals the raw visual features
  const std::size_t C = 3;
  ModelBundle b;
  b.d_v = C;
  b.d_p = 2;
  b.n_classes = C;
  b.embed_dim = C;
  b.backbone_v = Backbone{Modality::visual, identity_mlp(C)};
  Rng rng(4);
  b.backbone_p = Backbone{Modality::physio, Mlp::init(2, 4, C, rng)};
  std::vector<double> w1(2 * C * 4 * C, 0.0), w2(4 * C * C, 0.0);
  for (std::size_t i = 0; i < C; ++i) {
    w1[i * 4 * C + i] = 1.0;
    w1[i * 4 * C + 2 * C + i] = -1.0;
    w2[i * C + i] = 1.0;
    w2[(2 * C + i) * C + i] = -1.0;
  }
  Mlp fusion;
  fusion.w1 = Tensor::from({2 * C, 4 * C}, w1, true);
  fusion.b1 = Tensor::zeros({4 * C}, true);
  fusion.w2 = Tensor::from({4 * C, C}, w2, true);
  fusion.b2 = Tensor::zeros({C}, true);
  b.fusion = FusionHead{fusion};

  SubjectDataset t;
  t.subject_id = "t00";
  t.role = Role::target;
  t.labels = {0, 1, 2, 1};
  t.visual = Tensor::from({4, C}, {5, 0, 0, 0, 5, 0, 0, 0, 5, 0, 5, 0});
  t.physio = Tensor::from({4, 2}, {1, 1, 1, 1, 1, 1, 1, 1});
  CHECK(evaluate(b, t) == 1.0);

  // permuting rows leaves accuracy unchanged
  SubjectDataset perm = t;
  perm.labels = {1, 2, 1, 0};
  perm.visual = Tensor::from({4, C}, {0, 5, 0, 0, 0, 5, 0, 5, 0, 5, 0, 0});
  CHECK(evaluate(b, perm) == 1.0);

  SubjectDataset empty;
  empty.subject_id = "t01";
  CHECK_THROWS_AS(evaluate(b, empty), std::invalid_argument);

  // random-init bundles on random labels sit at chance level
  double acc = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng r(100 + seed);
    ModelBundle rb = ModelBundle::init(6, 4, 4, 3, tiny_config(), r);
    SubjectDataset d;
    d.labels.resize(200);
    for (std::size_t i = 0; i < 200; ++i) d.labels[i] = static_cast<int>(r.uniform_int(4));
    std::vector<double> v(200 * 6), p(200 * 4);
    for (auto& x : v) x = r.normal();
    for (auto& x : p) x = r.normal();
    d.visual = Tensor::from({200, 6}, v);
    d.physio = Tensor::from({200, 4}, p);
    acc += evaluate(rb, d);
  }
  CHECK(acc / 5.0 == doctest::Approx(0.25).epsilon(0.32));
}

TEST_CASE("adaptation stage invariants") {
  auto subjects = generate_benchmark(tiny_benchmark(13));
  auto sources = std::vector<SubjectDataset>(subjects.begin(), subjects.begin() + 6);
  const SubjectDataset& target = subjects[6];
  PipelineConfig cfg = tiny_config(3);
  cfg.tau_pl = 0.5;

  auto [bundle, sm] = train_source_stage(sources, cfg);
  auto split = split_target(target, cfg.split_fractions, 77);
  GuardedTestSplit guarded(split.test);

  auto table = build_similarity_table(sources, split.train, bundle.backbone_v, bundle.backbone_p);
  auto selected = select_sources(table, 0.0);
  REQUIRE(selected.size() == 6);

  ModelBundle adapted = bundle.clone();
  set_warnings_enabled(false);
  RunMetrics rm = adapt_stage(adapted, sources, selected, split.train, split.val, guarded, cfg);
  set_warnings_enabled(true);
  REQUIRE(rm.epochs.size() == 4);

  // the access counter proves training read the test rows once per epoch,
  // through evaluate only
  CHECK(guarded.reads() == 4);
  for (const auto& e : rm.epochs) {
    CHECK(e.n_confident + e.n_unconfident == split.train.size());
    CHECK(e.min_confidence >= cfg.tau_pl);
    CHECK(e.val_acc >= 0.0);
    CHECK(e.test_acc <= 1.0);
  }
  CHECK(rm.final_test_acc == rm.epochs.back().test_acc);

  // deterministic re-run
  ModelBundle again = bundle.clone();
  GuardedTestSplit guarded2(split.test);
  set_warnings_enabled(false);
  RunMetrics rm2 = adapt_stage(again, sources, selected, split.train, split.val, guarded2, cfg);
  set_warnings_enabled(true);
  CHECK(same_metrics(rm, rm2));
  CHECK(bundle_hash(adapted) == bundle_hash(again));

  CHECK_THROWS_AS(adapt_stage(adapted, sources, {}, split.train, split.val, guarded, cfg),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      adapt_stage(adapted, sources, {"s99"}, split.train, split.val, guarded, cfg),
      std::invalid_argument);

  // zero adaptation weights leave only the source fusion term active
  PipelineConfig zero = cfg;
  zero.weights.unsup = zero.weights.agn = zero.weights.aw = 0.0;
  ModelBundle z = bundle.clone();
  set_warnings_enabled(false);
  RunMetrics zm = adapt_stage(z, sources, selected, split.train, split.val, guarded, zero);
  set_warnings_enabled(true);
  for (const auto& e : zm.epochs) {
    CHECK(e.loss_unsup == 0.0);
    CHECK(e.loss_agn == 0.0);
    CHECK(e.loss_aw == 0.0);
    CHECK(e.loss_s > 0.0);
  }
}

TEST_CASE("baselines") {
  auto subjects = generate_benchmark(tiny_benchmark(21, false));
  PipelineConfig cfg = tiny_config(5);
  cfg.source_epochs = 20;
  cfg.lr = 0.02;

  // in the no-shift limit the source-only fusion model is already near the
  // fine-tuned ceiling
  RunMetrics lower = run_baseline(BaselineKind::lower_fusion, subjects, "t00", cfg);
  RunMetrics upper = run_baseline(BaselineKind::upper_finetune, subjects, "t00", cfg);
  CHECK(lower.final_test_acc >= 0.85);
  CHECK(upper.final_test_acc >= lower.final_test_acc - 0.1);

  RunMetrics again = run_baseline(BaselineKind::lower_fusion, subjects, "t00", cfg);
  CHECK(again.final_test_acc == lower.final_test_acc);

  RunMetrics lv = run_baseline(BaselineKind::lower_visual, subjects, "t00", cfg);
  RunMetrics lp = run_baseline(BaselineKind::lower_physio, subjects, "t00", cfg);
  CHECK(lv.final_test_acc >= 0.5);
  CHECK(lp.final_test_acc >= 0.5);

  RunMetrics blend = run_baseline(BaselineKind::blend_mmd_uda, subjects, "t00", cfg);
  CHECK(blend.final_test_acc >= 0.5);
  CHECK(blend.epochs.back().loss_agn >= 0.0);

  CHECK_THROWS_WITH_AS(run_baseline(BaselineKind::lower_fusion, subjects, "t09", cfg),
                       doctest::Contains("t09"), std::invalid_argument);
  CHECK(baseline_from("blend_mmd_uda") == BaselineKind::blend_mmd_uda);
  CHECK_THROWS_AS(baseline_from("nope"), std::invalid_argument);
}

TEST_CASE("full method and ablations") {
  auto subjects = generate_benchmark(tiny_benchmark(31));
  PipelineConfig cfg = tiny_config(6);
  cfg.source_epochs = 6;
  cfg.adapt_epochs = 3;
  cfg.tau_pl = 0.5;

  set_warnings_enabled(false);
  std::vector<std::string> selected;
  RunMetrics full = run_full_method(subjects, "t00", cfg, nullptr, &selected);
  CHECK(!selected.empty());
  CHECK(full.final_test_acc >= 0.0);

  auto rows = ablate(AblateKind::tau_ss_sweep, {0.0, 0.55, 1.0}, subjects, cfg);
  set_warnings_enabled(true);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].setting == "tau_ss=0");
  REQUIRE(rows[0].selected_per_target.size() == 2);
  CHECK(rows[0].selected_per_target == std::vector<int>{6, 6});
  for (std::size_t i = 1; i < rows.size(); ++i) {
    for (std::size_t t = 0; t < 2; ++t)
      CHECK(rows[i].selected_per_target[t] <= rows[i - 1].selected_per_target[t]);
  }
  CHECK(rows[2].selected_avg <= 2.0);

  const fs::path csv = fs::temp_directory_path() / "msda_ablation.csv";
  write_ablation_csv(rows, csv.string());
  std::ifstream in(csv.string());
  std::string header;
  std::getline(in, header);
  CHECK(header == "setting,ss_0,ss_1,avg_ss,accuracy");
  fs::remove(csv);

  set_warnings_enabled(false);
  auto comp = ablate(AblateKind::loss_components, {1.0}, subjects, cfg);
  set_warnings_enabled(true);
  REQUIRE(comp.size() == 4);
  CHECK(comp[0].setting == "ls");
  CHECK(comp[1].setting == "ls+unsup");
  CHECK(comp[2].setting == "ls+unsup+aw");
  CHECK(comp[3].setting == "full");

  set_warnings_enabled(false);
  auto dup = ablate(AblateKind::tau_pl_sweep, {0.5, 0.5}, subjects, cfg);
  set_warnings_enabled(true);
  REQUIRE(dup.size() == 2);
  CHECK(dup[0].setting == dup[1].setting);
  CHECK(dup[0].accuracy == dup[1].accuracy);

  CHECK_THROWS_AS(ablate(AblateKind::tau_ss_sweep, {}, subjects, cfg), std::invalid_argument);
}

TEST_CASE("metrics and embedding exports") {
  auto subjects = generate_benchmark(tiny_benchmark(41));
  auto sources = std::vector<SubjectDataset>(subjects.begin(), subjects.begin() + 6);
  PipelineConfig cfg = tiny_config(8);
  cfg.source_epochs = 3;
  auto [bundle, metrics] = train_source_stage(sources, cfg);

  const fs::path mcsv = fs::temp_directory_path() / "msda_metrics.csv";
  write_metrics_csv(metrics, mcsv.string());
  std::ifstream min(mcsv.string());
  std::string line;
  std::getline(min, line);
  CHECK(line ==
        "epoch,loss_s,loss_unsup,loss_agn,loss_aw,n_confident,val_acc,test_acc,id_probe_v,"
        "id_probe_p");
  std::size_t rows = 0;
  while (std::getline(min, line)) ++rows;
  CHECK(rows == 3);
  fs::remove(mcsv);

  const fs::path ecsv = fs::temp_directory_path() / "msda_embed.csv";
  std::vector<SubjectDataset> two{sources[0], subjects[6]};
  export_embeddings(bundle, two, ecsv.string());
  std::ifstream ein(ecsv.string());
  std::getline(ein, line);
  std::stringstream hs(line);
  std::string col;
  std::vector<std::string> cols;
  while (std::getline(hs, col, ',')) cols.push_back(col);
  REQUIRE(cols.size() == 4 + 4 * cfg.embed_dim);
  CHECK(cols[0] == "subject_id");
  CHECK(cols[3] == "pseudo_label");
  CHECK(cols[4] == "h_v_0");

  const Tensor h_v = bundle.backbone_v.embed(sources[0].visual);
  std::size_t count = 0;
  bool checked_first = false;
  while (std::getline(ein, line)) {
    if (!checked_first) {
      std::stringstream ls(line);
      std::vector<std::string> fields;
      while (std::getline(ls, col, ',')) fields.push_back(col);
      REQUIRE(fields.size() == cols.size());
      CHECK(fields[0] == "s00");
      CHECK(fields[1] == "source");
      CHECK(fields[3] == "-1");
      for (std::size_t j = 0; j < cfg.embed_dim; ++j)
        CHECK(std::stod(fields[4 + j]) == doctest::Approx(h_v.at(0, j)).epsilon(1e-12));
      checked_first = true;
    }
    ++count;
  }
  CHECK(count == sources[0].size() + subjects[6].size());
  fs::remove(ecsv);
}
