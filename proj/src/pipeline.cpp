#include "msda/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "msda/discrepancy.hpp"
#include "msda/log.hpp"

namespace msda {

namespace {

using nlohmann::json;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Pooled {
  Tensor visual, physio;
  std::vector<int> labels, ids;
  std::size_t size() const { return labels.size(); }
};

Pooled pool_subjects(const std::vector<const SubjectDataset*>& subjects) {
  std::size_t n = 0;
  for (const auto* s : subjects) n += s->size();
  const std::size_t d_v = subjects.front()->visual.cols();
  const std::size_t d_p = subjects.front()->physio.cols();
  std::vector<double> v, p;
  v.reserve(n * d_v);
  p.reserve(n * d_p);
  Pooled pool;
  for (const auto* s : subjects) {
    v.insert(v.end(), s->visual.data().begin(), s->visual.data().end());
    p.insert(p.end(), s->physio.data().begin(), s->physio.data().end());
    pool.labels.insert(pool.labels.end(), s->labels.begin(), s->labels.end());
    pool.ids.insert(pool.ids.end(), s->size(), s->identity);
  }
  pool.visual = Tensor::from({n, d_v}, std::move(v));
  pool.physio = Tensor::from({n, d_p}, std::move(p));
  return pool;
}

template <class T>
std::vector<T> gather(const std::vector<T>& v, const std::vector<int>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(v[static_cast<std::size_t>(i)]);
  return out;
}

// cyclic reader over a shuffled index stream, reshuffled on wrap
class BatchStream {
 public:
  BatchStream(std::size_t n, Rng& rng) : order_(n), rng_(rng) {
    std::iota(order_.begin(), order_.end(), 0);
    rng_.shuffle(order_);
  }
  std::vector<int> next(std::size_t count) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < count && i < order_.size(); ++i) {
      if (cursor_ == order_.size()) {
        rng_.shuffle(order_);
        cursor_ = 0;
      }
      idx.push_back(order_[cursor_++]);
    }
    return idx;
  }

 private:
  std::vector<int> order_;
  std::size_t cursor_ = 0;
  Rng& rng_;
};

std::vector<int> sample_without_replacement(const std::vector<int>& pool, std::size_t count,
                                            Rng& rng) {
  std::vector<int> copy = pool;
  rng.shuffle(copy);
  if (copy.size() > count) copy.resize(count);
  return copy;
}

double probe_accuracy(const IdentityHead& head, const Backbone& backbone, const Tensor& features,
                      const std::vector<int>& ids) {
  const std::size_t cap = std::min<std::size_t>(512, features.rows());
  std::vector<int> idx(cap);
  std::iota(idx.begin(), idx.end(), 0);
  const Tensor h = backbone.embed(take_rows(features, idx));
  return identity_probe_accuracy(head, h, gather(ids, idx));
}

json tensor_to_json(const Tensor& t) {
  return json{{"shape", t.shape()}, {"data", t.data()}};
}

Tensor tensor_from_json(const json& j) {
  return Tensor::from(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>(), true);
}

json mlp_to_json(const Mlp& net) {
  return json{{"w1", tensor_to_json(net.w1)},
              {"b1", tensor_to_json(net.b1)},
              {"w2", tensor_to_json(net.w2)},
              {"b2", tensor_to_json(net.b2)}};
}

Mlp mlp_from_json(const json& j) {
  Mlp net;
  net.w1 = tensor_from_json(j.at("w1"));
  net.b1 = tensor_from_json(j.at("b1"));
  net.w2 = tensor_from_json(j.at("w2"));
  net.b2 = tensor_from_json(j.at("b2"));
  return net;
}

json estimator_to_json(const EntropyEstimator& est) {
  return json{{"embed_dim", est.cfg.embed_dim},    {"n_identities", est.cfg.n_identities},
              {"n_mixture", est.cfg.n_mixture},    {"cond_hidden", est.cfg.cond_hidden},
              {"fit_lr", est.cfg.fit_lr},          {"weight_logits", tensor_to_json(est.weight_logits)},
              {"means", tensor_to_json(est.means)}, {"log_scales", tensor_to_json(est.log_scales)},
              {"cond", mlp_to_json(est.cond)}};
}

EntropyEstimator estimator_from_json(const json& j) {
  EntropyEstimator est;
  est.cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
  est.cfg.n_identities = j.at("n_identities").get<std::size_t>();
  est.cfg.n_mixture = j.at("n_mixture").get<std::size_t>();
  est.cfg.cond_hidden = j.at("cond_hidden").get<std::size_t>();
  est.cfg.fit_lr = j.at("fit_lr").get<double>();
  est.weight_logits = tensor_from_json(j.at("weight_logits"));
  est.means = tensor_from_json(j.at("means"));
  est.log_scales = tensor_from_json(j.at("log_scales"));
  est.cond = mlp_from_json(j.at("cond"));
  return est;
}

Tensor clone_tensor(const Tensor& t) {
  return Tensor::from(t.shape(), t.data(), t.requires_grad());
}

Mlp clone_mlp(const Mlp& net) {
  Mlp out;
  out.w1 = clone_tensor(net.w1);
  out.b1 = clone_tensor(net.b1);
  out.w2 = clone_tensor(net.w2);
  out.b2 = clone_tensor(net.b2);
  return out;
}

void append(std::vector<Tensor>& into, const std::vector<Tensor>& more) {
  into.insert(into.end(), more.begin(), more.end());
}

struct SourceView {
  std::vector<const SubjectDataset*> subjects;
  Pooled pool;
};

SourceView view_of(const std::vector<const SubjectDataset*>& subjects) {
  return {subjects, pool_subjects(subjects)};
}

std::vector<const SubjectDataset*> resolve_selection(const std::vector<SubjectDataset>& sources,
                                                     const std::vector<std::string>& ids) {
  std::vector<const SubjectDataset*> out;
  for (const auto& id : ids) {
    const auto it = std::find_if(sources.begin(), sources.end(),
                                 [&](const SubjectDataset& s) { return s.subject_id == id; });
    if (it == sources.end())
      throw std::invalid_argument("adapt_stage: selected subject " + id + " not found");
    out.push_back(&*it);
  }
  return out;
}

struct TargetContext {
  TargetSplit split;
  GuardedTestSplit guarded;
};

TargetContext split_for(const SubjectDataset& target, const PipelineConfig& cfg) {
  TargetContext ctx;
  ctx.split = split_target(target, cfg.split_fractions, split_seed_for(cfg.seed, target.subject_id));
  ctx.guarded = GuardedTestSplit(ctx.split.test);
  return ctx;
}

const SubjectDataset& find_subject(const std::vector<SubjectDataset>& subjects,
                                   const std::string& id, const char* who) {
  const auto it = std::find_if(subjects.begin(), subjects.end(),
                               [&](const SubjectDataset& s) { return s.subject_id == id; });
  if (it == subjects.end())
    throw std::invalid_argument(std::string(who) + ": subject " + id + " not found");
  return *it;
}

std::vector<SubjectDataset> sources_of(const std::vector<SubjectDataset>& subjects) {
  std::vector<SubjectDataset> out;
  for (const auto& s : subjects)
    if (s.role == Role::source) out.push_back(s);
  return out;
}

std::vector<const SubjectDataset*> source_ptrs(const std::vector<SubjectDataset>& subjects) {
  std::vector<const SubjectDataset*> out;
  for (const auto& s : subjects) out.push_back(&s);
  return out;
}

}  // namespace

std::uint64_t split_seed_for(std::uint64_t seed, const std::string& subject_id) {
  return seed ^ hash_tag(subject_id.c_str());
}

void LossWeights::validate() const {
  if (unsup < 0 || agn < 0 || aw < 0 || disentangle < 0)
    throw std::invalid_argument("LossWeights: weights must be non-negative");
}

void PipelineConfig::validate() const {
  weights.validate();
  if (!(tau_ss >= 0.0 && tau_ss <= 1.0))
    throw std::invalid_argument("PipelineConfig: tau_ss must lie in [0,1]");
  if (!(tau_pl >= 0.0 && tau_pl < 1.0))
    throw std::invalid_argument("PipelineConfig: tau_pl must lie in [0,1)");
  if (source_epochs < 1 || adapt_epochs < 1)
    throw std::invalid_argument("PipelineConfig: epochs must be at least 1");
  if (batch_size < 2) throw std::invalid_argument("PipelineConfig: batch_size must be at least 2");
  if (lr <= 0.0) throw std::invalid_argument("PipelineConfig: lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0)
    throw std::invalid_argument("PipelineConfig: momentum must lie in [0,1)");
  if (weight_decay < 0.0)
    throw std::invalid_argument("PipelineConfig: weight_decay must be non-negative");
  if (eta_min < 0.0 || eta_min > lr)
    throw std::invalid_argument("PipelineConfig: eta_min must lie in [0,lr]");
  if (embed_dim == 0 || hidden_dim == 0)
    throw std::invalid_argument("PipelineConfig: model dims must be positive");
  if (n_mixture == 0 || cond_hidden == 0)
    throw std::invalid_argument("PipelineConfig: estimator dims must be positive");
  if (k_per_class == 0) throw std::invalid_argument("PipelineConfig: k_per_class must be positive");
  if (pl_refresh_n < 1)
    throw std::invalid_argument("PipelineConfig: pl_refresh_n must be at least 1");
}

ModelBundle ModelBundle::init(std::size_t d_v, std::size_t d_p, std::size_t n_classes,
                              std::size_t n_identities, const PipelineConfig& cfg, Rng& rng) {
  ModelBundle b;
  b.d_v = d_v;
  b.d_p = d_p;
  b.n_classes = n_classes;
  b.n_identities = n_identities;
  b.embed_dim = cfg.embed_dim;
  b.backbone_v = Backbone{Modality::visual, Mlp::init(d_v, cfg.hidden_dim, cfg.embed_dim, rng)};
  b.backbone_p = Backbone{Modality::physio, Mlp::init(d_p, cfg.hidden_dim, cfg.embed_dim, rng)};
  b.head_v = ExpressionHead{Mlp::init(cfg.embed_dim, cfg.hidden_dim, n_classes, rng)};
  b.head_p = ExpressionHead{Mlp::init(cfg.embed_dim, cfg.hidden_dim, n_classes, rng)};
  b.id_head_v = IdentityHead{Mlp::init(cfg.embed_dim, cfg.hidden_dim, n_identities, rng)};
  b.id_head_p = IdentityHead{Mlp::init(cfg.embed_dim, cfg.hidden_dim, n_identities, rng)};
  const EntropyEstimatorConfig est{cfg.embed_dim, n_identities, cfg.n_mixture, cfg.cond_hidden,
                                   0.01};
  b.est_v = EntropyEstimator::init(est, rng);
  b.est_p = EntropyEstimator::init(est, rng);
  b.fusion = FusionHead{Mlp::init(2 * cfg.embed_dim, cfg.hidden_dim, n_classes, rng)};
  return b;
}

ModelBundle ModelBundle::clone() const {
  ModelBundle b = *this;
  b.backbone_v.net = clone_mlp(backbone_v.net);
  b.backbone_p.net = clone_mlp(backbone_p.net);
  b.head_v.net = clone_mlp(head_v.net);
  b.head_p.net = clone_mlp(head_p.net);
  b.id_head_v.net = clone_mlp(id_head_v.net);
  b.id_head_p.net = clone_mlp(id_head_p.net);
  b.est_v.weight_logits = clone_tensor(est_v.weight_logits);
  b.est_v.means = clone_tensor(est_v.means);
  b.est_v.log_scales = clone_tensor(est_v.log_scales);
  b.est_v.cond = clone_mlp(est_v.cond);
  b.est_p.weight_logits = clone_tensor(est_p.weight_logits);
  b.est_p.means = clone_tensor(est_p.means);
  b.est_p.log_scales = clone_tensor(est_p.log_scales);
  b.est_p.cond = clone_mlp(est_p.cond);
  b.fusion.net = clone_mlp(fusion.net);
  return b;
}

std::vector<Tensor> ModelBundle::model_params() const {
  std::vector<Tensor> p;
  append(p, backbone_v.params());
  append(p, backbone_p.params());
  append(p, head_v.params());
  append(p, head_p.params());
  append(p, fusion.params());
  return p;
}

void save_bundle(const ModelBundle& bundle, const std::string& path) {
  json j;
  j["d_v"] = bundle.d_v;
  j["d_p"] = bundle.d_p;
  j["n_classes"] = bundle.n_classes;
  j["n_identities"] = bundle.n_identities;
  j["embed_dim"] = bundle.embed_dim;
  j["backbone_v"] = mlp_to_json(bundle.backbone_v.net);
  j["backbone_p"] = mlp_to_json(bundle.backbone_p.net);
  j["head_v"] = mlp_to_json(bundle.head_v.net);
  j["head_p"] = mlp_to_json(bundle.head_p.net);
  j["id_head_v"] = mlp_to_json(bundle.id_head_v.net);
  j["id_head_p"] = mlp_to_json(bundle.id_head_p.net);
  j["est_v"] = estimator_to_json(bundle.est_v);
  j["est_p"] = estimator_to_json(bundle.est_p);
  j["fusion"] = mlp_to_json(bundle.fusion.net);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_bundle: cannot open " + path);
  out << j.dump(1) << '\n';
}

ModelBundle load_bundle(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_bundle: checkpoint not found: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("load_bundle: " + path + ": " + e.what());
  }
  ModelBundle b;
  try {
    b.d_v = j.at("d_v").get<std::size_t>();
    b.d_p = j.at("d_p").get<std::size_t>();
    b.n_classes = j.at("n_classes").get<std::size_t>();
    b.n_identities = j.at("n_identities").get<std::size_t>();
    b.embed_dim = j.at("embed_dim").get<std::size_t>();
    b.backbone_v = Backbone{Modality::visual, mlp_from_json(j.at("backbone_v"))};
    b.backbone_p = Backbone{Modality::physio, mlp_from_json(j.at("backbone_p"))};
    b.head_v = ExpressionHead{mlp_from_json(j.at("head_v"))};
    b.head_p = ExpressionHead{mlp_from_json(j.at("head_p"))};
    b.id_head_v = IdentityHead{mlp_from_json(j.at("id_head_v"))};
    b.id_head_p = IdentityHead{mlp_from_json(j.at("id_head_p"))};
    b.est_v = estimator_from_json(j.at("est_v"));
    b.est_p = estimator_from_json(j.at("est_p"));
    b.fusion = FusionHead{mlp_from_json(j.at("fusion"))};
  } catch (const json::exception& e) {
    throw std::runtime_error("load_bundle: " + path + ": " + e.what());
  }
  return b;
}

void write_metrics_csv(const RunMetrics& metrics, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + path);
  out << "epoch,loss_s,loss_unsup,loss_agn,loss_aw,n_confident,val_acc,test_acc,"
         "id_probe_v,id_probe_p\n";
  for (const auto& e : metrics.epochs) {
    out << e.epoch << ',' << fmt(e.loss_s) << ',' << fmt(e.loss_unsup) << ',' << fmt(e.loss_agn)
        << ',' << fmt(e.loss_aw) << ',' << e.n_confident << ',' << fmt(e.val_acc) << ','
        << fmt(e.test_acc) << ',' << fmt(e.id_probe_v) << ',' << fmt(e.id_probe_p) << '\n';
  }
}

std::pair<ModelBundle, RunMetrics> train_source_stage(const std::vector<SubjectDataset>& sources,
                                                      const PipelineConfig& cfg) {
  cfg.validate();
  if (sources.empty()) throw std::invalid_argument("train_source_stage: no source subjects");
  const std::size_t d_v = sources.front().visual.cols();
  const std::size_t d_p = sources.front().physio.cols();
  int max_label = 0, max_identity = 0;
  for (const auto& s : sources) {
    for (int y : s.labels) max_label = std::max(max_label, y);
    max_identity = std::max(max_identity, s.identity);
  }
  const std::size_t n_classes = static_cast<std::size_t>(max_label) + 1;
  const std::size_t n_identities = static_cast<std::size_t>(max_identity) + 1;

  Rng root(cfg.seed);
  Rng init_rng = root.fork(hash_tag("model_init"));
  ModelBundle bundle = ModelBundle::init(d_v, d_p, n_classes, n_identities, cfg, init_rng);

  const Pooled pool = pool_subjects(source_ptrs(sources));
  std::vector<Tensor> params = bundle.model_params();
  append(params, bundle.id_head_v.params());
  append(params, bundle.id_head_p.params());
  Sgd opt(params, {cfg.lr, cfg.momentum, cfg.weight_decay, cfg.eta_min, cfg.source_epochs});

  Rng order_rng = root.fork(hash_tag("batch_order"));
  const bool use_disc = cfg.weights.disentangle > 0.0;
  bool seeded = false;
  RunMetrics metrics;

  for (int epoch = 0; epoch < cfg.source_epochs; ++epoch) {
    opt.set_epoch(epoch);
    std::vector<int> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order);

    double sum_v = 0, sum_p = 0, sum_f = 0;
    std::size_t iters = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const std::vector<int> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                 order.begin() + static_cast<std::ptrdiff_t>(stop));
      const std::vector<int> yb = gather(pool.labels, idx);
      const std::vector<int> idb = gather(pool.ids, idx);
      const Tensor h_v = bundle.backbone_v.embed(take_rows(pool.visual, idx));
      const Tensor h_p = bundle.backbone_p.embed(take_rows(pool.physio, idx));

      const Tensor loss_v = cross_entropy(bundle.head_v.classify(h_v), yb);
      const Tensor loss_p = cross_entropy(bundle.head_p.classify(h_p), yb);
      Tensor total = loss_v + loss_p;
      if (use_disc) {
        if (!seeded) {
          bundle.est_v.seed_means(h_v);
          bundle.est_p.seed_means(h_p);
          seeded = true;
        }
        total = total + cfg.weights.disentangle *
                            (disentangle_loss(bundle.est_v, h_v, idb, cfg.mi_variant) +
                             disentangle_loss(bundle.est_p, h_p, idb, cfg.mi_variant));
      }
      if (cfg.identity_aux_loss) {
        total = total + cross_entropy(bundle.id_head_v.classify(h_v.detach()), idb) +
                cross_entropy(bundle.id_head_p.classify(h_p.detach()), idb);
      }
      const Tensor loss_f =
          cross_entropy(bundle.fusion.classify(fuse(h_v.detach(), h_p.detach())), yb);
      total = total + loss_f;

      backward(total);
      opt.step();
      if (use_disc) {
        estimator_fit_step(bundle.est_v, h_v, idb);
        estimator_fit_step(bundle.est_p, h_p, idb);
      }
      sum_v += loss_v.value();
      sum_p += loss_p.value();
      sum_f += loss_f.value();
      ++iters;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.loss_v = sum_v / static_cast<double>(iters);
    em.loss_p = sum_p / static_cast<double>(iters);
    em.loss_s = sum_f / static_cast<double>(iters);
    em.id_probe_v = probe_accuracy(bundle.id_head_v, bundle.backbone_v, pool.visual, pool.ids);
    em.id_probe_p = probe_accuracy(bundle.id_head_p, bundle.backbone_p, pool.physio, pool.ids);
    metrics.epochs.push_back(em);
  }
  return {std::move(bundle), std::move(metrics)};
}

Tensor fusion_logits(const ModelBundle& bundle, const Tensor& visual, const Tensor& physio) {
  return bundle.fusion.classify(
      fuse(bundle.backbone_v.embed(visual), bundle.backbone_p.embed(physio)));
}

double evaluate(const ModelBundle& bundle, const SubjectDataset& target_test) {
  if (target_test.size() == 0) throw std::invalid_argument("evaluate: empty test split");
  return accuracy(fusion_logits(bundle, target_test.visual, target_test.physio),
                  target_test.labels);
}

double evaluate(const ModelBundle& bundle, const GuardedTestSplit& target_test) {
  return evaluate(bundle, target_test.access());
}

RunMetrics adapt_stage(ModelBundle& bundle, const std::vector<SubjectDataset>& sources,
                       const std::vector<std::string>& selected_ids,
                       const SubjectDataset& target_train, const SubjectDataset& target_val,
                       const GuardedTestSplit& target_test, const PipelineConfig& cfg) {
  cfg.validate();
  if (selected_ids.empty()) throw std::invalid_argument("adapt_stage: empty source selection");
  if (target_train.size() == 0)
    throw std::invalid_argument("adapt_stage: empty target train split");
  const auto selected = resolve_selection(sources, selected_ids);
  const SourceView view = view_of(selected);

  Rng root(cfg.seed);
  Rng order_rng = root.fork(hash_tag("adapt_order"));
  Rng sample_rng = root.fork(hash_tag("adapt_sample"));
  // adaptation trains backbones and the fusion head; the per-modality heads
  // that issue pseudo-labels stay frozen
  std::vector<Tensor> params;
  append(params, bundle.backbone_v.params());
  append(params, bundle.backbone_p.params());
  append(params, bundle.fusion.params());
  Sgd opt(params, {cfg.lr, cfg.momentum, cfg.weight_decay, cfg.eta_min, cfg.adapt_epochs});
  const DiscOptions disc{nullptr, cfg.mmd_sqrt};
  const std::size_t iters =
      (target_train.size() + cfg.batch_size - 1) / cfg.batch_size;

  PseudoLabelPartition part;
  std::vector<int> pl_of(target_train.size(), -1);  // row -> pseudo-label, -1 non-confident
  std::unique_ptr<ClassAwareSampler> sampler;
  RunMetrics metrics;

  for (int epoch = 0; epoch < cfg.adapt_epochs; ++epoch) {
    opt.set_epoch(epoch);
    if (epoch % cfg.pl_refresh_n == 0) {
      part = generate_pseudo_labels(bundle.backbone_v, bundle.backbone_p, bundle.head_v,
                                    bundle.head_p, target_train.visual, target_train.physio,
                                    cfg.tau_pl);
      sampler = std::make_unique<ClassAwareSampler>(selected, part, cfg.k_per_class);
      std::fill(pl_of.begin(), pl_of.end(), -1);
      for (const auto& e : part.confident) pl_of[e.index] = e.label;
    }
    sampler->start_epoch(order_rng);
    if (part.confident.empty())
      log_warn("adaptation epoch " + std::to_string(epoch) +
               ": no confident pseudo-labels, unsupervised and class-aware terms skipped");

    const std::vector<int> classes(part.confident_classes.begin(),
                                   part.confident_classes.end());
    BatchStream src_stream(view.pool.size(), order_rng);
    BatchStream tgt_stream(target_train.size(), order_rng);

    // per-subject rows outside the confident class set, for the agnostic term
    std::vector<std::vector<int>> outside(selected.size());
    for (std::size_t a = 0; a < selected.size(); ++a)
      for (std::size_t i = 0; i < selected[a]->size(); ++i)
        if (!part.confident_classes.count(selected[a]->labels[i]))
          outside[a].push_back(static_cast<int>(i));
    const bool any_outside =
        std::any_of(outside.begin(), outside.end(), [](const auto& v) { return !v.empty(); });

    double sum_s = 0, sum_u = 0, sum_agn = 0, sum_aw = 0;
    for (std::size_t iter = 0; iter < iters; ++iter) {
      const std::vector<int> sidx = src_stream.next(cfg.batch_size);
      const Tensor hs_v = bundle.backbone_v.embed(take_rows(view.pool.visual, sidx));
      const Tensor hs_p = bundle.backbone_p.embed(take_rows(view.pool.physio, sidx));
      const Tensor loss_s = cross_entropy(
          bundle.fusion.classify(fuse(hs_v, hs_p)),
          gather(view.pool.labels, sidx));
      Tensor total = loss_s;
      sum_s += loss_s.value();

      if (!part.confident.empty() && cfg.weights.unsup > 0.0) {
        // batch estimate of the mean over confident samples: draw a plain
        // target batch and keep its confident rows, so a small confident set
        // contributes proportionally instead of being recycled to batch size
        const std::vector<int> tidx = tgt_stream.next(cfg.batch_size);
        std::vector<int> rows;
        std::vector<int> pl;
        for (int t : tidx)
          if (pl_of[static_cast<std::size_t>(t)] >= 0) {
            rows.push_back(t);
            pl.push_back(pl_of[static_cast<std::size_t>(t)]);
          }
        if (!rows.empty()) {
          const Tensor ht_v = bundle.backbone_v.embed(take_rows(target_train.visual, rows));
          const Tensor ht_p = bundle.backbone_p.embed(take_rows(target_train.physio, rows));
          // pseudo-label CE refines the fusion head only; detaching keeps label
          // noise out of the shared backbones
          const Tensor loss_u = cross_entropy(
              bundle.fusion.classify(fuse(ht_v.detach(), ht_p.detach())), pl);
          total = total + cfg.weights.unsup * loss_u;
          sum_u += loss_u.value();
        }
      }

      if (cfg.weights.aw > 0.0 && classes.size() >= 2) {
        const BatchPlan plan = sampler->next_batch();
        std::vector<std::vector<Tensor>> src_v(selected.size()), src_p(selected.size());
        for (auto& v : src_v) v.resize(classes.size());
        for (auto& v : src_p) v.resize(classes.size());
        std::vector<Tensor> tgt_v(classes.size()), tgt_p(classes.size());
        bool any_pair = false;
        for (const auto& draw : plan) {
          const std::size_t ci = static_cast<std::size_t>(
              std::find(classes.begin(), classes.end(), draw.label) - classes.begin());
          if (!draw.target_rows.empty()) {
            std::vector<int> rows(draw.target_rows.begin(), draw.target_rows.end());
            tgt_v[ci] = bundle.backbone_v.embed(take_rows(target_train.visual, rows));
            tgt_p[ci] = bundle.backbone_p.embed(take_rows(target_train.physio, rows));
          }
          for (std::size_t a = 0; a < draw.source_rows.size(); ++a) {
            const auto& picked = draw.source_rows[a].second;
            if (picked.empty()) continue;
            std::vector<int> rows(picked.begin(), picked.end());
            src_v[a][ci] = bundle.backbone_v.embed(take_rows(selected[a]->visual, rows));
            src_p[a][ci] = bundle.backbone_p.embed(take_rows(selected[a]->physio, rows));
            if (!draw.target_rows.empty()) any_pair = true;
          }
        }
        if (any_pair) {
          const Tensor aw =
              class_aware_loss({intra_class_disc(src_v, tgt_v, disc),
                                intra_class_disc(src_p, tgt_p, disc)},
                               {inter_class_disc(src_v, tgt_v, disc),
                                inter_class_disc(src_p, tgt_p, disc)});
          total = total + cfg.weights.aw * aw;
          sum_aw += aw.value();
        }
      }

      if (cfg.weights.agn > 0.0 && any_outside && !part.non_confident.empty()) {
        std::vector<Tensor> out_v, out_p;
        for (std::size_t a = 0; a < selected.size(); ++a) {
          if (outside[a].empty()) {
            out_v.emplace_back();
            out_p.emplace_back();
            continue;
          }
          const auto rows = sample_without_replacement(outside[a], cfg.k_per_class, sample_rng);
          out_v.push_back(bundle.backbone_v.embed(take_rows(selected[a]->visual, rows)));
          out_p.push_back(bundle.backbone_p.embed(take_rows(selected[a]->physio, rows)));
        }
        std::vector<int> upool(part.non_confident.begin(), part.non_confident.end());
        const auto urows = sample_without_replacement(upool, cfg.batch_size, sample_rng);
        const Tensor hu_v = bundle.backbone_v.embed(take_rows(target_train.visual, urows));
        const Tensor hu_p = bundle.backbone_p.embed(take_rows(target_train.physio, urows));
        const Tensor agn = class_agnostic_loss(
            {agnostic_disc(out_v, hu_v, disc), agnostic_disc(out_p, hu_p, disc)});
        total = total + cfg.weights.agn * agn;
        sum_agn += agn.value();
      }

      backward(total);
      opt.step();
    }

    EpochMetrics em;
    em.epoch = epoch;
    const double n = static_cast<double>(iters);
    em.loss_s = sum_s / n;
    em.loss_unsup = sum_u / n;
    em.loss_agn = sum_agn / n;
    em.loss_aw = sum_aw / n;
    em.n_confident = part.confident.size();
    em.n_unconfident = part.non_confident.size();
    em.n_confident_classes = part.confident_classes.size();
    for (const auto& c : part.confident)
      em.min_confidence = std::min(em.min_confidence, c.confidence);
    if (!part.confident.empty()) {
      std::size_t hit = 0;
      for (const auto& c : part.confident)
        if (c.label == target_train.labels[c.index]) ++hit;
      em.pl_precision = static_cast<double>(hit) / static_cast<double>(part.confident.size());
    }
    if (target_val.size() > 0)
      em.val_acc = accuracy(fusion_logits(bundle, target_val.visual, target_val.physio),
                            target_val.labels);
    em.test_acc = evaluate(bundle, target_test);
    em.id_probe_v =
        probe_accuracy(bundle.id_head_v, bundle.backbone_v, view.pool.visual, view.pool.ids);
    em.id_probe_p =
        probe_accuracy(bundle.id_head_p, bundle.backbone_p, view.pool.physio, view.pool.ids);
    metrics.epochs.push_back(em);
  }
  metrics.final_test_acc = metrics.epochs.back().test_acc;
  return metrics;
}

const char* baseline_name(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::lower_visual: return "lower_visual";
    case BaselineKind::lower_physio: return "lower_physio";
    case BaselineKind::lower_fusion: return "lower_fusion";
    case BaselineKind::blend_mmd_uda: return "blend_mmd_uda";
    case BaselineKind::upper_finetune: return "upper_finetune";
  }
  return "unknown";
}

BaselineKind baseline_from(const std::string& name) {
  for (BaselineKind k : {BaselineKind::lower_visual, BaselineKind::lower_physio,
                         BaselineKind::lower_fusion, BaselineKind::blend_mmd_uda,
                         BaselineKind::upper_finetune})
    if (name == baseline_name(k)) return k;
  throw std::invalid_argument("unknown baseline: " + name);
}

double evaluate_lower(const ModelBundle& bundle, BaselineKind kind, const SubjectDataset& test) {
  if (test.size() == 0) throw std::invalid_argument("evaluate_lower: empty test split");
  switch (kind) {
    case BaselineKind::lower_visual:
      return accuracy(bundle.head_v.classify(bundle.backbone_v.embed(test.visual)), test.labels);
    case BaselineKind::lower_physio:
      return accuracy(bundle.head_p.classify(bundle.backbone_p.embed(test.physio)), test.labels);
    case BaselineKind::lower_fusion:
      return evaluate(bundle, test);
    default:
      throw std::invalid_argument("evaluate_lower: not a lower-bound baseline");
  }
}

RunMetrics blend_adapt(ModelBundle& bundle, const std::vector<SubjectDataset>& sources,
                       const SubjectDataset& target_train, const SubjectDataset& target_val,
                       const GuardedTestSplit& target_test, const PipelineConfig& cfg) {
  cfg.validate();
  if (sources.empty()) throw std::invalid_argument("blend_adapt: no source subjects");
  if (target_train.size() == 0) throw std::invalid_argument("blend_adapt: empty target train");
  const SourceView view = view_of(source_ptrs(sources));

  Rng root(cfg.seed);
  Rng order_rng = root.fork(hash_tag("blend_order"));
  std::vector<Tensor> params;
  append(params, bundle.backbone_v.params());
  append(params, bundle.backbone_p.params());
  append(params, bundle.fusion.params());
  Sgd opt(params, {cfg.lr, cfg.momentum, cfg.weight_decay, cfg.eta_min, cfg.adapt_epochs});
  const std::size_t iters = (target_train.size() + cfg.batch_size - 1) / cfg.batch_size;

  RunMetrics metrics;
  for (int epoch = 0; epoch < cfg.adapt_epochs; ++epoch) {
    opt.set_epoch(epoch);
    BatchStream src_stream(view.pool.size(), order_rng);
    BatchStream tgt_stream(target_train.size(), order_rng);
    double sum_s = 0, sum_mmd = 0;
    for (std::size_t iter = 0; iter < iters; ++iter) {
      const auto sidx = src_stream.next(cfg.batch_size);
      const auto tidx = tgt_stream.next(cfg.batch_size);
      const Tensor hs_v = bundle.backbone_v.embed(take_rows(view.pool.visual, sidx));
      const Tensor hs_p = bundle.backbone_p.embed(take_rows(view.pool.physio, sidx));
      const Tensor ht_v = bundle.backbone_v.embed(take_rows(target_train.visual, tidx));
      const Tensor ht_p = bundle.backbone_p.embed(take_rows(target_train.physio, tidx));
      const Tensor loss_s = cross_entropy(
          bundle.fusion.classify(fuse(hs_v, hs_p)),
          gather(view.pool.labels, sidx));
      const Tensor lmmd = mmd2(hs_v, ht_v) + mmd2(hs_p, ht_p);
      backward(loss_s + lmmd);
      opt.step();
      sum_s += loss_s.value();
      sum_mmd += lmmd.value();
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.loss_s = sum_s / static_cast<double>(iters);
    em.loss_agn = sum_mmd / static_cast<double>(iters);  // global alignment term
    if (target_val.size() > 0)
      em.val_acc = accuracy(fusion_logits(bundle, target_val.visual, target_val.physio),
                            target_val.labels);
    em.test_acc = evaluate(bundle, target_test);
    metrics.epochs.push_back(em);
  }
  metrics.final_test_acc = metrics.epochs.back().test_acc;
  return metrics;
}

RunMetrics finetune_upper(ModelBundle& bundle, const SubjectDataset& target_train,
                          const SubjectDataset& target_val, const GuardedTestSplit& target_test,
                          const PipelineConfig& cfg) {
  cfg.validate();
  if (target_train.size() == 0) throw std::invalid_argument("finetune_upper: empty target train");
  Rng root(cfg.seed);
  Rng order_rng = root.fork(hash_tag("upper_order"));
  Sgd opt(bundle.model_params(),
          {cfg.lr, cfg.momentum, cfg.weight_decay, cfg.eta_min, cfg.adapt_epochs});

  RunMetrics metrics;
  for (int epoch = 0; epoch < cfg.adapt_epochs; ++epoch) {
    opt.set_epoch(epoch);
    std::vector<int> order(target_train.size());
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order);
    double sum = 0;
    std::size_t iters = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const std::vector<int> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                 order.begin() + static_cast<std::ptrdiff_t>(stop));
      const std::vector<int> yb = gather(target_train.labels, idx);
      const Tensor h_v = bundle.backbone_v.embed(take_rows(target_train.visual, idx));
      const Tensor h_p = bundle.backbone_p.embed(take_rows(target_train.physio, idx));
      const Tensor loss = cross_entropy(bundle.head_v.classify(h_v), yb) +
                          cross_entropy(bundle.head_p.classify(h_p), yb) +
                          cross_entropy(bundle.fusion.classify(fuse(h_v, h_p)), yb);
      backward(loss);
      opt.step();
      sum += loss.value();
      ++iters;
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.loss_s = sum / static_cast<double>(iters);
    if (target_val.size() > 0)
      em.val_acc = accuracy(fusion_logits(bundle, target_val.visual, target_val.physio),
                            target_val.labels);
    em.test_acc = evaluate(bundle, target_test);
    metrics.epochs.push_back(em);
  }
  metrics.final_test_acc = metrics.epochs.back().test_acc;
  return metrics;
}

RunMetrics run_baseline(BaselineKind kind, const std::vector<SubjectDataset>& subjects,
                        const std::string& target_id, const PipelineConfig& cfg) {
  const std::vector<SubjectDataset> sources = sources_of(subjects);
  const SubjectDataset& target = find_subject(subjects, target_id, "run_baseline");
  TargetContext ctx = split_for(target, cfg);

  auto [bundle, source_metrics] = train_source_stage(sources, cfg);
  switch (kind) {
    case BaselineKind::lower_visual:
    case BaselineKind::lower_physio:
    case BaselineKind::lower_fusion: {
      RunMetrics m = std::move(source_metrics);
      m.final_test_acc = evaluate_lower(bundle, kind, ctx.guarded.access());
      return m;
    }
    case BaselineKind::blend_mmd_uda:
      return blend_adapt(bundle, sources, ctx.split.train, ctx.split.val, ctx.guarded, cfg);
    case BaselineKind::upper_finetune:
      return finetune_upper(bundle, ctx.split.train, ctx.split.val, ctx.guarded, cfg);
  }
  throw std::invalid_argument("run_baseline: unknown kind");
}

RunMetrics run_full_method(const std::vector<SubjectDataset>& subjects,
                           const std::string& target_id, const PipelineConfig& cfg,
                           ModelBundle* out_bundle, std::vector<std::string>* out_selected) {
  const std::vector<SubjectDataset> sources = sources_of(subjects);
  const SubjectDataset& target = find_subject(subjects, target_id, "run_full_method");
  TargetContext ctx = split_for(target, cfg);

  auto [bundle, source_metrics] = train_source_stage(sources, cfg);
  const SimilarityTable table =
      build_similarity_table(sources, ctx.split.train, bundle.backbone_v, bundle.backbone_p);
  const std::vector<std::string> selected = select_sources(table, cfg.tau_ss);
  RunMetrics metrics =
      adapt_stage(bundle, sources, selected, ctx.split.train, ctx.split.val, ctx.guarded, cfg);
  if (out_bundle) *out_bundle = std::move(bundle);
  if (out_selected) *out_selected = selected;
  return metrics;
}

AblateKind ablate_from(const std::string& name) {
  if (name == "tau_ss_sweep") return AblateKind::tau_ss_sweep;
  if (name == "tau_pl_sweep") return AblateKind::tau_pl_sweep;
  if (name == "loss_weights") return AblateKind::loss_weights;
  if (name == "loss_components") return AblateKind::loss_components;
  throw std::invalid_argument("unknown ablation: " + name);
}

namespace {

std::vector<std::string> target_ids_of(const std::vector<SubjectDataset>& subjects) {
  std::vector<std::string> ids;
  for (const auto& s : subjects)
    if (s.role == Role::target) ids.push_back(s.subject_id);
  if (ids.empty()) throw std::invalid_argument("ablate: no target subjects in dataset");
  return ids;
}

std::string setting_label(const char* key, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s=%g", key, v);
  return buf;
}

AblationRow run_over_targets(const std::vector<SubjectDataset>& subjects,
                             const PipelineConfig& cfg, const std::string& label,
                             bool record_selected) {
  AblationRow row;
  row.setting = label;
  const auto targets = target_ids_of(subjects);
  double acc = 0.0;
  int sel_total = 0;
  for (const auto& id : targets) {
    std::vector<std::string> selected;
    acc += run_full_method(subjects, id, cfg, nullptr, &selected).final_test_acc;
    if (record_selected) {
      row.selected_per_target.push_back(static_cast<int>(selected.size()));
      sel_total += static_cast<int>(selected.size());
    }
  }
  row.accuracy = acc / static_cast<double>(targets.size());
  if (record_selected)
    row.selected_avg = static_cast<double>(sel_total) / static_cast<double>(targets.size());
  return row;
}

}  // namespace

std::vector<AblationRow> ablate(AblateKind kind, const std::vector<double>& grid,
                                const std::vector<SubjectDataset>& subjects,
                                const PipelineConfig& cfg) {
  if (grid.empty()) throw std::invalid_argument("ablate: empty grid");
  std::vector<AblationRow> rows;
  switch (kind) {
    case AblateKind::tau_ss_sweep:
      for (double tau : grid) {
        PipelineConfig c = cfg;
        c.tau_ss = tau;
        rows.push_back(run_over_targets(subjects, c, setting_label("tau_ss", tau), true));
      }
      break;
    case AblateKind::tau_pl_sweep:
      for (double tau : grid) {
        PipelineConfig c = cfg;
        c.tau_pl = tau;
        rows.push_back(run_over_targets(subjects, c, setting_label("tau_pl", tau), false));
      }
      break;
    case AblateKind::loss_weights:
      for (const char* key : {"unsup", "aw", "agn"}) {
        for (double v : grid) {
          PipelineConfig c = cfg;
          if (std::string(key) == "unsup") c.weights.unsup = v;
          if (std::string(key) == "aw") c.weights.aw = v;
          if (std::string(key) == "agn") c.weights.agn = v;
          rows.push_back(run_over_targets(subjects, c, setting_label(key, v), false));
        }
      }
      break;
    case AblateKind::loss_components: {
      // incremental schema: supervised fusion only, then +unsup, +aw, +agn
      const std::array<std::pair<const char*, LossWeights>, 4> steps{{
          {"ls", {0.0, 0.0, 0.0, cfg.weights.disentangle}},
          {"ls+unsup", {cfg.weights.unsup, 0.0, 0.0, cfg.weights.disentangle}},
          {"ls+unsup+aw", {cfg.weights.unsup, 0.0, cfg.weights.aw, cfg.weights.disentangle}},
          {"full", cfg.weights},
      }};
      for (const auto& [label, w] : steps) {
        PipelineConfig c = cfg;
        c.weights = w;
        rows.push_back(run_over_targets(subjects, c, label, false));
      }
      break;
    }
  }
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_ablation_csv: cannot open " + path);
  const bool with_selected =
      std::any_of(rows.begin(), rows.end(), [](const auto& r) { return r.selected_avg >= 0; });
  out << "setting";
  if (with_selected) {
    for (std::size_t i = 0; i < rows.front().selected_per_target.size(); ++i) out << ",ss_" << i;
    out << ",avg_ss";
  }
  out << ",accuracy\n";
  for (const auto& r : rows) {
    out << r.setting;
    if (with_selected) {
      for (int c : r.selected_per_target) out << ',' << c;
      out << ',' << fmt(r.selected_avg);
    }
    out << ',' << fmt(r.accuracy) << '\n';
  }
}

void export_embeddings(const ModelBundle& bundle, const std::vector<SubjectDataset>& subjects,
                       const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("export_embeddings: cannot open " + path);
  const std::size_t e = bundle.embed_dim;
  out << "subject_id,role,label,pseudo_label";
  for (std::size_t j = 0; j < e; ++j) out << ",h_v_" << j;
  for (std::size_t j = 0; j < e; ++j) out << ",h_p_" << j;
  for (std::size_t j = 0; j < 2 * e; ++j) out << ",f_" << j;
  out << '\n';

  for (const auto& s : subjects) {
    const Tensor h_v = bundle.backbone_v.embed(s.visual);
    const Tensor h_p = bundle.backbone_p.embed(s.physio);
    std::vector<int> pseudo(s.size(), -1);
    if (s.role == Role::target) {
      const auto part = generate_pseudo_labels(bundle.backbone_v, bundle.backbone_p,
                                               bundle.head_v, bundle.head_p, s.visual, s.physio,
                                               0.95);
      for (const auto& c : part.confident) pseudo[c.index] = c.label;
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      out << s.subject_id << ',' << role_name(s.role) << ',' << s.labels[i] << ',' << pseudo[i];
      for (std::size_t j = 0; j < e; ++j) out << ',' << fmt(h_v.at(i, j));
      for (std::size_t j = 0; j < e; ++j) out << ',' << fmt(h_p.at(i, j));
      for (std::size_t j = 0; j < e; ++j) out << ',' << fmt(h_v.at(i, j));
      for (std::size_t j = 0; j < e; ++j) out << ',' << fmt(h_p.at(i, j));
      out << '\n';
    }
  }
}

}  // namespace msda
