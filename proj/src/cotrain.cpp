#include "msda/cotrain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "msda/log.hpp"

namespace msda {

namespace {

const Tensor& modality_features(const Backbone& backbone, const SubjectDataset& subject) {
  return backbone.modality == Modality::visual ? subject.visual : subject.physio;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::vector<double> subject_mean_embedding(const Backbone& backbone,
                                           const SubjectDataset& subject) {
  const Tensor& x = modality_features(backbone, subject);
  if (x.rows() == 0)
    throw std::invalid_argument("subject_mean_embedding: subject " + subject.subject_id +
                                " has no " + modality_name(backbone.modality) + " samples");
  const Tensor h = backbone.embed(x);
  std::vector<double> mean(h.cols(), 0.0);
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (std::size_t j = 0; j < h.cols(); ++j) mean[j] += h.at(i, j);
  for (auto& v : mean) v /= static_cast<double>(h.rows());
  return mean;
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("cosine_similarity: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw std::domain_error("cosine_similarity: zero vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> min_max_normalize(const std::vector<double>& raw) {
  const auto [lo_it, hi_it] = std::minmax_element(raw.begin(), raw.end());
  const double lo = *lo_it, hi = *hi_it;
  if (lo == hi) {
    log_warn("min-max normalization degenerate: all raw scores equal, mapping every score to 1");
    return std::vector<double>(raw.size(), 1.0);
  }
  std::vector<double> norm(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) norm[i] = (raw[i] - lo) / (hi - lo);
  return norm;
}

SimilarityTable build_similarity_table(const std::vector<SubjectDataset>& sources,
                                       const SubjectDataset& target_train,
                                       const Backbone& visual_backbone,
                                       const Backbone& physio_backbone) {
  if (sources.size() < 2)
    throw std::invalid_argument("build_similarity_table: need at least 2 sources");
  const auto tv = subject_mean_embedding(visual_backbone, target_train);
  const auto tp = subject_mean_embedding(physio_backbone, target_train);

  SimilarityTable table;
  for (const auto& s : sources) {
    table.source_ids.push_back(s.subject_id);
    table.raw_visual.push_back(cosine_similarity(subject_mean_embedding(visual_backbone, s), tv));
    table.raw_physio.push_back(cosine_similarity(subject_mean_embedding(physio_backbone, s), tp));
  }
  table.norm_visual = min_max_normalize(table.raw_visual);
  table.norm_physio = min_max_normalize(table.raw_physio);
  table.merged.resize(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i)
    table.merged[i] = std::max(table.norm_visual[i], table.norm_physio[i]);
  return table;
}

std::vector<std::string> select_sources(const SimilarityTable& table, double tau_ss) {
  if (!(tau_ss >= 0.0 && tau_ss <= 1.0))
    throw std::invalid_argument("select_sources: tau_ss must lie in [0,1]");
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < table.source_ids.size(); ++i)
    if (table.merged[i] >= tau_ss) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (table.merged[a] != table.merged[b]) return table.merged[a] > table.merged[b];
    return table.source_ids[a] < table.source_ids[b];
  });
  std::vector<std::string> ids;
  for (std::size_t i : order) ids.push_back(table.source_ids[i]);
  return ids;
}

void write_selection_report(const SimilarityTable& table,
                            const std::vector<std::string>& selected, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_selection_report: cannot open " + path);
  out << "subject_id,raw_v,norm_v,raw_p,norm_p,merged,selected\n";
  for (std::size_t i = 0; i < table.source_ids.size(); ++i) {
    const bool sel =
        std::find(selected.begin(), selected.end(), table.source_ids[i]) != selected.end();
    out << table.source_ids[i] << ',' << fmt(table.raw_visual[i]) << ','
        << fmt(table.norm_visual[i]) << ',' << fmt(table.raw_physio[i]) << ','
        << fmt(table.norm_physio[i]) << ',' << fmt(table.merged[i]) << ',' << (sel ? 1 : 0)
        << '\n';
  }
}

PseudoLabelPartition generate_pseudo_labels(const Backbone& visual_backbone,
                                            const Backbone& physio_backbone,
                                            const ExpressionHead& visual_head,
                                            const ExpressionHead& physio_head,
                                            const Tensor& target_visual,
                                            const Tensor& target_physio, double tau_pl) {
  if (!(tau_pl >= 0.0 && tau_pl < 1.0))
    throw std::invalid_argument("generate_pseudo_labels: tau_pl must lie in [0,1)");
  if (target_visual.rows() == 0)
    throw std::invalid_argument("generate_pseudo_labels: empty target");
  if (target_visual.rows() != target_physio.rows())
    throw std::invalid_argument("generate_pseudo_labels: modality row mismatch");

  const Tensor pv = softmax(visual_head.classify(visual_backbone.embed(target_visual)));
  const Tensor pp = softmax(physio_head.classify(physio_backbone.embed(target_physio)));

  auto peak = [](const Tensor& p, std::size_t row) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < p.cols(); ++j)
      if (p.at(row, j) > p.at(row, arg)) arg = j;
    return std::pair<double, int>{p.at(row, arg), static_cast<int>(arg)};
  };

  PseudoLabelPartition part;
  for (std::size_t i = 0; i < target_visual.rows(); ++i) {
    const auto [peak_v, arg_v] = peak(pv, i);
    const auto [peak_p, arg_p] = peak(pp, i);
    const bool visual_wins = peak_v >= peak_p;
    const double conf = visual_wins ? peak_v : peak_p;
    if (conf >= tau_pl) {
      const int label = visual_wins ? arg_v : arg_p;
      part.confident.push_back(
          {i, label, visual_wins ? Modality::visual : Modality::physio, conf});
      part.confident_classes.insert(label);
    } else {
      part.non_confident.push_back(i);
    }
  }
  return part;
}

ClassAwareSampler::ClassAwareSampler(const std::vector<const SubjectDataset*>& selected_sources,
                                     const PseudoLabelPartition& partition, std::size_t k)
    : k_(k) {
  if (k == 0) throw std::invalid_argument("ClassAwareSampler: k must be positive");
  classes_.assign(partition.confident_classes.begin(), partition.confident_classes.end());
  for (const auto* s : selected_sources) source_ids_.push_back(s->subject_id);
  for (int c : classes_) {
    auto& pools = fresh_[c];
    pools.resize(selected_sources.size() + 1);
    for (std::size_t s = 0; s < selected_sources.size(); ++s) {
      const auto& labels = selected_sources[s]->labels;
      for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == c) pools[s].rows.push_back(i);
    }
    for (const auto& e : partition.confident)
      if (e.label == c) pools.back().rows.push_back(e.index);
  }
  pools_ = fresh_;
}

void ClassAwareSampler::start_epoch(Rng& rng) {
  pools_ = fresh_;
  for (auto& [cls, pools] : pools_)
    for (auto& pool : pools) rng.shuffle(pool.rows);
}

bool ClassAwareSampler::exhausted() const {
  for (const auto& [cls, pools] : pools_)
    for (const auto& pool : pools)
      if (!pool.rows.empty()) return false;
  return true;
}

BatchPlan ClassAwareSampler::next_batch() {
  BatchPlan plan;
  for (int c : classes_) {
    auto& pools = pools_[c];
    ClassDraw draw;
    draw.label = c;
    bool any = false;
    auto take = [&](Pool& pool) {
      std::vector<std::size_t> rows;
      for (std::size_t n = 0; n < k_ && !pool.rows.empty(); ++n) {
        rows.push_back(pool.rows.back());
        pool.rows.pop_back();
      }
      any = any || !rows.empty();
      return rows;
    };
    for (std::size_t s = 0; s < source_ids_.size(); ++s)
      draw.source_rows.emplace_back(source_ids_[s], take(pools[s]));
    draw.target_rows = take(pools.back());
    if (any) plan.push_back(std::move(draw));
  }
  return plan;
}

BatchPlan class_aware_sample(const std::vector<const SubjectDataset*>& selected_sources,
                             const PseudoLabelPartition& partition, std::size_t k, Rng& rng) {
  ClassAwareSampler sampler(selected_sources, partition, k);
  sampler.start_epoch(rng);
  return sampler.next_batch();
}

}  // namespace msda
