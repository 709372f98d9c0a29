#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "msda/datagen.hpp"
#include "msda/nets.hpp"
#include "msda/rng.hpp"
#include "msda/tensor.hpp"

namespace msda {

// Per-source similarity scores against one target, kept per modality as raw
// cosines and their min-max normalization, plus the per-source merged score.
struct SimilarityTable {
  std::vector<std::string> source_ids;
  std::vector<double> raw_visual, norm_visual;
  std::vector<double> raw_physio, norm_physio;
  std::vector<double> merged;  // max over the two normalized scores
};

struct ConfidentSample {
  std::size_t index = 0;  // row in the target train split
  int label = 0;
  Modality winning = Modality::visual;
  double confidence = 0.0;
};

struct PseudoLabelPartition {
  std::vector<ConfidentSample> confident;       // T^l
  std::vector<std::size_t> non_confident;       // T^u
  std::set<int> confident_classes;              // labels present in T^l
};

// Sample slots drawn for one class: up to k rows per selected source plus up
// to k confident target rows carrying that pseudo-label.
struct ClassDraw {
  int label = 0;
  std::vector<std::pair<std::string, std::vector<std::size_t>>> source_rows;
  std::vector<std::size_t> target_rows;
};
using BatchPlan = std::vector<ClassDraw>;

std::vector<double> subject_mean_embedding(const Backbone& backbone, const SubjectDataset& subject);

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

// min -> 0, max -> 1; all-equal input degenerates to all 1.0 with a warning
std::vector<double> min_max_normalize(const std::vector<double>& raw);

SimilarityTable build_similarity_table(const std::vector<SubjectDataset>& sources,
                                       const SubjectDataset& target_train,
                                       const Backbone& visual_backbone,
                                       const Backbone& physio_backbone);

// sources with merged score >= tau_ss, ordered by score descending
std::vector<std::string> select_sources(const SimilarityTable& table, double tau_ss);

void write_selection_report(const SimilarityTable& table,
                            const std::vector<std::string>& selected, const std::string& path);

PseudoLabelPartition generate_pseudo_labels(const Backbone& visual_backbone,
                                            const Backbone& physio_backbone,
                                            const ExpressionHead& visual_head,
                                            const ExpressionHead& physio_head,
                                            const Tensor& target_visual,
                                            const Tensor& target_physio, double tau_pl);

// Draws class-aware batches without replacement until the epoch's pools are
// exhausted; start_epoch refills and reshuffles every pool.
class ClassAwareSampler {
 public:
  ClassAwareSampler(const std::vector<const SubjectDataset*>& selected_sources,
                    const PseudoLabelPartition& partition, std::size_t k);

  void start_epoch(Rng& rng);
  bool exhausted() const;
  BatchPlan next_batch();

 private:
  struct Pool {
    std::vector<std::size_t> rows;  // remaining indices, consumed from the back
  };
  std::size_t k_;
  std::vector<int> classes_;
  std::vector<std::string> source_ids_;
  // pools[class][domain]; domain 0..S-1 are sources, S is the target
  std::map<int, std::vector<Pool>> pools_;
  std::map<int, std::vector<Pool>> fresh_;
};

// One epoch-start draw: builds the sampler, shuffles, returns the first plan.
BatchPlan class_aware_sample(const std::vector<const SubjectDataset*>& selected_sources,
                             const PseudoLabelPartition& partition, std::size_t k, Rng& rng);

}  // namespace msda
