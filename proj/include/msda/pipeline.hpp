#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "msda/cotrain.hpp"
#include "msda/datagen.hpp"
#include "msda/disentangle.hpp"
#include "msda/nets.hpp"
#include "msda/rng.hpp"
#include "msda/tensor.hpp"

namespace msda {

struct LossWeights {
  double unsup = 1.0;        // gamma, target pseudo-label fusion loss
  double agn = 0.5;          // alpha, class-agnostic alignment
  double aw = 0.1;           // beta, class-aware alignment
  // lambda_d, source-stage disentanglement. The entropy sum is unbounded
  // below (scale clamp aside), so at MLP scale a large weight collapses the
  // embeddings outright; 0.04 squeezes identity variance while leaving the
  // classification losses in charge.
  double disentangle = 0.04;

  void validate() const;
};

struct PipelineConfig {
  double tau_ss = 0.55;
  double tau_pl = 0.95;
  LossWeights weights;
  int source_epochs = 20;
  int adapt_epochs = 20;
  std::size_t batch_size = 32;
  // base 1e-4 tuned for deep backbones, scaled x10 for these small MLPs
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double eta_min = 2e-5;
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t n_mixture = 10;
  std::size_t cond_hidden = 64;
  std::size_t k_per_class = 8;
  int pl_refresh_n = 1;  // regenerate pseudo-labels every n adaptation epochs
  bool mmd_sqrt = false;
  bool mi_variant = false;
  bool identity_aux_loss = true;
  std::array<double, 3> split_fractions{0.6, 0.2, 0.2};
  std::uint64_t seed = 0;

  void validate() const;
};

struct ModelBundle {
  std::size_t d_v = 0, d_p = 0;
  std::size_t n_classes = 0, n_identities = 0, embed_dim = 0;
  Backbone backbone_v, backbone_p;
  ExpressionHead head_v, head_p;
  IdentityHead id_head_v, id_head_p;
  EntropyEstimator est_v, est_p;
  FusionHead fusion;

  static ModelBundle init(std::size_t d_v, std::size_t d_p, std::size_t n_classes,
                          std::size_t n_identities, const PipelineConfig& cfg, Rng& rng);
  ModelBundle clone() const;
  std::vector<Tensor> model_params() const;  // backbones, heads, fusion (no estimators)
};

void save_bundle(const ModelBundle& bundle, const std::string& path);
ModelBundle load_bundle(const std::string& path);

struct EpochMetrics {
  int epoch = 0;
  double loss_s = 0.0;      // fusion source loss (adapt) / summed model loss (source stage)
  double loss_unsup = 0.0;
  double loss_agn = 0.0;
  double loss_aw = 0.0;
  double loss_v = 0.0, loss_p = 0.0;  // per-modality classification loss
  std::size_t n_confident = 0;
  std::size_t n_unconfident = 0;
  std::size_t n_confident_classes = 0;
  double min_confidence = 1.0;  // over confident entries; 1.0 when none
  double pl_precision = -1.0;   // confident labels matching ground truth; diagnostic only
  double val_acc = 0.0;
  double test_acc = 0.0;
  double id_probe_v = 0.0, id_probe_p = 0.0;
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
  double final_test_acc = 0.0;
};

// columns: epoch,loss_s,loss_unsup,loss_agn,loss_aw,n_confident,val_acc,
//          test_acc,id_probe_v,id_probe_p
void write_metrics_csv(const RunMetrics& metrics, const std::string& path);

// Holds the target test split behind an access counter so training code can
// prove it never touched the rows: only evaluate() reads through it.
class GuardedTestSplit {
 public:
  GuardedTestSplit() = default;
  explicit GuardedTestSplit(SubjectDataset data) : data_(std::move(data)) {}
  const SubjectDataset& access() const {
    ++reads_;
    return data_;
  }
  std::size_t size() const { return data_.size(); }
  int reads() const { return reads_; }

 private:
  SubjectDataset data_;
  mutable int reads_ = 0;
};

// Per-subject split seed; shared by every entry point so baselines, the full
// method, and standalone evaluation all see the same target partition.
std::uint64_t split_seed_for(std::uint64_t seed, const std::string& subject_id);

std::pair<ModelBundle, RunMetrics> train_source_stage(const std::vector<SubjectDataset>& sources,
                                                      const PipelineConfig& cfg);

RunMetrics adapt_stage(ModelBundle& bundle, const std::vector<SubjectDataset>& sources,
                       const std::vector<std::string>& selected_ids,
                       const SubjectDataset& target_train, const SubjectDataset& target_val,
                       const GuardedTestSplit& target_test, const PipelineConfig& cfg);

Tensor fusion_logits(const ModelBundle& bundle, const Tensor& visual, const Tensor& physio);

double evaluate(const ModelBundle& bundle, const SubjectDataset& target_test);
double evaluate(const ModelBundle& bundle, const GuardedTestSplit& target_test);

enum class BaselineKind { lower_visual, lower_physio, lower_fusion, blend_mmd_uda, upper_finetune };
const char* baseline_name(BaselineKind kind);
BaselineKind baseline_from(const std::string& name);

// Pieces the baselines are built from, exposed so a source-trained bundle can
// be shared across baselines on the same seed.
double evaluate_lower(const ModelBundle& bundle, BaselineKind kind, const SubjectDataset& test);
RunMetrics blend_adapt(ModelBundle& bundle, const std::vector<SubjectDataset>& sources,
                       const SubjectDataset& target_train, const SubjectDataset& target_val,
                       const GuardedTestSplit& target_test, const PipelineConfig& cfg);
RunMetrics finetune_upper(ModelBundle& bundle, const SubjectDataset& target_train,
                          const SubjectDataset& target_val, const GuardedTestSplit& target_test,
                          const PipelineConfig& cfg);

RunMetrics run_baseline(BaselineKind kind, const std::vector<SubjectDataset>& subjects,
                        const std::string& target_id, const PipelineConfig& cfg);

// Source stage on all sources, selection against the target train split, then
// adaptation; the full method end to end for one target.
RunMetrics run_full_method(const std::vector<SubjectDataset>& subjects,
                           const std::string& target_id, const PipelineConfig& cfg,
                           ModelBundle* out_bundle = nullptr,
                           std::vector<std::string>* out_selected = nullptr);

enum class AblateKind { tau_ss_sweep, tau_pl_sweep, loss_weights, loss_components };
AblateKind ablate_from(const std::string& name);

struct AblationRow {
  std::string setting;                 // grid label, e.g. "tau_ss=0.55" or "ls+unsup"
  std::vector<int> selected_per_target;  // tau_ss sweep only
  double selected_avg = -1.0;            // tau_ss sweep only
  double accuracy = 0.0;                 // mean test accuracy over targets
};

std::vector<AblationRow> ablate(AblateKind kind, const std::vector<double>& grid,
                                const std::vector<SubjectDataset>& subjects,
                                const PipelineConfig& cfg);
void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path);

// CSV of per-sample embeddings: subject_id, role, label, pseudo_label (-1
// when none), then h_v, h_p and fused coordinates.
void export_embeddings(const ModelBundle& bundle, const std::vector<SubjectDataset>& subjects,
                       const std::string& path);

}  // namespace msda
