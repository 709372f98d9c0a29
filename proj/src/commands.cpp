#include "msda/commands.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "msda/cotrain.hpp"
#include "msda/log.hpp"

namespace msda {
namespace {

namespace fs = std::filesystem;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

std::vector<SubjectDataset> load_data(const RunConfig& cfg) { return read_dataset(cfg.data_dir); }

std::vector<SubjectDataset> sources_of(const std::vector<SubjectDataset>& subjects) {
  std::vector<SubjectDataset> out;
  for (const auto& s : subjects)
    if (s.role == Role::source) out.push_back(s);
  return out;
}

// Explicit cfg.targets, or every target subject found in the dataset.
std::vector<std::string> target_ids(const RunConfig& cfg,
                                    const std::vector<SubjectDataset>& subjects) {
  if (!cfg.targets.empty()) return cfg.targets;
  std::vector<std::string> ids;
  for (const auto& s : subjects)
    if (s.role == Role::target) ids.push_back(s.subject_id);
  if (ids.empty()) throw std::invalid_argument("no target subjects in " + cfg.data_dir);
  return ids;
}

const SubjectDataset& find_target(const std::vector<SubjectDataset>& subjects,
                                  const std::string& id) {
  for (const auto& s : subjects)
    if (s.subject_id == id) return s;
  throw std::invalid_argument("target subject " + id + " not found in dataset");
}

TargetSplit split_of(const SubjectDataset& target, const RunConfig& cfg) {
  return split_target(target, cfg.pipeline.split_fractions,
                      split_seed_for(cfg.seed, target.subject_id));
}

void write_accuracy_csv(const std::string& path,
                        const std::vector<std::pair<std::string, double>>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "target_id,accuracy\n";
  for (const auto& [id, acc] : rows) out << id << ',' << fmt(acc) << '\n';
}

int cmd_gen_data(const RunConfig& cfg) {
  const auto subjects = generate_benchmark(cfg.benchmark);
  write_dataset(subjects, cfg.data_dir);
  std::printf("wrote %zu subjects to %s\n", subjects.size(), cfg.data_dir.c_str());
  return 0;
}

int cmd_train_source(const RunConfig& cfg) {
  const auto sources = sources_of(load_data(cfg));
  auto [bundle, metrics] = train_source_stage(sources, cfg.pipeline);
  save_bundle(bundle, cfg.checkpoint);
  write_metrics_csv(metrics, cfg.out + "/source_metrics.csv");
  std::printf("trained on %zu sources, checkpoint %s\n", sources.size(), cfg.checkpoint.c_str());
  return 0;
}

int cmd_select(const RunConfig& cfg) {
  const ModelBundle bundle = load_bundle(cfg.checkpoint);
  const auto subjects = load_data(cfg);
  const auto sources = sources_of(subjects);
  for (const std::string& tid : target_ids(cfg, subjects)) {
    const TargetSplit split = split_of(find_target(subjects, tid), cfg);
    const SimilarityTable table =
        build_similarity_table(sources, split.train, bundle.backbone_v, bundle.backbone_p);
    const auto selected = select_sources(table, cfg.pipeline.tau_ss);
    write_selection_report(table, selected, cfg.out + "/selection_" + tid + ".csv");
    std::printf("%s: selected %zu of %zu sources\n", tid.c_str(), selected.size(),
                sources.size());
  }
  return 0;
}

int cmd_adapt(const RunConfig& cfg) {
  const ModelBundle source_bundle = load_bundle(cfg.checkpoint);
  const auto subjects = load_data(cfg);
  const auto sources = sources_of(subjects);
  for (const std::string& tid : target_ids(cfg, subjects)) {
    const TargetSplit split = split_of(find_target(subjects, tid), cfg);
    const GuardedTestSplit guarded(split.test);
    ModelBundle bundle = source_bundle.clone();
    const SimilarityTable table =
        build_similarity_table(sources, split.train, bundle.backbone_v, bundle.backbone_p);
    const auto selected = select_sources(table, cfg.pipeline.tau_ss);
    const RunMetrics metrics =
        adapt_stage(bundle, sources, selected, split.train, split.val, guarded, cfg.pipeline);
    save_bundle(bundle, cfg.out + "/adapted_checkpoint_" + tid + ".json");
    write_metrics_csv(metrics, cfg.out + "/adapt_metrics_" + tid + ".csv");
    std::printf("%s: adapted with %zu sources, test accuracy %.4f\n", tid.c_str(),
                selected.size(), metrics.final_test_acc);
  }
  return 0;
}

int cmd_evaluate(const RunConfig& cfg) {
  const ModelBundle bundle = load_bundle(cfg.checkpoint);
  const auto subjects = load_data(cfg);
  std::vector<std::pair<std::string, double>> rows;
  for (const std::string& tid : target_ids(cfg, subjects)) {
    const TargetSplit split = split_of(find_target(subjects, tid), cfg);
    rows.emplace_back(tid, evaluate(bundle, split.test));
  }
  write_accuracy_csv(cfg.out + "/evaluation.csv", rows);
  for (const auto& [id, acc] : rows) std::printf("%s: %.4f\n", id.c_str(), acc);
  return 0;
}

int cmd_baseline(const RunConfig& cfg) {
  if (cfg.kind.empty())
    throw std::invalid_argument("baseline requires a kind (lower_visual, lower_physio, "
                                "lower_fusion, blend_mmd_uda, upper_finetune)");
  const BaselineKind kind = baseline_from(cfg.kind);
  const auto subjects = load_data(cfg);
  std::vector<std::pair<std::string, double>> rows;
  for (const std::string& tid : target_ids(cfg, subjects)) {
    const RunMetrics m = run_baseline(kind, subjects, tid, cfg.pipeline);
    rows.emplace_back(tid, m.final_test_acc);
  }
  write_accuracy_csv(cfg.out + "/baseline_" + cfg.kind + ".csv", rows);
  for (const auto& [id, acc] : rows) std::printf("%s: %.4f\n", id.c_str(), acc);
  return 0;
}

std::vector<double> grid_for(AblateKind kind, const RunConfig& cfg) {
  if (!cfg.grid.empty()) return cfg.grid;
  switch (kind) {
    case AblateKind::tau_ss_sweep:
      return {0.0, 0.25, 0.5, 0.75, 1.0};
    case AblateKind::tau_pl_sweep:
      return {0.8, 0.9, 0.95, 0.99};
    case AblateKind::loss_weights:
      return {0.1, 0.5, 1.0};
    case AblateKind::loss_components:
      return {1.0};
  }
  throw std::invalid_argument("unknown ablation kind");
}

int cmd_ablate(const RunConfig& cfg) {
  if (cfg.kind.empty())
    throw std::invalid_argument("ablate requires a kind (tau_ss_sweep, tau_pl_sweep, "
                                "loss_weights, loss_components)");
  const AblateKind kind = ablate_from(cfg.kind);
  const auto subjects = load_data(cfg);
  if (!cfg.targets.empty()) {
    // restrict the sweep to the requested targets by dropping the others
    std::vector<SubjectDataset> kept = sources_of(subjects);
    for (const std::string& tid : cfg.targets) kept.push_back(find_target(subjects, tid));
    const auto rows = ablate(kind, grid_for(kind, cfg), kept, cfg.pipeline);
    write_ablation_csv(rows, cfg.out + "/ablation_" + cfg.kind + ".csv");
    std::printf("%zu settings swept over %zu targets\n", rows.size(), cfg.targets.size());
    return 0;
  }
  const auto rows = ablate(kind, grid_for(kind, cfg), subjects, cfg.pipeline);
  write_ablation_csv(rows, cfg.out + "/ablation_" + cfg.kind + ".csv");
  std::printf("%zu settings swept\n", rows.size());
  return 0;
}

int cmd_export_embeddings(const RunConfig& cfg) {
  const ModelBundle bundle = load_bundle(cfg.checkpoint);
  const auto subjects = load_data(cfg);
  export_embeddings(bundle, subjects, cfg.out + "/embeddings.csv");
  std::printf("wrote embeddings for %zu subjects\n", subjects.size());
  return 0;
}

}  // namespace

int run_command(const std::string& command, const RunConfig& cfg) {
  fs::create_directories(cfg.out);
  write_text(cfg.out + "/resolved_config.json", cfg.resolved_json(command));
  if (command == "gen-data") return cmd_gen_data(cfg);
  if (command == "train-source") return cmd_train_source(cfg);
  if (command == "select") return cmd_select(cfg);
  if (command == "adapt") return cmd_adapt(cfg);
  if (command == "evaluate") return cmd_evaluate(cfg);
  if (command == "baseline") return cmd_baseline(cfg);
  if (command == "ablate") return cmd_ablate(cfg);
  if (command == "export-embeddings") return cmd_export_embeddings(cfg);
  throw std::invalid_argument("unknown command " + command);
}

}  // namespace msda
