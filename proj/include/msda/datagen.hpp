#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "msda/tensor.hpp"

namespace msda {

// Synthetic benchmark layout: G groups of subjects share class prototypes;
// every subject distorts them with its own affine shift, leaks its identity
// along a private direction, and adds per-modality noise whose scale encodes
// which modality is reliable for that subject.
struct BenchmarkSpec {
  std::size_t n_classes = 4;
  std::size_t n_sources = 12;
  std::size_t n_targets = 3;
  std::size_t samples_per_subject = 200;
  std::size_t d_v = 24;
  std::size_t d_p = 12;
  std::size_t n_groups = 3;
  double shift_strength = 1.6;
  double identity_leak = 1.2;
  double noise_reliable = 0.15;   // sigma for a subject's reliable modality
  double noise_unreliable = 0.6;  // sigma for the other modality
  std::uint64_t seed = 1;

  void validate() const;
};

enum class Role { source, target };
const char* role_name(Role r);
Role role_from(const std::string& s);

struct SubjectDataset {
  std::string subject_id;
  Role role = Role::source;
  int identity = 0;
  std::vector<int> labels;  // expression label per row
  Tensor visual;            // (n, d_v)
  Tensor physio;            // (n, d_p)

  std::size_t size() const { return labels.size(); }
};

// Sources come first (s00..), then targets (t00..). Subject k joins group
// (index % n_groups) within its role.
std::vector<SubjectDataset> generate_benchmark(const BenchmarkSpec& spec);

// One directory per subject: meta.json + samples.csv with header
// y,<y-acute>,v_0..v_{dv-1},p_0..p_{dp-1}. Floats are written so the
// round trip is bit exact.
void write_dataset(const std::vector<SubjectDataset>& subjects, const std::string& dir);
std::vector<SubjectDataset> read_dataset(const std::string& dir);

struct TargetSplit {
  SubjectDataset train, val, test;
};

// Stratified by expression label; classes with fewer than 3 samples trigger an
// unstratified fallback with a warning. fractions must sum to 1.
TargetSplit split_target(const SubjectDataset& subject, const std::array<double, 3>& fractions,
                         std::uint64_t seed);

}  // namespace msda
