#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "msda/datagen.hpp"
#include "msda/pipeline.hpp"

namespace msda {

// Effective settings for one command invocation. The JSON schema mirrors the
// field names; nested objects "benchmark" and "weights" map onto
// BenchmarkSpec and LossWeights.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out;                   // artifact directory
  std::string data_dir;              // dataset directory; gen-data writes here
  std::string checkpoint;            // model checkpoint path
  std::string kind;                  // baseline / ablation kind
  std::vector<double> grid;          // ablation grid
  std::vector<std::string> targets;  // empty = every target subject on disk
  BenchmarkSpec benchmark;           // gen-data shape; seed is the run seed
  PipelineConfig pipeline;           // thresholds, weights, optimizer, dims

  std::string resolved_json(const std::string& command) const;
};

// Command-line values that take precedence over the config file. epochs sets
// both stage lengths; weights is "gamma,alpha,beta"; targets and grid are
// comma-separated.
struct CliOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> data_dir;
  std::optional<std::string> checkpoint;
  std::optional<std::string> kind;
  std::optional<double> tau_ss;
  std::optional<double> tau_pl;
  std::optional<int> epochs;
  std::optional<std::string> weights;
  std::optional<std::string> targets;
  std::optional<std::string> grid;
};

// File (optional) then overrides, then validation. Unknown keys, type or
// range violations, and a missing seed all throw with the offending key
// path. When no value supplies `out`, the MSDA_LAB_OUT environment variable
// and finally "msda_out" fill in.
RunConfig parse_config(const std::optional<std::string>& config_path, const CliOverrides& o);
RunConfig parse_config_text(const std::string& json_text, const CliOverrides& o = {});

}  // namespace msda
