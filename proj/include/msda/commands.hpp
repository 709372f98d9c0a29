#pragma once

#include <string>

#include "msda/config.hpp"

namespace msda {

// Runs one CLI command: gen-data, train-source, select, adapt, evaluate,
// baseline, ablate, or export-embeddings. Writes artifacts plus a
// resolved_config.json under cfg.out and returns 0; failures throw with a
// message naming the missing piece.
int run_command(const std::string& command, const RunConfig& cfg);

}  // namespace msda
