#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include "msda/commands.hpp"

namespace {

struct Cli {
  std::optional<std::string> config;
  msda::CliOverrides o;
};

void add_common(CLI::App* cmd, Cli& cli) {
  cmd->add_option("--config", cli.config, "JSON config file; flags take precedence");
  cmd->add_option("--seed", cli.o.seed, "run seed (required here or in the config)");
  cmd->add_option("--out", cli.o.out, "artifact directory (default: $MSDA_LAB_OUT or msda_out)");
  cmd->add_option("--data", cli.o.data_dir, "dataset directory (default: <out>/dataset)");
  cmd->add_option("--checkpoint", cli.o.checkpoint,
                  "model checkpoint path (default: <out>/checkpoint.json)");
  cmd->add_option("--tau-ss", cli.o.tau_ss, "source-selection threshold in [0,1]");
  cmd->add_option("--tau-pl", cli.o.tau_pl, "pseudo-label confidence threshold in [0,1)");
  cmd->add_option("--epochs", cli.o.epochs, "epoch count for both stages");
  cmd->add_option("--weights", cli.o.weights, "loss weights gamma,alpha,beta");
  cmd->add_option("--targets", cli.o.targets, "comma-separated target subject ids");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal multi-source domain adaptation lab"};
  app.require_subcommand(1);
  Cli cli;

  struct Spec {
    const char* name;
    const char* help;
    bool takes_kind;
  };
  const Spec specs[] = {
      {"gen-data", "generate the synthetic benchmark into the dataset directory", false},
      {"train-source", "train the source-stage model and write a checkpoint", false},
      {"select", "rank sources against each target and write selection reports", false},
      {"adapt", "co-training adaptation of a source checkpoint per target", false},
      {"evaluate", "accuracy of a checkpoint on each target test split", false},
      {"baseline", "run a lower/blend/upper reference model", true},
      {"ablate", "sweep a threshold or loss-weight grid", true},
      {"export-embeddings", "dump per-sample embeddings for projection", false},
  };
  for (const Spec& s : specs) {
    CLI::App* cmd = app.add_subcommand(s.name, s.help);
    add_common(cmd, cli);
    if (s.takes_kind) cmd->add_option("--kind", cli.o.kind, "variant to run");
    if (std::string(s.name) == "ablate")
      cmd->add_option("--grid", cli.o.grid, "comma-separated grid values");
  }

  CLI11_PARSE(app, argc, argv);

  try {
    const msda::RunConfig cfg = msda::parse_config(cli.config, cli.o);
    return msda::run_command(app.get_subcommands().front()->get_name(), cfg);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
