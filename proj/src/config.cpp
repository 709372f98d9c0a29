#include "msda/config.hpp"

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace msda {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("config: " + msg); }

void expect_object(const json& j, const std::string& path) {
  if (!j.is_object()) fail(path + " must be an object");
}

double as_number(const json& j, const std::string& path) {
  if (!j.is_number()) fail(path + " must be a number");
  return j.get<double>();
}

bool as_bool(const json& j, const std::string& path) {
  if (!j.is_boolean()) fail(path + " must be a boolean");
  return j.get<bool>();
}

std::string as_string(const json& j, const std::string& path) {
  if (!j.is_string()) fail(path + " must be a string");
  return j.get<std::string>();
}

int as_int(const json& j, const std::string& path) {
  if (!j.is_number_integer()) fail(path + " must be an integer");
  return j.get<int>();
}

std::size_t as_size(const json& j, const std::string& path) {
  if (!j.is_number_integer() || j.get<long long>() < 0) fail(path + " must be a non-negative integer");
  return j.get<std::size_t>();
}

void parse_weights(const json& j, LossWeights& w) {
  expect_object(j, "weights");
  for (const auto& [key, value] : j.items()) {
    const std::string path = "weights." + key;
    if (key == "unsup")
      w.unsup = as_number(value, path);
    else if (key == "agn")
      w.agn = as_number(value, path);
    else if (key == "aw")
      w.aw = as_number(value, path);
    else if (key == "disentangle")
      w.disentangle = as_number(value, path);
    else
      fail("unknown key \"" + path + "\"");
  }
}

void parse_benchmark(const json& j, BenchmarkSpec& b) {
  expect_object(j, "benchmark");
  for (const auto& [key, value] : j.items()) {
    const std::string path = "benchmark." + key;
    if (key == "n_classes")
      b.n_classes = as_size(value, path);
    else if (key == "n_sources")
      b.n_sources = as_size(value, path);
    else if (key == "n_targets")
      b.n_targets = as_size(value, path);
    else if (key == "samples_per_subject")
      b.samples_per_subject = as_size(value, path);
    else if (key == "d_v")
      b.d_v = as_size(value, path);
    else if (key == "d_p")
      b.d_p = as_size(value, path);
    else if (key == "n_groups")
      b.n_groups = as_size(value, path);
    else if (key == "shift_strength")
      b.shift_strength = as_number(value, path);
    else if (key == "identity_leak")
      b.identity_leak = as_number(value, path);
    else if (key == "noise_reliable")
      b.noise_reliable = as_number(value, path);
    else if (key == "noise_unreliable")
      b.noise_unreliable = as_number(value, path);
    else
      fail("unknown key \"" + path + "\"");
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  for (const std::string& item : split_list(s)) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stod(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail(what + ": \"" + item + "\" is not a number");
    }
  }
  return out;
}

RunConfig from_json(const json& root, bool& seed_seen) {
  expect_object(root, "config");
  RunConfig c;
  seed_seen = false;
  for (const auto& [key, value] : root.items()) {
    if (key == "seed") {
      if (!value.is_number_integer() || value.get<long long>() < 0)
        fail("seed must be a non-negative integer");
      c.seed = value.get<std::uint64_t>();
      seed_seen = true;
    } else if (key == "command") {
      as_string(value, key);  // written by resolved_json; informational
    } else if (key == "out") {
      c.out = as_string(value, key);
    } else if (key == "data_dir") {
      c.data_dir = as_string(value, key);
    } else if (key == "checkpoint") {
      c.checkpoint = as_string(value, key);
    } else if (key == "kind") {
      c.kind = as_string(value, key);
    } else if (key == "grid") {
      if (!value.is_array()) fail("grid must be an array of numbers");
      for (std::size_t i = 0; i < value.size(); ++i)
        c.grid.push_back(as_number(value[i], "grid[" + std::to_string(i) + "]"));
    } else if (key == "targets") {
      if (!value.is_array()) fail("targets must be an array of strings");
      for (std::size_t i = 0; i < value.size(); ++i)
        c.targets.push_back(as_string(value[i], "targets[" + std::to_string(i) + "]"));
    } else if (key == "benchmark") {
      parse_benchmark(value, c.benchmark);
    } else if (key == "weights") {
      parse_weights(value, c.pipeline.weights);
    } else if (key == "tau_ss") {
      c.pipeline.tau_ss = as_number(value, key);
    } else if (key == "tau_pl") {
      c.pipeline.tau_pl = as_number(value, key);
    } else if (key == "lr") {
      c.pipeline.lr = as_number(value, key);
    } else if (key == "momentum") {
      c.pipeline.momentum = as_number(value, key);
    } else if (key == "weight_decay") {
      c.pipeline.weight_decay = as_number(value, key);
    } else if (key == "eta_min") {
      c.pipeline.eta_min = as_number(value, key);
    } else if (key == "source_epochs") {
      c.pipeline.source_epochs = as_int(value, key);
    } else if (key == "adapt_epochs") {
      c.pipeline.adapt_epochs = as_int(value, key);
    } else if (key == "batch_size") {
      c.pipeline.batch_size = static_cast<int>(as_size(value, key));
    } else if (key == "embed_dim") {
      c.pipeline.embed_dim = as_size(value, key);
    } else if (key == "hidden_dim") {
      c.pipeline.hidden_dim = as_size(value, key);
    } else if (key == "n_mixture") {
      c.pipeline.n_mixture = as_size(value, key);
    } else if (key == "cond_hidden") {
      c.pipeline.cond_hidden = as_size(value, key);
    } else if (key == "k_per_class") {
      c.pipeline.k_per_class = as_size(value, key);
    } else if (key == "pl_refresh_n") {
      c.pipeline.pl_refresh_n = as_int(value, key);
    } else if (key == "mmd_sqrt") {
      c.pipeline.mmd_sqrt = as_bool(value, key);
    } else if (key == "mi_variant") {
      c.pipeline.mi_variant = as_bool(value, key);
    } else if (key == "identity_aux_loss") {
      c.pipeline.identity_aux_loss = as_bool(value, key);
    } else if (key == "split_fractions") {
      if (!value.is_array() || value.size() != 3) fail("split_fractions must be an array of 3 numbers");
      for (std::size_t i = 0; i < 3; ++i)
        c.pipeline.split_fractions[i] =
            as_number(value[i], "split_fractions[" + std::to_string(i) + "]");
    } else {
      fail("unknown key \"" + key + "\"");
    }
  }
  return c;
}

void apply_overrides(RunConfig& c, bool& seed_seen, const CliOverrides& o) {
  if (o.seed) {
    c.seed = *o.seed;
    seed_seen = true;
  }
  if (o.out) c.out = *o.out;
  if (o.data_dir) c.data_dir = *o.data_dir;
  if (o.checkpoint) c.checkpoint = *o.checkpoint;
  if (o.kind) c.kind = *o.kind;
  if (o.tau_ss) c.pipeline.tau_ss = *o.tau_ss;
  if (o.tau_pl) c.pipeline.tau_pl = *o.tau_pl;
  if (o.epochs) {
    c.pipeline.source_epochs = *o.epochs;
    c.pipeline.adapt_epochs = *o.epochs;
  }
  if (o.weights) {
    const auto w = parse_double_list(*o.weights, "weights");
    if (w.size() != 3) fail("weights must be three comma-separated numbers gamma,alpha,beta");
    c.pipeline.weights.unsup = w[0];
    c.pipeline.weights.agn = w[1];
    c.pipeline.weights.aw = w[2];
  }
  if (o.targets) c.targets = split_list(*o.targets);
  if (o.grid) c.grid = parse_double_list(*o.grid, "grid");
}

void finalize(RunConfig& c, bool seed_seen) {
  if (!seed_seen) fail("seed is required");
  if (c.out.empty()) {
    const char* env = std::getenv("MSDA_LAB_OUT");
    c.out = (env && *env) ? env : "msda_out";
  }
  if (c.data_dir.empty()) c.data_dir = c.out + "/dataset";
  if (c.checkpoint.empty()) c.checkpoint = c.out + "/checkpoint.json";
  c.pipeline.seed = c.seed;
  c.benchmark.seed = c.seed;
  c.pipeline.validate();
  c.benchmark.validate();
}

}  // namespace

RunConfig parse_config_text(const std::string& json_text, const CliOverrides& o) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    fail(std::string("invalid JSON: ") + e.what());
  }
  bool seed_seen = false;
  RunConfig c = from_json(root, seed_seen);
  apply_overrides(c, seed_seen, o);
  finalize(c, seed_seen);
  return c;
}

RunConfig parse_config(const std::optional<std::string>& config_path, const CliOverrides& o) {
  if (!config_path) {
    bool seed_seen = false;
    RunConfig c = from_json(json::object(), seed_seen);
    apply_overrides(c, seed_seen, o);
    finalize(c, seed_seen);
    return c;
  }
  std::ifstream in(*config_path, std::ios::binary);
  if (!in) fail("cannot open config file " + *config_path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), o);
}

std::string RunConfig::resolved_json(const std::string& command) const {
  json j;
  j["command"] = command;
  j["seed"] = seed;
  j["out"] = out;
  j["data_dir"] = data_dir;
  j["checkpoint"] = checkpoint;
  if (!kind.empty()) j["kind"] = kind;
  if (!grid.empty()) j["grid"] = grid;
  if (!targets.empty()) j["targets"] = targets;
  j["benchmark"] = {{"n_classes", benchmark.n_classes},
                    {"n_sources", benchmark.n_sources},
                    {"n_targets", benchmark.n_targets},
                    {"samples_per_subject", benchmark.samples_per_subject},
                    {"d_v", benchmark.d_v},
                    {"d_p", benchmark.d_p},
                    {"n_groups", benchmark.n_groups},
                    {"shift_strength", benchmark.shift_strength},
                    {"identity_leak", benchmark.identity_leak},
                    {"noise_reliable", benchmark.noise_reliable},
                    {"noise_unreliable", benchmark.noise_unreliable}};
  j["tau_ss"] = pipeline.tau_ss;
  j["tau_pl"] = pipeline.tau_pl;
  j["weights"] = {{"unsup", pipeline.weights.unsup},
                  {"agn", pipeline.weights.agn},
                  {"aw", pipeline.weights.aw},
                  {"disentangle", pipeline.weights.disentangle}};
  j["lr"] = pipeline.lr;
  j["momentum"] = pipeline.momentum;
  j["weight_decay"] = pipeline.weight_decay;
  j["eta_min"] = pipeline.eta_min;
  j["source_epochs"] = pipeline.source_epochs;
  j["adapt_epochs"] = pipeline.adapt_epochs;
  j["batch_size"] = pipeline.batch_size;
  j["embed_dim"] = pipeline.embed_dim;
  j["hidden_dim"] = pipeline.hidden_dim;
  j["n_mixture"] = pipeline.n_mixture;
  j["cond_hidden"] = pipeline.cond_hidden;
  j["k_per_class"] = pipeline.k_per_class;
  j["pl_refresh_n"] = pipeline.pl_refresh_n;
  j["mmd_sqrt"] = pipeline.mmd_sqrt;
  j["mi_variant"] = pipeline.mi_variant;
  j["identity_aux_loss"] = pipeline.identity_aux_loss;
  j["split_fractions"] = pipeline.split_fractions;
  return j.dump(1) + "\n";
}

}  // namespace msda
