#include "msda/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

#include "msda/log.hpp"
#include "msda/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace msda {

namespace {

// class separation vs within-class spread vs group-level drift, chosen so the
// default benchmark is learnable but group membership matters
constexpr double kProtoScale = 1.0;
constexpr double kWithinStd = 0.8;
constexpr double kGroupStd = 2.4;
// split of shift_strength between the linear part and the translation of a
// subject's affine map; a full-strength linear scramble buries group structure
constexpr double kLinearScale = 0.5;

constexpr const char* kIdentityCol = "\xc3\xbd";  // UTF-8 y-acute

}  // namespace

void BenchmarkSpec::validate() const {
  if (n_classes < 2) throw std::invalid_argument("BenchmarkSpec: n_classes must be >= 2");
  if (n_sources < 4) throw std::invalid_argument("BenchmarkSpec: n_sources must be >= 4");
  if (n_targets < 1) throw std::invalid_argument("BenchmarkSpec: n_targets must be >= 1");
  if (samples_per_subject < 4 * n_classes)
    throw std::invalid_argument("BenchmarkSpec: samples_per_subject must be >= 4*n_classes");
  if (n_groups < 2) throw std::invalid_argument("BenchmarkSpec: n_groups must be >= 2");
  if (d_v == 0 || d_p == 0) throw std::invalid_argument("BenchmarkSpec: dims must be positive");
  if (shift_strength < 0 || identity_leak < 0 || noise_reliable < 0 || noise_unreliable < 0)
    throw std::invalid_argument("BenchmarkSpec: magnitudes must be >= 0");
  if (n_sources / n_groups < 3)
    throw std::invalid_argument(
        "BenchmarkSpec: infeasible group layout, every group needs at least 3 sources");
}

const char* role_name(Role r) { return r == Role::source ? "source" : "target"; }

Role role_from(const std::string& s) {
  if (s == "source") return Role::source;
  if (s == "target") return Role::target;
  throw std::runtime_error("role must be 'source' or 'target', got '" + s + "'");
}

namespace {

using Matrix = std::vector<std::vector<double>>;  // [row][col]

Matrix draw_prototypes(std::size_t n, std::size_t dim, double scl, Rng& rng) {
  Matrix m(n, std::vector<double>(dim));
  for (auto& row : m)
    for (auto& v : row) v = scl * rng.normal();
  return m;
}

std::vector<double> unit_direction(std::size_t dim, Rng& rng) {
  std::vector<double> u(dim);
  double norm = 0.0;
  for (auto& v : u) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  if (norm == 0.0) norm = 1.0;
  for (auto& v : u) v /= norm;
  return u;
}

struct SubjectTransform {
  Matrix affine;               // dim x dim, already scaled by shift_strength
  std::vector<double> offset;  // dim
  std::vector<double> leak_dir;
  double noise = 0.0;
};

SubjectTransform draw_transform(std::size_t dim, double shift, double noise, Rng& rng) {
  SubjectTransform t;
  t.affine.assign(dim, std::vector<double>(dim));
  const double s = kLinearScale * shift / std::sqrt(static_cast<double>(dim));
  for (auto& row : t.affine)
    for (auto& v : row) v = s * rng.normal();
  t.offset.resize(dim);
  for (auto& v : t.offset) v = shift * rng.normal();
  t.leak_dir = unit_direction(dim, rng);
  t.noise = noise;
  return t;
}

void emit_sample(const std::vector<double>& proto, const SubjectTransform& t,
                 double identity_leak, Rng& rng, std::vector<double>& out) {
  const std::size_t dim = proto.size();
  std::vector<double> x(dim);
  for (std::size_t j = 0; j < dim; ++j) x[j] = proto[j] + kWithinStd * rng.normal();
  std::vector<double> shifted(dim);
  for (std::size_t j = 0; j < dim; ++j) {
    double acc = x[j] + t.offset[j];
    for (std::size_t l = 0; l < dim; ++l) acc += t.affine[j][l] * x[l];
    shifted[j] = acc;
  }
  for (std::size_t j = 0; j < dim; ++j)
    out.push_back(shifted[j] + identity_leak * t.leak_dir[j] + t.noise * rng.normal());
}

std::string subject_name(Role role, std::size_t local) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%c%02zu", role == Role::source ? 's' : 't', local);
  return buf;
}

}  // namespace

std::vector<SubjectDataset> generate_benchmark(const BenchmarkSpec& spec) {
  spec.validate();
  Rng root(spec.seed);

  Rng proto_rng = root.fork(hash_tag("prototypes"));
  const Matrix base_v = draw_prototypes(spec.n_classes, spec.d_v, kProtoScale, proto_rng);
  const Matrix base_p = draw_prototypes(spec.n_classes, spec.d_p, kProtoScale, proto_rng);

  Rng group_rng = root.fork(hash_tag("groups"));
  std::vector<Matrix> proto_v(spec.n_groups), proto_p(spec.n_groups);
  for (std::size_t g = 0; g < spec.n_groups; ++g) {
    proto_v[g] = draw_prototypes(spec.n_classes, spec.d_v, kGroupStd, group_rng);
    proto_p[g] = draw_prototypes(spec.n_classes, spec.d_p, kGroupStd, group_rng);
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
      for (std::size_t j = 0; j < spec.d_v; ++j) proto_v[g][c][j] += base_v[c][j];
      for (std::size_t j = 0; j < spec.d_p; ++j) proto_p[g][c][j] += base_p[c][j];
    }
  }

  std::vector<SubjectDataset> subjects;
  const std::size_t total = spec.n_sources + spec.n_targets;
  for (std::size_t k = 0; k < total; ++k) {
    const bool is_source = k < spec.n_sources;
    const std::size_t local = is_source ? k : k - spec.n_sources;
    const std::size_t group = local % spec.n_groups;
    Rng srng = root.fork(hash_tag("subject") + k);

    const bool visual_reliable = local % 2 == 0;
    const double sv = visual_reliable ? spec.noise_reliable : spec.noise_unreliable;
    const double sp = visual_reliable ? spec.noise_unreliable : spec.noise_reliable;
    SubjectTransform tv = draw_transform(spec.d_v, spec.shift_strength, sv, srng);
    SubjectTransform tp = draw_transform(spec.d_p, spec.shift_strength, sp, srng);

    SubjectDataset sub;
    sub.subject_id = subject_name(is_source ? Role::source : Role::target, local);
    sub.role = is_source ? Role::source : Role::target;
    sub.identity = static_cast<int>(k);
    sub.labels.resize(spec.samples_per_subject);
    for (std::size_t i = 0; i < sub.labels.size(); ++i)
      sub.labels[i] = static_cast<int>(i % spec.n_classes);
    srng.shuffle(sub.labels);

    std::vector<double> vis, phy;
    vis.reserve(sub.labels.size() * spec.d_v);
    phy.reserve(sub.labels.size() * spec.d_p);
    for (int y : sub.labels) {
      emit_sample(proto_v[group][static_cast<std::size_t>(y)], tv, spec.identity_leak, srng, vis);
      emit_sample(proto_p[group][static_cast<std::size_t>(y)], tp, spec.identity_leak, srng, phy);
    }
    sub.visual = Tensor::from({sub.labels.size(), spec.d_v}, std::move(vis));
    sub.physio = Tensor::from({sub.labels.size(), spec.d_p}, std::move(phy));
    subjects.push_back(std::move(sub));
  }
  return subjects;
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_dataset(const std::vector<SubjectDataset>& subjects, const std::string& dir) {
  if (subjects.empty()) throw std::invalid_argument("write_dataset: no subjects");
  const std::size_t dv = subjects.front().visual.cols(), dp = subjects.front().physio.cols();
  for (const auto& s : subjects)
    if (s.visual.cols() != dv || s.physio.cols() != dp)
      throw std::invalid_argument("write_dataset: inconsistent feature dims across subjects");

  fs::create_directories(dir);
  for (const auto& s : subjects) {
    const fs::path sub = fs::path(dir) / s.subject_id;
    fs::create_directories(sub);

    json meta{{"subject_id", s.subject_id}, {"role", role_name(s.role)}, {"identity", s.identity}};
    std::ofstream mf(sub / "meta.json");
    mf << meta.dump(2) << "\n";

    std::ofstream cf(sub / "samples.csv");
    cf << "y," << kIdentityCol;
    for (std::size_t j = 0; j < dv; ++j) cf << ",v_" << j;
    for (std::size_t j = 0; j < dp; ++j) cf << ",p_" << j;
    cf << "\n";
    for (std::size_t i = 0; i < s.size(); ++i) {
      cf << s.labels[i] << "," << s.identity;
      for (std::size_t j = 0; j < dv; ++j) cf << "," << format_double(s.visual.at(i, j));
      for (std::size_t j = 0; j < dp; ++j) cf << "," << format_double(s.physio.at(i, j));
      cf << "\n";
    }
    if (!cf) throw std::runtime_error("write_dataset: failed writing " + (sub / "samples.csv").string());
  }
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

[[noreturn]] void parse_fail(const fs::path& file, std::size_t lineno, const std::string& what) {
  throw std::runtime_error(file.string() + ": line " + std::to_string(lineno) + ": " + what);
}

double parse_num(const std::string& tok, const fs::path& file, std::size_t lineno,
                 const std::string& col) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (tok.empty() || end != tok.c_str() + tok.size())
    parse_fail(file, lineno, "cannot parse '" + tok + "' in column " + col);
  return v;
}

SubjectDataset read_subject(const fs::path& sub) {
  SubjectDataset out;
  const fs::path meta_path = sub / "meta.json";
  std::ifstream mf(meta_path);
  if (!mf) throw std::runtime_error("read_dataset: missing " + meta_path.string());
  json meta;
  try {
    mf >> meta;
  } catch (const json::exception& e) {
    throw std::runtime_error(meta_path.string() + ": " + e.what());
  }
  for (const char* key : {"subject_id", "role", "identity"})
    if (!meta.contains(key))
      throw std::runtime_error(meta_path.string() + ": missing field '" + key + "'");
  out.subject_id = meta["subject_id"].get<std::string>();
  if (out.subject_id != sub.filename().string())
    throw std::runtime_error(meta_path.string() + ": subject_id '" + out.subject_id +
                             "' does not match directory name");
  out.role = role_from(meta["role"].get<std::string>());
  out.identity = meta["identity"].get<int>();

  const fs::path csv = sub / "samples.csv";
  std::ifstream cf(csv);
  if (!cf) throw std::runtime_error("read_dataset: missing " + csv.string());
  std::string line;
  if (!std::getline(cf, line)) parse_fail(csv, 1, "empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = split_line(line);
  if (header.size() < 4 || header[0] != "y" || header[1] != kIdentityCol)
    parse_fail(csv, 1, "header must start with y," + std::string(kIdentityCol));
  std::size_t dv = 0;
  std::size_t col = 2;
  while (col < header.size() && header[col] == "v_" + std::to_string(dv)) {
    ++dv;
    ++col;
  }
  std::size_t dp = 0;
  while (col < header.size() && header[col] == "p_" + std::to_string(dp)) {
    ++dp;
    ++col;
  }
  if (dv == 0 || dp == 0 || col != header.size())
    parse_fail(csv, 1,
               "expected columns v_0..v_" + std::to_string(dv ? dv : 1) + ",p_0.. after labels, found '" +
                   (col < header.size() ? header[col] : "<end>") + "'");

  std::vector<double> vis, phy;
  std::size_t lineno = 1;
  while (std::getline(cf, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto tok = split_line(line);
    if (tok.size() != 2 + dv + dp)
      parse_fail(csv, lineno,
                 "expected " + std::to_string(2 + dv + dp) + " fields, got " +
                     std::to_string(tok.size()));
    const double y = parse_num(tok[0], csv, lineno, "y");
    if (y != std::floor(y) || y < 0) parse_fail(csv, lineno, "label y must be a non-negative integer");
    const double id = parse_num(tok[1], csv, lineno, kIdentityCol);
    if (static_cast<int>(id) != out.identity)
      parse_fail(csv, lineno, "identity label differs from meta.json identity");
    out.labels.push_back(static_cast<int>(y));
    for (std::size_t j = 0; j < dv; ++j)
      vis.push_back(parse_num(tok[2 + j], csv, lineno, "v_" + std::to_string(j)));
    for (std::size_t j = 0; j < dp; ++j)
      phy.push_back(parse_num(tok[2 + dv + j], csv, lineno, "p_" + std::to_string(j)));
  }
  if (out.labels.empty()) parse_fail(csv, lineno, "no sample rows");
  out.visual = Tensor::from({out.labels.size(), dv}, std::move(vis));
  out.physio = Tensor::from({out.labels.size(), dp}, std::move(phy));
  return out;
}

}  // namespace

std::vector<SubjectDataset> read_dataset(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("read_dataset: not a directory: " + dir);
  std::vector<fs::path> subs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "meta.json")) subs.push_back(e.path());
  if (subs.empty()) throw std::runtime_error("read_dataset: no subject directories in " + dir);
  std::sort(subs.begin(), subs.end());
  std::vector<SubjectDataset> out;
  for (const auto& p : subs) out.push_back(read_subject(p));
  const std::size_t dv = out.front().visual.cols(), dp = out.front().physio.cols();
  for (const auto& s : out)
    if (s.visual.cols() != dv || s.physio.cols() != dp)
      throw std::runtime_error("read_dataset: inconsistent feature dims across subjects");
  return out;
}

TargetSplit split_target(const SubjectDataset& subject, const std::array<double, 3>& fractions,
                         std::uint64_t seed) {
  double sum = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw std::invalid_argument("split_target: fractions must be >= 0");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("split_target: fractions must sum to 1");
  if (subject.size() == 0) throw std::invalid_argument("split_target: empty subject");

  std::map<int, std::vector<int>> by_class;
  for (std::size_t i = 0; i < subject.size(); ++i)
    by_class[subject.labels[i]].push_back(static_cast<int>(i));

  bool stratified = true;
  for (const auto& [cls, rows] : by_class)
    if (rows.size() < 3) {
      log_warn("split_target: class " + std::to_string(cls) + " has only " +
               std::to_string(rows.size()) + " samples, falling back to unstratified split");
      stratified = false;
      break;
    }

  std::vector<std::vector<int>> buckets;
  if (stratified) {
    for (auto& [cls, rows] : by_class) buckets.push_back(rows);
  } else {
    std::vector<int> all(subject.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    buckets.push_back(std::move(all));
  }

  Rng rng(seed);
  std::array<std::vector<int>, 3> picked;
  for (auto& rows : buckets) {
    rng.shuffle(rows);
    const std::size_t n = rows.size();
    std::array<std::size_t, 3> count{};
    std::array<double, 3> frac{};
    std::size_t assigned = 0;
    for (int s = 0; s < 3; ++s) {
      const double ideal = fractions[static_cast<std::size_t>(s)] * static_cast<double>(n);
      count[static_cast<std::size_t>(s)] = static_cast<std::size_t>(ideal);
      frac[static_cast<std::size_t>(s)] = ideal - std::floor(ideal);
      assigned += count[static_cast<std::size_t>(s)];
    }
    while (assigned < n) {  // largest remainder, ties favour train then val
      int best = 0;
      for (int s = 1; s < 3; ++s)
        if (frac[static_cast<std::size_t>(s)] > frac[static_cast<std::size_t>(best)] + 1e-12)
          best = s;
      ++count[static_cast<std::size_t>(best)];
      frac[static_cast<std::size_t>(best)] = -1.0;
      ++assigned;
    }
    std::size_t at = 0;
    for (int s = 0; s < 3; ++s)
      for (std::size_t i = 0; i < count[static_cast<std::size_t>(s)]; ++i)
        picked[static_cast<std::size_t>(s)].push_back(rows[at++]);
  }

  auto make = [&](std::vector<int>& rows) {
    std::sort(rows.begin(), rows.end());
    SubjectDataset d;
    d.subject_id = subject.subject_id;
    d.role = subject.role;
    d.identity = subject.identity;
    for (int r : rows) d.labels.push_back(subject.labels[static_cast<std::size_t>(r)]);
    if (rows.empty()) {
      d.visual = Tensor::zeros({0, subject.visual.cols()});
      d.physio = Tensor::zeros({0, subject.physio.cols()});
    } else {
      d.visual = take_rows(subject.visual, rows);
      d.physio = take_rows(subject.physio, rows);
    }
    return d;
  };
  return {make(picked[0]), make(picked[1]), make(picked[2])};
}

}  // namespace msda
