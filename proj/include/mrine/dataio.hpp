// Dataset bundles, run configuration, checkpoints and fold splits.
//
// A bundle is a directory:
//   manifest.json   name, channel counts, trial lengths, seeds
//   spikes.csv      sum(T) x n_s      mask_s.csv  sum(T) x 1
//   gaussian.csv    sum(T) x n_y      mask_y.csv  sum(T) x 1
//   behavior.csv    sum(T) x behavior_dim
// Trials are stored back to back in manifest order. Floats use 17
// significant digits; NaN may appear only at masked rows.
#pragma once

#include <unistd.h>

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "mrine/evalkit.hpp"
#include "mrine/lorenz.hpp"
#include "mrine/trainer.hpp"

namespace mrine::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr int kBundleSchema = 1;
inline constexpr int kCheckpointSchema = 1;
inline constexpr const char* kCodeVersion = "mrine 0.1.0";

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Bundle

struct TrialInfo {
  std::string id;
  std::size_t T = 0;
};

struct DatasetBundle {
  std::string name;
  std::size_t n_s = 0, n_y = 0, behavior_dim = 0;
  double base_step_ms = 0;
  std::size_t timescale_ratio_y = 1;
  json seeds = json::object();
  std::vector<TrialInfo> trials;
  std::vector<double> spikes, gaussian, behavior;  // row-major, sum(T) rows
  std::vector<std::uint8_t> mask_s, mask_y;

  std::size_t total_rows() const {
    std::size_t n = 0;
    for (const auto& t : trials) n += t.T;
    return n;
  }
  std::size_t offset(std::size_t trial) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < trial; ++i) n += trials.at(i).T;
    return n;
  }
  void validate() const;
};

inline void DatasetBundle::validate() const {
  if (trials.empty()) throw DataError("bundle: manifest lists no trials");
  if (n_s == 0 && n_y == 0) throw DataError("bundle: no channels");
  for (const auto& t : trials)
    if (t.T == 0) throw DataError("bundle: trial '" + t.id + "' is empty");
  const std::size_t rows = total_rows();
  auto check_rows = [&](std::size_t got, std::size_t width, const char* what) {
    if (got != rows * width) {
      throw DataError(std::string("bundle: ") + what + " has " + std::to_string(width ? got / width : got) + " rows, manifest implies " +
                      std::to_string(rows));
    }
  };
  check_rows(spikes.size(), n_s, "spikes");
  check_rows(gaussian.size(), n_y, "gaussian");
  check_rows(behavior.size(), behavior_dim, "behavior");
  check_rows(mask_s.size(), 1, "mask_s");
  check_rows(mask_y.size(), 1, "mask_y");
  for (auto* m : {&mask_s, &mask_y})
    for (auto v : *m)
      if (v > 1) throw DataError("bundle: mask values must be 0 or 1");
  auto check_finite = [&](const std::vector<double>& v, std::size_t width, const std::vector<std::uint8_t>* mask,
                          const char* what) {
    for (std::size_t r = 0; r < rows; ++r) {
      if (mask && !(*mask)[r]) continue;
      for (std::size_t j = 0; j < width; ++j)
        if (!std::isfinite(v[r * width + j])) {
          throw DataError(std::string("bundle: non-finite ") + what + " value at observed row " + std::to_string(r));
        }
    }
  };
  check_finite(spikes, n_s, &mask_s, "spikes");
  check_finite(gaussian, n_y, &mask_y, "gaussian");
  check_finite(behavior, behavior_dim, nullptr, "behavior");
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask_s[r]) continue;
    for (std::size_t j = 0; j < n_s; ++j) {
      const double v = spikes[r * n_s + j];
      if (v < 0 || v != std::floor(v)) throw DataError("bundle: spike counts must be nonnegative integers (row " + std::to_string(r) + ")");
    }
  }
}

namespace detail {

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Zero-width tables are not written.
inline void write_table(const fs::path& path, const std::string& prefix, const std::vector<double>& v, std::size_t width,
                        std::size_t rows) {
  if (width == 0) return;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t j = 0; j < width; ++j) out << (j ? "," : "") << prefix << j;
  out << '\n';
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < width; ++j) out << (j ? "," : "") << format_double(v[r * width + j]);
    out << '\n';
  }
  if (!out) throw DataError("write failed: " + path.string());
}

// A zero-width table reads as empty with the expected row count.
inline std::vector<double> read_table(const fs::path& path, std::size_t width, std::size_t& rows_out, std::size_t expected_rows) {
  if (width == 0) {
    rows_out = expected_rows;
    return {};
  }
  std::ifstream in(path);
  if (!in) throw DataError("missing file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  std::size_t header_cols = line.empty() ? 0 : static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (header_cols != width) {
    throw DataError(path.string() + ": header has " + std::to_string(header_cols) + " columns, expected " + std::to_string(width));
  }
  std::vector<double> v;
  rows_out = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t cols = 0, pos = 0;
    while (true) {
      const std::size_t next = line.find(',', pos);
      const std::string cell = line.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
      char* end = nullptr;
      const double d = std::strtod(cell.c_str(), &end);
      if (cell.empty() || end != cell.c_str() + cell.size()) {
        throw DataError(path.string() + ": bad number '" + cell + "' on data row " + std::to_string(rows_out));
      }
      v.push_back(d);
      ++cols;
      if (next == std::string::npos) break;
      pos = next + 1;
    }
    if (cols != width) throw DataError(path.string() + ": row " + std::to_string(rows_out) + " has " + std::to_string(cols) + " columns");
    ++rows_out;
  }
  return v;
}

inline std::vector<std::uint8_t> to_mask(const std::vector<double>& v, const fs::path& path) {
  std::vector<std::uint8_t> m;
  m.reserve(v.size());
  for (double d : v) {
    if (d != 0.0 && d != 1.0) throw DataError(path.string() + ": mask values must be 0 or 1");
    m.push_back(d == 1.0 ? 1 : 0);
  }
  return m;
}

inline fs::path sibling(const fs::path& dir, const std::string& tag) {
  fs::path clean = dir;
  if (!clean.has_filename()) clean = clean.parent_path();
  return clean.parent_path() / (clean.filename().string() + tag + std::to_string(::getpid()));
}

// Writes via a temporary directory, then swaps it into place.
template <class Fn>
void atomic_directory_write(const fs::path& dir, Fn&& fill) {
  const fs::path tmp = sibling(dir, ".tmp."), old = sibling(dir, ".old.");
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  try {
    fill(tmp);
  } catch (...) {
    fs::remove_all(tmp);
    throw;
  }
  if (fs::exists(dir)) fs::rename(dir, old);
  fs::rename(tmp, dir);
  fs::remove_all(old);
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("write failed: " + path.string());
  }
  fs::rename(tmp, path);
}

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace detail

// `run_record`, when given, is stored alongside as run.json.
inline void write_bundle(const DatasetBundle& b, const fs::path& dir, const json& run_record = nullptr) {
  b.validate();
  detail::atomic_directory_write(dir, [&](const fs::path& tmp) {
    json m;
    m["schema_version"] = kBundleSchema;
    m["name"] = b.name;
    m["n_s"] = b.n_s;
    m["n_y"] = b.n_y;
    m["behavior_dim"] = b.behavior_dim;
    m["base_step_ms"] = b.base_step_ms;
    m["timescale_ratio_y"] = b.timescale_ratio_y;
    m["seeds"] = b.seeds;
    m["trials"] = json::array();
    for (const auto& t : b.trials) m["trials"].push_back({{"id", t.id}, {"T", t.T}});
    std::ofstream(tmp / "manifest.json") << m.dump(2) << '\n';
    if (!run_record.is_null()) std::ofstream(tmp / "run.json") << run_record.dump(2) << '\n';
    const std::size_t rows = b.total_rows();
    std::vector<double> ms(b.mask_s.begin(), b.mask_s.end()), my(b.mask_y.begin(), b.mask_y.end());
    detail::write_table(tmp / "spikes.csv", "s", b.spikes, b.n_s, rows);
    detail::write_table(tmp / "gaussian.csv", "y", b.gaussian, b.n_y, rows);
    detail::write_table(tmp / "mask_s.csv", "mask_s", ms, 1, rows);
    detail::write_table(tmp / "mask_y.csv", "mask_y", my, 1, rows);
    detail::write_table(tmp / "behavior.csv", "z", b.behavior, b.behavior_dim, rows);
  });
}

inline DatasetBundle read_bundle(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("bundle directory not found: " + dir.string());
  const json m = detail::read_json_file(dir / "manifest.json");
  static const std::set<std::string> known{"schema_version", "name", "n_s", "n_y", "behavior_dim", "base_step_ms",
                                           "timescale_ratio_y", "seeds", "trials"};
  for (auto it = m.begin(); it != m.end(); ++it)
    if (!known.count(it.key())) throw DataError("manifest: unknown key '" + it.key() + "'");
  DatasetBundle b;
  try {
    if (m.at("schema_version").get<int>() != kBundleSchema) throw DataError("manifest: unsupported schema_version");
    b.name = m.at("name").get<std::string>();
    b.n_s = m.at("n_s").get<std::size_t>();
    b.n_y = m.at("n_y").get<std::size_t>();
    b.behavior_dim = m.at("behavior_dim").get<std::size_t>();
    b.base_step_ms = m.at("base_step_ms").get<double>();
    b.timescale_ratio_y = m.at("timescale_ratio_y").get<std::size_t>();
    b.seeds = m.value("seeds", json::object());
    for (const auto& t : m.at("trials")) b.trials.push_back({t.at("id").get<std::string>(), t.at("T").get<std::size_t>()});
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  if (b.trials.empty()) throw DataError("manifest lists no trials");
  std::size_t rows = 0;
  const std::size_t want = b.total_rows();
  b.spikes = detail::read_table(dir / "spikes.csv", b.n_s, rows, want);
  auto check = [&](std::size_t r, const char* what) {
    if (r != b.total_rows()) {
      throw DataError(std::string(what) + ": " + std::to_string(r) + " rows, manifest implies " + std::to_string(b.total_rows()));
    }
  };
  check(rows, "spikes.csv");
  b.gaussian = detail::read_table(dir / "gaussian.csv", b.n_y, rows, want);
  check(rows, "gaussian.csv");
  b.mask_s = detail::to_mask(detail::read_table(dir / "mask_s.csv", 1, rows, want), dir / "mask_s.csv");
  check(rows, "mask_s.csv");
  b.mask_y = detail::to_mask(detail::read_table(dir / "mask_y.csv", 1, rows, want), dir / "mask_y.csv");
  check(rows, "mask_y.csv");
  b.behavior = detail::read_table(dir / "behavior.csv", b.behavior_dim, rows, want);
  check(rows, "behavior.csv");
  b.validate();
  return b;
}

inline std::vector<Trial> to_trials(const DatasetBundle& b) {
  std::vector<Trial> out;
  std::size_t row = 0;
  for (const auto& info : b.trials) {
    Trial t;
    auto slice = [&](const std::vector<double>& v, std::size_t w) {
      return Tensor::constant(Shape{info.T, w}, std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(row * w),
                                                                    v.begin() + static_cast<std::ptrdiff_t>((row + info.T) * w)));
    };
    t.s = {slice(b.spikes, b.n_s), {b.mask_s.begin() + static_cast<std::ptrdiff_t>(row), b.mask_s.begin() + static_cast<std::ptrdiff_t>(row + info.T)}};
    t.y = {slice(b.gaussian, b.n_y), {b.mask_y.begin() + static_cast<std::ptrdiff_t>(row), b.mask_y.begin() + static_cast<std::ptrdiff_t>(row + info.T)}};
    out.push_back(std::move(t));
    row += info.T;
  }
  return out;
}

inline std::vector<eval::Matrix> behavior_trials(const DatasetBundle& b) {
  if (b.behavior_dim == 0) throw DataError("bundle has no behavior columns");
  std::vector<eval::Matrix> out;
  std::size_t row = 0;
  for (const auto& info : b.trials) {
    out.push_back(eval::to_matrix(std::span<const double>(b.behavior).subspan(row * b.behavior_dim, info.T * b.behavior_dim),
                                  b.behavior_dim));
    row += info.T;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Folds

struct FoldSpec {
  std::size_t k = 1, n = 1;  // 1-based fold index out of n

  static FoldSpec parse(const std::string& text) {
    const auto slash = text.find('/');
    FoldSpec f{0, 0};
    try {
      std::size_t p1 = 0, p2 = 0;
      if (slash != std::string::npos) {
        f.k = std::stoul(text.substr(0, slash), &p1);
        f.n = std::stoul(text.substr(slash + 1), &p2);
      }
      if (slash == std::string::npos || p1 != slash || p2 != text.size() - slash - 1) f = {0, 0};
    } catch (const std::exception&) {
      f = {0, 0};
    }
    if (f.n < 2 || f.k < 1 || f.k > f.n) throw std::invalid_argument("fold must be k/N with 1 <= k <= N and N >= 2, got '" + text + "'");
    return f;
  }
  std::string str() const { return std::to_string(k) + "/" + std::to_string(n); }
};

struct FoldSplit {
  std::vector<std::size_t> train, test;
};

// Contiguous blocks: fold k tests trials [floor((k-1) n / N), floor(k n / N)).
inline FoldSplit fold_split(std::size_t n_trials, FoldSpec f) {
  if (f.n < 2 || f.k < 1 || f.k > f.n) throw std::invalid_argument("invalid fold");
  if (n_trials < f.n) throw std::invalid_argument("fewer trials than folds");
  const std::size_t lo = (f.k - 1) * n_trials / f.n, hi = f.k * n_trials / f.n;
  FoldSplit s;
  for (std::size_t i = 0; i < n_trials; ++i) (i >= lo && i < hi ? s.test : s.train).push_back(i);
  return s;
}

template <class T>
std::vector<T> select(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v.at(i));
  return out;
}

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
  ModelConfig model;  // n_s and n_y come from the data
  TrainConfig train;
  std::optional<double> fixed_tau;
  json canonical;
};

namespace detail {

inline json mlp_json(std::size_t layers, std::size_t width) { return json::array({layers, width}); }

// Every accepted key with its default.
inline json default_config() {
  const ModelConfig m;
  const TrainConfig t;
  return json{{"preset", nullptr},
              {"phi_s", mlp_json(m.enc_s.hidden_layers, m.enc_s.width)},
              {"phi_y", mlp_json(m.enc_y.hidden_layers, m.enc_y.width)},
              {"phi_m", mlp_json(m.fusion.hidden_layers, m.fusion.width)},
              {"theta_s", mlp_json(m.dec_s.hidden_layers, m.dec_s.width)},
              {"theta_y", mlp_json(m.dec_y.hidden_layers, m.dec_y.width)},
              {"n_a", m.n_a},
              {"n_x", m.n_x},
              {"K", t.loss.K},
              {"rho_t", t.rho_t},
              {"rho_d", t.rho_d},
              {"GC", t.clip_norm},
              {"gamma_s", t.loss.gamma_s},
              {"gamma_y", t.loss.gamma_y},
              {"gamma_x", t.loss.gamma_x},
              {"gamma_r", t.loss.gamma_r},
              {"TE", t.epochs},
              {"single_scale", "off"},
              {"obs_model_s", "poisson"},
              {"zero_impute", false},
              {"learn_initial_state", false},
              {"enable_L_smooth", true},
              {"enable_sm_s", true},
              {"enable_sm_y", true},
              {"enable_sm_x", true},
              {"x_smooth_dims", nullptr},
              {"batch_size", t.batch_size},
              {"lr_min", t.lr_min},
              {"lr_max", t.lr_max},
              {"lr_warm_epochs", t.lr_warm_epochs},
              {"lr_decay", t.lr_decay},
              {"tau", nullptr},
              {"seed", t.seed}};
}

// Hyperparameter rows by preset and topology.
inline json preset_row(const std::string& preset, const std::string& single_scale) {
  struct Row {
    std::size_t n, te;
    double rho_d;
    double ms[4], sp[4], sg[4];  // gamma_s, gamma_y, gamma_x, gamma_r per topology
  };
  static const std::map<std::string, Row> rows{
      {"lorenz", {32, 200, 0.4, {250, 10, 30, 1e-3}, {100, 0, 30, 1e-4}, {0, 50, 30, 1e-4}}},
      {"grid-same", {64, 500, 0.1, {250, 10, 30, 1e-3}, {100, 0, 30, 1e-4}, {0, 10, 30, 1e-4}}},
      {"grid-diff", {64, 500, 0.1, {250, 5, 30, 1e-3}, {100, 0, 30, 1e-4}, {0, 5, 30, 1e-4}}},
      {"center-out", {64, 200, 0.1, {50, 5, 30, 1e-3}, {30, 0, 30, 1e-4}, {0, 5, 30, 1e-4}}},
  };
  auto it = rows.find(preset);
  if (it == rows.end()) throw std::invalid_argument("unknown preset '" + preset + "' (lorenz, grid-same, grid-diff, center-out)");
  const Row& r = it->second;
  const double* g = single_scale == "poisson" ? r.sp : single_scale == "gaussian" ? r.sg : r.ms;
  json out{{"phi_s", mlp_json(3, 128)}, {"phi_y", mlp_json(3, 128)}, {"phi_m", mlp_json(1, 128)},
           {"theta_s", mlp_json(3, 128)}, {"theta_y", mlp_json(3, 128)}, {"n_a", r.n}, {"n_x", r.n},
           {"K", {1, 2, 3, 4}}, {"rho_t", 0.3}, {"rho_d", r.rho_d}, {"GC", 0.1},
           {"gamma_s", g[0]}, {"gamma_y", g[1]}, {"gamma_x", g[2]}, {"gamma_r", g[3]}, {"TE", r.te}};
  if (single_scale == "poisson") out["phi_y"] = out["theta_y"] = out["phi_m"] = nullptr;
  if (single_scale == "gaussian") out["phi_s"] = out["theta_s"] = out["phi_m"] = nullptr;
  return out;
}

inline MlpSpec mlp_from(const json& j, const char* key) {
  if (j.is_null()) return {};
  if (!j.is_array() || j.size() != 2) throw std::invalid_argument(std::string(key) + " must be [hidden_layers, width]");
  const auto layers = j[0].get<std::size_t>(), width = j[1].get<std::size_t>();
  if (width == 0) throw std::invalid_argument(std::string(key) + ": width must be positive");
  return {layers, width};
}

}  // namespace detail

// Defaults, then the preset row, then the explicit keys. Unknown keys are
// rejected. The result lists every key; nlohmann objects keep keys sorted.
inline json canonicalize_config(const json& in) {
  if (!in.is_object()) throw std::invalid_argument("config must be a JSON object");
  json out = detail::default_config();
  for (auto it = in.begin(); it != in.end(); ++it)
    if (!out.contains(it.key())) throw std::invalid_argument("unknown config key '" + it.key() + "'");
  const std::string ss = in.value("single_scale", std::string("off"));
  if (ss != "off" && ss != "poisson" && ss != "gaussian") throw std::invalid_argument("single_scale must be off, poisson or gaussian");
  if (in.contains("preset") && !in["preset"].is_null()) out.update(detail::preset_row(in["preset"].get<std::string>(), ss));
  out.update(in);
  return out;
}

inline RunConfig parse_run_config(const json& in) {
  RunConfig rc;
  rc.canonical = canonicalize_config(in);
  const json& c = rc.canonical;
  try {
    auto& m = rc.model;
    const std::string ss = c["single_scale"].get<std::string>();
    m.topology = ss == "poisson" ? Topology::single_poisson : ss == "gaussian" ? Topology::single_gaussian : Topology::multiscale;
    const std::string obs = c["obs_model_s"].get<std::string>();
    if (obs != "poisson" && obs != "gaussian") throw std::invalid_argument("obs_model_s must be poisson or gaussian");
    m.obs_model_s = obs == "poisson" ? ObsModel::poisson : ObsModel::gaussian;
    m.enc_s = detail::mlp_from(c["phi_s"], "phi_s");
    m.enc_y = detail::mlp_from(c["phi_y"], "phi_y");
    m.fusion = detail::mlp_from(c["phi_m"], "phi_m");
    m.dec_s = detail::mlp_from(c["theta_s"], "theta_s");
    m.dec_y = detail::mlp_from(c["theta_y"], "theta_y");
    auto need = [&](const char* key, bool used) {
      if (used && c[key].is_null()) throw std::invalid_argument(std::string(key) + " is required for this topology");
    };
    need("phi_s", m.uses_s());
    need("theta_s", m.uses_s());
    need("phi_y", m.uses_y());
    need("theta_y", m.uses_y());
    need("phi_m", m.topology == Topology::multiscale);
    m.n_a = c["n_a"].get<std::size_t>();
    m.n_x = c["n_x"].get<std::size_t>();
    m.zero_impute = c["zero_impute"].get<bool>();
    m.learn_initial_state = c["learn_initial_state"].get<bool>();
    if (m.zero_impute && m.topology != Topology::multiscale) throw std::invalid_argument("zero_impute requires single_scale = off");

    auto& t = rc.train;
    t.epochs = c["TE"].get<std::size_t>();
    t.batch_size = c["batch_size"].get<std::size_t>();
    t.lr_min = c["lr_min"].get<double>();
    t.lr_max = c["lr_max"].get<double>();
    t.lr_warm_epochs = c["lr_warm_epochs"].get<std::size_t>();
    t.lr_decay = c["lr_decay"].get<double>();
    t.clip_norm = c["GC"].get<double>();
    t.rho_t = c["rho_t"].get<double>();
    t.rho_d = c["rho_d"].get<double>();
    t.seed = c["seed"].get<std::uint64_t>();
    t.loss.K = c["K"].get<std::vector<std::size_t>>();
    t.loss.gamma_s = c["gamma_s"].get<double>();
    t.loss.gamma_y = c["gamma_y"].get<double>();
    t.loss.gamma_x = c["gamma_x"].get<double>();
    t.loss.gamma_r = c["gamma_r"].get<double>();
    t.loss.enable_L_smooth = c["enable_L_smooth"].get<bool>();
    t.loss.enable_sm_s = c["enable_sm_s"].get<bool>();
    t.loss.enable_sm_y = c["enable_sm_y"].get<bool>();
    t.loss.enable_sm_x = c["enable_sm_x"].get<bool>();
    if (!c["x_smooth_dims"].is_null()) t.loss.x_smooth_dims = c["x_smooth_dims"].get<std::size_t>();
    if (!c["tau"].is_null()) {
      rc.fixed_tau = c["tau"].get<double>();
      t.auto_tau = false;
      t.loss.tau = *rc.fixed_tau;
    }
    t.validate();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  return rc;
}

// 64-bit FNV-1a, hex.
inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

inline std::string config_hash(const json& canonical) { return fnv1a_hex(canonical.dump()); }

inline json repro_record(std::uint64_t seed, const json& canonical, const std::string& command) {
  return {{"seed", seed}, {"config_hash", config_hash(canonical)}, {"code_version", kCodeVersion}, {"command", command}};
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  RunConfig config;
  MrineModel model;
  double tau = 1.0;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  std::optional<std::string> fold;
};

inline json checkpoint_json(const Checkpoint& ck) {
  json j;
  j["schema_version"] = kCheckpointSchema;
  j["config"] = ck.config.canonical;
  j["data_dims"] = {{"n_s", ck.model.config.n_s}, {"n_y", ck.model.config.n_y}};
  j["tau"] = ck.tau;
  j["seed"] = ck.seed;
  j["epochs"] = ck.epochs;
  j["fold"] = ck.fold ? json(*ck.fold) : json(nullptr);
  j["code_version"] = kCodeVersion;
  json tensors = json::object();
  for (const auto& [name, t] : ck.model.named_tensors())
    tensors[name] = {{"shape", t.shape().dims()}, {"values", std::vector<double>(t.values().begin(), t.values().end())}};
  j["tensors"] = tensors;
  return j;
}

inline void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  detail::write_text_atomic(path, checkpoint_json(ck).dump() + "\n");
}

inline Checkpoint checkpoint_from_json(const json& j) {
  Checkpoint ck;
  try {
    if (j.at("schema_version").get<int>() != kCheckpointSchema) throw DataError("checkpoint: unsupported schema_version");
    ck.config = parse_run_config(j.at("config"));
    ModelConfig mc = ck.config.model;
    mc.n_s = j.at("data_dims").at("n_s").get<std::size_t>();
    mc.n_y = j.at("data_dims").at("n_y").get<std::size_t>();
    ck.model = MrineModel(mc);
    ck.tau = j.at("tau").get<double>();
    ck.seed = j.at("seed").get<std::uint64_t>();
    ck.epochs = j.at("epochs").get<std::size_t>();
    if (!j.at("fold").is_null()) ck.fold = j.at("fold").get<std::string>();
    const json& tensors = j.at("tensors");
    std::set<std::string> seen;
    for (auto& [name, t] : ck.model.named_tensors()) {
      if (!tensors.contains(name)) throw DataError("checkpoint: missing tensor " + name);
      const auto shape = tensors[name].at("shape").get<std::vector<std::size_t>>();
      const auto values = tensors[name].at("values").get<std::vector<double>>();
      if (shape != t.shape().dims() || values.size() != t.numel()) throw DataError("checkpoint: shape mismatch for " + name);
      std::copy(values.begin(), values.end(), t.mutable_values().begin());
      seen.insert(name);
    }
    for (auto it = tensors.begin(); it != tensors.end(); ++it)
      if (!seen.count(it.key())) throw DataError("checkpoint: unexpected tensor " + it.key());
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  return ck;
}

inline Checkpoint load_checkpoint(const fs::path& path) { return checkpoint_from_json(detail::read_json_file(path)); }

// Rejects data whose channel counts do not match a model.
inline void check_compatible(const MrineModel& model, const DatasetBundle& b) {
  const auto& c = model.config;
  if ((c.uses_s() && c.n_s != b.n_s) || (c.uses_y() && c.n_y != b.n_y)) {
    throw DataError("data has n_s=" + std::to_string(b.n_s) + ", n_y=" + std::to_string(b.n_y) + " but the checkpoint expects n_s=" +
                    std::to_string(c.n_s) + ", n_y=" + std::to_string(c.n_y));
  }
}

// ---------------------------------------------------------------------------
// Lorenz simulation config and export

struct LorenzRun {
  std::string name = "lorenz";
  lorenz::LorenzConfig lorenz;
  lorenz::ObsConfig obs;
  std::size_t timescale_ratio = 1;
};

inline LorenzRun parse_lorenz_config(const json& in) {
  static const std::set<std::string> known{"name", "n_trials", "trial_len", "burn_in", "dt", "sigma", "rho", "beta",
                                           "dyn_noise_var", "sqrt_dt_noise", "n_s", "n_y", "gauss_noise_var",
                                           "base_rate_hz", "bin_ms", "mixing_std", "latent_seed", "obs_seed",
                                           "timescale_ratio"};
  if (!in.is_object()) throw std::invalid_argument("simulation config must be a JSON object");
  for (auto it = in.begin(); it != in.end(); ++it)
    if (!known.count(it.key())) throw std::invalid_argument("unknown simulation key '" + it.key() + "'");
  LorenzRun r;
  try {
    auto& l = r.lorenz;
    auto& o = r.obs;
    r.name = in.value("name", r.name);
    l.n_trials = in.value("n_trials", l.n_trials);
    l.trial_len = in.value("trial_len", l.trial_len);
    l.burn_in = in.value("burn_in", l.burn_in);
    l.dt = in.value("dt", l.dt);
    l.sigma = in.value("sigma", l.sigma);
    l.rho = in.value("rho", l.rho);
    l.beta = in.value("beta", l.beta);
    l.dyn_noise_var = in.value("dyn_noise_var", l.dyn_noise_var);
    l.sqrt_dt_noise = in.value("sqrt_dt_noise", l.sqrt_dt_noise);
    l.seed = in.value("latent_seed", l.seed);
    o.n_s = in.value("n_s", o.n_s);
    o.n_y = in.value("n_y", o.n_y);
    o.gauss_noise_var = in.value("gauss_noise_var", o.gauss_noise_var);
    o.base_rate_hz = in.value("base_rate_hz", o.base_rate_hz);
    o.bin_s = in.value("bin_ms", o.bin_s * 1000.0) / 1000.0;
    o.mixing_std = in.value("mixing_std", o.mixing_std);
    o.seed = in.value("obs_seed", o.seed);
    r.timescale_ratio = in.value("timescale_ratio", r.timescale_ratio);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("simulation config: ") + e.what());
  }
  if (r.timescale_ratio == 0) throw std::invalid_argument("timescale_ratio must be positive");
  if (r.obs.n_s == 0 || r.obs.n_y == 0) throw std::invalid_argument("channel counts must be positive");
  return r;
}

// Poisson stream observed at every step; Gaussian rows observed where
// t % ratio == 0 and stored as NaN elsewhere; true latents as behavior.
inline DatasetBundle lorenz_bundle(const lorenz::SimBundle& sim, std::size_t ratio, const std::string& name = "lorenz") {
  if (ratio == 0) throw std::invalid_argument("timescale ratio must be positive");
  DatasetBundle b;
  b.name = name;
  b.n_s = sim.obs.n_s;
  b.n_y = sim.obs.n_y;
  b.behavior_dim = 3;
  b.base_step_ms = sim.obs.bin_s * 1000.0;
  b.timescale_ratio_y = ratio;
  b.seeds = {{"latent_seed", sim.lorenz.seed}, {"obs_seed", sim.obs.seed}};
  const std::size_t T = sim.lorenz.trial_len;
  for (std::size_t i = 0; i < sim.latents.trials.size(); ++i) {
    b.trials.push_back({"trial" + std::to_string(i), T});
    b.spikes.insert(b.spikes.end(), sim.s[i].begin(), sim.s[i].end());
    b.behavior.insert(b.behavior.end(), sim.latents.trials[i].begin(), sim.latents.trials[i].end());
    for (std::size_t t = 0; t < T; ++t) {
      const bool obs = t % ratio == 0;
      b.mask_s.push_back(1);
      b.mask_y.push_back(obs ? 1 : 0);
      for (std::size_t j = 0; j < b.n_y; ++j) b.gaussian.push_back(obs ? sim.y[i][t * b.n_y + j] : std::nan(""));
    }
  }
  return b;
}

inline void export_bundle(const lorenz::SimBundle& sim, std::size_t ratio, const fs::path& dir, const std::string& name = "lorenz",
                          const json& run_record = nullptr) {
  write_bundle(lorenz_bundle(sim, ratio, name), dir, run_record);
}

}  // namespace mrine::io
