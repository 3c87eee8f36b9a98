// mrine: simulate, train, infer, decode, eval-recon, sweep.
//
// Exit codes: 0 success, 2 usage error, 1 any other failure. Failures print
// one JSON object {"error", "message"} on stderr.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "mrine/mrine.hpp"

using namespace mrine;
using io::json;
namespace fs = std::filesystem;

namespace {

std::string g_command;

json run_record(std::uint64_t seed, const json& config) { return io::repro_record(seed, config, g_command); }

// Sidecar reproducibility record for single-file outputs.
void write_run_record(const fs::path& out, const json& record) {
  io::detail::write_text_atomic(out.string() + ".run.json", record.dump(2) + "\n");
}

json read_json(const std::string& path) { return io::detail::read_json_file(path); }

io::DatasetBundle load_data(const std::string& dir) { return io::read_bundle(dir); }

// Trials of the bundle restricted to the fold's test block, or all of them.
std::vector<std::size_t> eval_indices(std::size_t n, const std::string& fold) {
  if (fold.empty()) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  return io::fold_split(n, io::FoldSpec::parse(fold)).test;
}

// ---------------------------------------------------------------------------

int cmd_simulate(const std::string& config_path, const std::string& out) {
  const json cfg = read_json(config_path);
  const auto run = io::parse_lorenz_config(cfg);
  const auto sim = lorenz::simulate(run.lorenz, run.obs);
  json rec = run_record(run.lorenz.seed, cfg);
  rec["obs_seed"] = run.obs.seed;
  rec["latent_max_abs_raw"] = sim.latents.max_abs_raw;
  io::export_bundle(sim, run.timescale_ratio, out, run.name, rec);
  std::cout << json{{"out", out}, {"trials", run.lorenz.n_trials}}.dump() << "\n";
  return 0;
}

json epoch_json(const EpochRecord& r) {
  json j{{"epoch", r.epoch}, {"lr", r.lr},     {"L_k", r.L_k},     {"L_smooth", r.L_smooth}, {"L_sm", r.L_sm},
         {"L_l2", r.L_l2},   {"total", r.total}, {"grad_norm", r.grad_norm}};
  j["val_total"] = r.val_total ? json(*r.val_total) : json(nullptr);
  return j;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& fold, const std::string& out,
              const std::string& log_path, bool val_on_test) {
  const auto rc = io::parse_run_config(read_json(config_path));
  const auto data = load_data(data_dir);
  const auto trials = io::to_trials(data);
  const auto split = io::fold_split(trials.size(), io::FoldSpec::parse(fold));
  const auto train_set = io::select(trials, split.train), test_set = io::select(trials, split.test);

  ModelConfig mc = rc.model;
  mc.n_s = data.n_s;
  mc.n_y = data.n_y;
  MrineModel model = init_params(mc, rc.train.seed);

  const json rec = run_record(rc.train.seed, rc.canonical);
  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path);
    if (!log) throw io::DataError("cannot write " + log_path);
    log << json{{"run", rec}}.dump() << "\n";
  }
  auto on_epoch = [&](const EpochRecord& r) {
    if (log) log << epoch_json(r).dump() << "\n" << std::flush;
  };
  const TrainResult result = train(model, train_set, rc.train, val_on_test ? &test_set : nullptr, on_epoch);

  io::Checkpoint ck{rc, model, result.tau, rc.train.seed, result.epochs_completed, io::FoldSpec::parse(fold).str()};
  io::save_checkpoint(ck, out);
  write_run_record(out, rec);
  std::cout << json{{"out", out}, {"epochs", result.epochs_completed}, {"tau", result.tau},
                    {"final_total", result.log.back().total}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& data_dir, const std::string& mode_text, double drop_s, double drop_y,
              std::uint64_t seed, const std::string& out) {
  const auto ck = io::load_checkpoint(ckpt_path);
  const auto data = load_data(data_dir);
  io::check_compatible(ck.model, data);
  const auto mode = InferMode::parse(mode_text);
  const auto trials = io::to_trials(data);
  const auto inferred = eval::infer_trials(ck.model, trials, mode, drop_s, drop_y, seed);

  const auto& c = ck.model.config;
  std::ostringstream csv;
  csv << "trial,t";
  for (std::size_t j = 0; j < c.n_x; ++j) csv << ",x" << j;
  if (c.uses_s())
    for (std::size_t j = 0; j < c.n_s; ++j) csv << ",s_hat" << j;
  if (c.uses_y())
    for (std::size_t j = 0; j < c.n_y; ++j) csv << ",y_hat" << j;
  csv << ",mask_s,mask_y\n";
  for (std::size_t i = 0; i < inferred.size(); ++i) {
    const auto& r = inferred[i];
    for (Eigen::Index row = 0; row < r.x.rows(); ++row) {
      const std::size_t t = static_cast<std::size_t>(row) + r.offset;
      csv << data.trials[i].id << ',' << t;
      for (Eigen::Index j = 0; j < r.x.cols(); ++j) csv << ',' << io::detail::format_double(r.x(row, j));
      if (c.uses_s())
        for (Eigen::Index j = 0; j < r.s_mean.cols(); ++j) csv << ',' << io::detail::format_double(r.s_mean(row, j));
      if (c.uses_y())
        for (Eigen::Index j = 0; j < r.y_mean.cols(); ++j) csv << ',' << io::detail::format_double(r.y_mean(row, j));
      csv << ',' << int(r.mask_s[t]) << ',' << int(r.mask_y[t]) << '\n';
    }
  }
  io::detail::write_text_atomic(out, csv.str());
  json rec = run_record(seed, ck.config.canonical);
  rec["mode"] = mode.str();
  rec["drop_s"] = drop_s;
  rec["drop_y"] = drop_y;
  write_run_record(out, rec);
  return 0;
}

// Reads the latent columns of an `infer` CSV, grouped by trial id.
std::map<std::string, std::vector<std::pair<std::size_t, std::vector<double>>>> read_latents(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io::DataError("missing file " + path);
  std::string line;
  if (!std::getline(in, line)) throw io::DataError(path + ": empty file");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 3 || header[0] != "trial" || header[1] != "t") throw io::DataError(path + ": not a latent CSV");
  std::vector<std::size_t> xcols;
  for (std::size_t j = 2; j < header.size(); ++j)
    if (header[j].size() > 1 && header[j][0] == 'x') xcols.push_back(j);
  if (xcols.empty()) throw io::DataError(path + ": no latent columns");
  std::map<std::string, std::vector<std::pair<std::size_t, std::vector<double>>>> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size()) throw io::DataError(path + ": ragged row");
    std::vector<double> x;
    for (auto j : xcols) x.push_back(std::stod(cells[j]));
    out[cells[0]].emplace_back(std::stoul(cells[1]), std::move(x));
  }
  return out;
}

int cmd_decode(const std::string& latents_path, const std::string& data_dir, std::size_t folds, const std::string& target,
               const std::string& align_text, const std::string& out) {
  if (target != "behavior") throw std::invalid_argument("only --target behavior is supported");
  const auto align = eval::Alignment::parse(align_text);
  const auto data = load_data(data_dir);
  const auto beh = io::behavior_trials(data);
  const auto lat = read_latents(latents_path);

  // Latents and targets at the steps present in the latent file, then aligned.
  std::vector<eval::Matrix> X, Y;
  for (std::size_t i = 0; i < data.trials.size(); ++i) {
    auto it = lat.find(data.trials[i].id);
    if (it == lat.end()) throw io::DataError("latent file has no rows for trial " + data.trials[i].id);
    const auto& rows = it->second;
    eval::Matrix x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().second.size()));
    eval::Matrix y(x.rows(), beh[i].cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].first >= data.trials[i].T) throw io::DataError("latent step beyond trial length in " + data.trials[i].id);
      for (Eigen::Index j = 0; j < x.cols(); ++j) x(static_cast<Eigen::Index>(r), j) = rows[r].second[static_cast<std::size_t>(j)];
      y.row(static_cast<Eigen::Index>(r)) = beh[i].row(static_cast<Eigen::Index>(rows[r].first));
    }
    X.push_back(eval::align_timescales(x, align));
    Y.push_back(eval::align_timescales(y, align));
  }

  json fold_scores = json::array();
  double cc = 0, r2 = 0, trial_cc = 0;
  for (std::size_t k = 1; k <= folds; ++k) {
    const auto split = io::fold_split(X.size(), {k, folds});
    const auto xtr = io::select(X, split.train), ytr = io::select(Y, split.train);
    const auto xte = io::select(X, split.test), yte = io::select(Y, split.test);
    const auto s = eval::behavior_decode_score(eval::vstack(xtr), eval::vstack(ytr), eval::vstack(xte), eval::vstack(yte));
    const auto per_trial = eval::latent_recon_score(xtr, ytr, xte, yte);
    fold_scores.push_back({{"fold", io::FoldSpec{k, folds}.str()}, {"cc", s.mean_cc}, {"r2", s.r2}, {"per_dim_cc", s.per_dim_cc},
                           {"per_trial_cc", per_trial.mean_cc}});
    cc += s.mean_cc;
    r2 += s.r2;
    trial_cc += per_trial.mean_cc;
  }
  const double n = static_cast<double>(folds);
  json result{{"target", target}, {"align", align_text}, {"folds", fold_scores}, {"mean_cc", cc / n}, {"mean_r2", r2 / n},
              {"mean_per_trial_cc", trial_cc / n}};
  result["run"] = run_record(0, json{{"latents", latents_path}, {"data", data_dir}});
  io::detail::write_text_atomic(out, result.dump(2) + "\n");
  std::cout << json{{"mean_cc", cc / n}, {"mean_r2", r2 / n}}.dump() << "\n";
  return 0;
}

json recon_json(const eval::ReconScore& r) {
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  return {{"s_score", num(r.s_auc)}, {"y_cc", num(r.y_cc)}, {"s_rows", r.s_rows}, {"y_rows", r.y_rows}};
}

int cmd_eval_recon(const std::string& ckpt_path, const std::string& data_dir, const std::string& mode_text, double drop_s,
                   double drop_y, std::uint64_t seed, const std::string& fold, const std::string& out) {
  const auto ck = io::load_checkpoint(ckpt_path);
  const auto data = load_data(data_dir);
  io::check_compatible(ck.model, data);
  const auto trials = io::select(io::to_trials(data), eval_indices(data.trials.size(), fold));
  const auto mode = InferMode::parse(mode_text);
  const auto inferred = eval::infer_trials(ck.model, trials, mode, drop_s, drop_y, seed);
  json result = recon_json(eval::neural_recon_score(ck.model, trials, inferred));
  result["s_metric"] = ck.model.config.obs_model_s == ObsModel::poisson ? "auc" : "cc";
  result["mode"] = mode.str();
  result["drop_s"] = drop_s;
  result["drop_y"] = drop_y;
  result["run"] = run_record(seed, ck.config.canonical);
  io::detail::write_text_atomic(out, result.dump(2) + "\n");
  std::cout << result.dump() << "\n";
  return 0;
}

// Grid: {"drop_s": [...], "drop_y": [...], "mode": "filter", "seed": 0,
// "fold": "1/5"} as a Cartesian product, or {"points": [[ps, py], ...], ...}.
int cmd_sweep(const std::string& ckpt_path, const std::string& data_dir, const std::string& grid_path, const std::string& out) {
  const json g = read_json(grid_path);
  static const std::set<std::string> known{"drop_s", "drop_y", "points", "mode", "seed", "fold"};
  for (auto it = g.begin(); it != g.end(); ++it)
    if (!known.count(it.key())) throw std::invalid_argument("unknown grid key '" + it.key() + "'");
  std::vector<std::pair<double, double>> grid;
  if (g.contains("points")) {
    for (const auto& p : g["points"]) grid.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
  } else {
    for (double ps : g.value("drop_s", std::vector<double>{0.0}))
      for (double py : g.value("drop_y", std::vector<double>{0.0})) grid.emplace_back(ps, py);
  }
  if (grid.empty()) throw std::invalid_argument("grid is empty");
  const auto mode = InferMode::parse(g.value("mode", std::string("filter")));
  const auto seed = g.value("seed", std::uint64_t{0});
  const auto fold = io::FoldSpec::parse(g.value("fold", std::string("1/5")));

  const auto ck = io::load_checkpoint(ckpt_path);
  const auto data = load_data(data_dir);
  io::check_compatible(ck.model, data);
  const auto trials = io::to_trials(data);
  const auto beh = io::behavior_trials(data);
  const auto split = io::fold_split(trials.size(), fold);
  const auto points = eval::robustness_sweep(ck.model, io::select(trials, split.train), io::select(beh, split.train),
                                             io::select(trials, split.test), io::select(beh, split.test), grid, seed, mode);
  std::ostringstream csv;
  csv << "drop_s,drop_y,latent_cc,s_score,y_cc\n";
  for (const auto& p : points) {
    csv << p.drop_s << ',' << p.drop_y << ',' << io::detail::format_double(p.latent_cc) << ','
        << io::detail::format_double(p.recon.s_auc) << ',' << io::detail::format_double(p.recon.y_cc) << '\n';
  }
  io::detail::write_text_atomic(out, csv.str());
  json rec = run_record(seed, ck.config.canonical);
  rec["grid"] = g;
  write_run_record(out, rec);
  return 0;
}

void print_error(const char* kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 0; i < argc; ++i) g_command += (i ? " " : "") + std::string(argv[i]);

  CLI::App app{"Multiscale latent-factor models for Poisson and Gaussian time series"};
  app.require_subcommand(1);

  std::string config, out, data, fold = "1/5", log, ckpt, mode = "filter", latents, target = "behavior", align = "none", grid;
  std::string eval_fold;
  double drop_s = 0, drop_y = 0;
  std::uint64_t seed = 0;
  std::size_t folds = 5;
  bool val_on_test = false;

  auto check_mode = CLI::Validator(
      [](std::string& s) {
        try {
          InferMode::parse(s);
        } catch (const std::exception& e) {
          return std::string(e.what());
        }
        return std::string();
      },
      "filter|smooth|predict:k");
  auto check_fold = CLI::Validator(
      [](std::string& s) {
        try {
          io::FoldSpec::parse(s);
        } catch (const std::exception& e) {
          return std::string(e.what());
        }
        return std::string();
      },
      "k/N");
  auto check_align = CLI::Validator(
      [](std::string& s) {
        try {
          eval::Alignment::parse(s);
        } catch (const std::exception& e) {
          return std::string(e.what());
        }
        return std::string();
      },
      "none|downsample:r|avg_pool:r");

  auto* sim = app.add_subcommand("simulate", "Simulate a dataset bundle");
  auto* sim_lorenz = sim->add_subcommand("lorenz", "Stochastic Lorenz latents with Poisson and Gaussian observations");
  sim->require_subcommand(1);
  sim_lorenz->add_option("--config", config, "Simulation config JSON")->required()->check(CLI::ExistingFile);
  sim_lorenz->add_option("--out", out, "Output bundle directory")->required();

  auto* tr = app.add_subcommand("train", "Train a model on one fold");
  tr->add_option("--config", config, "Run config JSON")->required()->check(CLI::ExistingFile);
  tr->add_option("--data", data, "Bundle directory")->required();
  tr->add_option("--fold", fold, "Held-out fold k/N")->check(check_fold);
  tr->add_option("--out", out, "Checkpoint path")->required();
  tr->add_option("--log", log, "Per-epoch JSON-lines log");
  tr->add_flag("--val-on-test", val_on_test, "Log the loss on the held-out fold each epoch");

  auto* inf = app.add_subcommand("infer", "Infer latents and predictions");
  inf->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  inf->add_option("--data", data)->required();
  inf->add_option("--mode", mode)->check(check_mode);
  inf->add_option("--drop-s", drop_s)->check(CLI::Range(0.0, 1.0));
  inf->add_option("--drop-y", drop_y)->check(CLI::Range(0.0, 1.0));
  inf->add_option("--seed", seed);
  inf->add_option("--out", out, "CSV path")->required();

  auto* dec = app.add_subcommand("decode", "Cross-validated linear readout of a target from inferred latents");
  dec->add_option("--latents", latents, "CSV written by infer")->required()->check(CLI::ExistingFile);
  dec->add_option("--data", data)->required();
  dec->add_option("--folds", folds)->check(CLI::Range(2, 1000));
  dec->add_option("--target", target);
  dec->add_option("--align", align)->check(check_align);
  dec->add_option("--out", out, "JSON path")->required();

  auto* rec = app.add_subcommand("eval-recon", "Neural reconstruction (AUC for Poisson, CC for Gaussian)");
  rec->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  rec->add_option("--data", data)->required();
  rec->add_option("--mode", mode)->check(check_mode);
  rec->add_option("--drop-s", drop_s)->check(CLI::Range(0.0, 1.0));
  rec->add_option("--drop-y", drop_y)->check(CLI::Range(0.0, 1.0));
  rec->add_option("--seed", seed);
  rec->add_option("--fold", eval_fold, "Score only this fold's test trials")->check(check_fold);
  rec->add_option("--out", out, "JSON path")->required();

  auto* sw = app.add_subcommand("sweep", "Latent reconstruction and neural reconstruction over a grid of drop rates");
  sw->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  sw->add_option("--data", data)->required();
  sw->add_option("--grid", grid, "Grid JSON")->required()->check(CLI::ExistingFile);
  sw->add_option("--out", out, "CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 2;
  }

  try {
    if (*sim_lorenz) return cmd_simulate(config, out);
    if (*tr) return cmd_train(config, data, fold, out, log, val_on_test);
    if (*inf) return cmd_infer(ckpt, data, mode, drop_s, drop_y, seed, out);
    if (*dec) return cmd_decode(latents, data, folds, target, align, out);
    if (*rec) return cmd_eval_recon(ckpt, data, mode, drop_s, drop_y, seed, eval_fold, out);
    if (*sw) return cmd_sweep(ckpt, data, grid, out);
  } catch (const std::invalid_argument& e) {
    print_error("invalid_argument", e.what());
    return 2;
  } catch (const io::DataError& e) {
    print_error("data", e.what());
    return 1;
  } catch (const TrainingDiverged& e) {
    print_error("training_diverged", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("runtime", e.what());
    return 1;
  }
  return 2;
}
