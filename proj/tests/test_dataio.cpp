#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "mrine/dataio.hpp"

using namespace mrine;
using namespace mrine::io;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mrine_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

lorenz::SimBundle small_sim(std::size_t n = 4, std::size_t T = 12) {
  lorenz::LorenzConfig lc;
  lc.n_trials = n;
  lc.trial_len = T;
  lc.seed = 2;
  lorenz::ObsConfig oc;
  oc.n_s = 3;
  oc.n_y = 5;
  oc.seed = 3;
  return lorenz::simulate(lc, oc);
}

bool same_or_both_nan(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

}  // namespace

TEST(Bundle, RoundTripIsExact) {
  auto b = lorenz_bundle(small_sim(), 3);
  const auto dir = scratch("roundtrip");
  write_bundle(b, dir);
  auto r = read_bundle(dir);
  EXPECT_EQ(r.name, b.name);
  EXPECT_EQ(r.n_s, 3u);
  EXPECT_EQ(r.n_y, 5u);
  EXPECT_EQ(r.timescale_ratio_y, 3u);
  ASSERT_EQ(r.trials.size(), 4u);
  EXPECT_EQ(r.mask_s, b.mask_s);
  EXPECT_EQ(r.mask_y, b.mask_y);
  EXPECT_EQ(r.spikes, b.spikes);
  EXPECT_EQ(r.behavior, b.behavior);
  ASSERT_EQ(r.gaussian.size(), b.gaussian.size());
  for (std::size_t i = 0; i < b.gaussian.size(); ++i) EXPECT_TRUE(same_or_both_nan(r.gaussian[i], b.gaussian[i]));
  // Overwriting an existing bundle replaces it whole.
  b.name = "second";
  write_bundle(b, dir);
  EXPECT_EQ(read_bundle(dir).name, "second");
  fs::remove_all(dir);
}

TEST(Bundle, SlowerStreamObservedEveryRthStep) {
  auto b = lorenz_bundle(small_sim(2, 12), 5);
  auto trials = to_trials(b);
  ASSERT_EQ(trials.size(), 2u);
  for (const auto& t : trials) {
    std::size_t observed = 0;
    for (std::size_t i = 0; i < 12; ++i) {
      EXPECT_EQ(t.y.mask[i], i % 5 == 0 ? 1 : 0);
      observed += t.y.mask[i];
      EXPECT_EQ(t.s.mask[i], 1);
    }
    EXPECT_EQ(observed, 3u);  // ceil(12 / 5)
  }
  EXPECT_TRUE(std::isnan(b.gaussian[1 * 5]));
}

TEST(Bundle, TrialsAndBehaviorSliceInOrder) {
  auto sim = small_sim(3, 7);
  auto b = lorenz_bundle(sim, 1);
  auto trials = to_trials(b);
  auto beh = behavior_trials(b);
  ASSERT_EQ(beh.size(), 3u);
  EXPECT_EQ(trials[2].s.values.at(4 * 3 + 1), sim.s[2][4 * 3 + 1]);
  EXPECT_EQ(trials[1].y.values.at(6 * 5 + 4), sim.y[1][6 * 5 + 4]);
  EXPECT_EQ(beh[2](5, 2), sim.latents.trials[2][5 * 3 + 2]);
}

TEST(Bundle, ValidationErrors) {
  const auto dir = scratch("invalid");
  auto b = lorenz_bundle(small_sim(), 2);
  write_bundle(b, dir);

  fs::remove(dir / "mask_y.csv");
  EXPECT_THROW(read_bundle(dir), DataError);
  write_bundle(b, dir);

  // NaN at an observed Gaussian row.
  auto bad = b;
  bad.gaussian[0] = std::nan("");
  EXPECT_THROW(bad.validate(), DataError);
  EXPECT_THROW(write_bundle(bad, dir), DataError);

  auto empty = b;
  empty.trials[1].T = 0;
  EXPECT_THROW(empty.validate(), DataError);

  auto short_rows = b;
  short_rows.trials[0].T += 1;
  EXPECT_THROW(short_rows.validate(), DataError);

  // A mask value other than 0 or 1 in the file.
  {
    std::ofstream out(dir / "mask_s.csv", std::ios::app);
    out << "2\n";
  }
  EXPECT_THROW(read_bundle(dir), DataError);

  EXPECT_THROW(read_bundle(dir / "absent"), DataError);
  fs::remove_all(dir);
}

TEST(Folds, ContiguousBlocks) {
  auto f = FoldSpec::parse("1/5");
  auto s = fold_split(750, f);
  EXPECT_EQ(s.train.size(), 600u);
  EXPECT_EQ(s.test.size(), 150u);
  EXPECT_EQ(s.test.front(), 0u);
  EXPECT_EQ(s.test.back(), 149u);
  auto s3 = fold_split(100, FoldSpec::parse("3/3"));
  EXPECT_EQ(s3.test.front(), 66u);
  EXPECT_EQ(s3.test.size(), 34u);
  // Every trial is tested exactly once across the folds.
  std::vector<int> hits(101, 0);
  for (std::size_t k = 1; k <= 7; ++k)
    for (auto i : fold_split(101, {k, 7}).test) ++hits[i];
  for (int h : hits) EXPECT_EQ(h, 1);
  for (const char* bad : {"0/5", "6/5", "1/1", "x/5", "1/", "15", "1/5x"}) EXPECT_THROW(FoldSpec::parse(bad), std::invalid_argument);
}

TEST(Config, PresetExpansion) {
  auto c = canonicalize_config({{"preset", "lorenz"}});
  EXPECT_EQ(c["n_a"], 32);
  EXPECT_EQ(c["n_x"], 32);
  EXPECT_EQ(c["TE"], 200);
  EXPECT_EQ(c["rho_d"], 0.4);
  EXPECT_EQ(c["rho_t"], 0.3);
  EXPECT_EQ(c["gamma_s"], 250.0);
  EXPECT_EQ(c["gamma_y"], 10.0);
  EXPECT_EQ(c["gamma_x"], 30.0);
  EXPECT_EQ(c["gamma_r"], 1e-3);
  EXPECT_EQ(c["phi_m"], json::array({1, 128}));
  EXPECT_EQ(c["K"], json::array({1, 2, 3, 4}));

  auto ssg = canonicalize_config({{"preset", "grid-diff"}, {"single_scale", "gaussian"}});
  EXPECT_EQ(ssg["gamma_y"], 5.0);
  EXPECT_EQ(ssg["gamma_r"], 1e-4);
  EXPECT_TRUE(ssg["phi_s"].is_null());
  EXPECT_EQ(ssg["n_a"], 64);

  auto co = canonicalize_config({{"preset", "center-out"}, {"gamma_s", 7.0}});
  EXPECT_EQ(co["gamma_s"], 7.0);  // explicit keys win over the preset
  EXPECT_EQ(co["gamma_y"], 5.0);

  auto ssp = parse_run_config({{"preset", "grid-same"}, {"single_scale", "poisson"}});
  EXPECT_EQ(ssp.model.topology, Topology::single_poisson);
  EXPECT_EQ(ssp.train.loss.gamma_s, 100.0);
  EXPECT_EQ(ssp.train.epochs, 500u);
}

TEST(Config, StrictKeysAndValues) {
  EXPECT_THROW(canonicalize_config({{"gamma_q", 1}}), std::invalid_argument);
  EXPECT_THROW(canonicalize_config({{"preset", "nope"}}), std::invalid_argument);
  EXPECT_THROW(parse_run_config({{"single_scale", "both"}}), std::invalid_argument);
  EXPECT_THROW(parse_run_config({{"rho_t", 1.5}}), std::invalid_argument);
  EXPECT_THROW(parse_run_config({{"n_a", "big"}}), std::invalid_argument);
  EXPECT_THROW(parse_run_config({{"zero_impute", true}, {"single_scale", "poisson"}, {"preset", "lorenz"}}),
               std::invalid_argument);
  auto fixed = parse_run_config({{"tau", 2.5}});
  EXPECT_FALSE(fixed.train.auto_tau);
  EXPECT_EQ(fixed.train.loss.tau, 2.5);
}

TEST(Config, HashDependsOnContentOnly) {
  auto a = canonicalize_config({{"preset", "lorenz"}, {"seed", 3}});
  auto b = canonicalize_config({{"seed", 3}, {"preset", "lorenz"}});
  auto c = canonicalize_config({{"preset", "lorenz"}, {"seed", 4}});
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_NE(config_hash(a), config_hash(c));
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
  auto rec = repro_record(3, a, "mrine train");
  EXPECT_EQ(rec["config_hash"], config_hash(a));
}

TEST(Checkpoint, RoundTripRestoresEveryTensor) {
  auto rc = parse_run_config({{"n_a", 3}, {"n_x", 2}, {"phi_s", {1, 4}}, {"phi_y", {1, 4}}, {"phi_m", {1, 4}},
                              {"theta_s", {1, 4}}, {"theta_y", {2, 4}}, {"seed", 8}});
  ModelConfig mc = rc.model;
  mc.n_s = 3;
  mc.n_y = 5;
  Checkpoint ck{rc, init_params(mc, 8), 1.75, 8, 12, std::string("2/3")};
  const auto path = scratch("ckpt.json");
  save_checkpoint(ck, path);
  auto back = load_checkpoint(path);
  EXPECT_EQ(back.tau, 1.75);
  EXPECT_EQ(back.epochs, 12u);
  EXPECT_EQ(back.fold, std::optional<std::string>("2/3"));
  auto a = ck.model.named_tensors(), b = back.model.named_tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(a[i].second.shape().dims(), b[i].second.shape().dims());
    EXPECT_TRUE(std::equal(a[i].second.values().begin(), a[i].second.values().end(), b[i].second.values().begin()));
  }
  auto j = checkpoint_json(ck);
  j["tensors"]["ldm_m.A"]["shape"] = {2, 3};
  EXPECT_THROW(checkpoint_from_json(j), DataError);
  fs::remove(path);

  auto data = lorenz_bundle(small_sim(), 1);
  EXPECT_NO_THROW(check_compatible(back.model, data));
  data.n_y = 4;
  EXPECT_THROW(check_compatible(back.model, data), DataError);
}

TEST(SimConfig, ParsesAndRejectsUnknownKeys) {
  auto r = parse_lorenz_config({{"n_trials", 20}, {"bin_ms", 10}, {"timescale_ratio", 5}, {"latent_seed", 4}});
  EXPECT_EQ(r.lorenz.n_trials, 20u);
  EXPECT_DOUBLE_EQ(r.obs.bin_s, 0.01);
  EXPECT_EQ(r.timescale_ratio, 5u);
  EXPECT_EQ(r.lorenz.seed, 4u);
  EXPECT_THROW(parse_lorenz_config({{"trials", 20}}), std::invalid_argument);
  EXPECT_THROW(parse_lorenz_config({{"timescale_ratio", 0}}), std::invalid_argument);
}
