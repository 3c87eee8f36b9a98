// Stochastic Lorenz attractor trials and synthetic Gaussian / Poisson observations.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mrine::lorenz {

struct LorenzConfig {
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;
  double dt = 0.006;
  double dyn_noise_var = 0.01;
  bool sqrt_dt_noise = false;  // scale the per-step noise by sqrt(dt)
  std::size_t n_trials = 750;
  std::size_t trial_len = 200;
  std::size_t burn_in = 500;
  std::uint64_t seed = 0;
};

struct ObsConfig {
  std::size_t n_s = 10;
  std::size_t n_y = 20;
  double gauss_noise_var = 5.0;
  double base_rate_hz = 5.0;
  double bin_s = 0.005;
  double mixing_std = 1.0;  // entries of C_s and C_y are N(0, mixing_std^2)
  std::uint64_t seed = 0;
};

using State = std::array<double, 3>;
// Row-major T x d matrix for one trial.
using TrialMatrix = std::vector<double>;

inline State drift(const State& x, const LorenzConfig& c) {
  return {c.sigma * (x[1] - x[0]), c.rho * x[0] - x[0] * x[2] - x[1], x[0] * x[1] - c.beta * x[2]};
}

// x <- x + f(x) dt + q.
inline State euler_step(const State& x, const LorenzConfig& c, const State& q) {
  const State f = drift(x, c);
  return {x[0] + f[0] * c.dt + q[0], x[1] + f[1] * c.dt + q[1], x[2] + f[2] * c.dt + q[2]};
}

struct LatentSet {
  std::vector<TrialMatrix> trials;  // normalized, T x 3
  State mean{};                     // subtracted per dimension
  State scale{};                    // divided per dimension after centering
  double max_abs_raw = 0.0;         // largest unnormalized coordinate
};

class Simulator {
 public:
  explicit Simulator(LorenzConfig cfg) : cfg_(cfg), rng_(cfg.seed) {
    if (!(cfg.dt > 0) || cfg.n_trials == 0 || cfg.trial_len == 0) throw std::invalid_argument("lorenz: bad config");
  }

  State noise() {
    if (cfg_.dyn_noise_var == 0.0) return {0, 0, 0};
    const double sd = std::sqrt(cfg_.dyn_noise_var) * (cfg_.sqrt_dt_noise ? std::sqrt(cfg_.dt) : 1.0);
    std::normal_distribution<double> g(0.0, sd);
    return {g(rng_), g(rng_), g(rng_)};
  }

  // Random start in a box around the attractor, then burn-in.
  State initial_state() {
    std::uniform_real_distribution<double> xy(-10.0, 10.0), z(10.0, 40.0);
    State x{xy(rng_), xy(rng_), z(rng_)};
    for (std::size_t i = 0; i < cfg_.burn_in; ++i) x = checked(euler_step(x, cfg_, noise()));
    return x;
  }

  TrialMatrix raw_trial() {
    State x = initial_state();
    TrialMatrix out;
    out.reserve(cfg_.trial_len * 3);
    for (std::size_t t = 0; t < cfg_.trial_len; ++t) {
      x = checked(euler_step(x, cfg_, noise()));
      out.insert(out.end(), x.begin(), x.end());
    }
    return out;
  }

 private:
  static State checked(const State& x) {
    for (double v : x)
      if (!std::isfinite(v) || std::abs(v) > 1e6) throw std::runtime_error("lorenz: trajectory diverged");
    return x;
  }
  LorenzConfig cfg_;
  std::mt19937_64 rng_;
};

// Trials normalized over the whole dataset to zero mean and max |x| = 1 per dimension.
inline LatentSet simulate_latents(const LorenzConfig& cfg) {
  Simulator sim(cfg);
  LatentSet out;
  for (std::size_t i = 0; i < cfg.n_trials; ++i) out.trials.push_back(sim.raw_trial());
  State sum{};
  double count = 0;
  for (const auto& tr : out.trials)
    for (std::size_t r = 0; r < tr.size() / 3; ++r) {
      for (int d = 0; d < 3; ++d) {
        sum[d] += tr[r * 3 + d];
        out.max_abs_raw = std::max(out.max_abs_raw, std::abs(tr[r * 3 + d]));
      }
      count += 1;
    }
  for (int d = 0; d < 3; ++d) out.mean[d] = sum[d] / count;
  State peak{};
  for (auto& tr : out.trials)
    for (std::size_t i = 0; i < tr.size(); ++i) {
      tr[i] -= out.mean[i % 3];
      peak[i % 3] = std::max(peak[i % 3], std::abs(tr[i]));
    }
  for (int d = 0; d < 3; ++d) out.scale[d] = peak[d] > 0 ? peak[d] : 1.0;
  for (auto& tr : out.trials)
    for (std::size_t i = 0; i < tr.size(); ++i) tr[i] /= out.scale[i % 3];
  return out;
}

// Row-major rows x cols matrix with N(0, std^2) entries.
inline std::vector<double> random_matrix(std::size_t rows, std::size_t cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, std);
  std::vector<double> m(rows * cols);
  for (auto& v : m) v = g(rng);
  return m;
}

inline TrialMatrix mix(const TrialMatrix& x, const std::vector<double>& C, std::size_t n) {
  const std::size_t T = x.size() / 3;
  TrialMatrix out(T * n, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < 3; ++d) out[t * n + i] += C[i * 3 + d] * x[t * 3 + d];
  return out;
}

// y = C_y x + N(0, var I).
inline std::vector<TrialMatrix> gen_gaussian_obs(const std::vector<TrialMatrix>& latents, const std::vector<double>& C_y,
                                                 std::size_t n_y, double noise_var, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, std::sqrt(noise_var));
  std::vector<TrialMatrix> out;
  for (const auto& x : latents) {
    TrialMatrix y = mix(x, C_y, n_y);
    if (noise_var > 0)
      for (auto& v : y) v += g(rng);
    out.push_back(std::move(y));
  }
  return out;
}

// Counts ~ Poisson(exp(C_s x + log(rate_hz * bin_s))).
inline std::vector<TrialMatrix> gen_poisson_obs(const std::vector<TrialMatrix>& latents, const std::vector<double>& C_s,
                                                std::size_t n_s, double rate_hz, double bin_s, std::mt19937_64& rng) {
  const double base = std::log(rate_hz * bin_s);
  std::vector<TrialMatrix> out;
  for (const auto& x : latents) {
    TrialMatrix s = mix(x, C_s, n_s);
    for (auto& v : s) {
      std::poisson_distribution<long> p(std::exp(v + base));
      v = static_cast<double>(p(rng));
    }
    out.push_back(std::move(s));
  }
  return out;
}

struct SimBundle {
  LorenzConfig lorenz;
  ObsConfig obs;
  LatentSet latents;
  std::vector<double> C_y, C_s;  // n_y x 3, n_s x 3
  std::vector<TrialMatrix> y, s;
};

inline SimBundle simulate(const LorenzConfig& lc, const ObsConfig& oc) {
  SimBundle b{lc, oc, simulate_latents(lc), {}, {}, {}, {}};
  std::mt19937_64 rng(oc.seed);
  b.C_y = random_matrix(oc.n_y, 3, oc.mixing_std, rng);
  b.C_s = random_matrix(oc.n_s, 3, oc.mixing_std, rng);
  b.y = gen_gaussian_obs(b.latents.trials, b.C_y, oc.n_y, oc.gauss_noise_var, rng);
  b.s = gen_poisson_obs(b.latents.trials, b.C_s, oc.n_s, oc.base_rate_hz, oc.bin_s, rng);
  return b;
}

}  // namespace mrine::lorenz
