// Mini-batch training: Xavier-normal initialization, time-dropout, Adam with
// global-norm clipping, and a triangular cyclic learning rate per epoch.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrine/objective.hpp"

namespace mrine {

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double lr_min = 0.001;
  double lr_max = 0.01;
  std::size_t lr_warm_epochs = 10;
  double lr_decay = 0.99;
  double clip_norm = 0.1;
  double rho_t = 0.0;
  double rho_d = 0.0;
  std::uint64_t seed = 0;
  bool auto_tau = true;  // compute tau from the training trials before optimizing
  LossConfig loss;

  void validate() const {
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (!(clip_norm > 0)) throw std::invalid_argument("clip_norm must be positive");
    if (rho_t < 0 || rho_t >= 1) throw std::invalid_argument("rho_t must be in [0, 1)");
    if (rho_d < 0 || rho_d >= 1) throw std::invalid_argument("rho_d must be in [0, 1)");
    if (lr_warm_epochs == 0) throw std::invalid_argument("lr_warm_epochs must be positive");
    loss.validate();
  }
};

// One trial of both modalities (either may be an unused zero-width stream).
struct Trial {
  MaskedSequence s;
  MaskedSequence y;
  std::size_t steps() const { return s.mask.size(); }
};

// ---------------------------------------------------------------------------
// Initialization

inline void xavier_normal(Tensor& w, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(w.shape()[0]), fan_out = static_cast<double>(w.shape()[1]);
  std::normal_distribution<double> g(0.0, std::sqrt(2.0 / (fan_in + fan_out)));
  for (auto& v : w.mutable_values()) v = g(rng);
}

// MLP weights Xavier-normal, biases zero; LDMs start near identity:
// A = 0.95 I + N(0, 0.01^2), C Xavier-normal, noise diagonals 0.1, x0 = 0, Sigma0 = I.
inline MrineModel init_params(const ModelConfig& cfg, std::uint64_t seed) {
  MrineModel model(cfg);
  std::mt19937_64 rng(seed);
  for (Mlp* m : {&model.enc_s, &model.enc_y, &model.fusion, &model.dec_s, &model.dec_y})
    for (auto& w : m->weights) xavier_normal(w, rng);
  std::normal_distribution<double> jitter(0.0, 0.01);
  for (LdmParams* p : {&model.ldm_s, &model.ldm_y, &model.ldm_m}) {
    if (!p->A.defined()) continue;
    const std::size_t n = p->state_dim();
    auto a = p->A.mutable_values();
    for (std::size_t i = 0; i < n * n; ++i) a[i] = (i % (n + 1) == 0 ? 0.95 : 0.0) + jitter(rng);
    // C is [m, n]: fan_out m, fan_in n; the Xavier std is symmetric in the two.
    xavier_normal(p->C, rng);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Time-dropout, schedule, optimizer

struct DroppedMasks {
  std::vector<std::uint8_t> s, y;
};

// Each observed entry is independently dropped with probability rho_t.
inline DroppedMasks time_dropout(const std::vector<std::uint8_t>& mask_s, const std::vector<std::uint8_t>& mask_y,
                                 double rho_t, std::mt19937_64& rng) {
  if (rho_t < 0 || rho_t >= 1) throw std::invalid_argument("rho_t must be in [0, 1)");
  DroppedMasks out{mask_s, mask_y};
  if (rho_t == 0.0) return out;
  std::bernoulli_distribution drop(rho_t);
  for (auto* m : {&out.s, &out.y})
    for (auto& v : *m)
      if (v && drop(rng)) v = 0;
  return out;
}

// Triangular cycle of period 2*warm: lr_min -> peak -> lr_min, with the peak
// multiplied by lr_decay at each new cycle.
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  const std::size_t w = cfg.lr_warm_epochs;
  const std::size_t cycle = epoch / (2 * w), pos = epoch % (2 * w);
  const double peak = cfg.lr_max * std::pow(cfg.lr_decay, static_cast<double>(cycle));
  const double frac = pos <= w ? static_cast<double>(pos) / w : static_cast<double>(2 * w - pos) / w;
  return cfg.lr_min + (peak - cfg.lr_min) * frac;
}

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
};

// L2 norm of all gradients together (missing gradients count as zero).
inline double global_grad_norm(const std::vector<Tensor>& params) {
  double s = 0.0;
  for (const auto& p : params)
    if (p.has_grad())
      for (double g : p.grad()) s += g * g;
  return std::sqrt(s);
}

// Clips the concatenated gradient to clip_norm, then applies one bias-corrected
// Adam update. Returns the pre-clip gradient norm.
inline double adam_step(std::vector<Tensor>& params, AdamState& st, double lr, double clip_norm) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.numel(), 0.0);
      st.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw std::logic_error("adam_step: parameter list changed");
  const double norm = global_grad_norm(params);
  const double factor = (clip_norm > 0 && norm > clip_norm) ? clip_norm / norm : 1.0;
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_values();
    const auto grad = params[k].grad();
    auto& m = st.m[k];
    auto& v = st.v[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = params[k].has_grad() ? grad[i] * factor : 0.0;
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
      values[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + st.eps);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Data handling

// Batches of equal-length trials. Trials are grouped by length, shuffled with
// the given rng (if any), chunked and the batch order shuffled.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<Trial>& trials, std::size_t batch_size,
                                                          std::mt19937_64* rng) {
  std::map<std::size_t, std::vector<std::size_t>> by_len;
  for (std::size_t i = 0; i < trials.size(); ++i) by_len[trials[i].steps()].push_back(i);
  std::vector<std::vector<std::size_t>> out;
  for (auto& [len, idx] : by_len) {
    if (rng) std::shuffle(idx.begin(), idx.end(), *rng);
    for (std::size_t b = 0; b < idx.size(); b += batch_size)
      out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(b),
                       idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), b + batch_size)));
  }
  if (rng) std::shuffle(out.begin(), out.end(), *rng);
  return out;
}

inline Batch batch_of(const std::vector<Trial>& trials, const std::vector<std::size_t>& idx) {
  std::vector<MaskedSequence> s, y;
  for (auto i : idx) {
    s.push_back(trials[i].s);
    y.push_back(trials[i].y);
  }
  return make_batch(s, y);
}

// Stacks all trials' rows (trial-major) for tau computation.
inline double compute_tau(const std::vector<Trial>& trials, ObsModel obs_model_s = ObsModel::poisson) {
  if (trials.empty()) throw std::invalid_argument("compute_tau: no trials");
  std::vector<double> s, y;
  std::vector<std::uint8_t> ms, my;
  const std::size_t ns = trials.front().s.values.shape()[1], ny = trials.front().y.values.shape()[1];
  for (const auto& tr : trials) {
    s.insert(s.end(), tr.s.values.values().begin(), tr.s.values.values().end());
    y.insert(y.end(), tr.y.values.values().begin(), tr.y.values.values().end());
    ms.insert(ms.end(), tr.s.mask.begin(), tr.s.mask.end());
    my.insert(my.end(), tr.y.mask.begin(), tr.y.mask.end());
  }
  return compute_tau(Tensor::constant(Shape{ms.size(), ns}, std::move(s)), ms,
                     Tensor::constant(Shape{my.size(), ny}, std::move(y)), my, obs_model_s);
}

// Mean over trials of the per-trial total loss (no dropout of any kind).
inline LossBreakdown evaluate_loss(const MrineModel& model, const std::vector<Trial>& trials, const LossConfig& cfg,
                                   std::size_t batch_size = 32) {
  LossBreakdown acc;
  double n = 0;
  double total = 0;
  for (const auto& idx : make_batches(trials, batch_size, nullptr)) {
    Batch b = batch_of(trials, idx);
    LossBreakdown lb = loss_total(model, b, cfg);
    const double w = static_cast<double>(idx.size());
    total += lb.total.item() * w;
    acc.L_k += lb.L_k * w;
    acc.L_smooth += lb.L_smooth * w;
    acc.L_sm += lb.L_sm * w;
    acc.L_l2 = lb.L_l2;
    n += w;
  }
  if (n > 0) {
    acc.L_k /= n;
    acc.L_smooth /= n;
    acc.L_sm /= n;
    total /= n;
  }
  acc.total = Tensor::scalar(total);
  return acc;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double L_k = 0, L_smooth = 0, L_sm = 0, L_l2 = 0, total = 0;
  std::optional<double> val_total;
  double grad_norm = 0;  // mean pre-clip norm over the epoch's steps
};

struct TrainResult {
  std::vector<EpochRecord> log;
  double tau = 1.0;
  std::size_t epochs_completed = 0;
};

struct TrainingDiverged : std::runtime_error {
  std::size_t epoch;
  TrainingDiverged(std::size_t e, const std::string& what) : std::runtime_error(what), epoch(e) {}
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains in place. Epoch 0 of the log is the loss at initialization. On a
// non-finite loss, parameters are restored to the last finite epoch and
// TrainingDiverged is thrown.
inline TrainResult train(MrineModel& model, const std::vector<Trial>& train_set, const TrainConfig& cfg_in,
                         const std::vector<Trial>* val_set = nullptr, const EpochCallback& on_epoch = {}) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  TrainResult result;
  if (cfg.auto_tau && model.is_multiscale()) cfg.loss.tau = compute_tau(train_set, model.config.obs_model_s);
  result.tau = cfg.loss.tau;

  std::vector<Tensor> params = model.trainable();
  auto snapshot = [&] {
    std::vector<std::vector<double>> s;
    for (const auto& p : params) s.emplace_back(p.values().begin(), p.values().end());
    return s;
  };
  auto restore = [&](const std::vector<std::vector<double>>& s) {
    for (std::size_t k = 0; k < params.size(); ++k) std::copy(s[k].begin(), s[k].end(), params[k].mutable_values().begin());
  };

  auto record = [&](EpochRecord rec) {
    if (val_set && !val_set->empty()) rec.val_total = evaluate_loss(model, *val_set, cfg.loss, cfg.batch_size).total.item();
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  };
  {
    LossBreakdown init = evaluate_loss(model, train_set, cfg.loss, cfg.batch_size);
    record({0, 0.0, init.L_k, init.L_smooth, init.L_sm, init.L_l2, init.total.item(), std::nullopt, 0.0});
  }

  std::mt19937_64 rng(cfg.seed);
  AdamState adam;
  auto last_good = snapshot();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch - 1, cfg);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    double n = 0;
    std::size_t steps = 0;
    for (const auto& idx : make_batches(train_set, cfg.batch_size, &rng)) {
      Batch b = batch_of(train_set, idx);
      DroppedMasks dm = time_dropout(b.mask_s, b.mask_y, cfg.rho_t, rng);
      const auto orig_s = b.mask_s, orig_y = b.mask_y;
      b.mask_s = std::move(dm.s);
      b.mask_y = std::move(dm.y);
      EncodeOptions opt{true, cfg.rho_d, &rng};
      LossBreakdown lb = loss_total(model, b, cfg.loss, orig_s, orig_y, opt);
      const double total = lb.total.item();
      if (!std::isfinite(total)) {
        restore(last_good);
        throw TrainingDiverged(epoch, "non-finite loss at epoch " + std::to_string(epoch));
      }
      for (auto& p : params) p.zero_grad();
      ad::backward(lb.total);
      rec.grad_norm += adam_step(params, adam, lr, cfg.clip_norm);
      ++steps;
      const double w = static_cast<double>(idx.size());
      rec.L_k += lb.L_k * w;
      rec.L_smooth += lb.L_smooth * w;
      rec.L_sm += lb.L_sm * w;
      rec.total += total * w;
      rec.L_l2 = lb.L_l2;
      n += w;
    }
    for (double* v : {&rec.L_k, &rec.L_smooth, &rec.L_sm, &rec.total}) *v /= n;
    rec.grad_norm /= static_cast<double>(std::max<std::size_t>(steps, 1));
    bool finite = true;
    for (const auto& p : params) finite = finite && p.all_finite();
    if (!finite) {
      restore(last_good);
      throw TrainingDiverged(epoch, "non-finite parameters after epoch " + std::to_string(epoch));
    }
    last_good = snapshot();
    result.epochs_completed = epoch;
    record(rec);
  }
  return result;
}

}  // namespace mrine
