// Training objective: k-step-ahead prediction, smoothed reconstruction,
// smoothness regularization and an L2 penalty on MLP weights.
//
// All likelihood sums run over observed rows only and are raw sums, averaged
// over the trials of a batch.
#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mrine/model.hpp"

namespace mrine {

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;
inline constexpr double kTauRateFloor = 1e-3;

struct LossConfig {
  std::vector<std::size_t> K{1, 2, 3, 4};
  double tau = 1.0;
  double gamma_s = 0.0;
  double gamma_y = 0.0;
  double gamma_x = 0.0;
  double gamma_r = 0.0;
  std::optional<std::size_t> x_smooth_dims;  // defaults to floor(n_x / 2)
  bool enable_L_smooth = true;
  bool enable_sm_s = true;
  bool enable_sm_y = true;
  bool enable_sm_x = true;

  void validate() const {
    if (K.empty()) throw std::invalid_argument("loss: K must be non-empty");
    for (auto k : K)
      if (k == 0) throw std::invalid_argument("loss: horizons must be positive");
    if (!(tau > 0.0)) throw std::invalid_argument("loss: tau must be positive");
    if (gamma_s < 0 || gamma_y < 0 || gamma_x < 0 || gamma_r < 0) {
      throw std::invalid_argument("loss: gamma values must be nonnegative");
    }
  }
};

struct LossBreakdown {
  Tensor total;
  double L_k = 0, L_smooth = 0, L_sm = 0, L_l2 = 0;
  std::vector<double> L_k_per_horizon;
  double L_k_s = 0, L_k_y = 0;
  double L_smooth_s = 0, L_smooth_y = 0;
  double L_sm_s = 0, L_sm_y = 0, L_sm_x = 0;
  // Observed-row counts per trial, for per-step means in logs.
  double rows_s = 0, rows_y = 0;

  double per_step_L_smooth() const {
    const double n = rows_s + rows_y;
    return n > 0 ? L_smooth / n : 0.0;
  }
};

// ---------------------------------------------------------------------------
// Likelihoods and divergences

namespace detail {

inline void check_counts(const Tensor& s) {
  for (double v : s.values())
    if (v < 0.0) throw std::invalid_argument("poisson: negative count");
}

inline void check_positive(const Tensor& t, const char* what) {
  for (double v : t.values())
    if (!(v > 0.0)) throw std::invalid_argument(std::string(what) + " must be positive");
}

inline double sum_lgamma1(const Tensor& s) {
  double c = 0.0;
  for (double v : s.values()) c += std::lgamma(v + 1.0);
  return c;
}

}  // namespace detail

// sum(s log(lambda) - lambda - log Gamma(s+1)) with lambda = exp(log_rate).
inline Tensor poisson_loglik_natural(const Tensor& s, const Tensor& log_rate) {
  detail::check_counts(s);
  Tensor core = ad::sum(ad::sub(ad::mul(s, log_rate), ad::exp(log_rate)));
  return ad::shift(core, -detail::sum_lgamma1(s));
}

inline Tensor poisson_loglik(const Tensor& s, const Tensor& rate) {
  detail::check_positive(rate, "poisson rate");
  return poisson_loglik_natural(s, ad::log(rate));
}

// Unit-variance Gaussian.
inline Tensor gaussian_loglik(const Tensor& y, const Tensor& mu) {
  if (y.shape() != mu.shape()) throw ShapeError("gaussian_loglik: " + y.shape().str() + " vs " + mu.shape().str());
  return ad::shift(ad::scale(ad::sum(ad::square(ad::sub(y, mu))), -0.5),
                   -kHalfLog2Pi * static_cast<double>(y.numel()));
}

// KL(Poisson(exp(e1)) || Poisson(exp(e2))) summed, from log-rates.
inline Tensor kl_poisson_natural(const Tensor& e1, const Tensor& e2) {
  Tensor l1 = ad::exp(e1), l2 = ad::exp(e2);
  return ad::sum(ad::add(ad::mul(l1, ad::sub(e1, e2)), ad::sub(l2, l1)));
}

inline Tensor kl_poisson(const Tensor& l1, const Tensor& l2) {
  detail::check_positive(l1, "kl_poisson rate");
  detail::check_positive(l2, "kl_poisson rate");
  return ad::sum(ad::add(ad::mul(l1, ad::log(ad::div(l1, l2))), ad::sub(l2, l1)));
}

inline Tensor kl_gaussian_unitvar(const Tensor& m1, const Tensor& m2) {
  return ad::scale(ad::sum(ad::square(ad::sub(m1, m2))), 0.5);
}

// KL(N(m1, v1) || N(m2, v2)) for independent scalar marginals, summed.
inline Tensor kl_gaussian_marginal(const Tensor& m1, const Tensor& v1, const Tensor& m2, const Tensor& v2) {
  detail::check_positive(v1, "kl_gaussian_marginal variance");
  detail::check_positive(v2, "kl_gaussian_marginal variance");
  Tensor log_ratio = ad::scale(ad::log(ad::div(v2, v1)), 0.5);
  Tensor quad = ad::div(ad::add(v1, ad::square(ad::sub(m1, m2))), ad::scale(v2, 2.0));
  return ad::shift(ad::sum(ad::add(log_ratio, quad)), -0.5 * static_cast<double>(m1.numel()));
}

// ---------------------------------------------------------------------------
// Likelihood scaling

// Ratio of the mean per-step Gaussian log-likelihood of y to the mean per-step
// log-likelihood of s, each evaluated at its own channel time-average. Rows are
// ΣT x n with one mask entry per row. Under a Gaussian s model the
// denominator is a unit-variance Gaussian log-likelihood as well.
inline double compute_tau(const Tensor& s, const std::vector<std::uint8_t>& mask_s, const Tensor& y,
                          const std::vector<std::uint8_t>& mask_y, ObsModel obs_model_s = ObsModel::poisson) {
  auto channel_means = [](const Tensor& v, const std::vector<std::uint8_t>& mask, const char* name) {
    const std::size_t n = v.shape()[1];
    if (mask.size() != v.shape()[0]) throw ShapeError(std::string("compute_tau: mask length for ") + name);
    std::vector<double> mean(n, 0.0);
    std::size_t count = 0;
    for (std::size_t r = 0; r < mask.size(); ++r) {
      if (!mask[r]) continue;
      ++count;
      for (std::size_t j = 0; j < n; ++j) mean[j] += v.at(r * n + j);
    }
    if (count == 0) throw std::invalid_argument(std::string("compute_tau: modality ") + name + " has no observed rows");
    for (auto& m : mean) m /= static_cast<double>(count);
    return std::pair{mean, count};
  };
  auto gauss_mean_ll = [&](const Tensor& v, const std::vector<std::uint8_t>& mask, const char* name) {
    auto [mu, count] = channel_means(v, mask, name);
    const std::size_t n = mu.size();
    double ll = 0.0;
    for (std::size_t r = 0; r < mask.size(); ++r) {
      if (!mask[r]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = v.at(r * n + j) - mu[j];
        ll += -kHalfLog2Pi - 0.5 * d * d;
      }
    }
    return ll / static_cast<double>(count);
  };
  const double num = gauss_mean_ll(y, mask_y, "y");
  double den = 0.0;
  if (obs_model_s == ObsModel::gaussian) {
    den = gauss_mean_ll(s, mask_s, "s");
  } else {
    auto [lambda, count] = channel_means(s, mask_s, "s");
    const std::size_t n = lambda.size();
    for (auto& l : lambda) l = std::max(l, kTauRateFloor);
    for (std::size_t r = 0; r < mask_s.size(); ++r) {
      if (!mask_s[r]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        const double k = s.at(r * n + j);
        if (k < 0) throw std::invalid_argument("compute_tau: negative count");
        den += k * std::log(lambda[j]) - lambda[j] - std::lgamma(k + 1.0);
      }
    }
    den /= static_cast<double>(count);
  }
  if (den == 0.0) throw std::invalid_argument("compute_tau: zero denominator log-likelihood");
  return num / den;
}

// ---------------------------------------------------------------------------
// Loss terms

namespace detail {

// Global rows t*B+b with t >= from and mask set, re-based to start at step `from`.
inline std::vector<std::size_t> observed_rows(const std::vector<std::uint8_t>& mask, std::size_t B,
                                              std::size_t from = 0) {
  std::vector<std::size_t> out;
  for (std::size_t g = from * B; g < mask.size(); ++g)
    if (mask[g]) out.push_back(g - from * B);
  return out;
}

// Pairs of consecutive observed steps within each trial.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> consecutive_pairs(
    const std::vector<std::uint8_t>& mask, std::size_t T, std::size_t B) {
  std::vector<std::size_t> first, second;
  for (std::size_t b = 0; b < B; ++b) {
    std::optional<std::size_t> prev;
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t g = t * B + b;
      if (!mask[g]) continue;
      if (prev) {
        first.push_back(*prev);
        second.push_back(g);
      }
      prev = g;
    }
  }
  return {first, second};
}

struct Targets {
  Tensor s, y;  // sanitized observation rows [T*B, n]
};

inline Targets sanitized_targets(const MrineModel& model, const Batch& batch) {
  Targets t;
  if (model.config.uses_s()) t.s = sanitize(batch.s, batch.mask_s);
  if (model.config.uses_y()) t.y = sanitize(batch.y, batch.mask_y);
  return t;
}

// Log-likelihood of s given the natural parameter of the s head.
inline Tensor s_loglik(const MrineModel& model, const Tensor& s, const Tensor& natural) {
  return model.config.obs_model_s == ObsModel::poisson ? poisson_loglik_natural(s, natural)
                                                       : gaussian_loglik(s, natural);
}

struct TermParts {
  Tensor s, y;  // negative log-likelihood sums (undefined if absent)
};

// Negative log-likelihoods of observed rows (global index >= from*B) given
// latent rows x whose row r targets global row r + from*B.
inline TermParts reconstruction_terms(const MrineModel& model, const LdmMatrices& ldm, const Tensor& x,
                                      const Targets& tg, const Batch& batch, std::size_t from) {
  TermParts out;
  const std::size_t B = batch.batch;
  auto rows_of = [&](const Tensor& full, const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> g(idx);
    for (auto& i : g) i += from * B;
    return ad::gather_rows(full, std::move(g));
  };
  if (model.config.uses_s()) {
    auto idx = observed_rows(batch.mask_s, B, from);
    if (!idx.empty()) {
      HeadOutput h = decode_heads(model, emit_embedding(ldm, ad::gather_rows(x, idx)), {true, false});
      out.s = ad::scale(s_loglik(model, rows_of(tg.s, idx), h.s_natural), -1.0);
    }
  }
  if (model.config.uses_y()) {
    auto idx = observed_rows(batch.mask_y, B, from);
    if (!idx.empty()) {
      HeadOutput h = decode_heads(model, emit_embedding(ldm, ad::gather_rows(x, idx)), {false, true});
      out.y = ad::scale(gaussian_loglik(rows_of(tg.y, idx), h.y_mean), -1.0);
    }
  }
  return out;
}

inline double value_or_zero(const Tensor& t) { return t.defined() ? t.item() : 0.0; }

inline void accumulate(std::optional<Tensor>& acc, const Tensor& t) {
  if (!t.defined()) return;
  acc = acc ? ad::add(*acc, t) : t;
}

inline double tau_for(const MrineModel& model, const LossConfig& cfg) {
  return model.is_multiscale() ? cfg.tau : 1.0;
}

}  // namespace detail

struct TermResult {
  Tensor value;  // scalar, already divided by batch size
  double s = 0, y = 0;
  std::vector<double> per_horizon;
};

// -sum_k ( tau sum_{t>=k} log p(s_t | a_{t|t-k}) + sum_{t'>=k} log p(y_t' | a_{t'|t'-k}) ),
// with steps counted from 0: x_{t|t} for t = 0..T-k-1 predicts step t+k.
inline TermResult loss_k_step(const MrineModel& model, const LatentPass& pass, const Batch& batch,
                              const LossConfig& cfg) {
  cfg.validate();
  const auto tg = detail::sanitized_targets(model, batch);
  const double tau = detail::tau_for(model, cfg);
  const double invB = 1.0 / static_cast<double>(batch.batch);
  std::optional<Tensor> acc;
  TermResult r;
  for (auto k : cfg.K) {
    auto pred = kstep_predict(pass.ldm, pass.filt, k);
    if (!pred) throw std::invalid_argument("loss_k_step: horizon " + std::to_string(k) + " >= sequence length");
    auto parts = detail::reconstruction_terms(model, pass.ldm, *pred, tg, batch, k);
    Tensor s_term = parts.s.defined() ? ad::scale(parts.s, tau * invB) : Tensor();
    Tensor y_term = parts.y.defined() ? ad::scale(parts.y, invB) : Tensor();
    const double hs = detail::value_or_zero(s_term), hy = detail::value_or_zero(y_term);
    r.s += hs;
    r.y += hy;
    r.per_horizon.push_back(hs + hy);
    detail::accumulate(acc, s_term);
    detail::accumulate(acc, y_term);
  }
  r.value = acc ? *acc : Tensor::scalar(0.0);
  return r;
}

inline TermResult loss_smooth_recon(const MrineModel& model, const LatentPass& pass, const Batch& batch,
                                    const LossConfig& cfg) {
  if (!pass.smooth) throw std::logic_error("loss_smooth_recon: latent pass has no smoother output");
  const auto tg = detail::sanitized_targets(model, batch);
  const double tau = detail::tau_for(model, cfg);
  const double invB = 1.0 / static_cast<double>(batch.batch);
  auto parts = detail::reconstruction_terms(model, pass.ldm, stack_steps(pass.smooth->x_smooth), tg, batch, 0);
  TermResult r;
  std::optional<Tensor> acc;
  Tensor s_term = parts.s.defined() ? ad::scale(parts.s, tau * invB) : Tensor();
  Tensor y_term = parts.y.defined() ? ad::scale(parts.y, invB) : Tensor();
  r.s = detail::value_or_zero(s_term);
  r.y = detail::value_or_zero(y_term);
  detail::accumulate(acc, s_term);
  detail::accumulate(acc, y_term);
  r.value = acc ? *acc : Tensor::scalar(0.0);
  return r;
}

struct SmoothnessResult {
  Tensor value;
  double s = 0, y = 0, x = 0;
};

// KL between decoded distributions at consecutive observed steps (original
// masks), plus KL between smoothed latent marginals at consecutive steps.
inline SmoothnessResult loss_smoothness(const MrineModel& model, const LatentPass& pass, const Batch& batch,
                                        const LossConfig& cfg, const std::vector<std::uint8_t>& orig_mask_s,
                                        const std::vector<std::uint8_t>& orig_mask_y) {
  if (!pass.smooth) throw std::logic_error("loss_smoothness: latent pass has no smoother output");
  const std::size_t T = batch.steps, B = batch.batch;
  const double invB = 1.0 / static_cast<double>(B);
  SmoothnessResult r;
  std::optional<Tensor> acc;
  Tensor xs = stack_steps(pass.smooth->x_smooth);
  const bool want_s = model.config.uses_s() && cfg.enable_sm_s && cfg.gamma_s > 0;
  const bool want_y = model.config.uses_y() && cfg.enable_sm_y && cfg.gamma_y > 0;
  if (want_s || want_y) {
    HeadOutput h = decode_heads(model, emit_embedding(pass.ldm, xs), {want_s, want_y});
    if (want_s) {
      auto [i1, i2] = detail::consecutive_pairs(orig_mask_s, T, B);
      if (!i1.empty()) {
        Tensor a = ad::gather_rows(h.s_natural, i1), b = ad::gather_rows(h.s_natural, i2);
        Tensor kl = model.config.obs_model_s == ObsModel::poisson ? kl_poisson_natural(a, b) : kl_gaussian_unitvar(a, b);
        Tensor term = ad::scale(kl, cfg.gamma_s * invB);
        r.s = term.item();
        detail::accumulate(acc, term);
      }
    }
    if (want_y) {
      auto [i1, i2] = detail::consecutive_pairs(orig_mask_y, T, B);
      if (!i1.empty()) {
        Tensor term = ad::scale(kl_gaussian_unitvar(ad::gather_rows(h.y_mean, i1), ad::gather_rows(h.y_mean, i2)),
                                cfg.gamma_y * invB);
        r.y = term.item();
        detail::accumulate(acc, term);
      }
    }
  }
  const std::size_t nx = model.config.n_x;
  const std::size_t d = std::min(cfg.x_smooth_dims.value_or(nx / 2), nx);
  if (cfg.enable_sm_x && cfg.gamma_x > 0 && d > 0 && T > 1) {
    Tensor m = ad::slice_cols(xs, 0, d);
    Tensor v = ad::slice_cols(ad::reshape(ad::diagonal(stack_steps(pass.smooth->Sigma_smooth)), Shape{T * B, nx}), 0, d);
    Tensor kl = kl_gaussian_marginal(ad::slice_rows(m, 0, (T - 1) * B), ad::slice_rows(v, 0, (T - 1) * B),
                                     ad::slice_rows(m, B, T * B), ad::slice_rows(v, B, T * B));
    Tensor term = ad::scale(kl, cfg.gamma_x * invB);
    r.x = term.item();
    detail::accumulate(acc, term);
  }
  r.value = acc ? *acc : Tensor::scalar(0.0);
  return r;
}

inline Tensor l2_penalty(const MrineModel& model) {
  std::optional<Tensor> acc;
  for (const auto& w : model.mlp_weights()) detail::accumulate(acc, ad::sum(ad::square(w)));
  return acc ? *acc : Tensor::scalar(0.0);
}

// Full objective. `batch` carries the masks used for inference and the
// likelihood terms (after time-dropout); the original masks feed the
// smoothness terms.
inline LossBreakdown loss_total(const MrineModel& model, const Batch& batch, const LossConfig& cfg,
                                const std::vector<std::uint8_t>& orig_mask_s,
                                const std::vector<std::uint8_t>& orig_mask_y, const EncodeOptions& opt = {}) {
  cfg.validate();
  const bool need_smoother = cfg.enable_L_smooth || (cfg.gamma_s > 0 && cfg.enable_sm_s) ||
                             (cfg.gamma_y > 0 && cfg.enable_sm_y) || (cfg.gamma_x > 0 && cfg.enable_sm_x);
  LatentPass pass = run_latents(model, batch, need_smoother, opt);

  LossBreakdown out;
  TermResult lk = loss_k_step(model, pass, batch, cfg);
  Tensor total = lk.value;
  out.L_k = lk.value.item();
  out.L_k_s = lk.s;
  out.L_k_y = lk.y;
  out.L_k_per_horizon = lk.per_horizon;
  if (cfg.enable_L_smooth) {
    TermResult ls = loss_smooth_recon(model, pass, batch, cfg);
    out.L_smooth = ls.value.item();
    out.L_smooth_s = ls.s;
    out.L_smooth_y = ls.y;
    total = ad::add(total, ls.value);
  }
  if (need_smoother) {
    SmoothnessResult sm = loss_smoothness(model, pass, batch, cfg, orig_mask_s, orig_mask_y);
    out.L_sm = sm.value.item();
    out.L_sm_s = sm.s;
    out.L_sm_y = sm.y;
    out.L_sm_x = sm.x;
    total = ad::add(total, sm.value);
  }
  Tensor l2 = l2_penalty(model);
  out.L_l2 = l2.item();
  if (cfg.gamma_r > 0) total = ad::add(total, ad::scale(l2, cfg.gamma_r));
  out.total = total;
  const double invB = 1.0 / static_cast<double>(batch.batch);
  if (model.config.uses_s()) out.rows_s = static_cast<double>(detail::observed_rows(batch.mask_s, batch.batch).size()) * invB;
  if (model.config.uses_y()) out.rows_y = static_cast<double>(detail::observed_rows(batch.mask_y, batch.batch).size()) * invB;
  return out;
}

inline LossBreakdown loss_total(const MrineModel& model, const Batch& batch, const LossConfig& cfg,
                                const EncodeOptions& opt = {}) {
  return loss_total(model, batch, cfg, batch.mask_s, batch.mask_y, opt);
}

}  // namespace mrine
