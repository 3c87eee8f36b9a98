// MLP blocks and the assembled multiscale network.
//
// Two topologies share one parameter container:
//   multiscale:   s -> enc_s -> ldm_s  +
//                                        fusion -> ldm_m -> dec_s / dec_y
//                 y -> enc_y -> ldm_y  +
//   single-scale: one modality -> enc -> ldm_m -> that modality's decoder
//
// Batches hold B equal-length trials, time-major (row t*B + b).
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mrine/statespace.hpp"

namespace mrine {

enum class ObsModel { poisson, gaussian };
enum class Topology { multiscale, single_poisson, single_gaussian };

inline const char* to_string(ObsModel m) { return m == ObsModel::poisson ? "poisson" : "gaussian"; }
inline const char* to_string(Topology t) {
  switch (t) {
    case Topology::multiscale: return "off";
    case Topology::single_poisson: return "poisson";
    case Topology::single_gaussian: return "gaussian";
  }
  return "off";
}

// Hidden layer count and width; the output layer is always linear.
struct MlpSpec {
  std::size_t hidden_layers = 3;
  std::size_t width = 128;
};

struct ModelConfig {
  std::size_t n_s = 0;
  std::size_t n_y = 0;
  std::size_t n_a = 32;
  std::size_t n_x = 32;
  MlpSpec enc_s{3, 128};
  MlpSpec enc_y{3, 128};
  MlpSpec fusion{1, 128};
  MlpSpec dec_s{3, 128};
  MlpSpec dec_y{3, 128};
  ObsModel obs_model_s = ObsModel::poisson;
  Topology topology = Topology::multiscale;
  // Missing y rows enter the encoder as zeros and are treated as observed
  // during inference; the loss still uses the true masks.
  bool zero_impute = false;
  bool learn_initial_state = false;

  bool uses_s() const { return topology != Topology::single_gaussian; }
  bool uses_y() const { return topology != Topology::single_poisson; }
};

struct Mlp {
  std::vector<Tensor> weights;  // [in, out]
  std::vector<Tensor> biases;   // [out]

  static Mlp zeros(std::size_t in, std::size_t out, const MlpSpec& spec) {
    Mlp m;
    std::size_t prev = in;
    for (std::size_t l = 0; l <= spec.hidden_layers; ++l) {
      const std::size_t next = l == spec.hidden_layers ? out : spec.width;
      m.weights.push_back(Tensor::parameter(Shape{prev, next}, std::vector<double>(prev * next, 0.0)));
      m.biases.push_back(Tensor::parameter(Shape{next}, std::vector<double>(next, 0.0)));
      prev = next;
    }
    return m;
  }

  bool empty() const { return weights.empty(); }
  std::size_t in_dim() const { return weights.front().shape()[0]; }
  std::size_t out_dim() const { return weights.back().shape()[1]; }

  // tanh on hidden layers, linear output.
  Tensor forward(const Tensor& x) const {
    if (x.shape().rank() != 2 || x.shape()[1] != in_dim()) {
      throw ShapeError("mlp: input " + x.shape().str() + " but expects width " + std::to_string(in_dim()));
    }
    Tensor h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      h = ad::add(ad::matmul(h, weights[l]), biases[l]);
      if (l + 1 < weights.size()) h = ad::tanh(h);
    }
    return h;
  }
};

// Inverted dropout. Identity when not training or rho == 0.
inline Tensor apply_input_output_dropout(const Tensor& x, double rho, bool training, std::mt19937_64& rng) {
  if (rho < 0.0 || rho >= 1.0) throw std::invalid_argument("dropout probability must be in [0, 1)");
  if (!training || rho == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rho);
  std::vector<double> m(x.numel());
  for (auto& v : m) v = keep(rng) ? 1.0 / (1.0 - rho) : 0.0;
  return ad::mul(x, Tensor::constant(x.shape(), std::move(m)));
}

// One modality over a single trial: values [T, n], mask [T].
struct MaskedSequence {
  Tensor values;
  std::vector<std::uint8_t> mask;
};

// B equal-length trials in time-major layout. Either modality may be absent
// (zero columns) when the model does not use it.
struct Batch {
  Tensor s;  // [T*B, n_s]
  Tensor y;  // [T*B, n_y]
  std::vector<std::uint8_t> mask_s;
  std::vector<std::uint8_t> mask_y;
  std::size_t steps = 0;
  std::size_t batch = 1;
};

namespace detail {

inline Tensor interleave(const std::vector<MaskedSequence>& trials, std::size_t T, std::vector<std::uint8_t>& mask) {
  const std::size_t B = trials.size();
  const std::size_t n = trials.front().values.shape()[1];
  std::vector<double> v(T * B * n);
  mask.assign(T * B, 0);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& tr = trials[b];
    if (tr.values.shape() != Shape{T, n} || tr.mask.size() != T) {
      throw ShapeError("make_batch: trial " + std::to_string(b) + " has shape " + tr.values.shape().str());
    }
    for (std::size_t t = 0; t < T; ++t) {
      mask[t * B + b] = tr.mask[t] ? 1 : 0;
      for (std::size_t j = 0; j < n; ++j) v[(t * B + b) * n + j] = tr.values.at(t * n + j);
    }
  }
  return Tensor::constant(Shape{T * B, n}, std::move(v));
}

}  // namespace detail

inline Batch make_batch(const std::vector<MaskedSequence>& s, const std::vector<MaskedSequence>& y) {
  if (s.empty() || s.size() != y.size()) throw ShapeError("make_batch: need matching non-empty trial lists");
  Batch out;
  out.batch = s.size();
  out.steps = s.front().mask.size();
  out.s = detail::interleave(s, out.steps, out.mask_s);
  out.y = detail::interleave(y, out.steps, out.mask_y);
  return out;
}

class MrineModel {
 public:
  ModelConfig config;
  Mlp enc_s, enc_y, fusion, dec_s, dec_y;
  LdmParams ldm_s, ldm_y, ldm_m;

  MrineModel() = default;

  // Zero-valued parameters with the shapes implied by the config.
  explicit MrineModel(ModelConfig cfg) : config(std::move(cfg)) {
    const auto& c = config;
    if (c.n_a == 0 || c.n_x == 0) throw std::invalid_argument("n_a and n_x must be positive");
    if (c.uses_s() && c.n_s == 0) throw std::invalid_argument("n_s must be positive");
    if (c.uses_y() && c.n_y == 0) throw std::invalid_argument("n_y must be positive");
    if (c.zero_impute && c.topology != Topology::multiscale) {
      throw std::invalid_argument("zero_impute applies to the multiscale topology only");
    }
    if (c.uses_s()) {
      enc_s = Mlp::zeros(c.n_s, c.n_a, c.enc_s);
      dec_s = Mlp::zeros(c.n_a, c.n_s, c.dec_s);
    }
    if (c.uses_y()) {
      enc_y = Mlp::zeros(c.n_y, c.n_a, c.enc_y);
      dec_y = Mlp::zeros(c.n_a, c.n_y, c.dec_y);
    }
    if (is_multiscale()) {
      ldm_s = LdmParams::zeros(c.n_a, c.n_a, c.learn_initial_state);
      ldm_y = LdmParams::zeros(c.n_a, c.n_a, c.learn_initial_state);
      fusion = Mlp::zeros(2 * c.n_a, c.n_a, c.fusion);
    }
    ldm_m = LdmParams::zeros(c.n_x, c.n_a, c.learn_initial_state);
  }

  bool is_multiscale() const { return config.topology == Topology::multiscale; }

  // Every tensor by name, in a fixed order. Constants (non-learned initial
  // states) are included so checkpoints are complete.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto mlp = [&](const std::string& name, const Mlp& m) {
      for (std::size_t l = 0; l < m.weights.size(); ++l) {
        out.emplace_back(name + ".W" + std::to_string(l), m.weights[l]);
        out.emplace_back(name + ".b" + std::to_string(l), m.biases[l]);
      }
    };
    auto ldm = [&](const std::string& name, const LdmParams& p) {
      if (!p.A.defined()) return;
      out.emplace_back(name + ".A", p.A);
      out.emplace_back(name + ".C", p.C);
      out.emplace_back(name + ".W_raw", p.W_raw);
      out.emplace_back(name + ".R_raw", p.R_raw);
      out.emplace_back(name + ".x0", p.x0);
      out.emplace_back(name + ".Sigma0_raw", p.Sigma0_raw);
    };
    mlp("enc_s", enc_s);
    mlp("enc_y", enc_y);
    ldm("ldm_s", ldm_s);
    ldm("ldm_y", ldm_y);
    mlp("fusion", fusion);
    ldm("ldm_m", ldm_m);
    mlp("dec_s", dec_s);
    mlp("dec_y", dec_y);
    return out;
  }

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_tensors())
      if (t.requires_grad()) out.push_back(t);
    return out;
  }

  // MLP weight matrices (no biases, no LDM parameters) for the L2 penalty.
  std::vector<Tensor> mlp_weights() const {
    std::vector<Tensor> out;
    for (const Mlp* m : {&enc_s, &enc_y, &fusion, &dec_s, &dec_y})
      out.insert(out.end(), m->weights.begin(), m->weights.end());
    return out;
  }
};

// Clamp applied to the rate pre-activation before exponentiation.
inline constexpr double kLogRateClamp = 10.0;

struct HeadOutput {
  Tensor s_natural;  // clamped log-rate (poisson) or mean (gaussian)
  Tensor s_mean;     // rate (poisson) or mean (gaussian)
  Tensor y_mean;
};

struct HeadSelect {
  bool s = true;
  bool y = true;
};

inline HeadOutput decode_heads(const MrineModel& model, const Tensor& a, HeadSelect which = {}) {
  HeadOutput out;
  if (which.s && model.config.uses_s()) {
    Tensor pre = model.dec_s.forward(a);
    if (model.config.obs_model_s == ObsModel::poisson) {
      out.s_natural = ad::clamp(pre, -kLogRateClamp, kLogRateClamp);
      out.s_mean = ad::exp(out.s_natural);
    } else {
      out.s_natural = pre;
      out.s_mean = pre;
    }
  }
  if (which.y && model.config.uses_y()) out.y_mean = model.dec_y.forward(a);
  return out;
}

struct EncodeOptions {
  bool training = false;
  double rho_d = 0.0;
  std::mt19937_64* rng = nullptr;
};

struct EncodeResult {
  Tensor a;                         // [T*B, n_a], the multiscale LDM's observations
  std::vector<std::uint8_t> mask;   // rows where a exists
  Tensor a_s_filt;                  // C_s x^s_{t|t} (multiscale only)
  Tensor a_y_filt;
};

namespace detail {

// Masked rows are replaced by zeros so stored values there can never reach
// any output or gradient.
inline Tensor sanitize(const Tensor& values, const std::vector<std::uint8_t>& mask) {
  return ad::where_rows(mask, values, Tensor::zeros(values.shape()));
}

inline Tensor maybe_dropout(const Tensor& x, const EncodeOptions& opt) {
  if (!opt.training || opt.rho_d == 0.0) return x;
  if (!opt.rng) throw std::invalid_argument("dropout needs an rng");
  return apply_input_output_dropout(x, opt.rho_d, true, *opt.rng);
}

inline void check_batch(const MrineModel& model, const Batch& b) {
  const auto rows = b.steps * b.batch;
  if (model.config.uses_s() && (b.s.shape() != Shape{rows, model.config.n_s} || b.mask_s.size() != rows)) {
    throw ShapeError("batch s " + b.s.shape().str() + " does not match n_s=" + std::to_string(model.config.n_s));
  }
  if (model.config.uses_y() && (b.y.shape() != Shape{rows, model.config.n_y} || b.mask_y.size() != rows)) {
    throw ShapeError("batch y " + b.y.shape().str() + " does not match n_y=" + std::to_string(model.config.n_y));
  }
}

inline Tensor filtered_embedding(const LdmParams& p, const Tensor& a, const std::vector<std::uint8_t>& mask,
                                 std::size_t T, std::size_t B) {
  const LdmMatrices ldm = p.materialize();
  FilterResult f = kalman_filter(ldm, ObservedSequence{a, mask, T, B});
  return emit_embedding(ldm, stack_steps(f.x_filt));
}

}  // namespace detail

// Causal fusion of both modalities into the embedding sequence a_t.
inline EncodeResult encode_multiscale(const MrineModel& model, const Batch& batch, const EncodeOptions& opt = {}) {
  if (!model.is_multiscale()) throw std::logic_error("encode_multiscale: model is single-scale (no fusion network)");
  detail::check_batch(model, batch);
  const std::size_t T = batch.steps, B = batch.batch;
  std::vector<std::uint8_t> infer_mask_y = batch.mask_y;
  if (model.config.zero_impute) infer_mask_y.assign(infer_mask_y.size(), 1);

  Tensor s_in = detail::maybe_dropout(detail::sanitize(batch.s, batch.mask_s), opt);
  Tensor y_in = detail::maybe_dropout(detail::sanitize(batch.y, batch.mask_y), opt);

  EncodeResult out;
  out.a_s_filt = detail::filtered_embedding(model.ldm_s, model.enc_s.forward(s_in), batch.mask_s, T, B);
  out.a_y_filt = detail::filtered_embedding(model.ldm_y, model.enc_y.forward(y_in), infer_mask_y, T, B);
  out.a = detail::maybe_dropout(model.fusion.forward(ad::concat_cols({out.a_s_filt, out.a_y_filt})), opt);
  out.mask.resize(batch.mask_s.size());
  for (std::size_t i = 0; i < out.mask.size(); ++i) out.mask[i] = (batch.mask_s[i] || infer_mask_y[i]) ? 1 : 0;
  return out;
}

inline EncodeResult encode(const MrineModel& model, const Batch& batch, const EncodeOptions& opt = {}) {
  if (model.is_multiscale()) return encode_multiscale(model, batch, opt);
  detail::check_batch(model, batch);
  const bool use_s = model.config.topology == Topology::single_poisson;
  const Tensor& values = use_s ? batch.s : batch.y;
  const auto& mask = use_s ? batch.mask_s : batch.mask_y;
  const Mlp& enc = use_s ? model.enc_s : model.enc_y;
  EncodeResult out;
  out.a = detail::maybe_dropout(enc.forward(detail::maybe_dropout(detail::sanitize(values, mask), opt)), opt);
  out.mask = mask;
  return out;
}

// Encoder output together with the multiscale LDM's filter and (optionally) smoother.
struct LatentPass {
  EncodeResult enc;
  LdmMatrices ldm;
  FilterResult filt;
  std::optional<SmoothResult> smooth;
};

inline LatentPass run_latents(const MrineModel& model, const Batch& batch, bool with_smoother,
                              const EncodeOptions& opt = {}) {
  LatentPass p;
  p.enc = encode(model, batch, opt);
  p.ldm = model.ldm_m.materialize();
  p.filt = kalman_filter(p.ldm, ObservedSequence{p.enc.a, p.enc.mask, batch.steps, batch.batch});
  if (with_smoother) p.smooth = kalman_smooth(p.ldm, p.filt);
  return p;
}

struct InferMode {
  enum Kind { filter, smooth, predict } kind = filter;
  std::size_t k = 0;

  static InferMode parse(const std::string& text) {
    if (text == "filter") return {filter, 0};
    if (text == "smooth") return {smooth, 0};
    if (text.rfind("predict:", 0) == 0) {
      std::size_t pos = 0;
      long k = -1;
      try {
        k = std::stol(text.substr(8), &pos);
      } catch (const std::exception&) {
      }
      if (k >= 1 && pos == text.size() - 8) return {predict, static_cast<std::size_t>(k)};
    }
    throw std::invalid_argument("mode must be filter, smooth or predict:k with k >= 1, got '" + text + "'");
  }
  std::string str() const {
    return kind == filter ? "filter" : kind == smooth ? "smooth" : "predict:" + std::to_string(k);
  }
};

struct InferenceResult {
  InferMode mode;
  Tensor a_s_filt, a_y_filt;  // modality-specific filtered embeddings (multiscale only)
  Tensor a_fused;             // encoder output a_t
  std::vector<std::uint8_t> fused_mask;
  Tensor x;                   // [(T-offset)*B, n_x]
  Tensor Sigma;               // [(T-offset)*B, n_x, n_x], empty for predict
  Tensor a_out;               // C x
  HeadOutput heads;
  std::size_t offset = 0;     // row block i of x targets step i + offset
  std::size_t steps = 0;
  std::size_t batch = 1;
};

inline InferenceResult infer(const MrineModel& model, const Batch& batch, InferMode mode) {
  if (mode.kind == InferMode::predict && mode.k == 0) throw std::invalid_argument("predict horizon must be >= 1");
  LatentPass p = run_latents(model, batch, mode.kind == InferMode::smooth);
  InferenceResult r;
  r.mode = mode;
  r.a_s_filt = p.enc.a_s_filt;
  r.a_y_filt = p.enc.a_y_filt;
  r.a_fused = p.enc.a;
  r.fused_mask = p.enc.mask;
  r.steps = batch.steps;
  r.batch = batch.batch;
  switch (mode.kind) {
    case InferMode::filter:
      r.x = stack_steps(p.filt.x_filt);
      r.Sigma = stack_steps(p.filt.Sigma_filt);
      break;
    case InferMode::smooth:
      r.x = stack_steps(p.smooth->x_smooth);
      r.Sigma = stack_steps(p.smooth->Sigma_smooth);
      break;
    case InferMode::predict: {
      auto pred = kstep_predict(p.ldm, p.filt, mode.k);
      if (!pred) throw std::invalid_argument("predict horizon " + std::to_string(mode.k) + " >= sequence length");
      r.x = *pred;
      r.offset = mode.k;
      break;
    }
  }
  r.a_out = emit_embedding(p.ldm, r.x);
  r.heads = decode_heads(model, r.a_out);
  return r;
}

}  // namespace mrine
