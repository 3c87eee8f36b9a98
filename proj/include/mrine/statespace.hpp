// Linear dynamical models with a differentiable Kalman filter, RTS smoother
// and k-step predictor.
//
//   x_{t+1} = A x_t + w_t,   w_t ~ N(0, W)
//   a_t     = C x_t + r_t,   r_t ~ N(0, R)
//
// Sequences are batched and time-major: row t*B + b of a [T*B, m] tensor is
// trial b at step t. Means are carried as [B, n] and covariances as [B, n, n].
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "mrine/diffcore.hpp"

namespace mrine {

using ad::Shape;
using ad::Tensor;

// Lower bound added to every diagonal noise variance.
inline constexpr double kPdFloor = 1e-4;

inline double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

// Covariances and means ready for filtering. Tests may build these directly.
struct LdmMatrices {
  Tensor A;       // [n, n]
  Tensor C;       // [m, n]
  Tensor W;       // [n, n]
  Tensor R;       // [m, m]
  Tensor x0;      // [n]
  Tensor Sigma0;  // [n, n]

  std::size_t state_dim() const { return A.shape()[0]; }
  std::size_t obs_dim() const { return C.shape()[0]; }
};

// Unconstrained parameterization: noise covariances are diag(softplus(raw)) + kPdFloor.
struct LdmParams {
  Tensor A;
  Tensor C;
  Tensor W_raw;
  Tensor R_raw;
  Tensor x0;
  Tensor Sigma0_raw;

  std::size_t state_dim() const { return A.shape()[0]; }
  std::size_t obs_dim() const { return C.shape()[0]; }

  // x0 = 0, Sigma0 = I; the initial state is trainable only when requested.
  static LdmParams zeros(std::size_t n, std::size_t m, bool learn_initial_state = false) {
    LdmParams p;
    p.A = Tensor::parameter(Shape{n, n}, std::vector<double>(n * n, 0.0));
    p.C = Tensor::parameter(Shape{m, n}, std::vector<double>(m * n, 0.0));
    p.W_raw = Tensor::parameter(Shape{n}, std::vector<double>(n, inverse_softplus(0.1 - kPdFloor)));
    p.R_raw = Tensor::parameter(Shape{m}, std::vector<double>(m, inverse_softplus(0.1 - kPdFloor)));
    std::vector<double> x0(n, 0.0), s0(n, inverse_softplus(1.0 - kPdFloor));
    p.x0 = learn_initial_state ? Tensor::parameter(Shape{n}, x0) : Tensor::constant(Shape{n}, x0);
    p.Sigma0_raw = learn_initial_state ? Tensor::parameter(Shape{n}, s0) : Tensor::constant(Shape{n}, s0);
    return p;
  }

  LdmMatrices materialize() const {
    auto pd = [](const Tensor& raw) { return ad::diag(ad::shift(ad::softplus(raw), kPdFloor)); };
    return {A, C, pd(W_raw), pd(R_raw), x0, pd(Sigma0_raw)};
  }
};

// Largest |eigenvalue| of A. Reported after training; never enforced.
inline double spectral_radius(const Tensor& A) {
  const std::size_t n = A.shape()[0];
  Eigen::MatrixXd m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = A.at(i * n + j);
  Eigen::EigenSolver<Eigen::MatrixXd> es(m, false);
  double r = 0.0;
  for (const auto& ev : es.eigenvalues()) r = std::max(r, std::abs(ev));
  return r;
}

// Observations of an LDM: values [T*B, m] time-major, mask per row (1 = observed).
struct ObservedSequence {
  Tensor values;
  std::vector<std::uint8_t> mask;
  std::size_t steps = 0;
  std::size_t batch = 1;
};

struct FilterResult {
  std::vector<Tensor> x_pred;      // x_{t|t-1}, [B, n]
  std::vector<Tensor> Sigma_pred;  // Sigma_{t|t-1}, [B, n, n]
  std::vector<Tensor> x_filt;      // x_{t|t}
  std::vector<Tensor> Sigma_filt;  // Sigma_{t|t}
  std::size_t batch = 1;

  std::size_t steps() const { return x_filt.size(); }
};

struct SmoothResult {
  std::vector<Tensor> x_smooth;      // x_{t|T}
  std::vector<Tensor> Sigma_smooth;  // Sigma_{t|T}
};

// Stacks per-step [B, ...] tensors into a time-major [T*B, ...] tensor.
inline Tensor stack_steps(const std::vector<Tensor>& steps) { return ad::concat_rows(steps); }

namespace detail {

inline Tensor broadcast_rows(const Tensor& v, std::size_t batch) {
  auto dims = v.shape().dims();
  dims.insert(dims.begin(), batch);
  return ad::add(Tensor::zeros(Shape(std::move(dims))), v);
}

// Row-vector times per-batch matrix: [B, k] x [B, k, n] -> [B, n].
inline Tensor row_times(const Tensor& rows, const Tensor& mats) {
  const std::size_t B = rows.shape()[0], k = rows.shape()[1], n = mats.shape().cols();
  return ad::reshape(ad::matmul(ad::reshape(rows, Shape{B, 1, k}), mats), Shape{B, n});
}

}  // namespace detail

// Causal Kalman filter. Masked rows skip the measurement update, so
// x_{t|t} = A x_{t-1|t-1} and Sigma_{t|t} = Sigma_{t|t-1} there.
inline FilterResult kalman_filter(const LdmMatrices& ldm, const ObservedSequence& obs) {
  const std::size_t n = ldm.state_dim(), m = ldm.obs_dim(), B = obs.batch, T = obs.steps;
  if (ldm.A.shape() != Shape{n, n}) throw ShapeError("kalman_filter: A must be square");
  if (ldm.C.shape()[1] != n) throw ShapeError("kalman_filter: C columns must equal state dimension");
  if (obs.values.shape() != Shape{T * B, m}) {
    throw ShapeError("kalman_filter: observations " + obs.values.shape().str() + " do not match [T*B, " +
                     std::to_string(m) + "]");
  }
  if (obs.mask.size() != T * B) throw ShapeError("kalman_filter: mask length must equal T*B");

  const Tensor At = ad::transpose(ldm.A);
  const Tensor Ct = ad::transpose(ldm.C);
  Tensor x_prev = detail::broadcast_rows(ldm.x0, B);
  Tensor S_prev = detail::broadcast_rows(ldm.Sigma0, B);

  FilterResult out;
  out.batch = B;
  for (std::size_t t = 0; t < T; ++t) {
    Tensor xp = ad::matmul(x_prev, At);
    Tensor Sp = ad::symmetrize(ad::add(ad::matmul(ad::matmul(ldm.A, S_prev), At), ldm.W));

    const std::vector<std::uint8_t> mt(obs.mask.begin() + static_cast<std::ptrdiff_t>(t * B),
                                       obs.mask.begin() + static_cast<std::ptrdiff_t>((t + 1) * B));
    const std::size_t observed = static_cast<std::size_t>(std::count(mt.begin(), mt.end(), 1));
    Tensor xf = xp, Sf = Sp;
    if (observed > 0) {
      Tensor a_t = ad::slice_rows(obs.values, t * B, (t + 1) * B);
      Tensor innov = ad::sub(a_t, ad::matmul(xp, Ct));
      Tensor CS = ad::matmul(ldm.C, Sp);
      Tensor S = ad::symmetrize(ad::add(ad::matmul(CS, Ct), ldm.R));
      Tensor Kt = ad::linear_solve(S, CS);  // K^T = S^-1 C Sigma
      Tensor xu = ad::add(xp, detail::row_times(innov, Kt));
      Tensor Su = ad::symmetrize(ad::sub(Sp, ad::matmul(ad::transpose(Kt), CS)));
      if (observed == B) {
        xf = xu;
        Sf = Su;
      } else {
        xf = ad::where_rows(mt, xu, xp);
        Sf = ad::where_rows(mt, Su, Sp);
      }
    }
    out.x_pred.push_back(xp);
    out.Sigma_pred.push_back(Sp);
    out.x_filt.push_back(xf);
    out.Sigma_filt.push_back(Sf);
    x_prev = xf;
    S_prev = Sf;
  }
  return out;
}

// Rauch-Tung-Striebel smoother with gain G_t = Sigma_{t|t} A^T Sigma_{t+1|t}^-1.
inline SmoothResult kalman_smooth(const LdmMatrices& ldm, const FilterResult& filt) {
  const std::size_t T = filt.steps(), n = ldm.state_dim();
  SmoothResult out;
  if (T == 0) return out;
  out.x_smooth.resize(T);
  out.Sigma_smooth.resize(T);
  out.x_smooth[T - 1] = filt.x_filt[T - 1];
  out.Sigma_smooth[T - 1] = filt.Sigma_filt[T - 1];
  for (std::size_t i = T - 1; i-- > 0;) {
    Tensor AS = ad::matmul(ldm.A, filt.Sigma_filt[i]);
    Tensor Gt;
    try {
      Gt = ad::linear_solve(filt.Sigma_pred[i + 1], AS);
    } catch (const SingularMatrixError&) {
      Tensor reg = ad::add(filt.Sigma_pred[i + 1], ad::scale(Tensor::eye(n), kPdFloor));
      Gt = ad::linear_solve(reg, AS);
    }
    Tensor dx = ad::sub(out.x_smooth[i + 1], filt.x_pred[i + 1]);
    out.x_smooth[i] = ad::add(filt.x_filt[i], detail::row_times(dx, Gt));
    Tensor dS = ad::sub(out.Sigma_smooth[i + 1], filt.Sigma_pred[i + 1]);
    out.Sigma_smooth[i] =
        ad::symmetrize(ad::add(filt.Sigma_filt[i], ad::matmul(ad::matmul(ad::transpose(Gt), dS), Gt)));
  }
  return out;
}

// x_{t+k|t} = A^k x_{t|t} for t = 0..T-k-1, stacked time-major ([(T-k)*B, n]).
// Row block i targets step i + k. Returns nullopt when k >= T (nothing to predict).
inline std::optional<Tensor> kstep_predict(const LdmMatrices& ldm, const FilterResult& filt, std::size_t k) {
  if (k == 0) throw std::invalid_argument("kstep_predict: horizon must be >= 1");
  const std::size_t T = filt.steps();
  if (k >= T) return std::nullopt;
  Tensor Ak = ldm.A;
  for (std::size_t i = 1; i < k; ++i) Ak = ad::matmul(Ak, ldm.A);
  std::vector<Tensor> sources(filt.x_filt.begin(), filt.x_filt.begin() + static_cast<std::ptrdiff_t>(T - k));
  return ad::matmul(stack_steps(sources), ad::transpose(Ak));
}

// a = C x for every row of a [N, n] state sequence.
inline Tensor emit_embedding(const LdmMatrices& ldm, const Tensor& states) {
  if (states.shape().rank() != 2 || states.shape()[1] != ldm.state_dim()) {
    throw ShapeError("emit_embedding: states " + states.shape().str());
  }
  return ad::matmul(states, ad::transpose(ldm.C));
}

}  // namespace mrine
