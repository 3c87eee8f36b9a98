// Evaluation: linear readouts, correlation and R^2, ROC AUC, timescale
// alignment, inference-time sample dropping and the signed-rank test.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrine/trainer.hpp"

namespace mrine::eval {

using Matrix = Eigen::MatrixXd;

inline constexpr double kReadoutRidge = 1e-6;

// Row-major T x d block into an Eigen matrix.
inline Matrix to_matrix(std::span<const double> v, std::size_t cols) {
  if (cols == 0 || v.size() % cols) throw std::invalid_argument("to_matrix: size not a multiple of column count");
  const std::size_t rows = v.size() / cols;
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = v[i * cols + j];
  return m;
}

inline Matrix vstack(const std::vector<Matrix>& blocks) {
  if (blocks.empty()) throw std::invalid_argument("vstack: nothing to stack");
  Eigen::Index rows = 0;
  for (const auto& b : blocks) {
    if (b.cols() != blocks.front().cols()) throw std::invalid_argument("vstack: column mismatch");
    rows += b.rows();
  }
  Matrix out(rows, blocks.front().cols());
  Eigen::Index r = 0;
  for (const auto& b : blocks) {
    out.middleRows(r, b.rows()) = b;
    r += b.rows();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scores

inline double pearson_cc(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("pearson_cc: need two equal-length series");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline double pearson_cc(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return pearson_cc(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())),
                    std::span<const double>(b.data(), static_cast<std::size_t>(b.size())));
}

// 1 - SS_res / SS_tot with `truth` defining the total sum of squares.
inline double r_squared(std::span<const double> truth, std::span<const double> pred) {
  if (truth.size() != pred.size() || truth.empty()) throw std::invalid_argument("r_squared: length mismatch");
  const double m = std::accumulate(truth.begin(), truth.end(), 0.0) / static_cast<double>(truth.size());
  double res = 0, tot = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    tot += (truth[i] - m) * (truth[i] - m);
  }
  if (tot == 0) return res == 0 ? 1.0 : 0.0;
  return 1.0 - res / tot;
}

// Midranks (1-based) of a sequence.
inline std::vector<double> midranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = rank;
    i = j + 1;
  }
  return r;
}

// ROC AUC via the Mann-Whitney statistic with midranks. Returns NaN when one
// class is empty.
inline double roc_auc(std::span<const double> scores, const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("roc_auc: length mismatch");
  const auto r = midranks(scores);
  double pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) {
      pos += 1;
      rank_sum += r[i];
    }
  const double neg = static_cast<double>(labels.size()) - pos;
  if (pos == 0 || neg == 0) return std::nan("");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

// Channel-averaged AUC of rates as scores for "bin contains a spike".
// Rows are time steps; channels with only one class are skipped.
inline double spike_recon_auc(const Matrix& rates, const Matrix& counts) {
  if (rates.rows() != counts.rows() || rates.cols() != counts.cols()) throw std::invalid_argument("spike_recon_auc: shape mismatch");
  double sum = 0;
  int used = 0;
  for (Eigen::Index j = 0; j < rates.cols(); ++j) {
    Eigen::VectorXd s = rates.col(j);
    std::vector<std::uint8_t> lab(static_cast<std::size_t>(counts.rows()));
    for (Eigen::Index i = 0; i < counts.rows(); ++i) lab[static_cast<std::size_t>(i)] = counts(i, j) > 0 ? 1 : 0;
    const double auc = roc_auc(std::span<const double>(s.data(), static_cast<std::size_t>(s.size())), lab);
    if (std::isnan(auc)) continue;
    sum += auc;
    ++used;
  }
  return used ? sum / used : std::nan("");
}

// Mean over columns of the per-column CC.
inline double mean_column_cc(const Matrix& truth, const Matrix& pred) {
  if (truth.rows() != pred.rows() || truth.cols() != pred.cols()) throw std::invalid_argument("mean_column_cc: shape mismatch");
  double s = 0;
  for (Eigen::Index j = 0; j < truth.cols(); ++j) s += pearson_cc(Eigen::VectorXd(truth.col(j)), Eigen::VectorXd(pred.col(j)));
  return s / static_cast<double>(truth.cols());
}

// ---------------------------------------------------------------------------
// Linear readout

struct LinearReadout {
  Matrix W;              // d x q
  Eigen::RowVectorXd b;  // q
  bool intercept_only = false;

  Matrix apply(const Matrix& X) const {
    if (X.cols() != W.rows()) throw std::invalid_argument("readout: latent width mismatch");
    return (X * W).rowwise() + b;
  }
};

// Least squares with intercept. Falls back to a 1e-6 ridge when the centered
// design is rank deficient, and to an intercept-only fit when every latent
// column is constant.
inline LinearReadout fit_readout(const Matrix& X, const Matrix& Y) {
  if (X.rows() != Y.rows() || X.rows() == 0) throw std::invalid_argument("fit_readout: row counts differ or are zero");
  LinearReadout r;
  const Eigen::RowVectorXd mx = X.colwise().mean(), my = Y.colwise().mean();
  const Matrix Xc = X.rowwise() - mx, Yc = Y.rowwise() - my;
  r.W = Matrix::Zero(X.cols(), Y.cols());
  if (Xc.cwiseAbs().maxCoeff() == 0.0) {
    r.intercept_only = true;
  } else {
    Eigen::ColPivHouseholderQR<Matrix> qr(Xc);
    if (qr.rank() == Xc.cols()) {
      r.W = qr.solve(Yc);
    } else {
      Matrix G = Xc.transpose() * Xc;
      G.diagonal().array() += kReadoutRidge;
      r.W = G.ldlt().solve(Xc.transpose() * Yc);
    }
  }
  r.b = my - mx * r.W;
  return r;
}

// ---------------------------------------------------------------------------
// Timescale alignment

enum class AlignMethod { none, downsample, avg_pool };

struct Alignment {
  AlignMethod method = AlignMethod::none;
  std::size_t ratio = 1;

  static Alignment parse(const std::string& text) {
    if (text == "none") return {};
    for (auto [prefix, m] : {std::pair{std::string("downsample:"), AlignMethod::downsample},
                             std::pair{std::string("avg_pool:"), AlignMethod::avg_pool}}) {
      if (text.rfind(prefix, 0) == 0) {
        std::size_t pos = 0;
        long r = -1;
        try {
          r = std::stol(text.substr(prefix.size()), &pos);
        } catch (const std::exception&) {
        }
        if (r >= 1 && pos == text.size() - prefix.size()) return {m, static_cast<std::size_t>(r)};
      }
    }
    throw std::invalid_argument("align must be none, downsample:r or avg_pool:r, got '" + text + "'");
  }
};

// Downsampling keeps rows 0, r, 2r, ...; average pooling averages each block
// of r rows (a trailing partial block is averaged over its own length).
inline Matrix align_timescales(const Matrix& x, Alignment a) {
  if (a.ratio == 0) throw std::invalid_argument("align: ratio must be positive");
  if (a.method == AlignMethod::none || a.ratio == 1) return x;
  const Eigen::Index r = static_cast<Eigen::Index>(a.ratio);
  const Eigen::Index n = (x.rows() + r - 1) / r;
  Matrix out(n, x.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    if (a.method == AlignMethod::downsample) {
      out.row(i) = x.row(i * r);
    } else {
      const Eigen::Index len = std::min(r, x.rows() - i * r);
      out.row(i) = x.middleRows(i * r, len).colwise().mean();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Latent and behavior readout scores

struct ReadoutScore {
  double mean_cc = 0;
  std::vector<double> per_dim_cc;
  double r2 = 0;  // mean over dimensions
};

// Readout fitted on the training trials. Per-trial, per-dimension CC on the
// test trials, averaged over trials first and then over dimensions.
inline ReadoutScore latent_recon_score(const std::vector<Matrix>& inferred_train, const std::vector<Matrix>& true_train,
                                       const std::vector<Matrix>& inferred_test, const std::vector<Matrix>& true_test) {
  if (inferred_test.size() != true_test.size() || inferred_test.empty()) throw std::invalid_argument("latent_recon_score: test sets differ");
  const LinearReadout ro = fit_readout(vstack(inferred_train), vstack(true_train));
  const Eigen::Index q = true_test.front().cols();
  ReadoutScore s;
  s.per_dim_cc.assign(static_cast<std::size_t>(q), 0.0);
  for (std::size_t i = 0; i < inferred_test.size(); ++i) {
    const Matrix pred = ro.apply(inferred_test[i]);
    for (Eigen::Index j = 0; j < q; ++j)
      s.per_dim_cc[static_cast<std::size_t>(j)] += pearson_cc(Eigen::VectorXd(true_test[i].col(j)), Eigen::VectorXd(pred.col(j)));
  }
  for (auto& c : s.per_dim_cc) c /= static_cast<double>(inferred_test.size());
  s.mean_cc = std::accumulate(s.per_dim_cc.begin(), s.per_dim_cc.end(), 0.0) / static_cast<double>(q);
  const Matrix all_true = vstack(true_test), all_pred = ro.apply(vstack(inferred_test));
  for (Eigen::Index j = 0; j < q; ++j) {
    Eigen::VectorXd t = all_true.col(j), p = all_pred.col(j);
    s.r2 += r_squared({t.data(), static_cast<std::size_t>(t.size())}, {p.data(), static_cast<std::size_t>(p.size())});
  }
  s.r2 /= static_cast<double>(q);
  return s;
}

// Behavior decoding: CC and R^2 per dimension over the concatenated test
// steps, then averaged over dimensions.
inline ReadoutScore behavior_decode_score(const Matrix& latents_train, const Matrix& behavior_train,
                                          const Matrix& latents_test, const Matrix& behavior_test) {
  const LinearReadout ro = fit_readout(latents_train, behavior_train);
  const Matrix pred = ro.apply(latents_test);
  ReadoutScore s;
  for (Eigen::Index j = 0; j < behavior_test.cols(); ++j) {
    Eigen::VectorXd t = behavior_test.col(j), p = pred.col(j);
    s.per_dim_cc.push_back(pearson_cc(t, p));
    s.r2 += r_squared({t.data(), static_cast<std::size_t>(t.size())}, {p.data(), static_cast<std::size_t>(p.size())});
  }
  s.mean_cc = std::accumulate(s.per_dim_cc.begin(), s.per_dim_cc.end(), 0.0) / static_cast<double>(s.per_dim_cc.size());
  s.r2 /= static_cast<double>(behavior_test.cols());
  return s;
}

// ---------------------------------------------------------------------------
// Inference over trials with inference-time sample dropping

struct InferredTrial {
  Matrix x;          // (T - offset) x n_x
  Matrix s_mean;     // decoded s (rates for Poisson), empty if unused
  Matrix y_mean;
  std::size_t offset = 0;
  std::vector<std::uint8_t> mask_s, mask_y;  // masks used for inference
};

// Drops observed samples of each modality independently (per trial, per step)
// and runs inference one trial at a time. The rng is advanced in trial order.
inline std::vector<InferredTrial> infer_trials(const MrineModel& model, const std::vector<Trial>& trials, InferMode mode,
                                               double drop_s = 0.0, double drop_y = 0.0, std::uint64_t seed = 0) {
  if (drop_s < 0 || drop_s > 1 || drop_y < 0 || drop_y > 1) throw std::invalid_argument("drop probabilities must be in [0, 1]");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution ds(drop_s), dy(drop_y);
  std::vector<InferredTrial> out;
  for (const auto& tr : trials) {
    Trial t = tr;
    for (auto& m : t.s.mask)
      if (m && ds(rng)) m = 0;
    for (auto& m : t.y.mask)
      if (m && dy(rng)) m = 0;
    Batch b = make_batch({t.s}, {t.y});
    InferenceResult r = infer(model, b, mode);
    InferredTrial it;
    it.offset = r.offset;
    it.x = to_matrix(r.x.values(), model.config.n_x);
    if (r.heads.s_mean.defined()) it.s_mean = to_matrix(r.heads.s_mean.values(), model.config.n_s);
    if (r.heads.y_mean.defined()) it.y_mean = to_matrix(r.heads.y_mean.values(), model.config.n_y);
    it.mask_s = std::move(t.s.mask);
    it.mask_y = std::move(t.y.mask);
    out.push_back(std::move(it));
  }
  return out;
}

// Latent reconstruction from trials' inferred latents and true latent targets
// (T x q per trial). Predict-mode offsets drop the first rows of each target.
inline ReadoutScore latent_recon_from(const std::vector<InferredTrial>& train, const std::vector<Matrix>& truth_train,
                                      const std::vector<InferredTrial>& test, const std::vector<Matrix>& truth_test) {
  auto unpack = [](const std::vector<InferredTrial>& inf, const std::vector<Matrix>& truth, std::vector<Matrix>& x,
                   std::vector<Matrix>& t) {
    if (inf.size() != truth.size()) throw std::invalid_argument("latent_recon: trial count mismatch");
    for (std::size_t i = 0; i < inf.size(); ++i) {
      x.push_back(inf[i].x);
      t.push_back(truth[i].bottomRows(truth[i].rows() - static_cast<Eigen::Index>(inf[i].offset)));
    }
  };
  std::vector<Matrix> xtr, ttr, xte, tte;
  unpack(train, truth_train, xtr, ttr);
  unpack(test, truth_test, xte, tte);
  return latent_recon_score(xtr, ttr, xte, tte);
}

// ---------------------------------------------------------------------------
// Neural reconstruction

struct ReconScore {
  double s_auc = std::nan("");  // Poisson s: AUC; Gaussian s: CC
  double y_cc = std::nan("");
  std::size_t s_rows = 0, y_rows = 0;
};

// Reconstruction of each modality on the rows that were observed in the data
// but dropped for inference; with nothing dropped, on all observed rows.
inline ReconScore neural_recon_score(const MrineModel& model, const std::vector<Trial>& trials,
                                     const std::vector<InferredTrial>& inferred) {
  if (trials.size() != inferred.size()) throw std::invalid_argument("neural_recon_score: trial count mismatch");
  auto collect = [&](bool use_s, std::vector<double>& truth, std::vector<double>& pred, std::size_t n) {
    bool any_dropped = false;
    for (std::size_t i = 0; i < trials.size() && !any_dropped; ++i) {
      const auto& orig = use_s ? trials[i].s.mask : trials[i].y.mask;
      const auto& used = use_s ? inferred[i].mask_s : inferred[i].mask_y;
      for (std::size_t t = 0; t < orig.size(); ++t) any_dropped = any_dropped || (orig[t] && !used[t]);
    }
    std::size_t rows = 0;
    for (std::size_t i = 0; i < trials.size(); ++i) {
      const auto& seq = use_s ? trials[i].s : trials[i].y;
      const auto& used = use_s ? inferred[i].mask_s : inferred[i].mask_y;
      const Matrix& m = use_s ? inferred[i].s_mean : inferred[i].y_mean;
      const std::size_t off = inferred[i].offset;
      for (std::size_t t = off; t < seq.mask.size(); ++t) {
        if (!seq.mask[t] || (any_dropped && used[t])) continue;
        ++rows;
        for (std::size_t j = 0; j < n; ++j) {
          truth.push_back(seq.values.at(t * n + j));
          pred.push_back(m(static_cast<Eigen::Index>(t - off), static_cast<Eigen::Index>(j)));
        }
      }
    }
    return rows;
  };
  ReconScore out;
  if (model.config.uses_s()) {
    std::vector<double> truth, pred;
    out.s_rows = collect(true, truth, pred, model.config.n_s);
    if (out.s_rows > 1) {
      const Matrix T = to_matrix(truth, model.config.n_s), P = to_matrix(pred, model.config.n_s);
      out.s_auc = model.config.obs_model_s == ObsModel::poisson ? spike_recon_auc(P, T) : mean_column_cc(T, P);
    }
  }
  if (model.config.uses_y()) {
    std::vector<double> truth, pred;
    out.y_rows = collect(false, truth, pred, model.config.n_y);
    if (out.y_rows > 1) out.y_cc = mean_column_cc(to_matrix(truth, model.config.n_y), to_matrix(pred, model.config.n_y));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Robustness sweep

struct SweepPoint {
  double drop_s = 0, drop_y = 0;
  double latent_cc = std::nan("");
  ReconScore recon;
};

// For each (drop_s, drop_y) pair, infers the test trials in `mode` with
// samples dropped at inference only and scores the latent readout fitted on
// undropped training trials. Targets stay available at every step.
inline std::vector<SweepPoint> robustness_sweep(const MrineModel& model, const std::vector<Trial>& train,
                                                const std::vector<Matrix>& targets_train, const std::vector<Trial>& test,
                                                const std::vector<Matrix>& targets_test,
                                                const std::vector<std::pair<double, double>>& grid, std::uint64_t seed,
                                                InferMode mode = InferMode{InferMode::filter, 0}) {
  const auto inf_train = infer_trials(model, train, mode, 0.0, 0.0, seed);
  const LinearReadout ro = [&] {
    std::vector<Matrix> x, t;
    for (std::size_t i = 0; i < train.size(); ++i) {
      x.push_back(inf_train[i].x);
      t.push_back(targets_train[i].bottomRows(targets_train[i].rows() - static_cast<Eigen::Index>(inf_train[i].offset)));
    }
    return fit_readout(vstack(x), vstack(t));
  }();
  std::vector<SweepPoint> out;
  for (const auto& [ps, py] : grid) {
    SweepPoint p;
    p.drop_s = ps;
    p.drop_y = py;
    const auto inf = infer_trials(model, test, mode, ps, py, seed);
    double cc = 0;
    const Eigen::Index q = targets_test.front().cols();
    for (std::size_t i = 0; i < test.size(); ++i) {
      const Matrix pred = ro.apply(inf[i].x);
      const Matrix truth = targets_test[i].bottomRows(targets_test[i].rows() - static_cast<Eigen::Index>(inf[i].offset));
      cc += mean_column_cc(truth, pred);
    }
    p.latent_cc = q > 0 ? cc / static_cast<double>(test.size()) : std::nan("");
    p.recon = neural_recon_score(model, test, inf);
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// One-sided Wilcoxon signed-rank test

struct WilcoxonResult {
  double p = 1.0;
  double w_plus = 0.0;
  std::size_t n = 0;
  bool exact = true;
};

// H1: differences tend to be positive. Zero differences are discarded;
// |d| ties get midranks. Exact enumeration of all 2^n sign patterns for
// n <= 12, otherwise the normal approximation with tie-corrected variance and
// a 0.5 continuity correction.
inline WilcoxonResult wilcoxon_one_sided(const std::vector<double>& diffs) {
  std::vector<double> nz;
  for (double d : diffs) {
    if (!std::isfinite(d)) throw std::invalid_argument("wilcoxon: non-finite difference");
    if (d != 0.0) nz.push_back(d);
  }
  if (nz.size() < 5) throw std::invalid_argument("wilcoxon: need at least 5 nonzero differences, got " + std::to_string(nz.size()));
  std::vector<double> mag(nz.size());
  for (std::size_t i = 0; i < nz.size(); ++i) mag[i] = std::abs(nz[i]);
  const auto ranks = midranks(mag);
  WilcoxonResult r;
  r.n = nz.size();
  for (std::size_t i = 0; i < nz.size(); ++i)
    if (nz[i] > 0) r.w_plus += ranks[i];
  if (r.n <= 12) {
    const std::uint32_t patterns = 1u << r.n;
    std::uint32_t at_least = 0;
    for (std::uint32_t mask = 0; mask < patterns; ++mask) {
      double w = 0;
      for (std::size_t i = 0; i < r.n; ++i)
        if (mask & (1u << i)) w += ranks[i];
      if (w >= r.w_plus - 1e-9) ++at_least;
    }
    r.p = static_cast<double>(at_least) / patterns;
    return r;
  }
  r.exact = false;
  const double n = static_cast<double>(r.n);
  double var = n * (n + 1) * (2 * n + 1) / 24.0;
  auto sorted = mag;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    var -= (t * t * t - t) / 48.0;
    i = j;
  }
  const double z = (r.w_plus - n * (n + 1) / 4.0 - 0.5) / std::sqrt(var);
  r.p = 0.5 * std::erfc(z / std::sqrt(2.0));
  return r;
}

}  // namespace mrine::eval
