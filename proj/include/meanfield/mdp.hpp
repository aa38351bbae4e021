#pragma once

// Second-order analysis of the particle fields: limit covariances, rate
// functions (quadratic, spectral-series and variational forms), tilted-mean
// Laplace estimators with jackknife errors, and the batched trend checks
// (sweep, remainder tail, bracket drift).

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "meanfield/flow.hpp"
#include "meanfield/measure.hpp"
#include "meanfield/particle.hpp"

namespace meanfield {

struct DegenerateBatch : Error {
  using Error::Error;
};

/// Scaling schedule alpha(N) = N^beta, beta in (0,1): faster than constant,
/// slower than N.
struct SpeedSchedule {
  double beta = 0.5;
  std::vector<int> n_grid;

  SpeedSchedule(double b, std::vector<int> grid) : beta(b), n_grid(std::move(grid)) {
    if (!(beta > 0.0 && beta < 1.0))
      throw Error("SpeedSchedule: beta must lie strictly in (0,1), got " + std::to_string(beta));
    for (size_t i = 0; i < n_grid.size(); ++i) {
      if (n_grid[i] < 1) throw Error("SpeedSchedule: particle counts must be positive");
      if (i > 0 && n_grid[i] <= n_grid[i - 1])
        throw Error("SpeedSchedule: particle grid must be strictly increasing");
    }
  }

  double alpha(int N) const { return std::pow(static_cast<double>(N), beta); }
};

/// Limit variance/covariance of the local field at time n:
///   n = 0 : Var_{eta_0}(f)
///   n >= 1: eta_{n-1} K (f - Kf)(g - Kg) with K frozen at the exact flow.
inline double cov_v(const McKeanSpec& spec, const FlowTrajectory& flow, int n, const Observable& f,
                    const Observable& g) {
  if (n < 0 || n >= static_cast<int>(flow.size()))
    throw TimeOutOfRange("cov_v: time outside the flow");
  if (n == 0) {
    double mf = flow[0](f), mg = flow[0](g), s = 0.0;
    for (int x = 0; x < flow[0].size(); ++x) s += flow[0][x] * (f[x] - mf) * (g[x] - mg);
    return s;
  }
  MarkovKernel K = spec.kernel_from(n - 1, flow[n - 1]);
  return detail::step_covariance(K, flow[n - 1].weights(), f, g);
}

/// Limit covariance of the global field: W_n collects the local fields pushed
/// through the derivative semigroup, so
///   E W_n(f) W_n(g) = sum_{p<=n} cov_v(p, D_{p,n} f, D_{p,n} g).
inline double cov_w(const FeynmanKacModel& model, const McKeanSpec& spec,
                    const FlowTrajectory& flow, int n, const Observable& f, const Observable& g) {
  double s = 0.0;
  for (int p = 0; p <= n; ++p) {
    FirstOrderOperator D = semigroup_d(model, p, n, flow);
    s += cov_v(spec, flow, p, D.apply(f), D.apply(g));
  }
  return s;
}

enum class FieldKind { V, W };

/// Symmetric covariance matrix of a field over a list of observables.
struct CovarianceMatrix {
  FieldKind field = FieldKind::V;
  int time = 0;
  int dim = 0;
  std::vector<double> m;  // row-major, symmetric by construction

  double operator()(int i, int j) const { return m[static_cast<size_t>(i) * dim + j]; }

  double min_eigenvalue() const {
    Eigen::MatrixXd A = Eigen::Map<const Eigen::MatrixXd>(m.data(), dim, dim);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
    return es.eigenvalues().minCoeff();
  }
};

inline CovarianceMatrix cov_matrix(const FeynmanKacModel& model, const McKeanSpec& spec,
                                   const FlowTrajectory& flow, int n,
                                   std::span<const Observable> fs, FieldKind field) {
  CovarianceMatrix C;
  C.field = field;
  C.time = n;
  C.dim = static_cast<int>(fs.size());
  C.m.assign(static_cast<size_t>(C.dim) * C.dim, 0.0);
  for (int i = 0; i < C.dim; ++i)
    for (int j = i; j < C.dim; ++j) {
      double v = field == FieldKind::V ? cov_v(spec, flow, n, fs[i], fs[j])
                                       : cov_w(model, spec, flow, n, fs[i], fs[j]);
      C.m[static_cast<size_t>(i) * C.dim + j] = v;
      C.m[static_cast<size_t>(j) * C.dim + i] = v;
    }
  return C;
}

/// Covariance matrix over the indicator basis of the time-n space.
inline CovarianceMatrix cov_matrix_basis(const FeynmanKacModel& model, const McKeanSpec& spec,
                                         const FlowTrajectory& flow, int n, FieldKind field) {
  const StateSpace& space = model.space(n);
  std::vector<Observable> basis;
  basis.reserve(space.size);
  for (int x = 0; x < space.size; ++x) basis.push_back(Observable::indicator(space, x));
  return cov_matrix(model, spec, flow, n, basis, field);
}

struct RateEvaluation {
  enum class Method { Quadratic, SpectralSeries, VariationalNumeric };
  enum class Reason {
    None,
    NonzeroTotalMass,
    NotAbsolutelyContinuous,
    OutsideRange,
    DivergentSeries
  };

  double value = 0.0;  // +infinity is a legitimate value, never an error
  Method method = Method::Quadratic;
  Reason reason = Reason::None;
  bool converged = true;
  long terms = 0;
  double rho = 0.0;     // spectral radius on the orthocomplement (series form)
  double cutoff = 0.0;  // eigenvalue cutoff (quadratic form)

  bool finite() const { return std::isfinite(value); }
  std::string method_name() const {
    switch (method) {
      case Method::Quadratic: return "quadratic";
      case Method::SpectralSeries: return "spectral-series";
      case Method::VariationalNumeric: return "variational-numeric";
    }
    return "";
  }
  std::string reason_name() const {
    switch (reason) {
      case Reason::None: return "";
      case Reason::NonzeroTotalMass: return "NonzeroTotalMass";
      case Reason::NotAbsolutelyContinuous: return "NotAbsolutelyContinuous";
      case Reason::OutsideRange: return "OutsideRange";
      case Reason::DivergentSeries: return "DivergentSeries";
    }
    return "";
  }
};

/// Legendre transform of a centered Gaussian with covariance C:
///   sup_u ( <u,v> - u'Cu/2 ) = v'C^+ v / 2 on range(C), +infinity elsewhere.
/// Eigenvalues below 1e-10 * lambda_max count as null; range membership is
/// decided at the same cutoff.
inline RateEvaluation rate_quadratic(const CovarianceMatrix& C, std::span<const double> v) {
  if (static_cast<int>(v.size()) != C.dim) throw Error("rate_quadratic: dimension mismatch");
  RateEvaluation out;
  out.method = RateEvaluation::Method::Quadratic;

  Eigen::MatrixXd A = Eigen::Map<const Eigen::MatrixXd>(C.m.data(), C.dim, C.dim);
  A = 0.5 * (A + A.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
  const auto& lam = es.eigenvalues();
  const auto& U = es.eigenvectors();
  double lam_max = std::max(0.0, lam.maxCoeff());
  out.cutoff = 1e-10 * lam_max;

  Eigen::VectorXd vv = Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
  double vnorm = vv.norm();
  if (vnorm == 0.0) {
    out.value = 0.0;
    return out;
  }
  double null_sq = 0.0, value = 0.0;
  for (int i = 0; i < C.dim; ++i) {
    double c = U.col(i).dot(vv);
    if (lam[i] > out.cutoff)
      value += c * c / lam[i];
    else
      null_sq += c * c;
  }
  if (std::sqrt(null_sq) > 1e-8 * vnorm) {
    out.value = std::numeric_limits<double>::infinity();
    out.reason = RateEvaluation::Reason::OutsideRange;
    return out;
  }
  out.value = 0.5 * value;
  return out;
}

/// Projected-gradient ascent on u -> <u,v> - u'Cu/2. Slow but independent of
/// the eigendecomposition path; used as a cross-check and fallback.
inline double quadratic_ascent_value(const CovarianceMatrix& C, std::span<const double> v,
                                     int iters = 20000) {
  Eigen::MatrixXd A = Eigen::Map<const Eigen::MatrixXd>(C.m.data(), C.dim, C.dim);
  Eigen::VectorXd vv = Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
  double lam_max = std::max(es.eigenvalues().maxCoeff(), 0.0);
  if (lam_max == 0.0) return 0.0;
  double step = 1.0 / lam_max;
  Eigen::VectorXd u = Eigen::VectorXd::Zero(C.dim);
  for (int it = 0; it < iters; ++it) u += step * (vv - A * u);
  return u.dot(vv) - 0.5 * u.dot(A * u);
}

namespace detail {
// Forward operator h -> A h of the one-step backward/forward composition
// restricted to the support of the arrival law, represented together with the
// arrival weights. A is self-adjoint and positive on L2(arrival law) with
// norm at most 1.
struct SeriesOperator {
  std::vector<int> support;       // arrival states with positive mass
  std::vector<double> eta;        // arrival weights on the support
  std::vector<double> a;          // |support| x |support|, row-major
  int dim() const { return static_cast<int>(support.size()); }
};

inline SeriesOperator series_operator(const McKeanSpec& spec, const FlowTrajectory& flow, int n) {
  SeriesOperator op;
  const ProbabilityMeasure& arrival = flow[n];
  for (int x = 0; x < arrival.size(); ++x)
    if (arrival[x] > 0.0) op.support.push_back(x);
  const int s = op.dim();
  op.eta.resize(s);
  for (int i = 0; i < s; ++i) op.eta[i] = arrival[op.support[i]];
  op.a.assign(static_cast<size_t>(s) * s, 0.0);

  if (n == 0) {
    // Sampling from the initial law is state-independent: A(y, y') = eta_0(y').
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < s; ++j) op.a[static_cast<size_t>(i) * s + j] = op.eta[j];
    return op;
  }

  const ProbabilityMeasure& prev = flow[n - 1];
  MarkovKernel K = spec.kernel_from(n - 1, prev);
  // A(y, y') = sum_x prev(x) K(x,y) K(x,y') / arrival(y): the backward step to
  // x followed by the forward step to y'.
  for (int i = 0; i < s; ++i) {
    int y = op.support[i];
    for (int x = 0; x < prev.size(); ++x) {
      double w = prev[x] * K(x, y) / op.eta[i];
      if (w == 0.0) continue;
      for (int j = 0; j < s; ++j) op.a[static_cast<size_t>(i) * s + j] += w * K(x, op.support[j]);
    }
  }
  return op;
}
}  // namespace detail

/// Rate of the local field at time n evaluated at a signed measure, via the
/// spectral series
///   I_n(mu) = (1/2) sum_{m>=0} <h, A^m h>_{eta_n},   h = d mu / d eta_n,
/// which requires mu(E) = 0 and mu << eta_n; the series diverges (value
/// +infinity) when h overlaps the fixed space of A. Terms are accumulated
/// until |s_m| < tol * (1 - rho) * max(1, s_0), with a hard cap of 1e6 terms.
inline RateEvaluation rate_I_measure(const McKeanSpec& spec, const FlowTrajectory& flow, int n,
                                     const SignedMeasure& mu, double tol = 1e-12) {
  if (n < 0 || n >= static_cast<int>(flow.size()))
    throw TimeOutOfRange("rate_I_measure: time outside the flow");
  require_same_space(mu.space(), flow[n].space(), "rate_I_measure");
  RateEvaluation out;
  out.method = RateEvaluation::Method::SpectralSeries;

  if (std::fabs(mu.total_mass()) > 1e-12) {
    out.value = std::numeric_limits<double>::infinity();
    out.reason = RateEvaluation::Reason::NonzeroTotalMass;
    return out;
  }
  const ProbabilityMeasure& eta = flow[n];
  for (int x = 0; x < mu.size(); ++x)
    if (eta[x] == 0.0 && mu[x] != 0.0) {
      out.value = std::numeric_limits<double>::infinity();
      out.reason = RateEvaluation::Reason::NotAbsolutelyContinuous;
      return out;
    }

  detail::SeriesOperator op = detail::series_operator(spec, flow, n);
  const int s = op.dim();
  std::vector<double> h(s);
  for (int i = 0; i < s; ++i) h[i] = mu[op.support[i]] / op.eta[i];

  // Spectrum of A in the eta-weighted geometry, via the similar symmetric
  // matrix B = D^{1/2} A D^{-1/2}.
  Eigen::MatrixXd B(s, s);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j)
      B(i, j) = std::sqrt(op.eta[i]) * op.a[static_cast<size_t>(i) * s + j] / std::sqrt(op.eta[j]);
  B = 0.5 * (B + B.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(B);
  const auto& lam = es.eigenvalues();
  const auto& U = es.eigenvectors();

  Eigen::VectorXd hb(s);
  for (int i = 0; i < s; ++i) hb[i] = std::sqrt(op.eta[i]) * h[i];
  double hnorm = hb.norm();
  if (hnorm == 0.0) {
    out.value = 0.0;
    return out;
  }

  constexpr double kFixedTol = 1e-10;
  double fixed_sq = 0.0, rho = 0.0;
  for (int i = 0; i < s; ++i) {
    if (lam[i] >= 1.0 - kFixedTol) {
      double c = U.col(i).dot(hb);
      fixed_sq += c * c;
    } else {
      rho = std::max(rho, std::fabs(lam[i]));
    }
  }
  out.rho = std::min(rho, 1.0 - 1e-15);
  if (std::sqrt(fixed_sq) > 1e-8 * hnorm) {
    out.value = std::numeric_limits<double>::infinity();
    out.reason = RateEvaluation::Reason::DivergentSeries;
    return out;
  }

  std::vector<double> v = h, next(s);
  double sum = 0.0, s0 = 0.0;
  const long cap = 1000000;
  for (long m = 0; m < cap; ++m) {
    double term = 0.0;
    for (int i = 0; i < s; ++i) term += op.eta[i] * h[i] * v[i];
    sum += term;
    ++out.terms;
    if (m == 0) s0 = std::fabs(term);
    if (std::fabs(term) < tol * (1.0 - out.rho) * std::max(1.0, s0)) {
      out.value = 0.5 * sum;
      return out;
    }
    for (int i = 0; i < s; ++i) {
      double acc = 0.0;
      const double* row = op.a.data() + static_cast<size_t>(i) * s;
      for (int j = 0; j < s; ++j) acc += row[j] * v[j];
      next[i] = acc;
    }
    v.swap(next);
  }
  out.converged = false;  // cap reached; partial sum reported
  out.value = 0.5 * sum;
  return out;
}

/// Rate of a field at time n evaluated at a signed measure, via the
/// variational form sup_f ( mu(f) - Var(field(f))/2 ), solved in closed form
/// through the pseudo-inverse of the indicator-basis covariance. Serves as an
/// algebraically independent cross-check of the series form.
inline RateEvaluation rate_variational_numeric(const FeynmanKacModel& model, const McKeanSpec& spec,
                                               const FlowTrajectory& flow, int n,
                                               const SignedMeasure& mu, FieldKind field) {
  require_same_space(mu.space(), model.space(n), "rate_variational_numeric");
  CovarianceMatrix C = cov_matrix_basis(model, spec, flow, n, field);
  RateEvaluation out = rate_quadratic(C, mu.weights());
  out.method = RateEvaluation::Method::VariationalNumeric;
  return out;
}

/// Rate of the global field at time n: the quadratic form of the W
/// covariance on the indicator basis.
inline RateEvaluation rate_J(const FeynmanKacModel& model, const McKeanSpec& spec,
                             const FlowTrajectory& flow, int n, const SignedMeasure& nu) {
  require_same_space(nu.space(), model.space(n), "rate_J");
  CovarianceMatrix C = cov_matrix_basis(model, spec, flow, n, FieldKind::W);
  return rate_quadratic(C, nu.weights());
}

/// Scaled log-exponential-moment estimate over replications:
///   (1/alpha) log ( (1/R) sum_r exp( sqrt(alpha) x_r ) ),
/// computed with max-subtraction. The jackknife standard error is exact
/// leave-one-out. `flagged` reports estimator degeneracy: the top 1% of
/// replications carrying more than half of the exponential mass.
struct LaplaceEstimate {
  double value = 0.0;
  double se = 0.0;
  double alpha = 0.0;
  int R = 0;
  double top_share = 0.0;
  bool flagged = false;
};

inline LaplaceEstimate laplace_estimate(std::span<const double> samples, double alpha) {
  const int R = static_cast<int>(samples.size());
  if (R < 2) throw DegenerateBatch("laplace_estimate: need at least 2 replications");
  if (!(alpha > 0.0)) throw Error("laplace_estimate: alpha must be positive");
  LaplaceEstimate out;
  out.alpha = alpha;
  out.R = R;
  const double sq = std::sqrt(alpha);
  double m = -std::numeric_limits<double>::infinity();
  for (double x : samples) m = std::max(m, sq * x);
  std::vector<double> e(R);
  double S = 0.0;
  for (int r = 0; r < R; ++r) {
    e[r] = std::exp(sq * samples[r] - m);
    S += e[r];
  }
  out.value = (m + std::log(S / R)) / alpha;

  // Leave-one-out values, guarded against total collapse onto one sample.
  std::vector<double> loo(R);
  double loo_mean = 0.0;
  for (int r = 0; r < R; ++r) {
    double rest = std::max(S - e[r], 1e-300);
    loo[r] = (m + std::log(rest / (R - 1))) / alpha;
    loo_mean += loo[r];
  }
  loo_mean /= R;
  double ss = 0.0;
  for (int r = 0; r < R; ++r) ss += (loo[r] - loo_mean) * (loo[r] - loo_mean);
  out.se = std::sqrt(ss * (R - 1) / R);

  std::vector<double> shares = e;
  std::sort(shares.begin(), shares.end(), std::greater<>());
  int top = std::max(1, static_cast<int>(std::ceil(0.01 * R)));
  double top_mass = 0.0;
  for (int r = 0; r < top; ++r) top_mass += shares[r];
  out.top_share = top_mass / S;
  out.flagged = out.top_share > 0.5;
  return out;
}

/// 95% Wilson score interval for a binomial proportion.
struct WilsonInterval {
  double lo = 0.0, hi = 0.0;
};

inline WilsonInterval wilson_interval(int64_t count, int64_t n, double z = 1.959963984540054) {
  if (n <= 0) throw Error("wilson_interval: need positive sample count");
  if (count < 0 || count > n) throw Error("wilson_interval: count outside [0, n]");
  double p = static_cast<double>(count) / n;
  double z2 = z * z;
  double denom = 1.0 + z2 / n;
  double center = (p + z2 / (2.0 * n)) / denom;
  double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  // The endpoints are exact at the boundary counts; do not let rounding in
  // the square root leak past them.
  double lo = count == 0 ? 0.0 : std::max(0.0, center - half);
  double hi = count == n ? 1.0 : std::min(1.0, center + half);
  return {lo, hi};
}

/// A Monte Carlo number with its provenance.
struct McNumber {
  double estimate = 0.0;
  double se = 0.0;
  int R = 0;
  int N = 0;
  uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Batched trend experiments over a particle-count grid.

struct MdpSweepRow {
  int N = 0;
  double alpha = 0.0;
  LaplaceEstimate local;   // V-sum estimate
  LaplaceEstimate global;  // W estimate
  double target_local = 0.0;
  double target_global = 0.0;
  double gap_local = 0.0;
  double gap_global = 0.0;
};

struct MdpSweepReport {
  SpeedSchedule schedule;
  int time = 0;
  uint64_t seed = 0;
  int R = 0;
  std::vector<MdpSweepRow> rows;
  bool gaps_nonincreasing = true;  // local gaps, within 2 combined jackknife se
};

/// For each N on the grid, estimate the scaled log-exponential moments of the
/// V-sum and of W against their limit targets.
inline MdpSweepReport mdp_sweep(const FeynmanKacModel& model, const McKeanSpec& spec,
                                std::span<const Observable> f_seq, int n,
                                const SpeedSchedule& schedule, int R, const RngSpec& rng,
                                int workers = 1) {
  if (static_cast<int>(f_seq.size()) != n + 1)
    throw Error("mdp_sweep: need one observable per time 0..n");
  MdpSweepReport report{schedule, n, rng.seed, R, {}, true};
  FlowTrajectory flow = exact_flow(model, n);

  double target_local = 0.0;
  for (int p = 0; p <= n; ++p) target_local += 0.5 * cov_v(spec, flow, p, f_seq[p], f_seq[p]);
  double target_global = 0.5 * cov_w(model, spec, flow, n, f_seq[n], f_seq[n]);

  RunExtractor ex;
  ex.names = {"v_sum", "w"};
  ex.fill = [&](const SimulationRun& run, std::span<double> row) {
    double msum = 0.0;
    for (int p = 0; p <= n; ++p) msum += field_v(run, spec, p, f_seq[p]);
    row[0] = msum;
    row[1] = field_w(run, flow, n, f_seq[n]);
  };

  for (int N : schedule.n_grid) {
    BatchOptions opts;
    opts.workers = workers;
    ReplicationBatch batch = replicate(spec, n, N, R, rng, ex, opts);
    MdpSweepRow row;
    row.N = N;
    row.alpha = schedule.alpha(N);
    row.local = laplace_estimate(batch.column(0), row.alpha);
    row.global = laplace_estimate(batch.column(1), row.alpha);
    row.target_local = target_local;
    row.target_global = target_global;
    row.gap_local = std::fabs(row.local.value - target_local);
    row.gap_global = std::fabs(row.global.value - target_global);
    report.rows.push_back(row);
  }
  for (size_t i = 1; i < report.rows.size(); ++i) {
    const auto& a = report.rows[i - 1];
    const auto& b = report.rows[i];
    double slack = 2.0 * std::sqrt(a.local.se * a.local.se + b.local.se * b.local.se);
    if (b.gap_local > a.gap_local + slack) report.gaps_nonincreasing = false;
  }
  return report;
}

struct RemainderTailRow {
  int N = 0;
  double alpha = 0.0;
  double threshold = 0.0;     // eps * sqrt(alpha)
  int64_t count = 0;          // replications with |R_n(f)| >= threshold
  double freq = 0.0;
  WilsonInterval wilson;
  double mean_abs = 0.0;      // E |R_n(f)|
  double exp_moment = 0.0;    // E exp(t |R_n(f)|) at t = 1/(4 r_hat)
  double cor_threshold = 0.0; // eps + r_hat / sqrt(N)
  double cor_freq = 0.0;
  double cor_bound = 0.0;     // 2 exp(-(eps sqrt(N))/(2 r_hat) (1 - delta))
};

struct RemainderTailReport {
  int time = 0;
  double eps = 0.0;
  double r_hat = 0.0;
  double t = 0.0;
  double exp_bound = 0.0;  // (1 - 2 r_hat t)^{-1/2}
  uint64_t seed = 0;
  int R = 0;
  std::vector<RemainderTailRow> rows;
  bool freqs_nonincreasing = true;
  bool exp_moment_ok = true;     // every row below exp_bound
  bool cor_compatible = true;    // every row below its tail bound
  bool moments_dominated = true; // E|R| <= r_hat on every row
};

/// Tail behaviour of the second-order remainder across the particle grid,
/// checked against the budget r_hat from fk_constants.
inline RemainderTailReport remainder_tail_check(const FeynmanKacModel& model,
                                                const McKeanSpec& spec, const Observable& f, int n,
                                                const SpeedSchedule& schedule, int R, double eps,
                                                const RngSpec& rng, int workers = 1) {
  RemainderTailReport report;
  report.time = n;
  report.eps = eps;
  report.seed = rng.seed;
  report.R = R;
  report.r_hat = fk_constants(model).r_bound.at(n);
  report.t = 1.0 / (4.0 * report.r_hat);
  report.exp_bound = 1.0 / std::sqrt(1.0 - 2.0 * report.r_hat * report.t);  // = sqrt(2)

  FlowTrajectory flow = exact_flow(model, n);
  std::vector<Observable> dpnf = remainder_observables(model, flow, n, f);

  RunExtractor ex;
  ex.names = {"abs_r"};
  ex.fill = [&](const SimulationRun& run, std::span<double> row) {
    row[0] = std::fabs(remainder_r(run, spec, flow, n, f, dpnf));
  };

  for (int N : schedule.n_grid) {
    BatchOptions opts;
    opts.workers = workers;
    ReplicationBatch batch = replicate(spec, n, N, R, rng, ex, opts);
    std::vector<double> abs_r = batch.column(0);

    RemainderTailRow row;
    row.N = N;
    row.alpha = schedule.alpha(N);
    row.threshold = eps * std::sqrt(row.alpha);
    row.cor_threshold = eps + report.r_hat / std::sqrt(static_cast<double>(N));
    double sq_n = std::sqrt(static_cast<double>(N));
    double ratio = eps * sq_n / report.r_hat;
    double delta = std::log1p(ratio) / ratio;
    row.cor_bound = 2.0 * std::exp(-0.5 * ratio * (1.0 - delta));

    int64_t cor_count = 0;
    double exp_sum = 0.0, abs_sum = 0.0;
    for (double a : abs_r) {
      if (a >= row.threshold) ++row.count;
      if (a >= row.cor_threshold) ++cor_count;
      exp_sum += std::exp(report.t * a);
      abs_sum += a;
    }
    row.freq = static_cast<double>(row.count) / R;
    row.cor_freq = static_cast<double>(cor_count) / R;
    row.wilson = wilson_interval(row.count, R);
    row.exp_moment = exp_sum / R;
    row.mean_abs = abs_sum / R;

    if (row.exp_moment >= report.exp_bound) report.exp_moment_ok = false;
    if (row.cor_freq > row.cor_bound) report.cor_compatible = false;
    if (row.mean_abs > report.r_hat) report.moments_dominated = false;
    if (!report.rows.empty() && row.freq > report.rows.back().freq)
      report.freqs_nonincreasing = false;
    report.rows.push_back(row);
  }
  return report;
}

struct BracketDriftRow {
  int N = 0;
  double mean_gap = 0.0;  // E |bracket_N - bracket_limit|
  double se = 0.0;
};

struct BracketDriftReport {
  int time = 0;
  double exact_bracket_value = 0.0;
  uint64_t seed = 0;
  int R = 0;
  std::vector<BracketDriftRow> rows;
  double slope = 0.0;  // log-log regression of mean gap on N
  bool slope_in_band = true;
};

/// Mean absolute drift of the empirical predictable bracket from its limit,
/// with the fitted log-log decay rate (the expected rate is -1/2).
inline BracketDriftReport bracket_drift_check(const McKeanSpec& spec,
                                              std::span<const Observable> f_seq, int n,
                                              std::span<const int> n_grid, int R,
                                              const RngSpec& rng, int workers = 1) {
  BracketDriftReport report;
  report.time = n;
  report.seed = rng.seed;
  report.R = R;
  FlowTrajectory flow = exact_flow(spec, n);
  report.exact_bracket_value = exact_bracket(spec, flow, f_seq, n);

  RunExtractor ex;
  ex.names = {"abs_gap"};
  ex.fill = [&](const SimulationRun& run, std::span<double> row) {
    row[0] = std::fabs(martingale_bracket(run, spec, f_seq, n) - report.exact_bracket_value);
  };

  for (int N : n_grid) {
    BatchOptions opts;
    opts.workers = workers;
    ReplicationBatch batch = replicate(spec, n, N, R, rng, ex, opts);
    ColumnSummary s = batch.summary(0);
    report.rows.push_back({N, s.mean, s.se});
  }

  // Least-squares slope of log(mean gap) against log(N).
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  const int k = static_cast<int>(report.rows.size());
  for (const auto& row : report.rows) {
    double x = std::log(static_cast<double>(row.N)), y = std::log(row.mean_gap);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  report.slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
  report.slope_in_band = report.slope >= -0.65 && report.slope <= -0.35;
  return report;
}

}  // namespace meanfield
