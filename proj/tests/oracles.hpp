#pragma once

// Shared model builders and independent reference implementations used to
// cross-check library results. These deliberately avoid the library's own
// algorithms (different solvers, different accumulation order).

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <meanfield.hpp>

namespace testkit {

using namespace meanfield;

// --- model builders --------------------------------------------------------

/// 2-state model: eta_0=(1/2,1/2), G=(1/2,1), M=[[0.7,0.3],[0.4,0.6]].
/// The flow fixed point is (1/2,1/2) at every time.
inline FeynmanKacModel running_model(int horizon) {
  StateSpace s(2);
  std::vector<StateSpace> spaces(horizon + 1, s);
  std::vector<Observable> pots(horizon, Observable(s, {0.5, 1.0}));
  std::vector<MarkovKernel> muts(horizon, MarkovKernel(s, s, {0.7, 0.3, 0.4, 0.6}));
  return FeynmanKacModel(std::move(spaces), std::move(pots), std::move(muts),
                         ProbabilityMeasure(s, {0.5, 0.5}));
}

/// Same mutation chain with a flat potential: selection is the identity and
/// the flow is the plain Markov marginal flow.
inline FeynmanKacModel flat_potential_model(int horizon) {
  StateSpace s(2);
  std::vector<StateSpace> spaces(horizon + 1, s);
  std::vector<Observable> pots(horizon, Observable(s, {1.0, 1.0}));
  std::vector<MarkovKernel> muts(horizon, MarkovKernel(s, s, {0.7, 0.3, 0.4, 0.6}));
  return FeynmanKacModel(std::move(spaces), std::move(pots), std::move(muts),
                         ProbabilityMeasure(s, {0.5, 0.5}));
}

/// Flat potential and a constant kernel: every particle draw is iid uniform.
inline FeynmanKacModel constant_kernel_model(int horizon, int d = 2) {
  StateSpace s(d);
  std::vector<StateSpace> spaces(horizon + 1, s);
  std::vector<Observable> pots(horizon, Observable::constant(s, 1.0));
  std::vector<double> flat(static_cast<size_t>(d) * d, 1.0 / d);
  std::vector<MarkovKernel> muts(horizon, MarkovKernel(s, s, flat));
  return FeynmanKacModel(std::move(spaces), std::move(pots), std::move(muts),
                         ProbabilityMeasure::uniform(s));
}

/// Random model with everything bounded away from the degenerate edges:
/// potentials in [0.3, 1], kernel and initial entries at least 1/(3d).
inline FeynmanKacModel random_model(std::mt19937_64& gen, int horizon, int max_d,
                                    bool flat_potential = false) {
  std::uniform_int_distribution<int> dim(2, max_d);
  std::uniform_real_distribution<double> unif(0.5, 1.5);
  std::uniform_real_distribution<double> pot(0.3, 1.0);
  std::vector<StateSpace> spaces;
  for (int t = 0; t <= horizon; ++t) spaces.emplace_back(dim(gen));

  auto simplex = [&](int d) {
    std::vector<double> w(d);
    double tot = 0.0;
    for (double& v : w) tot += (v = unif(gen));
    for (double& v : w) v /= tot;
    return w;
  };

  ProbabilityMeasure initial(spaces[0], simplex(spaces[0].size));
  std::vector<Observable> pots;
  std::vector<MarkovKernel> muts;
  for (int t = 0; t < horizon; ++t) {
    std::vector<double> g(spaces[t].size);
    for (double& v : g) v = flat_potential ? 1.0 : pot(gen);
    pots.emplace_back(spaces[t], std::move(g));
    std::vector<double> rows;
    for (int x = 0; x < spaces[t].size; ++x) {
      auto r = simplex(spaces[t + 1].size);
      rows.insert(rows.end(), r.begin(), r.end());
    }
    muts.emplace_back(spaces[t], spaces[t + 1], std::move(rows));
  }
  return FeynmanKacModel(std::move(spaces), std::move(pots), std::move(muts), std::move(initial));
}

/// Mean-zero signed measure absolutely continuous w.r.t. eta, with density
/// bounded by `scale`.
inline SignedMeasure random_direction(std::mt19937_64& gen, const ProbabilityMeasure& eta,
                                      double scale) {
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  std::vector<double> h(eta.size());
  for (double& v : h) v = unif(gen);
  double mean = 0.0;
  for (int x = 0; x < eta.size(); ++x) mean += eta[x] * h[x];
  std::vector<double> w(eta.size());
  for (int x = 0; x < eta.size(); ++x) w[x] = scale * eta[x] * (h[x] - mean);
  return SignedMeasure(eta.space(), std::move(w));
}

// --- independent numeric oracles -------------------------------------------

/// Ridge-regularized quadratic rate: value of sup_u <u,v> - u'Cu/2 computed
/// by Gaussian elimination on (C + lambda I), exact as lambda -> 0 when v is
/// in the range of C.
inline double ridge_rate_oracle(const std::vector<double>& C, const std::vector<double>& v,
                                double lambda) {
  const int d = static_cast<int>(v.size());
  std::vector<double> a(C);
  for (int i = 0; i < d; ++i) a[static_cast<size_t>(i) * d + i] += lambda;
  std::vector<double> b(v);
  for (int k = 0; k < d; ++k) {
    int piv = k;
    for (int i = k + 1; i < d; ++i)
      if (std::fabs(a[static_cast<size_t>(i) * d + k]) >
          std::fabs(a[static_cast<size_t>(piv) * d + k]))
        piv = i;
    for (int j = 0; j < d; ++j)
      std::swap(a[static_cast<size_t>(k) * d + j], a[static_cast<size_t>(piv) * d + j]);
    std::swap(b[k], b[piv]);
    for (int i = k + 1; i < d; ++i) {
      double m = a[static_cast<size_t>(i) * d + k] / a[static_cast<size_t>(k) * d + k];
      for (int j = k; j < d; ++j)
        a[static_cast<size_t>(i) * d + j] -= m * a[static_cast<size_t>(k) * d + j];
      b[i] -= m * b[k];
    }
  }
  std::vector<double> u(d);
  for (int i = d - 1; i >= 0; --i) {
    double s = b[i];
    for (int j = i + 1; j < d; ++j) s -= a[static_cast<size_t>(i) * d + j] * u[j];
    u[i] = s / a[static_cast<size_t>(i) * d + i];
  }
  double uv = 0.0, quad = 0.0;
  for (int i = 0; i < d; ++i) {
    uv += u[i] * v[i];
    for (int j = 0; j < d; ++j) quad += u[i] * C[static_cast<size_t>(i) * d + j] * u[j];
  }
  return uv - 0.5 * quad;
}

/// Minimal number of closed eps-balls centered at members covering all
/// members, by subset enumeration. Feasible up to ~12 members.
inline int exhaustive_cover_oracle(const std::vector<double>& dist, int n, double eps) {
  const double tol = eps + 1e-12;
  int best = n;
  for (uint32_t mask = 1; mask < (1u << n); ++mask) {
    int k = __builtin_popcount(mask);
    if (k >= best) continue;
    bool all = true;
    for (int i = 0; i < n && all; ++i) {
      bool covered = false;
      for (int j = 0; j < n && !covered; ++j)
        covered = ((mask >> j) & 1u) && dist[static_cast<size_t>(i) * n + j] <= tol;
      all = covered;
    }
    if (all) best = k;
  }
  return best;
}

/// Orlicz norm for psi(u)=e^{u^2}-1 solved by damped Newton in long double.
inline double orlicz_newton_oracle(const std::vector<double>& samples) {
  long double m = 0.0L;
  for (double y : samples) m = std::max<long double>(m, std::fabs(y));
  if (m == 0.0L) return 0.0;
  const long double R = static_cast<long double>(samples.size());
  auto g = [&](long double a) {
    long double s = 0.0L;
    for (double y : samples) {
      long double u = static_cast<long double>(std::fabs(y)) / a;
      s += std::expm1(u * u);
    }
    return s / R - 1.0L;
  };
  auto gp = [&](long double a) {
    long double s = 0.0L;
    for (double y : samples) {
      long double u2 = static_cast<long double>(y) * y / (a * a);
      s += std::exp(u2) * (-2.0L) * u2 / a;
    }
    return s / R;
  };
  long double lo = m / std::sqrt(std::log1p(2.0L * R));
  long double hi = m / std::sqrt(std::log(2.0L));
  long double a = 0.5L * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    long double val = g(a);
    (val > 0.0L ? lo : hi) = a;
    long double step = a - val / gp(a);
    a = (step > lo && step < hi) ? step : 0.5L * (lo + hi);
    if (hi - lo < 1e-14L * hi) break;
  }
  return static_cast<double>(a);
}

/// Plain two-pass mean/variance/standard error.
struct TwoPass {
  double mean = 0.0, variance = 0.0, se = 0.0;
};

inline TwoPass two_pass_oracle(const std::vector<double>& x) {
  TwoPass out;
  const double n = static_cast<double>(x.size());
  for (double v : x) out.mean += v;
  out.mean /= n;
  for (double v : x) out.variance += (v - out.mean) * (v - out.mean);
  out.variance /= (n - 1.0);
  out.se = std::sqrt(out.variance / n);
  return out;
}

}  // namespace testkit
