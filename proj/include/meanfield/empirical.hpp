#pragma once

// Function-class machinery for uniform control of the fields: covering
// numbers in empirical L2 metrics, entropy integrals, low-variance difference
// classes, Orlicz-norm estimation, and the equicontinuity sweep.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "meanfield/flow.hpp"
#include "meanfield/mdp.hpp"
#include "meanfield/measure.hpp"
#include "meanfield/particle.hpp"
#include "meanfield/rng.hpp"

namespace meanfield {

/// Finite class of observables with sup-norm at most 1, required to contain
/// the zero and unit functions.
class FunctionClass {
 public:
  static constexpr double kNormSlack = 1e-12;

  FunctionClass(StateSpace space, std::vector<Observable> members)
      : space_(std::move(space)), members_(std::move(members)) {
    bool has_zero = false, has_one = false;
    for (const auto& f : members_) {
      require_same_space(f.space(), space_, "FunctionClass");
      if (sup_norm(f) > 1.0 + kNormSlack)
        throw Error("FunctionClass: member exceeds unit sup-norm");
      bool zero = true, one = true;
      for (double v : f.values()) {
        if (std::fabs(v) > kNormSlack) zero = false;
        if (std::fabs(v - 1.0) > kNormSlack) one = false;
      }
      has_zero |= zero;
      has_one |= one;
    }
    if (!has_zero || !has_one)
      throw Error("FunctionClass: must contain the zero and unit functions");
  }

  /// Zero, unit, and all singleton indicators.
  static FunctionClass indicators(const StateSpace& space) {
    std::vector<Observable> m;
    m.push_back(Observable::constant(space, 0.0));
    m.push_back(Observable::constant(space, 1.0));
    for (int x = 0; x < space.size; ++x) m.push_back(Observable::indicator(space, x));
    return FunctionClass(space, std::move(m));
  }

  const StateSpace& space() const { return space_; }
  int size() const { return static_cast<int>(members_.size()); }
  const Observable& operator[](int i) const { return members_[i]; }
  std::span<const Observable> members() const { return members_; }

 private:
  StateSpace space_;
  std::vector<Observable> members_;
};

inline double l2_distance(const ProbabilityMeasure& mu, const Observable& f, const Observable& g) {
  double s = 0.0;
  for (int x = 0; x < mu.size(); ++x) {
    double d = f[x] - g[x];
    s += mu[x] * d * d;
  }
  return std::sqrt(s);
}

/// Size of a greedy ball cover of the class in L2(mu), centers drawn from the
/// class itself. Farthest-point insertion, restarted from every member; the
/// smallest cover found is returned.
inline int covering_number(std::span<const Observable> members, const ProbabilityMeasure& mu,
                           double eps) {
  const int n = static_cast<int>(members.size());
  if (n == 0) return 0;
  if (eps <= 0.0) throw Error("covering_number: radius must be positive");
  const double tol = eps + 1e-12;

  // Pairwise distances once.
  std::vector<double> dist(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double d = l2_distance(mu, members[i], members[j]);
      dist[static_cast<size_t>(i) * n + j] = d;
      dist[static_cast<size_t>(j) * n + i] = d;
    }

  int best = n;
  std::vector<double> nearest(n);
  for (int start = 0; start < n; ++start) {
    std::fill(nearest.begin(), nearest.end(), std::numeric_limits<double>::infinity());
    int centers = 0, cur = start;
    while (true) {
      ++centers;
      for (int i = 0; i < n; ++i)
        nearest[i] = std::min(nearest[i], dist[static_cast<size_t>(cur) * n + i]);
      int far = -1;
      double far_d = tol;
      for (int i = 0; i < n; ++i)
        if (nearest[i] > far_d) {
          far_d = nearest[i];
          far = i;
        }
      if (far < 0) break;
      cur = far;
      if (centers >= n) break;
    }
    best = std::min(best, centers);
  }
  return best;
}

inline int covering_number(const FunctionClass& F, const ProbabilityMeasure& mu, double eps) {
  return covering_number(F.members(), mu, eps);
}

/// Default measure grid for uniform covering numbers: every point mass, the
/// uniform distribution, and 100 seeded random distributions.
inline std::vector<ProbabilityMeasure> default_measure_grid(const StateSpace& space,
                                                            uint64_t seed = 20240601) {
  std::vector<ProbabilityMeasure> grid;
  for (int x = 0; x < space.size; ++x) grid.push_back(ProbabilityMeasure::point_mass(space, x));
  grid.push_back(ProbabilityMeasure::uniform(space));
  RngSpec rng{seed};
  for (uint32_t k = 0; k < 100; ++k) {
    UniformStream u(rng, k, kTagMeasureGrid);
    std::vector<double> w(space.size);
    double total = 0.0;
    for (int x = 0; x < space.size; ++x) {
      w[x] = -std::log1p(-u.next());  // exponential spacings: flat Dirichlet
      total += w[x];
    }
    for (double& v : w) v /= total;
    grid.emplace_back(space, std::move(w));
  }
  return grid;
}

/// Worst covering number over a measure grid. A finite grid lower-bounds the
/// supremum over all laws; the default grid is the documented contract.
inline int uniform_covering_number(std::span<const Observable> members, double eps,
                                   std::span<const ProbabilityMeasure> grid) {
  int worst = 0;
  for (const auto& mu : grid) worst = std::max(worst, covering_number(members, mu, eps));
  return worst;
}

inline int uniform_covering_number(const FunctionClass& F, double eps,
                                   std::span<const ProbabilityMeasure> grid) {
  return uniform_covering_number(F.members(), eps, grid);
}

struct EntropyIntegral {
  double value = 0.0;             // trapezoid of sqrt(log N(eps)) over [step, 2]
  double truncation_bound = 0.0;  // step * sqrt(log |F|) covers the head
  double step = 0.0;
};

/// Entropy integral of the uniform covering numbers, integrated from `step`
/// to the trivial radius 2 on an equispaced grid.
inline EntropyIntegral entropy_integral(const FunctionClass& F, double step,
                                        std::span<const ProbabilityMeasure> grid) {
  if (!(step > 0.0 && step <= 2.0)) throw Error("entropy_integral: step must lie in (0, 2]");
  EntropyIntegral out;
  out.step = step;
  out.truncation_bound = step * std::sqrt(std::log(static_cast<double>(F.size())));
  std::vector<double> eps_nodes;
  for (double e = step; e < 2.0; e += step) eps_nodes.push_back(e);
  eps_nodes.push_back(2.0);
  std::vector<double> y(eps_nodes.size());
  for (size_t i = 0; i < eps_nodes.size(); ++i) {
    int cn = uniform_covering_number(F, eps_nodes[i], grid);
    y[i] = std::sqrt(std::log(std::max(1.0, static_cast<double>(cn))));
  }
  for (size_t i = 1; i < eps_nodes.size(); ++i)
    out.value += 0.5 * (y[i - 1] + y[i]) * (eps_nodes[i] - eps_nodes[i - 1]);
  return out;
}

/// Difference class F(delta): all ordered pairwise differences f - g with
/// L2(eta) norm at most delta. delta = 2 recovers every pair.
class DeltaClass {
 public:
  DeltaClass(const FunctionClass& F, const ProbabilityMeasure& eta, double delta)
      : space_(F.space()), delta_(delta) {
    require_same_space(F.space(), eta.space(), "DeltaClass");
    if (delta < 0.0) throw Error("DeltaClass: delta must be nonnegative");
    const Observable zero = Observable::constant(F.space(), 0.0);
    for (int i = 0; i < F.size(); ++i)
      for (int j = 0; j < F.size(); ++j) {
        std::vector<double> v(F.space().size);
        for (int x = 0; x < F.space().size; ++x) v[x] = F[i][x] - F[j][x];
        Observable h(F.space(), std::move(v));
        if (l2_distance(eta, h, zero) <= delta + 1e-12) {
          members_.push_back(std::move(h));
          pairs_.emplace_back(i, j);
        }
      }
  }

  const StateSpace& space() const { return space_; }
  double delta() const { return delta_; }
  int size() const { return static_cast<int>(members_.size()); }
  const Observable& operator[](int i) const { return members_[i]; }
  std::span<const Observable> members() const { return members_; }
  const std::vector<std::pair<int, int>>& pairs() const { return pairs_; }

  /// True when every member vanishes identically, so any sup over the class
  /// is exactly zero.
  bool degenerate() const {
    for (const auto& h : members_)
      if (sup_norm(h) != 0.0) return false;
    return true;
  }

 private:
  StateSpace space_;
  double delta_;
  std::vector<Observable> members_;
  std::vector<std::pair<int, int>> pairs_;
};

inline DeltaClass delta_class(const FunctionClass& F, const ProbabilityMeasure& eta, double delta) {
  return DeltaClass(F, eta, delta);
}

/// Sup of |field(h)| over a list of observables, for one run.
inline double class_sup_norm(std::span<const Observable> members, const SimulationRun& run,
                             const McKeanSpec& spec, const FlowTrajectory& flow, int n,
                             FieldKind field) {
  double s = 0.0;
  for (const auto& h : members) {
    double v = field == FieldKind::V ? field_v(run, spec, n, h) : field_w(run, flow, n, h);
    s = std::max(s, std::fabs(v));
  }
  return s;
}

/// Empirical Orlicz norm for psi(u) = exp(u^2) - 1: the smallest a with
///   (1/R) sum psi(|Y_i| / a) <= 1,
/// found by bisection to relative tolerance 1e-9. Zero for an all-zero
/// sample.
inline double orlicz_estimate(std::span<const double> samples) {
  if (samples.empty()) throw Error("orlicz_estimate: empty sample");
  double s = 0.0;
  for (double y : samples) s = std::max(s, std::fabs(y));
  if (s == 0.0) return 0.0;
  const double R = static_cast<double>(samples.size());
  auto mean_psi = [&](double a) {
    double acc = 0.0;
    for (double y : samples) {
      double u = y / a;
      acc += std::expm1(u * u);
    }
    return acc / R;
  };
  double lo = s / std::sqrt(std::log1p(2.0 * R));  // mean >= 2 here
  double hi = s / std::sqrt(std::log(2.0));        // mean <= 1 here
  while (hi - lo > 1e-9 * hi) {
    double mid = 0.5 * (lo + hi);
    (mean_psi(mid) > 1.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

struct EquicontinuityCell {
  double delta = 0.0;
  int N = 0;
  double alpha = 0.0;
  double threshold = 0.0;  // y * sqrt(alpha)
  int64_t count = 0;
  double freq = 0.0;
  WilsonInterval wilson;
  bool degenerate = false;  // class is identically zero: probability exactly 0
  /// (1/alpha) log P estimate: log(freq)/alpha, the Wilson upper bound when
  /// the count is zero, and -infinity for a degenerate class.
  double log_prob_over_alpha = 0.0;
  std::string source;  // "empirical" | "wilson-upper" | "exact-zero"
};

struct EquicontinuityReport {
  int time = 0;
  double y = 1.0;
  uint64_t seed = 0;
  int R = 0;
  std::vector<double> delta_grid;
  SpeedSchedule schedule;
  std::vector<EquicontinuityCell> cells;  // delta-major, N-minor
  bool monotone_at_largest_n = true;      // nonincreasing as delta decreases

  const EquicontinuityCell& cell(int delta_idx, int n_idx) const {
    return cells[static_cast<size_t>(delta_idx) * schedule.n_grid.size() + n_idx];
  }
};

/// Exceedance of the sup of |W| over shrinking difference classes. One batch
/// per N serves every delta: the per-replication sups are extracted jointly.
inline EquicontinuityReport equicontinuity_sweep(const McKeanSpec& spec, const FunctionClass& F,
                                                 int n, const SpeedSchedule& schedule,
                                                 std::span<const double> delta_grid, double y,
                                                 int R, const RngSpec& rng, int workers = 1) {
  FlowTrajectory flow = exact_flow(spec, n);
  EquicontinuityReport report{n, y, rng.seed, R, {delta_grid.begin(), delta_grid.end()},
                              schedule,      {}, true};

  std::vector<DeltaClass> classes;
  classes.reserve(delta_grid.size());
  for (double d : delta_grid) classes.emplace_back(F, flow[n], d);

  const int kd = static_cast<int>(classes.size());
  RunExtractor ex;
  for (const auto& c : classes) ex.names.push_back("sup_delta_" + std::to_string(c.delta()));
  ex.fill = [&](const SimulationRun& run, std::span<double> row) {
    for (int j = 0; j < kd; ++j)
      row[j] = class_sup_norm(classes[j].members(), run, spec, flow, n, FieldKind::W);
  };

  std::vector<std::vector<EquicontinuityCell>> by_delta(kd);
  for (int ni = 0; ni < static_cast<int>(schedule.n_grid.size()); ++ni) {
    int N = schedule.n_grid[ni];
    BatchOptions opts;
    opts.workers = workers;
    ReplicationBatch batch = replicate(spec, n, N, R, rng, ex, opts);
    for (int j = 0; j < kd; ++j) {
      EquicontinuityCell cell;
      cell.delta = classes[j].delta();
      cell.N = N;
      cell.alpha = schedule.alpha(N);
      cell.threshold = y * std::sqrt(cell.alpha);
      for (double s : batch.column(j))
        if (s > cell.threshold) ++cell.count;
      cell.freq = static_cast<double>(cell.count) / R;
      cell.wilson = wilson_interval(cell.count, R);
      cell.degenerate = classes[j].degenerate();
      if (cell.degenerate) {
        cell.log_prob_over_alpha = -std::numeric_limits<double>::infinity();
        cell.source = "exact-zero";
      } else if (cell.count == 0) {
        cell.log_prob_over_alpha = std::log(cell.wilson.hi) / cell.alpha;
        cell.source = "wilson-upper";
      } else {
        cell.log_prob_over_alpha = std::log(cell.freq) / cell.alpha;
        cell.source = "empirical";
      }
      by_delta[j].push_back(cell);
    }
  }
  for (int j = 0; j < kd; ++j)
    for (const auto& cell : by_delta[j]) report.cells.push_back(cell);

  // At the largest N: smaller delta must not have larger log-probability.
  const int last = static_cast<int>(schedule.n_grid.size()) - 1;
  std::vector<int> order(kd);
  for (int j = 0; j < kd; ++j) order[j] = j;
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return classes[a].delta() < classes[b].delta(); });
  for (int j = 1; j < kd; ++j) {
    double small = report.cell(order[j - 1], last).log_prob_over_alpha;
    double large = report.cell(order[j], last).log_prob_over_alpha;
    if (small > large) report.monotone_at_largest_n = false;
  }
  return report;
}

}  // namespace meanfield
