#pragma once

// N-particle mean-field simulation: ensembles, runs, the fluctuation fields
// V/W and the second-order remainder, predictable brackets, and a
// deterministic multi-threaded replication driver.

#include <cstdint>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "meanfield/flow.hpp"
#include "meanfield/measure.hpp"
#include "meanfield/rng.hpp"

namespace meanfield {

struct ExactFlowUnavailable : Error {
  using Error::Error;
};

struct ParticleEnsemble {
  int time = 0;
  int N = 0;
  std::vector<int32_t> states;
};

inline std::vector<int64_t> state_counts(const ParticleEnsemble& e, const StateSpace& space) {
  std::vector<int64_t> c(space.size, 0);
  for (int32_t s : e.states) ++c[s];
  return c;
}

inline ProbabilityMeasure counts_measure(const std::vector<int64_t>& counts, const StateSpace& space,
                                         int N) {
  std::vector<double> w(space.size);
  for (int x = 0; x < space.size; ++x) w[x] = static_cast<double>(counts[x]) / N;
  return ProbabilityMeasure(space, std::move(w));
}

/// One simulated trajectory of the N-particle system. Occupation counts are
/// kept per time (they determine every field below exactly); raw states are
/// retained only on request.
struct SimulationRun {
  int N = 0;
  uint32_t replication = 0;
  RngSpec rng;
  std::vector<std::vector<int64_t>> counts;  // counts[n][x], each summing to N
  std::vector<ParticleEnsemble> states;      // empty unless keep_states

  int last_time() const { return static_cast<int>(counts.size()) - 1; }

  ProbabilityMeasure empirical(const McKeanSpec& spec, int n) const {
    return counts_measure(counts.at(n), spec.space(n), N);
  }

  /// Integral of f under the empirical measure at time n, as a ratio of
  /// integer-weighted sums.
  double empirical_mean(int n, const Observable& f) const {
    const auto& c = counts.at(n);
    if (static_cast<int>(c.size()) != f.size())
      throw SpaceMismatch("SimulationRun::empirical_mean: observable size mismatch");
    double s = 0.0;
    for (size_t x = 0; x < c.size(); ++x) s += static_cast<double>(c[x]) * f[static_cast<int>(x)];
    return s / N;
  }
};

inline ParticleEnsemble init_particles(const McKeanSpec& spec, int N, const RngSpec& rng,
                                       uint32_t replication) {
  if (N <= 0) throw Error("init_particles: N must be positive");
  ParticleEnsemble e;
  e.time = 0;
  e.N = N;
  e.states.resize(N);
  AliasTable table(std::span<const double>(spec.initial().weights()));
  for (int i = 0; i < N; ++i) {
    auto u = uniform_pair(rng, replication, 0, static_cast<uint32_t>(i));
    e.states[i] = static_cast<int32_t>(table.sample(u.u0, u.u1));
  }
  return e;
}

/// Advance every particle one step through the transition kernel frozen at
/// the current empirical distribution.
inline ParticleEnsemble step(const McKeanSpec& spec, const ParticleEnsemble& e, const RngSpec& rng,
                             uint32_t replication) {
  const int n = e.time;
  if (n >= spec.horizon()) throw TimeOutOfRange("step: ensemble already at the horizon");
  ProbabilityMeasure eta = counts_measure(state_counts(e, spec.space(n)), spec.space(n), e.N);
  MarkovKernel K = spec.kernel_from(n, eta);
  const int d0 = K.source().size;
  std::vector<AliasTable> rows(d0);
  for (int x = 0; x < d0; ++x) rows[x].build(K.row(x));
  ParticleEnsemble out;
  out.time = n + 1;
  out.N = e.N;
  out.states.resize(e.N);
  const uint32_t t = static_cast<uint32_t>(n + 1);
  for (int i = 0; i < e.N; ++i) {
    auto u = uniform_pair(rng, replication, t, static_cast<uint32_t>(i));
    out.states[i] = static_cast<int32_t>(rows[e.states[i]].sample(u.u0, u.u1));
  }
  return out;
}

struct SimOptions {
  bool keep_states = false;
};

inline SimulationRun simulate(const McKeanSpec& spec, int horizon, int N, const RngSpec& rng,
                              uint32_t replication, const SimOptions& opts = {}) {
  if (horizon < 0 || horizon > spec.horizon())
    throw TimeOutOfRange("simulate: horizon " + std::to_string(horizon) + " outside [0, " +
                         std::to_string(spec.horizon()) + "]");
  SimulationRun run;
  run.N = N;
  run.replication = replication;
  run.rng = rng;
  ParticleEnsemble e = init_particles(spec, N, rng, replication);
  run.counts.push_back(state_counts(e, spec.space(0)));
  if (opts.keep_states) run.states.push_back(e);
  for (int n = 0; n < horizon; ++n) {
    e = step(spec, e, rng, replication);
    run.counts.push_back(state_counts(e, spec.space(n + 1)));
    if (opts.keep_states) run.states.push_back(e);
  }
  return run;
}

/// Local fluctuation field: V also at requested time given the run.
///   V_0(f) = sqrt(N) (emp_0 - eta_0)(f)
///   V_n(f) = sqrt(N) (emp_n - emp_{n-1} K_{n, emp_{n-1}})(f)   for n >= 1.
inline double field_v(const SimulationRun& run, const McKeanSpec& spec, int n,
                      const Observable& f) {
  if (n < 0 || n > run.last_time()) throw TimeOutOfRange("field_v: time outside the run");
  const double sqn = std::sqrt(static_cast<double>(run.N));
  if (n == 0) return sqn * (run.empirical_mean(0, f) - spec.initial()(f));
  ProbabilityMeasure prev = run.empirical(spec, n - 1);
  Observable kf = apply(spec.kernel_from(n - 1, prev), f);
  return sqn * (run.empirical_mean(n, f) - run.empirical_mean(n - 1, kf));
}

/// Global fluctuation field against the exact flow:
///   W_n(f) = sqrt(N) (emp_n - eta_n)(f).
inline double field_w(const SimulationRun& run, const FlowTrajectory& flow, int n,
                      const Observable& f) {
  if (n < 0 || n > run.last_time()) throw TimeOutOfRange("field_w: time outside the run");
  if (n >= static_cast<int>(flow.size())) throw ExactFlowUnavailable("field_w: flow too short");
  return std::sqrt(static_cast<double>(run.N)) * (run.empirical_mean(n, f) - flow[n](f));
}

/// Second-order remainder of the first-order expansion of W:
///   R_n(f) = sqrt(N) ( W_n(f) - sum_{p<=n} V_p(D_{p,n} f) ).
/// `dpnf[p]` must hold D_{p,n} f for p = 0..n (see `remainder_observables`).
inline double remainder_r(const SimulationRun& run, const McKeanSpec& spec,
                          const FlowTrajectory& flow, int n, const Observable& f,
                          std::span<const Observable> dpnf) {
  if (static_cast<int>(dpnf.size()) != n + 1)
    throw Error("remainder_r: need one pulled-back observable per time 0..n");
  double sum = 0.0;
  for (int p = 0; p <= n; ++p) sum += field_v(run, spec, p, dpnf[p]);
  return std::sqrt(static_cast<double>(run.N)) * (field_w(run, flow, n, f) - sum);
}

/// Pull f at time n back through the derivative semigroup: entry p holds
/// D_{p,n} f.
inline std::vector<Observable> remainder_observables(const FeynmanKacModel& model,
                                                     const FlowTrajectory& flow, int n,
                                                     const Observable& f) {
  std::vector<Observable> dpnf;
  dpnf.reserve(n + 1);
  for (int p = 0; p <= n; ++p) dpnf.push_back(semigroup_d(model, p, n, flow).apply(f));
  return dpnf;
}

inline double remainder_r(const SimulationRun& run, const FeynmanKacModel& model,
                          const McKeanSpec& spec, const FlowTrajectory& flow, int n,
                          const Observable& f) {
  auto dpnf = remainder_observables(model, flow, n, f);
  return remainder_r(run, spec, flow, n, f, dpnf);
}

namespace detail {
// sum_x w(x) sum_y K(x,y) (f(y) - (Kf)(x)) (g(y) - (Kg)(x)), the one-step
// predictable covariance increment under row weights w.
inline double step_covariance(const MarkovKernel& K, std::span<const double> weights,
                              const Observable& f, const Observable& g) {
  Observable kf = apply(K, f), kg = apply(K, g);
  double s = 0.0;
  for (int x = 0; x < K.source().size; ++x) {
    double w = weights[x];
    if (w == 0.0) continue;
    double inner = 0.0;
    auto row = K.row(x);
    for (int y = 0; y < K.target().size; ++y)
      inner += row[y] * (f[y] - kf[x]) * (g[y] - kg[x]);
    s += w * inner;
  }
  return s;
}

inline double plain_variance(const ProbabilityMeasure& eta, const Observable& f) {
  double m = eta(f), s = 0.0;
  for (int x = 0; x < eta.size(); ++x) {
    double d = f[x] - m;
    s += eta[x] * d * d;
  }
  return s;
}
}  // namespace detail

/// Predictable bracket of the martingale collecting the V fields against the
/// observables fs[0..n]. The time-0 increment is the initial-law variance of
/// fs[0] (the unconditional variance of V_0); later increments are one-step
/// conditional variances under the empirical law.
inline double martingale_bracket(const SimulationRun& run, const McKeanSpec& spec,
                                 std::span<const Observable> fs, int n) {
  if (static_cast<int>(fs.size()) < n + 1)
    throw Error("martingale_bracket: need one observable per time 0..n");
  if (n < 0 || n > run.last_time())
    throw TimeOutOfRange("martingale_bracket: time outside the run");
  double s = detail::plain_variance(spec.initial(), fs[0]);
  for (int p = 1; p <= n; ++p) {
    ProbabilityMeasure prev = run.empirical(spec, p - 1);
    MarkovKernel K = spec.kernel_from(p - 1, prev);
    s += detail::step_covariance(K, prev.weights(), fs[p], fs[p]);
  }
  return s;
}

/// Deterministic counterpart of the bracket along the exact flow.
inline double exact_bracket(const McKeanSpec& spec, const FlowTrajectory& flow,
                            std::span<const Observable> fs, int n) {
  if (static_cast<int>(fs.size()) < n + 1)
    throw Error("exact_bracket: need one observable per time 0..n");
  if (n >= static_cast<int>(flow.size())) throw ExactFlowUnavailable("exact_bracket: flow too short");
  double s = detail::plain_variance(flow[0], fs[0]);
  for (int p = 1; p <= n; ++p) {
    MarkovKernel K = spec.kernel_from(p - 1, flow[p - 1]);
    s += detail::step_covariance(K, flow[p - 1].weights(), fs[p], fs[p]);
  }
  return s;
}

/// Per-run statistics extraction for replication batches.
struct RunExtractor {
  std::vector<std::string> names;
  std::function<void(const SimulationRun&, std::span<double>)> fill;
};

struct ColumnSummary {
  double mean = 0.0;
  double variance = 0.0;  // unbiased
  double se = 0.0;        // standard error of the mean
  double min = 0.0;
  double max = 0.0;
  int64_t count = 0;
};

struct BatchOptions {
  int workers = 1;
  uint32_t rep_begin = 0;
  size_t memory_budget = size_t{256} << 20;
  std::string spill_path;  // required when the raw table exceeds the budget
};

/// Result table of R independent replications. Raw values are kept row-major
/// in memory, or spilled to a CSV file when they would exceed the memory
/// budget; summaries are streamed either way and identical in both modes.
class ReplicationBatch {
 public:
  ReplicationBatch(std::vector<std::string> names, int R, int N, RngSpec rng, uint32_t rep_begin)
      : names_(std::move(names)), R_(R), N_(N), rng_(rng), rep_begin_(rep_begin) {
    welford_mean_.assign(names_.size(), 0.0);
    welford_m2_.assign(names_.size(), 0.0);
    col_min_.assign(names_.size(), 0.0);
    col_max_.assign(names_.size(), 0.0);
  }

  const std::vector<std::string>& names() const { return names_; }
  int columns() const { return static_cast<int>(names_.size()); }
  int replications() const { return R_; }
  int particles() const { return N_; }
  const RngSpec& rng() const { return rng_; }
  uint32_t rep_begin() const { return rep_begin_; }
  bool spilled() const { return spilled_; }

  int column_index(const std::string& name) const {
    for (size_t j = 0; j < names_.size(); ++j)
      if (names_[j] == name) return static_cast<int>(j);
    throw Error("ReplicationBatch: no column named " + name);
  }

  double value(int r, int j) const {
    if (spilled_) throw Error("ReplicationBatch::value: table was spilled; use column()");
    return data_[static_cast<size_t>(r) * columns() + j];
  }

  std::vector<double> column(int j) const {
    std::vector<double> out;
    out.reserve(R_);
    if (!spilled_) {
      for (int r = 0; r < R_; ++r) out.push_back(value(r, j));
      return out;
    }
    std::ifstream in(spill_path_);
    if (!in) throw Error("ReplicationBatch::column: cannot reopen spill file " + spill_path_);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      size_t pos = 0;
      for (int skip = 0; skip <= j; ++skip) pos = line.find(',', pos) + 1;  // skip rep + cols
      out.push_back(std::stod(line.substr(pos)));
    }
    return out;
  }
  std::vector<double> column(const std::string& name) const { return column(column_index(name)); }

  ColumnSummary summary(int j) const {
    ColumnSummary s;
    s.count = seen_;
    s.mean = welford_mean_[j];
    s.variance = seen_ > 1 ? welford_m2_[j] / (seen_ - 1) : 0.0;
    s.se = seen_ > 0 ? std::sqrt(s.variance / seen_) : 0.0;
    s.min = col_min_[j];
    s.max = col_max_[j];
    return s;
  }
  ColumnSummary summary(const std::string& name) const { return summary(column_index(name)); }

  /// Nearest-rank quantile of column j.
  double quantile(int j, double q) const {
    std::vector<double> v = column(j);
    std::sort(v.begin(), v.end());
    if (v.empty()) throw Error("ReplicationBatch::quantile: empty column");
    double rank = std::ceil(q * v.size());
    int idx = std::max(0, static_cast<int>(rank) - 1);
    return v[std::min(idx, static_cast<int>(v.size()) - 1)];
  }

 private:
  friend ReplicationBatch replicate(const McKeanSpec&, int, int, int, const RngSpec&,
                                    const RunExtractor&, const BatchOptions&);

  void absorb_row(std::span<const double> row) {
    ++seen_;
    for (int j = 0; j < columns(); ++j) {
      double x = row[j];
      double d = x - welford_mean_[j];
      welford_mean_[j] += d / seen_;
      welford_m2_[j] += d * (x - welford_mean_[j]);
      if (seen_ == 1 || x < col_min_[j]) col_min_[j] = x;
      if (seen_ == 1 || x > col_max_[j]) col_max_[j] = x;
    }
  }

  std::vector<std::string> names_;
  int R_, N_;
  RngSpec rng_;
  uint32_t rep_begin_;
  std::vector<double> data_;
  bool spilled_ = false;
  std::string spill_path_;
  int64_t seen_ = 0;
  std::vector<double> welford_mean_, welford_m2_, col_min_, col_max_;
};

/// Run R independent replications (indices rep_begin..rep_begin+R-1) and
/// tabulate the extracted statistics. Every replication is a pure function of
/// (seed, replication index), so the result is identical for any worker count
/// and any partition of the index range.
inline ReplicationBatch replicate(const McKeanSpec& spec, int horizon, int N, int R,
                                  const RngSpec& rng, const RunExtractor& extractor,
                                  const BatchOptions& opts = {}) {
  if (R < 1) throw Error("replicate: need at least one replication");
  const int k = static_cast<int>(extractor.names.size());
  ReplicationBatch batch(extractor.names, R, N, rng, opts.rep_begin);

  const size_t bytes = static_cast<size_t>(R) * k * sizeof(double);
  size_t window = R;
  std::ofstream spill;
  if (bytes > opts.memory_budget) {
    if (opts.spill_path.empty())
      throw Error("replicate: raw table exceeds the memory budget and no spill path is set");
    batch.spilled_ = true;
    batch.spill_path_ = opts.spill_path;
    window = std::max<size_t>(1, opts.memory_budget / (k * sizeof(double)));
    spill.open(opts.spill_path);
    if (!spill) throw Error("replicate: cannot open spill file " + opts.spill_path);
    spill << "replication";
    for (const auto& name : extractor.names) spill << ',' << name;
    spill << '\n';
    spill.precision(17);
  } else {
    batch.data_.resize(static_cast<size_t>(R) * k);
  }

  std::vector<double> buffer;
  const int workers = std::max(1, opts.workers);
  for (int w0 = 0; w0 < R; w0 += static_cast<int>(window)) {
    const int w1 = std::min<int64_t>(R, w0 + static_cast<int64_t>(window));
    const int count = w1 - w0;
    double* rows;
    if (batch.spilled_) {
      buffer.assign(static_cast<size_t>(count) * k, 0.0);
      rows = buffer.data();
    } else {
      rows = batch.data_.data() + static_cast<size_t>(w0) * k;
    }

    auto work = [&](int lo, int hi) {
      for (int r = lo; r < hi; ++r) {
        SimulationRun run = simulate(spec, horizon, N, rng, opts.rep_begin + r);
        extractor.fill(run, {rows + static_cast<size_t>(r - w0) * k, static_cast<size_t>(k)});
      }
    };
    if (workers == 1 || count == 1) {
      work(w0, w1);
    } else {
      std::vector<std::thread> pool;
      int per = (count + workers - 1) / workers;
      for (int t = 0; t < workers; ++t) {
        int lo = w0 + t * per, hi = std::min(w1, lo + per);
        if (lo < hi) pool.emplace_back(work, lo, hi);
      }
      for (auto& th : pool) th.join();
    }

    for (int r = 0; r < count; ++r) {
      std::span<const double> row{rows + static_cast<size_t>(r) * k, static_cast<size_t>(k)};
      batch.absorb_row(row);
      if (batch.spilled_) {
        spill << (opts.rep_begin + w0 + r);
        for (int j = 0; j < k; ++j) spill << ',' << row[j];
        spill << '\n';
      }
    }
  }
  return batch;
}

/// Mean-field chain over an arbitrary samplable state type; simulation only.
/// Each particle's transition may depend on the whole frozen population
/// snapshot of the previous time.
template <class State>
class GenericSampler {
 public:
  virtual ~GenericSampler() = default;
  virtual int horizon() const = 0;
  virtual State initial(UniformStream& u) const = 0;
  virtual State transition(int n, std::span<const State> population, const State& x,
                           UniformStream& u) const = 0;
};

template <class State>
std::vector<std::vector<State>> simulate_generic(const GenericSampler<State>& sampler, int horizon,
                                                 int N, const RngSpec& rng, uint32_t replication) {
  if (horizon < 0 || horizon > sampler.horizon())
    throw TimeOutOfRange("simulate_generic: horizon outside the sampler range");
  std::vector<std::vector<State>> traj;
  traj.reserve(horizon + 1);
  std::vector<State> cur(N);
  for (int i = 0; i < N; ++i) {
    UniformStream u(rng, replication, 0, static_cast<uint32_t>(i));
    cur[i] = sampler.initial(u);
  }
  traj.push_back(cur);
  for (int n = 0; n < horizon; ++n) {
    std::vector<State> next(N);
    std::span<const State> frozen{traj.back()};
    for (int i = 0; i < N; ++i) {
      UniformStream u(rng, replication, static_cast<uint32_t>(n + 1), static_cast<uint32_t>(i));
      next[i] = sampler.transition(n, frozen, frozen[i], u);
    }
    traj.push_back(std::move(next));
  }
  return traj;
}

}  // namespace meanfield
