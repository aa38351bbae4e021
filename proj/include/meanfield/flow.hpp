#pragma once

// Discrete-time nonlinear measure flows driven by potential/mutation pairs:
// the exact flow, its selection and mean-field transition kernels, the
// first-order expansion operators and their semigroup, and the per-model
// contraction constants.

#include <memory>
#include <string>
#include <vector>

#include "meanfield/measure.hpp"

namespace meanfield {

struct PotentialOutOfRange : Error {
  using Error::Error;
};
struct TimeOutOfRange : Error {
  using Error::Error;
};

/// Time-inhomogeneous model on finite spaces. Times run 0..horizon; step n
/// (for n = 0..horizon-1) reweights by the potential G_n on space n and then
/// moves through the mutation kernel from space n to space n+1.
class FeynmanKacModel {
 public:
  static constexpr double kMinPotential = 1e-12;

  FeynmanKacModel(std::vector<StateSpace> spaces, std::vector<Observable> potentials,
                  std::vector<MarkovKernel> mutations, ProbabilityMeasure initial)
      : spaces_(std::move(spaces)),
        potentials_(std::move(potentials)),
        mutations_(std::move(mutations)),
        initial_(std::move(initial)) {
    const int h = static_cast<int>(mutations_.size());
    if (static_cast<int>(spaces_.size()) != h + 1)
      throw Error("FeynmanKacModel: need horizon+1 spaces, got " +
                  std::to_string(spaces_.size()) + " for horizon " + std::to_string(h));
    if (static_cast<int>(potentials_.size()) != h)
      throw Error("FeynmanKacModel: need one potential per step, got " +
                  std::to_string(potentials_.size()) + " for horizon " + std::to_string(h));
    for (int n = 0; n < h; ++n) {
      require_same_space(potentials_[n].space(), spaces_[n],
                         ("FeynmanKacModel: potential at time " + std::to_string(n)).c_str());
      require_same_space(mutations_[n].source(), spaces_[n],
                         ("FeynmanKacModel: mutation source at time " + std::to_string(n)).c_str());
      require_same_space(mutations_[n].target(), spaces_[n + 1],
                         ("FeynmanKacModel: mutation target at time " + std::to_string(n)).c_str());
      for (int x = 0; x < spaces_[n].size; ++x) {
        double g = potentials_[n][x];
        if (!(g >= kMinPotential && g <= 1.0))
          throw PotentialOutOfRange("FeynmanKacModel: potential at time " + std::to_string(n) +
                                    ", state " + std::to_string(x) + " is " + std::to_string(g) +
                                    "; must lie in [1e-12, 1]");
      }
    }
    require_same_space(initial_.space(), spaces_[0], "FeynmanKacModel: initial distribution");
  }

  int horizon() const { return static_cast<int>(mutations_.size()); }
  const StateSpace& space(int n) const {
    require_time(n, "FeynmanKacModel::space");
    return spaces_[n];
  }
  const Observable& potential(int n) const {
    require_step_time(n, "FeynmanKacModel::potential");
    return potentials_[n];
  }
  const MarkovKernel& mutation(int n) const {  // space n -> n+1
    require_step_time(n, "FeynmanKacModel::mutation");
    return mutations_[n];
  }
  const ProbabilityMeasure& initial() const { return initial_; }

  void require_step_time(int n, const char* where) const {
    if (n < 0 || n >= horizon())
      throw TimeOutOfRange(std::string(where) + ": step time " + std::to_string(n) +
                           " outside [0, " + std::to_string(horizon() - 1) + "]");
  }
  void require_time(int n, const char* where) const {
    if (n < 0 || n > horizon())
      throw TimeOutOfRange(std::string(where) + ": time " + std::to_string(n) + " outside [0, " +
                           std::to_string(horizon()) + "]");
  }

 private:
  std::vector<StateSpace> spaces_;
  std::vector<Observable> potentials_;
  std::vector<MarkovKernel> mutations_;
  ProbabilityMeasure initial_;
};

/// Boltzmann-Gibbs reweighting: Psi_G(eta)(x) = G(x) eta(x) / eta(G).
inline ProbabilityMeasure psi_transform(const Observable& G, const ProbabilityMeasure& eta) {
  require_same_space(G.space(), eta.space(), "psi_transform");
  double mass = eta(G);
  if (mass <= 0.0) throw ZeroMass("psi_transform: eta(G) = 0");
  std::vector<double> w(eta.size());
  for (int x = 0; x < eta.size(); ++x) w[x] = G[x] * eta[x] / mass;
  return ProbabilityMeasure(eta.space(), std::move(w));
}

/// One exact step: eta at time n -> eta at time n+1.
inline ProbabilityMeasure phi_step(const FeynmanKacModel& model, int n,
                                   const ProbabilityMeasure& eta) {
  model.require_step_time(n, "phi_step");
  require_same_space(eta.space(), model.space(n), "phi_step");
  return apply(psi_transform(model.potential(n), eta), model.mutation(n));
}

/// Accept/reject selection kernel on a single space:
///   S(x, .) = G(x) delta_x + (1 - G(x)) Psi_G(eta).
inline MarkovKernel selection_kernel(const Observable& G, const ProbabilityMeasure& eta) {
  require_same_space(G.space(), eta.space(), "selection_kernel");
  const int d = eta.size();
  ProbabilityMeasure psi = psi_transform(G, eta);
  std::vector<double> e(static_cast<size_t>(d) * d, 0.0);
  for (int x = 0; x < d; ++x) {
    double g = G[x];
    if (!(g >= 0.0 && g <= 1.0))
      throw PotentialOutOfRange("selection_kernel: potential value " + std::to_string(g) +
                                " outside [0, 1]");
    for (int y = 0; y < d; ++y) e[x * d + y] = (1.0 - g) * psi[y];
    e[x * d + x] += g;
  }
  return MarkovKernel(eta.space(), eta.space(), std::move(e));
}

/// Mean-field transition kernel for step n: selection at eta followed by
/// mutation. Satisfies eta K = phi_step(model, n, eta).
inline MarkovKernel mckean_kernel(const FeynmanKacModel& model, int n,
                                  const ProbabilityMeasure& eta) {
  model.require_step_time(n, "mckean_kernel");
  require_same_space(eta.space(), model.space(n), "mckean_kernel");
  return compose(selection_kernel(model.potential(n), eta), model.mutation(n));
}

using FlowTrajectory = std::vector<ProbabilityMeasure>;

/// Exact flow eta_0..eta_n.
inline FlowTrajectory exact_flow(const FeynmanKacModel& model, int n) {
  model.require_time(n, "exact_flow");
  FlowTrajectory flow;
  flow.reserve(n + 1);
  flow.push_back(model.initial());
  for (int p = 0; p < n; ++p) flow.push_back(phi_step(model, p, flow.back()));
  return flow;
}

/// Semigroup map: carries a distribution at time p to time n (identity when
/// p = n).
inline ProbabilityMeasure propagate(const FeynmanKacModel& model, int p, int n,
                                    const ProbabilityMeasure& mu) {
  model.require_time(p, "propagate");
  model.require_time(n, "propagate");
  if (p > n) throw TimeOutOfRange("propagate: start time " + std::to_string(p) +
                                  " exceeds end time " + std::to_string(n));
  ProbabilityMeasure out = mu;
  for (int k = p; k < n; ++k) out = phi_step(model, k, out);
  return out;
}

/// Linear operator with zero row sums: the derivative of a measure map. Rows
/// live on the source space, columns on the target space.
class FirstOrderOperator {
 public:
  static constexpr double kRowSumSlack = 1e-12;

  FirstOrderOperator() = default;
  FirstOrderOperator(StateSpace source, StateSpace target, std::vector<double> entries)
      : source_(std::move(source)), target_(std::move(target)), entries_(std::move(entries)) {
    const int n = source_.size, m = target_.size;
    if (static_cast<int>(entries_.size()) != n * m)
      throw Error("FirstOrderOperator: entry count does not match source*target size");
    detail::require_finite(entries_, "FirstOrderOperator");
    for (int x = 0; x < n; ++x) {
      double s = 0.0;
      for (int y = 0; y < m; ++y) s += entries_[x * m + y];
      if (std::fabs(s) > kRowSumSlack)
        throw Error("FirstOrderOperator: row " + std::to_string(x) + " sums to " +
                    std::to_string(s) + "; must vanish");
    }
  }

  static FirstOrderOperator identity(const StateSpace& space) {
    // Not zero-row-sum: the semigroup convention at p = n is the identity
    // map, which acts on increments, so it is exempt from the row-sum check.
    FirstOrderOperator op;
    op.source_ = space;
    op.target_ = space;
    op.entries_.assign(static_cast<size_t>(space.size) * space.size, 0.0);
    for (int x = 0; x < space.size; ++x) op.entries_[x * space.size + x] = 1.0;
    return op;
  }

  const StateSpace& source() const { return source_; }
  const StateSpace& target() const { return target_; }
  double operator()(int x, int y) const { return entries_[x * target_.size + y]; }
  const std::vector<double>& entries() const { return entries_; }

  Observable apply(const Observable& f) const {
    require_same_space(target_, f.space(), "FirstOrderOperator::apply(f)");
    std::vector<double> out(source_.size, 0.0);
    for (int x = 0; x < source_.size; ++x) {
      double s = 0.0;
      for (int y = 0; y < target_.size; ++y) s += entries_[x * target_.size + y] * f[y];
      out[x] = s;
    }
    return Observable(source_, std::move(out));
  }

  SignedMeasure apply(const SignedMeasure& mu) const {
    require_same_space(mu.space(), source_, "FirstOrderOperator::apply(mu)");
    std::vector<double> out(target_.size, 0.0);
    for (int x = 0; x < source_.size; ++x) {
      double w = mu[x];
      if (w == 0.0) continue;
      for (int y = 0; y < target_.size; ++y) out[y] += w * entries_[x * target_.size + y];
    }
    return SignedMeasure(target_, std::move(out));
  }

  friend FirstOrderOperator compose(const FirstOrderOperator& a, const FirstOrderOperator& b) {
    require_same_space(a.target(), b.source(), "compose(FirstOrderOperator)");
    const int n = a.source_.size, k = a.target_.size, m = b.target_.size;
    FirstOrderOperator out;
    out.source_ = a.source_;
    out.target_ = b.target_;
    out.entries_.assign(static_cast<size_t>(n) * m, 0.0);
    for (int x = 0; x < n; ++x)
      for (int y = 0; y < k; ++y) {
        double v = a(x, y);
        if (v == 0.0) continue;
        for (int z = 0; z < m; ++z) out.entries_[x * m + z] += v * b(y, z);
      }
    return out;
  }

 private:
  StateSpace source_;
  StateSpace target_;
  std::vector<double> entries_;
};

/// Oscillation-norm contraction coefficient for operators acting on
/// increments: sup{ osc(Df) : osc(f) <= 1 }. For rows with equal sums this is
/// the same max row-pair half-L1 formula as the Markov case.
inline double oscillation_coefficient(const FirstOrderOperator& D) {
  const int n = D.source().size, m = D.target().size;
  double beta = 0.0;
  for (int x = 0; x < n; ++x)
    for (int y = x + 1; y < n; ++y) {
      double s = 0.0;
      for (int z = 0; z < m; ++z) s += std::fabs(D(x, z) - D(y, z));
      beta = std::max(beta, 0.5 * s);
    }
  return beta;
}

/// Derivative of the step map at eta:
///   D(x, y) = (G_n(x)/eta(G_n)) * (M_{n+1}(x, y) - phi_step(eta)(y)).
/// Rows sum to zero and eta D = 0; the step map is Lipschitz through it.
inline FirstOrderOperator first_order_d(const FeynmanKacModel& model, int n,
                                        const ProbabilityMeasure& eta) {
  model.require_step_time(n, "first_order_d");
  require_same_space(eta.space(), model.space(n), "first_order_d");
  const Observable& G = model.potential(n);
  const MarkovKernel& M = model.mutation(n);
  double mass = eta(G);
  if (mass <= 0.0) throw ZeroMass("first_order_d: eta(G) = 0");
  ProbabilityMeasure phi = phi_step(model, n, eta);
  const int d0 = model.space(n).size, d1 = model.space(n + 1).size;
  std::vector<double> e(static_cast<size_t>(d0) * d1);
  for (int x = 0; x < d0; ++x) {
    double scale = G[x] / mass;
    for (int y = 0; y < d1; ++y) e[x * d1 + y] = scale * (M(x, y) - phi[y]);
  }
  return FirstOrderOperator(model.space(n), model.space(n + 1), std::move(e));
}

/// Semigroup of first-order operators along the exact flow: the composition
/// of step derivatives carrying increments at time p to time n; identity at
/// p = n. `flow` must hold the exact flow through at least time n-1.
inline FirstOrderOperator semigroup_d(const FeynmanKacModel& model, int p, int n,
                                      const FlowTrajectory& flow) {
  model.require_time(n, "semigroup_d");
  if (p < 0 || p > n)
    throw TimeOutOfRange("semigroup_d: start time " + std::to_string(p) + " outside [0, " +
                         std::to_string(n) + "]");
  if (p == n) return FirstOrderOperator::identity(model.space(n));
  if (static_cast<int>(flow.size()) < n)
    throw Error("semigroup_d: flow trajectory too short");
  FirstOrderOperator out = first_order_d(model, p, flow[p]);
  for (int k = p + 1; k < n; ++k) out = compose(out, first_order_d(model, k, flow[k]));
  return out;
}

/// Per-model constants: the potential ratio g_n = max G_n / min G_n per step,
/// and a conservative upper bound r_bound[n] on the second-order remainder
/// scale at each time. The bound assembles oscillation coefficients of the
/// derivative semigroup with potential-ratio products substituted for the
/// exact step Lipschitz constants, then takes a running maximum so it is
/// nondecreasing in n. It over-covers by design; it is a budget, not an
/// estimate.
struct FkConstants {
  std::vector<double> g;        // size horizon, per step
  std::vector<double> r_bound;  // size horizon+1, per time, nondecreasing
  bool conservative = true;
};

inline FkConstants fk_constants(const FeynmanKacModel& model) {
  const int h = model.horizon();
  FkConstants out;
  out.g.resize(h);
  for (int n = 0; n < h; ++n) {
    const auto& v = model.potential(n).values();
    auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    out.g[n] = *hi / *lo;
  }

  FlowTrajectory flow = exact_flow(model, h);

  // t(q, p): Lipschitz budget for the composite step map from time q to p:
  // the product of potential ratios over [q, p) times the contraction
  // coefficient of the composed mutations; 1 when q = p.
  auto lipschitz_budget = [&](int q, int p) {
    if (q == p) return 1.0;
    double gprod = 1.0;
    for (int k = q; k < p; ++k) gprod *= out.g[k];
    MarkovKernel m = model.mutation(q);
    for (int k = q + 1; k < p; ++k) m = compose(m, model.mutation(k));
    return gprod * dobrushin_coefficient(m);
  };

  out.r_bound.assign(h + 1, 0.0);
  double running = 0.0;
  for (int n = 1; n <= h; ++n) {
    double r = 0.0;
    for (int p = 0; p < n; ++p) {
      double beta_tail = (p + 1 == n)
                             ? 1.0
                             : oscillation_coefficient(semigroup_d(model, p + 1, n, flow));
      double lip_sum = 0.0;
      for (int q = 0; q <= p; ++q) lip_sum += lipschitz_budget(q, p);
      r += beta_tail * lip_sum * lip_sum * out.g[p] * out.g[p];
    }
    running = std::max(running, r);
    out.r_bound[n] = running;
  }
  return out;
}

/// Abstract mean-field transition rule on finite spaces: given the current
/// empirical (or exact) distribution at time n, produce the kernel that moves
/// one particle from time n to n+1. The exact flow of the rule is
/// eta_{n+1} = eta_n K_{n+1, eta_n}.
class McKeanSpec {
 public:
  virtual ~McKeanSpec() = default;
  virtual int horizon() const = 0;
  virtual const StateSpace& space(int n) const = 0;
  virtual const ProbabilityMeasure& initial() const = 0;
  virtual MarkovKernel kernel_from(int n, const ProbabilityMeasure& eta) const = 0;
  virtual std::string name() const = 0;
};

inline FlowTrajectory exact_flow(const McKeanSpec& spec, int n) {
  FlowTrajectory flow;
  flow.reserve(n + 1);
  flow.push_back(spec.initial());
  for (int p = 0; p < n; ++p) flow.push_back(apply(flow.back(), spec.kernel_from(p, flow.back())));
  return flow;
}

/// Accept/reject selection followed by mutation.
class SelectionMutationMcKean final : public McKeanSpec {
 public:
  explicit SelectionMutationMcKean(const FeynmanKacModel& model) : model_(model) {}
  int horizon() const override { return model_.horizon(); }
  const StateSpace& space(int n) const override { return model_.space(n); }
  const ProbabilityMeasure& initial() const override { return model_.initial(); }
  MarkovKernel kernel_from(int n, const ProbabilityMeasure& eta) const override {
    return mckean_kernel(model_, n, eta);
  }
  std::string name() const override { return "selection-mutation"; }
  const FeynmanKacModel& model() const { return model_; }

 private:
  const FeynmanKacModel& model_;
};

/// Conditionally-iid rule: every particle resamples from the one-step image
/// of the current distribution, independently of its own state.
class ConditionallyIidMcKean final : public McKeanSpec {
 public:
  explicit ConditionallyIidMcKean(const FeynmanKacModel& model) : model_(model) {}
  int horizon() const override { return model_.horizon(); }
  const StateSpace& space(int n) const override { return model_.space(n); }
  const ProbabilityMeasure& initial() const override { return model_.initial(); }
  MarkovKernel kernel_from(int n, const ProbabilityMeasure& eta) const override {
    ProbabilityMeasure phi = phi_step(model_, n, eta);
    const int d0 = model_.space(n).size, d1 = model_.space(n + 1).size;
    std::vector<double> e(static_cast<size_t>(d0) * d1);
    for (int x = 0; x < d0; ++x)
      for (int y = 0; y < d1; ++y) e[x * d1 + y] = phi[y];
    return MarkovKernel(model_.space(n), model_.space(n + 1), std::move(e));
  }
  std::string name() const override { return "conditionally-iid"; }
  const FeynmanKacModel& model() const { return model_; }

 private:
  const FeynmanKacModel& model_;
};

}  // namespace meanfield
