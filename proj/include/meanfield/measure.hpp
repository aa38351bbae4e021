#pragma once

// Finite state spaces, signed/probability measures, bounded observables and
// Markov kernels, plus the small set of norms and coefficients everything
// else is built from.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace meanfield {

struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

struct SpaceMismatch : Error {
  using Error::Error;
};
struct UnreachableTargetPoint : Error {
  using Error::Error;
};
struct ZeroMass : Error {
  using Error::Error;
};

/// Finite state space. Points are indices 0..size-1; labels are optional and
/// purely cosmetic. Two spaces are compatible iff they have the same size.
struct StateSpace {
  int size = 0;
  std::vector<std::string> labels;

  StateSpace() = default;
  explicit StateSpace(int n) : size(n) {
    if (n <= 0) throw Error("StateSpace: size must be positive, got " + std::to_string(n));
  }
  StateSpace(int n, std::vector<std::string> names) : StateSpace(n) {
    if (!names.empty() && static_cast<int>(names.size()) != n)
      throw Error("StateSpace: label count does not match size");
    labels = std::move(names);
  }

  friend bool operator==(const StateSpace& a, const StateSpace& b) { return a.size == b.size; }
};

inline void require_same_space(const StateSpace& a, const StateSpace& b, const char* where) {
  if (!(a == b))
    throw SpaceMismatch(std::string(where) + ": spaces of size " + std::to_string(a.size) +
                        " and " + std::to_string(b.size) + " are incompatible");
}

namespace detail {
inline void require_finite(std::span<const double> xs, const char* where) {
  for (double x : xs)
    if (!std::isfinite(x)) throw Error(std::string(where) + ": non-finite entry");
}
}  // namespace detail

/// Bounded real function on a finite space, stored pointwise.
class Observable {
 public:
  Observable() = default;
  Observable(StateSpace space, std::vector<double> values)
      : space_(std::move(space)), values_(std::move(values)) {
    if (static_cast<int>(values_.size()) != space_.size)
      throw Error("Observable: value count does not match space size");
    detail::require_finite(values_, "Observable");
  }

  static Observable constant(const StateSpace& space, double c) {
    return Observable(space, std::vector<double>(space.size, c));
  }
  static Observable indicator(const StateSpace& space, int point) {
    if (point < 0 || point >= space.size) throw Error("Observable::indicator: point out of range");
    std::vector<double> v(space.size, 0.0);
    v[point] = 1.0;
    return Observable(space, v);
  }

  const StateSpace& space() const { return space_; }
  int size() const { return space_.size; }
  double operator[](int x) const { return values_[x]; }
  double& operator[](int x) { return values_[x]; }
  const std::vector<double>& values() const { return values_; }

 private:
  StateSpace space_;
  std::vector<double> values_;
};

/// osc(f) = max f - min f.
inline double oscillation(const Observable& f) {
  auto [lo, hi] = std::minmax_element(f.values().begin(), f.values().end());
  return *hi - *lo;
}

inline double sup_norm(const Observable& f) {
  double m = 0.0;
  for (double v : f.values()) m = std::max(m, std::fabs(v));
  return m;
}

/// Signed measure with finite total variation on a finite space.
class SignedMeasure {
 public:
  SignedMeasure() = default;
  SignedMeasure(StateSpace space, std::vector<double> weights)
      : space_(std::move(space)), weights_(std::move(weights)) {
    if (static_cast<int>(weights_.size()) != space_.size)
      throw Error("SignedMeasure: weight count does not match space size");
    detail::require_finite(weights_, "SignedMeasure");
  }

  const StateSpace& space() const { return space_; }
  int size() const { return space_.size; }
  double operator[](int x) const { return weights_[x]; }
  double& operator[](int x) { return weights_[x]; }
  const std::vector<double>& weights() const { return weights_; }

  /// Integral of f.
  double operator()(const Observable& f) const {
    require_same_space(space_, f.space(), "SignedMeasure::operator()");
    double s = 0.0;
    for (int x = 0; x < size(); ++x) s += weights_[x] * f[x];
    return s;
  }

  /// mu(E), the total mass.
  double total_mass() const {
    double s = 0.0;
    for (double w : weights_) s += w;
    return s;
  }

 private:
  StateSpace space_;
  std::vector<double> weights_;
};

/// Probability measure: nonnegative weights summing to 1. Construction
/// accepts inputs whose mass is within 1e-9 of 1 and renormalizes; anything
/// further off is rejected as a modelling error rather than silently fixed.
class ProbabilityMeasure {
 public:
  static constexpr double kMassSlack = 1e-9;

  ProbabilityMeasure() = default;
  ProbabilityMeasure(StateSpace space, std::vector<double> weights)
      : space_(std::move(space)), weights_(std::move(weights)) {
    if (static_cast<int>(weights_.size()) != space_.size)
      throw Error("ProbabilityMeasure: weight count does not match space size");
    detail::require_finite(weights_, "ProbabilityMeasure");
    double mass = 0.0;
    for (double w : weights_) {
      if (w < 0.0)
        throw Error("ProbabilityMeasure: negative weight " + std::to_string(w));
      mass += w;
    }
    if (std::fabs(mass - 1.0) > kMassSlack)
      throw Error("ProbabilityMeasure: total mass " + std::to_string(mass) +
                  " is not within 1e-9 of 1");
    for (double& w : weights_) w /= mass;
  }

  static ProbabilityMeasure uniform(const StateSpace& space) {
    return ProbabilityMeasure(space, std::vector<double>(space.size, 1.0 / space.size));
  }
  static ProbabilityMeasure point_mass(const StateSpace& space, int x) {
    if (x < 0 || x >= space.size) throw Error("ProbabilityMeasure::point_mass: point out of range");
    std::vector<double> w(space.size, 0.0);
    w[x] = 1.0;
    return ProbabilityMeasure(space, w);
  }

  const StateSpace& space() const { return space_; }
  int size() const { return space_.size; }
  double operator[](int x) const { return weights_[x]; }
  const std::vector<double>& weights() const { return weights_; }

  double operator()(const Observable& f) const {
    require_same_space(space_, f.space(), "ProbabilityMeasure::operator()");
    double s = 0.0;
    for (int x = 0; x < size(); ++x) s += weights_[x] * f[x];
    return s;
  }

  SignedMeasure as_signed() const { return SignedMeasure(space_, weights_); }

 private:
  StateSpace space_;
  std::vector<double> weights_;
};

/// mu - nu as a signed measure.
inline SignedMeasure subtract(const ProbabilityMeasure& mu, const ProbabilityMeasure& nu) {
  require_same_space(mu.space(), nu.space(), "subtract");
  std::vector<double> w(mu.size());
  for (int x = 0; x < mu.size(); ++x) w[x] = mu[x] - nu[x];
  return SignedMeasure(mu.space(), w);
}

/// Total variation distance, half-L1 convention.
inline double total_variation(const ProbabilityMeasure& mu, const ProbabilityMeasure& nu) {
  require_same_space(mu.space(), nu.space(), "total_variation");
  double s = 0.0;
  for (int x = 0; x < mu.size(); ++x) s += std::fabs(mu[x] - nu[x]);
  return 0.5 * s;
}

/// Markov transition kernel between finite spaces, stored row-major.
/// Every row is a probability vector over the target space.
class MarkovKernel {
 public:
  static constexpr double kRowSlack = 1e-9;

  MarkovKernel() = default;
  MarkovKernel(StateSpace source, StateSpace target, std::vector<double> entries)
      : source_(std::move(source)), target_(std::move(target)), entries_(std::move(entries)) {
    const int n = source_.size, m = target_.size;
    if (static_cast<int>(entries_.size()) != n * m)
      throw Error("MarkovKernel: entry count does not match source*target size");
    detail::require_finite(entries_, "MarkovKernel");
    for (int x = 0; x < n; ++x) {
      double mass = 0.0;
      for (int y = 0; y < m; ++y) {
        double p = entries_[x * m + y];
        if (p < 0.0)
          throw Error("MarkovKernel: negative entry at row " + std::to_string(x));
        mass += p;
      }
      if (std::fabs(mass - 1.0) > kRowSlack)
        throw Error("MarkovKernel: row " + std::to_string(x) + " has mass " +
                    std::to_string(mass));
      for (int y = 0; y < m; ++y) entries_[x * m + y] /= mass;
    }
  }

  static MarkovKernel identity(const StateSpace& space) {
    std::vector<double> e(static_cast<size_t>(space.size) * space.size, 0.0);
    for (int x = 0; x < space.size; ++x) e[x * space.size + x] = 1.0;
    return MarkovKernel(space, space, e);
  }

  const StateSpace& source() const { return source_; }
  const StateSpace& target() const { return target_; }
  double operator()(int x, int y) const { return entries_[x * target_.size + y]; }
  std::span<const double> row(int x) const {
    return {entries_.data() + static_cast<size_t>(x) * target_.size,
            static_cast<size_t>(target_.size)};
  }
  const std::vector<double>& entries() const { return entries_; }

  /// Row distribution as a measure.
  ProbabilityMeasure row_measure(int x) const {
    auto r = row(x);
    return ProbabilityMeasure(target_, std::vector<double>(r.begin(), r.end()));
  }

 private:
  StateSpace source_;
  StateSpace target_;
  std::vector<double> entries_;
};

/// (Mf)(x) = sum_y M(x,y) f(y); an observable on the source space.
inline Observable apply(const MarkovKernel& M, const Observable& f) {
  require_same_space(M.target(), f.space(), "apply(kernel, f)");
  std::vector<double> out(M.source().size, 0.0);
  for (int x = 0; x < M.source().size; ++x) {
    double s = 0.0;
    auto r = M.row(x);
    for (int y = 0; y < M.target().size; ++y) s += r[y] * f[y];
    out[x] = s;
  }
  return Observable(M.source(), std::move(out));
}

/// (mu M)(y) = sum_x mu(x) M(x,y); mass is conserved.
inline SignedMeasure apply(const SignedMeasure& mu, const MarkovKernel& M) {
  require_same_space(mu.space(), M.source(), "apply(measure, kernel)");
  std::vector<double> out(M.target().size, 0.0);
  for (int x = 0; x < mu.size(); ++x) {
    double w = mu[x];
    if (w == 0.0) continue;
    auto r = M.row(x);
    for (int y = 0; y < M.target().size; ++y) out[y] += w * r[y];
  }
  return SignedMeasure(M.target(), std::move(out));
}

inline ProbabilityMeasure apply(const ProbabilityMeasure& mu, const MarkovKernel& M) {
  SignedMeasure s = apply(mu.as_signed(), M);
  return ProbabilityMeasure(s.space(), s.weights());
}

/// (M1 M2)(x,z) = sum_y M1(x,y) M2(y,z).
inline MarkovKernel compose(const MarkovKernel& M1, const MarkovKernel& M2) {
  require_same_space(M1.target(), M2.source(), "compose");
  const int n = M1.source().size, k = M1.target().size, m = M2.target().size;
  std::vector<double> e(static_cast<size_t>(n) * m, 0.0);
  for (int x = 0; x < n; ++x)
    for (int y = 0; y < k; ++y) {
      double a = M1(x, y);
      if (a == 0.0) continue;
      for (int z = 0; z < m; ++z) e[x * m + z] += a * M2(y, z);
    }
  return MarkovKernel(M1.source(), M2.target(), std::move(e));
}

/// Dobrushin contraction coefficient
///   beta(M) = sup{ osc(Mf) : osc(f) <= 1 } = max_{x,y} TV(M(x,.), M(y,.)).
inline double dobrushin_coefficient(const MarkovKernel& M) {
  const int n = M.source().size, m = M.target().size;
  double beta = 0.0;
  for (int x = 0; x < n; ++x)
    for (int y = x + 1; y < n; ++y) {
      double s = 0.0;
      for (int z = 0; z < m; ++z) s += std::fabs(M(x, z) - M(y, z));
      beta = std::max(beta, 0.5 * s);
    }
  return beta;
}

/// Adjoint (time-reversal) kernel of M with respect to mu:
///   M*(y,x) = mu(x) M(x,y) / (mu M)(y),
/// characterized by (mu M)(f . M* g) = mu(M f . g). Rows are indexed by the
/// target space of M; a row is undefined when (mu M)(y) = 0.
inline MarkovKernel adjoint_kernel(const MarkovKernel& M, const ProbabilityMeasure& mu) {
  require_same_space(mu.space(), M.source(), "adjoint_kernel");
  const int n = M.source().size, m = M.target().size;
  ProbabilityMeasure muM = apply(mu, M);
  std::vector<double> e(static_cast<size_t>(m) * n, 0.0);
  for (int y = 0; y < m; ++y) {
    if (muM[y] == 0.0)
      throw UnreachableTargetPoint("adjoint_kernel: target point " + std::to_string(y) +
                                   " has zero mass under mu M");
    for (int x = 0; x < n; ++x) e[y * n + x] = mu[x] * M(x, y) / muM[y];
  }
  return MarkovKernel(M.target(), M.source(), std::move(e));
}

/// Moment constants b(m), defined through
///   b(2m)^{2m}   = (2m)! / (m! 2^m)
///   b(2m+1)^{2m+1} = (2m+1)! / ((m+1)! sqrt(m+1/2)) * 2^{-(m+1/2)}.
/// Evaluated in log space via lgamma, so large m neither overflows nor loses
/// more than a few ulp.
inline double b_constant(int m) {
  if (m < 1) throw Error("b_constant: moment order must be >= 1");
  if (m % 2 == 0) {
    int k = m / 2;  // m = 2k
    double log_pow = std::lgamma(2.0 * k + 1.0) - std::lgamma(k + 1.0) - k * std::log(2.0);
    return std::exp(log_pow / (2.0 * k));
  }
  int k = (m - 1) / 2;  // m = 2k+1
  double log_pow = std::lgamma(2.0 * k + 2.0) - std::lgamma(k + 2.0) -
                   0.5 * std::log(k + 0.5) - (k + 0.5) * std::log(2.0);
  return std::exp(log_pow / (2.0 * k + 1.0));
}

}  // namespace meanfield
