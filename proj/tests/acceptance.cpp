// End-to-end acceptance gate. Each test prints one [PASS]/[FAIL] line with
// the measured quantities and pins its tolerance in code.
#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>

#include "oracles.hpp"

using namespace meanfield;

namespace {

void verdict(int id, bool ok, const std::string& detail) {
  std::printf("[%s] criterion %2d: %s\n", ok ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
  CHECK(ok);
}

double elapsed_ms(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

// Shared replication batches on the 2-state running model at time 2, reused
// by every desk-scale statistical criterion. Columns:
//   0 v_sum       V_0(f) + V_1(f) + V_2(f)
//   1 w           W_2(f)
//   2 v2          V_2(f)
//   3 remainder   sqrt(N) (W_2(f) - sum_p V_p(D_{p,2} f))
//   4 bracket_gap |<M^N>_2 - <M>_2|
//   5 sup_small   sup |W_2| over the 0.1-difference class
//   6 sup_large   sup |W_2| over the 1.0-difference class
struct GridBatches {
  FeynmanKacModel model = testkit::running_model(2);
  SelectionMutationMcKean spec{model};
  FlowTrajectory flow = exact_flow(model, 2);
  Observable f{StateSpace(2), {1.0, 0.0}};
  std::vector<Observable> fs{3, f};
  std::vector<Observable> dpnf = remainder_observables(model, flow, 2, f);
  FunctionClass F = FunctionClass::indicators(StateSpace(2));
  DeltaClass d_small{F, flow[2], 0.1};
  DeltaClass d_large{F, flow[2], 1.0};
  FkConstants fk = fk_constants(model);
  SpeedSchedule sched{0.5, {100, 1000, 10000}};
  int R = 10000;
  double bracket_limit = exact_bracket(spec, flow, fs, 2);
  double target_vsum = 0.0;
  double target_w = 0.0;
  std::vector<ReplicationBatch> batches;

  GridBatches() {
    for (int p = 0; p <= 2; ++p) target_vsum += 0.5 * cov_v(spec, flow, p, f, f);
    target_w = 0.5 * cov_w(model, spec, flow, 2, f, f);

    RunExtractor ex;
    ex.names = {"v_sum", "w", "v2", "remainder", "bracket_gap", "sup_small", "sup_large"};
    ex.fill = [this](const SimulationRun& run, std::span<double> row) {
      double vsum = 0.0;
      for (int p = 0; p <= 2; ++p) vsum += field_v(run, spec, p, f);
      row[0] = vsum;
      row[1] = field_w(run, flow, 2, f);
      row[2] = field_v(run, spec, 2, f);
      row[3] = remainder_r(run, spec, flow, 2, f, dpnf);
      row[4] = std::fabs(martingale_bracket(run, spec, fs, 2) - bracket_limit);
      row[5] = class_sup_norm(d_small.members(), run, spec, flow, 2, FieldKind::W);
      row[6] = class_sup_norm(d_large.members(), run, spec, flow, 2, FieldKind::W);
    };
    RngSpec rng{2024};
    for (int N : sched.n_grid) batches.push_back(replicate(spec, 2, N, R, rng, ex));
  }
};

const GridBatches& grid() {
  static GridBatches g;
  return g;
}

double mean_of(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double se_of_mean(std::span<const double> xs) {
  double m = mean_of(xs), s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / (static_cast<double>(xs.size()) - 1.0) /
                   static_cast<double>(xs.size()));
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

TEST_CASE("criterion 1: two-state fixed point reproduced along the flow") {
  auto model = testkit::running_model(10);
  auto t0 = std::chrono::steady_clock::now();
  FlowTrajectory flow = exact_flow(model, 10);
  double ms = elapsed_ms(t0);
  double worst = 0.0;
  for (int n = 0; n <= 10; ++n)
    for (int x = 0; x < 2; ++x) worst = std::max(worst, std::fabs(flow[n][x] - 0.5));
  bool ok = worst <= 1e-14 && ms < 1.0;
  verdict(1, ok, "fixed-point flow: max deviation " + fmt(worst) + " (tol 1e-14), " +
                     fmt(ms) + " ms (limit 1)");
}

TEST_CASE("criterion 2: one-step transport identities on random models") {
  std::mt19937_64 gen(11);
  auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (int rep = 0; rep < 1000; ++rep) {
    auto model = testkit::random_model(gen, 1, 6);
    const ProbabilityMeasure& eta = model.initial();
    ProbabilityMeasure psi = psi_transform(model.potential(0), eta);
    ProbabilityMeasure phi = phi_step(model, 0, eta);
    ProbabilityMeasure via_s = apply(eta, selection_kernel(model.potential(0), eta));
    ProbabilityMeasure via_k = apply(eta, mckean_kernel(model, 0, eta));
    for (int x = 0; x < psi.size(); ++x)
      worst = std::max(worst, std::fabs(via_s[x] - psi[x]));
    for (int x = 0; x < phi.size(); ++x)
      worst = std::max(worst, std::fabs(via_k[x] - phi[x]));
  }
  double ms = elapsed_ms(t0);
  bool ok = worst <= 1e-14 && ms < 1000.0;
  verdict(2, ok, "selection/one-step transport: max deviation " + fmt(worst) +
                     " over 1000 models (tol 1e-14), " + fmt(ms) + " ms (limit 1000)");
}

TEST_CASE("criterion 3: series and variational rate routes agree") {
  std::mt19937_64 gen(31);
  auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  int done = 0;
  for (int rep = 0; rep < 50; ++rep) {
    auto model = testkit::random_model(gen, 2, 5);
    SelectionMutationMcKean spec(model);
    FlowTrajectory flow = exact_flow(model, 2);
    SignedMeasure mu = testkit::random_direction(gen, flow[2], 0.05);
    RateEvaluation series = rate_I_measure(spec, flow, 2, mu);
    RateEvaluation vari = rate_variational_numeric(model, spec, flow, 2, mu, FieldKind::V);
    if (!series.converged || !std::isfinite(series.value) || !std::isfinite(vari.value)) continue;
    worst = std::max(worst, std::fabs(series.value - vari.value));
    ++done;
  }
  double ms = elapsed_ms(t0);
  bool ok = done == 50 && worst <= 1e-6 && ms < 10000.0;
  verdict(3, ok, "dual rate routes: max gap " + fmt(worst) + " on " + std::to_string(done) +
                     "/50 models (tol 1e-6), " + fmt(ms) + " ms (limit 10000)");
}

TEST_CASE("criterion 4: constant-kernel reduction of the rate function") {
  StateSpace s(2);
  auto iid = testkit::constant_kernel_model(1);
  ConditionallyIidMcKean spec(iid);
  FlowTrajectory flow = exact_flow(spec, 1);
  RateEvaluation worked = rate_I_measure(spec, flow, 1, SignedMeasure(s, {0.1, -0.1}));
  double worked_gap = std::fabs(worked.value - 0.02);

  std::mt19937_64 gen(41);
  double worst = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    auto m = testkit::constant_kernel_model(1, 2 + static_cast<int>(gen() % 4));
    ConditionallyIidMcKean cspec(m);
    FlowTrajectory cflow = exact_flow(cspec, 1);
    SignedMeasure d = testkit::random_direction(gen, cflow[1], 0.2);
    double norm2 = 0.0;
    for (int x = 0; x < d.size(); ++x) norm2 += d[x] * d[x] / cflow[1][x];
    worst = std::max(worst, std::fabs(rate_I_measure(cspec, cflow, 1, d).value - 0.5 * norm2));
  }
  bool ok = worked_gap <= 1e-15 && worst <= 1e-12;
  verdict(4, ok, "constant-kernel rate: worked-value gap " + fmt(worked_gap) +
                     " (tol 1e-15), density-norm identity gap " + fmt(worst) + " (tol 1e-12)");
}

TEST_CASE("criterion 5: replication variance of the local field matches the limit") {
  auto flat = testkit::flat_potential_model(1);
  SelectionMutationMcKean spec(flat);
  Observable f(StateSpace(2), {1.0, 0.0});
  auto t0 = std::chrono::steady_clock::now();
  RunExtractor ex;
  ex.names = {"v1"};
  ex.fill = [&](const SimulationRun& run, std::span<double> row) {
    row[0] = field_v(run, spec, 1, f);
  };
  RngSpec rng{5005};
  ReplicationBatch batch = replicate(spec, 1, 1000, 5000, rng, ex);
  std::vector<double> v = batch.column(0);
  const double R = static_cast<double>(v.size());
  double m = mean_of(v), s2 = 0.0, m4 = 0.0;
  for (double x : v) {
    double d = x - m;
    s2 += d * d;
    m4 += d * d * d * d;
  }
  s2 /= R - 1.0;
  m4 /= R;
  double se = std::sqrt(std::max(0.0, m4 - s2 * s2 * (R - 3.0) / (R - 1.0)) / R);
  double ms = elapsed_ms(t0);
  double gap = std::fabs(s2 - 0.225);
  bool ok = gap <= 3.0 * se && ms < 30000.0;
  verdict(5, ok, "flat-potential variance: " + fmt(s2) + " vs 0.225, gap " + fmt(gap) +
                     " <= 3 se = " + fmt(3.0 * se) + ", " + fmt(ms) + " ms (limit 30000)");
}

TEST_CASE("criterion 6: scaled log-exponential moments approach the half variance") {
  const GridBatches& g = grid();
  struct Row {
    double gap, se;
  };
  bool nonincreasing = true;
  double final_rel_v = 0.0, final_rel_w = 0.0;
  std::string trace;
  for (int which = 0; which < 2; ++which) {
    double target = which == 0 ? g.target_vsum : g.target_w;
    std::vector<Row> rows;
    for (size_t i = 0; i < g.batches.size(); ++i) {
      double alpha = g.sched.alpha(g.sched.n_grid[i]);
      LaplaceEstimate est = laplace_estimate(g.batches[i].column(which), alpha);
      rows.push_back({std::fabs(est.value - target), est.se});
    }
    for (size_t i = 1; i < rows.size(); ++i) {
      double slack = 2.0 * std::sqrt(rows[i - 1].se * rows[i - 1].se + rows[i].se * rows[i].se);
      if (rows[i].gap > rows[i - 1].gap + slack) nonincreasing = false;
    }
    double rel = rows.back().gap / target;
    (which == 0 ? final_rel_v : final_rel_w) = rel;
    trace += std::string(which == 0 ? "local" : " global") + " gaps " + fmt(rows[0].gap) + "/" +
             fmt(rows[1].gap) + "/" + fmt(rows[2].gap);
  }
  bool ok = nonincreasing && final_rel_v < 0.10 && final_rel_w < 0.10;
  verdict(6, ok, "log-moment expansion: " + trace + ", final relative gaps " + fmt(final_rel_v) +
                     "/" + fmt(final_rel_w) + " (limit 0.1), trend " +
                     (nonincreasing ? "nonincreasing" : "violated"));
}

TEST_CASE("criterion 7: flat-potential remainder vanishes identically") {
  auto flat = testkit::flat_potential_model(5);
  SelectionMutationMcKean spec(flat);
  FlowTrajectory flow = exact_flow(flat, 5);
  Observable f(StateSpace(2), {1.0, 0.0});
  std::vector<std::vector<Observable>> pulled;
  for (int n = 0; n <= 5; ++n) pulled.push_back(remainder_observables(flat, flow, n, f));
  RunExtractor ex;
  for (int n = 0; n <= 5; ++n) ex.names.push_back("r" + std::to_string(n));
  ex.fill = [&](const SimulationRun& run, std::span<double> row) {
    for (int n = 0; n <= 5; ++n) row[n] = remainder_r(run, spec, flow, n, f, pulled[n]);
  };
  RngSpec rng{7007};
  ReplicationBatch batch = replicate(spec, 5, 1000, 1000, rng, ex);
  double worst = 0.0;
  for (int n = 0; n <= 5; ++n)
    for (double x : batch.column(n)) worst = std::max(worst, std::fabs(x));
  bool ok = worst <= 1e-9;
  verdict(7, ok, "flat-potential remainder: max |value| " + fmt(worst) +
                     " over 1000 replications, times 0..5 (tol 1e-9)");
}

TEST_CASE("criterion 8: remainder exponential moment and tail trend") {
  const GridBatches& g = grid();
  double r_hat = g.fk.r_bound[2];
  double t = 1.0 / (4.0 * r_hat);
  std::vector<double> rem = g.batches[1].column(3);  // N = 1000
  double expm = 0.0;
  for (double x : rem) expm += std::exp(t * std::fabs(x));
  expm /= static_cast<double>(rem.size());
  bool moment_ok = expm < std::sqrt(2.0);

  std::vector<double> freqs;
  for (size_t i = 0; i < g.batches.size(); ++i) {
    double thr = 0.5 * std::sqrt(g.sched.alpha(g.sched.n_grid[i]));
    int64_t count = 0;
    for (double x : g.batches[i].column(3))
      if (std::fabs(x) >= thr) ++count;
    freqs.push_back(static_cast<double>(count) / g.R);
  }
  bool trend_ok = freqs[0] >= freqs[1] && freqs[1] >= freqs[2];
  bool ok = moment_ok && trend_ok;
  verdict(8, ok, "remainder tail: E exp(t|R|) = " + fmt(expm) + " < sqrt(2) = 1.41421 at t = " +
                     fmt(t) + "; exceedance freqs " + fmt(freqs[0]) + "/" + fmt(freqs[1]) + "/" +
                     fmt(freqs[2]) + (trend_ok ? " nonincreasing" : " violated"));
}

TEST_CASE("criterion 9: moment growth stays below the universal constants") {
  const GridBatches& g = grid();
  std::vector<double> v = g.batches[1].column(2);  // V_2(f) at N = 1000
  const double R = static_cast<double>(v.size());
  bool ok = true;
  std::string trace;
  for (int m : {2, 4, 6}) {
    double mm = 0.0, ss = 0.0;
    for (double x : v) mm += std::pow(std::fabs(x), m);
    mm /= R;
    for (double x : v) {
      double d = std::pow(std::fabs(x), m) - mm;
      ss += d * d;
    }
    double se = std::sqrt(ss / (R - 1.0) / R);
    double root = std::pow(mm, 1.0 / m);
    double rel_se = se / (m * mm);  // delta method on the m-th root
    double bound = b_constant(m) * (1.0 + 3.0 * rel_se);
    ok = ok && root <= bound;
    trace += " m=" + std::to_string(m) + ": " + fmt(root) + " <= " + fmt(bound);
  }
  bool frozen = b_constant(2) == 1.0 && std::fabs(b_constant(4) - std::pow(3.0, 0.25)) <= 1e-12;
  ok = ok && frozen;
  verdict(9, ok, "moment roots" + trace + "; b(2), b(4) reproduced to 1e-12");
}

TEST_CASE("criterion 10: occupation-measure bias stays of order 1/N") {
  const GridBatches& g = grid();
  std::vector<double> scaled, slack;
  for (size_t i = 0; i < g.batches.size(); ++i) {
    std::vector<double> w = g.batches[i].column(1);
    double sqn = std::sqrt(static_cast<double>(g.sched.n_grid[i]));
    scaled.push_back(sqn * std::fabs(mean_of(w)));  // N |E eta^N(f) - eta(f)|
    slack.push_back(3.0 * sqn * se_of_mean(w));
  }
  double cap = std::max(scaled[0] + slack[0], scaled[1] + slack[1]);
  bool ok = scaled[2] - slack[2] <= cap;
  verdict(10, ok, "scaled bias N|E eta^N(f) - eta(f)|: " + fmt(scaled[0]) + "/" + fmt(scaled[1]) +
                      "/" + fmt(scaled[2]) + ", largest-N lower edge " +
                      fmt(scaled[2] - slack[2]) + " <= " + fmt(cap));
}

TEST_CASE("criterion 11: bracket gap decays at the Monte Carlo rate") {
  const GridBatches& g = grid();
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  const double k = static_cast<double>(g.batches.size());
  std::string trace;
  for (size_t i = 0; i < g.batches.size(); ++i) {
    double x = std::log(static_cast<double>(g.sched.n_grid[i]));
    double y = std::log(mean_of(g.batches[i].column(4)));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    trace += (i ? "/" : "") + fmt(mean_of(g.batches[i].column(4)));
  }
  double slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
  bool ok = slope >= -0.65 && slope <= -0.35;
  verdict(11, ok, "bracket gap means " + trace + ", log-log slope " + fmt(slope) +
                      " within [-0.65, -0.35]");
}

TEST_CASE("criterion 12: covering numbers against the exhaustive oracle") {
  std::mt19937_64 gen(2121);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  bool greedy_ok = true, square_ok = true;
  int worst_excess = 0;
  for (int rep = 0; rep < 100; ++rep) {
    StateSpace s(2 + static_cast<int>(gen() % 3));
    std::vector<Observable> members;
    members.push_back(Observable::constant(s, 0.0));
    members.push_back(Observable::constant(s, 1.0));
    int extra = static_cast<int>(gen() % 5);
    for (int k = 0; k < extra; ++k) {
      std::vector<double> v(s.size);
      for (double& x : v) x = unif(gen);
      members.emplace_back(s, std::move(v));
    }
    FunctionClass F(s, members);
    ProbabilityMeasure mu = ProbabilityMeasure::uniform(s);
    std::vector<double> dist(static_cast<size_t>(F.size()) * F.size());
    for (int i = 0; i < F.size(); ++i)
      for (int j = 0; j < F.size(); ++j)
        dist[static_cast<size_t>(i) * F.size() + j] = l2_distance(mu, F[i], F[j]);
    for (double eps : {0.3, 0.6, 1.2}) {
      int lib = covering_number(F, mu, eps);
      int exact = testkit::exhaustive_cover_oracle(dist, F.size(), eps);
      worst_excess = std::max(worst_excess, lib - exact);
      if (lib < exact || lib > exact + 1) greedy_ok = false;
    }
    for (double delta : {0.5, 1.0})
      for (double eps : {0.4, 0.8}) {
        DeltaClass D = delta_class(F, mu, delta);
        int lhs = covering_number(D.members(), mu, eps);
        int rhs = covering_number(F, mu, eps / 2.0);
        if (lhs > rhs * rhs) square_ok = false;
      }
  }
  bool ok = greedy_ok && square_ok;
  verdict(12, ok, std::string("greedy vs exhaustive cover: worst excess ") +
                      std::to_string(worst_excess) + " (allowed +1) on 100 classes; "
                      "difference-class square bound " +
                      (square_ok ? "holds" : "violated"));
}

TEST_CASE("criterion 13: smaller difference classes have smaller tail exponents") {
  const GridBatches& g = grid();
  const ReplicationBatch& big = g.batches[2];  // N = 10000
  double alpha = g.sched.alpha(10000);
  double thr = std::sqrt(alpha);

  auto exponent = [&](int col, const DeltaClass& cls) {
    if (cls.degenerate()) return -std::numeric_limits<double>::infinity();
    int64_t count = 0;
    for (double x : big.column(col))
      if (x > thr) ++count;
    if (count == 0) return std::log(wilson_interval(0, g.R).hi) / alpha;
    return std::log(static_cast<double>(count) / g.R) / alpha;
  };
  double lp_small = exponent(5, g.d_small);
  double lp_large = exponent(6, g.d_large);
  bool ok = lp_small < lp_large;
  verdict(13, ok, "tail exponents (1/alpha) log P: delta=0.1 -> " + fmt(lp_small) +
                      ", delta=1.0 -> " + fmt(lp_large) + " (strictly smaller required)");
}

TEST_CASE("criterion 14: identical configs and seeds reproduce identical checksums") {
  nlohmann::json doc;
  doc["kind"] = "mdp-sweep";
  doc["seed"] = 424242;
  doc["model"] = to_json(testkit::running_model(1));
  doc["params"]["time"] = 1;
  doc["params"]["observables"] = nlohmann::json::array({{1.0, 0.0}, {1.0, 0.0}});
  doc["params"]["n_grid"] = {50, 100};
  doc["params"]["beta"] = 0.5;
  doc["params"]["replications"] = 80;
  ExperimentConfig cfg = load_experiment_config(doc);
  RunArtifacts a = run_experiment(cfg);
  RunArtifacts b = run_experiment(cfg);
  std::string ha = detail::hex64(detail::fnv1a(a.report.dump() + a.samples_csv));
  std::string hb = detail::hex64(detail::fnv1a(b.report.dump() + b.samples_csv));
  bool ok = ha == hb && !a.samples_csv.empty();
  verdict(14, ok, "rerun checksums " + ha + " vs " + hb + (ok ? " (identical)" : " (mismatch)"));
}
