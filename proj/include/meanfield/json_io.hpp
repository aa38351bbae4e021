#pragma once

// JSON encodings of the core objects. Doubles round-trip bit-faithfully:
// nlohmann::json stores them verbatim and serializes with shortest-exact
// formatting.

#include <string>
#include <vector>

#include <json.hpp>

#include "meanfield/empirical.hpp"
#include "meanfield/flow.hpp"
#include "meanfield/measure.hpp"

namespace meanfield {

using json = nlohmann::json;

class ConfigError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline const json& require_key(const json& j, const std::string& key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) throw ConfigError(where + ": missing key \"" + key + "\"");
  return *it;
}

inline int require_int(const json& j, const std::string& key, const std::string& where) {
  const json& v = require_key(j, key, where);
  if (!v.is_number_integer()) throw ConfigError(where + ": \"" + key + "\" must be an integer");
  return v.get<int>();
}

inline std::vector<double> require_doubles(const json& v, const std::string& where) {
  if (!v.is_array()) throw ConfigError(where + ": expected an array of numbers");
  std::vector<double> out;
  out.reserve(v.size());
  for (const auto& x : v) {
    if (!x.is_number()) throw ConfigError(where + ": expected an array of numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

}  // namespace detail

inline json to_json(const ProbabilityMeasure& mu) {
  return json{{"space", mu.size()}, {"weights", mu.weights()}};
}

inline ProbabilityMeasure measure_from_json(const json& j, const std::string& where = "measure") {
  int d = detail::require_int(j, "space", where);
  if (d <= 0) throw ConfigError(where + ": \"space\" must be positive");
  auto w = detail::require_doubles(detail::require_key(j, "weights", where), where + ".weights");
  if (static_cast<int>(w.size()) != d)
    throw ConfigError(where + ": \"weights\" length does not match \"space\"");
  return ProbabilityMeasure(StateSpace(d), std::move(w));
}

inline json to_json(const MarkovKernel& M) {
  json rows = json::array();
  for (int x = 0; x < M.source().size; ++x) {
    auto r = M.row(x);
    rows.push_back(std::vector<double>(r.begin(), r.end()));
  }
  return json{{"rows", rows}};
}

inline MarkovKernel kernel_from_json(const json& j, const std::string& where = "kernel") {
  const json& rows = detail::require_key(j, "rows", where);
  if (!rows.is_array() || rows.empty())
    throw ConfigError(where + ": \"rows\" must be a nonempty array");
  std::vector<std::vector<double>> m;
  size_t width = 0;
  for (size_t x = 0; x < rows.size(); ++x) {
    auto r = detail::require_doubles(rows[x], where + ".rows[" + std::to_string(x) + "]");
    if (x == 0)
      width = r.size();
    else if (r.size() != width)
      throw ConfigError(where + ": rows have inconsistent lengths");
    m.push_back(std::move(r));
  }
  if (width == 0) throw ConfigError(where + ": rows must be nonempty");
  std::vector<double> flat;
  flat.reserve(rows.size() * width);
  for (const auto& r : m) flat.insert(flat.end(), r.begin(), r.end());
  return MarkovKernel(StateSpace(static_cast<int>(rows.size())),
                      StateSpace(static_cast<int>(width)), std::move(flat));
}

inline json to_json(const Observable& f) {
  return json{{"space", f.space().size}, {"values", f.values()}};
}

inline Observable observable_from_json(const json& j, const std::string& where = "observable") {
  int d = detail::require_int(j, "space", where);
  if (d <= 0) throw ConfigError(where + ": \"space\" must be positive");
  auto v = detail::require_doubles(detail::require_key(j, "values", where), where + ".values");
  if (static_cast<int>(v.size()) != d)
    throw ConfigError(where + ": \"values\" length does not match \"space\"");
  return Observable(StateSpace(d), std::move(v));
}

/// Model schema:
///   { "horizon": n, "spaces": [d_0..d_n], "initial": [..],
///     "potentials": [[..] per time 0..n-1], "mutations": [kernel per time] }
inline json to_json(const FeynmanKacModel& model) {
  json j;
  j["horizon"] = model.horizon();
  std::vector<int> spaces;
  for (int t = 0; t <= model.horizon(); ++t) spaces.push_back(model.space(t).size);
  j["spaces"] = spaces;
  j["initial"] = model.initial().weights();
  json pots = json::array(), muts = json::array();
  for (int t = 0; t < model.horizon(); ++t) {
    pots.push_back(model.potential(t).values());
    muts.push_back(to_json(model.mutation(t)));
  }
  j["potentials"] = pots;
  j["mutations"] = muts;
  return j;
}

inline FeynmanKacModel model_from_json(const json& j, const std::string& where = "model") {
  int horizon = detail::require_int(j, "horizon", where);
  if (horizon < 0) throw ConfigError(where + ": \"horizon\" must be nonnegative");
  auto sp = detail::require_key(j, "spaces", where);
  if (!sp.is_array() || static_cast<int>(sp.size()) != horizon + 1)
    throw ConfigError(where + ": \"spaces\" must list horizon+1 sizes");
  std::vector<StateSpace> spaces;
  for (size_t t = 0; t < sp.size(); ++t) {
    if (!sp[t].is_number_integer() || sp[t].get<int>() <= 0)
      throw ConfigError(where + ": \"spaces[" + std::to_string(t) + "]\" must be a positive integer");
    spaces.emplace_back(sp[t].get<int>());
  }
  auto w0 = detail::require_doubles(detail::require_key(j, "initial", where), where + ".initial");
  if (static_cast<int>(w0.size()) != spaces[0].size)
    throw ConfigError(where + ": \"initial\" length does not match \"spaces[0]\"");
  ProbabilityMeasure initial(spaces[0], std::move(w0));

  const json& pots = detail::require_key(j, "potentials", where);
  const json& muts = detail::require_key(j, "mutations", where);
  if (!pots.is_array() || static_cast<int>(pots.size()) != horizon)
    throw ConfigError(where + ": \"potentials\" must list horizon entries");
  if (!muts.is_array() || static_cast<int>(muts.size()) != horizon)
    throw ConfigError(where + ": \"mutations\" must list horizon entries");

  std::vector<Observable> potentials;
  std::vector<MarkovKernel> mutations;
  for (int t = 0; t < horizon; ++t) {
    auto g = detail::require_doubles(pots[t], where + ".potentials[" + std::to_string(t) + "]");
    if (static_cast<int>(g.size()) != spaces[t].size)
      throw ConfigError(where + ": \"potentials[" + std::to_string(t) +
                        "]\" length does not match \"spaces[" + std::to_string(t) + "]\"");
    potentials.emplace_back(spaces[t], std::move(g));
    MarkovKernel M = kernel_from_json(muts[t], where + ".mutations[" + std::to_string(t) + "]");
    if (M.source().size != spaces[t].size || M.target().size != spaces[t + 1].size)
      throw ConfigError(where + ": \"mutations[" + std::to_string(t) +
                        "]\" dimensions do not match the space chain");
    mutations.push_back(std::move(M));
  }
  try {
    return FeynmanKacModel(std::move(spaces), std::move(potentials), std::move(mutations),
                           std::move(initial));
  } catch (const Error& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

/// Function class schema: { "space": d, "members": [[..] per function] }.
inline json to_json(const FunctionClass& F) {
  json members = json::array();
  for (int i = 0; i < F.size(); ++i) members.push_back(F[i].values());
  return json{{"space", F.space().size}, {"members", members}};
}

inline FunctionClass function_class_from_json(const json& j,
                                              const std::string& where = "function_class") {
  int d = detail::require_int(j, "space", where);
  if (d <= 0) throw ConfigError(where + ": \"space\" must be positive");
  const json& members = detail::require_key(j, "members", where);
  if (!members.is_array() || members.empty())
    throw ConfigError(where + ": \"members\" must be a nonempty array");
  StateSpace space(d);
  std::vector<Observable> fs;
  for (size_t i = 0; i < members.size(); ++i) {
    auto v = detail::require_doubles(members[i], where + ".members[" + std::to_string(i) + "]");
    if (static_cast<int>(v.size()) != d)
      throw ConfigError(where + ": \"members[" + std::to_string(i) +
                        "]\" length does not match \"space\"");
    fs.emplace_back(space, std::move(v));
  }
  try {
    return FunctionClass(space, std::move(fs));
  } catch (const Error& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

}  // namespace meanfield
