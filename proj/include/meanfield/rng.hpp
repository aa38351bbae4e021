#pragma once

// Counter-based random number generation. Every uniform draw is a pure
// function of (seed, replication, time, particle, draw index), so runs are
// reproducible bit-for-bit on any platform and any worker layout, and streams
// for distinct indices never overlap.

#include <array>
#include <cstdint>
#include <vector>

#include "meanfield/measure.hpp"

namespace meanfield {

namespace philox {

// Philox4x32-10 round constants.
inline constexpr uint32_t kMul0 = 0xD2511F53u;
inline constexpr uint32_t kMul1 = 0xCD9E8D57u;
inline constexpr uint32_t kWeyl0 = 0x9E3779B9u;
inline constexpr uint32_t kWeyl1 = 0xBB67AE85u;

inline std::array<uint32_t, 4> block(uint64_t key, std::array<uint32_t, 4> ctr) {
  uint32_t k0 = static_cast<uint32_t>(key);
  uint32_t k1 = static_cast<uint32_t>(key >> 32);
  for (int round = 0; round < 10; ++round) {
    uint64_t p0 = static_cast<uint64_t>(kMul0) * ctr[0];
    uint64_t p1 = static_cast<uint64_t>(kMul1) * ctr[2];
    uint32_t hi0 = static_cast<uint32_t>(p0 >> 32), lo0 = static_cast<uint32_t>(p0);
    uint32_t hi1 = static_cast<uint32_t>(p1 >> 32), lo1 = static_cast<uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ k0, lo1, hi0 ^ ctr[3] ^ k1, lo0};
    k0 += kWeyl0;
    k1 += kWeyl1;
  }
  return ctr;
}

inline double to_unit(uint32_t hi, uint32_t lo) {
  uint64_t u = (static_cast<uint64_t>(hi) << 32) | lo;
  return static_cast<double>(u >> 11) * 0x1.0p-53;  // [0,1) with 53 random bits
}

}  // namespace philox

/// Master seed plus the stream-derivation convention.
struct RngSpec {
  uint64_t seed = 0;
};

/// One block = two independent uniforms for a (replication, time, particle)
/// triple. `slot` distinguishes successive blocks when a site needs more than
/// two draws.
struct UniformPair {
  double u0, u1;
};

inline UniformPair uniform_pair(const RngSpec& rng, uint32_t replication, uint32_t time,
                                uint32_t particle, uint32_t slot = 0) {
  auto b = philox::block(rng.seed, {particle, time, replication, slot});
  return {philox::to_unit(b[0], b[1]), philox::to_unit(b[2], b[3])};
}

/// Buffered single-uniform stream over a fixed (replication, time, particle)
/// site, for consumers that want an arbitrary number of draws.
class UniformStream {
 public:
  UniformStream(const RngSpec& rng, uint32_t replication, uint32_t time, uint32_t particle = 0)
      : rng_(rng), rep_(replication), time_(time), particle_(particle) {}

  double next() {
    if (!have_) {
      auto p = uniform_pair(rng_, rep_, time_, particle_, slot_++);
      pending_ = p.u1;
      have_ = true;
      return p.u0;
    }
    have_ = false;
    return pending_;
  }

 private:
  RngSpec rng_;
  uint32_t rep_, time_, particle_;
  uint32_t slot_ = 0;
  double pending_ = 0.0;
  bool have_ = false;
};

// Time-lane tags reserved for draws that are not particle transitions.
inline constexpr uint32_t kTagMeasureGrid = 0xFFFF0001u;

/// Walker alias table for O(1) sampling from a fixed discrete distribution.
class AliasTable {
 public:
  AliasTable() = default;
  explicit AliasTable(std::span<const double> probs) { build(probs); }

  void build(std::span<const double> probs) {
    const int n = static_cast<int>(probs.size());
    prob_.assign(n, 0.0);
    alias_.assign(n, 0);
    double total = 0.0;
    for (double p : probs) total += p;
    if (total <= 0.0) throw ZeroMass("AliasTable: distribution has no mass");
    std::vector<double> scaled(n);
    for (int i = 0; i < n; ++i) scaled[i] = probs[i] * n / total;
    std::vector<int> small, large;
    small.reserve(n);
    large.reserve(n);
    for (int i = 0; i < n; ++i) (scaled[i] < 1.0 ? small : large).push_back(i);
    while (!small.empty() && !large.empty()) {
      int s = small.back(), l = large.back();
      small.pop_back();
      prob_[s] = scaled[s];
      alias_[s] = l;
      scaled[l] -= 1.0 - scaled[s];
      if (scaled[l] < 1.0) {
        large.pop_back();
        small.push_back(l);
      }
    }
    for (int l : large) prob_[l] = 1.0;
    for (int s : small) prob_[s] = 1.0;  // rounding leftovers
  }

  int size() const { return static_cast<int>(prob_.size()); }

  /// Sample from two independent uniforms.
  int sample(double u_cell, double u_coin) const {
    int i = static_cast<int>(u_cell * size());
    if (i >= size()) i = size() - 1;  // guard u == 1-ulp edge
    return u_coin < prob_[i] ? i : alias_[i];
  }

 private:
  std::vector<double> prob_;
  std::vector<int> alias_;
};

}  // namespace meanfield
