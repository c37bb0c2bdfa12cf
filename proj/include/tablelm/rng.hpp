// Copyright (c) 2026 The tablelm Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "tablelm/error.hpp"

namespace tablelm {

// std::mt19937_64 output is fixed by the standard, but the <random>
// distributions are not. All derived draws are computed here so that a seed
// reproduces the same values under any standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [0, bound), rejection sampled.
  std::uint64_t below(std::uint64_t bound) {
    if (bound == 0) throw Error("Rng::below: bound must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % bound;
  }

  bool bernoulli(double p) { return uniform01() < p; }

  /// Fisher-Yates, from the back.
  template <class Range>
  void shuffle(Range& r) {
    using std::swap;
    for (std::size_t i = std::size(r); i > 1; --i) swap(r[i - 1], r[below(i)]);
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw FormatError("Rng: malformed engine state");
  }

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace tablelm
