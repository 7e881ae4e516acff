#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include <Eigen/Dense>

#include "prefopt/error.hpp"

namespace prefopt {

namespace detail {

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/**
 * Counter-based generator: output i is a pure function of (key, i), so a
 * stream can be split into independent children without touching its own
 * sequence. All distributions are implemented here so draws are identical
 * across standard libraries.
 */
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(detail::mix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

  Rng derive(std::uint64_t stream) const {
    Rng child(0);
    child.key_ = detail::mix64(key_ ^ detail::mix64(stream + 0x9e3779b97f4a7c15ULL));
    return child;
  }
  Rng derive(std::string_view label) const { return derive(detail::fnv1a(label)); }

  std::uint64_t next_u64() {
    std::uint64_t c = counter_++;
    return detail::mix64(detail::mix64(key_ + c * 0x9e3779b97f4a7c15ULL) ^ key_);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Uniform integer in [0, n).
  int below(int n) {
    require(n > 0, "Rng::below needs n > 0");
    return static_cast<int>(uniform() * n);
  }

  /// Inverse-CDF draw from unnormalised nonnegative weights.
  template <class Vec>
  int categorical(const Vec& p) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) total += p[i];
    double u = uniform() * total;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      acc += p[i];
      if (u < acc) return static_cast<int>(i);
    }
    for (Eigen::Index i = p.size() - 1; i >= 0; --i)
      if (p[i] > 0) return static_cast<int>(i);
    throw InvalidArgument("categorical: all weights are zero");
  }

  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal();
    return m;
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace prefopt
