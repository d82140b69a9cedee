#pragma once

// Shared generators and oracles for the test suites. Nothing here calls the
// code paths it is used to check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "seva/core_math.hpp"
#include "seva/rng.hpp"

namespace seva::testing {

struct RandomInstance {
  ClassifierHead head;
  Feature z;
  DiagCovariance sigma;
};

inline RandomInstance random_instance(CounterRng& rng, std::size_t min_c = 2, std::size_t max_c = 10,
                                      std::size_t min_d = 2, std::size_t max_d = 16,
                                      bool zero_sigma = false) {
  const std::size_t C = min_c + rng.below(max_c - min_c + 1);
  const std::size_t d = min_d + rng.below(max_d - min_d + 1);
  const double scale = 0.3 + 2.0 * rng.uniform();
  Vector w(C * d), b(C), z(d), v(d);
  for (double& x : w) x = scale * rng.normal();
  for (double& x : b) x = rng.normal();
  for (double& x : z) x = rng.normal();
  for (double& x : v) x = zero_sigma ? 0.0 : 0.5 * rng.uniform();
  return {ClassifierHead(C, d, std::move(w), std::move(b)), Feature{std::move(z)}, DiagCovariance{std::move(v)}};
}

/// Central differences with per-coordinate step h_k = 1e-5 (1 + |x_k|).
inline Vector central_difference(const std::function<double(const Vector&)>& f, const Vector& x) {
  Vector grad(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double h = 1e-5 * (1.0 + std::abs(x[k]));
    Vector xp = x, xm = x;
    xp[k] += h;
    xm[k] -= h;
    grad[k] = (f(xp) - f(xm)) / (2.0 * h);
  }
  return grad;
}

/// max_k |a_k - b_k| / max(max_k |b_k|, floor): the gradient's relative
/// error measured against its own scale.
inline double max_relative_error(const Vector& a, const Vector& b, double floor = 1e-8) {
  double diff = 0.0, scale = floor;
  for (std::size_t k = 0; k < a.size(); ++k) {
    diff = std::max(diff, std::abs(a[k] - b[k]));
    scale = std::max(scale, std::abs(b[k]));
  }
  return diff / scale;
}

/// Extended-precision reference for a_i . z + b_i.
inline std::vector<long double> logits_long_double(const ClassifierHead& head, const Feature& z) {
  std::vector<long double> out(head.num_classes());
  for (std::size_t i = 0; i < head.num_classes(); ++i) {
    long double acc = head.bias(i);
    for (std::size_t k = 0; k < head.dim(); ++k)
      acc += static_cast<long double>(head.weight(i, k)) * static_cast<long double>(z.values[k]);
    out[i] = acc;
  }
  return out;
}

inline ClassifierHead h3_head() {
  return ClassifierHead::from_rows({{1.0, 0.0}, {0.0, 1.0}, {-1.0, -1.0}}, {0.0, 0.0, 0.0});
}

}  // namespace seva::testing
