#include "seva/oracle.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <thread>

namespace seva::oracle {

namespace {

void check_dims(const Feature& z, const DiagCovariance& sigma) {
  if (z.dim() != sigma.dim()) throw DimensionError("vicinal sampling", z.dim(), sigma.dim());
}

void check_count(std::size_t n) {
  if (n < 2) throw std::invalid_argument("Monte-Carlo estimates need n >= 2 samples");
}

// Logits of z + eps with eps drawn into `scratch`.
void vicinal_logits(const ClassifierHead& head, const Feature& z, const DiagCovariance& sigma,
                    CounterRng& rng, Feature& scratch, Vector& out) {
  for (std::size_t k = 0; k < z.dim(); ++k)
    scratch.values[k] = z.values[k] + std::sqrt(sigma.variances[k]) * rng.normal();
  for (std::size_t i = 0; i < head.num_classes(); ++i) {
    const auto a = head.row(i);
    double acc = head.bias(i);
    for (std::size_t k = 0; k < head.dim(); ++k) acc += a[k] * scratch.values[k];
    out[i] = acc;
  }
}

}  // namespace

Feature sample_vicinal(const Feature& z, const DiagCovariance& sigma, CounterRng& rng) {
  check_dims(z, sigma);
  Feature out{z.values};
  for (std::size_t k = 0; k < z.dim(); ++k) out.values[k] += std::sqrt(sigma.variances[k]) * rng.normal();
  return out;
}

McEstimate mc_entropy(const ClassifierHead& head, const Feature& z, const DiagCovariance& sigma,
                      std::size_t n, CounterRng& rng) {
  check_count(n);
  check_dims(z, sigma);
  if (z.dim() != head.dim()) throw DimensionError("mc_entropy", head.dim(), z.dim());

  Feature scratch{Vector(z.dim())};
  Vector l(head.num_classes());
  // Welford running moments.
  double mean = 0.0;
  double m2 = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    vicinal_logits(head, z, sigma, rng, scratch, l);
    const double h = entropy_with_grad(l).loss;
    const double delta = h - mean;
    mean += delta / static_cast<double>(s + 1);
    m2 += delta * (h - mean);
  }
  const double variance = m2 / static_cast<double>(n - 1);
  return {mean, std::sqrt(variance / static_cast<double>(n)), n};
}

McRobustProbs mc_robust_probs(const ClassifierHead& head, const Feature& z,
                              const DiagCovariance& sigma, std::size_t n, CounterRng& rng) {
  check_count(n);
  check_dims(z, sigma);
  if (z.dim() != head.dim()) throw DimensionError("mc_robust_probs", head.dim(), z.dim());

  const std::size_t C = head.num_classes();
  Feature scratch{Vector(z.dim())};
  Vector l(C);

  // All sums are scaled by exp(-shift) (linear) or exp(-2 shift) (quadratic),
  // where shift is the running max logit over every sample seen so far.
  double shift = -std::numeric_limits<double>::infinity();
  Vector sum_num(C, 0.0), sum_num_sq(C, 0.0), sum_num_den(C, 0.0);
  double sum_den = 0.0, sum_den_sq = 0.0;
  Vector num(C);

  for (std::size_t s = 0; s < n; ++s) {
    vicinal_logits(head, z, sigma, rng, scratch, l);
    const double m = *std::max_element(l.begin(), l.end());
    if (m > shift) {
      if (std::isfinite(shift)) {
        const double r = std::exp(shift - m);
        const double r2 = r * r;
        for (std::size_t i = 0; i < C; ++i) {
          sum_num[i] *= r;
          sum_num_sq[i] *= r2;
          sum_num_den[i] *= r2;
        }
        sum_den *= r;
        sum_den_sq *= r2;
      }
      shift = m;
    }
    double den = 0.0;
    for (std::size_t i = 0; i < C; ++i) {
      num[i] = std::exp(l[i] - shift);
      den += num[i];
    }
    for (std::size_t i = 0; i < C; ++i) {
      sum_num[i] += num[i];
      sum_num_sq[i] += num[i] * num[i];
      sum_num_den[i] += num[i] * den;
    }
    sum_den += den;
    sum_den_sq += den * den;
  }

  const double nd = static_cast<double>(n);
  McRobustProbs out;
  out.n_samples = n;
  out.probs.probs.resize(C);
  out.std_error.resize(C);
  const double mean_den = sum_den / nd;
  for (std::size_t i = 0; i < C; ++i) {
    const double ratio = sum_num[i] / sum_den;
    out.probs.probs[i] = ratio;
    // Residuals num - ratio * den sum to zero, so their variance is the
    // second moment.
    const double resid_sq = sum_num_sq[i] - 2.0 * ratio * sum_num_den[i] + ratio * ratio * sum_den_sq;
    const double var = std::max(resid_sq, 0.0) / (nd - 1.0);
    out.std_error[i] = std::sqrt(var / nd) / mean_den;
  }
  // The ratios share one denominator and so already sum to 1 up to rounding.
  double total = 0.0;
  for (double p : out.probs.probs) total += p;
  for (double& p : out.probs.probs) p /= total;
  return out;
}

BoundGapReport bound_gap_report(const ClassifierHead& head, const Feature& z,
                                const DiagCovariance& sigma, std::size_t n, CounterRng& rng) {
  BoundGapReport r;
  r.l_ae = augmented_entropy(head, z, sigma);
  r.mc = mc_entropy(head, z, sigma, n, rng);
  r.gap = r.l_ae - r.mc.mean;
  r.satisfied = gap_within_band(r.gap, r.mc.std_error);
  return r;
}

BoundInstance make_bound_instance(std::uint64_t master_seed, std::size_t index,
                                  const SweepOptions& options) {
  CounterRng rng = CounterRng::substream(master_seed, 2 * index);
  const std::size_t C = 2 + rng.below(options.max_classes - 1);
  const std::size_t d = 2 + rng.below(options.max_dim - 1);

  const double head_scale = (1.5 + 7.5 * rng.uniform()) / std::sqrt(static_cast<double>(d));
  Vector weights(C * d), biases(C);
  for (double& w : weights) w = head_scale * rng.normal();
  for (double& b : biases) b = 0.5 * rng.normal();

  // Clustered cloud: class centres ~ N(0, I), within-cluster std 0.5.
  std::vector<Vector> centres(C, Vector(d));
  for (auto& c : centres)
    for (double& v : c) v = rng.normal();
  const std::size_t m = options.calibration_size;
  std::vector<Vector> cloud(m, Vector(d));
  for (auto& x : cloud) {
    const auto& c = centres[rng.below(C)];
    for (std::size_t k = 0; k < d; ++k) x[k] = c[k] + 0.5 * rng.normal();
  }

  const double lambda = options.lambda_min + (options.lambda_max - options.lambda_min) * rng.uniform();
  DiagCovariance sigma = DiagCovariance::zeros(d);
  if (options.zero_sigma) {
    // stays zero
  } else if (options.fixed_variance >= 0.0) {
    std::fill(sigma.variances.begin(), sigma.variances.end(), options.fixed_variance);
  } else {
    for (std::size_t k = 0; k < d; ++k) {
      double mean = 0.0;
      for (const auto& x : cloud) mean += x[k];
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (const auto& x : cloud) var += (x[k] - mean) * (x[k] - mean);
      sigma.variances[k] = lambda * var / static_cast<double>(m);
    }
  }

  return BoundInstance{ClassifierHead(C, d, std::move(weights), std::move(biases)),
                       Feature{cloud.front()}, std::move(sigma), lambda};
}

std::vector<SweepEntry> run_bound_sweep(std::uint64_t master_seed, std::size_t count,
                                        std::size_t n, const SweepOptions& options,
                                        unsigned threads) {
  std::vector<SweepEntry> entries(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t idx = next++; idx < count; idx = next++) {
      const BoundInstance inst = make_bound_instance(master_seed, idx, options);
      CounterRng rng = CounterRng::substream(master_seed, 2 * idx + 1);
      SweepEntry& e = entries[idx];
      e.index = idx;
      e.num_classes = inst.head.num_classes();
      e.dim = inst.head.dim();
      e.lambda = inst.lambda;
      e.report = bound_gap_report(inst.head, inst.z, inst.sigma, n, rng);
      e.mc_probs = mc_robust_probs(inst.head, inst.z, inst.sigma, n, rng);
      e.closed_form_probs = robust_probs(inst.head, inst.z, inst.sigma);
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(count, 1)));
  std::vector<std::jthread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  pool.clear();
  return entries;
}

}  // namespace seva::oracle
