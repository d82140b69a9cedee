#pragma once

// Monte-Carlo ground truth for the vicinal closed forms: explicit Gaussian
// sampling around a feature, the finite-sample augmented entropy, the
// ratio-of-expectations robust prediction, and the bound-gap record used to
// certify that Augmented Entropy upper-bounds the expected entropy.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "seva/core_math.hpp"
#include "seva/rng.hpp"

namespace seva::oracle {

struct McEstimate {
  double mean = 0.0;
  double std_error = 0.0;  // standard error of the mean
  std::size_t n_samples = 0;
};

struct BoundGapReport {
  double l_ae = 0.0;
  McEstimate mc;
  double gap = 0.0;  // l_ae - mc.mean
  bool satisfied = false;
};

/// Robust prediction estimated from samples, with per-coordinate standard
/// errors of the ratio estimator (delta method).
struct McRobustProbs {
  ProbVector probs;
  Vector std_error;
  std::size_t n_samples = 0;
};

Feature sample_vicinal(const Feature& z, const DiagCovariance& sigma, CounterRng& rng);

/// Mean entropy of softmax(logits(z~)) over n vicinal draws.
McEstimate mc_entropy(const ClassifierHead& head, const Feature& z, const DiagCovariance& sigma,
                      std::size_t n, CounterRng& rng);

/// E[exp(a_i.z~ + b_i)] / E[sum_j exp(a_j.z~ + b_j)] from n draws, with a
/// shared running max across samples so no term overflows.
McRobustProbs mc_robust_probs(const ClassifierHead& head, const Feature& z,
                              const DiagCovariance& sigma, std::size_t n, CounterRng& rng);

BoundGapReport bound_gap_report(const ClassifierHead& head, const Feature& z,
                                const DiagCovariance& sigma, std::size_t n, CounterRng& rng);

/// Three standard errors plus a 1e-9 floor for round-off when Sigma = 0.
inline constexpr double kGapFloor = 1e-9;
inline bool gap_within_band(double gap, double std_error) { return gap >= -(3.0 * std_error + kGapFloor); }

/// One instance of the certification sweep.
struct BoundInstance {
  ClassifierHead head;
  Feature z;
  DiagCovariance sigma;
  double lambda = 0.0;
};

struct SweepOptions {
  std::size_t max_classes = 10;
  std::size_t max_dim = 16;
  std::size_t calibration_size = 128;
  double lambda_min = 0.5;
  double lambda_max = 3.0;
  bool zero_sigma = false;          // force Sigma = 0
  double fixed_variance = -1.0;     // if >= 0, every variance is this value
};

/// Seeded random instance: a head with C in [2, max_classes] and d in
/// [2, max_dim], a clustered feature cloud standing in for calibration
/// features, Sigma = lambda * per-dimension cloud variance, and z drawn from
/// the cloud. Depends only on (master_seed, index).
BoundInstance make_bound_instance(std::uint64_t master_seed, std::size_t index,
                                  const SweepOptions& options = {});

struct SweepEntry {
  std::size_t index = 0;
  std::size_t num_classes = 0;
  std::size_t dim = 0;
  double lambda = 0.0;
  BoundGapReport report;
  McRobustProbs mc_probs;
  ProbVector closed_form_probs;
};

/// Runs bound_gap_report and mc_robust_probs on instances [0, count).
/// Instances run concurrently on independent substreams; results are
/// identical to a sequential run.
std::vector<SweepEntry> run_bound_sweep(std::uint64_t master_seed, std::size_t count,
                                        std::size_t n, const SweepOptions& options = {},
                                        unsigned threads = 0);

}  // namespace seva::oracle
