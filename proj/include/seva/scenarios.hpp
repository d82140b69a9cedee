#pragma once

// Synthetic desk-scale test worlds: Gaussian class clusters in input space,
// four corruption families with five severities, and streaming protocols
// for label shift, mixed corruptions and batch size one. Labels travel next
// to the batches, never inside them.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include "seva/adapt.hpp"
#include "seva/model.hpp"
#include "seva/rng.hpp"

namespace seva::scenarios {

struct WorldSpec {
  std::size_t num_classes = 10;
  std::size_t input_dim = 16;
  double prototype_scale = 1.0;    // prototypes ~ N(0, scale^2 I)
  double separation_floor = 2.5;   // minimum pairwise prototype distance
  double within_class_std = 0.3;
  std::uint64_t seed = 0;
};

struct World {
  WorldSpec spec;
  std::vector<Vector> prototypes;

  std::size_t num_classes() const noexcept { return prototypes.size(); }
  std::size_t input_dim() const noexcept { return spec.input_dim; }
  /// Clean draw from class `label`.
  Vector sample(int label, CounterRng& rng) const;
};

/// Rejection-samples prototypes until every pair is at least the floor apart.
/// Throws std::runtime_error after a bounded number of attempts.
World make_world(const WorldSpec& spec);

enum class CorruptionKind { AdditiveNoise, FeatureScale, RotationMix, OcclusionMask };

std::string_view corruption_kind_name(CorruptionKind kind);
CorruptionKind parse_corruption_kind(std::string_view name);

inline constexpr int kMaxSeverity = 5;

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::AdditiveNoise;
  int severity = 5;  // 0 is the identity
};

/// Magnitude of the corruption's parameter at a severity; strictly
/// increasing in severity, zero at severity 0.
double corruption_magnitude(CorruptionKind kind, int severity);

/// Applies the corruption. Kinds, as analogues of the four image-corruption
/// families:
///   additive_noise  x + sigma0 sqrt(s) N(0, I)     (noise; E|x'-x|^2 = s sigma0^2 d)
///   feature_scale   (1 - 0.06 s) x + 0.06 s h      (fog: contrast loss toward haze level h)
///   rotation_mix    coordinate pairs rotated 0.2 s (weather: structured mixing)
///   occlusion_mask  each coordinate zeroed w.p. 0.1 s (digital: dropped content)
Vector corrupt(std::span<const double> x, const CorruptionSpec& spec, CounterRng& rng);

inline constexpr double kNoiseSigma0 = 0.3;
inline constexpr double kHazeLevel = 1.0;

enum class LabelScheduleKind { Uniform, Imbalanced, OnlineShifting };

std::string_view label_schedule_name(LabelScheduleKind kind);
LabelScheduleKind parse_label_schedule(std::string_view name);

struct LabelSchedule {
  LabelScheduleKind kind = LabelScheduleKind::Uniform;
  /// Imbalanced only. Infinity: every segment holds a single class;
  /// finite: per-segment class probabilities ~ Dirichlet(concentration).
  double concentration = std::numeric_limits<double>::infinity();
  std::size_t segment_length = 128;
};

struct CorruptionSchedule {
  std::vector<CorruptionSpec> specs{CorruptionSpec{}};
  /// Samples per segment, cycled; a single entry applies to every segment.
  std::vector<std::size_t> segment_lengths{0};  // 0 = whole stream

  static CorruptionSchedule single(CorruptionSpec spec) { return {{spec}, {0}}; }
};

/// Every (kind, severity) pair with severity in [min_severity, 5].
std::vector<CorruptionSpec> corruption_cycle(int min_severity);

struct StreamSpec {
  LabelSchedule labels;
  CorruptionSchedule corruption;
  std::size_t batch_size = 64;
  std::size_t num_batches = 100;
  std::uint64_t seed = 0;
};

struct Stream {
  std::vector<adapt::Batch> batches;
  std::vector<std::vector<int>> labels;  // evaluator side only
  std::vector<CorruptionSpec> sample_corruption;

  std::size_t num_samples() const noexcept;
};

Stream generate_stream(const World& world, const StreamSpec& spec);

/// Label sequence alone (the first stage of generate_stream).
std::vector<int> generate_labels(std::size_t num_classes, const LabelSchedule& schedule,
                                 std::size_t count, CounterRng& rng);

struct SelectionScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool empty_selection = false;  // precision reported as 0
};

/// A sample is reliable iff its pre-update prediction matches its label;
/// scores the engine's selection flags against that.
SelectionScore selection_f1(const adapt::RunReport& run, const std::vector<std::vector<int>>& labels);

/// Fraction of pre-update predictions that match the labels.
double online_accuracy(const adapt::RunReport& run, const std::vector<std::vector<int>>& labels);

struct SourceTraining {
  std::size_t samples_per_class = 200;
  HeadFitOptions head;
};

/// Builds the frozen network and fits its head on clean labelled samples.
ToyNetwork train_source_model(const World& world, const NetworkSpec& spec,
                              const SourceTraining& training, std::uint64_t seed);

/// Accuracy of the current network on n fresh draws, optionally corrupted.
double evaluate_accuracy(const ToyNetwork& net, const World& world, std::size_t n, std::uint64_t seed,
                         const CorruptionSpec* corruption = nullptr);

}  // namespace seva::scenarios
