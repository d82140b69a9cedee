#pragma once

// Online test-time adaptation engine. One engine owns one network and one
// optimizer state; it sees only unlabeled batches, predicts before it
// updates, and applies at most one parameter update per batch (r updates for
// the explicit-augmentation baseline).

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "seva/core_math.hpp"
#include "seva/model.hpp"
#include "seva/rng.hpp"

namespace seva::adapt {

enum class MethodKind {
  NoAdapt,
  Tent,           // entropy, every sample
  EntropySelect,  // entropy, samples with entropy < threshold
  AugEntropy,     // Augmented Entropy, every sample
  Seva,           // Augmented Entropy, samples with Augmented Entropy < threshold
  ExplicitVA,     // entropy-selected samples, r rounds of one vicinal draw each
};

std::string_view method_kind_name(MethodKind kind);
MethodKind parse_method_kind(std::string_view name);

struct MethodConfig {
  MethodKind kind = MethodKind::Seva;
  double threshold_rho = 1.0;
  double lambda = 1.5;
  double lr = 1e-3;
  double momentum = 0.9;
  std::size_t rounds = 1;

  bool needs_covariance() const noexcept;
  bool uses_selection() const noexcept;
  void validate() const;
};

struct OptimizerState {
  Vector velocity;
};

/// A test batch as the engine sees it: inputs only.
struct Batch {
  std::vector<Vector> inputs;
};

struct SampleRecord {
  double loss = 0.0;
  bool selected = false;
  int predicted_class = 0;
  double confidence = 0.0;
};

struct StepReport {
  std::vector<SampleRecord> samples;
  std::size_t n_selected = 0;
  bool updated = false;
  double wall_seconds = 0.0;
};

/// Batch-level pass counts plus per-sample totals.
struct Counters {
  std::size_t forward_passes = 0;
  std::size_t backward_passes = 0;
  std::size_t optimizer_steps = 0;
  std::size_t sample_forwards = 0;
  std::size_t sample_backwards = 0;
};

struct RunReport {
  std::vector<StepReport> steps;
  Counters counters;
  DiagCovariance sigma;
  double threshold = 0.0;
  double calibration_seconds = 0.0;
  double adaptation_seconds = 0.0;
};

/// R(x): strict comparison.
inline bool select(double loss_value, double threshold) { return loss_value < threshold; }

/// rho * ln C.
double threshold_default(std::size_t num_classes, double rho);

/// v <- momentum * v + g;  theta <- theta - lr * v.
void sgd_momentum_step(ParamVector& params, const ParamVector& grads, OptimizerState& state,
                       double lr, double momentum);

class Engine {
 public:
  /// `seed` feeds the vicinal draws of the explicit-augmentation baseline.
  Engine(ToyNetwork net, MethodConfig config, std::uint64_t seed = 0);

  /// Fixes Sigma = lambda * per-dimension feature variance of `inputs`
  /// under the current (unadapted) parameters.
  void calibrate(const std::vector<Vector>& inputs);
  /// Sets Sigma directly (lambda is not applied).
  void set_covariance(DiagCovariance sigma);

  StepReport adapt_step(const Batch& batch);

  const ToyNetwork& network() const noexcept { return net_; }
  const MethodConfig& config() const noexcept { return config_; }
  const Counters& counters() const noexcept { return counters_; }
  const DiagCovariance& sigma() const noexcept { return sigma_; }
  double threshold() const noexcept { return threshold_; }
  bool calibrated() const noexcept { return calibrated_; }

 private:
  void apply_update(const ParamVector& grad);
  void explicit_rounds(const std::vector<const Vector*>& selected);

  ToyNetwork net_;
  MethodConfig config_;
  OptimizerState state_;
  DiagCovariance sigma_;
  std::optional<AugmentedEntropyKernel> kernel_;
  double threshold_;
  bool calibrated_ = false;
  CounterRng rng_;
  Counters counters_;
};

/// Single pass over the stream. Methods that need Sigma are calibrated first
/// on the leading `calibration_samples` inputs of the stream.
RunReport run_stream(Engine& engine, std::span<const Batch> stream, std::size_t calibration_samples);

}  // namespace seva::adapt
