#include "seva/adapt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace seva::adapt {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

}  // namespace

std::string_view method_kind_name(MethodKind kind) {
  switch (kind) {
    case MethodKind::NoAdapt:
      return "no_adapt";
    case MethodKind::Tent:
      return "tent";
    case MethodKind::EntropySelect:
      return "entropy_select";
    case MethodKind::AugEntropy:
      return "aug_entropy";
    case MethodKind::Seva:
      return "seva";
    case MethodKind::ExplicitVA:
      return "explicit_va";
  }
  return "unknown";
}

MethodKind parse_method_kind(std::string_view name) {
  for (MethodKind k : {MethodKind::NoAdapt, MethodKind::Tent, MethodKind::EntropySelect,
                       MethodKind::AugEntropy, MethodKind::Seva, MethodKind::ExplicitVA}) {
    if (method_kind_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown method kind '" + std::string(name) + "'");
}

bool MethodConfig::needs_covariance() const noexcept {
  return kind == MethodKind::Seva || kind == MethodKind::AugEntropy || kind == MethodKind::ExplicitVA;
}

bool MethodConfig::uses_selection() const noexcept {
  return kind == MethodKind::Seva || kind == MethodKind::EntropySelect || kind == MethodKind::ExplicitVA;
}

void MethodConfig::validate() const {
  if (kind != MethodKind::NoAdapt && !(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must be in [0, 1)");
  if (!(threshold_rho > 0.0)) throw std::invalid_argument("threshold_rho must be positive");
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
  if (kind == MethodKind::ExplicitVA && rounds < 1) throw std::invalid_argument("rounds must be >= 1");
}

double threshold_default(std::size_t num_classes, double rho) {
  if (num_classes == 0) throw std::invalid_argument("threshold needs C >= 1");
  return rho * std::log(static_cast<double>(num_classes));
}

void sgd_momentum_step(ParamVector& params, const ParamVector& grads, OptimizerState& state,
                       double lr, double momentum) {
  if (grads.values.size() != params.values.size())
    throw DimensionError("sgd_momentum_step grads", params.values.size(), grads.values.size());
  if (state.velocity.empty()) state.velocity.assign(params.values.size(), 0.0);
  if (state.velocity.size() != params.values.size())
    throw DimensionError("sgd_momentum_step velocity", params.values.size(), state.velocity.size());
  for (std::size_t k = 0; k < params.values.size(); ++k) {
    state.velocity[k] = momentum * state.velocity[k] + grads.values[k];
    params.values[k] -= lr * state.velocity[k];
  }
}

Engine::Engine(ToyNetwork net, MethodConfig config, std::uint64_t seed)
    : net_(std::move(net)),
      config_(config),
      sigma_(DiagCovariance::zeros(net_.feature_dim())),
      threshold_(threshold_default(net_.num_classes(), config.threshold_rho)),
      rng_(seed) {
  config_.validate();
  state_.velocity.assign(net_.num_params(), 0.0);
}

void Engine::calibrate(const std::vector<Vector>& inputs) {
  set_covariance(calibrate_covariance(net_, inputs, config_.lambda));
}

void Engine::set_covariance(DiagCovariance sigma) {
  if (sigma.dim() != net_.feature_dim()) throw DimensionError("Engine covariance", net_.feature_dim(), sigma.dim());
  sigma_ = std::move(sigma);
  kernel_.emplace(net_.head(), sigma_);
  calibrated_ = true;
}

void Engine::apply_update(const ParamVector& grad) {
  ParamVector params = net_.params();
  sgd_momentum_step(params, grad, state_, config_.lr, config_.momentum);
  net_.set_params(params);
  ++counters_.optimizer_steps;
}

void Engine::explicit_rounds(const std::vector<const Vector*>& selected) {
  const ClassifierHead& head = net_.head();
  for (std::size_t round = 0; round < config_.rounds; ++round) {
    ParamVector grad = net_.params();
    std::fill(grad.values.begin(), grad.values.end(), 0.0);
    const double scale = 1.0 / static_cast<double>(selected.size());
    ++counters_.forward_passes;
    ++counters_.backward_passes;
    for (const Vector* x : selected) {
      const ForwardCache cache = forward_cached(net_, *x);
      // z~ = z + eps, so d z~ / d z is the identity.
      Feature augmented = cache.feature;
      for (std::size_t k = 0; k < augmented.dim(); ++k)
        augmented.values[k] += std::sqrt(sigma_.variances[k]) * rng_.normal();
      LossWithGrad lg = entropy_with_grad(logits(head, augmented).values);
      for (double& v : lg.dlogits) v *= scale;
      accumulate_param_grad(net_, cache, head_transpose_times(head, lg.dlogits), grad.values);
      ++counters_.sample_forwards;
      ++counters_.sample_backwards;
    }
    apply_update(grad);
  }
}

StepReport Engine::adapt_step(const Batch& batch) {
  if (batch.inputs.empty()) throw std::invalid_argument("adapt_step: empty batch");
  if (config_.needs_covariance() && !calibrated_)
    throw std::logic_error("adapt_step: method needs a calibrated covariance");
  const auto start = Clock::now();
  const ClassifierHead& head = net_.head();
  const bool aug_loss = config_.kind == MethodKind::Seva || config_.kind == MethodKind::AugEntropy;

  StepReport report;
  report.samples.resize(batch.inputs.size());
  std::vector<ForwardCache> caches;
  caches.reserve(batch.inputs.size());
  std::vector<Vector> dlogits(batch.inputs.size());

  ++counters_.forward_passes;
  for (std::size_t s = 0; s < batch.inputs.size(); ++s) {
    caches.push_back(forward_cached(net_, batch.inputs[s]));
    ++counters_.sample_forwards;
    const Logits l = logits(head, caches.back().feature);
    const Vector p = softmax(l).probs;
    SampleRecord& rec = report.samples[s];
    const auto best = std::max_element(p.begin(), p.end());
    rec.predicted_class = static_cast<int>(best - p.begin());
    rec.confidence = *best;

    LossWithGrad lg = aug_loss ? kernel_->loss_with_grad(l.values) : entropy_with_grad(l.values);
    rec.loss = lg.loss;
    dlogits[s] = std::move(lg.dlogits);

    switch (config_.kind) {
      case MethodKind::NoAdapt:
        rec.selected = false;
        break;
      case MethodKind::Tent:
      case MethodKind::AugEntropy:
        rec.selected = true;
        break;
      case MethodKind::EntropySelect:
      case MethodKind::Seva:
      case MethodKind::ExplicitVA:
        rec.selected = select(rec.loss, threshold_);
        break;
    }
    if (rec.selected) ++report.n_selected;
  }

  report.updated = report.n_selected > 0 && config_.kind != MethodKind::NoAdapt;
  if (report.updated) {
    if (config_.kind == MethodKind::ExplicitVA) {
      std::vector<const Vector*> selected;
      for (std::size_t s = 0; s < batch.inputs.size(); ++s)
        if (report.samples[s].selected) selected.push_back(&batch.inputs[s]);
      explicit_rounds(selected);
    } else {
      // Reuses the prediction pass: one forward, one backward, one step.
      ParamVector grad = net_.params();
      std::fill(grad.values.begin(), grad.values.end(), 0.0);
      const double scale = 1.0 / static_cast<double>(report.n_selected);
      ++counters_.backward_passes;
      for (std::size_t s = 0; s < batch.inputs.size(); ++s) {
        if (!report.samples[s].selected) continue;
        for (double& v : dlogits[s]) v *= scale;
        accumulate_param_grad(net_, caches[s], head_transpose_times(head, dlogits[s]), grad.values);
        ++counters_.sample_backwards;
      }
      apply_update(grad);
    }
  }
  report.wall_seconds = seconds_since(start);
  return report;
}

RunReport run_stream(Engine& engine, std::span<const Batch> stream, std::size_t calibration_samples) {
  RunReport report;
  if (engine.config().needs_covariance() && !engine.calibrated()) {
    const auto start = Clock::now();
    std::vector<Vector> calibration;
    for (const Batch& b : stream) {
      for (const Vector& x : b.inputs) {
        if (calibration.size() == calibration_samples) break;
        calibration.push_back(x);
      }
      if (calibration.size() == calibration_samples) break;
    }
    engine.calibrate(calibration);
    report.calibration_seconds = seconds_since(start);
  }
  report.sigma = engine.sigma();
  report.threshold = engine.threshold();

  const auto start = Clock::now();
  report.steps.reserve(stream.size());
  for (const Batch& b : stream) report.steps.push_back(engine.adapt_step(b));
  report.adaptation_seconds = seconds_since(start);
  report.counters = engine.counters();
  return report;
}

}  // namespace seva::adapt
