#include "seva/scenarios.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace seva::scenarios {

Vector World::sample(int label, CounterRng& rng) const {
  const Vector& mu = prototypes.at(static_cast<std::size_t>(label));
  Vector x(mu.size());
  for (std::size_t k = 0; k < mu.size(); ++k) x[k] = mu[k] + spec.within_class_std * rng.normal();
  return x;
}

World make_world(const WorldSpec& spec) {
  if (spec.num_classes < 2) throw std::invalid_argument("a world needs at least 2 classes");
  if (spec.input_dim == 0) throw std::invalid_argument("input_dim must be positive");
  constexpr int kMaxAttempts = 1000;
  CounterRng rng = CounterRng::substream(spec.seed, 0);
  World world{spec, {}};
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    std::vector<Vector> protos(spec.num_classes, Vector(spec.input_dim));
    for (auto& p : protos)
      for (double& v : p) v = spec.prototype_scale * rng.normal();
    bool ok = true;
    for (std::size_t i = 0; i < protos.size() && ok; ++i) {
      for (std::size_t j = i + 1; j < protos.size() && ok; ++j) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < spec.input_dim; ++k) d2 += (protos[i][k] - protos[j][k]) * (protos[i][k] - protos[j][k]);
        ok = std::sqrt(d2) >= spec.separation_floor;
      }
    }
    if (ok) {
      world.prototypes = std::move(protos);
      return world;
    }
  }
  throw std::runtime_error("make_world: could not place " + std::to_string(spec.num_classes) +
                           " prototypes at separation " + std::to_string(spec.separation_floor));
}

std::string_view corruption_kind_name(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::AdditiveNoise:
      return "additive_noise";
    case CorruptionKind::FeatureScale:
      return "feature_scale";
    case CorruptionKind::RotationMix:
      return "rotation_mix";
    case CorruptionKind::OcclusionMask:
      return "occlusion_mask";
  }
  return "unknown";
}

CorruptionKind parse_corruption_kind(std::string_view name) {
  for (CorruptionKind k : {CorruptionKind::AdditiveNoise, CorruptionKind::FeatureScale,
                           CorruptionKind::RotationMix, CorruptionKind::OcclusionMask}) {
    if (corruption_kind_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown corruption kind '" + std::string(name) + "'");
}

double corruption_magnitude(CorruptionKind kind, int severity) {
  if (severity < 0 || severity > kMaxSeverity) throw std::out_of_range("severity must be in [0, 5]");
  const double s = severity;
  switch (kind) {
    case CorruptionKind::AdditiveNoise:
      return kNoiseSigma0 * std::sqrt(s);  // noise std
    case CorruptionKind::FeatureScale:
      return 0.06 * s;  // contrast loss
    case CorruptionKind::RotationMix:
      return 0.2 * s;  // angle in radians
    case CorruptionKind::OcclusionMask:
      return 0.1 * s;  // drop probability
  }
  return 0.0;
}

Vector corrupt(std::span<const double> x, const CorruptionSpec& spec, CounterRng& rng) {
  const double m = corruption_magnitude(spec.kind, spec.severity);
  Vector out(x.begin(), x.end());
  if (spec.severity == 0) return out;
  switch (spec.kind) {
    case CorruptionKind::AdditiveNoise:
      for (double& v : out) v += m * rng.normal();
      break;
    case CorruptionKind::FeatureScale:
      for (double& v : out) v = (1.0 - m) * v + m * kHazeLevel;
      break;
    case CorruptionKind::RotationMix: {
      const double c = std::cos(m), s = std::sin(m);
      for (std::size_t k = 0; k + 1 < out.size(); k += 2) {
        out[k] = c * x[k] - s * x[k + 1];
        out[k + 1] = s * x[k] + c * x[k + 1];
      }
      break;
    }
    case CorruptionKind::OcclusionMask:
      for (double& v : out)
        if (rng.uniform() < m) v = 0.0;
      break;
  }
  return out;
}

std::string_view label_schedule_name(LabelScheduleKind kind) {
  switch (kind) {
    case LabelScheduleKind::Uniform:
      return "uniform";
    case LabelScheduleKind::Imbalanced:
      return "imbalanced";
    case LabelScheduleKind::OnlineShifting:
      return "online_shifting";
  }
  return "unknown";
}

LabelScheduleKind parse_label_schedule(std::string_view name) {
  for (LabelScheduleKind k :
       {LabelScheduleKind::Uniform, LabelScheduleKind::Imbalanced, LabelScheduleKind::OnlineShifting}) {
    if (label_schedule_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown label schedule '" + std::string(name) + "'");
}

std::vector<CorruptionSpec> corruption_cycle(int min_severity) {
  std::vector<CorruptionSpec> out;
  for (int s = min_severity; s <= kMaxSeverity; ++s) {
    for (CorruptionKind k : {CorruptionKind::AdditiveNoise, CorruptionKind::FeatureScale,
                             CorruptionKind::RotationMix, CorruptionKind::OcclusionMask})
      out.push_back({k, s});
  }
  return out;
}

std::size_t Stream::num_samples() const noexcept {
  std::size_t n = 0;
  for (const auto& b : batches) n += b.inputs.size();
  return n;
}

namespace {

std::vector<int> shuffled_classes(std::size_t C, CounterRng& rng) {
  std::vector<int> order(C);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = C; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

int draw_categorical(std::span<const double> probs, CounterRng& rng) {
  double u = rng.uniform();
  for (std::size_t c = 0; c < probs.size(); ++c) {
    if (u < probs[c]) return static_cast<int>(c);
    u -= probs[c];
  }
  return static_cast<int>(probs.size() - 1);
}

}  // namespace

std::vector<int> generate_labels(std::size_t C, const LabelSchedule& schedule, std::size_t count,
                                 CounterRng& rng) {
  if (schedule.segment_length == 0) throw std::invalid_argument("segment_length must be positive");
  std::vector<int> labels;
  labels.reserve(count);
  switch (schedule.kind) {
    case LabelScheduleKind::Uniform:
      for (std::size_t t = 0; t < count; ++t) labels.push_back(static_cast<int>(rng.below(C)));
      break;
    case LabelScheduleKind::Imbalanced: {
      if (std::isinf(schedule.concentration)) {
        // Single-class segments, visiting classes in shuffled rounds.
        std::vector<int> order;
        std::size_t segment = 0;
        while (labels.size() < count) {
          if (segment % C == 0) order = shuffled_classes(C, rng);
          const int c = order[segment % C];
          for (std::size_t t = 0; t < schedule.segment_length && labels.size() < count; ++t) labels.push_back(c);
          ++segment;
        }
      } else {
        if (!(schedule.concentration > 0.0)) throw std::invalid_argument("concentration must be positive");
        Vector probs(C);
        while (labels.size() < count) {
          double total = 0.0;
          for (double& p : probs) total += (p = rng.gamma(schedule.concentration));
          for (double& p : probs) p /= total;
          for (std::size_t t = 0; t < schedule.segment_length && labels.size() < count; ++t)
            labels.push_back(draw_categorical(probs, rng));
        }
      }
      break;
    }
    case LabelScheduleKind::OnlineShifting: {
      // The dominant class advances each segment; half the mass stays on it.
      Vector probs(C);
      std::size_t segment = 0;
      const std::vector<int> order = shuffled_classes(C, rng);
      while (labels.size() < count) {
        const int dominant = order[segment % C];
        for (std::size_t c = 0; c < C; ++c) probs[c] = 0.5 / static_cast<double>(C);
        probs[static_cast<std::size_t>(dominant)] += 0.5;
        for (std::size_t t = 0; t < schedule.segment_length && labels.size() < count; ++t)
          labels.push_back(draw_categorical(probs, rng));
        ++segment;
      }
      break;
    }
  }
  return labels;
}

Stream generate_stream(const World& world, const StreamSpec& spec) {
  if (spec.batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  const auto& sched = spec.corruption;
  if (sched.specs.empty() || sched.segment_lengths.empty())
    throw std::invalid_argument("corruption schedule needs at least one spec and one segment length");
  for (const auto& c : sched.specs) corruption_magnitude(c.kind, c.severity);

  const std::size_t total = spec.batch_size * spec.num_batches;
  CounterRng label_rng = CounterRng::substream(spec.seed, 0);
  CounterRng sample_rng = CounterRng::substream(spec.seed, 1);
  CounterRng corrupt_rng = CounterRng::substream(spec.seed, 2);
  const std::vector<int> labels = generate_labels(world.num_classes(), spec.labels, total, label_rng);

  Stream stream;
  stream.batches.resize(spec.num_batches);
  stream.labels.resize(spec.num_batches);
  stream.sample_corruption.reserve(total);

  std::size_t segment = 0;
  std::size_t left_in_segment = sched.segment_lengths[0] == 0 ? total : sched.segment_lengths[0];
  for (std::size_t t = 0; t < total; ++t) {
    if (left_in_segment == 0) {
      ++segment;
      const std::size_t len = sched.segment_lengths[segment % sched.segment_lengths.size()];
      left_in_segment = len == 0 ? total : len;
    }
    const CorruptionSpec& c = sched.specs[segment % sched.specs.size()];
    --left_in_segment;
    const Vector clean = world.sample(labels[t], sample_rng);
    const std::size_t b = t / spec.batch_size;
    stream.batches[b].inputs.push_back(corrupt(clean, c, corrupt_rng));
    stream.labels[b].push_back(labels[t]);
    stream.sample_corruption.push_back(c);
  }
  return stream;
}

namespace {

void check_lengths(const adapt::RunReport& run, const std::vector<std::vector<int>>& labels) {
  if (run.steps.size() != labels.size())
    throw DimensionError("run vs labels (batches)", labels.size(), run.steps.size());
  for (std::size_t b = 0; b < labels.size(); ++b)
    if (run.steps[b].samples.size() != labels[b].size())
      throw DimensionError("run vs labels (batch samples)", labels[b].size(), run.steps[b].samples.size());
}

}  // namespace

SelectionScore selection_f1(const adapt::RunReport& run, const std::vector<std::vector<int>>& labels) {
  check_lengths(run, labels);
  std::size_t tp = 0, selected = 0, reliable = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    for (std::size_t s = 0; s < labels[b].size(); ++s) {
      const auto& rec = run.steps[b].samples[s];
      const bool ok = rec.predicted_class == labels[b][s];
      reliable += ok;
      selected += rec.selected;
      tp += ok && rec.selected;
    }
  }
  SelectionScore score;
  score.empty_selection = selected == 0;
  score.precision = selected == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(selected);
  score.recall = reliable == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(reliable);
  const double denom = score.precision + score.recall;
  score.f1 = denom > 0.0 ? 2.0 * score.precision * score.recall / denom : 0.0;
  return score;
}

double online_accuracy(const adapt::RunReport& run, const std::vector<std::vector<int>>& labels) {
  check_lengths(run, labels);
  std::size_t correct = 0, total = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    for (std::size_t s = 0; s < labels[b].size(); ++s) {
      correct += run.steps[b].samples[s].predicted_class == labels[b][s];
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

ToyNetwork train_source_model(const World& world, const NetworkSpec& spec, const SourceTraining& training,
                              std::uint64_t seed) {
  if (spec.input_dim != world.input_dim()) throw DimensionError("source model input", world.input_dim(), spec.input_dim);
  if (spec.num_classes != world.num_classes())
    throw DimensionError("source model classes", world.num_classes(), spec.num_classes);
  ToyNetwork net = build_network(spec);
  CounterRng rng = CounterRng::substream(seed, 7);
  std::vector<Vector> inputs;
  std::vector<int> labels;
  for (std::size_t c = 0; c < world.num_classes(); ++c) {
    for (std::size_t i = 0; i < training.samples_per_class; ++i) {
      inputs.push_back(world.sample(static_cast<int>(c), rng));
      labels.push_back(static_cast<int>(c));
    }
  }
  net.set_head(fit_head(net, inputs, labels, training.head));
  return net;
}

double evaluate_accuracy(const ToyNetwork& net, const World& world, std::size_t n, std::uint64_t seed,
                         const CorruptionSpec* corruption) {
  CounterRng rng = CounterRng::substream(seed, 11);
  CounterRng noise = CounterRng::substream(seed, 12);
  std::size_t correct = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const int label = static_cast<int>(rng.below(world.num_classes()));
    Vector x = world.sample(label, rng);
    if (corruption) x = corrupt(x, *corruption, noise);
    const ProbVector p = forward_probs(net, x);
    const auto best = std::max_element(p.probs.begin(), p.probs.end()) - p.probs.begin();
    correct += best == label;
  }
  return n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace seva::scenarios
