#include "seva/model.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>

#include "seva/rng.hpp"

namespace seva {

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::Tanh:
      return "tanh";
    case Activation::Identity:
      return "identity";
  }
  return "unknown";
}

Activation parse_activation(std::string_view name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "identity") return Activation::Identity;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

ToyNetwork::ToyNetwork(NetworkSpec spec, std::vector<NormLayer> layers, ClassifierHead head)
    : spec_(spec), layers_(std::move(layers)), head_(std::move(head)) {
  std::size_t width = spec_.input_dim;
  for (const auto& layer : layers_) {
    if (layer.in != width) throw DimensionError("ToyNetwork layer input", width, layer.in);
    if (layer.groups == 0 || layer.out % layer.groups != 0)
      throw std::invalid_argument("group count must divide the layer's channel count");
    if (layer.weight.size() != layer.in * layer.out)
      throw DimensionError("ToyNetwork layer weight", layer.in * layer.out, layer.weight.size());
    if (layer.gamma.size() != layer.out || layer.beta.size() != layer.out)
      throw DimensionError("ToyNetwork affine parameters", layer.out, layer.gamma.size());
    width = layer.out;
  }
  if (width != spec_.feature_dim) throw DimensionError("ToyNetwork feature dim", spec_.feature_dim, width);
  if (head_.dim() != spec_.feature_dim) throw DimensionError("ToyNetwork head", spec_.feature_dim, head_.dim());
}

std::size_t ToyNetwork::num_params() const noexcept {
  std::size_t n = 0;
  for (const auto& layer : layers_) n += 2 * layer.out;
  return n;
}

ParamVector ToyNetwork::params() const {
  ParamVector p;
  p.values.reserve(num_params());
  for (const auto& layer : layers_) {
    p.values.insert(p.values.end(), layer.gamma.begin(), layer.gamma.end());
    p.values.insert(p.values.end(), layer.beta.begin(), layer.beta.end());
    p.channels_per_layer.push_back(layer.out);
  }
  return p;
}

void ToyNetwork::set_params(const ParamVector& p) {
  if (p.values.size() != num_params()) throw DimensionError("ToyNetwork::set_params", num_params(), p.values.size());
  std::size_t offset = 0;
  for (auto& layer : layers_) {
    for (std::size_t c = 0; c < layer.out; ++c) layer.gamma[c] = p.values[offset + c];
    offset += layer.out;
    for (std::size_t c = 0; c < layer.out; ++c) layer.beta[c] = p.values[offset + c];
    offset += layer.out;
  }
}

void ToyNetwork::set_head(ClassifierHead head) {
  if (head.dim() != spec_.feature_dim) throw DimensionError("ToyNetwork::set_head", spec_.feature_dim, head.dim());
  head_ = std::move(head);
}

ToyNetwork build_network(const NetworkSpec& spec) {
  if (spec.input_dim == 0 || spec.feature_dim == 0 || spec.num_classes == 0)
    throw std::invalid_argument("network dimensions must be positive");
  if (spec.num_layers == 0 && spec.input_dim != spec.feature_dim)
    throw std::invalid_argument("a network without layers needs input_dim == feature_dim");
  if (spec.num_layers > 0 && (spec.groups == 0 || spec.feature_dim % spec.groups != 0))
    throw std::invalid_argument("groups must divide feature_dim");

  CounterRng rng(spec.seed);
  std::vector<NormLayer> layers;
  std::size_t width = spec.input_dim;
  for (std::size_t l = 0; l < spec.num_layers; ++l) {
    NormLayer layer;
    layer.in = width;
    layer.out = spec.feature_dim;
    layer.groups = spec.groups;
    layer.weight.resize(layer.in * layer.out);
    const double scale = 1.0 / std::sqrt(static_cast<double>(layer.in));
    for (double& w : layer.weight) w = scale * rng.normal();
    layer.gamma.assign(layer.out, 1.0);
    layer.beta.assign(layer.out, 0.0);
    width = layer.out;
    layers.push_back(std::move(layer));
  }
  Vector head_w(spec.num_classes * spec.feature_dim);
  const double head_scale = 1.0 / std::sqrt(static_cast<double>(spec.feature_dim));
  for (double& w : head_w) w = head_scale * rng.normal();
  ClassifierHead head(spec.num_classes, spec.feature_dim, std::move(head_w), Vector(spec.num_classes, 0.0));
  return ToyNetwork(spec, std::move(layers), std::move(head));
}

namespace {

double activate(Activation a, double y) { return a == Activation::Tanh ? std::tanh(y) : y; }

// Derivative expressed through the activation output.
double activate_grad(Activation a, double out) { return a == Activation::Tanh ? 1.0 - out * out : 1.0; }

}  // namespace

ForwardCache forward_cached(const ToyNetwork& net, std::span<const double> x) {
  if (x.size() != net.input_dim()) throw DimensionError("forward", net.input_dim(), x.size());
  ForwardCache cache;
  cache.layers.resize(net.layers().size());
  Vector current(x.begin(), x.end());
  const Activation act = net.spec().activation;

  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    const NormLayer& layer = net.layers()[l];
    auto& lc = cache.layers[l];
    lc.input = current;
    Vector h(layer.out, 0.0);
    for (std::size_t o = 0; o < layer.out; ++o) {
      const double* w = layer.weight.data() + o * layer.in;
      double acc = 0.0;
      for (std::size_t i = 0; i < layer.in; ++i) acc += w[i] * current[i];
      h[o] = acc;
    }
    const std::size_t group_size = layer.out / layer.groups;
    lc.normalized.resize(layer.out);
    lc.inv_std.resize(layer.groups);
    lc.output.resize(layer.out);
    for (std::size_t g = 0; g < layer.groups; ++g) {
      const std::size_t begin = g * group_size;
      double mean = 0.0;
      for (std::size_t c = begin; c < begin + group_size; ++c) mean += h[c];
      mean /= static_cast<double>(group_size);
      double var = 0.0;
      for (std::size_t c = begin; c < begin + group_size; ++c) var += (h[c] - mean) * (h[c] - mean);
      var /= static_cast<double>(group_size);
      const double inv_std = 1.0 / std::sqrt(var + kNormEpsilon);
      lc.inv_std[g] = inv_std;
      for (std::size_t c = begin; c < begin + group_size; ++c) {
        lc.normalized[c] = (h[c] - mean) * inv_std;
        lc.output[c] = activate(act, layer.gamma[c] * lc.normalized[c] + layer.beta[c]);
      }
    }
    current = lc.output;
  }
  cache.feature.values = std::move(current);
  return cache;
}

Feature forward_features(const ToyNetwork& net, std::span<const double> x) {
  return forward_cached(net, x).feature;
}

ProbVector forward_probs(const ToyNetwork& net, std::span<const double> x) {
  return softmax(logits(net.head(), forward_features(net, x)));
}

void accumulate_param_grad(const ToyNetwork& net, const ForwardCache& cache,
                           std::span<const double> dfeature, Vector& grad) {
  if (dfeature.size() != net.feature_dim()) throw DimensionError("backward", net.feature_dim(), dfeature.size());
  if (grad.size() != net.num_params()) throw DimensionError("backward grad buffer", net.num_params(), grad.size());
  const Activation act = net.spec().activation;

  // Offsets of each layer's gamma block in the flat layout.
  std::vector<std::size_t> offsets(net.layers().size());
  std::size_t offset = 0;
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    offsets[l] = offset;
    offset += 2 * net.layers()[l].out;
  }

  Vector dout(dfeature.begin(), dfeature.end());
  for (std::size_t l = net.layers().size(); l-- > 0;) {
    const NormLayer& layer = net.layers()[l];
    const auto& lc = cache.layers[l];
    const std::size_t group_size = layer.out / layer.groups;
    double* dgamma = grad.data() + offsets[l];
    double* dbeta = dgamma + layer.out;

    Vector dnorm(layer.out);
    for (std::size_t c = 0; c < layer.out; ++c) {
      const double dy = dout[c] * activate_grad(act, lc.output[c]);
      dgamma[c] += dy * lc.normalized[c];
      dbeta[c] += dy;
      dnorm[c] = dy * layer.gamma[c];
    }
    if (l == 0) break;

    Vector dh(layer.out);
    for (std::size_t g = 0; g < layer.groups; ++g) {
      const std::size_t begin = g * group_size;
      double mean_d = 0.0;
      double mean_dn = 0.0;
      for (std::size_t c = begin; c < begin + group_size; ++c) {
        mean_d += dnorm[c];
        mean_dn += dnorm[c] * lc.normalized[c];
      }
      mean_d /= static_cast<double>(group_size);
      mean_dn /= static_cast<double>(group_size);
      for (std::size_t c = begin; c < begin + group_size; ++c)
        dh[c] = lc.inv_std[g] * (dnorm[c] - mean_d - lc.normalized[c] * mean_dn);
    }
    Vector dx(layer.in, 0.0);
    for (std::size_t o = 0; o < layer.out; ++o) {
      const double* w = layer.weight.data() + o * layer.in;
      for (std::size_t i = 0; i < layer.in; ++i) dx[i] += w[i] * dh[o];
    }
    dout = std::move(dx);
  }
}

namespace {

void require_batch(const std::vector<Vector>& batch) {
  if (batch.empty()) throw std::invalid_argument("batch must not be empty");
}

}  // namespace

double batch_loss(const ToyNetwork& net, const std::vector<Vector>& batch, LossKind kind,
                  const DiagCovariance& sigma) {
  require_batch(batch);
  double total = 0.0;
  if (kind == LossKind::AugmentedEntropy) {
    const AugmentedEntropyKernel kernel(net.head(), sigma);
    for (const auto& x : batch) total += kernel.loss(logits(net.head(), forward_features(net, x)).values);
  } else {
    for (const auto& x : batch) total += entropy(forward_probs(net, x));
  }
  return total / static_cast<double>(batch.size());
}

ParamVector grad_loss_wrt_adaptable(const ToyNetwork& net, const std::vector<Vector>& batch,
                                    LossKind kind, const DiagCovariance& sigma) {
  require_batch(batch);
  ParamVector grad = net.params();
  std::fill(grad.values.begin(), grad.values.end(), 0.0);
  const double scale = 1.0 / static_cast<double>(batch.size());

  std::optional<AugmentedEntropyKernel> kernel;
  if (kind == LossKind::AugmentedEntropy) kernel.emplace(net.head(), sigma);

  for (const auto& x : batch) {
    const ForwardCache cache = forward_cached(net, x);
    const Logits l = logits(net.head(), cache.feature);
    LossWithGrad lg = kernel ? kernel->loss_with_grad(l.values) : entropy_with_grad(l.values);
    for (double& v : lg.dlogits) v *= scale;
    const Vector dz = head_transpose_times(net.head(), lg.dlogits);
    accumulate_param_grad(net, cache, dz, grad.values);
  }
  return grad;
}

DiagCovariance calibrate_covariance(const ToyNetwork& net, const std::vector<Vector>& inputs,
                                    double lambda) {
  if (inputs.size() < 2) throw std::invalid_argument("covariance calibration needs at least 2 inputs");
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
  const std::size_t d = net.feature_dim();
  Vector mean(d, 0.0), m2(d, 0.0);
  std::size_t count = 0;
  for (const auto& x : inputs) {
    const Feature f = forward_features(net, x);
    ++count;
    for (std::size_t k = 0; k < d; ++k) {
      const double delta = f.values[k] - mean[k];
      mean[k] += delta / static_cast<double>(count);
      m2[k] += delta * (f.values[k] - mean[k]);
    }
  }
  DiagCovariance sigma{Vector(d)};
  for (std::size_t k = 0; k < d; ++k) sigma.variances[k] = lambda * m2[k] / static_cast<double>(count);
  return sigma;
}

ClassifierHead fit_head(const ToyNetwork& net, const std::vector<Vector>& inputs,
                        std::span<const int> labels, const HeadFitOptions& options) {
  if (inputs.empty() || inputs.size() != labels.size())
    throw std::invalid_argument("fit_head needs one label per input");
  const std::size_t C = net.num_classes();
  const std::size_t d = net.feature_dim();
  std::vector<Vector> features;
  features.reserve(inputs.size());
  for (const auto& x : inputs) features.push_back(forward_features(net, x).values);
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= C) throw std::out_of_range("fit_head: label out of range");

  Vector w(C * d, 0.0), b(C, 0.0), vw(C * d, 0.0), vb(C, 0.0);
  Vector gw(C * d), gb(C), l(C);
  const double inv_n = 1.0 / static_cast<double>(inputs.size());
  for (std::size_t it = 0; it < options.iterations; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t s = 0; s < features.size(); ++s) {
      const Vector& f = features[s];
      for (std::size_t i = 0; i < C; ++i) {
        double acc = b[i];
        for (std::size_t k = 0; k < d; ++k) acc += w[i * d + k] * f[k];
        l[i] = acc;
      }
      const double lse = log_sum_exp(l);
      for (std::size_t i = 0; i < C; ++i) {
        const double err = (std::exp(l[i] - lse) - (static_cast<int>(i) == labels[s] ? 1.0 : 0.0)) * inv_n;
        gb[i] += err;
        for (std::size_t k = 0; k < d; ++k) gw[i * d + k] += err * f[k];
      }
    }
    for (std::size_t j = 0; j < w.size(); ++j) {
      vw[j] = options.momentum * vw[j] + gw[j] + options.weight_decay * w[j];
      w[j] -= options.learning_rate * vw[j];
    }
    for (std::size_t i = 0; i < C; ++i) {
      vb[i] = options.momentum * vb[i] + gb[i];
      b[i] -= options.learning_rate * vb[i];
    }
  }
  return ClassifierHead(C, d, std::move(w), std::move(b));
}

}  // namespace seva
