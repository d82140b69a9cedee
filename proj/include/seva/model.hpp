#pragma once

// A small frozen feature extractor whose only adaptable parameters are the
// per-channel scale and shift of its group-normalization blocks, feeding an
// affine classifier head.
//
// Each layer computes  out = act(gamma * groupnorm(W x) + beta)  with
// per-sample group statistics, so a batch of one is well defined and
// features never depend on other samples in the batch.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "seva/core_math.hpp"

namespace seva {

enum class Activation { Tanh, Identity };

std::string_view activation_name(Activation a);
Activation parse_activation(std::string_view name);

struct NetworkSpec {
  std::size_t input_dim = 16;
  std::size_t feature_dim = 16;
  std::size_t num_classes = 10;
  std::size_t num_layers = 2;
  std::size_t groups = 4;
  Activation activation = Activation::Tanh;
  std::uint64_t seed = 0;
};

inline constexpr double kNormEpsilon = 1e-5;

/// Flat view of every adaptable (gamma, beta) entry. Layout: for each layer,
/// its gamma channels followed by its beta channels.
struct ParamVector {
  Vector values;
  std::vector<std::size_t> channels_per_layer;

  std::size_t size() const noexcept { return values.size(); }
};

struct NormLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t groups = 1;
  Vector weight;  // out x in, row-major, frozen
  Vector gamma;
  Vector beta;
};

class ToyNetwork {
 public:
  ToyNetwork(NetworkSpec spec, std::vector<NormLayer> layers, ClassifierHead head);

  const NetworkSpec& spec() const noexcept { return spec_; }
  std::size_t input_dim() const noexcept { return spec_.input_dim; }
  std::size_t feature_dim() const noexcept { return spec_.feature_dim; }
  std::size_t num_classes() const noexcept { return head_.num_classes(); }
  const std::vector<NormLayer>& layers() const noexcept { return layers_; }
  const ClassifierHead& head() const noexcept { return head_; }

  std::size_t num_params() const noexcept;
  ParamVector params() const;

  /// The only way to modify adaptable parameters.
  void set_params(const ParamVector& p);
  /// Replaces the head; used once when the source model is trained.
  void set_head(ClassifierHead head);

 private:
  NetworkSpec spec_;
  std::vector<NormLayer> layers_;
  ClassifierHead head_;
};

/// Frozen weights ~ N(0, 1/in), head ~ N(0, 1/d) with zero bias, gamma = 1,
/// beta = 0. num_layers = 0 gives the identity extractor (needs input_dim ==
/// feature_dim).
ToyNetwork build_network(const NetworkSpec& spec);

/// Intermediate values kept for the backward pass.
struct ForwardCache {
  struct LayerCache {
    Vector input;
    Vector normalized;  // pre-affine
    Vector inv_std;     // per group
    Vector output;      // post-activation
  };
  std::vector<LayerCache> layers;
  Feature feature;
};

ForwardCache forward_cached(const ToyNetwork& net, std::span<const double> x);
Feature forward_features(const ToyNetwork& net, std::span<const double> x);
ProbVector forward_probs(const ToyNetwork& net, std::span<const double> x);

/// Adds d(loss)/d(gamma, beta) into `grad` (ParamVector layout) given
/// d(loss)/d(feature) for one forward pass.
void accumulate_param_grad(const ToyNetwork& net, const ForwardCache& cache,
                           std::span<const double> dfeature, Vector& grad);

enum class LossKind { Entropy, AugmentedEntropy };

/// Mean per-sample loss over the batch.
double batch_loss(const ToyNetwork& net, const std::vector<Vector>& batch, LossKind kind,
                  const DiagCovariance& sigma);

/// Gradient of batch_loss with respect to all adaptable parameters.
ParamVector grad_loss_wrt_adaptable(const ToyNetwork& net, const std::vector<Vector>& batch,
                                    LossKind kind, const DiagCovariance& sigma);

/// lambda * population variance of each feature coordinate over the inputs.
DiagCovariance calibrate_covariance(const ToyNetwork& net, const std::vector<Vector>& inputs,
                                    double lambda);

struct HeadFitOptions {
  std::size_t iterations = 400;
  double learning_rate = 0.5;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// Softmax regression of the head on frozen features of labelled source
/// samples (full-batch gradient descent with momentum, zero initialisation).
ClassifierHead fit_head(const ToyNetwork& net, const std::vector<Vector>& inputs,
                        std::span<const int> labels, const HeadFitOptions& options = {});

}  // namespace seva
