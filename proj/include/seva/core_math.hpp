#pragma once

// Closed-form quantities of a softmax classifier under Gaussian vicinal
// feature augmentation: logits, softmax, entropy, the robust (vicinal)
// prediction, Augmented Entropy in two algebraic forms, the class-pair
// weight and the feature gradient of the loss.
//
// All functions are pure and reentrant. Entropies are in nats.

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace seva {

using Vector = std::vector<double>;

class DimensionError : public std::invalid_argument {
 public:
  DimensionError(std::string_view where, std::size_t expected, std::size_t actual);

  std::size_t expected() const noexcept { return expected_; }
  std::size_t actual() const noexcept { return actual_; }

 private:
  std::size_t expected_;
  std::size_t actual_;
};

/// Point in feature space (the classifier input).
struct Feature {
  Vector values;

  std::size_t dim() const noexcept { return values.size(); }
};

struct Logits {
  Vector values;

  std::size_t size() const noexcept { return values.size(); }
};

/// Point on the probability simplex.
struct ProbVector {
  Vector probs;

  std::size_t size() const noexcept { return probs.size(); }
  double operator[](std::size_t i) const { return probs[i]; }
};

/// Per-dimension vicinal variances (a diagonal covariance).
struct DiagCovariance {
  Vector variances;

  std::size_t dim() const noexcept { return variances.size(); }
  static DiagCovariance zeros(std::size_t d) { return {Vector(d, 0.0)}; }
};

/// Affine classifier head. Row i of the weight matrix is the class
/// prototype a_i; biases(i) is b_i. Stored row-major.
class ClassifierHead {
 public:
  ClassifierHead(std::size_t num_classes, std::size_t dim, Vector weights, Vector biases);

  static ClassifierHead from_rows(const std::vector<Vector>& rows, Vector biases);

  std::size_t num_classes() const noexcept { return num_classes_; }
  std::size_t dim() const noexcept { return dim_; }

  std::span<const double> row(std::size_t i) const {
    return {weights_.data() + i * dim_, dim_};
  }
  double weight(std::size_t i, std::size_t k) const { return weights_[i * dim_ + k]; }
  double bias(std::size_t i) const { return biases_[i]; }

  const Vector& weights() const noexcept { return weights_; }
  const Vector& biases() const noexcept { return biases_; }

 private:
  std::size_t num_classes_;
  std::size_t dim_;
  Vector weights_;
  Vector biases_;
};

double log_sum_exp(std::span<const double> values);

Logits logits(const ClassifierHead& head, const Feature& z);
ProbVector softmax(const Logits& l);

/// -sum p ln p with 0 ln 0 = 0.
double entropy(const ProbVector& p);

/// -sum target_j ln model_j.
double cross_entropy(const ProbVector& target, const ProbVector& model);

/// Softmax over logits shifted by half the projected variance a_i Sigma a_i^T.
/// This is the ratio of expectations E[exp(a_i.z~ + b_i)] / E[sum_j exp(a_j.z~ + b_j)]
/// for z~ ~ N(z, Sigma).
ProbVector robust_probs(const ClassifierHead& head, const Feature& z, const DiagCovariance& sigma);

/// Augmented Entropy: sum_j pbar_j log sum_i exp[(a_i-a_j).z + (b_i-b_j) + q_ij/2],
/// q_ij = (a_j-a_i) Sigma (a_j-a_i)^T. Evaluated literally from prototype
/// differences with a log-sum-exp inner sum.
double augmented_entropy(const ClassifierHead& head, const Feature& z, const DiagCovariance& sigma);

/// The same loss written as sum_j pbar_j log sum_i (p_i / p_j) w_ij with
/// w_ij the class-pair weight. Independent evaluation route for the above.
double augmented_entropy_decomposed(const ClassifierHead& head, const Feature& z,
                                    const DiagCovariance& sigma);

/// exp[(a_j-a_i) Sigma (a_j-a_i)^T / 2]. Throws std::out_of_range on bad indices.
double class_pair_weight(const ClassifierHead& head, std::size_t i, std::size_t j,
                         const DiagCovariance& sigma);

Vector grad_entropy_wrt_feature(const ClassifierHead& head, const Feature& z);
Vector grad_augmented_entropy_wrt_feature(const ClassifierHead& head, const Feature& z,
                                          const DiagCovariance& sigma);

/// Loss value and its gradient with respect to the logits.
struct LossWithGrad {
  double loss = 0.0;
  Vector dlogits;
};

/// Entropy of softmax(logits) and d/dlogits.
LossWithGrad entropy_with_grad(std::span<const double> logits);

/// Augmented Entropy for a fixed (head, Sigma) pair, evaluated in O(C^2) per
/// sample from logits. The pair quadratic forms are precomputed once, which
/// is what an adaptation loop needs: the head and Sigma stay fixed while the
/// features move.
class AugmentedEntropyKernel {
 public:
  AugmentedEntropyKernel(const ClassifierHead& head, const DiagCovariance& sigma);

  std::size_t num_classes() const noexcept { return num_classes_; }

  double loss(std::span<const double> logits) const;
  LossWithGrad loss_with_grad(std::span<const double> logits) const;
  ProbVector robust_probs(std::span<const double> logits) const;

 private:
  std::size_t num_classes_;
  Vector half_self_;  // a_i Sigma a_i^T / 2
  Vector half_pair_;  // q_ij / 2, row-major C x C
};

/// Multiply head^T by a class-space vector: returns sum_i v_i a_i.
Vector head_transpose_times(const ClassifierHead& head, std::span<const double> v);

}  // namespace seva
