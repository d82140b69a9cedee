#include "seva/core_math.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace seva {

namespace {

std::string dimension_message(std::string_view where, std::size_t expected, std::size_t actual) {
  std::ostringstream os;
  os << "dimension mismatch in " << where << ": expected " << expected << ", got " << actual;
  return os.str();
}

void require_all_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + " has a non-finite entry");
  }
}

void check_feature(const ClassifierHead& head, const Feature& z, std::string_view where) {
  if (z.dim() != head.dim()) throw DimensionError(where, head.dim(), z.dim());
  require_all_finite(z.values, "feature");
}

void check_sigma(const ClassifierHead& head, const DiagCovariance& sigma, std::string_view where) {
  if (sigma.dim() != head.dim()) throw DimensionError(where, head.dim(), sigma.dim());
  for (double v : sigma.variances) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw std::invalid_argument("covariance variances must be finite and non-negative");
  }
}

// (a_j - a_i) Sigma (a_j - a_i)^T for diagonal Sigma.
double pair_quadratic(const ClassifierHead& head, std::size_t i, std::size_t j,
                      const DiagCovariance& sigma) {
  const auto ai = head.row(i);
  const auto aj = head.row(j);
  double q = 0.0;
  for (std::size_t k = 0; k < head.dim(); ++k) {
    const double diff = aj[k] - ai[k];
    q += sigma.variances[k] * diff * diff;
  }
  return q;
}

double self_quadratic(const ClassifierHead& head, std::size_t i, const DiagCovariance& sigma) {
  const auto ai = head.row(i);
  double s = 0.0;
  for (std::size_t k = 0; k < head.dim(); ++k) s += sigma.variances[k] * ai[k] * ai[k];
  return s;
}

Vector softmax_values(std::span<const double> l) {
  const double m = *std::max_element(l.begin(), l.end());
  Vector out(l.size());
  double total = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) {
    out[i] = std::exp(l[i] - m);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

Vector log_softmax_values(std::span<const double> l) {
  const double lse = log_sum_exp(l);
  Vector out(l.size());
  for (std::size_t i = 0; i < l.size(); ++i) out[i] = l[i] - lse;
  return out;
}

}  // namespace

DimensionError::DimensionError(std::string_view where, std::size_t expected, std::size_t actual)
    : std::invalid_argument(dimension_message(where, expected, actual)),
      expected_(expected),
      actual_(actual) {}

ClassifierHead::ClassifierHead(std::size_t num_classes, std::size_t dim, Vector weights,
                               Vector biases)
    : num_classes_(num_classes), dim_(dim), weights_(std::move(weights)), biases_(std::move(biases)) {
  if (num_classes_ == 0 || dim_ == 0)
    throw std::invalid_argument("classifier head needs at least one class and one dimension");
  if (weights_.size() != num_classes_ * dim_)
    throw DimensionError("ClassifierHead weights", num_classes_ * dim_, weights_.size());
  if (biases_.size() != num_classes_)
    throw DimensionError("ClassifierHead biases", num_classes_, biases_.size());
  require_all_finite(weights_, "head weights");
  require_all_finite(biases_, "head biases");
}

ClassifierHead ClassifierHead::from_rows(const std::vector<Vector>& rows, Vector biases) {
  if (rows.empty()) throw std::invalid_argument("classifier head needs at least one row");
  const std::size_t d = rows.front().size();
  Vector flat;
  flat.reserve(rows.size() * d);
  for (const auto& r : rows) {
    if (r.size() != d) throw DimensionError("ClassifierHead row", d, r.size());
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return ClassifierHead(rows.size(), d, std::move(flat), std::move(biases));
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(values.begin(), values.end());
  if (std::isinf(m)) return m;
  double total = 0.0;
  for (double v : values) total += std::exp(v - m);
  return m + std::log(total);
}

Logits logits(const ClassifierHead& head, const Feature& z) {
  check_feature(head, z, "logits");
  Logits out{Vector(head.num_classes())};
  for (std::size_t i = 0; i < head.num_classes(); ++i) {
    const auto a = head.row(i);
    double acc = head.bias(i);
    for (std::size_t k = 0; k < head.dim(); ++k) acc += a[k] * z.values[k];
    out.values[i] = acc;
  }
  return out;
}

ProbVector softmax(const Logits& l) {
  if (l.values.empty()) throw std::invalid_argument("softmax of empty logits");
  require_all_finite(l.values, "logits");
  return {softmax_values(l.values)};
}

double entropy(const ProbVector& p) {
  double h = 0.0;
  for (double v : p.probs) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

double cross_entropy(const ProbVector& target, const ProbVector& model) {
  if (target.size() != model.size()) throw DimensionError("cross_entropy", target.size(), model.size());
  double h = 0.0;
  for (std::size_t j = 0; j < target.size(); ++j) {
    if (target[j] > 0.0) h -= target[j] * std::log(model[j]);
  }
  return h;
}

ProbVector robust_probs(const ClassifierHead& head, const Feature& z, const DiagCovariance& sigma) {
  check_sigma(head, sigma, "robust_probs");
  Logits l = logits(head, z);
  for (std::size_t i = 0; i < head.num_classes(); ++i)
    l.values[i] += 0.5 * self_quadratic(head, i, sigma);
  return {softmax_values(l.values)};
}

double augmented_entropy(const ClassifierHead& head, const Feature& z, const DiagCovariance& sigma) {
  check_feature(head, z, "augmented_entropy");
  check_sigma(head, sigma, "augmented_entropy");
  const std::size_t C = head.num_classes();
  const std::size_t d = head.dim();
  const ProbVector pbar = robust_probs(head, z, sigma);

  Vector terms(C);
  double total = 0.0;
  for (std::size_t j = 0; j < C; ++j) {
    const auto aj = head.row(j);
    for (std::size_t i = 0; i < C; ++i) {
      if (i == j) {
        terms[i] = 0.0;
        continue;
      }
      const auto ai = head.row(i);
      double t = head.bias(i) - head.bias(j);
      for (std::size_t k = 0; k < d; ++k) t += (ai[k] - aj[k]) * z.values[k];
      terms[i] = t + 0.5 * pair_quadratic(head, i, j, sigma);
    }
    total += pbar[j] * log_sum_exp(terms);
  }
  return total;
}

double augmented_entropy_decomposed(const ClassifierHead& head, const Feature& z,
                                    const DiagCovariance& sigma) {
  check_sigma(head, sigma, "augmented_entropy_decomposed");
  const std::size_t C = head.num_classes();
  const Logits l = logits(head, z);
  const Vector log_p = log_softmax_values(l.values);
  const ProbVector pbar = robust_probs(head, z, sigma);

  // log[(p_i / p_j) w_ij] = log p_i - log p_j + log w_ij
  Vector terms(C);
  double total = 0.0;
  for (std::size_t j = 0; j < C; ++j) {
    for (std::size_t i = 0; i < C; ++i) {
      const double log_weight = 0.5 * pair_quadratic(head, i, j, sigma);
      terms[i] = log_p[i] - log_p[j] + log_weight;
    }
    total += pbar[j] * log_sum_exp(terms);
  }
  return total;
}

double class_pair_weight(const ClassifierHead& head, std::size_t i, std::size_t j,
                         const DiagCovariance& sigma) {
  if (i >= head.num_classes() || j >= head.num_classes())
    throw std::out_of_range("class_pair_weight: class index out of range for C=" +
                            std::to_string(head.num_classes()));
  check_sigma(head, sigma, "class_pair_weight");
  if (i == j) return 1.0;
  return std::exp(0.5 * pair_quadratic(head, i, j, sigma));
}

Vector head_transpose_times(const ClassifierHead& head, std::span<const double> v) {
  if (v.size() != head.num_classes())
    throw DimensionError("head_transpose_times", head.num_classes(), v.size());
  Vector out(head.dim(), 0.0);
  for (std::size_t i = 0; i < head.num_classes(); ++i) {
    if (v[i] == 0.0) continue;
    const auto a = head.row(i);
    for (std::size_t k = 0; k < head.dim(); ++k) out[k] += v[i] * a[k];
  }
  return out;
}

LossWithGrad entropy_with_grad(std::span<const double> l) {
  const Vector log_p = log_softmax_values(l);
  LossWithGrad out;
  out.dlogits.resize(l.size());
  for (double lp : log_p) {
    const double p = std::exp(lp);
    if (p > 0.0) out.loss -= p * lp;
  }
  for (std::size_t k = 0; k < l.size(); ++k) {
    const double p = std::exp(log_p[k]);
    out.dlogits[k] = -p * (log_p[k] + out.loss);
  }
  return out;
}

Vector grad_entropy_wrt_feature(const ClassifierHead& head, const Feature& z) {
  const Logits l = logits(head, z);
  return head_transpose_times(head, entropy_with_grad(l.values).dlogits);
}

Vector grad_augmented_entropy_wrt_feature(const ClassifierHead& head, const Feature& z,
                                          const DiagCovariance& sigma) {
  check_sigma(head, sigma, "grad_augmented_entropy_wrt_feature");
  const Logits l = logits(head, z);
  const AugmentedEntropyKernel kernel(head, sigma);
  return head_transpose_times(head, kernel.loss_with_grad(l.values).dlogits);
}

AugmentedEntropyKernel::AugmentedEntropyKernel(const ClassifierHead& head,
                                               const DiagCovariance& sigma)
    : num_classes_(head.num_classes()),
      half_self_(head.num_classes()),
      half_pair_(head.num_classes() * head.num_classes()) {
  check_sigma(head, sigma, "AugmentedEntropyKernel");
  for (std::size_t i = 0; i < num_classes_; ++i) {
    half_self_[i] = 0.5 * self_quadratic(head, i, sigma);
    for (std::size_t j = 0; j < num_classes_; ++j)
      half_pair_[i * num_classes_ + j] = i == j ? 0.0 : 0.5 * pair_quadratic(head, i, j, sigma);
  }
}

ProbVector AugmentedEntropyKernel::robust_probs(std::span<const double> l) const {
  if (l.size() != num_classes_) throw DimensionError("AugmentedEntropyKernel", num_classes_, l.size());
  Vector shifted(l.begin(), l.end());
  for (std::size_t i = 0; i < num_classes_; ++i) shifted[i] += half_self_[i];
  return {softmax_values(shifted)};
}

double AugmentedEntropyKernel::loss(std::span<const double> l) const {
  const ProbVector pbar = robust_probs(l);
  const std::size_t C = num_classes_;
  Vector terms(C);
  double total = 0.0;
  for (std::size_t j = 0; j < C; ++j) {
    for (std::size_t i = 0; i < C; ++i) terms[i] = l[i] - l[j] + half_pair_[i * C + j];
    total += pbar[j] * log_sum_exp(terms);
  }
  return total;
}

// dL/dl_k = pbar_k (S_k - L) + sum_j pbar_j r_jk - pbar_k,
// where S_j is the j-th inner log-sum-exp and r_j. its softmax weights.
LossWithGrad AugmentedEntropyKernel::loss_with_grad(std::span<const double> l) const {
  const ProbVector pbar = robust_probs(l);
  const std::size_t C = num_classes_;
  Vector inner(C);
  Vector terms(C);
  LossWithGrad out;
  out.dlogits.assign(C, 0.0);
  for (std::size_t j = 0; j < C; ++j) {
    for (std::size_t i = 0; i < C; ++i) terms[i] = l[i] - l[j] + half_pair_[i * C + j];
    inner[j] = log_sum_exp(terms);
    out.loss += pbar[j] * inner[j];
    for (std::size_t k = 0; k < C; ++k) out.dlogits[k] += pbar[j] * std::exp(terms[k] - inner[j]);
  }
  for (std::size_t k = 0; k < C; ++k) out.dlogits[k] += pbar[k] * (inner[k] - out.loss) - pbar[k];
  return out;
}

}  // namespace seva
