#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "seva/core_math.hpp"
#include "test_support.hpp"

using namespace seva;
using seva::testing::h3_head;

// Reference values from tests/oracles/core_math_oracle.py (50-digit mpmath).
namespace oracle_values {
constexpr double kSoftmax101[] = {0.66524095577482188953, 0.24472847105479765247, 0.090030573170380457998};
constexpr double kEntropy101 = 0.83239558183993887295;
constexpr double kRobustH3[] = {0.64865423705164718901, 0.23862655824004824433, 0.11271920470830456666};
constexpr double kAugmentedEntropyH3 = 1.3357307277140412626;
constexpr double kCrossEntropyH3 = 0.87167093210103768214;
}  // namespace oracle_values

namespace {

double sum(const Vector& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

const DiagCovariance kHalf{{0.5, 0.5}};

}  // namespace

TEST_CASE("logits") {
  const auto head = h3_head();
  SUBCASE("affine arithmetic") {
    const Logits l = logits(head, Feature{{1.0, 0.0}});
    CHECK(l.values == Vector{1.0, 0.0, -1.0});
  }
  SUBCASE("origin gives the biases") {
    const auto h = ClassifierHead::from_rows({{1.0, 2.0}, {3.0, 4.0}}, {0.25, -7.0});
    CHECK(logits(h, Feature{{0.0, 0.0}}).values == Vector{0.25, -7.0});
  }
  SUBCASE("matches extended precision") {
    CounterRng rng(11);
    for (int t = 0; t < 200; ++t) {
      const auto inst = seva::testing::random_instance(rng);
      const auto got = logits(inst.head, inst.z).values;
      const auto ref = seva::testing::logits_long_double(inst.head, inst.z);
      for (std::size_t i = 0; i < got.size(); ++i) {
        const long double err = std::abs(static_cast<long double>(got[i]) - ref[i]);
        CHECK(static_cast<double>(err) <= 1e-12 * std::max(1.0L, std::abs(ref[i])));
      }
    }
  }
  SUBCASE("dimension mismatch names both dims") {
    try {
      logits(head, Feature{{1.0, 2.0, 3.0}});
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      CHECK(e.expected() == 2);
      CHECK(e.actual() == 3);
      CHECK(std::string(e.what()).find("expected 2, got 3") != std::string::npos);
    }
  }
  SUBCASE("non-finite features rejected") {
    CHECK_THROWS_AS(logits(head, Feature{{NAN, 0.0}}), std::invalid_argument);
  }
}

TEST_CASE("softmax") {
  SUBCASE("uniform") {
    const auto p = softmax(Logits{{0.0, 0.0, 0.0}});
    for (double v : p.probs) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("large logits do not overflow") {
    const auto p = softmax(Logits{{1000.0, 0.0}});
    CHECK(p[0] == 1.0);
    CHECK(p[1] >= 0.0);
    CHECK(p[1] < 1e-300);
  }
  SUBCASE("oracle value") {
    const auto p = softmax(Logits{{1.0, 0.0, -1.0}});
    for (std::size_t i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(oracle_values::kSoftmax101[i]).epsilon(1e-14));
    CHECK(std::abs(sum(p.probs) - 1.0) <= 1e-12);
  }
}

TEST_CASE("entropy") {
  CHECK(entropy(ProbVector{{0.0, 1.0, 0.0}}) == 0.0);
  for (std::size_t C : {1u, 2u, 7u, 1000u}) {
    const ProbVector u{Vector(C, 1.0 / static_cast<double>(C))};
    CHECK(entropy(u) == doctest::Approx(std::log(static_cast<double>(C))).epsilon(1e-13));
  }
  CHECK(entropy(softmax(Logits{{1.0, 0.0, -1.0}})) == doctest::Approx(oracle_values::kEntropy101).epsilon(1e-14));
}

TEST_CASE("robust_probs") {
  const auto head = h3_head();
  const Feature z{{1.0, 0.0}};
  SUBCASE("zero covariance reduces to softmax") {
    const auto a = robust_probs(head, z, DiagCovariance::zeros(2));
    const auto b = softmax(logits(head, z));
    CHECK(a.probs == b.probs);
  }
  SUBCASE("H3 with variances 0.5") {
    const auto p = robust_probs(head, z, kHalf);
    for (std::size_t i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(oracle_values::kRobustH3[i]).epsilon(1e-14));
  }
  SUBCASE("normalised and invariant to a common bias shift") {
    CounterRng rng(3);
    for (int t = 0; t < 200; ++t) {
      const auto inst = seva::testing::random_instance(rng);
      const auto p = robust_probs(inst.head, inst.z, inst.sigma);
      CHECK(std::abs(sum(p.probs) - 1.0) <= 1e-12);
      Vector b = inst.head.biases();
      for (double& x : b) x += 3.5;
      const ClassifierHead shifted(inst.head.num_classes(), inst.head.dim(), inst.head.weights(), b);
      const auto q = robust_probs(shifted, inst.z, inst.sigma);
      for (std::size_t i = 0; i < p.size(); ++i) CHECK(q[i] == doctest::Approx(p[i]).epsilon(1e-12));
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(robust_probs(head, z, DiagCovariance{{0.5}}), DimensionError);
    CHECK_THROWS_AS(robust_probs(head, z, DiagCovariance{{-0.5, 0.5}}), std::invalid_argument);
  }
}

TEST_CASE("augmented_entropy") {
  const auto head = h3_head();
  const Feature z{{1.0, 0.0}};
  SUBCASE("zero covariance collapses to entropy") {
    CounterRng rng(5);
    for (int t = 0; t < 300; ++t) {
      const auto inst = seva::testing::random_instance(rng, 2, 10, 2, 16, true);
      const double h = entropy(softmax(logits(inst.head, inst.z)));
      CHECK(std::abs(augmented_entropy(inst.head, inst.z, inst.sigma) - h) <= 1e-9);
    }
  }
  SUBCASE("single class is exactly zero") {
    const auto one = ClassifierHead::from_rows({{2.0, -1.0}}, {0.3});
    CHECK(augmented_entropy(one, z, kHalf) == 0.0);
  }
  SUBCASE("H3 value and dominance chain") {
    const double v = augmented_entropy(head, z, kHalf);
    CHECK(v == doctest::Approx(oracle_values::kAugmentedEntropyH3).epsilon(1e-13));
    const auto pbar = robust_probs(head, z, kHalf);
    const auto p = softmax(logits(head, z));
    const double ce = cross_entropy(pbar, p);
    CHECK(ce == doctest::Approx(oracle_values::kCrossEntropyH3).epsilon(1e-13));
    CHECK(v >= ce);
    CHECK(ce >= entropy(pbar));
  }
  SUBCASE("dominance chain and non-negativity on random instances") {
    CounterRng rng(8);
    for (int t = 0; t < 500; ++t) {
      const auto inst = seva::testing::random_instance(rng);
      const double v = augmented_entropy(inst.head, inst.z, inst.sigma);
      const auto pbar = robust_probs(inst.head, inst.z, inst.sigma);
      const double ce = cross_entropy(pbar, softmax(logits(inst.head, inst.z)));
      CHECK(v >= 0.0);
      CHECK(v >= ce - 1e-12);
      CHECK(ce >= entropy(pbar) - 1e-12);
    }
  }
  SUBCASE("bias translation invariance") {
    CounterRng rng(9);
    for (int t = 0; t < 100; ++t) {
      const auto inst = seva::testing::random_instance(rng);
      Vector b = inst.head.biases();
      for (double& x : b) x -= 12.0;
      const ClassifierHead shifted(inst.head.num_classes(), inst.head.dim(), inst.head.weights(), b);
      CHECK(augmented_entropy(shifted, inst.z, inst.sigma) ==
            doctest::Approx(augmented_entropy(inst.head, inst.z, inst.sigma)).epsilon(1e-11));
    }
  }
  SUBCASE("huge variances stay finite") {
    CHECK(std::isfinite(augmented_entropy(head, z, DiagCovariance{{1e4, 1e4}})));
  }
}

TEST_CASE("augmented_entropy_decomposed") {
  SUBCASE("agrees with the direct form") {
    CounterRng rng(21);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
      const auto inst = seva::testing::random_instance(rng);
      const double a = augmented_entropy(inst.head, inst.z, inst.sigma);
      const double b = augmented_entropy_decomposed(inst.head, inst.z, inst.sigma);
      worst = std::max(worst, std::abs(a - b));
    }
    CHECK(worst <= 1e-9);
  }
  SUBCASE("zero covariance reduces to entropy") {
    const auto head = h3_head();
    const Feature z{{0.3, -0.7}};
    CHECK(augmented_entropy_decomposed(head, z, DiagCovariance::zeros(2)) ==
          doctest::Approx(entropy(softmax(logits(head, z)))).epsilon(1e-12));
  }
  SUBCASE("coincident prototypes give ln C") {
    const auto same = ClassifierHead::from_rows({{1.0, 2.0}, {1.0, 2.0}, {1.0, 2.0}, {1.0, 2.0}}, {0, 0, 0, 0});
    CHECK(augmented_entropy_decomposed(same, Feature{{0.4, 9.0}}, kHalf) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-14));
    CHECK(augmented_entropy(same, Feature{{0.4, 9.0}}, kHalf) == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  }
}

TEST_CASE("class_pair_weight") {
  const auto head = h3_head();
  CHECK(class_pair_weight(head, 1, 1, kHalf) == 1.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(class_pair_weight(head, i, j, DiagCovariance::zeros(2)) == 1.0);
  // a_0 - a_2 = [2, 1]; quadratic form 0.5*4 + 0.5*1 = 2.5.
  CHECK(class_pair_weight(head, 0, 2, kHalf) == doctest::Approx(std::exp(1.25)).epsilon(1e-15));
  CHECK(class_pair_weight(head, 0, 2, kHalf) == class_pair_weight(head, 2, 0, kHalf));
  CHECK_THROWS_AS(class_pair_weight(head, 0, 3, kHalf), std::out_of_range);

  SUBCASE("weight is at least one, equal to one iff the difference is unseen by Sigma") {
    CounterRng rng(4);
    for (int t = 0; t < 200; ++t) {
      const auto inst = seva::testing::random_instance(rng);
      for (std::size_t i = 0; i < inst.head.num_classes(); ++i)
        for (std::size_t j = 0; j < inst.head.num_classes(); ++j) CHECK(class_pair_weight(inst.head, i, j, inst.sigma) >= 1.0);
    }
    // Prototypes differing only in a zero-variance coordinate.
    const auto h = ClassifierHead::from_rows({{1.0, 5.0}, {1.0, -5.0}}, {0, 0});
    CHECK(class_pair_weight(h, 0, 1, DiagCovariance{{0.7, 0.0}}) == 1.0);
    CHECK(class_pair_weight(h, 0, 1, DiagCovariance{{0.0, 0.7}}) > 1.0);
  }
}

TEST_CASE("feature gradient of Augmented Entropy") {
  SUBCASE("matches central differences") {
    CounterRng rng(31);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      const auto inst = seva::testing::random_instance(rng);
      const auto f = [&](const Vector& z) { return augmented_entropy(inst.head, Feature{z}, inst.sigma); };
      const Vector fd = seva::testing::central_difference(f, inst.z.values);
      const Vector g = grad_augmented_entropy_wrt_feature(inst.head, inst.z, inst.sigma);
      worst = std::max(worst, seva::testing::max_relative_error(g, fd));
    }
    CHECK(worst <= 1e-4);
  }
  SUBCASE("zero covariance gives the entropy gradient") {
    CounterRng rng(32);
    for (int t = 0; t < 50; ++t) {
      const auto inst = seva::testing::random_instance(rng, 2, 10, 2, 16, true);
      const Vector g = grad_augmented_entropy_wrt_feature(inst.head, inst.z, inst.sigma);
      const Vector ge = grad_entropy_wrt_feature(inst.head, inst.z);
      const auto f = [&](const Vector& z) { return entropy(softmax(logits(inst.head, Feature{z}))); };
      const Vector fd = seva::testing::central_difference(f, inst.z.values);
      CHECK(seva::testing::max_relative_error(g, ge) <= 1e-9);
      CHECK(seva::testing::max_relative_error(ge, fd) <= 1e-4);
    }
  }
  SUBCASE("coincident prototypes give zero gradient") {
    const auto same = ClassifierHead::from_rows({{1.0, 2.0}, {1.0, 2.0}, {1.0, 2.0}}, {0.5, 0.5, 0.5});
    const Vector g = grad_augmented_entropy_wrt_feature(same, Feature{{0.3, 0.1}}, kHalf);
    for (double v : g) CHECK(std::abs(v) <= 1e-15);
  }
}

TEST_CASE("AugmentedEntropyKernel agrees with the literal form") {
  CounterRng rng(41);
  for (int t = 0; t < 300; ++t) {
    const auto inst = seva::testing::random_instance(rng);
    const AugmentedEntropyKernel kernel(inst.head, inst.sigma);
    const Logits l = logits(inst.head, inst.z);
    const double direct = augmented_entropy(inst.head, inst.z, inst.sigma);
    CHECK(std::abs(kernel.loss(l.values) - direct) <= 1e-9);
    CHECK(std::abs(kernel.loss_with_grad(l.values).loss - direct) <= 1e-9);
    const auto p = kernel.robust_probs(l.values);
    const auto q = robust_probs(inst.head, inst.z, inst.sigma);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p[i] - q[i]) <= 1e-12);
  }
}

TEST_CASE("entropy_with_grad matches finite differences in logit space") {
  CounterRng rng(51);
  for (int t = 0; t < 100; ++t) {
    Vector l(2 + rng.below(9));
    for (double& v : l) v = 3.0 * rng.normal();
    const auto f = [](const Vector& x) { return entropy(softmax(Logits{x})); };
    const Vector fd = seva::testing::central_difference(f, l);
    const auto lg = entropy_with_grad(l);
    CHECK(lg.loss == doctest::Approx(f(l)).epsilon(1e-12));
    CHECK(seva::testing::max_relative_error(lg.dlogits, fd) <= 1e-4);
  }
}
