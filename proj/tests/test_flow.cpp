#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "flowtint/flow.hpp"

using namespace flowtint;

TEST_CASE("interpolate matches the straight-line path") {
  CHECK(interpolate({0.0}, {1.0}, 0.5) == Vec{0.5});
  CHECK(interpolate({0.2, 0.8}, {1.0, 0.0}, 0.0) == Vec{0.2, 0.8});
  // direct arithmetic: (1-0.25)*x0 + 0.25*x1
  Vec got = interpolate({1.0, 2.0}, {3.0, -1.0}, 0.25);
  CHECK(got[0] == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(got[1] == doctest::Approx(1.25).epsilon(1e-15));
}

TEST_CASE("interpolate rejects bad inputs") {
  CHECK_THROWS_AS(interpolate({0.0}, {1.0, 2.0}, 0.5), DimensionError);
  CHECK_THROWS_AS(interpolate({0.0}, {1.0}, 1.5), DomainError);
  CHECK_THROWS_AS(interpolate({0.0}, {1.0}, -0.1), DomainError);
}

TEST_CASE("interpolate boundary identities") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Vec x0(8), x1(8);
    for (auto& v : x0) v = rng.normal();
    for (auto& v : x1) v = rng.normal();
    CHECK(interpolate(x0, x1, 0.0) == x0);
    CHECK(interpolate(x0, x1, 1.0) == x1);
  }
}

TEST_CASE("target_velocity") {
  CHECK(target_velocity({0.0}, {0.0}) == Vec{0.0});
  CHECK(target_velocity({0.0}, {1.0}) == Vec{1.0});
  Vec got = target_velocity({0.5, -0.5}, {1.0, 1.0});
  CHECK(got[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(got[1] == doctest::Approx(1.5).epsilon(1e-15));
  CHECK_THROWS_AS(target_velocity({0.0}, {1.0, 2.0}), DimensionError);
}

TEST_CASE("target_velocity is translation-equivariant") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Vec x0(5), x1(5), d(5);
    for (auto& v : x0) v = rng.normal();
    for (auto& v : x1) v = rng.normal();
    double delta = rng.normal();
    Vec x0s = x0, x1s = x1;
    for (auto& v : x0s) v += delta;
    for (auto& v : x1s) v += delta;
    Vec a = target_velocity(x0, x1), b = target_velocity(x0s, x1s);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }
}

TEST_CASE("fm_loss values and invariants") {
  CHECK(fm_loss({3.0, 4.0}, {3.0, 4.0}) == 0.0);
  CHECK(fm_loss({1.0, 0.0}, {0.0, 0.0}) == doctest::Approx(0.5));
  CHECK(fm_loss({1.0, 2.0, 3.0}, {0.0, 0.0, 0.0}) == doctest::Approx(14.0 / 3.0));
  CHECK_THROWS_AS(fm_loss({1.0}, {1.0, 2.0}), DimensionError);

  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    Vec a(6), b(6);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    CHECK(fm_loss(a, b) >= 0.0);
    CHECK(fm_loss(a, a) == 0.0);
  }
}

TEST_CASE("euler transport of an exact straight-path field") {
  // v(x, t) = x1 - x0 moves x1 to x0 exactly in one step, and the straight
  // path makes the result step-count invariant.
  Vec x0{0.2, 0.7, 0.1, 0.9};
  Vec x1{1.3, -0.4, 0.6, 0.2};
  Vec v = target_velocity(x0, x1);
  auto field = [&](const Vec&, double) { return v; };

  Vec one = euler_integrate(field, x1, 1);
  for (size_t i = 0; i < x0.size(); ++i) CHECK(one[i] == doctest::Approx(x0[i]).epsilon(1e-15));

  for (int steps : {2, 6, 28}) {
    Vec got = euler_integrate(field, x1, steps);
    for (size_t i = 0; i < x0.size(); ++i) CHECK(got[i] == doctest::Approx(one[i]).epsilon(1e-12));
  }
}

TEST_CASE("euler_sample determinism and clamping") {
  auto field = [](const Vec& x, double) {
    Vec v(x.size());
    for (size_t i = 0; i < x.size(); ++i) v[i] = x[i];  // contracting flow
    return v;
  };
  ImageTensor a = euler_sample_with(field, 4, 4, 6, 1234);
  ImageTensor b = euler_sample_with(field, 4, 4, 6, 1234);
  CHECK(a.data == b.data);
  for (double v : a.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  ImageTensor c = euler_sample_with(field, 4, 4, 6, 1235);
  CHECK(a.data != c.data);
}

TEST_CASE("euler_integrate surfaces non-finite states with the step index") {
  auto field = [](const Vec& x, double) {
    Vec v(x.size(), std::numeric_limits<double>::infinity());
    return v;
  };
  try {
    euler_integrate(field, Vec{0.0}, 3);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
  CHECK_THROWS_AS(euler_integrate([](const Vec& x, double) { return x; }, Vec{0.0}, 0), DomainError);
}
