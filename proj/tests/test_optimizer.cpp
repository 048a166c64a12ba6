// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <vector>

#include "phibal/error.hpp"
#include "phibal/optimizer.hpp"

using namespace phibal;

TEST_CASE("sgd step") {
  Optimizer opt(Sgd{0.1});
  Tensor w = Tensor::scalar(0.0);
  std::vector<Tensor*> params{&w};
  const std::vector<Tensor> grads{Tensor::scalar(1.0)};
  opt.step(params, grads);
  CHECK(w.item() == doctest::Approx(-0.1).epsilon(1e-15));
}

TEST_CASE("first adamw step moves by about lr") {
  const double lr = 1e-2, eps = 1e-8;
  Optimizer opt(AdamW{lr, 0.9, 0.999, eps, 0.0, 0, 0});
  Tensor w = Tensor::vector({0.5, -2.0});
  std::vector<Tensor*> params{&w};
  opt.step(params, std::vector<Tensor>{Tensor::vector({1.0, -3.0})});
  // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
  CHECK(w[0] == doctest::Approx(0.5 - lr * 1.0 / (1.0 + eps)).epsilon(1e-14));
  CHECK(w[1] == doctest::Approx(-2.0 + lr * 3.0 / (3.0 + eps)).epsilon(1e-14));
}

TEST_CASE("adamw with zero decay is adam, and decay is decoupled") {
  auto run = [](double wd) {
    Optimizer opt(AdamW{1e-2, 0.9, 0.999, 1e-8, wd, 0, 0});
    Tensor w = Tensor::vector({1.0, 2.0});
    std::vector<Tensor*> params{&w};
    for (int t = 0; t < 5; ++t) opt.step(params, std::vector<Tensor>{Tensor::vector({0.3 * t, -0.1})});
    return w;
  };

  // Hand-rolled Adam reference.
  double w[2] = {1.0, 2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 5; ++t) {
    const double g[2] = {0.3 * (t - 1), -0.1};
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      w[i] -= 1e-2 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  const Tensor plain = run(0.0);
  CHECK(plain[0] == doctest::Approx(w[0]).epsilon(1e-13));
  CHECK(plain[1] == doctest::Approx(w[1]).epsilon(1e-13));
  const Tensor decayed = run(0.1);
  CHECK(decayed[0] < plain[0]);
}

TEST_CASE("warmup and cosine schedules") {
  const OptimizerConfig warm = AdamW{1e-2, 0.9, 0.999, 1e-8, 0.0, 10, 0};
  CHECK(scheduled_lr(warm, 1) == doctest::Approx(1e-3));
  CHECK(scheduled_lr(warm, 5) == doctest::Approx(5e-3));
  CHECK(scheduled_lr(warm, 10) == doctest::Approx(1e-2));
  CHECK(scheduled_lr(warm, 500) == doctest::Approx(1e-2));
  const OptimizerConfig cosine = AdamW{1e-2, 0.9, 0.999, 1e-8, 0.0, 0, 100};
  CHECK(scheduled_lr(cosine, 100) < 1e-6);
  CHECK(scheduled_lr(Sgd{0.5}, 1000) == 0.5);
}

TEST_CASE("invalid optimizer settings are rejected") {
  CHECK_THROWS_AS(validate(Sgd{0.0}), ConfigError);
  CHECK_THROWS_AS(validate(AdamW{-1.0, 0.9, 0.999, 1e-8, 0.0, 0, 0}), ConfigError);
  CHECK_THROWS_AS(validate(AdamW{1e-3, 1.0, 0.999, 1e-8, 0.0, 0, 0}), ConfigError);
  CHECK_THROWS_AS(validate(AdamW{1e-3, 0.9, 0.999, 1e-8, -0.1, 0, 0}), ConfigError);
}

TEST_CASE("optimizer state survives json") {
  Optimizer a(AdamW{1e-2, 0.9, 0.999, 1e-8, 0.01, 3, 0});
  Tensor w = Tensor::vector({1.0, -1.0});
  std::vector<Tensor*> params{&w};
  a.step(params, std::vector<Tensor>{Tensor::vector({0.2, 0.4})});

  Optimizer b(a.config());
  b.load_json(a.to_json());
  Tensor wa = w, wb = w;
  std::vector<Tensor*> pa{&wa}, pb{&wb};
  const std::vector<Tensor> g{Tensor::vector({-0.3, 0.1})};
  a.step(pa, g);
  b.step(pb, g);
  CHECK(wa == wb);
  CHECK(b.steps() == 2);
}

TEST_CASE("shape mismatch between params and grads") {
  Optimizer opt(Sgd{0.1});
  Tensor w = Tensor::vector({1.0, 2.0});
  std::vector<Tensor*> params{&w};
  CHECK_THROWS(opt.step(params, std::vector<Tensor>{Tensor::vector({1.0})}));
}
