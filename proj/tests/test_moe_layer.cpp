// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "phibal/error.hpp"
#include "phibal/moe_layer.hpp"

using namespace phibal;
namespace ad = phibal::ad;
using V = std::vector<double>;

namespace {

MoeLayerParams with_router(std::size_t experts, std::size_t d, std::size_t dffn, std::size_t k, V router) {
  MoeLayerParams p;
  p.router = Tensor::matrix(experts, d, std::move(router));
  p.top_k = k;
  for (std::size_t e = 0; e < experts; ++e) {
    p.experts.push_back({Tensor::zeros({2 * dffn, d}), Tensor::zeros({d, dffn})});
  }
  return p;
}

Tensor random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::normal_distribution<double> normal;
  V v(r * c);
  for (auto& x : v) x = normal(rng);
  return Tensor::matrix(r, c, v);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("top-2 routing over logits (2, 1, 0)") {
  const auto params = with_router(3, 1, 1, 2, {2, 1, 0});
  const auto r = route(params, Tensor::matrix(1, 1, {1.0}));
  CHECK(r.selections[0] == std::vector<std::size_t>{0, 1});
  const double z = std::exp(2.0) + std::exp(1.0);
  CHECK(r.weights[0][0] == doctest::Approx(std::exp(2.0) / z).epsilon(1e-15));
  CHECK(r.weights[0][1] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-15));
  CHECK(r.weights[0][0] == doctest::Approx(0.731059).epsilon(1e-6));
  CHECK(r.f == V{0.5, 0.5, 0.0});
}

TEST_CASE("ties break toward the lower index") {
  const auto params = with_router(4, 1, 1, 2, {0, 0, 0, 0});
  const auto r = route(params, Tensor::matrix(1, 1, {1.0}));
  CHECK(r.selections[0] == std::vector<std::size_t>{0, 1});
  CHECK(r.weights[0] == V{0.5, 0.5});
  CHECK(select_top_k(V{1, 3, 3, 2}, {}, 3) == std::vector<std::size_t>{1, 2, 3});
}

TEST_CASE("frequencies use the 1/(kT) normalization") {
  const auto params = with_router(2, 1, 1, 1, {1, -1});
  const auto r = route(params, Tensor::matrix(2, 1, {1.0, -1.0}));
  CHECK(r.selections[0] == std::vector<std::size_t>{0});
  CHECK(r.selections[1] == std::vector<std::size_t>{1});
  CHECK(r.f == V{0.5, 0.5});
  CHECK(r.loads(2) == V{1.0, 1.0});
  CHECK(r.frequency_per_token(2) == V{0.5, 0.5});
}

TEST_CASE("k = 1 weight is the pre-top-k probability") {
  const auto params = with_router(3, 1, 1, 1, {2, 1, 0});
  const auto r = route(params, Tensor::matrix(1, 1, {1.0}));
  const double z = std::exp(2.0) + std::exp(1.0) + 1.0;
  CHECK(r.weights[0].size() == 1);
  CHECK(r.weights[0][0] == doctest::Approx(std::exp(2.0) / z).epsilon(1e-15));
}

TEST_CASE("k above E is a configuration error") {
  auto params = with_router(2, 1, 1, 3, {1, 0});
  CHECK_THROWS_AS(params.validate(), ConfigError);
  CHECK_THROWS_AS(route(params, Tensor::matrix(1, 1, {1.0})), ConfigError);
  params.top_k = 0;
  CHECK_THROWS_AS(params.validate(), ConfigError);
}

TEST_CASE("bias steers selection but never the weights") {
  const auto params = with_router(3, 1, 1, 2, {2, 1, 0});
  const auto x = Tensor::matrix(1, 1, {1.0});
  const auto plain = route(params, x);
  const auto biased = route(params, x, V{0, 0, 5});
  CHECK(biased.selections[0] == std::vector<std::size_t>{2, 0});
  CHECK(biased.probs == plain.probs);
  CHECK(biased.p_bar == plain.p_bar);
  // softmax over unbiased logits of the selected pair (0 for expert 2, 2 for expert 0)
  CHECK(biased.weights[0][0] == doctest::Approx(1.0 / (1.0 + std::exp(2.0))).epsilon(1e-15));
  CHECK(biased.weights[0][1] == doctest::Approx(std::exp(2.0) / (1.0 + std::exp(2.0))).epsilon(1e-15));
}

TEST_CASE("routing invariants on random instances") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto params = MoeLayerParams::init(6, 3, 5, 4, rng);
    const auto r = route(params, random_matrix(rng, 16, 5));
    for (std::size_t i = 0; i < r.tokens(); ++i) {
      double row = 0.0;
      for (std::size_t e = 0; e < 6; ++e) row += r.probs.at(i, e);
      CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
      const double w = std::accumulate(r.weights[i].begin(), r.weights[i].end(), 0.0);
      CHECK(w == doctest::Approx(1.0).epsilon(1e-12));
      for (double v : r.weights[i]) CHECK(v >= 0.0);
    }
    CHECK(std::accumulate(r.f.begin(), r.f.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("swiglu expert examples") {
  MoeLayerParams p = with_router(1, 1, 1, 1, {0.0});
  p.experts[0].w1 = Tensor::matrix(2, 1, {1, 1});
  p.experts[0].w2 = Tensor::matrix(1, 1, {1});
  const auto y = expert_forward(p, 0, Tensor::vector({2.0}));
  CHECK(y[0] == doctest::Approx(2.0 * 2.0 * sigmoid(2.0)).epsilon(1e-15));
  CHECK(y[0] == doctest::Approx(3.523188).epsilon(1e-6));

  std::mt19937_64 rng(1);
  auto q = MoeLayerParams::init(2, 1, 4, 3, rng);
  q.experts[1].w1 = Tensor::zeros({6, 4});
  const auto z = expert_forward(q, 1, random_matrix(rng, 3, 4));
  for (double v : z.values()) CHECK(v == 0.0);
}

TEST_CASE("expert gradient matches finite differences") {
  std::mt19937_64 rng(2);
  const Tensor w1 = random_matrix(rng, 6, 4), w2 = random_matrix(rng, 4, 3), u = random_matrix(rng, 2, 4);
  auto loss = [&](const Tensor& a, const Tensor& b) {
    ad::Tape tape;
    const auto y = expert_forward(tape.leaf(a), tape.leaf(b), tape.constant(u));
    return ad::sum(ad::mul(y, y)).value().item();
  };
  ad::Tape tape;
  const auto a = tape.leaf(w1), b = tape.leaf(w2);
  const auto y = expert_forward(a, b, tape.constant(u));
  const auto g = tape.backward(ad::sum(ad::mul(y, y)));
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t i = 0; i < w1.size(); ++i) {
    Tensor up = w1, down = w1;
    up[i] += h;
    down[i] -= h;
    const double fd = (loss(up, w2) - loss(down, w2)) / (2 * h);
    worst = std::max(worst, std::abs(fd - g[a][i]) / std::max({std::abs(fd), std::abs(g[a][i]), 1e-6}));
  }
  for (std::size_t i = 0; i < w2.size(); ++i) {
    Tensor up = w2, down = w2;
    up[i] += h;
    down[i] -= h;
    const double fd = (loss(w1, up) - loss(w1, down)) / (2 * h);
    worst = std::max(worst, std::abs(fd - g[b][i]) / std::max({std::abs(fd), std::abs(g[b][i]), 1e-6}));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("single expert with k = 1 reduces to the expert itself") {
  std::mt19937_64 rng(3);
  const auto p = MoeLayerParams::init(1, 1, 3, 2, rng);
  const Tensor x = random_matrix(rng, 4, 3);
  const auto r = route(p, x);
  const Tensor y = moe_forward(p, x, r);
  const Tensor direct = expert_forward(p, 0, x);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.weights[i][0] == 1.0);
  CHECK(y == direct);
}

TEST_CASE("identical experts give the same output whatever the weights") {
  std::mt19937_64 rng(5);
  auto p = MoeLayerParams::init(3, 2, 3, 4, rng);
  p.experts[1] = p.experts[0];
  p.experts[2] = p.experts[0];
  const Tensor x = random_matrix(rng, 5, 3);
  const Tensor y = moe_forward(p, x, route(p, x));
  const Tensor ref = expert_forward(p, 0, x);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-14));
}

TEST_CASE("sparse evaluation equals masked dense evaluation bit for bit") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t E = 5, T = 12, d = 4;
    const auto p = MoeLayerParams::init(E, 1 + trial % 3, d, 3, rng);
    const Tensor x = random_matrix(rng, T, d);
    const auto r = route(p, x);

    Tensor dense = Tensor::zeros({T, d});
    for (std::size_t e = 0; e < E; ++e) {
      const Tensor out = expert_forward(p, e, x);
      for (std::size_t i = 0; i < T; ++i) {
        double w = 0.0;
        for (std::size_t j = 0; j < r.selections[i].size(); ++j)
          if (r.selections[i][j] == e) w = r.weights[i][j];
        if (w == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) dense.at(i, c) += out.at(i, c) * w;
      }
    }
    CHECK(moe_forward(p, x, r) == dense);

    // The differentiable path agrees with the value path.
    ad::Tape tape;
    const auto vars = bind(tape, p);
    const auto xv = tape.constant(x);
    CHECK(moe_forward(vars, xv, route(vars, xv)).value() == dense);
  }
}

TEST_CASE("permuting experts permutes selections and leaves the output unchanged") {
  std::mt19937_64 rng(7);
  const std::size_t E = 6, d = 4;
  const auto p = MoeLayerParams::init(E, 2, d, 3, rng);
  const std::vector<std::size_t> perm{3, 5, 0, 1, 4, 2};  // new index e holds old perm[e]
  MoeLayerParams q = p;
  for (std::size_t e = 0; e < E; ++e) {
    for (std::size_t c = 0; c < d; ++c) q.router.at(e, c) = p.router.at(perm[e], c);
    q.experts[e] = p.experts[perm[e]];
  }
  const Tensor x = random_matrix(rng, 10, d);
  const auto rp = route(p, x), rq = route(q, x);
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t j = 0; j < 2; ++j) CHECK(perm[rq.selections[i][j]] == rp.selections[i][j]);
  }
  const Tensor yp = moe_forward(p, x, rp), yq = moe_forward(q, x, rq);
  for (std::size_t i = 0; i < yp.size(); ++i) CHECK(yq[i] == doctest::Approx(yp[i]).epsilon(1e-13));
}

TEST_CASE("initialization shapes and determinism") {
  std::mt19937_64 a(9), b(9);
  const auto p = MoeLayerParams::init(4, 2, 6, 5, a);
  const auto q = MoeLayerParams::init(4, 2, 6, 5, b);
  CHECK(p.router == q.router);
  CHECK(p.experts[0].w1.shape() == Shape{10, 6});
  CHECK(p.experts[0].w2.shape() == Shape{6, 5});
  CHECK(p.ffn_dim() == 5);
  CHECK_NOTHROW(p.validate());
}
