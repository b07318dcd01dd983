#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "edgs/encoding.hpp"
#include "edgs/gradcheck.hpp"
#include "edgs/graph.hpp"

using namespace edgs;
using namespace edgs::ad;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double lo = -1.0,
                     double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

double check_unary(const std::function<Value(Graph&, Value)>& op, const Tensor& x) {
  auto f = [&](Graph& g, const std::vector<Value>& p) { return g.sum(op(g, p[0])); };
  return finite_diff_check(f, {x}).max_rel_err;
}

}  // namespace

TEST_CASE("elementwise forward values") {
  Graph g;
  Value r = g.relu(g.leaf(Tensor::row({-1.0, 0.0, 2.0})));
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[1] == 0.0);
  CHECK(r.data()[2] == 2.0);

  Value s = g.sigmoid(g.leaf(Tensor::scalar(0.0)));
  CHECK(s.data()[0] == doctest::Approx(0.5).epsilon(1e-12));

  Value e = g.exp(g.leaf(Tensor::row({0.0, 1.0})));
  CHECK(e.data()[0] == doctest::Approx(1.0));
  CHECK(e.data()[1] == doctest::Approx(std::exp(1.0)));

  Value q = g.sqrt(g.leaf(Tensor::row({4.0, 9.0})));
  CHECK(q.data()[0] == doctest::Approx(2.0));
  CHECK(q.data()[1] == doctest::Approx(3.0));
}

TEST_CASE("sigmoid derivative at zero is 0.25") {
  Graph g;
  Value x = g.leaf(Tensor::scalar(0.0));
  Value y = g.sigmoid(x);
  g.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("matmul against identity and known product") {
  Graph g;
  Value a = g.leaf(Tensor({2, 2}, {1.0, 2.0, 3.0, 4.0}));
  Value eye = g.constant(Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}));
  Value p = g.matmul(a, eye);
  for (std::size_t i = 0; i < 4; ++i) CHECK(p.data()[i] == a.data()[i]);

  Value b = g.leaf(Tensor({2, 3}, {1.0, 0.0, 2.0, -1.0, 3.0, 1.0}));
  Value c = g.matmul(a, b);  // [[1,2],[3,4]] x [[1,0,2],[-1,3,1]]
  const double expect[6] = {-1.0, 6.0, 4.0, -1.0, 12.0, 10.0};
  for (std::size_t i = 0; i < 6; ++i) CHECK(c.data()[i] == doctest::Approx(expect[i]));
}

TEST_CASE("sum backward fills ones, squared norm doubles input") {
  Graph g;
  Value x = g.leaf(Tensor::row({1.0, -2.0, 5.0}));
  g.backward(g.sum(x));
  for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);

  Graph g2;
  Value y = g2.leaf(Tensor::row({2.0, 0.0}));
  g2.backward(g2.squared_norm(y));
  CHECK(y.grad()[0] == 4.0);
  CHECK(y.grad()[1] == 0.0);
}

TEST_CASE("fan-out gradients accumulate") {
  // f(x) = x*x + x  =>  df/dx = 2x + 1
  Graph g;
  Value x = g.leaf(Tensor::scalar(3.0));
  Value f = g.add(g.mul(x, x), x);
  g.backward(f);
  CHECK(x.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("exp clamps above +40 with zero gradient there") {
  Graph g;
  Value x = g.leaf(Tensor::row({50.0, 39.0}));
  Value y = g.exp(x);
  CHECK(y.data()[0] == std::exp(40.0));
  CHECK(y.data()[1] == doctest::Approx(std::exp(39.0)));
  g.backward(g.sum(y));
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == doctest::Approx(std::exp(39.0)));
}

TEST_CASE("finite differences agree for every op") {
  GradCheckOptions opt;
  SUBCASE("add") {
    auto f = [](Graph& g, const std::vector<Value>& p) { return g.sum(g.add(p[0], p[1])); };
    CHECK(finite_diff_check(f, {random_tensor({3, 4}, 1), random_tensor({3, 4}, 2)}, opt)
              .max_rel_err <= 1e-6);
  }
  SUBCASE("mul") {
    auto f = [](Graph& g, const std::vector<Value>& p) { return g.sum(g.mul(p[0], p[1])); };
    CHECK(finite_diff_check(f, {random_tensor({3, 4}, 3), random_tensor({3, 4}, 4)}, opt)
              .max_rel_err <= 1e-6);
  }
  SUBCASE("div") {
    auto f = [](Graph& g, const std::vector<Value>& p) { return g.sum(g.div(p[0], p[1])); };
    CHECK(finite_diff_check(f, {random_tensor({3, 4}, 5), random_tensor({3, 4}, 6, 0.5, 2.0)},
                            opt)
              .max_rel_err <= 1e-6);
  }
  SUBCASE("matmul") {
    auto f = [](Graph& g, const std::vector<Value>& p) {
      return g.sum(g.matmul(p[0], p[1]));
    };
    CHECK(finite_diff_check(f, {random_tensor({3, 5}, 7), random_tensor({5, 2}, 8)}, opt)
              .max_rel_err <= 1e-6);
  }
  SUBCASE("concat") {
    auto f = [](Graph& g, const std::vector<Value>& p) {
      return g.squared_norm(g.concat(p[0], p[1]));
    };
    CHECK(finite_diff_check(f, {random_tensor({2, 3}, 9), random_tensor({2, 4}, 10)}, opt)
              .max_rel_err <= 1e-6);
  }
  SUBCASE("relu") {
    // Inputs held away from the kink at zero.
    Tensor x = random_tensor({4, 4}, 11);
    for (std::size_t i = 0; i < x.numel(); ++i)
      x[i] += (x[i] >= 0.0 ? 0.25 : -0.25);
    CHECK(check_unary([](Graph& g, Value v) { return g.relu(v); }, x) <= 1e-6);
  }
  SUBCASE("sigmoid") {
    CHECK(check_unary([](Graph& g, Value v) { return g.sigmoid(v); },
                      random_tensor({4, 4}, 12, -3.0, 3.0)) <= 1e-6);
  }
  SUBCASE("exp") {
    CHECK(check_unary([](Graph& g, Value v) { return g.exp(v); },
                      random_tensor({4, 4}, 13, -2.0, 2.0)) <= 1e-6);
  }
  SUBCASE("sqrt") {
    CHECK(check_unary([](Graph& g, Value v) { return g.sqrt(v); },
                      random_tensor({4, 4}, 14, 0.5, 4.0)) <= 1e-6);
  }
  SUBCASE("negate") {
    CHECK(check_unary([](Graph& g, Value v) { return g.negate(v); },
                      random_tensor({4, 4}, 15)) <= 1e-6);
  }
  SUBCASE("abs") {
    Tensor x = random_tensor({4, 4}, 16);
    for (std::size_t i = 0; i < x.numel(); ++i)
      x[i] += (x[i] >= 0.0 ? 0.25 : -0.25);
    CHECK(check_unary([](Graph& g, Value v) { return g.abs(v); }, x) <= 1e-6);
  }
  SUBCASE("scale") {
    CHECK(check_unary([](Graph& g, Value v) { return g.scale(v, -2.5); },
                      random_tensor({4, 4}, 17)) <= 1e-6);
  }
  SUBCASE("mean") {
    auto f = [](Graph& g, const std::vector<Value>& p) { return g.mean(p[0]); };
    CHECK(finite_diff_check(f, {random_tensor({3, 7}, 18)}, opt).max_rel_err <= 1e-6);
  }
  SUBCASE("squared_norm") {
    auto f = [](Graph& g, const std::vector<Value>& p) { return g.squared_norm(p[0]); };
    CHECK(finite_diff_check(f, {random_tensor({3, 7}, 19)}, opt).max_rel_err <= 1e-6);
  }
  SUBCASE("sum_last") {
    auto f = [](Graph& g, const std::vector<Value>& p) {
      return g.squared_norm(g.sum_last(p[0]));
    };
    CHECK(finite_diff_check(f, {random_tensor({3, 5}, 20)}, opt).max_rel_err <= 1e-6);
  }
  SUBCASE("broadcast") {
    auto f = [](Graph& g, const std::vector<Value>& p) {
      return g.squared_norm(g.mul(g.broadcast(p[0], {4, 3}), p[1]));
    };
    CHECK(finite_diff_check(f, {random_tensor({1, 3}, 21), random_tensor({4, 3}, 22)}, opt)
              .max_rel_err <= 1e-6);
  }
  SUBCASE("reshape") {
    auto f = [](Graph& g, const std::vector<Value>& p) {
      return g.squared_norm(g.reshape(p[0], {6, 2}));
    };
    CHECK(finite_diff_check(f, {random_tensor({3, 4}, 23)}, opt).max_rel_err <= 1e-6);
  }
  SUBCASE("normalize_last") {
    auto f = [](Graph& g, const std::vector<Value>& p) {
      return g.squared_norm(g.mul(g.normalize_last(p[0]), p[1]));
    };
    CHECK(finite_diff_check(f, {random_tensor({3, 4}, 24, 0.3, 1.0), random_tensor({3, 4}, 25)},
                            opt)
              .max_rel_err <= 1e-6);
  }
}

TEST_CASE("broadcast expands rows and scalars") {
  Graph g;
  Value v = g.leaf(Tensor::row({1.0, 2.0, 3.0}));
  Value b = g.broadcast(v, {2, 3});
  CHECK(b.data().shape() == std::vector<std::size_t>{2, 3});
  CHECK(b.data().at(0, 2) == 3.0);
  CHECK(b.data().at(1, 0) == 1.0);

  Value s = g.broadcast(g.leaf(Tensor::scalar(7.0)), {2, 2});
  for (std::size_t i = 0; i < 4; ++i) CHECK(s.data()[i] == 7.0);

  g.backward(g.sum(b));
  for (std::size_t i = 0; i < 3; ++i) CHECK(v.grad()[i] == 2.0);
}

TEST_CASE("normalize_last produces unit rows") {
  Graph g;
  Value q = g.normalize_last(g.leaf(Tensor({2, 4}, {2.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0})));
  CHECK(q.data().at(0, 0) == doctest::Approx(1.0));
  CHECK(q.data().at(1, 0) == doctest::Approx(0.5));
  double n = 0.0;
  for (std::size_t i = 0; i < 4; ++i) n += q.data().at(1, i) * q.data().at(1, i);
  CHECK(n == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("constants do not receive gradients") {
  Graph g;
  Value x = g.leaf(Tensor::scalar(2.0));
  Value c = g.constant(Tensor::scalar(5.0));
  Value y = g.mul(x, c);
  g.backward(y);
  CHECK(x.grad()[0] == 5.0);
  CHECK_FALSE(g.requires_grad(c.id()));
}

TEST_CASE("shape violations throw") {
  Graph g;
  Value a = g.leaf(Tensor({2, 3}));
  Value b = g.leaf(Tensor({3, 2}));
  CHECK_THROWS_AS(g.add(a, b), ShapeError);
  CHECK_THROWS_AS(g.matmul(a, a), ShapeError);
  CHECK_THROWS_AS(g.broadcast(a, {2, 4}), ShapeError);
  CHECK_THROWS_AS(g.reshape(a, {7}), ShapeError);
  CHECK_THROWS_AS(g.backward(a), ShapeError);
}

TEST_CASE("identical graphs give bitwise identical results") {
  auto run = [](std::vector<double>* grads) {
    Graph g;
    Value x = g.leaf(random_tensor({4, 6}, 99));
    Value w = g.leaf(random_tensor({6, 3}, 100));
    Value y = g.mean(g.sigmoid(g.matmul(x, w)));
    g.backward(y);
    if (grads)
      for (std::size_t i = 0; i < w.grad().numel(); ++i) grads->push_back(w.grad()[i]);
    return y.data()[0];
  };
  std::vector<double> g1, g2;
  const double a = run(&g1);
  const double b = run(&g2);
  CHECK(a == b);
  CHECK(g1 == g2);
}

TEST_CASE("custom op backward hook receives and fills gradients") {
  // y = x^3 via a custom node.
  Graph g;
  Value x = g.leaf(Tensor::row({1.0, 2.0, -1.5}));
  const Tensor& xd = x.data();
  Tensor out = xd;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xd[i] * xd[i] * xd[i];
  Value y = g.custom("cube", {x}, std::move(out),
                     [](const Tensor& og, std::span<const Tensor* const> in,
                        std::span<Tensor* const> grads) {
                       if (!grads[0]) return;
                       for (std::size_t i = 0; i < og.numel(); ++i)
                         (*grads[0])[i] += og[i] * 3.0 * (*in[0])[i] * (*in[0])[i];
                     });
  g.backward(g.sum(y));
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(x.grad()[1] == doctest::Approx(12.0));
  CHECK(x.grad()[2] == doctest::Approx(6.75));
}

TEST_CASE("frequency encoding matches hand-computed values") {
  auto e0 = positional_encoding({0.0}, 2);
  REQUIRE(e0.size() == 4);
  CHECK(e0[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(e0[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(e0[2] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(e0[3] == doctest::Approx(1.0).epsilon(1e-12));

  auto eh = positional_encoding({0.5}, 1);
  REQUIRE(eh.size() == 2);
  CHECK(eh[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(eh[1]) < 1e-12);

  // Coordinate-major layout: all octaves of u0 precede u1.
  auto e2 = positional_encoding({0.0, 0.5}, 2);
  REQUIRE(e2.size() == 8);
  CHECK(e2[1] == doctest::Approx(1.0));                // cos(pi*0)
  CHECK(e2[4] == doctest::Approx(1.0));                // sin(pi*0.5)
  CHECK(e2[6] == doctest::Approx(0.0).epsilon(1e-9));  // sin(2pi*0.5)
  CHECK(e2[7] == doctest::Approx(-1.0));               // cos(2pi*0.5)
}

TEST_CASE("gradcheck coordinate sampling probes a subset deterministically") {
  auto f = [](Graph& g, const std::vector<Value>& p) { return g.squared_norm(p[0]); };
  GradCheckOptions opt;
  opt.max_coords_per_group = 5;
  auto r1 = finite_diff_check(f, {random_tensor({10, 10}, 31)}, opt);
  auto r2 = finite_diff_check(f, {random_tensor({10, 10}, 31)}, opt);
  CHECK(r1.coords_checked == 5);
  CHECK(r1.max_rel_err <= 1e-6);
  CHECK(r1.worst_coord == r2.worst_coord);
}
