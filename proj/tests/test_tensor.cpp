#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "remask/rng.hpp"
#include "remask/tensor.hpp"

using namespace remask;
using remask::testing::fd_check;

namespace {

Tensor<double> random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(s));
  for (auto& v : t.values) v = lo + (hi - lo) * rng.uniform01();
  return t;
}

// Independent triple-loop product, no blocking, no reassociation tricks.
Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor<double> c = Tensor<double>::zeros({m, n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double s = 0;
      for (int64_t l = 0; l < k; ++l) s += a.at(i, l) * b.at(l, j);
      c.at(i, j) = s;
    }
  return c;
}

}  // namespace

TEST_CASE("matmul matches naive triple loop") {
  Rng rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    int64_t m = 1 + rng.uniform_int(0, 7), k = 1 + rng.uniform_int(0, 7), n = 1 + rng.uniform_int(0, 7);
    auto a = random_tensor(rng, {m, k});
    auto b = random_tensor(rng, {k, n});
    auto want = naive_matmul(a, b);

    Tape<double> tape;
    auto got = tape.value(tape.matmul(tape.constant(a), tape.constant(b)));
    REQUIRE(got.shape == want.shape);
    for (int64_t i = 0; i < got.numel(); ++i) CHECK(got.values[i] == doctest::Approx(want.values[i]).epsilon(1e-12));

    // matmul_nt(a, b) == a * b^T
    Tensor<double> bt = Tensor<double>::zeros({n, k});
    for (int64_t i = 0; i < k; ++i)
      for (int64_t j = 0; j < n; ++j) bt.at(j, i) = b.at(i, j);
    Tape<double> tape2;
    auto got2 = tape2.value(tape2.matmul_nt(tape2.constant(a), tape2.constant(bt)));
    REQUIRE(got2.shape == want.shape);
    for (int64_t i = 0; i < got2.numel(); ++i)
      CHECK(got2.values[i] == doctest::Approx(want.values[i]).epsilon(1e-12));
  }
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    int64_t m = 1 + rng.uniform_int(0, 4), c = 2 + rng.uniform_int(0, 10);
    auto x = random_tensor(rng, {m, c}, -5, 5);
    Tape<double> tape;
    auto y = tape.value(tape.softmax_rows(tape.constant(x)));
    auto xs = x;
    double shift = rng.uniform01() * 10 - 5;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < c; ++j) xs.at(i, j) += shift;
    auto ys = tape.value(tape.softmax_rows(tape.constant(xs)));
    for (int64_t i = 0; i < m; ++i) {
      double sum = 0;
      for (int64_t j = 0; j < c; ++j) {
        CHECK(y.at(i, j) > 0);
        CHECK(y.at(i, j) < 1);
        sum += y.at(i, j);
        CHECK(y.at(i, j) == doctest::Approx(ys.at(i, j)).epsilon(1e-9));
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("log_softmax equals log of softmax") {
  Rng rng(8);
  auto x = random_tensor(rng, {6, 13}, -8, 8);
  Tape<double> tape;
  auto id = tape.constant(x);
  auto a = tape.value(tape.log_softmax_rows(id));
  auto b = tape.value(tape.softmax_rows(id));
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.values[i] == doctest::Approx(std::log(b.values[i])).epsilon(1e-9));
}

TEST_CASE("analytic gradient of sum(x*x) is 2x") {
  {
    Tensor<double> x({1}, {3.0});
    Tape<double> t;
    auto xi = t.leaf(&x);
    t.backward(t.masked_sum(t.mul(xi, xi), {1}));
    CHECK(x.grad[0] == 6.0);
  }
  Rng rng(9);
  auto x = random_tensor(rng, {3, 4});
  auto rep = fd_check({&x}, [&](Tape<double>& t) {
    auto xi = t.leaf(&x);
    return t.masked_sum(t.mul(xi, xi), std::vector<uint8_t>(12, 1));
  });
  CHECK(rep.max_rel_err < 1e-8);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad[i] == doctest::Approx(2 * x.values[i]).epsilon(1e-12));
}

TEST_CASE("finite differences back every primitive") {
  Rng rng(12345);
  double worst = 0;

  auto run = [&](std::vector<Tensor<double>*> params, const std::function<NodeId(Tape<double>&)>& build) {
    auto rep = fd_check(std::move(params), build);
    INFO(rep.where);
    CHECK(rep.max_rel_err < 1e-6);
    worst = std::max(worst, rep.max_rel_err);
  };

  for (int trial = 0; trial < 100; ++trial) {
    int64_t m = 2 + rng.uniform_int(0, 3), k = 2 + rng.uniform_int(0, 3), c = 2 + rng.uniform_int(0, 3);
    std::vector<uint8_t> all(m * c, 1);
    std::vector<uint8_t> some(m * c);
    for (auto& f : some) f = rng.bernoulli(0.6);
    some[0] = 1;

    auto a = random_tensor(rng, {m, k});
    auto b = random_tensor(rng, {k, c});
    run({&a, &b}, [&](Tape<double>& t) {
      return t.masked_sum(t.matmul(t.leaf(&a), t.leaf(&b)), all);
    });

    auto bt = random_tensor(rng, {c, k});
    run({&a, &bt}, [&](Tape<double>& t) {
      return t.masked_sum(t.matmul_nt(t.leaf(&a), t.leaf(&bt)), all);
    });

    auto x = random_tensor(rng, {m, c});
    auto y = random_tensor(rng, {m, c});
    run({&x, &y}, [&](Tape<double>& t) {
      return t.masked_sum(t.mul(t.add(t.leaf(&x), t.leaf(&y)), t.leaf(&y)), some);
    });

    auto v = random_tensor(rng, {c});
    run({&x, &v}, [&](Tape<double>& t) {
      return t.masked_sum(t.add_rowvec(t.leaf(&x), t.leaf(&v)), some);
    });

    run({&x}, [&](Tape<double>& t) {
      return t.masked_sum(t.scale(t.softmax_rows(t.leaf(&x)), 1.7), some);
    });

    run({&x}, [&](Tape<double>& t) {
      return t.masked_sum(t.log_softmax_rows(t.leaf(&x)), some);
    });

    auto gain = random_tensor(rng, {c}, 0.5, 1.5);
    auto bias = random_tensor(rng, {c});
    run({&x, &gain, &bias}, [&](Tape<double>& t) {
      return t.masked_sum(t.layer_norm(t.leaf(&x), t.leaf(&gain), t.leaf(&bias)), some);
    });

    run({&x}, [&](Tape<double>& t) { return t.masked_sum(t.gelu(t.leaf(&x)), all); });

    run({&x}, [&](Tape<double>& t) { return t.masked_sum(t.sigmoid(t.leaf(&x)), some); });

    auto pos = random_tensor(rng, {m, c}, 0.2, 3.0);
    run({&pos, &x}, [&](Tape<double>& t) {
      return t.masked_sum(t.log(t.leaf(&pos)), some);
    });

    auto table = random_tensor(rng, {5, c});
    std::vector<int32_t> ids(m + 1);
    for (auto& id : ids) id = static_cast<int32_t>(rng.uniform_int(0, 4));
    ids[1] = ids[0];  // force a repeated row: scatter-add must accumulate
    run({&table}, [&](Tape<double>& t) {
      return t.masked_sum(t.embed_gather(t.leaf(&table), ids), std::vector<uint8_t>((m + 1) * c, 1));
    });

    std::vector<int32_t> cols(m);
    for (auto& id : cols) id = static_cast<int32_t>(rng.uniform_int(0, c - 1));
    run({&x}, [&](Tape<double>& t) {
      return t.masked_sum(t.pick_per_row(t.leaf(&x), cols), std::vector<uint8_t>(m, 1));
    });

    std::vector<uint8_t> labels(m * c), include(m * c);
    for (auto& l : labels) l = rng.bernoulli(0.5);
    for (auto& f : include) f = rng.bernoulli(0.7);
    include[0] = 1;
    run({&x}, [&](Tape<double>& t) {
      return t.bce_mean(t.sigmoid(t.leaf(&x)), labels, include);
    });

    if (m >= 3) {
      run({&x}, [&](Tape<double>& t) {
        return t.masked_sum(t.slice_rows(t.leaf(&x), 1, m - 1), std::vector<uint8_t>((m - 2) * c, 1));
      });
    }
    run({&x}, [&](Tape<double>& t) {
      return t.masked_sum(t.slice_cols(t.leaf(&x), 1, c), std::vector<uint8_t>(m * (c - 1), 1));
    });

    run({&x, &y}, [&](Tape<double>& t) {
      NodeId parts[] = {t.leaf(&x), t.leaf(&y), t.leaf(&x)};
      return t.masked_sum(t.concat_cols(parts), std::vector<uint8_t>(m * 3 * c, 1));
    });
  }
  MESSAGE("worst relative error across primitives: ", worst);
}

TEST_CASE("gradient accumulates when a leaf feeds the graph twice") {
  Rng rng(33);
  auto x = random_tensor(rng, {2, 2});
  auto rep = fd_check({&x}, [&](Tape<double>& t) {
    auto xi = t.leaf(&x);
    return t.masked_sum(t.add(t.mul(xi, xi), t.scale(xi, 3.0)), std::vector<uint8_t>(4, 1));
  });
  CHECK(rep.max_rel_err < 1e-8);
  for (int64_t i = 0; i < 4; ++i)
    CHECK(x.grad[i] == doctest::Approx(2 * x.values[i] + 3).epsilon(1e-12));
}

TEST_CASE("backward ignores branches not reaching the root") {
  Rng rng(34);
  auto x = random_tensor(rng, {2, 3});
  auto y = random_tensor(rng, {2, 3});
  x.zero_grad();
  y.zero_grad();
  Tape<double> tape;
  auto xi = tape.leaf(&x);
  auto yi = tape.leaf(&y);
  tape.mul(yi, yi);  // dead branch
  auto root = tape.masked_sum(xi, std::vector<uint8_t>(6, 1));
  tape.backward(root);
  for (auto g : y.grad) CHECK(g == 0.0);
  for (auto g : x.grad) CHECK(g == 1.0);
}

TEST_CASE("bce_mean matches hand-computed cross entropy") {
  Tape<double> tape;
  Tensor<double> s({4}, {0.9, 0.2, 0.5, 0.99});
  std::vector<uint8_t> labels = {1, 0, 1, 0};
  std::vector<uint8_t> include = {1, 1, 1, 0};
  auto id = tape.bce_mean(tape.constant(s), labels, include);
  double want = -(std::log(0.9) + std::log(0.8) + std::log(0.5)) / 3.0;
  CHECK(tape.value(id).values[0] == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("masked_sum honours its flags") {
  Tape<double> tape;
  Tensor<double> v({5}, {1, 2, 3, 4, 5});
  auto id = tape.masked_sum(tape.constant(v), {1, 0, 1, 0, 1});
  CHECK(tape.value(id).values[0] == 9.0);
}

TEST_CASE("shape and argument validation") {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>::zeros({2, 3}));
  auto b = tape.constant(Tensor<double>::zeros({2, 3}));
  CHECK_THROWS_AS(tape.matmul(a, b), std::invalid_argument);
  CHECK_THROWS_AS(tape.add(a, tape.constant(Tensor<double>::zeros({3, 2}))), std::invalid_argument);
  CHECK_THROWS_AS(tape.backward(a), std::invalid_argument);  // non-scalar root
  CHECK_THROWS_AS(tape.embed_gather(a, {0, 5}), std::invalid_argument);
  CHECK_THROWS_AS(tape.slice_rows(a, 0, 4), std::invalid_argument);
  CHECK_THROWS_AS(tape.masked_sum(a, {1, 0}), std::invalid_argument);
}

TEST_CASE("non-finite outputs are rejected when checking is on") {
  Tape<double> tape;
  auto z = tape.constant(Tensor<double>({2}, {0.0, 1.0}));
  CHECK_THROWS_AS(tape.log(z), NonFiniteError);

  Tape<double> off;
  off.check_finite = false;
  auto z2 = off.constant(Tensor<double>({2}, {0.0, 1.0}));
  CHECK_NOTHROW(off.log(z2));
}

TEST_CASE("identical tapes produce bit-identical values and gradients") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    auto a = random_tensor(rng, {4, 6});
    auto b = random_tensor(rng, {6, 5});
    auto g = random_tensor(rng, {5}, 0.5, 1.5);
    auto bias = random_tensor(rng, {5});
    Tape<double> t;
    auto h = t.layer_norm(t.matmul(t.leaf(&a), t.leaf(&b)), t.leaf(&g), t.leaf(&bias));
    auto root = t.masked_sum(t.gelu(h), std::vector<uint8_t>(20, 1));
    t.backward(root);
    std::string blob;
    auto append = [&](const std::vector<double>& v) {
      blob.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
    };
    append(t.value(root).values);
    append(a.grad);
    append(b.grad);
    return fnv1a64(blob.data(), blob.size());
  };
  CHECK(run(42) == run(42));
  CHECK(run(42) != run(43));
}

TEST_CASE("float instantiation works end to end") {
  Tensor<float> x({2, 2}, {1.f, 2.f, 3.f, 4.f});
  Tape<float> t;
  auto xi = t.leaf(&x);
  auto root = t.masked_sum(t.mul(xi, xi), std::vector<uint8_t>(4, 1));
  CHECK(t.value(root).values[0] == doctest::Approx(30.f));
  t.backward(root);
  CHECK(x.grad[3] == doctest::Approx(8.f));
}
