#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "grad_check.hpp"
#include "mneme/rng.hpp"
#include "mneme/tensor.hpp"

using mneme::Reduction;
using mneme::Rng;
using mneme::Shape;
using Tape = mneme::TapeT<double>;
using Tensor = mneme::TensorT<double>;
using gradcheck::randn_leaf;

namespace {

Tensor leaf_from(Tape& t, const Shape& s, std::initializer_list<double> vals,
                 bool rg = true) {
  Eigen::ArrayXd a(static_cast<long>(vals.size()));
  long i = 0;
  for (double v : vals) a[i++] = v;
  return t.leaf(s, a, rg);
}

void expect_grad_ok(const gradcheck::Report& r, double tol = 1e-4) {
  INFO("worst: " << r.where << " rel=" << r.max_rel << " over " << r.checked
                 << " elems");
  CHECK(r.checked > 0);
  CHECK(r.max_rel < tol);
}

}  // namespace

TEST_CASE("softmax hand values and stability") {
  Tape t;
  auto x = leaf_from(t, {1, 2}, {0.0, 0.0});
  auto y = softmax(x, 1);
  CHECK(y.value()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y.value()[1] == doctest::Approx(0.5).epsilon(1e-12));

  auto big = leaf_from(t, {1, 2}, {1000.0, 0.0});
  auto yb = softmax(big, 1);
  CHECK(std::isfinite(yb.value()[0]));
  CHECK(yb.value()[0] == doctest::Approx(1.0));
  CHECK(yb.value().sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("sigmoid hand values and stability") {
  Tape t;
  auto x = leaf_from(t, {3}, {0.0, 1000.0, -1000.0});
  auto y = sigmoid(x);
  CHECK(y.value()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y.value()[1] == doctest::Approx(1.0));
  CHECK(y.value()[2] == doctest::Approx(0.0));
  CHECK(y.value().isFinite().all());
}

TEST_CASE("layer_norm of constant row reduces to beta") {
  Tape t;
  auto x = leaf_from(t, {2, 3}, {4.0, 4.0, 4.0, -7.5, -7.5, -7.5});
  auto gamma = leaf_from(t, {3}, {2.0, 3.0, 4.0});
  auto beta = leaf_from(t, {3}, {0.25, -0.5, 1.0});
  auto y = layer_norm(x, gamma, beta);
  for (long i = 0; i < 2; ++i)
    for (long j = 0; j < 3; ++j)
      CHECK(y.value()[i * 3 + j] == doctest::Approx(beta.value()[j]).epsilon(1e-9));
}

TEST_CASE("max ties route gradient to the lowest index") {
  Tape t;
  auto x = leaf_from(t, {1, 3}, {2.0, 2.0, 1.0});
  auto m = max_over_axis(x, 1);
  auto loss = sum_all(m);
  t.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(1.0));
  CHECK(x.grad()[1] == doctest::Approx(0.0));
  CHECK(x.grad()[2] == doctest::Approx(0.0));

  auto a = leaf_from(t, {2}, {3.0, 3.0});
  auto b = leaf_from(t, {2}, {3.0, 5.0});
  auto mn = minimum(a, b);
  auto l2 = sum_all(mn);
  t.backward(l2);
  CHECK(a.grad()[0] == doctest::Approx(1.0));  // tie goes to first arg
  CHECK(b.grad()[0] == doctest::Approx(0.0));
  CHECK(a.grad()[1] == doctest::Approx(1.0));
  CHECK(b.grad()[1] == doctest::Approx(0.0));
}

TEST_CASE("cross entropy of uniform logits equals log vocab") {
  Tape t;
  auto logits = leaf_from(t, {2, 4}, {1.0, 1.0, 1.0, 1.0, -3.0, -3.0, -3.0, -3.0});
  auto nll = cross_entropy_nll(logits, {0, 3}, Reduction::Mean);
  CHECK(nll.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy matches a log-sum-exp oracle") {
  Tape t;
  Rng rng(42);
  auto logits = randn_leaf(t, {5, 7}, rng, 3.0);
  std::vector<int> targets{0, 6, 3, 2, 5};
  auto nll = cross_entropy_nll(logits, targets, Reduction::Sum);
  double expect = 0.0;
  for (long i = 0; i < 5; ++i) {
    double lse = 0.0;
    for (long j = 0; j < 7; ++j) lse += std::exp(logits.value()[i * 7 + j]);
    expect += std::log(lse) - logits.value()[i * 7 + targets[static_cast<size_t>(i)]];
  }
  CHECK(nll.item() == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("matmul against identity and a fixed product") {
  Tape t;
  auto a = leaf_from(t, {2, 2}, {1.0, 2.0, 3.0, 4.0});
  auto id = leaf_from(t, {2, 2}, {1.0, 0.0, 0.0, 1.0}, false);
  auto p = matmul(a, id);
  for (long i = 0; i < 4; ++i) CHECK(p.value()[i] == a.value()[i]);

  auto b = leaf_from(t, {2, 2}, {5.0, 6.0, 7.0, 8.0});
  auto c = matmul(a, b);
  CHECK(c.value()[0] == doctest::Approx(19.0));
  CHECK(c.value()[1] == doctest::Approx(22.0));
  CHECK(c.value()[2] == doctest::Approx(43.0));
  CHECK(c.value()[3] == doctest::Approx(50.0));
}

TEST_CASE("backward is linear and accumulates across calls") {
  Tape t;
  Rng rng(7);
  auto x = randn_leaf(t, {3, 3}, rng);
  const size_t mark = t.mark();

  auto f = [&] { return sum_all(mul(x, x)); };
  auto l1 = f();
  t.backward(l1);
  Eigen::ArrayXd g1 = x.grad();
  t.zero_grad();
  t.rewind(mark);

  auto l2 = scale(f(), 2.0);
  t.backward(l2);
  Eigen::ArrayXd g2 = x.grad();
  for (long i = 0; i < g1.size(); ++i)
    CHECK(g2[i] == doctest::Approx(2.0 * g1[i]).epsilon(1e-12));
  t.rewind(mark);

  // second backward on a fresh graph adds into existing leaf grads
  auto l3 = f();
  t.backward(l3);
  Eigen::ArrayXd g3 = x.grad();
  for (long i = 0; i < g1.size(); ++i)
    CHECK(g3[i] == doctest::Approx(3.0 * g1[i]).epsilon(1e-12));
}

TEST_CASE("finite-difference: elementwise ops") {
  Tape t;
  Rng rng(11);
  auto a = randn_leaf(t, {2, 3}, rng);
  auto b = randn_leaf(t, {2, 3}, rng);
  expect_grad_ok(gradcheck::check(t, {a, b}, [&] {
    auto s = add(mul(a, b), sub(a, b));
    return sum_all(mul(s, s));
  }));
  expect_grad_ok(gradcheck::check(t, {a}, [&] {
    return sum_all(gelu(scale(sigmoid(a), 3.0)));
  }));
}

TEST_CASE("finite-difference: minimum/maximum off ties") {
  Tape t;
  auto a = leaf_from(t, {4}, {1.0, -2.0, 3.5, 0.25});
  auto b = leaf_from(t, {4}, {0.5, 1.0, -1.0, 2.0});
  expect_grad_ok(gradcheck::check(t, {a, b}, [&] {
    auto lo = minimum(a, b);
    auto hi = maximum(a, b);
    return sum_all(add(mul(lo, lo), mul(hi, hi)));
  }));
}

TEST_CASE("finite-difference: matmul, transpose, reshape") {
  Tape t;
  Rng rng(13);
  auto a = randn_leaf(t, {3, 4}, rng);
  auto b = randn_leaf(t, {4, 2}, rng);
  expect_grad_ok(gradcheck::check(t, {a, b}, [&] {
    auto c = matmul(a, b);
    auto d = matmul(transpose(c), reshape(a, {3, 4}));
    return mean_all(mul(d, d));
  }));
}

TEST_CASE("finite-difference: row broadcast helpers") {
  Tape t;
  Rng rng(17);
  auto x = randn_leaf(t, {3, 4}, rng);
  auto bias = randn_leaf(t, {4}, rng);
  auto sc = randn_leaf(t, {3}, rng);
  expect_grad_ok(gradcheck::check(t, {x, bias, sc}, [&] {
    return sum_all(mul(scale_rows(add_rowvec(x, bias), sc),
                       scale_rows(x, sc)));
  }));
}

TEST_CASE("finite-difference: gather with repeated rows") {
  Tape t;
  Rng rng(19);
  auto m = randn_leaf(t, {4, 3}, rng);
  expect_grad_ok(gradcheck::check(t, {m}, [&] {
    auto g = gather_rows(m, {0, 2, 2, 3, 0});
    return sum_all(mul(g, g));
  }));
}

TEST_CASE("finite-difference: concat and slice on both axes") {
  Tape t;
  Rng rng(23);
  auto a = randn_leaf(t, {2, 3}, rng);
  auto b = randn_leaf(t, {2, 3}, rng);
  auto c = randn_leaf(t, {2, 3}, rng);
  expect_grad_ok(gradcheck::check(t, {a, b, c}, [&] {
    auto rows = mneme::concat_many<double>({a, b, c}, 0);  // 6x3
    auto cols = mneme::concat_many<double>({a, b}, 1);     // 2x6
    auto s1 = slice(rows, 0, 1, 5);
    auto s2 = slice(cols, 1, 2, 5);
    return add(sum_all(mul(s1, s1)), sum_all(mul(s2, s2)));
  }));
}

TEST_CASE("finite-difference: reductions over a middle axis") {
  Tape t;
  Rng rng(29);
  auto x = randn_leaf(t, {2, 3, 4}, rng);
  expect_grad_ok(gradcheck::check(t, {x}, [&] {
    auto s = sum_over_axis(x, 1);
    auto m = mean_over_axis(x, 1);
    return add(sum_all(mul(s, s)), mean_all(mul(m, m)));
  }));
}

TEST_CASE("finite-difference: max over each axis with distinct values") {
  Tape t;
  Eigen::ArrayXd vals(24);
  for (long i = 0; i < 24; ++i) vals[i] = 0.37 * static_cast<double>((i * 7) % 24) - 2.0;
  auto x = t.leaf({2, 3, 4}, vals, true);
  for (int axis : {0, 1, 2}) {
    expect_grad_ok(gradcheck::check(t, {x}, [&, axis] {
      auto m = max_over_axis(x, axis);
      return sum_all(mul(m, m));
    }));
  }
}

TEST_CASE("finite-difference: softmax along each axis of a 3d block") {
  Tape t;
  Rng rng(31);
  auto x = randn_leaf(t, {2, 3, 4}, rng);
  auto w = randn_leaf(t, {2, 3, 4}, rng, 1.0, false);
  for (int axis : {0, 1, 2}) {
    expect_grad_ok(gradcheck::check(t, {x}, [&, axis] {
      return sum_all(mul(softmax(x, axis), w));
    }));
  }
}

TEST_CASE("finite-difference: layer_norm wrt input and affine params") {
  Tape t;
  Rng rng(37);
  auto x = randn_leaf(t, {3, 5}, rng);
  auto gamma = randn_leaf(t, {5}, rng);
  auto beta = randn_leaf(t, {5}, rng);
  expect_grad_ok(gradcheck::check(t, {x, gamma, beta}, [&] {
    auto y = layer_norm(x, gamma, beta);
    return sum_all(mul(y, y));
  }));
}

TEST_CASE("finite-difference: cross entropy, both reductions") {
  Tape t;
  Rng rng(41);
  auto logits = randn_leaf(t, {4, 6}, rng, 2.0);
  std::vector<int> targets{1, 0, 5, 3};
  expect_grad_ok(gradcheck::check(t, {logits}, [&] {
    return cross_entropy_nll(logits, targets, Reduction::Mean);
  }));
  expect_grad_ok(gradcheck::check(t, {logits}, [&] {
    return cross_entropy_nll(logits, targets, Reduction::Sum);
  }));
}

TEST_CASE("finite-difference: sparse KL through softmax rows") {
  Tape t;
  Rng rng(43);
  auto x = randn_leaf(t, {2, 3, 4}, rng);  // heads x tokens x slots
  std::vector<double> q = {1.0, 0.0, 0.0, 0.0,
                           0.25, 0.25, 0.25, 0.25,
                           0.0, 0.5, 0.5, 0.0};
  expect_grad_ok(gradcheck::check(t, {x}, [&] {
    auto a = softmax(x, 2);
    return mneme::kl_vs_sparse_rows(a, q, 3);
  }));
}

TEST_CASE("finite-difference: relative position bias") {
  Tape t;
  Rng rng(47);
  auto scores = randn_leaf(t, {3, 5}, rng);
  auto bias = randn_leaf(t, {4}, rng);
  expect_grad_ok(gradcheck::check(t, {scores, bias}, [&] {
    auto y = add_rel_bias(scores, bias, 2);
    return sum_all(mul(y, y));
  }));
}

TEST_CASE("kl hand values") {
  Tape t;
  // identical distributions: zero
  auto a = leaf_from(t, {1, 4}, {0.25, 0.25, 0.25, 0.25});
  std::vector<double> q = {0.25, 0.25, 0.25, 0.25};
  CHECK(mneme::kl_vs_sparse_rows(a, q, 1).item() == doctest::Approx(0.0).epsilon(1e-15));
  // one-hot target vs uniform attention: log Z
  auto u = leaf_from(t, {1, 4}, {0.25, 0.25, 0.25, 0.25});
  std::vector<double> onehot = {0.0, 0.0, 1.0, 0.0};
  CHECK(mneme::kl_vs_sparse_rows(u, onehot, 1).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("detach blocks gradient flow") {
  Tape t;
  auto x = leaf_from(t, {2}, {1.5, -0.5});
  auto d = detach(x);
  CHECK_FALSE(d.requires_grad());
  auto loss = sum_all(mul(d, d));
  CHECK_FALSE(loss.requires_grad());
}

TEST_CASE("grad_enabled=false records no backward graph") {
  Tape t;
  auto x = leaf_from(t, {2}, {1.0, 2.0});
  t.grad_enabled = false;
  auto y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
  t.grad_enabled = true;
}

TEST_CASE("rewind restores tape size; leaves persist") {
  Tape t;
  auto x = leaf_from(t, {2}, {1.0, 2.0});
  const size_t m = t.mark();
  auto y = mul(x, x);
  auto z = sum_all(y);
  (void)z;
  CHECK(t.size() == 3);
  t.rewind(m);
  CHECK(t.size() == 1);
  CHECK(x.value()[1] == 2.0);
}

TEST_CASE("shape violations throw shape_error") {
  Tape t;
  auto a = leaf_from(t, {2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = leaf_from(t, {3, 2}, {1, 2, 3, 4, 5, 6});
  CHECK_THROWS_AS((void)add(a, b), mneme::shape_error);
  CHECK_THROWS_AS((void)matmul(a, a), mneme::shape_error);
  CHECK_THROWS_AS((void)slice(a, 1, 2, 2), mneme::shape_error);
  CHECK_THROWS_AS((void)cross_entropy_nll(a, {0}), mneme::shape_error);
  CHECK_THROWS_AS((void)cross_entropy_nll(a, {0, 9}), mneme::input_error);
}

TEST_CASE("non-finite forward values raise numeric_error") {
  Tape t;
  auto big = leaf_from(t, {1}, {1e308});
  CHECK_THROWS_AS((void)mul(big, big), mneme::numeric_error);
}

TEST_CASE("float tape runs forward and backward") {
  mneme::TapeT<float> t;
  Eigen::ArrayXf a(4);
  a << 1.f, 2.f, 3.f, 4.f;
  auto x = t.leaf({2, 2}, a, true);
  auto y = matmul(x, x);
  auto l = sum_all(sigmoid(y));
  t.backward(l);
  CHECK(x.grad().size() == 4);
  CHECK(x.grad().isFinite().all());
}
