#include "doctest.h"

#include "ctxgnn/numerics.hpp"

#include <cmath>
#include <random>

using namespace ctxgnn;

namespace {

Matrix random_matrix(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

Matrix triple_loop(const Matrix& a, const Matrix& b) {
  Matrix out = Matrix::Zero(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < b.cols(); ++j)
      for (Index k = 0; k < a.cols(); ++k) out(i, j) += a(i, k) * b(k, j);
  return out;
}

template <typename F>
GradCheckReport check(F&& f, std::initializer_list<std::pair<const char*, Param*>> ps, double tol = 1e-6) {
  std::vector<NamedParam<double>> named;
  for (auto [n, p] : ps) named.push_back({n, p});
  return grad_check<double>(f, std::span<const NamedParam<double>>(named), 1e-5, tol);
}

}  // namespace

TEST_CASE("matmul") {
  Tape t;
  SUBCASE("identity") {
    Matrix m(2, 3);
    m << 1, 2, 3, 4, 5, 6;
    CHECK(matmul(t.constant(Matrix::Identity(2, 2)), t.constant(m)).value() == m);
  }
  SUBCASE("small product") {
    Matrix a(2, 2), b(2, 1), expected(2, 1);
    a << 1, 2, 3, 4;
    b << 1, 1;
    expected << 3, 7;
    CHECK(matmul(t.constant(a), t.constant(b)).value() == expected);
  }
  SUBCASE("triple-loop oracle") {
    std::mt19937_64 rng(1);
    Matrix a = random_matrix(3, 4, rng), b = random_matrix(4, 2, rng);
    CHECK((matmul(t.constant(a), t.constant(b)).value() - triple_loop(a, b)).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("shape error names both shapes") {
    try {
      matmul(t.constant(Matrix::Zero(2, 3)), t.constant(Matrix::Zero(2, 3)));
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("(2x3) x (2x3)") != std::string::npos);
    }
  }
}

TEST_CASE("softmax_rows") {
  Tape t;
  Matrix m(3, 3);
  m << 0, 0, 0, 1, 2, 3, -500, 500, 0;
  Matrix s = softmax_rows(t.constant(m)).value();
  CHECK(s(0, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(s(1, 0) == doctest::Approx(0.09003057317038046).epsilon(1e-12));
  CHECK(s(1, 1) == doctest::Approx(0.24472847105479767).epsilon(1e-12));
  CHECK(s(1, 2) == doctest::Approx(0.6652409557748219).epsilon(1e-12));
  for (Index i = 0; i < 3; ++i) CHECK(std::abs(s.row(i).sum() - 1.0) <= 1e-12);

  Matrix pair(1, 2);
  pair << 0, 0;
  CHECK(softmax_rows(t.constant(pair)).value()(0, 1) == 0.5);
  Matrix single(1, 1);
  single << 123.4;
  CHECK(softmax_rows(t.constant(single)).value()(0, 0) == 1.0);

  SUBCASE("rows sum to one for |x| <= 500") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-500, 500);
    Matrix big(50, 7);
    for (Index i = 0; i < big.rows(); ++i)
      for (Index j = 0; j < big.cols(); ++j) big(i, j) = u(rng);
    Matrix sb = softmax_rows(t.constant(big)).value();
    for (Index i = 0; i < sb.rows(); ++i) CHECK(std::abs(sb.row(i).sum() - 1.0) <= 1e-12);
  }
}

TEST_CASE("backward") {
  std::mt19937_64 rng(7);
  Param w(random_matrix(3, 2, rng));
  Param unused(random_matrix(2, 2, rng));

  SUBCASE("sum gives all-ones") {
    w.zero_grad();
    unused.zero_grad();
    Tape t;
    Var loss = sum(t.param(w));
    t.param(unused);
    t.backward(loss);
    CHECK(w.grad == Matrix::Ones(3, 2));
    CHECK(unused.grad == Matrix::Zero(2, 2));
  }

  SUBCASE("non-scalar loss is rejected") {
    Tape t;
    CHECK_THROWS_AS(t.backward(t.param(w)), ShapeError);
  }

  SUBCASE("least squares against an independent central difference") {
    const Matrix x = random_matrix(2, 1, rng), y = random_matrix(3, 1, rng);
    auto loss_value = [&](const Matrix& wv) { return (wv * x - y).squaredNorm(); };
    w.zero_grad();
    Tape t;
    Var loss = sum(square(sub(matmul(t.param(w), t.constant(x)), t.constant(y))));
    t.backward(loss);
    const double h = 1e-5;
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 2; ++j) {
        Matrix up = w.value, down = w.value;
        up(i, j) += h;
        down(i, j) -= h;
        const double fd = (loss_value(up) - loss_value(down)) / (2 * h);
        CHECK(std::abs(fd - w.grad(i, j)) / std::max(std::abs(fd), 1e-12) <= 1e-6);
      }
  }
}

TEST_CASE("adam") {
  Param p(Matrix::Constant(2, 2, 0.5));
  std::array<Param*, 1> ps{&p};
  AdamState st;

  SUBCASE("zero gradient is a fixed point") {
    p.zero_grad();
    for (int i = 0; i < 3; ++i) adam_step(st, std::span<Param* const>(ps));
    CHECK(p.value == Matrix::Constant(2, 2, 0.5));
    CHECK(st.m[0].isZero(0));
    CHECK(st.v[0].isZero(0));
    CHECK(st.t == 3);
  }

  SUBCASE("first step with unit gradient") {
    p.grad.setOnes();
    adam_step(st, std::span<Param* const>(ps));
    // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    CHECK(p.value(0, 0) == doctest::Approx(0.5 - 0.001 / (1.0 + 1e-8)).epsilon(1e-14));
  }

  SUBCASE("two steps match the recurrence") {
    double m = 0, v = 0, x = 0.5;
    for (int t = 1; t <= 2; ++t) {
      m = 0.9 * m + 0.1 * 1.0;
      v = 0.999 * v + 0.001 * 1.0;
      x -= 0.001 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    }
    for (int t = 0; t < 2; ++t) {
      p.grad.setOnes();
      adam_step(st, std::span<Param* const>(ps));
    }
    CHECK(std::abs(p.value(1, 1) - x) <= 1e-12);
    CHECK((st.v[0].array() >= 0).all());
  }

  SUBCASE("shape mismatch") {
    p.grad = Matrix::Zero(3, 3);
    CHECK_THROWS_AS(adam_step(st, std::span<Param* const>(ps)), ShapeError);
  }
}

TEST_CASE("grad_check harness") {
  std::mt19937_64 rng(11);
  Param a(random_matrix(3, 3, rng));
  Param ignored(random_matrix(2, 2, rng));
  auto report = check(
      [&](Tape& t) {
        Var va = t.param(a);
        t.param(ignored);
        return sum(square(matmul(va, va)));
      },
      {{"a", &a}, {"ignored", &ignored}});
  CHECK(report.passed);
  CHECK(report.entries[1].max_rel_error == 0.0);
  CHECK(ignored.grad.isZero(0));

  Param neg(Matrix::Constant(1, 1, -1.0));
  auto bad = check([&](Tape& t) { return sum(scale(t.param(neg), std::nan(""))); }, {{"neg", &neg}});
  CHECK_FALSE(bad.passed);
}

TEST_CASE("primitive gradients match finite differences") {
  std::mt19937_64 rng(5);
  Param x(random_matrix(4, 6, rng));
  Param y(random_matrix(4, 6, rng));
  Param row(random_matrix(1, 6, rng));
  Param w(random_matrix(6, 3, rng));
  Param heads_w(random_matrix(6, 3, rng));
  Param alpha(random_matrix(4, 2, rng));
  const std::vector<Index> seg{0, 2, 0, 1};
  const std::vector<Index> pick{3, 1, 1};
  // Nonlinear readout so every op sees a non-trivial upstream gradient.
  auto readout = [](Tape& t, Var v) {
    Matrix pr(v.rows(), v.cols());
    for (Index i = 0; i < pr.rows(); ++i)
      for (Index j = 0; j < pr.cols(); ++j) pr(i, j) = 1.0 + 0.3 * std::sin(double(i + 2 * j));
    return sum(square(hadamard(v, t.constant(pr))));
  };

  auto ok = [](const GradCheckReport& r) {
    if (!r.passed) for (const auto& e : r.entries) MESSAGE(e.name << " " << e.max_rel_error);
    for (const auto& e : r.entries) INFO(e.name << " " << e.max_rel_error);
    return r.passed;
  };

  CHECK(ok(check([&](Tape& t) { return readout(t, matmul(t.param(x), t.param(w))); }, {{"x", &x}, {"w", &w}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, add(t.param(x), t.param(y))); }, {{"x", &x}, {"y", &y}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, sub(t.param(x), t.param(y))); }, {{"x", &x}, {"y", &y}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, hadamard(t.param(x), t.param(y))); }, {{"x", &x}, {"y", &y}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, add_row(t.param(x), t.param(row))); }, {{"x", &x}, {"row", &row}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, mul_row(t.param(x), t.param(row))); }, {{"x", &x}, {"row", &row}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, gelu(t.param(x))); }, {{"x", &x}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, transpose(t.param(x))); }, {{"x", &x}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, softmax_rows(t.param(x))); }, {{"x", &x}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, log_softmax_rows(t.param(x))); }, {{"x", &x}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, mean_rows(t.param(x))); }, {{"x", &x}})));
  CHECK(ok(check([&](Tape& t) { return mean(square(t.param(x))); }, {{"x", &x}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, gather_rows(t.param(x), std::span<const Index>(pick))); },
                 {{"x", &x}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, scatter_add_rows(t.param(x), std::span<const Index>(seg), 3)); },
                 {{"x", &x}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, concat_rows({t.param(x), t.param(y)})); }, {{"x", &x}, {"y", &y}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, concat_cols({t.param(x), t.param(y)})); }, {{"x", &x}, {"y", &y}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, matmul_heads(t.param(x), t.param(heads_w), 2)); },
                 {{"x", &x}, {"w", &heads_w}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, head_dot(t.param(x), t.param(y), 2)); }, {{"x", &x}, {"y", &y}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, head_scale(t.param(x), t.param(alpha), 2)); },
                 {{"x", &x}, {"alpha", &alpha}})));
  CHECK(ok(check(
      [&](Tape& t) { return readout(t, segment_softmax(t.param(alpha), std::span<const Index>(seg), 3)); },
      {{"alpha", &alpha}})));

  Param logits(random_matrix(4, 1, rng));
  const std::vector<double> targets{1, 0, 0, 1};
  CHECK(ok(check([&](Tape& t) { return bce_with_logits(t.param(logits), std::span<const double>(targets)); },
                 {{"logits", &logits}})));
  CHECK(ok(check([&](Tape& t) { return mse(t.param(x), t.param(y)); }, {{"x", &x}, {"y", &y}})));
  CHECK(ok(check([&](Tape& t) { return readout(t, scale(t.param(x), 0.7)); }, {{"x", &x}})));
  CHECK(ok(check([&](Tape& t) { return sum(hadamard(square(t.param(x)), t.param(y))); }, {{"x", &x}, {"y", &y}})));
  const std::vector<int> classes{0, 1, 1, 0};
  CHECK(ok(check([&](Tape& t) { return cross_entropy(t.param(alpha), std::span<const int>(classes)); },
                 {{"alpha", &alpha}})));
}

TEST_CASE("segment_softmax normalises each segment per column") {
  Tape t;
  std::mt19937_64 rng(9);
  Matrix s = random_matrix(6, 2, rng, 10.0);
  const std::vector<Index> seg{1, 1, 0, 2, 1, 0};
  Matrix p = segment_softmax(t.constant(s), std::span<const Index>(seg), 4).value();
  for (Index k = 0; k < 3; ++k)
    for (Index h = 0; h < 2; ++h) {
      double total = 0;
      for (Index e = 0; e < 6; ++e)
        if (seg[static_cast<std::size_t>(e)] == k) total += p(e, h);
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  CHECK(p(3, 0) == 1.0);
}

TEST_CASE("losses at reference points") {
  Tape t;
  Matrix z = Matrix::Zero(3, 1);
  const std::vector<double> y{0, 1, 1};
  CHECK(bce_with_logits(t.constant(z), std::span<const double>(y)).item() == doctest::Approx(std::log(2.0)));
  Matrix sat(2, 1);
  sat << 20, -20;
  const std::vector<double> ys{1, 0};
  CHECK(bce_with_logits(t.constant(sat), std::span<const double>(ys)).item() < 1e-8);

  SUBCASE("cross entropy matches the direct formula") {
    std::mt19937_64 rng(13);
    Matrix logits = random_matrix(10, 2, rng, 3.0);
    std::vector<int> cls;
    double expected = 0;
    for (Index i = 0; i < 10; ++i) {
      const int c = static_cast<int>(i % 2);
      cls.push_back(c);
      const double e0 = std::exp(logits(i, 0)), e1 = std::exp(logits(i, 1));
      expected += -std::log((c == 0 ? e0 : e1) / (e0 + e1));
    }
    expected /= 10;
    CHECK(std::abs(cross_entropy(t.constant(logits), std::span<const int>(cls)).item() - expected) <= 1e-12);
  }
}

TEST_CASE("mean_rows of an empty operand is a zero row") {
  Tape t;
  Var v = mean_rows(t.constant(Matrix::Zero(0, 4)));
  CHECK(v.rows() == 1);
  CHECK(v.value().isZero(0));
}

TEST_CASE("tape replays are deterministic") {
  std::mt19937_64 rng(21);
  Param a(random_matrix(5, 5, rng));
  auto run = [&] {
    a.zero_grad();
    Tape t;
    Var loss = sum(gelu(matmul(t.param(a), t.param(a))));
    t.backward(loss);
    return std::make_pair(loss.item(), Matrix(a.grad));
  };
  auto first = run(), second = run();
  CHECK(first.first == second.first);
  CHECK(first.second == second.second);
}
