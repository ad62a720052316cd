// CTC: exhaustive alignment-sum oracle over small shapes, hand-computed
// cases, feasibility handling, and gradient checks.
#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "oracle_helpers.hpp"
#include "uasr/ctc.hpp"

using namespace uasr;

namespace {

Matrix rand_logits(std::size_t t, std::size_t v, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(t, v);
  for (auto& x : m.raw()) x = rng.uniform(-2.0, 2.0);
  return m;
}

double log_softmax_at(const Matrix& logits, std::size_t t, std::size_t v) {
  double mx = logits(t, 0);
  for (std::size_t j = 1; j < logits.cols(); ++j) mx = std::max(mx, logits(t, j));
  double z = 0.0;
  for (std::size_t j = 0; j < logits.cols(); ++j) z += std::exp(logits(t, j) - mx);
  return logits(t, v) - mx - std::log(z);
}

}  // namespace

TEST_CASE("minimum frame counts") {
  CHECK(ctc_min_frames({1}) == 1);
  CHECK(ctc_min_frames({1, 2}) == 2);
  CHECK(ctc_min_frames({1, 1}) == 3);
  CHECK(ctc_min_frames({1, 1, 2, 2}) == 6);
  CHECK(ctc_min_frames({}) == 0);
}

TEST_CASE("single frame, single label") {
  Matrix logits = rand_logits(1, 4, 1);
  CtcResult r = ctc_loss(logits, {2});
  REQUIRE(r.feasible);
  CHECK(r.loss == Catch::Approx(-log_softmax_at(logits, 0, 2)).margin(1e-12));
}

TEST_CASE("two frames, single label sums the three paths") {
  Matrix logits = rand_logits(2, 3, 2);
  CtcResult r = ctc_loss(logits, {1});
  REQUIRE(r.feasible);
  double p = [&] {
    auto sm = [&](std::size_t t, std::size_t v) { return std::exp(log_softmax_at(logits, t, v)); };
    // label-label, label-blank, blank-label
    return sm(0, 1) * sm(1, 1) + sm(0, 1) * sm(1, 0) + sm(0, 0) * sm(1, 1);
  }();
  CHECK(r.loss == Catch::Approx(-std::log(p)).margin(1e-12));
}

TEST_CASE("forward matches exhaustive enumeration over small shapes") {
  std::size_t cases = 0;
  for (std::size_t t = 1; t <= 6; ++t)
    for (std::size_t v : {2, 3, 4})
      for (std::size_t len = 1; len <= 3; ++len)
        for (std::uint64_t draw = 0; draw < 5; ++draw) {
          Rng rng(derive_seed(1000 + draw, "ctc_" + std::to_string(t) + "_" + std::to_string(v) +
                                               "_" + std::to_string(len)));
          std::vector<int> target;
          for (std::size_t i = 0; i < len; ++i)
            target.push_back(1 + static_cast<int>(rng.randint(v - 1)));
          Matrix logits = rand_logits(t, v, rng.raw());
          CtcResult r = ctc_loss(logits, target);
          double brute = oracle::brute_ctc_nll(logits, target);
          if (ctc_min_frames(target) > t) {
            CHECK(!r.feasible);
            CHECK(std::isinf(brute));
          } else {
            REQUIRE(r.feasible);
            INFO("t=" << t << " v=" << v << " len=" << len << " draw=" << draw);
            CHECK(r.loss == Catch::Approx(brute).margin(1e-6));
          }
          ++cases;
        }
  CHECK(cases == 6 * 3 * 3 * 5);
}

TEST_CASE("infeasible targets return the infinity sentinel") {
  Matrix logits = rand_logits(1, 3, 3);
  CtcResult r = ctc_loss(logits, {1, 1});
  CHECK(!r.feasible);
  CHECK(std::isinf(r.loss));
  CHECK(r.loss > 0);
}

TEST_CASE("target id validation") {
  Matrix logits = rand_logits(4, 3, 4);
  CHECK_THROWS_AS(ctc_loss(logits, {0}), DataError);   // blank is reserved
  CHECK_THROWS_AS(ctc_loss(logits, {3}), DataError);   // beyond vocab
  CHECK_THROWS_AS(ctc_loss(logits, {-1}), DataError);
  CHECK_THROWS_AS(ctc_loss(Matrix(0, 3), {1}), ShapeError);
  CHECK_THROWS_AS(ctc_loss(Matrix(2, 1), {1}), ShapeError);
}

TEST_CASE("transcript to target mapping") {
  std::string vocab = "abc ";
  std::vector<int> ids = ctc_targets("ab c", vocab);
  REQUIRE(ids.size() == 4);
  CHECK(ids[0] == 1);
  CHECK(ids[1] == 2);
  CHECK(ids[2] == 4);  // space
  CHECK(ids[3] == 3);
  CHECK_THROWS_AS(ctc_targets("xyz", "abc"), DataError);
}

TEST_CASE("analytic gradient matches finite differences") {
  for (std::uint64_t seed : {11, 12, 13}) {
    Matrix logits = rand_logits(5, 4, seed);
    std::vector<int> target = {1, 3, 1};
    CtcResult r = ctc_loss(logits, target, /*want_grad=*/true);
    REQUIRE(r.feasible);
    REQUIRE(r.grad.rows() == 5);
    auto loss = [&]() { return ctc_loss(logits, target).loss; };
    oracle::FdReport rep = oracle::fd_compare(logits, r.grad, loss, 1e-5);
    INFO("seed " << seed << " abs " << rep.max_abs_err << " rel " << rep.max_rel_err);
    CHECK(rep.max_abs_err < 1e-3);
    CHECK(rep.max_rel_err < 1e-3);
  }
}

TEST_CASE("gradient rows are softmax minus posterior and sum to zero") {
  Matrix logits = rand_logits(6, 4, 21);
  std::vector<int> target = {2, 1};
  CtcResult r = ctc_loss(logits, target, true);
  REQUIRE(r.feasible);
  for (std::size_t t = 0; t < 6; ++t) {
    double row = 0.0;
    for (std::size_t v = 0; v < 4; ++v) row += r.grad(t, v);
    CHECK(row == Catch::Approx(0.0).margin(1e-9));
  }
}

TEST_CASE("tape op backpropagates the eager gradient") {
  Matrix logits_val = rand_logits(5, 4, 31);
  std::vector<int> target = {1, 2};
  Parameter p;
  p.name = "logits";
  p.stage = "test";
  p.value = logits_val;
  p.ensure_grad();
  p.zero_grad();
  Tape t;
  Var loss = ctc_loss_op(t, t.param(p), target);
  double eager = ctc_loss(logits_val, target).loss;
  CHECK(t.val(loss)(0, 0) == Catch::Approx(eager).margin(1e-12));
  t.backward(t.scale(loss, 2.0));  // upstream factor must propagate
  CtcResult r = ctc_loss(logits_val, target, true);
  CHECK(max_abs_diff(p.grad, scale(r.grad, 2.0)) < 1e-12);
}

TEST_CASE("tape op refuses infeasible targets") {
  Matrix logits_val = rand_logits(1, 4, 41);
  Parameter p;
  p.name = "logits";
  p.stage = "test";
  p.value = logits_val;
  Tape t;
  CHECK_THROWS_AS(ctc_loss_op(t, t.param(p), std::vector<int>{1, 1}), DataError);
}
