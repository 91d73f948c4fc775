#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "rerank/gradcheck.hpp"
#include "rerank/graph.hpp"
#include "rerank/nn.hpp"
#include "rerank/params.hpp"
#include "rerank/rng.hpp"

using namespace rerank;

namespace {

Tensor random_matrix(int r, int c, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros({r, c});
  for (double& v : t.v) v = rng.normal(0.0, scale);
  return t;
}

// Finite-difference check of a loss built from a ParameterSet.
double fd_check(const std::function<int(Graph&, ParamBinder&)>& build, ParameterSet& ps,
                double eps = 1e-5, int max_per_param = 24) {
  Graph g;
  ParamBinder bind(g, ps);
  const int loss = build(g, bind);
  g.backward(loss);
  const GradMap analytic = collect_param_grads(g, ps);
  const auto loss_fn = [&](const ParameterSet& p) {
    Graph h;
    ParamBinder b(h, p);
    // ParamBinder needs a mutable reference only for node creation.
    return h.value(build(h, b)).item();
  };
  return grad_check(loss_fn, ps, analytic, eps, max_per_param).max_rel_error;
}

}  // namespace

TEST_CASE("sigmoid and softmax forward basics") {
  Graph g;
  const int x = g.leaf(Tensor::scalar(0.0));
  CHECK(g.value(g.sigmoid(x)).item() == doctest::Approx(0.5).epsilon(1e-12));

  const int logits = g.leaf(Tensor::matrix(1, 3, {1.0, 1.0, 1.0}));
  Tensor mask = Tensor::matrix(1, 3, {1.0, 1.0, 0.0});
  const Tensor& p = g.value(g.softmax_masked(logits, mask));
  CHECK(p.at(0, 0) == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(p.at(0, 1) == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(p.at(0, 2) == 0.0);
}

TEST_CASE("masked softmax is a distribution over unmasked entries") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    const int n = 8;
    const int logits = g.leaf(random_matrix(3, n, rng, 2.0));
    Tensor mask = Tensor::zeros({3, n});
    for (int i = 0; i < 3; ++i) {
      int live = 0;
      for (int j = 0; j < n; ++j) {
        mask.at(i, j) = rng.bernoulli(0.6) ? 1.0 : 0.0;
        live += mask.at(i, j) != 0.0;
      }
      if (live == 0) mask.at(i, static_cast<int>(rng.uniform_int(n))) = 1.0;
    }
    const Tensor& p = g.value(g.softmax_masked(logits, mask));
    for (int i = 0; i < 3; ++i) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) {
        CHECK(p.at(i, j) >= 0.0);
        if (mask.at(i, j) == 0.0) CHECK(p.at(i, j) == 0.0);
        s += p.at(i, j);
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("softmax over a fully masked row is rejected") {
  Graph g;
  const int logits = g.leaf(Tensor::matrix(1, 2, {0.3, -0.2}));
  CHECK_THROWS_AS(g.softmax_masked(logits, Tensor::zeros({1, 2})), std::invalid_argument);
}

TEST_CASE("shape mismatches are rejected with the op kind") {
  Graph g;
  const int a = g.leaf(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  const int b = g.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  CHECK_THROWS_WITH_AS(g.add(a, b), doctest::Contains("add"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(g.matmul(a, b, true), doctest::Contains("matmul_nt"),
                       std::invalid_argument);
}

TEST_CASE("KL of identical distributions is zero") {
  Graph g;
  Tensor q = Tensor::matrix(1, 3, {0.2, 0.5, 0.3});
  const int p = g.leaf(q);
  CHECK(g.value(g.kl_div(q, p)).item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("backward of sum gives all-ones; sigmoid slope at zero is 0.25") {
  Graph g;
  ParameterSet ps;
  Rng rng(1);
  ps.create("x", {2, 3}, 1, rng);
  ParamBinder bind(g, ps);
  const int loss = g.sum(bind("x"));
  g.backward(loss);
  const GradMap gm = collect_param_grads(g, ps);
  for (double v : gm.grads[0].v) CHECK(v == 1.0);

  Graph g2;
  ParameterSet ps2;
  ps2.create_const("w", {1, 1}, 0.0);
  ParamBinder bind2(g2, ps2);
  const int loss2 = g2.sum(g2.sigmoid(bind2("w")));
  g2.backward(loss2);
  CHECK(collect_param_grads(g2, ps2).grads[0].v[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("backward rejects a non-scalar loss") {
  Graph g;
  const int x = g.leaf(Tensor::matrix(1, 2, {1.0, 2.0}));
  CHECK_THROWS_AS(g.backward(x), std::invalid_argument);
}

TEST_CASE("unreachable parameters get zero gradients") {
  Graph g;
  ParameterSet ps;
  Rng rng(2);
  ps.create("used", {1, 2}, 2, rng);
  ps.create("unused", {1, 2}, 2, rng);
  ParamBinder bind(g, ps);
  (void)bind("unused");
  g.backward(g.sum(bind("used")));
  const GradMap gm = collect_param_grads(g, ps);
  CHECK(gm.grads[ps.index_of("unused")].v[0] == 0.0);
  CHECK(gm.grads[ps.index_of("unused")].v[1] == 0.0);
  CHECK(gm.grads[ps.index_of("used")].v[0] == 1.0);
}

TEST_CASE("every primitive op matches central finite differences") {
  Rng rng(42);

  SUBCASE("matmul + add + bias chain") {
    ParameterSet ps;
    ps.create("a", {3, 4}, 4, rng);
    ps.create("b", {4, 2}, 4, rng);
    ps.create("c", {3, 2}, 2, rng);
    ps.create("bias", {2}, 2, rng);
    const double err = fd_check(
        [](Graph& g, ParamBinder& bind) {
          return g.sum(g.sigmoid(
              g.add(g.add_bias(g.matmul(bind("a"), bind("b")), bind("bias")), bind("c"))));
        },
        ps);
    CHECK(err < 1e-6);
  }

  SUBCASE("matmul with transposed rhs") {
    ParameterSet ps;
    ps.create("a", {3, 4}, 4, rng);
    ps.create("b", {5, 4}, 4, rng);
    const double err = fd_check(
        [](Graph& g, ParamBinder& bind) {
          return g.sum(g.sigmoid(g.matmul(bind("a"), bind("b"), true)));
        },
        ps);
    CHECK(err < 1e-6);
  }

  SUBCASE("concat, reshape, repeat, gather") {
    ParameterSet ps;
    ps.create("a", {2, 3}, 3, rng);
    ps.create("b", {2, 2}, 2, rng);
    ps.create("v", {4}, 4, rng);
    const double err = fd_check(
        [](Graph& g, ParamBinder& bind) {
          const int cat = g.concat_cols({bind("a"), bind("b")});        // (2,5)
          const int rows = g.concat_rows({cat, cat});                   // (4,5)
          const int resh = g.reshape(rows, {2, 10});
          const int rep = g.repeat_row(bind("v"), 3);                   // (3,4)
          const int gat = g.gather_rows(rep, {0, 2, 2});                // (3,4)
          return g.add(g.sum(g.sigmoid(resh)), g.sum(g.sigmoid(gat)));
        },
        ps);
    CHECK(err < 1e-6);
  }

  SUBCASE("layer norm") {
    ParameterSet ps;
    ps.create("x", {3, 6}, 6, rng);
    ps.create("g", {6}, 6, rng);
    ps.create("b", {6}, 6, rng);
    const double err = fd_check(
        [](Graph& g, ParamBinder& bind) {
          return g.sum(g.sigmoid(g.layer_norm_rows(bind("x"), bind("g"), bind("b"))));
        },
        ps);
    CHECK(err < 1e-5);
  }

  SUBCASE("masked softmax and kl_div") {
    ParameterSet ps;
    ps.create("x", {2, 5}, 5, rng);
    Tensor mask = Tensor::matrix(2, 5, {1, 1, 0, 1, 1, 1, 0, 1, 1, 0});
    Tensor q = Tensor::zeros({2, 5});
    q.at(0, 0) = 0.5;
    q.at(0, 3) = 0.5;
    q.at(1, 2) = 1.0;
    const double err = fd_check(
        [&](Graph& g, ParamBinder& bind) {
          const int p = g.softmax_masked(bind("x"), mask);
          return g.kl_div(q, p);
        },
        ps);
    CHECK(err < 1e-6);
  }

  SUBCASE("cross entropy pick on probabilities") {
    ParameterSet ps;
    ps.create("x", {1, 4}, 4, rng);
    const double err = fd_check(
        [](Graph& g, ParamBinder& bind) {
          const int p = g.softmax_masked(bind("x"), Tensor::ones_matrix(1, 4));
          return g.cross_entropy_pick(p, 2);
        },
        ps);
    CHECK(err < 1e-6);
  }

  SUBCASE("fused bce, cross-entropy and kl losses") {
    ParameterSet ps;
    ps.create("x", {3, 4}, 4, rng);
    Tensor targets = Tensor::matrix(3, 4, {1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 1, 0});
    Tensor weights = Tensor::matrix(3, 4, {1, 0, 0, 0, 0.5, 0.5, 0, 0, 0.25, 0.25, 0.25, 0});
    Tensor mask = Tensor::matrix(3, 4, {1, 1, 1, 1, 1, 1, 0, 1, 0, 1, 1, 1});
    Tensor q = Tensor::zeros({3, 4});
    q.at(0, 0) = 0.7;
    q.at(0, 2) = 0.3;
    q.at(1, 1) = 1.0;
    q.at(2, 2) = 0.4;
    q.at(2, 3) = 0.6;
    const double err = fd_check(
        [&](Graph& g, ParamBinder& bind) {
          const int bce = g.bce_logits(bind("x"), targets, weights);
          const int ce = g.cross_entropy_rows(bind("x"), mask, {0, 1, 2});
          const int kl = g.kl_rows(q, bind("x"), mask);
          return g.add(bce, g.add(ce, g.scale(kl, 0.7)));
        },
        ps);
    CHECK(err < 1e-6);
  }

  SUBCASE("multi-head attention with causal mask") {
    ParameterSet ps;
    Rng prng(9);
    register_attention(ps, "attn", 2, 8, 8, prng);
    ps.create("x", {4, 8}, 8, prng);
    const double err = fd_check(
        [](Graph& g, ParamBinder& bind) {
          const int x = bind("x");
          const int out = multihead_attention(g, bind, "attn", x, x, causal_mask(4), 2, 8);
          return g.sum(g.sigmoid(out));
        },
        ps);
    // Composed-op tolerance: tiny-gradient entries sit at the finite
    // difference noise floor.
    CHECK(err < 1e-4);
  }
}

TEST_CASE("causal attention never attends to later positions") {
  ParameterSet ps;
  Rng rng(11);
  register_attention(ps, "attn", 2, 8, 8, rng);
  Tensor x = random_matrix(5, 8, rng);
  auto run = [&](const Tensor& input) {
    Graph g;
    ParamBinder bind(g, ps);
    const int xin = g.leaf(input);
    return g.value(multihead_attention(g, bind, "attn", xin, xin, causal_mask(5), 2, 8));
  };
  const Tensor base = run(x);
  Tensor perturbed = x;
  for (int j = 0; j < 8; ++j) perturbed.at(4, j) += 3.0;  // change only the last position
  const Tensor after = run(perturbed);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 8; ++j) CHECK(after.at(i, j) == base.at(i, j));
}

TEST_CASE("backward is deterministic bit for bit") {
  ParameterSet ps;
  Rng rng(5);
  register_attention(ps, "attn", 2, 8, 8, rng);
  ps.create("x", {4, 8}, 8, rng);
  auto grads_once = [&]() {
    Graph g;
    ParamBinder bind(g, ps);
    const int x = bind("x");
    const int out = multihead_attention(g, bind, "attn", x, x, causal_mask(4), 2, 8);
    g.backward(g.sum(g.sigmoid(out)));
    return collect_param_grads(g, ps);
  };
  const GradMap a = grads_once();
  const GradMap b = grads_once();
  for (size_t i = 0; i < a.grads.size(); ++i) CHECK(a.grads[i].v == b.grads[i].v);
}

TEST_CASE("grad_check on w^2 at w=3") {
  ParameterSet ps;
  ps.create_const("w", {1, 1}, 3.0);
  Graph g;
  ParamBinder bind(g, ps);
  // w^2 via matmul(w, w) on 1x1 matrices.
  const int loss = g.sum(g.matmul(bind("w"), bind("w")));
  g.backward(loss);
  const GradMap analytic = collect_param_grads(g, ps);
  const auto loss_fn = [](const ParameterSet& p) {
    Graph h;
    const double w = p.get("w").v[0];
    return w * w;
  };
  const GradCheckResult res = grad_check(loss_fn, ps, analytic, 1e-5);
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("adam first step moves a unit-gradient scalar by about lr") {
  ParameterSet ps;
  ps.create_const("w", {1}, 0.0);
  GradMap g = GradMap::zeros_like(ps);
  g.grads[0].v[0] = 1.0;
  AdamConfig cfg;
  cfg.lr = 0.1;
  adam_step(ps, g, cfg);
  CHECK(ps.get("w").v[0] == doctest::Approx(-0.1).epsilon(1e-7));
  CHECK(ps.step() == 1);
}

TEST_CASE("adam with zero gradient leaves fresh parameters unchanged") {
  Rng rng(3);
  ParameterSet ps;
  ps.create("w", {2, 2}, 2, rng);
  const Tensor before = ps.get("w");
  adam_step(ps, GradMap::zeros_like(ps), AdamConfig{});
  CHECK(ps.get("w").v == before.v);
}

TEST_CASE("adam rejects non-finite gradients naming the parameter") {
  ParameterSet ps;
  ps.create_const("w", {1}, 0.0);
  GradMap g = GradMap::zeros_like(ps);
  g.grads[0].v[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(adam_step(ps, g, AdamConfig{}), doctest::Contains("w"),
                       std::runtime_error);
}

TEST_CASE("adam is bit-identical across identical runs") {
  auto run = [&]() {
    Rng rng(77);
    ParameterSet ps;
    ps.create("w", {4, 4}, 4, rng);
    Rng grng(78);
    for (int step = 0; step < 100; ++step) {
      GradMap g = GradMap::zeros_like(ps);
      for (double& v : g.grads[0].v) v = grng.normal();
      adam_step(ps, g, AdamConfig{});
    }
    return ps.get("w").v;
  };
  CHECK(run() == run());
}
