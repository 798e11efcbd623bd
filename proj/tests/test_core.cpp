#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dfm/ar.hpp"
#include "dfm/core.hpp"

using namespace dfm;

namespace {

TokenSeq seq(std::initializer_list<Token> toks) { return TokenSeq(toks); }

// Two-component path: w^0 = delta_{x0}, w^1 = delta_{x1}, kappa supplied.
ConditionalPath two_point_path(const Vocab& v,
                               std::function<double(int t, int pos)> kappa1) {
  ConditionalPath path;
  path.vocab = v;
  path.scheduler.components = 2;
  path.scheduler.kappa = [kappa1](int t, int pos, int comp) {
    double k1 = kappa1(t, pos);
    return comp == 1 ? k1 : 1.0 - k1;
  };
  path.w = [](int comp, int pos, Token tok, const TokenSeq& x0,
              const TokenSeq& x1) {
    return (comp == 1 ? x1 : x0)[std::size_t(pos)] == tok ? 1.0 : 0.0;
  };
  return path;
}

VelocityField constant_field(const VelocitySlice& s) {
  return [s](const Timestep&, const TokenSeq&) { return s; };
}

VelocityField zero_field(int n, int d) {
  return constant_field(VelocitySlice::zeros(n, d));
}

// Unit swap z^pos -> target, only when evaluated at matching state.
VelocityField swap_field(int n, int d, int pos, Token target) {
  return [=](const Timestep&, const TokenSeq& z) {
    VelocitySlice s = VelocitySlice::zeros(n, d);
    if (z[std::size_t(pos)] != target) {
      s.ref(pos, target) = 1.0;
      s.ref(pos, z[std::size_t(pos)]) = -1.0;
    }
    return s;
  };
}

}  // namespace

TEST_CASE("enumerate_states covers the space and respects the bound") {
  auto states = enumerate_states(3, 2);
  CHECK(states.size() == 9);
  CHECK(states.front() == seq({0, 0}));
  CHECK(states.back() == seq({2, 2}));
  CHECK_THROWS_WITH_AS(enumerate_states(10, 7), doctest::Contains("InstanceTooLarge"),
                       Error);
}

TEST_CASE("conditional_path_eval identity mixture and boundary") {
  Vocab v{3, 2};
  TokenSeq x0 = seq({0, 0}), x1 = seq({1, 1});

  // Single effective component w = delta_{x1}.
  auto target_only = two_point_path(v, [](int, int) { return 1.0; });
  DistTable d1 = conditional_path_eval(target_only, Timestep{1, 2}, x0, x1);
  CHECK(d1.at(x1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(d1.mass.size() == 1);

  // kappa = (1, 0) for the source component at t = 0.
  auto source_only = two_point_path(v, [](int t, int) { return t > 0 ? 1.0 : 0.0; });
  DistTable d0 = conditional_path_eval(source_only, Timestep{0, 2}, x0, x1);
  CHECK(d0.at(x0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("conditional_path_eval quarter-mass midpoint") {
  // d=2, N=2, kappa^{i,1} = t/n with n=2 at t=1: each position is an even
  // coin between source and target token, giving mass 1/4 on each state.
  Vocab v{2, 0};
  auto path = two_point_path(v, [](int t, int) { return double(t) / 2.0; });
  DistTable d = conditional_path_eval(path, Timestep{1, 2}, seq({0, 0}), seq({1, 1}));
  for (const auto& x : enumerate_states(2, 2))
    CHECK(d.at(x) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("invalid scheduler is rejected") {
  Vocab v{2, 0};
  ConditionalPath path = two_point_path(v, [](int, int) { return 0.7; });
  path.scheduler.kappa = [](int, int, int) { return 0.7; };  // sums to 1.4
  CHECK_THROWS_WITH_AS(
      conditional_path_eval(path, Timestep{0, 1}, seq({0}), seq({1})),
      doctest::Contains("SchedulerInvalid"), Error);
}

TEST_CASE("marginal_path_eval degenerate and averaged couplings") {
  Vocab v{2, 0};
  auto path = two_point_path(v, [](int t, int) { return double(t) / 2.0; });
  TokenSeq a0 = seq({0, 0}), a1 = seq({1, 1});
  TokenSeq b0 = seq({0, 1}), b1 = seq({1, 0});

  Coupling single{{{a0, a1, 1.0}}};
  Timestep t{1, 2};
  CHECK(linf_gap(marginal_path_eval(path, single, t),
                 conditional_path_eval(path, t, a0, a1)) == doctest::Approx(0.0));

  Coupling uniform{{{a0, a1, 0.5}, {b0, b1, 0.5}}};
  DistTable got = marginal_path_eval(path, uniform, t);
  DistTable want;
  for (const auto& [x, m] : conditional_path_eval(path, t, a0, a1).mass)
    want.add(x, 0.5 * m);
  for (const auto& [x, m] : conditional_path_eval(path, t, b0, b1).mass)
    want.add(x, 0.5 * m);
  CHECK(linf_gap(got, want) <= 1e-15);

  Coupling bad{{{a0, a1, 0.6}}};
  CHECK_THROWS_WITH_AS(marginal_path_eval(path, bad, t),
                       doctest::Contains("CouplingInvalid"), Error);
}

TEST_CASE("marginal path boundaries recover source and target marginals") {
  Vocab v{3, 2};
  DistTable q;
  q.add(seq({0, 1}), 0.25);
  q.add(seq({1, 1}), 0.75);
  Coupling coupling = build_mask_coupling(q, 0, v);
  auto path = ar_path(0, v);
  DistTable p0 = marginal_path_eval(path, coupling, Timestep{0, 2});
  CHECK(p0.at(seq({2, 2})) == doctest::Approx(1.0).epsilon(1e-12));
  DistTable pn = marginal_path_eval(path, coupling, Timestep{2, 2});
  CHECK(linf_gap(pn, q) <= 1e-15);
}

TEST_CASE("check_velocity_valid classifies swaps and range breaches") {
  Timestep t{0, 1};
  std::vector<TokenSeq> states{seq({0, 1})};
  CHECK(check_velocity_valid(zero_field(2, 3), t, states).ok());
  CHECK(check_velocity_valid(swap_field(2, 3, 0, 2), t, states).ok());

  VelocitySlice twice = VelocitySlice::zeros(2, 3);
  twice.ref(0, 2) = 2.0;
  twice.ref(0, 0) = -2.0;
  auto report = check_velocity_valid(constant_field(twice), t, states);
  CHECK_FALSE(report.ok());
  bool saw_range = false;
  for (const auto& viol : report.violations)
    if (viol.kind == "range") saw_range = true;
  CHECK(saw_range);
}

TEST_CASE("step_kernel: stay, swap, and half-mixture") {
  Timestep t{0, 1};
  TokenSeq z = seq({0, 1});

  DistTable stay = step_kernel(zero_field(2, 3), t, z);
  CHECK(stay.at(z) == doctest::Approx(1.0).epsilon(1e-12));

  DistTable swapped = step_kernel(swap_field(2, 3, 0, 2), t, z);
  CHECK(swapped.at(seq({2, 1})) == doctest::Approx(1.0).epsilon(1e-12));

  VelocitySlice half = VelocitySlice::zeros(2, 3);
  half.ref(0, 2) = 0.5;
  half.ref(0, 0) = -0.5;
  DistTable mixed = step_kernel(constant_field(half), t, z);
  CHECK(mixed.at(z) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(mixed.at(seq({2, 1})) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(mixed.total() == doctest::Approx(1.0).epsilon(1e-12));

  VelocitySlice negative = VelocitySlice::zeros(2, 3);
  negative.ref(0, 2) = -0.5;
  negative.ref(0, 0) = 0.5;
  CHECK_THROWS_WITH_AS(step_kernel(constant_field(negative), t, z),
                       doctest::Contains("InvalidVelocity"), Error);
}

TEST_CASE("push_forward with zero velocity is the identity") {
  Timestep t{0, 1};
  DistTable p;
  p.add(seq({0, 0}), 0.3);
  p.add(seq({1, 2}), 0.7);
  CHECK(linf_gap(push_forward(p, zero_field(2, 3), t), p) <= 1e-15);
}

TEST_CASE("divergence of a 1-sparse swap at a point mass") {
  Timestep t{0, 1};
  TokenSeq z = seq({0, 1});
  DistTable p;
  p.add(z, 1.0);
  auto u = swap_field(2, 3, 0, 2);
  // div picks up -1 at the swapped-in state and +1 at the source state.
  CHECK(divergence(p, u, t, seq({2, 1})) == doctest::Approx(-1.0));
  CHECK(divergence(p, u, t, z) == doctest::Approx(1.0));
  CHECK(divergence(p, u, t, seq({1, 1})) == doctest::Approx(0.0));
  CHECK(divergence(p, zero_field(2, 3), t, z) == doctest::Approx(0.0));
}

TEST_CASE("divergence sums to zero over the state space") {
  // Random valid velocities and distributions; mass conservation is exact.
  Rng rng(42);
  for (int rep = 0; rep < 20; ++rep) {
    int d = 2 + int(rng.next_below(3));
    int n = 1 + int(rng.next_below(3));
    DistTable p;
    for (const auto& x : enumerate_states(d, n)) p.add(x, rng.next_unit() + 1e-3);
    p.normalize();
    VelocityField u = [&, d, n](const Timestep&, const TokenSeq& z) {
      Rng local(derive_seed(7, 0));
      for (Token tok : z) local = Rng(local.next_u64() + std::uint64_t(tok));
      VelocitySlice s = VelocitySlice::zeros(n, d);
      for (int i = 0; i < n; ++i) {
        double out = local.next_unit();
        s.ref(i, z[std::size_t(i)]) = -out;
        double rest = 0.0;
        std::vector<double> parts;
        for (Token a = 0; a < d; ++a) {
          if (a == z[std::size_t(i)]) continue;
          parts.push_back(local.next_unit() + 1e-9);
          rest += parts.back();
        }
        std::size_t pi = 0;
        for (Token a = 0; a < d; ++a) {
          if (a == z[std::size_t(i)]) continue;
          s.ref(i, a) = out * parts[pi++] / rest;
        }
      }
      return s;
    };
    Timestep t{0, 1};
    double total = 0.0;
    for (const auto& x : enumerate_states(d, n)) total += divergence(p, u, t, x);
    CHECK(std::abs(total) <= 1e-12);
    // divergence_table agrees with the per-state form.
    DistTable table = divergence_table(p, u, t);
    for (const auto& x : enumerate_states(d, n))
      CHECK(table.at(x) == doctest::Approx(divergence(p, u, t, x)).epsilon(1e-12));
  }
}

TEST_CASE("continuity_residual trivial cases") {
  Timestep t{0, 1};
  DistTable p;
  p.add(seq({0}), 0.4);
  p.add(seq({1}), 0.6);
  CHECK(continuity_residual(p, p, zero_field(1, 2), t) == doctest::Approx(0.0));

  DistTable shifted;
  shifted.add(seq({0}), 0.6);
  shifted.add(seq({1}), 0.4);
  CHECK(continuity_residual(p, shifted, zero_field(1, 2), t) ==
        doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("marginal_velocity: degenerate, disjoint, and blended posteriors") {
  Vocab v{3, 2};
  auto path = ar_path(0, v);
  ConditionalVelocity cond_u = [&v](const Timestep& t, const TokenSeq& z,
                                    const Coupling::Pair& pair) {
    return ar_conditional_velocity(pair, 0, t.t, z, v);
  };
  Timestep t{1, 2};

  // Single-pair coupling: posterior is 1.
  DistTable q1;
  q1.add(seq({0, 1}), 1.0);
  Coupling c1 = build_mask_coupling(q1, 0, v);
  TokenSeq z1 = ar_state(seq({0, 1}), 0, 1, v);
  CHECK(slice_linf(marginal_velocity(path, c1, cond_u, t, z1),
                   cond_u(t, z1, c1.pairs[0])) <= 1e-15);

  // Disjoint conditional supports: only the matching pair contributes.
  DistTable q2;
  q2.add(seq({0, 0}), 0.5);
  q2.add(seq({1, 1}), 0.5);
  Coupling c2 = build_mask_coupling(q2, 0, v);
  TokenSeq z2 = ar_state(seq({0, 0}), 0, 1, v);
  CHECK(slice_linf(marginal_velocity(path, c2, cond_u, t, z2),
                   cond_u(t, z2, c2.pairs[0])) <= 1e-15);

  // Shared prefix: convex blend with brute-force posterior weights.
  DistTable q3;
  q3.add(seq({0, 0}), 0.25);
  q3.add(seq({0, 1}), 0.75);
  Coupling c3 = build_mask_coupling(q3, 0, v);
  TokenSeq shared = seq({0, 2});  // prefix revealed, suffix masked
  VelocitySlice got = marginal_velocity(path, c3, cond_u, t, shared);
  VelocitySlice want = VelocitySlice::zeros(2, 3);
  for (const auto& pair : c3.pairs) {
    double w = pair.weight / (0.25 + 0.75);  // both paths sit on `shared` at t=1
    VelocitySlice cond = cond_u(t, shared, pair);
    for (std::size_t r = 0; r < want.rate.size(); ++r)
      want.rate[r] += w * cond.rate[r];
  }
  CHECK(slice_linf(got, want) <= 1e-15);
  CHECK(got.at(1, 0) == doctest::Approx(0.25));
  CHECK(got.at(1, 1) == doctest::Approx(0.75));

  DistTable unreachable;
  CHECK_THROWS_WITH_AS(marginal_velocity(path, c3, cond_u, t, seq({1, 2})),
                       doctest::Contains("ZeroMassState"), Error);
}
