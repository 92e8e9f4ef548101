#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include <json.hpp>

#include "iwd/patchdist.hpp"
#include "iwd/rng.hpp"
#include "iwd/transport.hpp"

using namespace iwd;
using namespace iwd::transport;

namespace {

PatchDistribution make_dist(rng::Rng& gen, int count, int dim) {
    PatchDistribution d;
    d.atom_dim = dim;
    for (int i = 0; i < count; ++i) {
        std::vector<double> atom(static_cast<std::size_t>(dim));
        for (auto& v : atom) v = gen.uniform(0.0, 1.0);
        d.atoms.push_back(std::move(atom));
    }
    return d;
}

CostMatrix random_cost(rng::Rng& gen, int n, int m) {
    CostMatrix c;
    c.n = n;
    c.m = m;
    c.values.resize(static_cast<std::size_t>(n) * m);
    for (auto& v : c.values) v = gen.uniform(0.0, 2.0);
    return c;
}

std::vector<double> random_weights(rng::Rng& gen, int n) {
    std::vector<double> w(static_cast<std::size_t>(n));
    double s = 0.0;
    for (auto& v : w) {
        v = gen.uniform(0.1, 1.0);
        s += v;
    }
    for (auto& v : w) v /= s;
    // push rounding drift into the first entry so the sum is near-exact
    double acc = 0.0;
    for (std::size_t i = 1; i < w.size(); ++i) acc += w[i];
    w[0] = 1.0 - acc;
    return w;
}

CostMatrix cost_1d(const std::vector<double>& u, const std::vector<double>& v) {
    CostMatrix c;
    c.n = static_cast<int>(u.size());
    c.m = static_cast<int>(v.size());
    for (double a : u)
        for (double b : v) c.values.push_back(std::abs(a - b));
    return c;
}

} // namespace

TEST_CASE("assignment solver matches brute force on random instances") {
    rng::Rng gen(2024);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = gen.uniform_int(1, 7);
        const auto c = random_cost(gen, n, n);
        const auto brute = brute_force_w1(c);
        const auto fast = exact_w1(c, uniform_weights(n), uniform_weights(n));
        CHECK(std::abs(fast.value - brute.value) <= 1e-9);
        REQUIRE(fast.plan.has_value());
        CHECK(fast.plan->marginal_error() <= 1e-9);
        CHECK(fast.plan->cost_against(c) == doctest::Approx(fast.value).epsilon(1e-12));
        // uniform equal-size solutions are assignments: entries 0 or 1/n
        for (double p : fast.plan->coupling)
            CHECK((std::abs(p) <= 1e-12 || std::abs(p - 1.0 / n) <= 1e-12));
    }
}

TEST_CASE("hand-computed transport values") {
    // 1D uniform: {0,1} vs {0.25,0.75} pairs up for (0.25+0.25)/2
    CHECK(exact_w1(cost_1d({0.0, 1.0}, {0.25, 0.75}), uniform_weights(2), uniform_weights(2))
              .value == doctest::Approx(0.25).epsilon(1e-12));
    // all unit costs: any assignment pays 1
    CostMatrix ones;
    ones.n = ones.m = 2;
    ones.values = {1.0, 1.0, 1.0, 1.0};
    CHECK(exact_w1(ones, uniform_weights(2), uniform_weights(2)).value ==
          doctest::Approx(1.0).epsilon(1e-12));
    // weighted flow: move 0.4 of the mass across distance 1
    CHECK(exact_w1(cost_1d({0.0, 1.0}, {0.0, 1.0}), std::vector<double>{0.7, 0.3},
                   std::vector<double>{0.3, 0.7})
              .value == doctest::Approx(0.4).epsilon(1e-12));
    // rectangular: one atom splits across two targets
    CHECK(exact_w1(cost_1d({0.5}, {0.0, 1.0}), std::vector<double>{1.0}, uniform_weights(2))
              .value == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("weighted flow agrees with the expanded uniform instance") {
    rng::Rng gen(77);
    for (int trial = 0; trial < 50; ++trial) {
        // duplicate atoms: uniform over {a,a,b,c} == weights {1/2,1/4,1/4} over {a,b,c}
        const auto a = make_dist(gen, 3, 2);
        const auto b = make_dist(gen, 2, 2);
        PatchDistribution ea;
        ea.atom_dim = 2;
        ea.atoms = {a.atoms[0], a.atoms[0], a.atoms[1], a.atoms[2]};
        PatchDistribution eb;
        eb.atom_dim = 2;
        eb.atoms = {b.atoms[0], b.atoms[0], b.atoms[0], b.atoms[1]};
        const auto expanded =
            exact_w1(ground_cost(ea, eb), uniform_weights(4), uniform_weights(4));
        const auto weighted = exact_w1(ground_cost(a, b), std::vector<double>{0.5, 0.25, 0.25},
                                       std::vector<double>{0.75, 0.25});
        CHECK(weighted.value == doctest::Approx(expanded.value).epsilon(1e-9));
        REQUIRE(weighted.plan.has_value());
        CHECK(weighted.plan->marginal_error() <= 1e-9);
    }
}

TEST_CASE("metric axioms hold for the exact solver") {
    rng::Rng gen(31);
    for (int trial = 0; trial < 40; ++trial) {
        const int dim = gen.uniform_int(1, 4);
        const auto p = make_dist(gen, gen.uniform_int(2, 6), dim);
        const auto q = make_dist(gen, gen.uniform_int(2, 6), dim);
        const auto r = make_dist(gen, gen.uniform_int(2, 6), dim);
        auto d = [](const PatchDistribution& x, const PatchDistribution& y) {
            const auto c = ground_cost(x, y);
            return exact_w1(c, uniform_weights(c.n), uniform_weights(c.m)).value;
        };
        CHECK(d(p, p) <= 1e-12);
        CHECK(std::abs(d(p, q) - d(q, p)) <= 1e-12);
        CHECK(d(p, r) <= d(p, q) + d(q, r) + 1e-9);
        CHECK(d(p, q) >= 0.0);
    }
}

TEST_CASE("every feasible coupling upper-bounds the optimum") {
    rng::Rng gen(55);
    for (int trial = 0; trial < 40; ++trial) {
        const int n = gen.uniform_int(2, 6), m = gen.uniform_int(2, 6);
        const auto c = random_cost(gen, n, m);
        const auto a = random_weights(gen, n);
        const auto b = random_weights(gen, m);
        const auto opt = exact_w1(c, a, b);
        TransportPlan independent;
        independent.n = n;
        independent.m = m;
        independent.source_weights = a;
        independent.target_weights = b;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j)
                independent.coupling.push_back(a[static_cast<std::size_t>(i)] *
                                               b[static_cast<std::size_t>(j)]);
        CHECK(independent.marginal_error() <= 1e-12);
        CHECK(independent.cost_against(c) >= opt.value - 1e-12);
    }
}

TEST_CASE("sinkhorn tracks the exact value and never undercuts it") {
    rng::Rng gen(99);
    for (int trial = 0; trial < 40; ++trial) {
        const int n = gen.uniform_int(2, 10), m = gen.uniform_int(2, 10);
        const auto p = make_dist(gen, n, 3);
        const auto q = make_dist(gen, m, 3);
        const auto c = ground_cost(p, q);
        const auto a = uniform_weights(n);
        const auto b = uniform_weights(m);
        const double exact = exact_w1(c, a, b).value;
        SinkhornConfig cfg;
        cfg.epsilon = 0.01 * c.max();
        // small-epsilon tails can need ~1e6 iterations for 1e-9 marginals;
        // 1e-6 residual already keeps the rounded cost well inside 5%
        cfg.max_iterations = 500000;
        cfg.tolerance = 1e-6;
        const auto ent = sinkhorn_w1(c, a, b, cfg);
        CHECK(ent.value >= exact - 1e-9);
        CHECK(ent.value <= exact * 1.05 + 1e-9);
        CHECK(ent.marginal_error <= 1e-6 + 1e-12);
        CHECK(ent.iterations > 0);
    }
}

TEST_CASE("sinkhorn on plain and log domains agree") {
    rng::Rng gen(7);
    const auto p = make_dist(gen, 6, 3);
    const auto q = make_dist(gen, 7, 3);
    const auto c = ground_cost(p, q);
    SinkhornConfig cfg;
    cfg.epsilon = 0.1 * c.max();
    cfg.tolerance = 1e-10;
    cfg.max_iterations = 100000;
    const auto log_dom = sinkhorn_w1(c, uniform_weights(6), uniform_weights(7), cfg);
    cfg.log_domain = false;
    const auto plain = sinkhorn_w1(c, uniform_weights(6), uniform_weights(7), cfg);
    CHECK(log_dom.value == doctest::Approx(plain.value).epsilon(1e-7));
}

TEST_CASE("sinkhorn of a distribution against itself is near zero") {
    PatchDistribution p;
    p.atom_dim = 1;
    p.atoms = {{0.0}, {0.4}, {0.8}};
    const auto c = ground_cost(p, p);
    SinkhornConfig cfg;
    cfg.epsilon = 0.01 * c.max();
    cfg.max_iterations = 100000;
    cfg.tolerance = 1e-10;
    const auto v = sinkhorn_w1(c, uniform_weights(3), uniform_weights(3), cfg);
    CHECK(v.value <= 1e-4 * c.max());
}

TEST_CASE("sinkhorn reports diagnostics when it cannot converge") {
    rng::Rng gen(17);
    const auto c = random_cost(gen, 8, 8);
    SinkhornConfig cfg;
    cfg.epsilon = 0.05 * c.max();
    cfg.max_iterations = 3;
    cfg.tolerance = 1e-15;
    try {
        (void)sinkhorn_w1(c, uniform_weights(8), uniform_weights(8), cfg);
        FAIL("expected ConvergenceError");
    } catch (const ConvergenceError& e) {
        CHECK(e.iterations_used == 3);
        CHECK(e.final_marginal_error > 1e-15);
    }
    CHECK_THROWS_AS(
        (void)sinkhorn_w1(c, uniform_weights(8), uniform_weights(8),
                          SinkhornConfig{0.1, 100, -1.0, true}),
        ValidationError);
}

TEST_CASE("unrolled sinkhorn gradient matches finite differences") {
    rng::Rng gen(404);
    for (int trial = 0; trial < 10; ++trial) {
        const int n = gen.uniform_int(2, 4), m = gen.uniform_int(2, 5);
        auto c = random_cost(gen, n, m);
        const auto a = random_weights(gen, n);
        const auto b = random_weights(gen, m);
        const double eps = 0.3 * c.max();
        const int T = 25;
        const auto out = sinkhorn_unrolled_grad(c, a, b, eps, T);
        const double h = 1e-6;
        for (std::size_t k = 0; k < c.values.size(); ++k) {
            auto hi = c, lo = c;
            hi.values[k] += h;
            lo.values[k] -= h;
            const double fd = (sinkhorn_unrolled_grad(hi, a, b, eps, T).value -
                               sinkhorn_unrolled_grad(lo, a, b, eps, T).value) /
                              (2 * h);
            CHECK(out.cost_grad[k] == doctest::Approx(fd).epsilon(2e-5).scale(1.0));
        }
    }
}

TEST_CASE("unrolled sinkhorn is bitwise transpose-symmetric on symmetric costs") {
    rng::Rng gen(505);
    PatchDistribution p = make_dist(gen, 5, 3);
    const auto c = ground_cost(p, p); // C = C^T with a zero diagonal
    const auto out = sinkhorn_unrolled_grad(c, uniform_weights(5), uniform_weights(5),
                                            0.05 * c.max() + 0.01, 50);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j)
            CHECK(out.cost_grad[static_cast<std::size_t>(i) * 5 + j] ==
                  out.cost_grad[static_cast<std::size_t>(j) * 5 + i]);
}

TEST_CASE("dual estimate approximates a unit-distance pair") {
    PatchDistribution p, q;
    p.atom_dim = q.atom_dim = 1;
    p.atoms = {{0.0}};
    q.atoms = {{1.0}};
    auto critic = make_critic(1, 12345);
    DualOptions opts;
    const double v = dual_estimate(critic, p, q, opts);
    CHECK(v >= 0.5);
    CHECK(v <= 1.5);
}

TEST_CASE("iwd wrapper: zero on identical and tile-permuted images") {
    rng::Rng gen(8);
    patchdist::Image img;
    img.height = img.width = 6;
    img.channels = 1;
    img.pixels.resize(36);
    for (auto& v : img.pixels) v = gen.uniform01();

    const auto same = transport::iwd(img, img, PatchGrid{3, 3});
    CHECK(same.value <= 1e-12);
    CHECK(same.n == 4);
    CHECK(same.m == 4);

    const auto shuffled = patchdist::permute_patches(img, PatchGrid{3, 3},
                                                     std::vector<int>{3, 0, 1, 2});
    CHECK(transport::iwd(img, shuffled, PatchGrid{3, 3}).value <= 1e-12);

    patchdist::Image other = img;
    other.pixels[0] = other.pixels[0] < 0.5 ? other.pixels[0] + 0.5 : other.pixels[0] - 0.5;
    CHECK(transport::iwd(img, other, PatchGrid{3, 3}).value > 0.0);
}

TEST_CASE("iwd solver dispatch") {
    rng::Rng gen(13);
    patchdist::Image a, b;
    a.height = a.width = b.height = b.width = 6;
    a.channels = b.channels = 1;
    a.pixels.resize(36);
    b.pixels.resize(36);
    for (auto& v : a.pixels) v = gen.uniform01();
    for (auto& v : b.pixels) v = gen.uniform01();

    IwdOptions opts;
    const auto exact = transport::iwd(a, b, PatchGrid{3, 3}, opts);
    CHECK(exact.solver == SolverKind::exact);

    opts.solver = SolverKind::sinkhorn;
    opts.sinkhorn.epsilon = 0.0; // resolves to 0.05 * max cost
    opts.sinkhorn.max_iterations = 100000;
    const auto ent = transport::iwd(a, b, PatchGrid{3, 3}, opts);
    CHECK(ent.solver == SolverKind::sinkhorn);
    CHECK(ent.value >= exact.value - 1e-9);

    opts.solver = SolverKind::dual;
    opts.dual.steps = 200;
    const auto dual = transport::iwd(a, b, PatchGrid{3, 3}, opts);
    CHECK(dual.solver == SolverKind::dual);
    CHECK(dual.value >= 0.0); // clamped KR estimate

    patchdist::Image wrong = a;
    wrong.width = 3;
    wrong.pixels.resize(18);
    CHECK_THROWS_AS((void)transport::iwd(a, wrong, PatchGrid{3, 3}), ValidationError);
}

TEST_CASE("distance report serialization pins keys and order") {
    IwdValue v;
    v.value = 0.5;
    v.solver = SolverKind::sinkhorn;
    v.n = 4;
    v.m = 5;
    v.marginal_error = 1e-7;
    v.iterations = 12;
    const std::string s = to_json(v);
    const auto j = nlohmann::json::parse(s);
    CHECK(j["solver"] == "sinkhorn");
    CHECK(j["value"].get<double>() == doctest::Approx(0.5));
    CHECK(j["n"] == 4);
    CHECK(j["m"] == 5);
    CHECK(j["marginal_error"].get<double>() == doctest::Approx(1e-7));
    CHECK(j["iterations"] == 12);
    CHECK(s.find("\"solver\"") < s.find("\"value\""));
    CHECK(s.find("\"value\"") < s.find("\"n\":"));
    CHECK(s.find("\"n\":") < s.find("\"m\":"));
    CHECK(s.find("\"m\":") < s.find("\"marginal_error\""));
    CHECK(s.find("\"marginal_error\"") < s.find("\"iterations\""));
}

TEST_CASE("multiscale combines per-kernel values") {
    rng::Rng gen(21);
    patchdist::Image a, b;
    a.height = a.width = b.height = b.width = 6;
    a.channels = b.channels = 1;
    a.pixels.resize(36);
    b.pixels.resize(36);
    for (auto& v : a.pixels) v = gen.uniform01();
    for (auto& v : b.pixels) v = gen.uniform01();

    const double d3 = transport::iwd(a, b, PatchGrid{3, 3}).value;
    const double d2 = transport::iwd(a, b, PatchGrid{2, 2}).value;
    CHECK(multiscale_iwd(a, b, std::vector<int>{3}, std::vector<double>{1.0}) ==
          doctest::Approx(d3).epsilon(1e-12));
    CHECK(multiscale_iwd(a, b, std::vector<int>{3, 2}, std::vector<double>{0.25, 0.75}) ==
          doctest::Approx(0.25 * d3 + 0.75 * d2).epsilon(1e-12));
    CHECK_THROWS_AS((void)multiscale_iwd(a, b, std::vector<int>{3}, std::vector<double>{0.5}),
                    ValidationError);
    CHECK_THROWS_AS((void)multiscale_iwd(a, b, std::vector<int>{4}, std::vector<double>{1.0}),
                    ValidationError);
}

TEST_CASE("pixel-mass transport baseline") {
    patchdist::Image a, b;
    a.height = b.height = 4;
    a.width = b.width = 5;
    a.channels = b.channels = 1;
    a.pixels.assign(20, 0.0);
    b.pixels.assign(20, 0.0);
    a.at(0, 0, 0) = 1.0;
    b.at(2, 3, 0) = 1.0;
    CHECK(global_pixel_w1(a, b) == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(global_pixel_w1(a, a) <= 1e-12);

    // intensity is normalized to unit mass on both sides
    patchdist::Image half = a;
    half.at(0, 0, 0) = 0.5;
    patchdist::Image shifted;
    shifted.height = 4;
    shifted.width = 5;
    shifted.channels = 1;
    shifted.pixels.assign(20, 0.0);
    shifted.at(0, 1, 0) = 1.0;
    CHECK(global_pixel_w1(half, shifted) == doctest::Approx(1.0).epsilon(1e-12));

    patchdist::Image dark = a;
    dark.pixels.assign(20, 0.0);
    CHECK_THROWS_AS((void)global_pixel_w1(a, dark), ValidationError);
}

TEST_CASE("weight validation") {
    rng::Rng gen(3);
    const auto c = random_cost(gen, 3, 3);
    CHECK_THROWS_AS((void)exact_w1(c, std::vector<double>{0.5, 0.5}, uniform_weights(3)),
                    ValidationError);
    CHECK_THROWS_AS(
        (void)exact_w1(c, std::vector<double>{0.5, 0.2, 0.1}, uniform_weights(3)),
        ValidationError);
    CHECK_THROWS_AS(
        (void)exact_w1(c, std::vector<double>{1.5, -0.25, -0.25}, uniform_weights(3)),
        ValidationError);
    const auto u = uniform_weights(7);
    double s = 0.0;
    for (double v : u) s += v;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
}
