#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <vector>

#include "iwd/diffcore.hpp"
#include "iwd/rng.hpp"

using namespace iwd;
using namespace iwd::diffcore;

namespace {

double head_loss(const NetworkSpec& spec, const Parameters& p, const std::vector<double>& x,
                 const LossHead& head) {
    return backward(spec, p, x, head).loss;
}

// central finite differences over every parameter and input coordinate
void check_gradients(const NetworkSpec& spec, const Parameters& p, const std::vector<double>& x,
                     const LossHead& head, double h = 1e-6, double tol = 2e-5) {
    const auto g = backward(spec, p, x, head);
    for (std::size_t k = 0; k < p.values.size(); ++k) {
        Parameters lo = p, hi = p;
        hi.values[k] += h;
        lo.values[k] -= h;
        const double fd = (head_loss(spec, hi, x, head) - head_loss(spec, lo, x, head)) / (2 * h);
        CHECK(g.param_grad[k] == doctest::Approx(fd).epsilon(tol).scale(1.0));
    }
    for (std::size_t k = 0; k < x.size(); ++k) {
        auto lo = x, hi = x;
        hi[k] += h;
        lo[k] -= h;
        const double fd = (head_loss(spec, p, hi, head) - head_loss(spec, p, lo, head)) / (2 * h);
        CHECK(g.input_grad[k] == doctest::Approx(fd).epsilon(tol).scale(1.0));
    }
}

NetworkSpec toy_spec(Activation act, OutputKind out, std::vector<int> widths) {
    NetworkSpec s;
    s.layer_widths = std::move(widths);
    s.activation = act;
    s.output = out;
    return s;
}

} // namespace

TEST_CASE("forward matches a hand-computed two-layer relu net") {
    const auto spec = toy_spec(Activation::relu, OutputKind::scalar, {2, 2, 1});
    Parameters p;
    p.values = {1.0, -2.0, 0.5, 0.25, 0.1, -0.2, 0.3, -0.4, 0.05};
    const std::vector<double> x = {0.6, -1.0};
    // z1 = (2.7, -0.15), relu -> (2.7, 0), out = 0.3*2.7 + 0.05
    const auto y = forward(spec, p, x);
    REQUIRE(y.size() == 1);
    CHECK(y[0] == doctest::Approx(0.86).epsilon(1e-12));

    const auto tspec = toy_spec(Activation::tanh, OutputKind::scalar, {2, 2, 1});
    const auto yt = forward(tspec, p, x);
    const double want = 0.3 * std::tanh(2.7) - 0.4 * std::tanh(-0.15) + 0.05;
    CHECK(yt[0] == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("parameter count and layout") {
    const auto spec = toy_spec(Activation::relu, OutputKind::logits, {3, 4, 2});
    CHECK(spec.param_count() == 3 * 4 + 4 + 4 * 2 + 2);
    CHECK(init_params(spec, 7).values.size() == spec.param_count());
}

TEST_CASE("init_params is seed-deterministic") {
    const auto spec = toy_spec(Activation::relu, OutputKind::logits, {5, 8, 3});
    const auto a = init_params(spec, 42);
    const auto b = init_params(spec, 42);
    const auto c = init_params(spec, 43);
    CHECK(a.values == b.values);
    CHECK(a.values != c.values);
}

TEST_CASE("cross_entropy equals the log-sum-exp formula and is shift-stable") {
    const std::vector<double> logits = {2.0, -1.0, 0.5};
    long double lse = 0.0L;
    for (double v : logits) lse += std::exp(static_cast<long double>(v));
    const double want = static_cast<double>(std::log(lse)) - 0.5;
    CHECK(cross_entropy(logits, 2) == doctest::Approx(want).epsilon(1e-12));

    CHECK(cross_entropy(std::vector<double>{1000.0, 0.0}, 0) == doctest::Approx(0.0).scale(1.0));
    CHECK(cross_entropy(std::vector<double>{1000.0, 0.0}, 1) ==
          doctest::Approx(1000.0).epsilon(1e-12));
    CHECK_THROWS_AS((void)cross_entropy(logits, 3), ValidationError);
    CHECK_THROWS_AS((void)cross_entropy(logits, -1), ValidationError);
}

TEST_CASE("backward gradients match finite differences") {
    rng::Rng gen(123);
    for (int trial = 0; trial < 20; ++trial) {
        const int in = gen.uniform_int(1, 4);
        const int hid = gen.uniform_int(1, 5);
        const int out = gen.uniform_int(2, 4);
        const auto act = trial % 2 == 0 ? Activation::tanh : Activation::relu;
        const auto spec = toy_spec(act, OutputKind::logits, {in, hid, out});
        auto p = init_params(spec, gen.next_u64());
        std::vector<double> x(static_cast<std::size_t>(in));
        for (auto& v : x) v = gen.uniform(-1.0, 1.0);
        // nudge relu pre-activations away from the kink
        if (act == Activation::relu)
            for (auto& v : p.values) v += 0.01;

        check_gradients(spec, p, x, CrossEntropyHead{gen.uniform_int(0, out - 1)});
        std::vector<double> w(static_cast<std::size_t>(out));
        for (auto& v : w) v = gen.uniform(-1.0, 1.0);
        check_gradients(spec, p, x, OutputWeightHead{w});
        check_gradients(spec, p, x, SquaredOutputHead{});
    }
}

TEST_CASE("loss heads evaluate as documented") {
    const auto spec = toy_spec(Activation::tanh, OutputKind::logits, {2, 3, 2});
    const auto p = init_params(spec, 5);
    const std::vector<double> x = {0.3, -0.7};
    const auto y = forward(spec, p, x);

    CHECK(backward(spec, p, x, CrossEntropyHead{1}).loss ==
          doctest::Approx(cross_entropy(y, 1)).epsilon(1e-12));
    CHECK(backward(spec, p, x, OutputWeightHead{{2.0, -1.0}}).loss ==
          doctest::Approx(2.0 * y[0] - y[1]).epsilon(1e-12));
    CHECK(backward(spec, p, x, SquaredOutputHead{}).loss ==
          doctest::Approx(y[0] * y[0] + y[1] * y[1]).epsilon(1e-12));

    const auto constant = backward(spec, p, x, ConstantHead{3.5});
    CHECK(constant.loss == 3.5);
    for (double g : constant.param_grad) CHECK(g == 0.0);
    for (double g : constant.input_grad) CHECK(g == 0.0);
}

TEST_CASE("scalar helpers agree with a unit output weight") {
    const auto spec = toy_spec(Activation::tanh, OutputKind::scalar, {3, 4, 1});
    const auto p = init_params(spec, 9);
    const std::vector<double> x = {0.1, 0.5, -0.4};
    CHECK(scalar_value(spec, p, x) == doctest::Approx(forward(spec, p, x)[0]).epsilon(1e-15));
    const auto gi = input_gradient(spec, p, x);
    const auto gb = backward(spec, p, x, OutputWeightHead{{1.0}});
    for (std::size_t k = 0; k < x.size(); ++k)
        CHECK(gi[k] == doctest::Approx(gb.input_grad[k]).epsilon(1e-15));
}

TEST_CASE("grad_norm_penalty value and parameter gradient") {
    const auto spec = toy_spec(Activation::tanh, OutputKind::scalar, {2, 5, 1});
    const auto p = init_params(spec, 11);
    const std::vector<double> x = {0.25, -0.6};

    auto norm_of = [&](const Parameters& q) {
        const auto g = input_gradient(spec, q, x);
        double s = 0.0;
        for (double v : g) s += v * v;
        return std::sqrt(s);
    };
    const auto pen = grad_norm_penalty(spec, p, x);
    const double n = norm_of(p);
    CHECK(pen.value == doctest::Approx((n - 1.0) * (n - 1.0)).epsilon(1e-12));

    const double h = 1e-6;
    for (std::size_t k = 0; k < p.values.size(); ++k) {
        Parameters lo = p, hi = p;
        hi.values[k] += h;
        lo.values[k] -= h;
        const double flo = (norm_of(lo) - 1.0) * (norm_of(lo) - 1.0);
        const double fhi = (norm_of(hi) - 1.0) * (norm_of(hi) - 1.0);
        CHECK(pen.param_grad[k] ==
              doctest::Approx((fhi - flo) / (2 * h)).epsilon(1e-4).scale(1.0));
    }
}

TEST_CASE("sgd step is exact descent") {
    Parameters p;
    p.values = {1.0, -2.0, 0.5};
    auto st = make_optimizer({OptimizerKind::sgd, 0.25}, p.values.size());
    optimizer_step(st, p, std::vector<double>{4.0, -8.0, 0.0});
    CHECK(p.values[0] == 0.0);
    CHECK(p.values[1] == 0.0);
    CHECK(p.values[2] == 0.5);
}

TEST_CASE("adam follows the bias-corrected recurrence") {
    const OptimizerConfig cfg{OptimizerKind::adam, 0.1, 0.5, 0.999, 1e-8};
    Parameters p;
    p.values = {1.0, -2.0};
    auto st = make_optimizer(cfg, 2);

    std::vector<double> theta = {1.0, -2.0};
    std::vector<double> m(2, 0.0), v(2, 0.0);
    const std::vector<std::vector<double>> grads = {{0.5, -1.5}, {-0.25, 2.0}, {1.0, 1.0}};
    for (std::size_t t = 1; t <= grads.size(); ++t) {
        optimizer_step(st, p, grads[t - 1]);
        for (int k = 0; k < 2; ++k) {
            const double g = grads[t - 1][static_cast<std::size_t>(k)];
            m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g * g;
            const double mb = m[k] / (1 - std::pow(cfg.beta1, static_cast<double>(t)));
            const double vb = v[k] / (1 - std::pow(cfg.beta2, static_cast<double>(t)));
            theta[k] -= cfg.learning_rate * mb / (std::sqrt(vb) + cfg.epsilon);
            CHECK(p.values[static_cast<std::size_t>(k)] ==
                  doctest::Approx(theta[k]).epsilon(1e-12));
        }
    }
}

TEST_CASE("parameter blob round trip and integrity checks") {
    const auto spec = toy_spec(Activation::relu, OutputKind::logits, {4, 6, 3});
    const auto p = init_params(spec, 77);
    auto blob = serialize_params(spec, p);
    REQUIRE(blob.size() >= 8);
    CHECK(std::memcmp(blob.data(), "IWDNET1\0", 8) == 0);

    const auto loaded = deserialize_params(blob);
    CHECK(loaded.layer_widths == spec.layer_widths);
    REQUIRE(loaded.params.values.size() == p.values.size());
    CHECK(std::memcmp(loaded.params.values.data(), p.values.data(),
                      p.values.size() * sizeof(double)) == 0);

    auto bad = blob;
    bad[3] ^= 0xFF;
    CHECK_THROWS_AS((void)deserialize_params(bad), IoError);
    auto cut = blob;
    cut.resize(cut.size() - 9);
    CHECK_THROWS_AS((void)deserialize_params(cut), IoError);
}

TEST_CASE("save/load round trips through a file") {
    const auto spec = toy_spec(Activation::tanh, OutputKind::scalar, {3, 3, 1});
    const auto p = init_params(spec, 3);
    const std::string path = "diffcore_roundtrip.bin";
    save_params(spec, p, path);
    const auto loaded = load_params(path);
    CHECK(loaded.layer_widths == spec.layer_widths);
    CHECK(loaded.params.values == p.values);
    CHECK_THROWS_AS((void)load_params("no_such_params.bin"), IoError);
    std::remove(path.c_str());
}

TEST_CASE("spec validation rejects malformed shapes") {
    CHECK_THROWS_AS(toy_spec(Activation::relu, OutputKind::logits, {3}).validate(),
                    ValidationError);
    CHECK_THROWS_AS(toy_spec(Activation::relu, OutputKind::logits, {3, 0, 2}).validate(),
                    ValidationError);
    CHECK_THROWS_AS(toy_spec(Activation::relu, OutputKind::scalar, {3, 4, 2}).validate(),
                    ValidationError);
}
