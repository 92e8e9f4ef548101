#include "iwd/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "iwd/rng.hpp"

namespace iwd::attack {

namespace {

double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

} // namespace

void Classifier::validate() const {
    spec.validate();
    if (spec.output != diffcore::OutputKind::logits)
        throw ValidationError("classifier: output head must be logits");
    if (params.values.size() != spec.param_count())
        throw ValidationError("classifier: parameter count mismatch");
}

std::vector<double> Classifier::logits(const Image& x) const {
    if (static_cast<int>(x.pixels.size()) != spec.input_width())
        throw ValidationError("classifier: image has " + std::to_string(x.pixels.size()) +
                              " values, network expects " + std::to_string(spec.input_width()));
    return diffcore::forward(spec, params, x.pixels);
}

int Classifier::predict(const Image& x) const {
    const auto z = logits(x);
    int best = 0;
    for (int k = 1; k < static_cast<int>(z.size()); ++k)
        if (z[static_cast<std::size_t>(k)] > z[static_cast<std::size_t>(best)]) best = k;
    return best;
}

Classifier make_classifier(int input_dim, int classes, std::uint64_t seed) {
    if (input_dim < 1 || classes < 2)
        throw ValidationError("make_classifier: need input_dim >= 1 and classes >= 2");
    Classifier h;
    h.spec.layer_widths = {input_dim, 256, 128, classes};
    h.spec.activation = diffcore::Activation::relu;
    h.spec.output = diffcore::OutputKind::logits;
    h.params = diffcore::init_params(h.spec, seed);
    return h;
}

void AttackConfig::validate(int class_count) const {
    if (!(tau >= 0.0) || !std::isfinite(tau))
        throw ValidationError("attack: tau must be finite and >= 0");
    if (!(lambda > 0.0)) throw ValidationError("attack: lambda must be > 0");
    if (n_critic < 1) throw ValidationError("attack: n_critic must be >= 1");
    if (max_iterations < 0) throw ValidationError("attack: max_iterations must be >= 0");
    if (!(eps_w >= 0.0)) throw ValidationError("attack: eps_w must be >= 0");
    if (!(init_noise >= 0.0)) throw ValidationError("attack: init_noise must be >= 0");
    if (mode == AttackMode::targeted && (target < 0 || target >= class_count))
        throw ValidationError("attack: target class " + std::to_string(target) +
                              " out of range [0, " + std::to_string(class_count) + ")");
    if (grid.kernel < 1 || grid.stride < 1)
        throw ValidationError("attack: patch grid needs kernel >= 1 and stride >= 1");
}

double classification_loss_term(const Classifier& h, const Image& xt, int label_or_target,
                                AttackMode mode) {
    const auto z = h.logits(xt);
    if (label_or_target < 0 || label_or_target >= static_cast<int>(z.size()))
        throw ValidationError("classification_loss_term: label out of range");
    const double ce = diffcore::cross_entropy(z, label_or_target);
    return mode == AttackMode::untargeted ? -ce : ce;
}

namespace {

// Adds scale * atom_grad onto the image-pixel gradient under the patch layout
// used by extract_patches (patches row-major, dims ordered dy, dx, channel).
void scatter_patch_grad(const Image& img, const PatchGrid& grid, int patch_index,
                        std::span<const double> atom_grad, std::vector<double>& pixel_grad,
                        double scale) {
    const int cols = grid.cols(img);
    const int y0 = (patch_index / cols) * grid.stride;
    const int x0 = (patch_index % cols) * grid.stride;
    std::size_t d = 0;
    for (int dy = 0; dy < grid.kernel; ++dy)
        for (int dx = 0; dx < grid.kernel; ++dx)
            for (int c = 0; c < img.channels; ++c, ++d) {
                const std::size_t p =
                    (static_cast<std::size_t>(y0 + dy) * img.width + (x0 + dx)) * img.channels + c;
                pixel_grad[p] += scale * atom_grad[d];
            }
}

// Debiased entropic transport surrogate V(mu,nu) - (V(mu,mu) + V(nu,nu)) / 2
// with unrolled gradients; exactly stationary (and zero) at nu == mu.
SimilarityTerm primal_similarity(const patchdist::PatchDistribution& mu,
                                 const patchdist::PatchDistribution& nu, const Image& xt,
                                 const PatchGrid& grid) {
    SimilarityTerm out;
    out.pixel_grad.assign(xt.pixels.size(), 0.0);
    const auto cross = transport::ground_cost(mu, nu);
    const double maxc = cross.max();
    if (maxc <= 0.0) return out; // identical atom sets; flat optimum

    constexpr int kUnrollIters = 50;
    const double eps = 0.05 * maxc;
    const int n = mu.count();
    const auto a = transport::uniform_weights(n);
    const auto u1 = transport::sinkhorn_unrolled_grad(cross, a, a, eps, kUnrollIters);
    const auto self_mu = transport::ground_cost(mu, mu);
    const auto self_nu = transport::ground_cost(nu, nu);
    const auto u2 = transport::sinkhorn_unrolled_grad(self_mu, a, a, eps, kUnrollIters);
    const auto u3 = transport::sinkhorn_unrolled_grad(self_nu, a, a, eps, kUnrollIters);
    out.value = u1.value - 0.5 * (u2.value + u3.value);

    const int dim = nu.atom_dim;
    std::vector<double> atom_grad(static_cast<std::size_t>(dim));
    for (int k = 0; k < n; ++k) {
        const auto& vk = nu.atoms[static_cast<std::size_t>(k)];
        for (int d = 0; d < dim; ++d) {
            double cross_term = 0.0;
            for (int i = 0; i < n; ++i)
                cross_term += u1.cost_grad[static_cast<std::size_t>(i) * n + k] *
                              sgn(vk[static_cast<std::size_t>(d)] -
                                  mu.atoms[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)]);
            double self_row = 0.0, self_col = 0.0;
            for (int j = 0; j < n; ++j)
                self_row += u3.cost_grad[static_cast<std::size_t>(k) * n + j] *
                            sgn(vk[static_cast<std::size_t>(d)] -
                                nu.atoms[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)]);
            for (int i = 0; i < n; ++i)
                self_col += u3.cost_grad[static_cast<std::size_t>(i) * n + k] *
                            sgn(vk[static_cast<std::size_t>(d)] -
                                nu.atoms[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)]);
            atom_grad[static_cast<std::size_t>(d)] = cross_term - 0.5 * (self_row + self_col);
        }
        scatter_patch_grad(xt, grid, k, atom_grad, out.pixel_grad, 1.0);
    }
    return out;
}

double exact_iwd_between(const patchdist::PatchDistribution& mu,
                         const patchdist::PatchDistribution& nu) {
    const auto cost = transport::ground_cost(mu, nu);
    const auto a = transport::uniform_weights(cost.n);
    const auto b = transport::uniform_weights(cost.m);
    return transport::exact_w1(cost, a, b).value;
}

AttackResult run_attack(const Image& x, int y, const Classifier& h, const AttackConfig& cfg,
                        bool primal) {
    x.validate();
    h.validate();
    cfg.validate(h.class_count());
    cfg.grid.validate(x);
    if (static_cast<int>(x.pixels.size()) != h.spec.input_width())
        throw ValidationError("attack: image shape does not match the classifier input");
    if (y < 0 || y >= h.class_count())
        throw ValidationError("attack: label out of range");

    const std::size_t npix = x.pixels.size();
    rng::Rng gen(rng::mix(cfg.seed, 0xA77ACC));
    diffcore::Parameters delta;
    delta.values.assign(npix, 0.0);
    if (cfg.init_noise > 0.0)
        for (auto& d : delta.values) d = cfg.init_noise * gen.normal();

    const auto mu = patchdist::extract_patches(x, cfg.grid);
    auto critic = transport::make_critic(mu.atom_dim, rng::mix(cfg.seed, 0xC817), cfg.lambda,
                                         cfg.n_critic);
    auto critic_opt = diffcore::make_optimizer(cfg.optimizer, critic.params.values.size());
    auto pert_opt = diffcore::make_optimizer(cfg.optimizer, npix);

    Image xt = x;
    const auto apply = [&] {
        for (std::size_t p = 0; p < npix; ++p)
            xt.pixels[p] = clamp01(x.pixels[p] + delta.values[p]);
    };
    apply();

    AttackResult res;
    const int lbl = cfg.mode == AttackMode::targeted ? cfg.target : y;
    const double csign = cfg.mode == AttackMode::targeted ? 1.0 : -1.0;
    std::vector<double> grad(npix), descent;
    // the iterate chain keeps drifting after the first label flip, so remember
    // the cheapest flip seen and stop early once one fits the budget
    double best_iwd = std::numeric_limits<double>::infinity();
    std::vector<double> best_pixels;

    for (int it = 1; it <= cfg.max_iterations; ++it) {
        res.iterations = it;
        auto nu = patchdist::extract_patches(xt, cfg.grid);

        if (!primal) {
            const transport::CriticPair pair{&mu, &nu};
            for (int s = 0; s < cfg.n_critic; ++s) {
                const auto obj = transport::critic_objective_grad(critic, {&pair, 1}, gen);
                descent.assign(obj.ascent_grad.size(), 0.0);
                for (std::size_t k = 0; k < descent.size(); ++k) descent[k] = -obj.ascent_grad[k];
                diffcore::optimizer_step(critic_opt, critic.params, descent);
            }
        }

        const auto sim = primal ? primal_similarity(mu, nu, xt, cfg.grid)
                                : critic_similarity(critic, xt, cfg.grid, nu);
        const auto bwd = diffcore::backward(h.spec, h.params, xt.pixels,
                                            diffcore::CrossEntropyHead{lbl});
        res.similarity_loss = sim.value;
        res.class_loss = csign * bwd.loss;

        // clip passes the gradient straight through so saturated pixels can recover
        for (std::size_t p = 0; p < npix; ++p)
            grad[p] = sim.pixel_grad[p] + cfg.tau * csign * bwd.input_grad[p];
        diffcore::optimizer_step(pert_opt, delta, grad);
        apply();

        const int pred = h.predict(xt);
        const bool flipped =
            cfg.mode == AttackMode::targeted ? pred == cfg.target : pred != y;
        if (flipped) {
            const double now = exact_iwd_between(mu, patchdist::extract_patches(xt, cfg.grid));
            if (now < best_iwd) {
                best_iwd = now;
                best_pixels = xt.pixels;
            }
            if (best_iwd <= cfg.eps_w + 1e-6) break;
        }
    }
    if (!best_pixels.empty()) xt.pixels = std::move(best_pixels);

    res.adversarial = xt;
    res.predicted = h.predict(xt);
    res.success = cfg.mode == AttackMode::targeted ? res.predicted == cfg.target
                                                   : res.predicted != y;
    res.iwd_exact = exact_iwd_between(mu, patchdist::extract_patches(xt, cfg.grid));
    res.budget_satisfied = res.iwd_exact <= cfg.eps_w + 1e-6;
    res.l2 = l2_distance(x, xt);
    res.linf = linf_distance(x, xt);
    return res;
}

} // namespace

SimilarityTerm critic_similarity(const transport::CriticState& critic, const Image& xt,
                                 const PatchGrid& grid,
                                 const patchdist::PatchDistribution& nu) {
    SimilarityTerm out;
    out.pixel_grad.assign(xt.pixels.size(), 0.0);
    const int n = nu.count();
    const double w = 1.0 / static_cast<double>(n);
    for (int j = 0; j < n; ++j) {
        out.value -= w * diffcore::scalar_value(critic.spec, critic.params,
                                                nu.atoms[static_cast<std::size_t>(j)]);
        const auto g = diffcore::input_gradient(critic.spec, critic.params,
                                                nu.atoms[static_cast<std::size_t>(j)]);
        scatter_patch_grad(xt, grid, j, g, out.pixel_grad, -w);
    }
    return out;
}

AttackResult iwda_attack(const Image& x, int y, const Classifier& h, const AttackConfig& cfg) {
    AttackConfig c = cfg;
    c.variant = AttackVariant::dual;
    return run_attack(x, y, h, c, false);
}

AttackResult iwda_primal_attack(const Image& x, int y, const Classifier& h,
                                const AttackConfig& cfg) {
    AttackConfig c = cfg;
    c.variant = AttackVariant::primal;
    return run_attack(x, y, h, c, true);
}

Image fgsm(const Image& x, int y, const Classifier& h, double eps) {
    x.validate();
    h.validate();
    if (!(eps >= 0.0)) throw ValidationError("fgsm: eps must be >= 0");
    if (y < 0 || y >= h.class_count()) throw ValidationError("fgsm: label out of range");
    const auto bwd =
        diffcore::backward(h.spec, h.params, x.pixels, diffcore::CrossEntropyHead{y});
    Image xt = x;
    for (std::size_t p = 0; p < xt.pixels.size(); ++p)
        xt.pixels[p] = clamp01(x.pixels[p] + eps * sgn(bwd.input_grad[p]));
    return xt;
}

Image pgd(const Image& x, int y, const Classifier& h, double eps, double alpha, int k) {
    x.validate();
    h.validate();
    if (!(eps >= 0.0) || !(alpha >= 0.0)) throw ValidationError("pgd: eps and alpha must be >= 0");
    if (k < 1) throw ValidationError("pgd: iteration count must be >= 1");
    if (y < 0 || y >= h.class_count()) throw ValidationError("pgd: label out of range");
    Image xt = x;
    for (int it = 0; it < k; ++it) {
        const auto bwd =
            diffcore::backward(h.spec, h.params, xt.pixels, diffcore::CrossEntropyHead{y});
        for (std::size_t p = 0; p < xt.pixels.size(); ++p) {
            double v = xt.pixels[p] + alpha * sgn(bwd.input_grad[p]);
            v = std::min(std::max(v, x.pixels[p] - eps), x.pixels[p] + eps);
            xt.pixels[p] = clamp01(v);
        }
    }
    return xt;
}

double asr(const Attacker& attacker, const Classifier& h, std::span<const Image> images,
           std::span<const int> labels, AttackMode mode, int target) {
    if (images.empty() || images.size() != labels.size())
        throw ValidationError("asr: need equally many images and labels");
    int eligible = 0, flipped = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (h.predict(images[i]) != labels[i]) continue;
        ++eligible;
        const Image xt = attacker(images[i], labels[i]);
        const int pred = h.predict(xt);
        if (mode == AttackMode::targeted ? pred == target : pred != labels[i]) ++flipped;
    }
    if (eligible == 0)
        throw ValidationError("asr: classifier labels no sample correctly; nothing to attack");
    return static_cast<double>(flipped) / static_cast<double>(eligible);
}

double default_budget(std::span<const Image> images, std::span<const int> labels,
                      const PatchGrid& grid, std::uint64_t seed, int pairs) {
    if (images.empty() || images.size() != labels.size())
        throw ValidationError("default_budget: need equally many images and labels");
    if (pairs < 1) throw ValidationError("default_budget: pairs must be >= 1");
    std::vector<std::vector<int>> by_class;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const int y = labels[i];
        if (y < 0) throw ValidationError("default_budget: negative label");
        if (y >= static_cast<int>(by_class.size())) by_class.resize(static_cast<std::size_t>(y) + 1);
        by_class[static_cast<std::size_t>(y)].push_back(static_cast<int>(i));
    }
    std::vector<int> usable;
    for (std::size_t c = 0; c < by_class.size(); ++c)
        if (by_class[c].size() >= 2) usable.push_back(static_cast<int>(c));
    if (usable.empty())
        throw ValidationError("default_budget: no class has two or more images");

    rng::Rng gen(rng::mix(seed, 0xB4D6E7));
    double total = 0.0;
    for (int p = 0; p < pairs; ++p) {
        const int c = usable[static_cast<std::size_t>(
            gen.uniform_int(0, static_cast<int>(usable.size()) - 1))];
        const auto& pool = by_class[static_cast<std::size_t>(c)];
        const int i = gen.uniform_int(0, static_cast<int>(pool.size()) - 1);
        int j = gen.uniform_int(0, static_cast<int>(pool.size()) - 2);
        if (j >= i) ++j;
        const auto mu = patchdist::extract_patches(images[static_cast<std::size_t>(pool[static_cast<std::size_t>(i)])], grid);
        const auto nu = patchdist::extract_patches(images[static_cast<std::size_t>(pool[static_cast<std::size_t>(j)])], grid);
        total += exact_iwd_between(mu, nu);
    }
    return 0.5 * total / static_cast<double>(pairs);
}

double l2_distance(const Image& a, const Image& b) {
    if (a.pixels.size() != b.pixels.size())
        throw ValidationError("l2_distance: images must share geometry");
    double s = 0.0;
    for (std::size_t p = 0; p < a.pixels.size(); ++p) {
        const double d = a.pixels[p] - b.pixels[p];
        s += d * d;
    }
    return std::sqrt(s);
}

double linf_distance(const Image& a, const Image& b) {
    if (a.pixels.size() != b.pixels.size())
        throw ValidationError("linf_distance: images must share geometry");
    double s = 0.0;
    for (std::size_t p = 0; p < a.pixels.size(); ++p)
        s = std::max(s, std::abs(a.pixels[p] - b.pixels[p]));
    return s;
}

} // namespace iwd::attack
