#include "iwd/defense.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>

#include "iwd/digest.hpp"
#include "iwd/rng.hpp"
#include "iwd/transport.hpp"

namespace iwd::defense {

attack::AttackConfig default_inner_attack() {
    attack::AttackConfig inner;
    inner.max_iterations = 20;
    inner.n_critic = 5;
    return inner;
}

void DefenseConfig::validate() const {
    if (!(beta >= 0.0) || !std::isfinite(beta))
        throw ValidationError("defense: beta must be finite and >= 0");
    if (epochs < 1) throw ValidationError("defense: epochs must be >= 1");
    if (batch < 1) throw ValidationError("defense: batch size must be >= 1");
    inner.validate(2); // class-independent fields; untargeted inner attack
    if (inner.mode != attack::AttackMode::untargeted)
        throw ValidationError("defense: the inner attack must be untargeted");
}

double accuracy(const Classifier& h, std::span<const Image> images, std::span<const int> labels) {
    if (images.empty() || images.size() != labels.size())
        throw ValidationError("accuracy: need equally many images and labels");
    int correct = 0;
    for (std::size_t i = 0; i < images.size(); ++i)
        if (h.predict(images[i]) == labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(images.size());
}

namespace {

void check_training_inputs(std::span<const Image> images, std::span<const int> labels,
                           const diffcore::NetworkSpec& spec) {
    if (images.empty() || images.size() != labels.size())
        throw ValidationError("train: need equally many images and labels");
    spec.validate();
    if (spec.output != diffcore::OutputKind::logits)
        throw ValidationError("train: classifier spec must output logits");
    const int classes = spec.output_width();
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (static_cast<int>(images[i].pixels.size()) != spec.input_width())
            throw ValidationError("train: image " + std::to_string(i) +
                                  " does not match the network input width");
        if (labels[i] < 0 || labels[i] >= classes)
            throw ValidationError("train: label " + std::to_string(labels[i]) +
                                  " out of range at index " + std::to_string(i));
    }
}

struct InnerAttackState {
    transport::CriticState critic;
    diffcore::OptimizerState critic_opt;
};

// One short critic-based attack over a whole batch: the shared critic ascends
// on all (clean, perturbed) patch pairs, each image's perturbation descends on
// its own similarity + classification term.
std::vector<Image> attack_batch(const Classifier& h, std::span<const Image* const> xs,
                                std::span<const int> ys, const attack::AttackConfig& inner,
                                InnerAttackState& st, std::uint64_t batch_seed) {
    const std::size_t k = xs.size();
    const std::size_t npix = xs[0]->pixels.size();

    std::vector<patchdist::PatchDistribution> mus(k), nus(k);
    std::vector<diffcore::Parameters> deltas(k);
    std::vector<diffcore::OptimizerState> pert_opts;
    pert_opts.reserve(k);
    std::vector<Image> xts(k);
    for (std::size_t i = 0; i < k; ++i) {
        mus[i] = patchdist::extract_patches(*xs[i], inner.grid);
        deltas[i].values.assign(npix, 0.0);
        if (inner.init_noise > 0.0) {
            rng::Rng g(rng::mix(batch_seed, 0x200 + i));
            for (auto& d : deltas[i].values) d = inner.init_noise * g.normal();
        }
        pert_opts.push_back(diffcore::make_optimizer(inner.optimizer, npix));
        xts[i] = *xs[i];
    }
    const auto apply = [&](std::size_t i) {
        for (std::size_t p = 0; p < npix; ++p) {
            const double v = xs[i]->pixels[p] + deltas[i].values[p];
            xts[i].pixels[p] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        }
    };
    for (std::size_t i = 0; i < k; ++i) apply(i);

    rng::Rng gen(rng::mix(batch_seed, 0x77));
    std::vector<transport::CriticPair> pairs(k);
    std::vector<double> descent, grad(npix);
    for (int it = 0; it < inner.max_iterations; ++it) {
        for (std::size_t i = 0; i < k; ++i) {
            nus[i] = patchdist::extract_patches(xts[i], inner.grid);
            pairs[i] = {&mus[i], &nus[i]};
        }
        for (int s = 0; s < inner.n_critic; ++s) {
            const auto obj = transport::critic_objective_grad(st.critic, pairs, gen);
            descent.assign(obj.ascent_grad.size(), 0.0);
            for (std::size_t p = 0; p < descent.size(); ++p) descent[p] = -obj.ascent_grad[p];
            diffcore::optimizer_step(st.critic_opt, st.critic.params, descent);
        }
        for (std::size_t i = 0; i < k; ++i) {
            const auto sim = attack::critic_similarity(st.critic, xts[i], inner.grid, nus[i]);
            const auto bwd = diffcore::backward(h.spec, h.params, xts[i].pixels,
                                                diffcore::CrossEntropyHead{ys[i]});
            for (std::size_t p = 0; p < npix; ++p)
                grad[p] = sim.pixel_grad[p] - inner.tau * bwd.input_grad[p];
            diffcore::optimizer_step(pert_opts[i], deltas[i], grad);
            apply(i);
        }
    }
    return xts;
}

std::uint64_t hash_config(const diffcore::NetworkSpec& spec, const DefenseConfig& cfg,
                          bool adversarial) {
    std::ostringstream os;
    os.precision(17);
    os << (adversarial ? "iwdd" : "natural");
    for (int w : spec.layer_widths) os << '|' << w;
    os << '|' << static_cast<int>(spec.activation) << '|' << cfg.beta << '|' << cfg.epochs << '|'
       << cfg.batch << '|' << static_cast<int>(cfg.optimizer.kind) << '|'
       << cfg.optimizer.learning_rate << '|' << cfg.seed;
    if (adversarial)
        os << "|inner:" << cfg.inner.tau << '|' << cfg.inner.lambda << '|' << cfg.inner.n_critic
           << '|' << cfg.inner.max_iterations << '|' << cfg.inner.eps_w << '|'
           << cfg.inner.init_noise << '|' << cfg.inner.grid.kernel << '|' << cfg.inner.grid.stride;
    return digest::fnv1a64(os.str());
}

TrainedModel train_core(std::span<const Image> images, std::span<const int> labels,
                        const diffcore::NetworkSpec& spec, const DefenseConfig& cfg,
                        bool adversarial) {
    check_training_inputs(images, labels, spec);
    const std::size_t n = images.size();

    TrainedModel out;
    out.classifier.spec = spec;
    out.classifier.params = diffcore::init_params(spec, rng::mix(cfg.seed, 0x11D));
    out.seed = cfg.seed;
    out.config_hash = hash_config(spec, cfg, adversarial);
    auto opt = diffcore::make_optimizer(cfg.optimizer, out.classifier.params.values.size());

    InnerAttackState st{
        transport::make_critic(cfg.inner.grid.kernel * cfg.inner.grid.kernel *
                                   (images.empty() ? 1 : images[0].channels),
                               rng::mix(cfg.seed, 0xC5), cfg.inner.lambda, cfg.inner.n_critic),
        diffcore::OptimizerState{}};
    st.critic_opt = diffcore::make_optimizer(cfg.inner.optimizer, st.critic.params.values.size());

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> grad(out.classifier.params.values.size());
    int total_batches = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng::Rng shuf(rng::mix(cfg.seed, 0x5E00ull + static_cast<std::uint64_t>(epoch)));
        shuf.shuffle(order);
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch));
            const std::size_t bsize = stop - start;
            ++total_batches;

            std::vector<const Image*> xs(bsize);
            std::vector<int> ys(bsize);
            for (std::size_t i = 0; i < bsize; ++i) {
                xs[i] = &images[static_cast<std::size_t>(order[start + i])];
                ys[i] = labels[static_cast<std::size_t>(order[start + i])];
            }

            std::vector<Image> advs;
            if (adversarial) {
                try {
                    advs = attack_batch(out.classifier, xs, ys, cfg.inner, st,
                                        rng::mix(cfg.seed, 0xA800ull + total_batches));
                } catch (const NumericError& e) {
                    ++out.skipped_batches;
                    std::cerr << "iwdd_train: inner attack failed on batch " << total_batches
                              << " (" << e.what() << "); batch skipped\n";
                    continue;
                }
            }

            // per-sample fused accumulation keeps the identity-attacker case an
            // exact (1+beta) rescaling of the natural gradient
            std::fill(grad.begin(), grad.end(), 0.0);
            const double clean_w = (adversarial ? cfg.beta : 1.0) / static_cast<double>(bsize);
            const double adv_w = 1.0 / static_cast<double>(bsize);
            for (std::size_t i = 0; i < bsize; ++i) {
                const auto bwd = diffcore::backward(spec, out.classifier.params, xs[i]->pixels,
                                                    diffcore::CrossEntropyHead{ys[i]});
                if (adversarial) {
                    const auto abwd = diffcore::backward(spec, out.classifier.params,
                                                         advs[i].pixels,
                                                         diffcore::CrossEntropyHead{ys[i]});
                    for (std::size_t p = 0; p < grad.size(); ++p) {
                        const double contrib =
                            clean_w * bwd.param_grad[p] + adv_w * abwd.param_grad[p];
                        grad[p] += contrib;
                    }
                } else {
                    for (std::size_t p = 0; p < grad.size(); ++p)
                        grad[p] += clean_w * bwd.param_grad[p];
                }
            }
            diffcore::optimizer_step(opt, out.classifier.params, grad);
        }
        out.epochs_completed = epoch + 1;
    }

    if (adversarial && out.skipped_batches * 10 > total_batches)
        throw NumericError("iwdd_train: " + std::to_string(out.skipped_batches) + " of " +
                           std::to_string(total_batches) + " batches skipped (over 10%)");
    out.train_accuracy = accuracy(out.classifier, images, labels);
    return out;
}

} // namespace

TrainedModel natural_train(std::span<const Image> images, std::span<const int> labels,
                           const diffcore::NetworkSpec& spec,
                           const diffcore::OptimizerConfig& optimizer, int epochs, int batch,
                           std::uint64_t seed) {
    if (epochs < 0) throw ValidationError("natural_train: epochs must be >= 0");
    if (batch < 1) throw ValidationError("natural_train: batch size must be >= 1");
    DefenseConfig cfg;
    cfg.beta = 0.0;
    cfg.epochs = epochs;
    cfg.batch = batch;
    cfg.optimizer = optimizer;
    cfg.seed = seed;
    if (epochs == 0) { // initial parameters, untouched
        check_training_inputs(images, labels, spec);
        TrainedModel out;
        out.classifier.spec = spec;
        out.classifier.params = diffcore::init_params(spec, rng::mix(seed, 0x11D));
        out.seed = seed;
        out.config_hash = hash_config(spec, cfg, false);
        out.train_accuracy = accuracy(out.classifier, images, labels);
        return out;
    }
    return train_core(images, labels, spec, cfg, false);
}

TrainedModel iwdd_train(std::span<const Image> images, std::span<const int> labels,
                        const diffcore::NetworkSpec& spec, const DefenseConfig& cfg) {
    cfg.validate();
    return train_core(images, labels, spec, cfg, true);
}

double empirical_adversarial_risk(const Classifier& h, std::span<const Image> images,
                                  std::span<const int> labels, const attack::Attacker& attacker,
                                  double beta) {
    if (images.empty() || images.size() != labels.size())
        throw ValidationError("empirical_adversarial_risk: need a nonempty labeled dataset");
    if (!(beta >= 0.0)) throw ValidationError("empirical_adversarial_risk: beta must be >= 0");
    double total = 0.0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const double clean = diffcore::cross_entropy(h.logits(images[i]), labels[i]);
        const Image xt = attacker(images[i], labels[i]);
        const double adv = diffcore::cross_entropy(h.logits(xt), labels[i]);
        total += beta * clean + adv;
    }
    return total / static_cast<double>(images.size());
}

RiskReport evaluate_defense(const Classifier& h, std::span<const NamedAttacker> attackers,
                            std::span<const Image> images, std::span<const int> labels,
                            double beta) {
    if (attackers.empty()) throw ValidationError("evaluate_defense: need at least one attacker");
    if (images.empty() || images.size() != labels.size())
        throw ValidationError("evaluate_defense: need a nonempty labeled dataset");

    RiskReport rep;
    rep.beta = beta;
    std::vector<char> eligible(images.size(), 0);
    int correct = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (h.predict(images[i]) == labels[i]) {
            eligible[i] = 1;
            ++correct;
        }
    }
    rep.clean_accuracy = static_cast<double>(correct) / static_cast<double>(images.size());
    rep.clean_error = 1.0 - rep.clean_accuracy;

    for (const auto& atk : attackers) {
        int still_correct = 0;
        for (std::size_t i = 0; i < images.size(); ++i) {
            if (!eligible[i]) continue; // already misclassified clean
            const Image xt = atk.fn(images[i], labels[i]);
            if (h.predict(xt) == labels[i]) ++still_correct;
        }
        rep.adversarial_accuracy.emplace_back(
            atk.name, static_cast<double>(still_correct) / static_cast<double>(images.size()));
    }
    rep.empirical_risk =
        empirical_adversarial_risk(h, images, labels, attackers.back().fn, beta);
    return rep;
}

} // namespace iwd::defense
