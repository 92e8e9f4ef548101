#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "iwd/attack.hpp"
#include "iwd/diffcore.hpp"
#include "iwd/errors.hpp"
#include "iwd/patchdist.hpp"

namespace iwd::defense {

using attack::Classifier;
using patchdist::Image;

// Inner per-batch attack: short fixed-iteration run, full strength is reserved
// for evaluation.
attack::AttackConfig default_inner_attack();

struct DefenseConfig {
    double beta = 0.1; // clean-loss weight
    int epochs = 200;
    int batch = 128;
    attack::AttackConfig inner = default_inner_attack();
    diffcore::OptimizerConfig optimizer{diffcore::OptimizerKind::sgd, 0.1};
    std::uint64_t seed = 0;

    void validate() const;
};

struct TrainedModel {
    Classifier classifier;
    std::uint64_t config_hash = 0;
    int epochs_completed = 0;
    std::uint64_t seed = 0;
    double train_accuracy = 0.0;
    int skipped_batches = 0;
};

struct NamedAttacker {
    std::string name;
    attack::Attacker fn;
};

struct RiskReport {
    double clean_accuracy = 0.0;
    double clean_error = 0.0;
    // attacker name -> fraction of all samples still classified correctly after attack
    std::vector<std::pair<std::string, double>> adversarial_accuracy;
    double empirical_risk = 0.0; // against the last attacker in the list
    double beta = 0.0;
};

double accuracy(const Classifier& h, std::span<const Image> images, std::span<const int> labels);

TrainedModel natural_train(std::span<const Image> images, std::span<const int> labels,
                           const diffcore::NetworkSpec& spec,
                           const diffcore::OptimizerConfig& optimizer, int epochs, int batch,
                           std::uint64_t seed);

// Adversarial training: each batch is attacked with the inner critic-based
// attack (critic warm-started across batches, perturbations reset per batch),
// then the model descends beta * clean loss + adversarial loss.
TrainedModel iwdd_train(std::span<const Image> images, std::span<const int> labels,
                        const diffcore::NetworkSpec& spec, const DefenseConfig& cfg);

// Mean over samples of beta * L(h(x), y) + L(h(attacker(x)), y).
double empirical_adversarial_risk(const Classifier& h, std::span<const Image> images,
                                  std::span<const int> labels, const attack::Attacker& attacker,
                                  double beta);

RiskReport evaluate_defense(const Classifier& h, std::span<const NamedAttacker> attackers,
                            std::span<const Image> images, std::span<const int> labels,
                            double beta = 0.1);

} // namespace iwd::defense
