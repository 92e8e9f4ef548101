#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "iwd/diffcore.hpp"
#include "iwd/errors.hpp"
#include "iwd/patchdist.hpp"
#include "iwd/transport.hpp"

namespace iwd::attack {

using patchdist::Image;
using patchdist::PatchGrid;

// A feed-forward classifier over flattened images (logits output).
struct Classifier {
    diffcore::NetworkSpec spec;
    diffcore::Parameters params;

    void validate() const;
    int class_count() const { return spec.output_width(); }
    std::vector<double> logits(const Image& x) const;
    // argmax with ties resolved to the lowest class index
    int predict(const Image& x) const;
};

Classifier make_classifier(int input_dim, int classes, std::uint64_t seed);

enum class AttackMode { untargeted, targeted };
enum class AttackVariant { dual, primal };

struct AttackConfig {
    AttackMode mode = AttackMode::untargeted;
    int target = -1; // class index, targeted mode only
    double tau = 0.1;
    double lambda = 10.0;
    int n_critic = 5;
    int max_iterations = 100;
    // patch-transport budget audited with the exact solver; infinity = unconstrained
    double eps_w = std::numeric_limits<double>::infinity();
    double init_noise = 0.01; // scale of the seeded Gaussian start for the perturbation
    std::uint64_t seed = 0;
    diffcore::OptimizerConfig optimizer{diffcore::OptimizerKind::adam, 5e-4, 0.5, 0.999, 1e-8};
    PatchGrid grid{};
    AttackVariant variant = AttackVariant::dual;

    void validate(int class_count) const;
};

struct AttackResult {
    Image adversarial;
    bool success = false;
    bool budget_satisfied = false;
    int predicted = -1;
    double iwd_exact = 0.0; // exact-solver audit of the final image
    double l2 = 0.0;
    double linf = 0.0;
    int iterations = 0;
    double similarity_loss = 0.0;
    double class_loss = 0.0;
};

// Untargeted: negated cross-entropy to the true label. Targeted: cross-entropy
// to the target. Minimizing either pushes the classifier off the clean label.
double classification_loss_term(const Classifier& h, const Image& xt, int label_or_target,
                                AttackMode mode);

// Critic-based similarity term -mean f(patches of xt) and its pixel gradient;
// shared by the attack loop and adversarial training.
struct SimilarityTerm {
    double value = 0.0;
    std::vector<double> pixel_grad;
};
SimilarityTerm critic_similarity(const transport::CriticState& critic, const Image& xt,
                                 const PatchGrid& grid,
                                 const patchdist::PatchDistribution& nu);

// Patch-transport attack, critic-based similarity term.
AttackResult iwda_attack(const Image& x, int y, const Classifier& h, const AttackConfig& cfg);

// Patch-transport attack, entropic-plan similarity term with unrolled gradients.
AttackResult iwda_primal_attack(const Image& x, int y, const Classifier& h,
                                const AttackConfig& cfg);

Image fgsm(const Image& x, int y, const Classifier& h, double eps);

Image pgd(const Image& x, int y, const Classifier& h, double eps, double alpha, int k);

using Attacker = std::function<Image(const Image& x, int y)>;

// Fraction of correctly classified samples whose prediction the attacker flips
// (untargeted) or steers to the target (targeted).
double asr(const Attacker& attacker, const Classifier& h, std::span<const Image> images,
           std::span<const int> labels, AttackMode mode = AttackMode::untargeted,
           int target = -1);

// Half the mean exact patch-transport distance between random same-class pairs;
// the stock budget when none is given.
double default_budget(std::span<const Image> images, std::span<const int> labels,
                      const PatchGrid& grid, std::uint64_t seed, int pairs = 50);

double l2_distance(const Image& a, const Image& b);
double linf_distance(const Image& a, const Image& b);

} // namespace iwd::attack
