#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "iwd/errors.hpp"

namespace iwd::diffcore {

enum class Activation { relu, tanh };
enum class OutputKind { logits, scalar };

// Dense feed-forward network shape. layer_widths includes the input width,
// so a spec with L widths has L-1 affine maps; hidden activations sit
// between them and the last map is linear.
struct NetworkSpec {
    std::vector<int> layer_widths;
    Activation activation = Activation::relu;
    OutputKind output = OutputKind::logits;

    void validate() const;
    int input_width() const { return layer_widths.front(); }
    int output_width() const { return layer_widths.back(); }
    std::size_t param_count() const;
};

// Flat weight vector, laid out per affine map: W (out x in, row-major)
// followed by the bias (out).
struct Parameters {
    std::vector<double> values;
};

// Glorot-uniform initialization, seeded.
Parameters init_params(const NetworkSpec& spec, std::uint64_t seed);

std::vector<double> forward(const NetworkSpec& spec, const Parameters& params,
                            std::span<const double> input);

// Numerically stable cross-entropy from raw logits.
double cross_entropy(std::span<const double> logits, int label);

// Loss heads for backward(). OutputWeightHead computes w . y (a unit weight
// on a scalar net recovers the raw critic value), SquaredOutputHead computes
// sum y_i^2, ConstantHead ignores the network output.
struct CrossEntropyHead {
    int label;
};
struct OutputWeightHead {
    std::vector<double> weights;
};
struct SquaredOutputHead {};
struct ConstantHead {
    double value;
};
using LossHead = std::variant<CrossEntropyHead, OutputWeightHead, SquaredOutputHead, ConstantHead>;

struct GradientBundle {
    double loss = 0.0;
    std::vector<double> param_grad;
    std::vector<double> input_grad;
};

GradientBundle backward(const NetworkSpec& spec, const Parameters& params,
                        std::span<const double> input, const LossHead& head);

// Scalar-output convenience wrappers used by the critic.
double scalar_value(const NetworkSpec& spec, const Parameters& params,
                    std::span<const double> input);
std::vector<double> input_gradient(const NetworkSpec& spec, const Parameters& params,
                                   std::span<const double> input);

// One-sample unit-gradient-norm penalty (||grad_x f(x)||_2 - 1)^2 together
// with its gradient w.r.t. the parameters. The parameter gradient of an
// input-gradient functional needs a forward-over-reverse sweep, which this
// implements analytically for the dense network.
struct PenaltyGrad {
    double value = 0.0;
    std::vector<double> param_grad;
};
PenaltyGrad grad_norm_penalty(const NetworkSpec& spec, const Parameters& params,
                              std::span<const double> input);

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::sgd;
    double learning_rate = 0.1;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct OptimizerState {
    OptimizerConfig cfg;
    std::int64_t step_count = 0;
    std::vector<double> m;
    std::vector<double> v;
};

OptimizerState make_optimizer(const OptimizerConfig& cfg, std::size_t n_params);

// In-place descent step; pass a negated gradient for ascent.
void optimizer_step(OptimizerState& state, Parameters& params, std::span<const double> grads);

// Binary parameter blob: magic "IWDNET1\0", u32 layer count, u32 widths,
// raw little-endian 64-bit weights. Round-trips bit-exactly.
std::vector<std::uint8_t> serialize_params(const NetworkSpec& spec, const Parameters& params);

struct LoadedParams {
    std::vector<int> layer_widths;
    Parameters params;
};
LoadedParams deserialize_params(std::span<const std::uint8_t> blob);

void save_params(const NetworkSpec& spec, const Parameters& params, const std::string& path);
LoadedParams load_params(const std::string& path);

} // namespace iwd::diffcore
