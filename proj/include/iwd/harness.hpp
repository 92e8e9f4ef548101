#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "iwd/defense.hpp"
#include "iwd/errors.hpp"
#include "iwd/patchdist.hpp"

namespace iwd::harness {

using patchdist::Image;
using patchdist::PatchGrid;

struct SyntheticParams {
    int classes = 2;
    int per_class = 100;
    int height = 12;
    int width = 12;
    double sigma = 0.05;    // pixel noise; 0 repeats each class template exactly
    double contrast = 0.09; // stripe amplitude around mid-gray; sets class margins

    void validate() const;
};

struct Dataset {
    std::vector<Image> images;
    std::vector<int> labels;
    int class_count = 0;
    std::string split;      // train | test | ""
    std::string provenance; // synthetic(...) or idx(...)

    std::size_t size() const { return images.size(); }
    void validate() const;
};

// Oriented stripe textures, one frequency/orientation pair per class, noise
// sigma, quantized to the 1/255 grid so IDX round trips are exact.
Dataset generate_synthetic(std::uint64_t seed, const SyntheticParams& params);

Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

Image checkerboard_image(int height, int width, int tile);

enum class BallMetric { iwd, linf };

// Empirical lower bound on the L2 diameter of the budget ball around x:
// iwd samples patch permutations (distance 0 <= eps), linf samples box noise.
double estimate_ball_diameter(const Image& x, double eps, BallMetric metric, int samples,
                              std::uint64_t seed, const PatchGrid& grid = {});

enum class ExperimentKind {
    attack_table,
    defense_table,
    perturbation_histogram,
    ablation_tau,
    ablation_beta,
    theorem1_demo
};

const char* experiment_kind_name(ExperimentKind k);
ExperimentKind parse_experiment_kind(const std::string& name);

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::attack_table;
    std::string out_dir = ".";
    std::uint64_t seed = 0;
    int threads = 1; // accepted and recorded; execution is serial and thread-count independent

    SyntheticParams data;              // used when idx paths are empty
    std::string idx_images, idx_labels; // optional external data (resolved via IWD_DATA_DIR)
    std::string model_path;            // optional pretrained model; empty = train here

    std::vector<double> sweep; // ablation values; defaults filled per kind
    int train_per_class = 150;
    int test_per_class = 100;
    int epochs = 30;       // natural training
    int iwdd_epochs = 15;  // adversarial training
    int batch = 32;
    int attack_images = 200; // evaluation subset cap
    int restarts = 1;        // per-attacker restarts for the worst-case column
    int seeds = 1;           // ablation repetitions

    void validate() const;
};

std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const std::string& text);

// Runs one experiment, writes CSV/JSON reports plus a manifest into out_dir,
// returns the written paths. Completed runs (matching manifest and content
// hashes) are not recomputed; intermediate models are reused when present.
std::vector<std::string> run_experiment(const ExperimentConfig& cfg);

// TrainedModel file I/O: parameter blob at path, provenance sidecar at
// path + ".meta.json" (holds activation, provenance, accuracy).
void save_model(const defense::TrainedModel& model, const std::string& path);
defense::TrainedModel load_model(const std::string& path);

// $IWD_DATA_DIR/<path> for relative paths when the variable is set
std::string resolve_data_path(const std::string& path);

// report formatting: '.' decimal, 6 significant digits; percentages fixed 2
std::string format_number(double v);
std::string format_percent(double fraction);

} // namespace iwd::harness
