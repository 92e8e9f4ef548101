#pragma once

#include <span>
#include <string>
#include <vector>

#include "iwd/errors.hpp"

namespace iwd::patchdist {

// Intensities in [0, 1], row-major H x W x C.
struct Image {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<double> pixels;

    double& at(int y, int x, int c) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    double at(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::size_t size() const { return pixels.size(); }
    void validate() const;
};

struct PatchGrid {
    int kernel = 3;
    int stride = 3; // defaults to non-overlapping

    static PatchGrid non_overlapping(int kernel) { return {kernel, kernel}; }
    void validate(const Image& img) const;
    int rows(const Image& img) const { return (img.height - kernel) / stride + 1; }
    int cols(const Image& img) const { return (img.width - kernel) / stride + 1; }
    int count(const Image& img) const { return rows(img) * cols(img); }
};

// Uniform-weight empirical distribution over flattened patches.
struct PatchDistribution {
    int atom_dim = 0;
    std::vector<std::vector<double>> atoms;

    int count() const { return static_cast<int>(atoms.size()); }
    double weight() const { return 1.0 / static_cast<double>(atoms.size()); }
};

// Row-major enumeration of k x k x C windows; requires the stride to tile
// the image exactly ((H-k) and (W-k) divisible by s).
PatchDistribution extract_patches(const Image& img, const PatchGrid& grid);

// Rearranges the non-overlapping tiles of img: tile i of the output is tile
// perm[i] of the input. Requires stride == kernel and an exact tiling.
Image permute_patches(const Image& img, const PatchGrid& grid, std::span<const int> perm);

// Index-aligned convex combination: atom_i = rho * p_i + (1 - rho) * q_i.
PatchDistribution patch_interpolate(const PatchDistribution& p, const PatchDistribution& q,
                                    double rho);

// Binary PGM (P5) and PPM (P6), maxval 255. Loading maps v -> v/255,
// saving rounds to nearest.
Image load_image(const std::string& path);
void save_image(const Image& img, const std::string& path);

} // namespace iwd::patchdist
