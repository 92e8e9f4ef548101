#include "iwd/patchdist.hpp"

#include <cmath>
#include <fstream>
#include <vector>

namespace iwd::patchdist {

void Image::validate() const {
    if (height < 1 || width < 1)
        throw ValidationError("image: empty geometry " + std::to_string(height) + "x" +
                              std::to_string(width));
    if (channels != 1 && channels != 3)
        throw ValidationError("image: channels must be 1 or 3, got " + std::to_string(channels));
    if (pixels.size() != static_cast<std::size_t>(height) * width * channels)
        throw ValidationError("image: pixel buffer size mismatch");
    for (double v : pixels)
        if (!(v >= 0.0 && v <= 1.0))
            throw ValidationError("image: intensity outside [0,1]");
}

void PatchGrid::validate(const Image& img) const {
    if (kernel < 1 || stride < 1)
        throw ValidationError("patch grid: kernel and stride must be >= 1");
    if (kernel > img.height || kernel > img.width)
        throw ValidationError("patch grid: kernel " + std::to_string(kernel) +
                              " exceeds image " + std::to_string(img.height) + "x" +
                              std::to_string(img.width));
    if ((img.height - kernel) % stride != 0 || (img.width - kernel) % stride != 0)
        throw ValidationError("patch grid: geometry H=" + std::to_string(img.height) +
                              " W=" + std::to_string(img.width) + " k=" + std::to_string(kernel) +
                              " s=" + std::to_string(stride) + " does not tile evenly");
}

PatchDistribution extract_patches(const Image& img, const PatchGrid& grid) {
    img.validate();
    grid.validate(img);
    PatchDistribution dist;
    dist.atom_dim = grid.kernel * grid.kernel * img.channels;
    dist.atoms.reserve(static_cast<std::size_t>(grid.count(img)));
    for (int py = 0; py < grid.rows(img); ++py) {
        for (int px = 0; px < grid.cols(img); ++px) {
            std::vector<double> atom;
            atom.reserve(static_cast<std::size_t>(dist.atom_dim));
            const int y0 = py * grid.stride;
            const int x0 = px * grid.stride;
            for (int dy = 0; dy < grid.kernel; ++dy)
                for (int dx = 0; dx < grid.kernel; ++dx)
                    for (int c = 0; c < img.channels; ++c)
                        atom.push_back(img.at(y0 + dy, x0 + dx, c));
            dist.atoms.push_back(std::move(atom));
        }
    }
    return dist;
}

Image permute_patches(const Image& img, const PatchGrid& grid, std::span<const int> perm) {
    img.validate();
    if (grid.stride != grid.kernel)
        throw ValidationError("permute_patches: requires a non-overlapping grid (stride == kernel)");
    if (img.height % grid.kernel != 0 || img.width % grid.kernel != 0)
        throw ValidationError("permute_patches: kernel must tile the image exactly");
    grid.validate(img);

    const int n = grid.count(img);
    if (static_cast<int>(perm.size()) != n)
        throw ValidationError("permute_patches: permutation length " +
                              std::to_string(perm.size()) + " != tile count " + std::to_string(n));
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    for (int v : perm) {
        if (v < 0 || v >= n || seen[static_cast<std::size_t>(v)])
            throw ValidationError("permute_patches: not a bijection on 0.." + std::to_string(n - 1));
        seen[static_cast<std::size_t>(v)] = 1;
    }

    const int cols = grid.cols(img);
    Image out = img;
    for (int i = 0; i < n; ++i) {
        const int src = perm[i];
        const int dy0 = (i / cols) * grid.kernel, dx0 = (i % cols) * grid.kernel;
        const int sy0 = (src / cols) * grid.kernel, sx0 = (src % cols) * grid.kernel;
        for (int dy = 0; dy < grid.kernel; ++dy)
            for (int dx = 0; dx < grid.kernel; ++dx)
                for (int c = 0; c < img.channels; ++c)
                    out.at(dy0 + dy, dx0 + dx, c) = img.at(sy0 + dy, sx0 + dx, c);
    }
    return out;
}

PatchDistribution patch_interpolate(const PatchDistribution& p, const PatchDistribution& q,
                                    double rho) {
    if (p.count() != q.count() || p.atom_dim != q.atom_dim)
        throw ValidationError("patch_interpolate: distributions have mismatched shape (" +
                              std::to_string(p.count()) + "x" + std::to_string(p.atom_dim) +
                              " vs " + std::to_string(q.count()) + "x" +
                              std::to_string(q.atom_dim) + ")");
    if (!(rho >= 0.0 && rho <= 1.0))
        throw ValidationError("patch_interpolate: rho must lie in [0,1]");
    PatchDistribution out;
    out.atom_dim = p.atom_dim;
    out.atoms.resize(p.atoms.size());
    for (std::size_t i = 0; i < p.atoms.size(); ++i) {
        out.atoms[i].resize(static_cast<std::size_t>(p.atom_dim));
        for (int d = 0; d < p.atom_dim; ++d)
            out.atoms[i][static_cast<std::size_t>(d)] =
                rho * p.atoms[i][static_cast<std::size_t>(d)] +
                (1.0 - rho) * q.atoms[i][static_cast<std::size_t>(d)];
    }
    return out;
}

namespace {

int read_pnm_token(std::istream& in) {
    // skips whitespace and '#' comments
    while (true) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    int value = 0;
    if (!(in >> value)) throw IoError("pnm: malformed header token");
    return value;
}

} // namespace

Image load_image(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    char m0 = 0, m1 = 0;
    f.get(m0).get(m1);
    int channels;
    if (m0 == 'P' && m1 == '5')
        channels = 1;
    else if (m0 == 'P' && m1 == '6')
        channels = 3;
    else
        throw IoError("pnm: unsupported magic in " + path + " (want P5 or P6)");
    const int w = read_pnm_token(f);
    const int h = read_pnm_token(f);
    const int maxval = read_pnm_token(f);
    if (maxval != 255) throw IoError("pnm: only maxval 255 supported, got " + std::to_string(maxval));
    f.get(); // single whitespace byte before raster

    Image img;
    img.height = h;
    img.width = w;
    img.channels = channels;
    const std::size_t n = static_cast<std::size_t>(h) * w * channels;
    std::vector<unsigned char> raw(n);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(f.gcount()) != n)
        throw IoError("pnm: truncated raster in " + path);
    img.pixels.resize(n);
    for (std::size_t i = 0; i < n; ++i) img.pixels[i] = raw[i] / 255.0;
    return img;
}

void save_image(const Image& img, const std::string& path) {
    img.validate();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << (img.channels == 1 ? "P5" : "P6") << "\n"
      << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.size());
    for (std::size_t i = 0; i < img.size(); ++i)
        raw[i] = static_cast<unsigned char>(std::lround(img.pixels[i] * 255.0));
    f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!f) throw IoError("write failed: " + path);
}

} // namespace iwd::patchdist
