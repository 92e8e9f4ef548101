#include "iwd/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "iwd/rng.hpp"

namespace iwd::diffcore {

namespace {

bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

double act(Activation a, double z) {
    return a == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z);
}

double act_d(Activation a, double z) {
    if (a == Activation::relu) return z > 0.0 ? 1.0 : 0.0;
    const double t = std::tanh(z);
    return 1.0 - t * t;
}

double act_dd(Activation a, double z) {
    if (a == Activation::relu) return 0.0;
    const double t = std::tanh(z);
    return -2.0 * t * (1.0 - t * t);
}

struct LayerOffsets {
    std::size_t w;
    std::size_t b;
    int in;
    int out;
};

std::vector<LayerOffsets> layer_offsets(const NetworkSpec& spec) {
    std::vector<LayerOffsets> offs;
    std::size_t pos = 0;
    for (std::size_t l = 1; l < spec.layer_widths.size(); ++l) {
        const int in = spec.layer_widths[l - 1];
        const int out = spec.layer_widths[l];
        offs.push_back({pos, pos + static_cast<std::size_t>(in) * out, in, out});
        pos += static_cast<std::size_t>(in) * out + out;
    }
    return offs;
}

// z = W a + b
void affine(const double* W, const double* b, int in, int out,
            const double* a, double* z) {
    for (int i = 0; i < out; ++i) {
        double s = b[i];
        const double* row = W + static_cast<std::size_t>(i) * in;
        for (int j = 0; j < in; ++j) s += row[j] * a[j];
        z[i] = s;
    }
}

// e_prev = W^T d
void affine_t(const double* W, int in, int out, const double* d, double* e_prev) {
    std::fill(e_prev, e_prev + in, 0.0);
    for (int i = 0; i < out; ++i) {
        const double* row = W + static_cast<std::size_t>(i) * in;
        const double di = d[i];
        for (int j = 0; j < in; ++j) e_prev[j] += row[j] * di;
    }
}

} // namespace

void NetworkSpec::validate() const {
    if (layer_widths.size() < 2)
        throw ValidationError("network spec needs at least 2 layers, got " +
                              std::to_string(layer_widths.size()));
    for (int w : layer_widths)
        if (w < 1) throw ValidationError("layer width must be >= 1, got " + std::to_string(w));
    if (output == OutputKind::scalar && layer_widths.back() != 1)
        throw ValidationError("scalar output requires final width 1, got " +
                              std::to_string(layer_widths.back()));
}

std::size_t NetworkSpec::param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 1; l < layer_widths.size(); ++l)
        n += static_cast<std::size_t>(layer_widths[l]) * layer_widths[l - 1] + layer_widths[l];
    return n;
}

Parameters init_params(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    rng::Rng gen(seed);
    Parameters p;
    p.values.resize(spec.param_count());
    std::size_t pos = 0;
    for (std::size_t l = 1; l < spec.layer_widths.size(); ++l) {
        const int in = spec.layer_widths[l - 1];
        const int out = spec.layer_widths[l];
        const double a = std::sqrt(6.0 / (in + out));
        for (int k = 0; k < in * out; ++k) p.values[pos++] = gen.uniform(-a, a);
        for (int k = 0; k < out; ++k) p.values[pos++] = 0.0;
    }
    return p;
}

std::vector<double> forward(const NetworkSpec& spec, const Parameters& params,
                            std::span<const double> input) {
    spec.validate();
    if (static_cast<int>(input.size()) != spec.input_width())
        throw ValidationError("forward: input length " + std::to_string(input.size()) +
                              " does not match first layer width " +
                              std::to_string(spec.input_width()));
    if (params.values.size() != spec.param_count())
        throw ValidationError("forward: parameter count mismatch");

    const auto offs = layer_offsets(spec);
    std::vector<double> a(input.begin(), input.end());
    std::vector<double> z;
    for (std::size_t l = 0; l < offs.size(); ++l) {
        const auto& o = offs[l];
        z.assign(o.out, 0.0);
        affine(params.values.data() + o.w, params.values.data() + o.b, o.in, o.out,
               a.data(), z.data());
        if (!all_finite(z))
            throw NumericError("forward: non-finite value at layer " + std::to_string(l + 1));
        if (l + 1 < offs.size()) {
            a.resize(o.out);
            for (int i = 0; i < o.out; ++i) a[i] = act(spec.activation, z[i]);
        } else {
            a = z;
        }
    }
    return a;
}

double cross_entropy(std::span<const double> logits, int label) {
    if (label < 0 || label >= static_cast<int>(logits.size()))
        throw ValidationError("cross_entropy: label " + std::to_string(label) +
                              " out of range for " + std::to_string(logits.size()) + " classes");
    if (!all_finite(logits)) throw NumericError("cross_entropy: non-finite logits");
    const double m = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    for (double v : logits) s += std::exp(v - m);
    return m + std::log(s) - logits[label];
}

namespace {

// dLoss/dy and the loss value for a given head
double head_loss_and_grad(const LossHead& head, std::span<const double> y,
                          std::vector<double>& grad) {
    grad.assign(y.size(), 0.0);
    if (const auto* ce = std::get_if<CrossEntropyHead>(&head)) {
        const double loss = cross_entropy(y, ce->label);
        const double m = *std::max_element(y.begin(), y.end());
        double s = 0.0;
        for (double v : y) s += std::exp(v - m);
        for (std::size_t i = 0; i < y.size(); ++i) grad[i] = std::exp(y[i] - m) / s;
        grad[static_cast<std::size_t>(ce->label)] -= 1.0;
        return loss;
    }
    if (const auto* ow = std::get_if<OutputWeightHead>(&head)) {
        if (ow->weights.size() != y.size())
            throw ValidationError("backward: output weight head size mismatch");
        double loss = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            loss += ow->weights[i] * y[i];
            grad[i] = ow->weights[i];
        }
        return loss;
    }
    if (std::holds_alternative<SquaredOutputHead>(head)) {
        double loss = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            loss += y[i] * y[i];
            grad[i] = 2.0 * y[i];
        }
        return loss;
    }
    return std::get<ConstantHead>(head).value;
}

} // namespace

GradientBundle backward(const NetworkSpec& spec, const Parameters& params,
                        std::span<const double> input, const LossHead& head) {
    spec.validate();
    if (static_cast<int>(input.size()) != spec.input_width())
        throw ValidationError("backward: input length mismatch");
    if (params.values.size() != spec.param_count())
        throw ValidationError("backward: parameter count mismatch");

    const auto offs = layer_offsets(spec);
    const std::size_t L = offs.size();

    // forward, caching preactivations and activations
    std::vector<std::vector<double>> zs(L), as(L + 1);
    as[0].assign(input.begin(), input.end());
    for (std::size_t l = 0; l < L; ++l) {
        const auto& o = offs[l];
        zs[l].assign(o.out, 0.0);
        affine(params.values.data() + o.w, params.values.data() + o.b, o.in, o.out,
               as[l].data(), zs[l].data());
        if (!all_finite(zs[l]))
            throw NumericError("backward: non-finite value at layer " + std::to_string(l + 1));
        as[l + 1].resize(o.out);
        if (l + 1 < L)
            for (int i = 0; i < o.out; ++i) as[l + 1][i] = act(spec.activation, zs[l][i]);
        else
            as[l + 1] = zs[l];
    }

    GradientBundle out;
    out.param_grad.assign(params.values.size(), 0.0);

    std::vector<double> e;
    out.loss = head_loss_and_grad(head, as[L], e);

    for (std::size_t l = L; l-- > 0;) {
        const auto& o = offs[l];
        std::vector<double> d(o.out);
        if (l + 1 == L)
            d = e;
        else
            for (int i = 0; i < o.out; ++i) d[i] = e[i] * act_d(spec.activation, zs[l][i]);

        double* gW = out.param_grad.data() + o.w;
        double* gb = out.param_grad.data() + o.b;
        for (int i = 0; i < o.out; ++i) {
            const double di = d[i];
            double* row = gW + static_cast<std::size_t>(i) * o.in;
            for (int j = 0; j < o.in; ++j) row[j] += di * as[l][j];
            gb[i] += di;
        }
        e.assign(o.in, 0.0);
        affine_t(params.values.data() + o.w, o.in, o.out, d.data(), e.data());
    }
    out.input_grad = e;
    if (!std::isfinite(out.loss) || !all_finite(out.param_grad) || !all_finite(out.input_grad))
        throw NumericError("backward: non-finite gradient");
    return out;
}

double scalar_value(const NetworkSpec& spec, const Parameters& params,
                    std::span<const double> input) {
    if (spec.output_width() != 1)
        throw ValidationError("scalar_value: network output is not scalar");
    return forward(spec, params, input)[0];
}

std::vector<double> input_gradient(const NetworkSpec& spec, const Parameters& params,
                                   std::span<const double> input) {
    if (spec.output_width() != 1)
        throw ValidationError("input_gradient: network output is not scalar");
    return backward(spec, params, input, OutputWeightHead{{1.0}}).input_grad;
}

PenaltyGrad grad_norm_penalty(const NetworkSpec& spec, const Parameters& params,
                              std::span<const double> input) {
    spec.validate();
    if (spec.output_width() != 1)
        throw ValidationError("grad_norm_penalty: network output is not scalar");
    if (static_cast<int>(input.size()) != spec.input_width())
        throw ValidationError("grad_norm_penalty: input length mismatch");

    const auto offs = layer_offsets(spec);
    const std::size_t L = offs.size();

    // reverse sweep for g = grad_x f, caching everything the tangent sweep needs
    std::vector<std::vector<double>> zs(L), as(L + 1), ds(L), es(L + 1);
    as[0].assign(input.begin(), input.end());
    for (std::size_t l = 0; l < L; ++l) {
        const auto& o = offs[l];
        zs[l].assign(o.out, 0.0);
        affine(params.values.data() + o.w, params.values.data() + o.b, o.in, o.out,
               as[l].data(), zs[l].data());
        if (!all_finite(zs[l]))
            throw NumericError("grad_norm_penalty: non-finite value at layer " +
                               std::to_string(l + 1));
        as[l + 1].resize(o.out);
        if (l + 1 < L)
            for (int i = 0; i < o.out; ++i) as[l + 1][i] = act(spec.activation, zs[l][i]);
        else
            as[l + 1] = zs[l];
    }
    es[L] = {1.0};
    for (std::size_t l = L; l-- > 0;) {
        const auto& o = offs[l];
        ds[l].resize(o.out);
        if (l + 1 == L)
            ds[l] = es[l + 1];
        else
            for (int i = 0; i < o.out; ++i)
                ds[l][i] = es[l + 1][i] * act_d(spec.activation, zs[l][i]);
        es[l].assign(o.in, 0.0);
        affine_t(params.values.data() + o.w, o.in, o.out, ds[l].data(), es[l].data());
    }
    const std::vector<double>& g = es[0];
    double norm2 = 0.0;
    for (double v : g) norm2 += v * v;
    const double norm = std::sqrt(norm2);

    PenaltyGrad res;
    res.value = (norm - 1.0) * (norm - 1.0);
    res.param_grad.assign(params.values.size(), 0.0);
    if (norm == 0.0) return res; // flat critic: penalty 1, zero subgradient

    // tangent sweep in input direction w = g gives grad_theta (w . grad_x f);
    // the chain factor c turns it into grad_theta of the penalty itself
    const double c = 2.0 * (norm - 1.0) / norm;
    const std::vector<double>& w = g;

    std::vector<std::vector<double>> rz(L), ra(L + 1), rd(L), re(L + 1);
    ra[0].assign(w.begin(), w.end());
    for (std::size_t l = 0; l < L; ++l) {
        const auto& o = offs[l];
        rz[l].assign(o.out, 0.0);
        for (int i = 0; i < o.out; ++i) {
            const double* row = params.values.data() + o.w + static_cast<std::size_t>(i) * o.in;
            double s = 0.0;
            for (int j = 0; j < o.in; ++j) s += row[j] * ra[l][j];
            rz[l][i] = s;
        }
        ra[l + 1].resize(o.out);
        if (l + 1 < L)
            for (int i = 0; i < o.out; ++i)
                ra[l + 1][i] = act_d(spec.activation, zs[l][i]) * rz[l][i];
        else
            ra[l + 1] = rz[l];
    }
    re[L] = {0.0};
    for (std::size_t l = L; l-- > 0;) {
        const auto& o = offs[l];
        rd[l].resize(o.out);
        if (l + 1 == L)
            rd[l] = re[l + 1];
        else
            for (int i = 0; i < o.out; ++i)
                rd[l][i] = re[l + 1][i] * act_d(spec.activation, zs[l][i]) +
                           es[l + 1][i] * act_dd(spec.activation, zs[l][i]) * rz[l][i];

        double* gW = res.param_grad.data() + o.w;
        double* gb = res.param_grad.data() + o.b;
        for (int i = 0; i < o.out; ++i) {
            double* row = gW + static_cast<std::size_t>(i) * o.in;
            for (int j = 0; j < o.in; ++j)
                row[j] += c * (rd[l][i] * as[l][j] + ds[l][i] * ra[l][j]);
            gb[i] += c * rd[l][i];
        }
        re[l].assign(o.in, 0.0);
        affine_t(params.values.data() + o.w, o.in, o.out, rd[l].data(), re[l].data());
    }
    if (!all_finite(res.param_grad))
        throw NumericError("grad_norm_penalty: non-finite gradient");
    return res;
}

OptimizerState make_optimizer(const OptimizerConfig& cfg, std::size_t n_params) {
    if (cfg.learning_rate <= 0.0)
        throw ValidationError("optimizer: learning rate must be > 0");
    if (cfg.kind == OptimizerKind::adam) {
        if (cfg.beta1 <= 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 <= 0.0 || cfg.beta2 >= 1.0)
            throw ValidationError("optimizer: adam betas must lie in (0,1)");
    }
    OptimizerState s;
    s.cfg = cfg;
    if (cfg.kind == OptimizerKind::adam) {
        s.m.assign(n_params, 0.0);
        s.v.assign(n_params, 0.0);
    }
    return s;
}

void optimizer_step(OptimizerState& state, Parameters& params, std::span<const double> grads) {
    if (grads.size() != params.values.size())
        throw ValidationError("optimizer_step: gradient size mismatch");
    if (!all_finite(grads)) throw NumericError("optimizer_step: non-finite gradient");

    if (state.cfg.kind == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < grads.size(); ++i)
            params.values[i] -= state.cfg.learning_rate * grads[i];
        state.step_count += 1;
        return;
    }
    if (state.m.size() != grads.size())
        throw ValidationError("optimizer_step: adam state size mismatch");
    state.step_count += 1;
    const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
    for (std::size_t i = 0; i < grads.size(); ++i) {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * grads[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * grads[i] * grads[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params.values[i] -= state.cfg.learning_rate * mhat / (std::sqrt(vhat) + state.cfg.epsilon);
    }
}

namespace {

constexpr char kMagic[8] = {'I', 'W', 'D', 'N', 'E', 'T', '1', '\0'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

std::uint32_t get_u32(std::span<const std::uint8_t> blob, std::size_t pos) {
    return static_cast<std::uint32_t>(blob[pos]) |
           (static_cast<std::uint32_t>(blob[pos + 1]) << 8) |
           (static_cast<std::uint32_t>(blob[pos + 2]) << 16) |
           (static_cast<std::uint32_t>(blob[pos + 3]) << 24);
}

} // namespace

std::vector<std::uint8_t> serialize_params(const NetworkSpec& spec, const Parameters& params) {
    spec.validate();
    if (params.values.size() != spec.param_count())
        throw ValidationError("serialize_params: parameter count mismatch");
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 8);
    put_u32(out, static_cast<std::uint32_t>(spec.layer_widths.size()));
    for (int w : spec.layer_widths) put_u32(out, static_cast<std::uint32_t>(w));
    const std::size_t base = out.size();
    out.resize(base + params.values.size() * 8);
    std::memcpy(out.data() + base, params.values.data(), params.values.size() * 8);
    return out;
}

LoadedParams deserialize_params(std::span<const std::uint8_t> blob) {
    if (blob.size() < 12 || std::memcmp(blob.data(), kMagic, 8) != 0)
        throw IoError("parameter blob: bad magic at offset 0");
    const std::uint32_t n_layers = get_u32(blob, 8);
    if (n_layers < 2 || blob.size() < 12 + 4 * static_cast<std::size_t>(n_layers))
        throw IoError("parameter blob: truncated header");
    LoadedParams lp;
    std::size_t pos = 12;
    for (std::uint32_t i = 0; i < n_layers; ++i, pos += 4)
        lp.layer_widths.push_back(static_cast<int>(get_u32(blob, pos)));
    std::size_t n_params = 0;
    for (std::size_t l = 1; l < lp.layer_widths.size(); ++l)
        n_params += static_cast<std::size_t>(lp.layer_widths[l]) * lp.layer_widths[l - 1] +
                    lp.layer_widths[l];
    if (blob.size() != pos + n_params * 8)
        throw IoError("parameter blob: expected " + std::to_string(pos + n_params * 8) +
                      " bytes, got " + std::to_string(blob.size()));
    lp.params.values.resize(n_params);
    std::memcpy(lp.params.values.data(), blob.data() + pos, n_params * 8);
    return lp;
}

void save_params(const NetworkSpec& spec, const Parameters& params, const std::string& path) {
    const auto blob = serialize_params(spec, params);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!f) throw IoError("write failed: " + path);
}

LoadedParams load_params(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    return deserialize_params(blob);
}

} // namespace iwd::diffcore
