#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "noisyquant/histogram.hpp"
#include "noisyquant/quant.hpp"
#include "noisyquant/rng.hpp"
#include "noisyquant/tensor.hpp"

namespace nq {

enum class LayerType { qkv, proj, fc1, fc2, other };

inline std::string to_string(LayerType t) {
    switch (t) {
        case LayerType::qkv: return "qkv";
        case LayerType::proj: return "proj";
        case LayerType::fc1: return "fc1";
        case LayerType::fc2: return "fc2";
        default: return "other";
    }
}

inline LayerType layer_type_from_string(const std::string& s) {
    if (s == "qkv") return LayerType::qkv;
    if (s == "proj") return LayerType::proj;
    if (s == "fc1") return LayerType::fc1;
    if (s == "fc2") return LayerType::fc2;
    if (s == "other") return LayerType::other;
    throw ConfigError("unknown layer type: " + s);
}

// Activation grid: plain symmetric or sign-split twin.
struct ActivationQuantizer {
    std::variant<QuantParams, TwinQuantParams> grid;

    bool is_twin() const { return std::holds_alternative<TwinQuantParams>(grid); }
    const QuantParams& tensor_params() const {
        if (is_twin()) throw ConfigError("per-tensor activation grid required");
        return std::get<QuantParams>(grid);
    }
    int bits() const {
        return is_twin() ? std::get<TwinQuantParams>(grid).positive.bits : tensor_params().bits;
    }
    // reference scale for fixed-point noise storage
    double ref_scale() const {
        if (!is_twin()) return tensor_params().scale();
        const auto& t = std::get<TwinQuantParams>(grid);
        return std::max(t.negative.scale(), t.positive.scale());
    }
    Tensor2D apply(const Tensor2D& x) const {
        if (is_twin()) return quantize_twin(x, std::get<TwinQuantParams>(grid));
        return quantize(x, tensor_params());
    }
};

// Per-layer fixed noise vector. The canonical values are materialized at
// INT16 fixed-point resolution when the noise is created, so the float
// path and the integer path add the same numbers; values never change
// afterwards.
struct NoisyBias {
    Tensor2D values;                 // m x 1
    double half_range = 0.0;         // n
    uint64_t seed = 0;
    std::vector<int16_t> int16_image;
    double noise_scale = 0.0;        // values[i] == int16_image[i] * noise_scale
    bool enabled = false;
};

struct QuantLinearLayer {
    Tensor2D weight;                 // k x m
    Tensor2D bias;                   // k x 1
    QuantParams w_params;            // per-channel
    ActivationQuantizer a_params;
    std::optional<NoisyBias> noisy;
    Tensor2D denoise_bias;           // k x 1, B' = B - q_W(W) N
    LayerType layer_type = LayerType::other;
    std::string name;
};

inline Tensor2D add_bias(Tensor2D y, const Tensor2D& b) {
    if (b.rows() != y.rows() || b.cols() != 1) throw ConfigError("bias shape mismatch");
    for (size_t r = 0; r < y.rows(); ++r)
        for (size_t c = 0; c < y.cols(); ++c) y.at(r, c) += b.at(r, 0);
    return y;
}

inline Tensor2D add_noise_cols(const Tensor2D& x, const Tensor2D& n) {
    if (n.rows() != x.rows() || n.cols() != 1) throw ConfigError("noise shape mismatch");
    Tensor2D out(x.rows(), x.cols());
    for (size_t r = 0; r < x.rows(); ++r)
        for (size_t c = 0; c < x.cols(); ++c) out.at(r, c) = x.at(r, c) + n.at(r, 0);
    return out;
}

inline Tensor2D forward_fp(const QuantLinearLayer& layer, const Tensor2D& x) {
    return add_bias(matmul(layer.weight, x), layer.bias);
}

inline Tensor2D forward_quant(const QuantLinearLayer& layer, const Tensor2D& x) {
    layer.w_params.validate();
    const Tensor2D wq = quantize(layer.weight, layer.w_params);
    return add_bias(matmul(wq, layer.a_params.apply(x)), layer.bias);
}

inline Tensor2D compute_denoise_bias(const QuantLinearLayer& layer, const Tensor2D& noise) {
    const Tensor2D wq = quantize(layer.weight, layer.w_params);
    Tensor2D wn = matmul(wq, noise);
    Tensor2D bprime(layer.bias.rows(), 1);
    for (size_t r = 0; r < bprime.rows(); ++r) bprime.at(r, 0) = layer.bias.at(r, 0) - wn.at(r, 0);
    return bprime;
}

// Builds the noise from explicit float values (test hook / replay path):
// snaps them onto the int16 grid and recomputes B'.
inline void attach_noise_values(QuantLinearLayer& layer, const std::vector<double>& raw,
                                double n, uint64_t seed) {
    if (n < 0.0) throw ConfigError("attach_noise: n must be >= 0");
    const size_t m = layer.weight.cols();
    if (raw.size() != m) throw ConfigError("attach_noise: noise length != input features");
    NoisyBias nb;
    nb.half_range = n;
    nb.seed = seed;
    nb.noise_scale = layer.a_params.ref_scale() / 256.0;
    nb.enabled = n > 0.0;
    nb.int16_image.assign(m, 0);
    nb.values = Tensor2D(m, 1);
    // clamp codes so reconstructed values stay inside [-n, n] and int16
    const int64_t lim = std::min<int64_t>(32767, static_cast<int64_t>(n / nb.noise_scale));
    for (size_t i = 0; i < m; ++i) {
        int64_t code = static_cast<int64_t>(round_half_away(raw[i] / nb.noise_scale));
        code = std::clamp<int64_t>(code, -lim, lim);
        nb.int16_image[i] = static_cast<int16_t>(code);
        nb.values.at(i, 0) = static_cast<float>(static_cast<double>(code) * nb.noise_scale);
    }
    layer.noisy = std::move(nb);
    layer.denoise_bias = compute_denoise_bias(layer, layer.noisy->values);
}

// Samples N ~ U(-n, n) once and fixes it; n = 0 attaches a disabled
// all-zero noise so the noisy path degenerates to the plain one.
inline void attach_noise(QuantLinearLayer& layer, double n, uint64_t seed) {
    if (n < 0.0) throw ConfigError("attach_noise: n must be >= 0");
    const size_t m = layer.weight.cols();
    std::vector<double> raw(m, 0.0);
    if (n > 0.0) {
        Rng rng(Rng::sub_seed(seed, 0, "noisy_bias"));
        for (size_t i = 0; i < m; ++i) raw[i] = rng.uniform(-n, n);
    }
    attach_noise_values(layer, raw, n, seed);
}

inline Tensor2D forward_noisyquant(const QuantLinearLayer& layer, const Tensor2D& x) {
    if (!layer.noisy) throw ConfigError("forward_noisyquant: noise not attached");
    const Tensor2D wq = quantize(layer.weight, layer.w_params);
    const Tensor2D xn = add_noise_cols(x, layer.noisy->values);
    return add_bias(matmul(wq, layer.a_params.apply(xn)), layer.denoise_bias);
}

// Analytic deviation bound between forward_integer and forward_noisyquant:
// per output k, sum_c |W_q(k,c)| * noise_scale/2 + bias_scale_k/2. Since
// both paths add the identical int16-materialized noise, the bound is
// dominated by the denoising-bias representation term in practice.
inline double integer_path_bound(const QuantLinearLayer& layer) {
    if (!layer.noisy) throw ConfigError("integer_path_bound: noise not attached");
    const Tensor2D wq = quantize(layer.weight, layer.w_params);
    const double ns = layer.noisy->noise_scale;
    const double a_scale = layer.a_params.tensor_params().scale();
    double worst = 0.0;
    for (size_t k = 0; k < wq.rows(); ++k) {
        double sum_abs = 0.0;
        for (size_t c = 0; c < wq.cols(); ++c) sum_abs += std::abs(static_cast<double>(wq.at(k, c)));
        const double bias_scale = a_scale * layer.w_params.scale_for(k);
        worst = std::max(worst, sum_abs * ns / 2.0 + bias_scale / 2.0);
    }
    return worst;
}

// Integer-only execution: int8 activation/weight codes, int16 noise and
// denoising bias, int32 accumulation, one real rescale per output channel.
inline Tensor2D forward_integer(const QuantLinearLayer& layer, const Tensor2D& x) {
    if (!layer.noisy) throw ConfigError("forward_integer: noise not attached");
    const QuantParams& ap = layer.a_params.tensor_params(); // rejects twin grids
    if (ap.bits > 8 || layer.w_params.bits > 8)
        throw ConfigError("forward_integer: int8 path requires bits <= 8");
    const double a_scale = ap.scale();

    const Tensor2D xn = add_noise_cols(x, layer.noisy->values);
    const std::vector<int32_t> a_codes = quantize_codes(xn, ap);
    const std::vector<int32_t> w_codes = quantize_codes(layer.weight, layer.w_params);

    const size_t k = layer.weight.rows(), m = layer.weight.cols(), t = x.cols();
    Tensor2D out(k, t);
    for (size_t r = 0; r < k; ++r) {
        const double bias_scale = a_scale * layer.w_params.scale_for(r);
        const double braw = layer.denoise_bias.at(r, 0) / bias_scale;
        const int64_t bcode = static_cast<int64_t>(round_half_away(braw));
        if (bcode < -32768 || bcode > 32767)
            throw ConfigError("forward_integer: denoising bias code exceeds int16");
        for (size_t c = 0; c < t; ++c) {
            int64_t acc = 0;
            for (size_t j = 0; j < m; ++j)
                acc += static_cast<int64_t>(w_codes[r * m + j]) *
                       static_cast<int64_t>(a_codes[j * t + c]);
            acc += bcode;
            if (acc < INT32_MIN || acc > INT32_MAX)
                throw ConfigError("forward_integer: int32 accumulator overflow");
            out.at(r, c) = static_cast<float>(static_cast<double>(acc) * bias_scale);
        }
    }
    return out;
}

// Per-layer input/output quantization-error statistics. All errors are
// per-element mean squared errors so layers of different sizes compare.
struct QEReport {
    std::string layer;
    std::string layer_type;
    int bits_w = 0;
    int bits_a = 0;
    double n = 0.0;
    double input_qe = 0.0;
    double input_qe_noisy = 0.0;
    double d = 0.0;              // input_qe_noisy - input_qe
    double output_qe = 0.0;
    double output_qe_noisy = 0.0;
    double drop_pct = 0.0;
    Histogram input_hist;
    Histogram input_noisy_hist;
    Histogram output_hist;
    Histogram output_noisy_hist;

    nlohmann::json to_json() const {
        return {{"layer", layer},
                {"layer_type", layer_type},
                {"bits_w", bits_w},
                {"bits_a", bits_a},
                {"n", n},
                {"input_qe", input_qe},
                {"input_qe_noisy", input_qe_noisy},
                {"D", d},
                {"output_qe", output_qe},
                {"output_qe_noisy", output_qe_noisy},
                {"drop_pct", drop_pct}};
    }
};

inline double mean_sq_diff(const Tensor2D& a, const Tensor2D& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.values()[i]) - static_cast<double>(b.values()[i]);
        acc += d * d;
    }
    return a.size() ? acc / static_cast<double>(a.size()) : 0.0;
}

inline Histogram tensor_histogram(const Tensor2D& t, size_t bins = 64) {
    double lo = t.size() ? t.values()[0] : 0.0, hi = lo;
    for (float v : t.values()) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
    }
    if (!(lo < hi)) hi = lo + 1.0;
    Histogram h = Histogram::with_range(lo, hi, bins);
    h.add_all(t.values().begin(), t.values().end());
    return h;
}

inline QEReport layer_qe_report(const QuantLinearLayer& layer, const Tensor2D& x) {
    QEReport rep;
    rep.layer = layer.name;
    rep.layer_type = to_string(layer.layer_type);
    rep.bits_w = layer.w_params.bits;
    rep.bits_a = layer.a_params.bits();
    rep.n = layer.noisy ? layer.noisy->half_range : 0.0;

    rep.input_qe = mean_sq_diff(layer.a_params.apply(x), x);
    Tensor2D xn = x;
    if (layer.noisy) xn = add_noise_cols(x, layer.noisy->values);
    rep.input_qe_noisy = mean_sq_diff(layer.a_params.apply(xn), xn);
    rep.d = rep.input_qe_noisy - rep.input_qe;

    const Tensor2D out_fp = forward_fp(layer, x);
    const Tensor2D out_q = forward_quant(layer, x);
    const Tensor2D out_nq = layer.noisy ? forward_noisyquant(layer, x) : out_q;
    rep.output_qe = mean_sq_diff(out_q, out_fp);
    rep.output_qe_noisy = mean_sq_diff(out_nq, out_fp);
    rep.drop_pct =
        rep.output_qe > 0.0 ? 100.0 * (rep.output_qe - rep.output_qe_noisy) / rep.output_qe : 0.0;

    rep.input_hist = tensor_histogram(x);
    rep.input_noisy_hist = tensor_histogram(xn);
    rep.output_hist = tensor_histogram(out_q);
    rep.output_noisy_hist = tensor_histogram(out_nq);
    return rep;
}

} // namespace nq
