#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "noisyquant/error.hpp"
#include "noisyquant/tensor.hpp"

namespace nq {

// Rounding is half away from zero throughout; it keeps the symmetric
// quantizer symmetric, which half-to-even would not.
inline double round_half_away(double v) { return std::round(v); }

constexpr double kEpsilonScale = 1e-8; // stand-in scale for all-zero inputs

// Symmetric uniform quantizer grid. scale has one entry for per-tensor
// grids or one per output channel (= weight row) for per-channel grids.
struct QuantParams {
    int bits = 8;
    std::vector<double> scales{1.0};
    bool per_channel = false;

    int64_t qmin() const { return -(int64_t{1} << (bits - 1)); }
    int64_t qmax() const { return (int64_t{1} << (bits - 1)) - 1; }

    double scale() const { return scales[0]; }
    double scale_for(size_t channel) const { return per_channel ? scales[channel] : scales[0]; }
    double half_bin() const { return scales[0] / 2.0; }

    void validate() const {
        if (bits < 2) throw ConfigError("QuantParams: bits < 2");
        if (scales.empty()) throw ConfigError("QuantParams: no scales");
        for (double s : scales)
            if (!(s > 0.0)) throw ConfigError("QuantParams: non-positive scale");
    }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"bits", bits},
                            {"granularity", per_channel ? "channel" : "tensor"},
                            {"rounding", "half-away"}};
        if (per_channel)
            j["scale"] = scales;
        else
            j["scale"] = scales[0];
        return j;
    }

    static QuantParams from_json(const nlohmann::json& j) {
        QuantParams p;
        p.bits = j.at("bits").get<int>();
        p.per_channel = j.at("granularity").get<std::string>() == "channel";
        if (p.per_channel)
            p.scales = j.at("scale").get<std::vector<double>>();
        else
            p.scales = {j.at("scale").get<double>()};
        p.validate();
        return p;
    }
};

inline int64_t quantize_code_scalar(double v, double scale, int64_t qmin, int64_t qmax) {
    const double code = round_half_away(v / scale);
    if (code < static_cast<double>(qmin)) return qmin;
    if (code > static_cast<double>(qmax)) return qmax;
    return static_cast<int64_t>(code);
}

inline double quantize_scalar(double v, double scale, int64_t qmin, int64_t qmax) {
    return static_cast<double>(quantize_code_scalar(v, scale, qmin, qmax)) * scale;
}

// Integer codes; per-channel grids index scale by row.
inline std::vector<int32_t> quantize_codes(const Tensor2D& x, const QuantParams& p) {
    p.validate();
    if (p.per_channel && p.scales.size() != x.rows())
        throw ConfigError("quantize_codes: per-channel scale count != rows");
    std::vector<int32_t> codes(x.size());
    const int64_t lo = p.qmin(), hi = p.qmax();
    for (size_t r = 0; r < x.rows(); ++r) {
        const double s = p.scale_for(r);
        for (size_t c = 0; c < x.cols(); ++c)
            codes[r * x.cols() + c] =
                static_cast<int32_t>(quantize_code_scalar(x.at(r, c), s, lo, hi));
    }
    return codes;
}

// Dequantized simulation: code * scale.
inline Tensor2D quantize(const Tensor2D& x, const QuantParams& p) {
    p.validate();
    if (p.per_channel && p.scales.size() != x.rows())
        throw ConfigError("quantize: per-channel scale count != rows");
    Tensor2D out(x.rows(), x.cols());
    const int64_t lo = p.qmin(), hi = p.qmax();
    for (size_t r = 0; r < x.rows(); ++r) {
        const double s = p.scale_for(r);
        for (size_t c = 0; c < x.cols(); ++c)
            out.at(r, c) = static_cast<float>(quantize_scalar(x.at(r, c), s, lo, hi));
    }
    return out;
}

// MinMax per output channel (row), no clamping: the channel max-magnitude
// weight maps exactly onto code qmax.
inline QuantParams fit_weight_minmax(const Tensor2D& w, int bits) {
    QuantParams p;
    p.bits = bits;
    p.per_channel = true;
    p.scales.assign(w.rows(), kEpsilonScale);
    const double qmax = static_cast<double>(p.qmax());
    for (size_t r = 0; r < w.rows(); ++r) {
        double m = 0.0;
        for (size_t c = 0; c < w.cols(); ++c) m = std::max(m, std::abs(static_cast<double>(w.at(r, c))));
        if (m > 0.0) p.scales[r] = m / qmax;
    }
    p.validate();
    return p;
}

// Linear-interpolated percentile of |samples|, pct in (0, 100].
inline double abs_percentile(const std::vector<float>& samples, double pct) {
    if (samples.empty()) throw ConfigError("abs_percentile: empty samples");
    if (!(pct > 0.0 && pct <= 100.0)) throw ConfigError("abs_percentile: pct out of (0,100]");
    std::vector<double> mags(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) mags[i] = std::abs(static_cast<double>(samples[i]));
    std::sort(mags.begin(), mags.end());
    const double rank = pct / 100.0 * static_cast<double>(mags.size() - 1);
    const size_t lo = static_cast<size_t>(rank);
    const size_t hi = std::min(lo + 1, mags.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return mags[lo] + frac * (mags[hi] - mags[lo]);
}

inline QuantParams fit_activation_percentile(const Tensor2D& samples, int bits, double pct) {
    if (samples.size() == 0) throw ConfigError("fit_activation_percentile: empty samples");
    QuantParams p;
    p.bits = bits;
    p.per_channel = false;
    const double clip = abs_percentile(samples.values(), pct);
    p.scales = {clip > 0.0 ? clip / static_cast<double>(p.qmax()) : kEpsilonScale};
    p.validate();
    return p;
}

struct ScaleSearchConfig {
    double alpha_lo = 0.50;
    double alpha_hi = 1.20;
    double alpha_step = 0.01;
};

inline double cosine_similarity(const Tensor2D& a, const Tensor2D& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a.values()[i]) * static_cast<double>(b.values()[i]);
        na += static_cast<double>(a.values()[i]) * static_cast<double>(a.values()[i]);
        nb += static_cast<double>(b.values()[i]) * static_cast<double>(b.values()[i]);
    }
    if (na == 0.0 || nb == 0.0) return na == nb ? 1.0 : 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Scale search over candidates alpha * s_minmax, maximizing cosine
// similarity between the float layer output W*X and q_W(W)*q_A(X).
// Ties break toward the smaller scale.
inline QuantParams fit_activation_scale_search(const Tensor2D& x_cal, const Tensor2D& w, int bits,
                                               const ScaleSearchConfig& cfg = {}) {
    if (x_cal.size() == 0) throw ConfigError("fit_activation_scale_search: empty calibration set");
    QuantParams p;
    p.bits = bits;
    p.per_channel = false;
    double max_abs = 0.0;
    for (float v : x_cal.values()) max_abs = std::max(max_abs, std::abs(static_cast<double>(v)));
    const double s_minmax = max_abs > 0.0 ? max_abs / static_cast<double>(p.qmax()) : kEpsilonScale;

    const QuantParams wp = fit_weight_minmax(w, bits);
    const Tensor2D wq = quantize(w, wp);
    const Tensor2D ref = matmul(w, x_cal);

    double best_scale = s_minmax, best_sim = -2.0;
    for (double alpha = cfg.alpha_lo; alpha <= cfg.alpha_hi + 1e-12; alpha += cfg.alpha_step) {
        QuantParams cand;
        cand.bits = bits;
        cand.scales = {alpha * s_minmax};
        const double sim = cosine_similarity(ref, matmul(wq, quantize(x_cal, cand)));
        if (sim > best_sim) {
            best_sim = sim;
            best_scale = cand.scales[0];
        }
    }
    p.scales = {best_scale};
    p.validate();
    return p;
}

// Sign-split quantizer: independent symmetric grids for the negative and
// positive regions, routed by sign at apply time.
struct TwinQuantParams {
    QuantParams negative;
    QuantParams positive;
    double split = 0.0;

    nlohmann::json to_json() const {
        return {{"negative", negative.to_json()}, {"positive", positive.to_json()}, {"split", split}};
    }
    static TwinQuantParams from_json(const nlohmann::json& j) {
        TwinQuantParams t;
        t.negative = QuantParams::from_json(j.at("negative"));
        t.positive = QuantParams::from_json(j.at("positive"));
        t.split = j.at("split").get<double>();
        return t;
    }
};

inline QuantParams epsilon_params(int bits) {
    QuantParams p;
    p.bits = bits;
    p.scales = {kEpsilonScale};
    return p;
}

// Negatives by MinMax on the negative subset, positives by percentile
// (99.99) on the positive subset.
inline TwinQuantParams fit_twin_region(const Tensor2D& samples, int bits) {
    if (samples.size() == 0) throw ConfigError("fit_twin_region: empty samples");
    std::vector<float> neg, pos;
    for (float v : samples.values()) (v < 0.0f ? neg : pos).push_back(v);
    TwinQuantParams t;
    if (neg.empty()) {
        t.negative = epsilon_params(bits);
    } else {
        double m = 0.0;
        for (float v : neg) m = std::max(m, std::abs(static_cast<double>(v)));
        t.negative.bits = bits;
        t.negative.scales = {m > 0.0 ? m / static_cast<double>(t.negative.qmax()) : kEpsilonScale};
    }
    if (pos.empty()) {
        t.positive = epsilon_params(bits);
    } else {
        t.positive.bits = bits;
        const double clip = abs_percentile(pos, 99.99);
        t.positive.scales = {clip > 0.0 ? clip / static_cast<double>(t.positive.qmax()) : kEpsilonScale};
    }
    return t;
}

inline Tensor2D quantize_twin(const Tensor2D& x, const TwinQuantParams& t) {
    Tensor2D out(x.rows(), x.cols());
    for (size_t i = 0; i < x.size(); ++i) {
        const double v = x.values()[i];
        const QuantParams& p = v < t.split ? t.negative : t.positive;
        out.values()[i] = static_cast<float>(quantize_scalar(v, p.scale(), p.qmin(), p.qmax()));
    }
    return out;
}

// Distance of each value from the rounding decision threshold of its bin:
// b - |x - nearest level|, in [0, b]. distance = b on a reconstruction
// level (zero error), 0 on a decision threshold (worst case). Values whose
// unclamped code falls outside [qmin, qmax] are flagged clipped.
struct BinCenterDistances {
    std::vector<double> distances; // valid where !clipped
    std::vector<uint8_t> clipped;
};

inline BinCenterDistances bin_center_distance(const Tensor2D& x, const QuantParams& p) {
    p.validate();
    if (p.per_channel) throw ConfigError("bin_center_distance: per-tensor grids only");
    BinCenterDistances out;
    out.distances.assign(x.size(), 0.0);
    out.clipped.assign(x.size(), 0);
    const double s = p.scale();
    const double b = p.half_bin();
    for (size_t i = 0; i < x.size(); ++i) {
        const double v = x.values()[i];
        const double code = round_half_away(v / s);
        if (code < static_cast<double>(p.qmin()) || code > static_cast<double>(p.qmax())) {
            out.clipped[i] = 1;
            continue;
        }
        const double r = v - s * code;
        out.distances[i] = b - std::abs(r);
    }
    return out;
}

} // namespace nq
