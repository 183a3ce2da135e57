#pragma once
#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "noisyquant/linear.hpp"
#include "noisyquant/quant.hpp"
#include "noisyquant/theory.hpp"

namespace nq {

enum class ActFitter { minmax, percentile, scale_search, twin };

inline std::string to_string(ActFitter f) {
    switch (f) {
        case ActFitter::minmax: return "minmax";
        case ActFitter::percentile: return "percentile";
        case ActFitter::scale_search: return "scale_search";
        default: return "twin";
    }
}

inline ActFitter act_fitter_from_string(const std::string& s) {
    if (s == "minmax") return ActFitter::minmax;
    if (s == "percentile") return ActFitter::percentile;
    if (s == "scale_search") return ActFitter::scale_search;
    if (s == "twin") return ActFitter::twin;
    throw ConfigError("unknown activation fitter: " + s);
}

enum class NoiseObjective { closed_form, empirical };

struct CalibConfig {
    int bits_w = 6;
    int bits_a = 6;
    ActFitter fitter = ActFitter::percentile;
    double percentile = 99.9;
    std::vector<double> noise_grid; // fractions of the activation scale
    NoiseObjective objective = NoiseObjective::closed_form;
    std::map<std::string, bool> enable = {
        {"qkv", true}, {"proj", true}, {"fc1", true}, {"fc2", true}};
    uint64_t seed = 0;
    size_t calib_samples = 8;

    CalibConfig() {
        for (int i = 1; i <= 20; ++i) noise_grid.push_back(0.05 * i);
    }

    void validate() const {
        if (bits_w < 2 || bits_a < 2) throw ConfigError("CalibConfig: bits must be >= 2");
        if (calib_samples < 1) throw ConfigError("CalibConfig: calib_samples must be >= 1");
        for (double f : noise_grid)
            if (!(f > 0.0 && f <= 1.0))
                throw ConfigError("CalibConfig: noise grid fractions must be in (0, 1]");
    }

    bool type_enabled(LayerType t) const {
        auto it = enable.find(to_string(t));
        return it != enable.end() && it->second;
    }

    nlohmann::json to_json() const {
        nlohmann::json e;
        for (const auto& [k, v] : enable) e[k] = v;
        return {{"bits_w", bits_w},
                {"bits_a", bits_a},
                {"fitter", to_string(fitter)},
                {"percentile", percentile},
                {"noise_grid", noise_grid},
                {"objective", objective == NoiseObjective::closed_form ? "closed_form" : "empirical"},
                {"enable", e},
                {"seed", seed},
                {"calib_samples", calib_samples}};
    }

    static CalibConfig from_json(const nlohmann::json& j) {
        CalibConfig c;
        c.bits_w = j.value("bits_w", c.bits_w);
        c.bits_a = j.value("bits_a", c.bits_a);
        if (j.contains("fitter")) c.fitter = act_fitter_from_string(j.at("fitter"));
        c.percentile = j.value("percentile", c.percentile);
        if (j.contains("noise_grid")) c.noise_grid = j.at("noise_grid").get<std::vector<double>>();
        if (j.contains("objective")) {
            const std::string o = j.at("objective");
            if (o == "closed_form")
                c.objective = NoiseObjective::closed_form;
            else if (o == "empirical")
                c.objective = NoiseObjective::empirical;
            else
                throw ConfigError("unknown objective: " + o);
        }
        if (j.contains("enable"))
            for (auto& [k, v] : j.at("enable").items()) c.enable[k] = v.get<bool>();
        c.seed = j.value("seed", c.seed);
        c.calib_samples = j.value("calib_samples", c.calib_samples);
        c.validate();
        return c;
    }
};

namespace detail {
// Per-element bin geometry under a possibly sign-split grid.
struct BinGeometry {
    std::vector<double> distance;  // x_i in [0, b_i]
    std::vector<double> half_bin;  // b_i
    std::vector<uint8_t> clipped;
};

inline BinGeometry bin_geometry(const std::vector<float>& vals, const ActivationQuantizer& q) {
    BinGeometry g;
    g.distance.assign(vals.size(), 0.0);
    g.half_bin.assign(vals.size(), 0.0);
    g.clipped.assign(vals.size(), 0);
    auto fill = [&](const QuantParams& p, size_t i) {
        const double s = p.scale();
        const double v = vals[i];
        const double code = round_half_away(v / s);
        if (code < static_cast<double>(p.qmin()) || code > static_cast<double>(p.qmax())) {
            g.clipped[i] = 1;
            return;
        }
        g.half_bin[i] = s / 2.0;
        // float32 inputs can land one ulp outside [0, b]
        g.distance[i] = std::clamp(s / 2.0 - std::abs(v - s * code), 0.0, s / 2.0);
    };
    if (q.is_twin()) {
        const auto& t = std::get<TwinQuantParams>(q.grid);
        for (size_t i = 0; i < vals.size(); ++i)
            fill(vals[i] < t.split ? t.negative : t.positive, i);
    } else {
        const auto& p = q.tensor_params();
        for (size_t i = 0; i < vals.size(); ++i) fill(p, i);
    }
    return g;
}
} // namespace detail

// Predicted per-element quantization-error change for noise half-range n.
// Closed-form mode sums the exact analytic delta over non-clipped elements
// (the sawtooth form, valid for any n, so elements the noise cannot push
// across a threshold still contribute their +n^2/3 penalty); clipped
// elements contribute 0. Empirical mode adds one seeded noise draw per
// element and measures the actual QE change on the real grid.
inline double objective_L(const Tensor2D& activations, const ActivationQuantizer& a_params,
                          double n, NoiseObjective mode = NoiseObjective::closed_form,
                          uint64_t seed = 0) {
    const std::vector<float>& vals = activations.values();
    if (vals.empty()) return 0.0;
    if (mode == NoiseObjective::closed_form) {
        const detail::BinGeometry g = detail::bin_geometry(vals, a_params);
        double sum = 0.0;
        size_t count = 0;
        for (size_t i = 0; i < vals.size(); ++i) {
            if (g.clipped[i]) continue;
            ++count;
            sum += theory::delta_exact(g.distance[i], n, g.half_bin[i]);
        }
        return count ? sum / static_cast<double>(count) : 0.0;
    }
    // empirical: one sampled noise instance per evaluation
    Rng rng(Rng::sub_seed(seed, static_cast<uint64_t>(n * 1e9), "objective_L"));
    Tensor2D noisy(activations.rows(), activations.cols());
    for (size_t i = 0; i < vals.size(); ++i)
        noisy.values()[i] = static_cast<float>(vals[i] + rng.uniform(-n, n));
    const Tensor2D qx = a_params.apply(activations);
    const Tensor2D qn = a_params.apply(noisy);
    double qe = 0.0, qe_n = 0.0;
    for (size_t i = 0; i < vals.size(); ++i) {
        const double e0 = static_cast<double>(qx.values()[i]) - vals[i];
        const double e1 = static_cast<double>(qn.values()[i]) - noisy.values()[i];
        qe += e0 * e0;
        qe_n += e1 * e1;
    }
    return (qe_n - qe) / static_cast<double>(vals.size());
}

struct NoiseSearchResult {
    double n = 0.0;       // 0 means noise disabled
    double objective = 0.0;
};

// Linear search over n = frac * scale. Returns n = 0 when no grid point
// predicts an improvement; noise is never attached when predicted harmful.
inline NoiseSearchResult search_noise_range(const Tensor2D& activations,
                                            const ActivationQuantizer& a_params,
                                            const CalibConfig& config) {
    NoiseSearchResult best; // n = 0, L = 0
    const double scale = a_params.ref_scale();
    for (double frac : config.noise_grid) {
        const double n = frac * scale;
        const double L = objective_L(activations, a_params, n, config.objective, config.seed);
        if (L < best.objective) {
            best.n = n;
            best.objective = L;
        }
    }
    return best;
}

// Per-layer calibration outcome.
struct LayerCalib {
    std::string layer;
    std::string layer_type;
    QuantParams w_params;
    ActivationQuantizer a_params;
    double n = 0.0;
    double objective = 0.0;
    bool noise_enabled = false;

    nlohmann::json to_json() const {
        nlohmann::json j = {{"layer", layer},
                            {"layer_type", layer_type},
                            {"w_params", w_params.to_json()},
                            {"n", n},
                            {"L", objective},
                            {"noise_enabled", noise_enabled}};
        if (a_params.is_twin())
            j["a_params"] = {{"twin", std::get<TwinQuantParams>(a_params.grid).to_json()}};
        else
            j["a_params"] = a_params.tensor_params().to_json();
        return j;
    }

    static LayerCalib from_json(const nlohmann::json& j) {
        LayerCalib c;
        c.layer = j.at("layer");
        c.layer_type = j.at("layer_type");
        c.w_params = QuantParams::from_json(j.at("w_params"));
        if (j.at("a_params").contains("twin"))
            c.a_params.grid = TwinQuantParams::from_json(j.at("a_params").at("twin"));
        else
            c.a_params.grid = QuantParams::from_json(j.at("a_params"));
        c.n = j.at("n");
        c.objective = j.at("L");
        c.noise_enabled = j.at("noise_enabled");
        return c;
    }
};

struct CalibResult {
    CalibConfig config;
    std::vector<LayerCalib> layers;
    // per-tensor grids for attention matmul operands, keyed by operand name
    std::map<std::string, QuantParams> matmul_operands;

    nlohmann::json to_json() const {
        nlohmann::json ls = nlohmann::json::array();
        for (const auto& l : layers) ls.push_back(l.to_json());
        nlohmann::json ops;
        for (const auto& [k, v] : matmul_operands) ops[k] = v.to_json();
        return {{"config", config.to_json()}, {"layers", ls}, {"matmul_operands", ops}};
    }

    static CalibResult from_json(const nlohmann::json& j) {
        CalibResult r;
        r.config = CalibConfig::from_json(j.at("config"));
        for (const auto& lj : j.at("layers")) r.layers.push_back(LayerCalib::from_json(lj));
        if (j.contains("matmul_operands"))
            for (auto& [k, v] : j.at("matmul_operands").items())
                r.matmul_operands[k] = QuantParams::from_json(v);
        return r;
    }
};

// Fits one activation grid from collected samples per the configured fitter.
inline ActivationQuantizer fit_activation(const Tensor2D& samples, const Tensor2D& weight,
                                          const CalibConfig& config) {
    ActivationQuantizer q;
    switch (config.fitter) {
        case ActFitter::minmax:
            q.grid = fit_activation_percentile(samples, config.bits_a, 100.0);
            break;
        case ActFitter::percentile:
            q.grid = fit_activation_percentile(samples, config.bits_a, config.percentile);
            break;
        case ActFitter::scale_search:
            q.grid = fit_activation_scale_search(samples, weight, config.bits_a);
            break;
        case ActFitter::twin:
            q.grid = fit_twin_region(samples, config.bits_a);
            break;
    }
    return q;
}

} // namespace nq
