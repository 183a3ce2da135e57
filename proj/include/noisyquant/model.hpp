#pragma once
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "noisyquant/calibrate.hpp"
#include "noisyquant/linear.hpp"
#include "noisyquant/tensor.hpp"

namespace nq {

enum class LayerKind { linear, gelu, softmax_rows, layernorm, residual_add, attention };

inline std::string to_string(LayerKind k) {
    switch (k) {
        case LayerKind::linear: return "linear";
        case LayerKind::gelu: return "gelu";
        case LayerKind::softmax_rows: return "softmax_rows";
        case LayerKind::layernorm: return "layernorm";
        case LayerKind::residual_add: return "residual_add";
        default: return "attention";
    }
}

inline LayerKind layer_kind_from_string(const std::string& s) {
    if (s == "linear") return LayerKind::linear;
    if (s == "gelu") return LayerKind::gelu;
    if (s == "softmax_rows") return LayerKind::softmax_rows;
    if (s == "layernorm") return LayerKind::layernorm;
    if (s == "residual_add") return LayerKind::residual_add;
    if (s == "attention") return LayerKind::attention;
    throw ConfigError("unknown layer kind: " + s);
}

enum class RunMode { fp, quant, noisyquant, integer };

inline RunMode run_mode_from_string(const std::string& s) {
    if (s == "fp") return RunMode::fp;
    if (s == "quant") return RunMode::quant;
    if (s == "noisyquant") return RunMode::noisyquant;
    if (s == "integer") return RunMode::integer;
    throw ConfigError("unknown run mode: " + s);
}

struct ModelDims {
    size_t tokens = 16;
    size_t width = 64;
    size_t mlp = 256;
    size_t heads = 4;
    size_t classes = 10;

    void validate() const {
        if (tokens == 0 || width == 0 || mlp == 0 || heads == 0 || classes == 0)
            throw ConfigError("ModelDims: all dimensions must be positive");
        if (width % heads != 0) throw ConfigError("ModelDims: width must be divisible by heads");
    }

    nlohmann::json to_json() const {
        return {{"tokens", tokens}, {"width", width}, {"mlp", mlp}, {"heads", heads},
                {"classes", classes}};
    }
    static ModelDims from_json(const nlohmann::json& j) {
        ModelDims d;
        d.tokens = j.at("tokens");
        d.width = j.at("width");
        d.mlp = j.at("mlp");
        d.heads = j.at("heads");
        d.classes = j.at("classes");
        d.validate();
        return d;
    }
};

// Per-tensor grids for the data-data matmuls inside attention; these are
// quantized on inputs but never carry a Noisy Bias.
struct AttentionGrids {
    QuantParams q, k, p, v;
    bool fitted = false;
};

struct ModelLayer {
    LayerKind kind = LayerKind::linear;
    std::string name;
    QuantLinearLayer lin;          // kind == linear
    int residual_src = -1;         // kind == residual_add; -1 = model input
    size_t heads = 1;              // kind == attention
    AttentionGrids attn;
};

struct Model {
    ModelDims dims;
    std::vector<ModelLayer> layers;
    bool calibrated = false;
};

// ---- full-precision primitives ----

// Softmax along each row, numerically stabilized; always full precision.
inline Tensor2D softmax_rows(const Tensor2D& x) {
    Tensor2D out(x.rows(), x.cols());
    for (size_t r = 0; r < x.rows(); ++r) {
        double mx = x.at(r, 0);
        for (size_t c = 1; c < x.cols(); ++c) mx = std::max(mx, static_cast<double>(x.at(r, c)));
        double sum = 0.0;
        for (size_t c = 0; c < x.cols(); ++c) {
            const double e = std::exp(static_cast<double>(x.at(r, c)) - mx);
            out.at(r, c) = static_cast<float>(e);
            sum += e;
        }
        for (size_t c = 0; c < x.cols(); ++c)
            out.at(r, c) = static_cast<float>(out.at(r, c) / sum);
    }
    return out;
}

// LayerNorm over the feature axis (each column = one token); always full
// precision, no learned affine.
inline Tensor2D layernorm_cols(const Tensor2D& x, double eps = 1e-6) {
    Tensor2D out(x.rows(), x.cols());
    for (size_t c = 0; c < x.cols(); ++c) {
        double mean = 0.0;
        for (size_t r = 0; r < x.rows(); ++r) mean += x.at(r, c);
        mean /= static_cast<double>(x.rows());
        double var = 0.0;
        for (size_t r = 0; r < x.rows(); ++r) {
            const double d = x.at(r, c) - mean;
            var += d * d;
        }
        var /= static_cast<double>(x.rows());
        const double inv = 1.0 / std::sqrt(var + eps);
        for (size_t r = 0; r < x.rows(); ++r)
            out.at(r, c) = static_cast<float>((x.at(r, c) - mean) * inv);
    }
    return out;
}

inline Tensor2D transpose(const Tensor2D& x) {
    Tensor2D out(x.cols(), x.rows());
    for (size_t r = 0; r < x.rows(); ++r)
        for (size_t c = 0; c < x.cols(); ++c) out.at(c, r) = x.at(r, c);
    return out;
}

inline Tensor2D row_slice(const Tensor2D& x, size_t row0, size_t nrows) {
    Tensor2D out(nrows, x.cols());
    for (size_t r = 0; r < nrows; ++r)
        for (size_t c = 0; c < x.cols(); ++c) out.at(r, c) = x.at(row0 + r, c);
    return out;
}

inline Tensor2D add(const Tensor2D& a, const Tensor2D& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ConfigError("add: shape mismatch");
    Tensor2D out(a.rows(), a.cols());
    for (size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] + b.values()[i];
    return out;
}

// ---- attention ----

// Columns are tokens. qkv_out is the 3d x t output of the qkv projector;
// per head: scores = Q_h^T K_h / sqrt(d_h), softmax over rows (queries),
// output = V_h P^T. In quantized modes the four matmul operands go through
// their per-tensor grids; softmax stays full precision.
inline Tensor2D attention_forward(const ModelLayer& layer, const Tensor2D& qkv_out, bool quantized,
                                  std::map<std::string, std::vector<float>>* collect = nullptr) {
    const size_t d = qkv_out.rows() / 3;
    const size_t t = qkv_out.cols();
    const size_t heads = layer.heads;
    const size_t dh = d / heads;
    if (quantized && !layer.attn.fitted)
        throw ConfigError("attention: matmul operand grids not calibrated");
    Tensor2D out(d, t);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (size_t h = 0; h < heads; ++h) {
        Tensor2D q = row_slice(qkv_out, h * dh, dh);
        Tensor2D k = row_slice(qkv_out, d + h * dh, dh);
        Tensor2D v = row_slice(qkv_out, 2 * d + h * dh, dh);
        if (collect) {
            auto grab = [&](const char* key, const Tensor2D& m) {
                auto& dst = (*collect)[key];
                dst.insert(dst.end(), m.values().begin(), m.values().end());
            };
            grab("q", q);
            grab("k", k);
            grab("v", v);
        }
        Tensor2D qq = quantized ? quantize(q, layer.attn.q) : q;
        Tensor2D kq = quantized ? quantize(k, layer.attn.k) : k;
        Tensor2D scores = matmul(transpose(qq), kq);
        for (float& s : scores.values()) s = static_cast<float>(s * inv_sqrt_dh);
        Tensor2D probs = softmax_rows(scores);
        if (collect) {
            auto& dst = (*collect)["p"];
            dst.insert(dst.end(), probs.values().begin(), probs.values().end());
        }
        Tensor2D pq = quantized ? quantize(probs, layer.attn.p) : probs;
        Tensor2D vq = quantized ? quantize(v, layer.attn.v) : v;
        Tensor2D head_out = matmul(vq, transpose(pq));
        for (size_t r = 0; r < dh; ++r)
            for (size_t c = 0; c < t; ++c) out.at(h * dh + r, c) = head_out.at(r, c);
    }
    return out;
}

// ---- model generation ----

inline Tensor2D gaussian_tensor(Rng& rng, size_t rows, size_t cols, double stddev) {
    Tensor2D t(rows, cols);
    for (size_t i = 0; i < t.size(); ++i)
        t.values()[i] = static_cast<float>(rng.gaussian() * stddev);
    return t;
}

// Single pre-LN encoder block plus classifier head, random Gaussian weights
// scaled 1/sqrt(fan_in), zero biases.
inline Model gen_model(const ModelDims& dims, uint64_t seed) {
    dims.validate();
    Model m;
    m.dims = dims;
    const size_t d = dims.width;
    size_t lin_idx = 0;
    auto make_linear = [&](size_t out_dim, size_t in_dim, LayerType tag, const std::string& name) {
        Rng rng(Rng::sub_seed(seed, lin_idx++, "weights"));
        ModelLayer l;
        l.kind = LayerKind::linear;
        l.name = name;
        l.lin.weight = gaussian_tensor(rng, out_dim, in_dim, 1.0 / std::sqrt(static_cast<double>(in_dim)));
        l.lin.bias = Tensor2D(out_dim, 1);
        l.lin.layer_type = tag;
        l.lin.name = name;
        return l;
    };
    auto make_simple = [](LayerKind kind, const std::string& name) {
        ModelLayer l;
        l.kind = kind;
        l.name = name;
        return l;
    };

    m.layers.push_back(make_simple(LayerKind::layernorm, "ln1"));
    m.layers.push_back(make_linear(3 * d, d, LayerType::qkv, "qkv"));
    ModelLayer attn = make_simple(LayerKind::attention, "attn");
    attn.heads = dims.heads;
    m.layers.push_back(std::move(attn));
    m.layers.push_back(make_linear(d, d, LayerType::proj, "proj"));
    ModelLayer res1 = make_simple(LayerKind::residual_add, "res1");
    res1.residual_src = -1;
    m.layers.push_back(std::move(res1));
    m.layers.push_back(make_simple(LayerKind::layernorm, "ln2"));
    m.layers.push_back(make_linear(dims.mlp, d, LayerType::fc1, "fc1"));
    m.layers.push_back(make_simple(LayerKind::gelu, "gelu"));
    m.layers.push_back(make_linear(d, dims.mlp, LayerType::fc2, "fc2"));
    ModelLayer res2 = make_simple(LayerKind::residual_add, "res2");
    res2.residual_src = 4; // output of res1
    m.layers.push_back(std::move(res2));
    m.layers.push_back(make_linear(dims.classes, d, LayerType::other, "head"));
    return m;
}

// Gaussian input batches (width x tokens each).
inline std::vector<Tensor2D> gen_data(const ModelDims& dims, size_t count, uint64_t seed) {
    if (count < 1) throw ConfigError("gen_data: count must be >= 1");
    std::vector<Tensor2D> batches;
    batches.reserve(count);
    for (size_t i = 0; i < count; ++i) {
        Rng rng(Rng::sub_seed(seed, i, "data"));
        batches.push_back(gaussian_tensor(rng, dims.width, dims.tokens, 1.0));
    }
    return batches;
}

// ---- bundle I/O ----

inline void save_model(const Model& m, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json spec;
    spec["dims"] = m.dims.to_json();
    nlohmann::json layers = nlohmann::json::array();
    size_t idx = 0;
    for (const auto& l : m.layers) {
        nlohmann::json lj = {{"kind", to_string(l.kind)}, {"name", l.name}};
        if (l.kind == LayerKind::linear) {
            const std::string wf = "w" + std::to_string(idx) + ".t2d";
            const std::string bf = "b" + std::to_string(idx) + ".t2d";
            save_tensor(dir / wf, l.lin.weight);
            save_tensor(dir / bf, l.lin.bias);
            lj["tag"] = to_string(l.lin.layer_type);
            lj["weight"] = wf;
            lj["bias"] = bf;
        } else if (l.kind == LayerKind::residual_add) {
            lj["src"] = l.residual_src;
        } else if (l.kind == LayerKind::attention) {
            lj["heads"] = l.heads;
        }
        layers.push_back(lj);
        ++idx;
    }
    spec["layers"] = layers;
    std::ofstream f(dir / "model.json");
    if (!f) throw IoError("save_model: cannot open " + (dir / "model.json").string());
    f << spec.dump(2) << "\n";
}

inline Model load_model(const std::filesystem::path& dir) {
    std::ifstream f(dir / "model.json");
    if (!f) throw IoError("load_model: cannot open " + (dir / "model.json").string());
    nlohmann::json spec;
    try {
        f >> spec;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("load_model: malformed model.json: ") + e.what());
    }
    Model m;
    m.dims = ModelDims::from_json(spec.at("dims"));
    for (const auto& lj : spec.at("layers")) {
        ModelLayer l;
        l.kind = layer_kind_from_string(lj.at("kind"));
        l.name = lj.at("name");
        if (l.kind == LayerKind::linear) {
            l.lin.weight = load_tensor(dir / lj.at("weight").get<std::string>());
            l.lin.bias = load_tensor(dir / lj.at("bias").get<std::string>());
            l.lin.layer_type = layer_type_from_string(lj.at("tag"));
            l.lin.name = l.name;
        } else if (l.kind == LayerKind::residual_add) {
            l.residual_src = lj.at("src");
        } else if (l.kind == LayerKind::attention) {
            l.heads = lj.at("heads");
        }
        m.layers.push_back(std::move(l));
    }
    return m;
}

// ---- execution ----

namespace detail {
inline Tensor2D linear_forward(const QuantLinearLayer& lin, const Tensor2D& x, RunMode mode) {
    switch (mode) {
        case RunMode::fp: return forward_fp(lin, x);
        case RunMode::quant: return forward_quant(lin, x);
        case RunMode::noisyquant:
            return lin.noisy ? forward_noisyquant(lin, x) : forward_quant(lin, x);
        case RunMode::integer:
            return lin.noisy && !lin.a_params.is_twin() ? forward_integer(lin, x)
                                                        : forward_quant(lin, x);
    }
    throw ConfigError("linear_forward: bad mode");
}
} // namespace detail

struct CollectedActs {
    std::map<size_t, Tensor2D> linear_inputs;                       // layer index -> m x T
    std::map<size_t, std::map<std::string, std::vector<float>>> attn_operands;
};

// Executes the layer list. Softmax / LayerNorm / residuals always run in
// full precision. `collect` records fp-path linear inputs and attention
// matmul operands.
inline Tensor2D run(const Model& model, const Tensor2D& input, RunMode mode,
                    CollectedActs* collect = nullptr) {
    if (mode != RunMode::fp && !model.calibrated)
        throw ConfigError("run: model not calibrated for quantized mode");
    Tensor2D cur = input;
    std::vector<Tensor2D> outputs;
    outputs.reserve(model.layers.size());
    for (size_t i = 0; i < model.layers.size(); ++i) {
        const ModelLayer& l = model.layers[i];
        switch (l.kind) {
            case LayerKind::linear:
                if (collect) {
                    auto it = collect->linear_inputs.find(i);
                    if (it == collect->linear_inputs.end()) {
                        collect->linear_inputs.emplace(i, cur);
                    } else {
                        // concatenate columns across batches
                        Tensor2D merged(cur.rows(), it->second.cols() + cur.cols());
                        for (size_t r = 0; r < cur.rows(); ++r) {
                            for (size_t c = 0; c < it->second.cols(); ++c)
                                merged.at(r, c) = it->second.at(r, c);
                            for (size_t c = 0; c < cur.cols(); ++c)
                                merged.at(r, it->second.cols() + c) = cur.at(r, c);
                        }
                        it->second = std::move(merged);
                    }
                }
                cur = detail::linear_forward(l.lin, cur, mode);
                break;
            case LayerKind::gelu:
                cur = gelu(cur);
                break;
            case LayerKind::softmax_rows:
                cur = softmax_rows(cur);
                break;
            case LayerKind::layernorm:
                cur = layernorm_cols(cur);
                break;
            case LayerKind::residual_add:
                cur = add(cur, l.residual_src < 0 ? input
                                                  : outputs[static_cast<size_t>(l.residual_src)]);
                break;
            case LayerKind::attention:
                cur = attention_forward(l, cur, mode != RunMode::fp,
                                        collect ? &(*collect).attn_operands[i] : nullptr);
                break;
        }
        outputs.push_back(cur);
    }
    return cur;
}

// Full-precision pass over all batches, recording per-linear-layer inputs
// and attention matmul operands; deterministic batch order.
inline CollectedActs collect_activations(const Model& model, const std::vector<Tensor2D>& data) {
    if (data.empty()) throw ConfigError("collect_activations: empty data");
    CollectedActs acts;
    for (const auto& batch : data) run(model, batch, RunMode::fp, &acts);
    return acts;
}

// ---- calibration over a model ----

inline CalibResult calibrate(Model& model, const std::vector<Tensor2D>& data,
                             const CalibConfig& config) {
    config.validate();
    const CollectedActs acts = collect_activations(model, data);
    CalibResult result;
    result.config = config;
    for (size_t i = 0; i < model.layers.size(); ++i) {
        ModelLayer& l = model.layers[i];
        if (l.kind == LayerKind::linear) {
            const Tensor2D& samples = acts.linear_inputs.at(i);
            LayerCalib lc;
            lc.layer = l.name;
            lc.layer_type = to_string(l.lin.layer_type);
            lc.w_params = fit_weight_minmax(l.lin.weight, config.bits_w);
            lc.a_params = fit_activation(samples, l.lin.weight, config);
            if (config.type_enabled(l.lin.layer_type)) {
                const NoiseSearchResult ns = search_noise_range(samples, lc.a_params, config);
                lc.n = ns.n;
                lc.objective = ns.objective;
                lc.noise_enabled = ns.n > 0.0;
            }
            l.lin.w_params = lc.w_params;
            l.lin.a_params = lc.a_params;
            attach_noise(l.lin, lc.n, Rng::sub_seed(config.seed, i, "noise"));
            result.layers.push_back(std::move(lc));
        } else if (l.kind == LayerKind::attention) {
            const auto& ops = acts.attn_operands.at(i);
            for (const auto& key : {"q", "k", "p", "v"}) {
                const auto& vals = ops.at(key);
                Tensor2D flat(1, vals.size(),
                              std::vector<float>(vals.begin(), vals.end()));
                const double pct = config.fitter == ActFitter::minmax ? 100.0 : config.percentile;
                QuantParams p = fit_activation_percentile(flat, config.bits_a, pct);
                result.matmul_operands[l.name + "." + key] = p;
                if (key == std::string("q")) l.attn.q = p;
                else if (key == std::string("k")) l.attn.k = p;
                else if (key == std::string("p")) l.attn.p = p;
                else l.attn.v = p;
            }
            l.attn.fitted = true;
        }
    }
    model.calibrated = true;

    // The searched n minimizes the expected QE change, but the attached
    // Noisy Bias is a single draw of only m values broadcast over tokens,
    // so marginal predicted gains can flip sign in realization. Noise is
    // never committed when it measurably hurts the calibration set:
    // first drop layers whose realized draw does not improve the input QE,
    // then pick the subset of remaining layers minimizing the end-to-end
    // output MSE (exhaustive; at most one candidate per layer type).
    std::vector<std::pair<size_t, size_t>> candidates; // (layer index, calib index)
    {
        size_t li = 0;
        for (size_t i = 0; i < model.layers.size(); ++i) {
            ModelLayer& l = model.layers[i];
            if (l.kind != LayerKind::linear) continue;
            LayerCalib& lc = result.layers[li++];
            if (!lc.noise_enabled) continue;
            const Tensor2D& x = acts.linear_inputs.at(i);
            const Tensor2D xn = add_noise_cols(x, l.lin.noisy->values);
            const double realized = mean_sq_diff(l.lin.a_params.apply(xn), xn) -
                                    mean_sq_diff(l.lin.a_params.apply(x), x);
            if (realized < 0.0) {
                candidates.emplace_back(i, li - 1);
            } else {
                attach_noise(l.lin, 0.0, Rng::sub_seed(config.seed, i, "noise"));
                lc.n = 0.0;
                lc.objective = 0.0;
                lc.noise_enabled = false;
            }
        }
    }
    if (!candidates.empty()) {
        auto model_mse = [&](RunMode mode) {
            double se = 0.0;
            size_t count = 0;
            for (const auto& batch : data) {
                const Tensor2D fp = run(model, batch, RunMode::fp);
                const Tensor2D out = run(model, batch, mode);
                for (size_t j = 0; j < fp.size(); ++j) {
                    const double d = static_cast<double>(out.values()[j]) - fp.values()[j];
                    se += d * d;
                }
                count += fp.size();
            }
            return se / static_cast<double>(count);
        };
        auto set_mask = [&](uint32_t mask) {
            for (size_t j = 0; j < candidates.size(); ++j) {
                const auto [i, ci] = candidates[j];
                const double n = (mask >> j) & 1u ? result.layers[ci].n : 0.0;
                attach_noise(model.layers[i].lin, n, Rng::sub_seed(config.seed, i, "noise"));
            }
        };
        const double baseline = model_mse(RunMode::quant);
        uint32_t best_mask = 0;
        double best = baseline;
        for (uint32_t mask = 1; mask < (1u << candidates.size()); ++mask) {
            set_mask(mask);
            const double mse = model_mse(RunMode::noisyquant);
            if (mse < best) {
                best = mse;
                best_mask = mask;
            }
        }
        set_mask(best_mask);
        for (size_t j = 0; j < candidates.size(); ++j) {
            if ((best_mask >> j) & 1u) continue;
            LayerCalib& lc = result.layers[candidates[j].second];
            lc.n = 0.0;
            lc.objective = 0.0;
            lc.noise_enabled = false;
        }
    }
    return result;
}

// Re-applies a stored calibration to a freshly loaded model; the noise is
// regenerated from the same sub-seeds, so the result is identical.
inline void apply_calibration(Model& model, const CalibResult& calib) {
    size_t li = 0;
    for (size_t i = 0; i < model.layers.size(); ++i) {
        ModelLayer& l = model.layers[i];
        if (l.kind == LayerKind::linear) {
            if (li >= calib.layers.size()) throw ConfigError("apply_calibration: layer count mismatch");
            const LayerCalib& lc = calib.layers[li++];
            if (lc.layer != l.name) throw ConfigError("apply_calibration: layer name mismatch");
            l.lin.w_params = lc.w_params;
            l.lin.a_params = lc.a_params;
            attach_noise(l.lin, lc.n, Rng::sub_seed(calib.config.seed, i, "noise"));
        } else if (l.kind == LayerKind::attention) {
            auto get = [&](const std::string& key) {
                auto it = calib.matmul_operands.find(l.name + "." + key);
                if (it == calib.matmul_operands.end())
                    throw ConfigError("apply_calibration: missing operand grid " + key);
                return it->second;
            };
            l.attn.q = get("q");
            l.attn.k = get("k");
            l.attn.p = get("p");
            l.attn.v = get("v");
            l.attn.fitted = true;
        }
    }
    if (li != calib.layers.size()) throw ConfigError("apply_calibration: layer count mismatch");
    model.calibrated = true;
}

// ---- evaluation ----

struct EvalMetrics {
    std::vector<QEReport> layer_reports;
    double output_mse_quant = 0.0;
    double output_mse_noisy = 0.0;
    double agreement_quant = 0.0;  // argmax agreement vs fp, per column
    double agreement_noisy = 0.0;
    std::map<std::string, nlohmann::json> per_type; // per-layer-type summary rows

    nlohmann::json to_json() const {
        nlohmann::json reports = nlohmann::json::array();
        for (const auto& r : layer_reports) reports.push_back(r.to_json());
        nlohmann::json types;
        for (const auto& [k, v] : per_type) types[k] = v;
        return {{"layer_reports", reports},
                {"output_mse_quant", output_mse_quant},
                {"output_mse_noisy", output_mse_noisy},
                {"agreement_quant", agreement_quant},
                {"agreement_noisy", agreement_noisy},
                {"per_type", types}};
    }
};

inline size_t argmax_col(const Tensor2D& t, size_t col) {
    size_t best = 0;
    for (size_t r = 1; r < t.rows(); ++r)
        if (t.at(r, col) > t.at(best, col)) best = r;
    return best;
}

inline EvalMetrics evaluate(const Model& model, const std::vector<Tensor2D>& data) {
    if (!model.calibrated) throw ConfigError("evaluate: model not calibrated");
    EvalMetrics m;
    CollectedActs acts;
    double se_q = 0.0, se_n = 0.0;
    size_t total_elems = 0, total_cols = 0, agree_q = 0, agree_n = 0;
    for (const auto& batch : data) {
        const Tensor2D out_fp = run(model, batch, RunMode::fp, &acts);
        const Tensor2D out_q = run(model, batch, RunMode::quant);
        const Tensor2D out_nq = run(model, batch, RunMode::noisyquant);
        for (size_t i = 0; i < out_fp.size(); ++i) {
            const double dq = static_cast<double>(out_q.values()[i]) - out_fp.values()[i];
            const double dn = static_cast<double>(out_nq.values()[i]) - out_fp.values()[i];
            se_q += dq * dq;
            se_n += dn * dn;
        }
        total_elems += out_fp.size();
        for (size_t c = 0; c < out_fp.cols(); ++c) {
            const size_t ref = argmax_col(out_fp, c);
            agree_q += argmax_col(out_q, c) == ref;
            agree_n += argmax_col(out_nq, c) == ref;
            ++total_cols;
        }
    }
    m.output_mse_quant = se_q / static_cast<double>(total_elems);
    m.output_mse_noisy = se_n / static_cast<double>(total_elems);
    m.agreement_quant = static_cast<double>(agree_q) / static_cast<double>(total_cols);
    m.agreement_noisy = static_cast<double>(agree_n) / static_cast<double>(total_cols);

    // per-layer reports on the fp-path inputs
    for (size_t i = 0; i < model.layers.size(); ++i) {
        const ModelLayer& l = model.layers[i];
        if (l.kind != LayerKind::linear) continue;
        m.layer_reports.push_back(layer_qe_report(l.lin, acts.linear_inputs.at(i)));
    }

    // summary aggregation over the four tagged types
    for (const std::string type : {"qkv", "proj", "fc1", "fc2"}) {
        double in_qe = 0.0, in_qe_n = 0.0, d = 0.0, drop = 0.0;
        size_t count = 0;
        for (const auto& r : m.layer_reports) {
            if (r.layer_type != type) continue;
            in_qe += r.input_qe;
            in_qe_n += r.input_qe_noisy;
            d += r.d;
            drop += r.drop_pct;
            ++count;
        }
        nlohmann::json row = {{"layers", count}};
        if (count) {
            row["input_qe"] = in_qe / count;
            row["input_qe_noisy"] = in_qe_n / count;
            row["D"] = d / count;
            row["drop_pct"] = drop / count;
        }
        m.per_type[type] = row;
    }
    return m;
}

} // namespace nq
