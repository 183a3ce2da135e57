#pragma once
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "noisyquant/error.hpp"
#include "noisyquant/rng.hpp"

namespace nq {

// Dense row-major float32 matrix. The universal carrier for weights,
// activations and biases. All values must be finite.
class Tensor2D {
public:
    Tensor2D() = default;
    Tensor2D(size_t rows, size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}
    Tensor2D(size_t rows, size_t cols, std::vector<float> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw ConfigError("Tensor2D: data length " + std::to_string(data_.size()) +
                              " != rows*cols " + std::to_string(rows_ * cols_));
        check_finite();
    }

    size_t rows() const { return rows_; }
    size_t cols() const { return cols_; }
    size_t size() const { return data_.size(); }

    float& at(size_t r, size_t c) { return data_[r * cols_ + c]; }
    float at(size_t r, size_t c) const { return data_[r * cols_ + c]; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    const std::vector<float>& values() const { return data_; }
    std::vector<float>& values() { return data_; }

    bool operator==(const Tensor2D& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

    void check_finite() const {
        for (float v : data_)
            if (!std::isfinite(v)) throw ConfigError("Tensor2D: non-finite value");
    }

private:
    size_t rows_ = 0, cols_ = 0;
    std::vector<float> data_;
};

// Standard product with 64-bit accumulation in a fixed summation order.
inline Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
    if (a.cols() != b.rows())
        throw ConfigError("matmul: dimension mismatch " + std::to_string(a.cols()) + " vs " +
                          std::to_string(b.rows()));
    Tensor2D out(a.rows(), b.cols());
    for (size_t i = 0; i < a.rows(); ++i)
        for (size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (size_t k = 0; k < a.cols(); ++k)
                acc += static_cast<double>(a.at(i, k)) * static_cast<double>(b.at(k, j));
            out.at(i, j) = static_cast<float>(acc);
        }
    return out;
}

// Exact erf form. The spike of the output distribution near -0.17 matters
// downstream, so the tanh approximation is not used.
inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline Tensor2D gelu(const Tensor2D& x) {
    Tensor2D out(x.rows(), x.cols());
    for (size_t i = 0; i < x.size(); ++i)
        out.values()[i] = static_cast<float>(gelu_scalar(x.values()[i]));
    return out;
}

// Column vector of i.i.d. uniform values in [lo, hi).
inline Tensor2D uniform_vector(Rng& rng, size_t length, double lo, double hi) {
    if (lo >= hi) throw ConfigError("uniform_vector: lo >= hi");
    Tensor2D out(length, 1);
    for (size_t i = 0; i < length; ++i)
        out.values()[i] = static_cast<float>(rng.uniform(lo, hi));
    return out;
}

// .t2d container: one JSON header line, then rows*cols little-endian f32,
// row-major.
inline void save_tensor(const std::filesystem::path& path, const Tensor2D& t) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("save_tensor: cannot open " + path.string());
    nlohmann::json header = {{"dtype", "f32"},
                             {"rows", t.rows()},
                             {"cols", t.cols()},
                             {"byte_order", "little-endian"}};
    f << header.dump() << "\n";
    static_assert(sizeof(float) == 4);
    f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * 4));
    if (!f) throw IoError("save_tensor: write failed for " + path.string());
}

inline Tensor2D load_tensor(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_tensor: cannot open " + path.string());
    std::string line;
    if (!std::getline(f, line)) throw IoError("load_tensor: missing header in " + path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_tensor: malformed header in " + path.string() + ": " + e.what());
    }
    if (header.value("dtype", "") != "f32" || header.value("byte_order", "") != "little-endian")
        throw IoError("load_tensor: unsupported dtype/byte_order in " + path.string());
    const size_t rows = header.at("rows").get<size_t>();
    const size_t cols = header.at("cols").get<size_t>();
    std::vector<float> data(rows * cols);
    f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * 4));
    if (static_cast<size_t>(f.gcount()) != data.size() * 4)
        throw IoError("load_tensor: payload length mismatch in " + path.string());
    char extra;
    if (f.read(&extra, 1))
        throw IoError("load_tensor: trailing bytes in " + path.string());
    for (float v : data)
        if (!std::isfinite(v)) throw IoError("load_tensor: non-finite payload in " + path.string());
    return Tensor2D(rows, cols, std::move(data));
}

} // namespace nq
