#pragma once
#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "noisyquant/error.hpp"

namespace nq {

// Fixed-edge histogram with explicit under/overflow buckets.
struct Histogram {
    std::vector<double> edges;   // strictly increasing, size = bins+1
    std::vector<uint64_t> counts;
    uint64_t underflow = 0;
    uint64_t overflow = 0;

    static Histogram with_range(double lo, double hi, size_t bins) {
        if (!(lo < hi) || bins == 0) throw ConfigError("Histogram: invalid range/bins");
        Histogram h;
        h.edges.resize(bins + 1);
        for (size_t i = 0; i <= bins; ++i)
            h.edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
        h.counts.assign(bins, 0);
        return h;
    }

    void add(double v) {
        if (v < edges.front()) {
            ++underflow;
            return;
        }
        if (v >= edges.back()) {
            // the top edge is inclusive
            if (v == edges.back()) {
                ++counts.back();
            } else {
                ++overflow;
            }
            return;
        }
        auto it = std::upper_bound(edges.begin(), edges.end(), v);
        ++counts[static_cast<size_t>(it - edges.begin()) - 1];
    }

    template <typename It>
    void add_all(It first, It last) {
        for (; first != last; ++first) add(static_cast<double>(*first));
    }

    uint64_t total() const {
        uint64_t t = underflow + overflow;
        for (uint64_t c : counts) t += c;
        return t;
    }

    // CSV: bin_lo, bin_hi, count; under/overflow as sentinel rows.
    void save_csv(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw IoError("Histogram: cannot open " + path);
        f << "bin_lo,bin_hi,count\n";
        f << "-inf," << edges.front() << "," << underflow << "\n";
        for (size_t i = 0; i < counts.size(); ++i)
            f << edges[i] << "," << edges[i + 1] << "," << counts[i] << "\n";
        f << edges.back() << ",+inf," << overflow << "\n";
    }
};

} // namespace nq
