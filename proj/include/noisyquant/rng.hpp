#pragma once
#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>

namespace nq {

// Deterministic, platform-independent PRNG: xoshiro256++ seeded through
// splitmix64. Sub-streams are derived by mixing the master seed with a
// layer id and a purpose tag, so parallel per-layer work stays reproducible.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t s = seed;
        for (auto& w : state_) w = splitmix64(s);
    }

    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ULL;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // FNV-1a over the purpose tag, folded with layer id into the master seed.
    static uint64_t sub_seed(uint64_t master, uint64_t layer_id, std::string_view purpose) {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (char c : purpose) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        uint64_t s = master;
        uint64_t a = splitmix64(s);
        s ^= layer_id * 0x9e3779b97f4a7c15ULL;
        uint64_t b = splitmix64(s);
        s ^= h;
        uint64_t c = splitmix64(s);
        return a ^ (b << 1) ^ c;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // [lo, hi)
    double uniform(double lo, double hi) { return lo + next_double() * (hi - lo); }

    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> state_{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace nq
