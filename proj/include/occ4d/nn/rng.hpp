// Seeded, serializable RNG used everywhere randomness is needed.
// xoshiro256++ core with splitmix64 seeding; Gaussian via Box-Muller.
// std:: distributions are implementation-defined, so results would not be
// reproducible across toolchains; this one is bit-stable.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

namespace occ4d::nn {

class Rng {
public:
    Rng() : Rng(0x9e3779b97f4a7c15ULL) {}

    explicit Rng(uint64_t seed) { reseed(seed); }

    void reseed(uint64_t seed) {
        // splitmix64 expansion of the seed into the xoshiro state
        uint64_t x = seed;
        for (auto& s : state_) {
            x += 0x9e3779b97f4a7c15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            s = z ^ (z >> 31);
        }
        has_spare_ = false;
        spare_ = 0.0;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl_(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl_(state_[3], 45);
        return result;
    }

    // uniform in [0, 1) with 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_index(uint64_t n) {
        // rejection sampling keeps the draw unbiased
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    // standard normal, Box-Muller with cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    void fill_normal(double* dst, size_t n, double stddev = 1.0) {
        for (size_t i = 0; i < n; ++i) dst[i] = stddev * normal();
    }

    // 33 bytes: 4 x u64 state, spare flag, spare value
    std::vector<uint8_t> serialize() const {
        std::vector<uint8_t> out(4 * 8 + 1 + 8);
        for (int i = 0; i < 4; ++i) store_u64_(out.data() + 8 * i, state_[i]);
        out[32] = has_spare_ ? 1 : 0;
        uint64_t bits;
        std::memcpy(&bits, &spare_, 8);
        store_u64_(out.data() + 33, bits);
        return out;
    }

    bool deserialize(const uint8_t* data, size_t n) {
        if (n != 41) return false;
        for (int i = 0; i < 4; ++i) state_[i] = load_u64_(data + 8 * i);
        has_spare_ = data[32] != 0;
        const uint64_t bits = load_u64_(data + 33);
        std::memcpy(&spare_, &bits, 8);
        return true;
    }

private:
    static uint64_t rotl_(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    static void store_u64_(uint8_t* p, uint64_t v) {
        for (int i = 0; i < 8; ++i) p[i] = static_cast<uint8_t>(v >> (8 * i));
    }

    static uint64_t load_u64_(const uint8_t* p) {
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
        return v;
    }

    std::array<uint64_t, 4> state_{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace occ4d::nn
