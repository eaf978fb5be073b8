// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace flylora {

// Deterministic, splittable PRNG. A stream is identified by (seed, stream_id);
// the same pair yields the same draw sequence on every platform. Streams with
// distinct ids are statistically independent, so Monte Carlo trials can be
// indexed by trial number and run in any order.
//
// State setup uses splitmix64, bulk generation uses xoshiro256**.
class SeededStream {
  public:
    explicit SeededStream(std::uint64_t seed, std::uint64_t stream_id = 0)
        : seed_(seed), stream_id_(stream_id) {
        std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL * (stream_id + 1));
        for (auto& si : state_) {
            si = splitmix64(z);
        }
        have_spare_ = false;
        spare_ = 0.0;
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_id_; }

    // Independent child stream; used to give each trial / row / sample its own
    // sequence regardless of evaluation order.
    SeededStream fork(std::uint64_t child_id) const {
        std::uint64_t mixed = seed_;
        mixed ^= 0xbf58476d1ce4e5b9ULL * (stream_id_ + 0x9e3779b97f4a7c15ULL);
        mixed ^= 0x94d049bb133111ebULL * (child_id + 1);
        std::uint64_t z = mixed;
        return SeededStream(splitmix64(z), child_id);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, bound) without modulo bias.
    std::uint64_t next_below(std::uint64_t bound) {
        const std::uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            const std::uint64_t x = next_u64();
            if (x >= threshold) {
                return x % bound;
            }
        }
    }

    // Standard normal via Marsaglia polar method.
    double next_gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * next_double() - 1.0;
            v = 2.0 * next_double() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double scale = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * scale;
        have_spare_ = true;
        return u * scale;
    }

  private:
    static std::uint64_t splitmix64(std::uint64_t& z) {
        z += 0x9e3779b97f4a7c15ULL;
        std::uint64_t x = z;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t seed_;
    std::uint64_t stream_id_;
    std::array<std::uint64_t, 4> state_{};
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace flylora
