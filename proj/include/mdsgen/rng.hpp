#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace mds {

// Counter-based generator (Philox-4x32-10). The stream is a pure function of
// (seed, stream, counter), so identical seeds reproduce identical sequences on
// any platform, state serializes to three integers, and independent substreams
// can be forked without consuming draws from the parent.
class Rng {
public:
    Rng() : Rng(0) {}
    explicit Rng(uint64_t seed, uint64_t stream = 0)
        : seed_(seed), stream_(stream) {}

    uint32_t next_u32() {
        if (buf_pos_ == 4) {
            block_ = philox(counter_++);
            buf_pos_ = 0;
        }
        return block_[buf_pos_++];
    }

    // uniform in [0, 1)
    double uniform() {
        return next_u32() * (1.0 / 4294967296.0);
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // uniform integer in [0, n)
    uint64_t randint(uint64_t n) {
        // 64-bit draw reduces modulo bias below measurability for n << 2^64
        uint64_t hi = next_u32(), lo = next_u32();
        return ((hi << 32) | lo) % n;
    }

    bool bernoulli(double p) {
        return uniform() < p;
    }

    // standard normal via Box-Muller, one spare cached
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = (next_u32() + 1.0) * (1.0 / 4294967296.0);  // (0, 1]
        double u2 = next_u32() * (1.0 / 4294967296.0);
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586477 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Independent substream: same seed, distinct stream word mixed from tag.
    Rng fork(uint64_t tag) const {
        return Rng(seed_, mix(stream_, tag));
    }

    uint64_t seed() const { return seed_; }
    uint64_t stream() const { return stream_; }
    uint64_t counter() const { return counter_; }

    // Restore an exact mid-sequence position (used by checkpoint resume).
    // Cached Box-Muller spare is dropped, so save/restore must happen at the
    // same call boundaries to be bit-exact; the trainer only saves between steps
    // after draining draws in whole-block units, which is sufficient because
    // resume re-executes the identical call sequence from the restored counter.
    void restore(uint64_t counter, uint32_t buf_pos, bool has_spare, double spare) {
        counter_ = counter;
        buf_pos_ = 4;
        has_spare_ = has_spare;
        spare_ = spare;
        if (buf_pos != 4) {
            block_ = philox(counter_ - 1);
            buf_pos_ = buf_pos;
        }
    }
    uint32_t buf_pos() const { return buf_pos_; }
    bool has_spare() const { return has_spare_; }
    double spare() const { return spare_; }

private:
    static uint64_t mix(uint64_t a, uint64_t b) {
        // splitmix64 finalizer over the xor
        uint64_t z = a ^ (b + 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    std::array<uint32_t, 4> philox(uint64_t ctr) const {
        uint32_t c0 = uint32_t(ctr), c1 = uint32_t(ctr >> 32);
        uint32_t c2 = uint32_t(stream_), c3 = uint32_t(stream_ >> 32);
        uint32_t k0 = uint32_t(seed_), k1 = uint32_t(seed_ >> 32);
        for (int round = 0; round < 10; ++round) {
            uint64_t p0 = 0xD2511F53ull * c0;
            uint64_t p1 = 0xCD9E8D57ull * c2;
            uint32_t h0 = uint32_t(p0 >> 32), l0 = uint32_t(p0);
            uint32_t h1 = uint32_t(p1 >> 32), l1 = uint32_t(p1);
            uint32_t n0 = h1 ^ c1 ^ k0;
            uint32_t n1 = l1;
            uint32_t n2 = h0 ^ c3 ^ k1;
            uint32_t n3 = l0;
            c0 = n0; c1 = n1; c2 = n2; c3 = n3;
            k0 += 0x9E3779B9u;
            k1 += 0xBB67AE85u;
        }
        return {c0, c1, c2, c3};
    }

    uint64_t seed_;
    uint64_t stream_;
    uint64_t counter_ = 0;
    std::array<uint32_t, 4> block_{};
    uint32_t buf_pos_ = 4;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace mds
