#pragma once

#include <cstdint>
#include <string_view>

namespace immlab {

// splitmix64 stream. The whole state is the 64-bit counter, so copying a
// stream forks it.
class SeededStream {
public:
    constexpr explicit SeededStream(std::uint64_t seed = 0) noexcept : state_(seed) {}

    constexpr std::uint64_t next_u64() noexcept {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 bits of resolution.
    constexpr double next_uniform() noexcept {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n). Uses the floating mapping so that every
    // consumer of the stream sees the same draw sequence.
    std::uint64_t next_below(std::uint64_t n) noexcept;

    // Standard normal via Box-Muller; consumes two uniforms per call.
    double next_normal() noexcept;

    constexpr std::uint64_t state() const noexcept { return state_; }

private:
    std::uint64_t state_;
};

inline double next_uniform(SeededStream& s) noexcept { return s.next_uniform(); }

// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a64(std::string_view bytes) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Per-tensor (or per-item) seed: FNV-1a of the name XOR the master seed.
// Throws ConfigError on an empty name.
std::uint64_t derive_tensor_seed(std::uint64_t master_seed, std::string_view tensor_name);

} // namespace immlab
