#include "immlab/rng.hpp"

#include "immlab/errors.hpp"

#include <cmath>
#include <numbers>

namespace immlab {

std::uint64_t SeededStream::next_below(std::uint64_t n) noexcept {
    if (n == 0) {
        return 0;
    }
    auto v = static_cast<std::uint64_t>(next_uniform() * static_cast<double>(n));
    return v < n ? v : n - 1;
}

double SeededStream::next_normal() noexcept {
    // 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - next_uniform();
    const double u2 = next_uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t derive_tensor_seed(std::uint64_t master_seed, std::string_view tensor_name) {
    if (tensor_name.empty()) {
        throw ConfigError("derive_tensor_seed: empty name");
    }
    return fnv1a64(tensor_name) ^ master_seed;
}

} // namespace immlab
