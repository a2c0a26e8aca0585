#include "immlab/errors.hpp"
#include "immlab/selfimprove.hpp"

namespace immlab::lab {

double pass_at_k(std::size_t M, std::size_t c, std::size_t k) {
    if (k == 0 || k > M) {
        throw ConfigError("pass@k needs 1 <= k <= M (k = " + std::to_string(k) + ", M = " +
                          std::to_string(M) + ")");
    }
    if (c > M) {
        throw DataError("correct count " + std::to_string(c) + " exceeds M = " + std::to_string(M));
    }
    if (c == 0) {
        return 0.0;
    }
    if (c > M - k) {
        return 1.0;
    }
    // C(M - c, k) / C(M, k) = prod_{i = M - c + 1}^{M} (i - k) / i
    double miss = 1.0;
    for (std::size_t i = M - c + 1; i <= M; ++i) {
        miss *= static_cast<double>(i - k) / static_cast<double>(i);
    }
    return 1.0 - miss;
}

double pass_at_k(long long M, long long c, long long k) {
    if (M < 0 || c < 0 || k < 0) {
        throw ConfigError("pass@k arguments must be nonnegative");
    }
    return pass_at_k(static_cast<std::size_t>(M), static_cast<std::size_t>(c), static_cast<std::size_t>(k));
}

} // namespace immlab::lab
