#include "immlab/parallel.hpp"

#include <cstdlib>
#include <string>

namespace immlab {

std::size_t worker_threads() {
    const char* env = std::getenv("IMM_LAB_THREADS");
    if (env == nullptr || *env == '\0') {
        return 1;
    }
    try {
        const long v = std::stol(env);
        return v < 1 ? 1 : static_cast<std::size_t>(v);
    } catch (...) {
        return 1;
    }
}

} // namespace immlab
