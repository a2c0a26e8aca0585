#pragma once

#include "immlab/checkpoint.hpp"
#include "immlab/rng.hpp"

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

namespace testutil {

// Fresh scratch directory under the system temp dir, removed on destruction.
struct TempDir {
    std::filesystem::path path;
    TempDir() {
        std::string tmpl = (std::filesystem::temp_directory_path() / "immlab_test_XXXXXX").string();
        path = mkdtemp(tmpl.data());
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

inline std::filesystem::path fixture(const std::string& name) {
    return std::filesystem::path(IMMLAB_FIXTURE_DIR) / name;
}

// Random checkpoint with the given name -> shape map, values ~ U(-1, 1).
inline immlab::Checkpoint random_checkpoint(const std::map<std::string, std::vector<std::size_t>>& shapes,
                                            std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    immlab::Checkpoint c;
    for (const auto& [name, shape] : shapes) {
        std::size_t n = 1;
        for (auto d : shape) {
            n *= d;
        }
        std::vector<float> v(n);
        for (auto& x : v) {
            x = dist(gen);
        }
        c.tensors.emplace(name, immlab::Tensor(shape, v));
    }
    return c;
}

} // namespace testutil
