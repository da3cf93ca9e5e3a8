#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "episeg/image.hpp"
#include "episeg/rng.hpp"

namespace episeg::test {

// Self-deleting scratch directory.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<uint64_t> counter{0};
        dir_ = std::filesystem::temp_directory_path() /
               ("episeg_" + tag + "_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter.fetch_add(1)));
        std::filesystem::create_directories(dir_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(dir_, ec);
    }
    std::filesystem::path path() const { return dir_; }
    std::string str() const { return dir_.string(); }
    std::string sub(const std::string& name) const { return (dir_ / name).string(); }

private:
    std::filesystem::path dir_;
};

inline ImageU8 random_image(Rng& rng, int w, int h, int ch = 1) {
    ImageU8 img(w, h, ch);
    for (auto& v : img.data) v = static_cast<uint8_t>(rng.uniform_int(256));
    return img;
}

inline ImageU8 random_mask(Rng& rng, int w, int h, double p1 = 0.5) {
    ImageU8 img(w, h, 1);
    for (auto& v : img.data) v = rng.uniform() < p1 ? 1 : 0;
    return img;
}

}  // namespace episeg::test
