#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "upscale/config.hpp"
#include "upscale/model.hpp"
#include "upscale/tensor.hpp"

namespace testing {

class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("upscale_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

// ‖a − b‖∞ / ‖b‖∞
template <class A, class B>
double rel_err(const A& a, const B& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        num = std::max(num, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
        den = std::max(den, std::abs(static_cast<double>(b[i])));
    }
    return den == 0.0 ? num : num / den;
}

inline upscale::Tensor64 random_tensor64(upscale::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    upscale::Tensor64 t(std::move(shape));
    std::normal_distribution<double> n(0.0, scale);
    for (auto& v : t.data()) v = n(rng);
    return t;
}

inline upscale::Tensor random_tensor(upscale::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    upscale::Tensor t(std::move(shape));
    std::normal_distribution<double> n(0.0, scale);
    for (auto& v : t.data()) v = static_cast<float>(n(rng));
    return t;
}

inline upscale::ModelConfig small_config(std::size_t layers = 2, std::size_t vocab = 32, std::size_t dim = 16) {
    upscale::ModelConfig c;
    c.vocab_size = vocab;
    c.embed_dim = dim;
    c.intermediate_dim = dim * 2;
    c.n_layers = layers;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.ctx_len = 32;
    return c;
}

inline upscale::TokenBatch random_batch(std::size_t batch, std::size_t seq, std::size_t vocab, std::mt19937_64& rng) {
    upscale::TokenBatch b{batch, seq, {}};
    std::uniform_int_distribution<int> d(0, static_cast<int>(vocab) - 1);
    for (std::size_t i = 0; i < batch * seq; ++i) b.ids.push_back(d(rng));
    return b;
}

/// Scales every weight of a freshly built model (skip scalars excepted) so
/// activations are O(1) rather than O(0.02), which makes numerical
/// comparisons meaningful.
template <class T>
void rescale_weights(upscale::BasicModel<T>& m, double factor, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> jitter(0.5, 1.5);
    upscale::for_each_parameter<T>(m, [&](const std::string& name, upscale::BasicTensor<T>& t) {
        if (name.rfind("alpha.", 0) == 0) return;
        const bool norm = name.find("norm") != std::string::npos;
        for (auto& v : t.data()) v = norm ? static_cast<T>(jitter(rng)) : static_cast<T>(v * factor);
    });
}

/// Double copy with weights scaled up so layers do real work.
inline upscale::Model64 lifted(const upscale::Model& m, double scale = 25.0, std::uint64_t seed = 3) {
    upscale::Model64 d = m.cast<double>();
    rescale_weights(d, scale, seed);
    return d;
}

}  // namespace testing
