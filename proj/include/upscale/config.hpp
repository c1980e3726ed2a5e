#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

namespace upscale {

/// Architecture of a decoder-only transformer. Field names follow the
/// usual Hugging Face vocabulary; embed_dim is the residual width and
/// intermediate_dim the FFN hidden width.
struct ModelConfig {
    std::size_t vocab_size = 256;
    std::size_t embed_dim = 64;
    std::size_t intermediate_dim = 128;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t n_kv_heads = 2;
    std::size_t n_experts = 1;
    std::size_t top_k = 1;
    double rope_theta = 10000.0;
    std::optional<std::size_t> sliding_window;
    std::size_t ctx_len = 128;
    bool tie_embeddings = false;
    double norm_eps = 1e-5;

    std::size_t head_dim() const { return n_heads == 0 ? 0 : embed_dim / n_heads; }
    std::size_t kv_dim() const { return n_kv_heads * head_dim(); }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Throws ValidationError naming the first offending field.
void validate(const ModelConfig& config);

/// phi-3-medium as a base model: 40 layers, 5120 wide, RoPE θ=10K with a
/// 2047-token sliding window. n_kv_heads=10 and an untied head are
/// assumptions (the GQA group count is not published).
ModelConfig phi3_medium_config();

/// The up-scaled 64-layer, 4-expert (top-2) configuration with a 64000-token
/// vocabulary, RoPE θ=1M and no sliding window.
ModelConfig jai1_config();

/// Desk-scale default used by tests and the CLI: 2 layers, 64 wide, 4 heads.
ModelConfig tiny_config();

}  // namespace upscale
