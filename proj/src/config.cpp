#include "upscale/config.hpp"

#include <cmath>

#include "upscale/error.hpp"

namespace upscale {

namespace {

void require(bool ok, const char* field, const std::string& why) {
    if (!ok) throw ValidationError(std::string("config field '") + field + "': " + why);
}

}  // namespace

void validate(const ModelConfig& c) {
    require(c.vocab_size >= 1, "vocab_size", "must be at least 1");
    require(c.embed_dim >= 1, "embed_dim", "must be at least 1");
    require(c.intermediate_dim >= 1, "intermediate_dim", "must be at least 1");
    require(c.n_layers >= 1, "n_layers", "must be at least 1");
    require(c.n_heads >= 1, "n_heads", "must be at least 1");
    require(c.n_kv_heads >= 1, "n_kv_heads", "must be at least 1");
    require(c.n_heads % c.n_kv_heads == 0, "n_kv_heads", "must divide n_heads");
    require(c.embed_dim % c.n_heads == 0, "embed_dim", "must be divisible by n_heads");
    require(c.head_dim() % 2 == 0, "embed_dim", "head_dim must be even for rotary embeddings");
    require(c.n_experts >= 1, "n_experts", "must be at least 1");
    require(c.top_k >= 1 && c.top_k <= c.n_experts, "top_k", "must lie in [1, n_experts]");
    require(std::isfinite(c.rope_theta) && c.rope_theta > 0.0, "rope_theta", "must be a positive finite number");
    require(!c.sliding_window || *c.sliding_window >= 1, "sliding_window", "must be at least 1 when present");
    require(c.ctx_len >= 1, "ctx_len", "must be at least 1");
    require(std::isfinite(c.norm_eps) && c.norm_eps > 0.0, "norm_eps", "must be positive");
}

ModelConfig phi3_medium_config() {
    ModelConfig c;
    c.vocab_size = 32064;
    c.embed_dim = 5120;
    c.intermediate_dim = 17920;
    c.n_layers = 40;
    c.n_heads = 40;
    c.n_kv_heads = 10;
    c.n_experts = 1;
    c.top_k = 1;
    c.rope_theta = 1e4;
    c.sliding_window = 2047;
    c.ctx_len = 4096;
    c.tie_embeddings = false;
    c.norm_eps = 1e-5;
    return c;
}

ModelConfig jai1_config() {
    ModelConfig c = phi3_medium_config();
    c.vocab_size = 64000;
    c.n_layers = 64;
    c.n_experts = 4;
    c.top_k = 2;
    c.rope_theta = 1e6;
    c.sliding_window.reset();
    c.ctx_len = 32768;
    return c;
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 256;
    c.embed_dim = 64;
    c.intermediate_dim = 128;
    c.n_layers = 2;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.ctx_len = 128;
    return c;
}

}  // namespace upscale
