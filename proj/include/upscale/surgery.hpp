#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "upscale/bpe.hpp"
#include "upscale/model.hpp"

namespace upscale {

/// Block-level duplication plan: the source's layers are split into
/// contiguous blocks of block_size layers and block n is repeated usage[n-1]
/// times in place.
struct BlockPlan {
    std::size_t source_layers = 0;
    std::size_t block_size = 1;
    std::vector<std::size_t> usage;
    /// (origin block, duplicate index), both 1-based, in execution order.
    std::vector<std::pair<std::size_t, std::size_t>> layout;

    std::size_t depth() const noexcept { return layout.size() * block_size; }
    /// Number of block instances with a duplicate index of 2 or more.
    std::size_t duplicate_count() const noexcept;
};

/// Throws ValidationError on an indivisible layer count, a usage list of
/// the wrong length, or a zero usage entry.
BlockPlan make_plan(std::size_t n_layers, std::size_t block_size, const std::vector<std::size_t>& usage);

/// Plans on disk are {"block_size": B, "usage": [...]}.
std::string plan_to_json(const BlockPlan& plan);
BlockPlan plan_from_json(const std::string& text, std::size_t n_layers);

struct SurgeryReport {
    std::string operation;
    std::size_t depth_before = 0;
    std::size_t depth_after = 0;
    std::size_t alpha_count = 0;
    std::uint64_t params_before = 0;
    std::uint64_t params_after = 0;
    bool first_block_duplicated = false;
    std::vector<std::string> notes;

    std::int64_t param_delta() const noexcept {
        return static_cast<std::int64_t>(params_after) - static_cast<std::int64_t>(params_before);
    }
    std::string to_json() const;
};

/// Rows < base.rows() are copied; row base.rows()+i is the mean of the base
/// rows listed in decompositions[i], or a Gaussian draw with the per-column
/// mean and standard deviation of `base` when that list is empty.
Tensor extend_embedding_rows(const Tensor& base, const std::vector<std::vector<TokenId>>& decompositions,
                             std::uint64_t fallback_seed);

/// Grows the embedding (and an untied head) to the extended vocabulary.
/// Throws ContractError when model and tokenizers disagree on sizes.
Model merge_token_embeddings(const Model& model, const Tokenizer& base, const Tokenizer& extended,
                             std::uint64_t fallback_seed, SurgeryReport* report = nullptr);

/// Keeps the first K and the last K layers. Throws ParameterError unless
/// 1 ≤ K ≤ n_layers.
Model dus_v1(const Model& model, std::size_t k, SurgeryReport* report = nullptr);

/// Repeats blocks per `plan` and wires every duplicate (d ≥ 2) to the
/// latest instance of the previous origin block through a learnable α.
/// Throws ContractError if the plan was made for a different depth or the
/// model already carries skip wiring.
Model dus_v2(const Model& model, const BlockPlan& plan, double alpha_init = 1.0, SurgeryReport* report = nullptr);

/// Dense FFN weights of every layer at a given training step.
struct FfnSnapshot {
    std::uint64_t step = 0;
    std::vector<BasicFfn<float>> layers;
};

FfnSnapshot snapshot_ffn(const Model& model, std::uint64_t step);
void save_snapshot(const FfnSnapshot& snapshot, const std::filesystem::path& path);
FfnSnapshot load_snapshot(const std::filesystem::path& path);

/// Turns every dense FFN into an n_experts-way MoE layer: expert 0 keeps the
/// current weights, experts 1.. take the snapshots in ascending step order.
/// Throws ParameterError when snapshots.size() != n_experts - 1 or top_k is
/// out of range, ContractError on shape mismatches or an already-MoE model.
Model expand_moe(const Model& model, std::vector<FfnSnapshot> snapshots, std::size_t n_experts, std::size_t top_k,
                 std::uint64_t router_seed, SurgeryReport* report = nullptr);

/// Clears the sliding window and sets a new RoPE base. Throws ParameterError
/// for θ ≤ 0.
ModelConfig retheta_and_unwindow(const ModelConfig& config, double new_theta);

struct RouterLoad {
    std::size_t tokens = 0;
    std::size_t top_k = 0;
    std::vector<std::size_t> layer_index;
    /// fractions[l][e]: share of tokens that picked expert e in layer l.
    std::vector<std::vector<double>> fractions;
};

/// Throws ContractError for a dense model.
RouterLoad router_load(const Model& model, const TokenBatch& batch);

}  // namespace upscale
