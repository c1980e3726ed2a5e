#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "upscale/bpe.hpp"
#include "upscale/checkpoint.hpp"
#include "upscale/config.hpp"
#include "upscale/graph.hpp"
#include "upscale/tensor.hpp"

namespace upscale {

// Weight layout: projections are stored [in × out] and applied as x·W.
// The embedding table and the output head are [vocab × embed_dim].

template <class T>
struct BasicFfn {
    BasicTensor<T> gate;  // embed_dim × intermediate_dim
    BasicTensor<T> up;    // embed_dim × intermediate_dim
    BasicTensor<T> down;  // intermediate_dim × embed_dim
};

template <class T>
struct BasicLayer {
    BasicTensor<T> q, k, v, o;
    BasicTensor<T> attn_norm, ffn_norm;
    std::vector<BasicFfn<T>> experts;      // one entry for a dense layer
    std::optional<BasicTensor<T>> router;  // embed_dim × n_experts, MoE only

    bool is_moe() const { return router.has_value(); }
};

/// One block instance in a depth-up-scaled model. Blocks are origin block
/// indices of the source model (1-based); dup_index counts repeats of the
/// same origin block (1-based). Instances with dup_index ≥ 2 take a skip
/// input alpha·Output of the previous origin block's latest duplicate.
struct WiringEntry {
    std::size_t origin_block = 1;
    std::size_t dup_index = 1;
    std::optional<std::size_t> alpha_id;
    /// Position (0-based, in execution order) of the block instance whose
    /// output feeds the skip; empty with an alpha means the embedding output.
    std::optional<std::size_t> source;

    friend bool operator==(const WiringEntry&, const WiringEntry&) = default;
};

struct SkipWiring {
    std::size_t block_size = 1;
    std::vector<WiringEntry> entries;

    friend bool operator==(const SkipWiring&, const SkipWiring&) = default;
};

template <class T>
struct BasicModel {
    ModelConfig config;
    BasicTensor<T> embed;
    std::vector<BasicLayer<T>> layers;
    BasicTensor<T> final_norm;
    std::optional<BasicTensor<T>> head;
    std::optional<SkipWiring> wiring;
    std::vector<BasicTensor<T>> alphas;  // one-element tensors

    template <class U>
    BasicModel<U> cast() const;
};

using Model = BasicModel<float>;
using Model64 = BasicModel<double>;

struct ParamSpec {
    std::string name;
    Shape shape;
};

/// Every weight tensor build_model creates for `config`, in storage order.
/// Skip scalars are model-specific and not included.
std::vector<ParamSpec> parameter_inventory(const ModelConfig& config);

/// Closed-form parameter count: embeddings, per-layer attention, experts,
/// router and norms, final norm and the untied head.
std::uint64_t param_count(const ModelConfig& config);

/// Gaussian(0, 0.02) weights, unit norm weights; deterministic per seed.
Model build_model(const ModelConfig& config, std::uint64_t seed);

/// Structural checks: tensor shapes against the config, layer count, and
/// wiring consistency. Throws ValidationError.
template <class T>
void validate_model(const BasicModel<T>& model);

/// Calls fn(name, tensor) for every trainable tensor in storage order
/// (including skip scalars).
template <class T>
void for_each_parameter(BasicModel<T>& model, const std::function<void(const std::string&, BasicTensor<T>&)>& fn);
template <class T>
void for_each_parameter(const BasicModel<T>& model,
                        const std::function<void(const std::string&, const BasicTensor<T>&)>& fn);

std::uint64_t count_parameters(const Model& model);

struct TokenBatch {
    std::size_t batch = 1;
    std::size_t seq = 0;
    std::vector<TokenId> ids;  // batch × seq, row-major
};

/// Expert choices recorded during a forward pass: for each MoE layer,
/// batch·seq·top_k expert indices (per token, highest weight first).
struct RouterTrace {
    std::vector<std::size_t> layer_index;
    std::vector<std::vector<std::size_t>> selected;
    std::vector<std::vector<double>> weights;  // matching softmax weights
};

/// Graph handles for a model's parameters. `flat` follows for_each_parameter order.
struct ModelVars {
    struct Ffn {
        Var gate, up, down;
    };
    struct Layer {
        Var q, k, v, o, attn_norm, ffn_norm;
        std::vector<Ffn> experts;
        std::optional<Var> router;
    };
    Var embed;
    std::vector<Layer> layers;
    Var final_norm;
    std::optional<Var> head;
    std::vector<Var> alphas;
    std::vector<Var> flat;
};

template <class T>
ModelVars bind_parameters(Graph<T>& g, const BasicModel<T>& model, bool requires_grad);

/// Records the forward pass and returns logits as [batch·seq × vocab].
/// Throws ContextError when seq exceeds ctx_len and IdError on bad ids.
template <class T>
Var forward_graph(Graph<T>& g, const BasicModel<T>& model, const ModelVars& vars, const TokenBatch& batch,
                  RouterTrace* trace = nullptr);

/// Logits as [batch × seq × vocab].
template <class T>
BasicTensor<T> forward(const BasicModel<T>& model, const TokenBatch& batch, RouterTrace* trace = nullptr);

/// Gradients from the last backward(), aligned with vars.flat.
template <class T>
std::vector<BasicTensor<T>> collect_gradients(const Graph<T>& g, const ModelVars& vars);

// Persistence: tensors go to `path`, the config document (with the skip
// wiring when present) to config_path_for(path).
std::filesystem::path config_path_for(const std::filesystem::path& path);
TensorList model_tensors(const Model& model);
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);
Model model_from_tensors(const ModelConfig& config, const std::optional<SkipWiring>& wiring, const TensorMap& tensors);

std::string wiring_to_json(const SkipWiring& wiring);
SkipWiring wiring_from_json(const std::string& text);

}  // namespace upscale
