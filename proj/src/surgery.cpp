#include "upscale/surgery.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "json.hpp"
#include "upscale/error.hpp"
#include "upscale/log.hpp"

namespace upscale {

using json = nlohmann::json;

std::size_t BlockPlan::duplicate_count() const noexcept {
    return static_cast<std::size_t>(
        std::count_if(layout.begin(), layout.end(), [](const auto& e) { return e.second >= 2; }));
}

BlockPlan make_plan(std::size_t n_layers, std::size_t block_size, const std::vector<std::size_t>& usage) {
    if (block_size == 0) throw ValidationError("block_size must be at least 1");
    if (n_layers == 0 || n_layers % block_size != 0) {
        throw ValidationError("n_layers " + std::to_string(n_layers) + " is not divisible by block_size " +
                              std::to_string(block_size));
    }
    const std::size_t blocks = n_layers / block_size;
    if (usage.size() != blocks) {
        throw ValidationError("usage lists " + std::to_string(usage.size()) + " blocks, the model has " +
                              std::to_string(blocks));
    }
    BlockPlan plan;
    plan.source_layers = n_layers;
    plan.block_size = block_size;
    plan.usage = usage;
    for (std::size_t n = 1; n <= blocks; ++n) {
        if (usage[n - 1] == 0) throw ValidationError("usage of block " + std::to_string(n) + " is zero");
        for (std::size_t d = 1; d <= usage[n - 1]; ++d) plan.layout.emplace_back(n, d);
    }
    return plan;
}

std::string plan_to_json(const BlockPlan& plan) {
    return json{{"block_size", plan.block_size}, {"usage", plan.usage}}.dump();
}

BlockPlan plan_from_json(const std::string& text, std::size_t n_layers) {
    json j;
    try {
        j = json::parse(text);
        return make_plan(n_layers, j.at("block_size").get<std::size_t>(), j.at("usage").get<std::vector<std::size_t>>());
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed plan: ") + e.what());
    }
}

std::string SurgeryReport::to_json() const {
    return json{{"operation", operation},
                {"depth_before", depth_before},
                {"depth_after", depth_after},
                {"alpha_count", alpha_count},
                {"params_before", params_before},
                {"params_after", params_after},
                {"param_delta", param_delta()},
                {"first_block_duplicated", first_block_duplicated},
                {"notes", notes}}
        .dump(2);
}

namespace {

void fill_report(SurgeryReport* report, const char* op, const Model& before, const Model& after) {
    if (!report) return;
    report->operation = op;
    report->depth_before = before.layers.size();
    report->depth_after = after.layers.size();
    report->alpha_count = after.alphas.size();
    report->params_before = count_parameters(before);
    report->params_after = count_parameters(after);
}

void require_unwired(const Model& m, const char* op) {
    if (m.wiring) throw ContractError(std::string(op) + " expects a model without skip wiring");
}

}  // namespace

Tensor extend_embedding_rows(const Tensor& base, const std::vector<std::vector<TokenId>>& decompositions,
                             std::uint64_t fallback_seed) {
    if (base.rank() != 2) throw DimensionError("embedding matrix must be rank 2, got " + shape_string(base.shape()));
    const std::size_t rows = base.rows(), d = base.cols();
    Tensor out({rows + decompositions.size(), d});
    std::copy(base.data().begin(), base.data().end(), out.data().begin());

    std::vector<double> col_mean, col_std;
    std::mt19937_64 rng(fallback_seed);
    std::vector<double> acc(d);
    for (std::size_t i = 0; i < decompositions.size(); ++i) {
        auto dst = out.row(rows + i);
        const auto& parts = decompositions[i];
        if (parts.empty()) {
            if (col_mean.empty()) {
                col_mean.assign(d, 0.0);
                col_std.assign(d, 0.0);
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < d; ++c) col_mean[c] += base[r * d + c];
                }
                for (auto& m : col_mean) m /= static_cast<double>(rows);
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < d; ++c) {
                        const double diff = base[r * d + c] - col_mean[c];
                        col_std[c] += diff * diff;
                    }
                }
                for (auto& s : col_std) s = std::sqrt(s / static_cast<double>(rows));
            }
            for (std::size_t c = 0; c < d; ++c) {
                std::normal_distribution<double> dist(col_mean[c], col_std[c]);
                dst[c] = static_cast<float>(col_std[c] > 0.0 ? dist(rng) : col_mean[c]);
            }
            continue;
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        for (TokenId id : parts) {
            if (id < 0 || static_cast<std::size_t>(id) >= rows) {
                throw IdError("origin token " + std::to_string(id) + " is outside the base embedding");
            }
            for (std::size_t c = 0; c < d; ++c) acc[c] += base[static_cast<std::size_t>(id) * d + c];
        }
        for (std::size_t c = 0; c < d; ++c) dst[c] = static_cast<float>(acc[c] / static_cast<double>(parts.size()));
    }
    return out;
}

Model merge_token_embeddings(const Model& model, const Tokenizer& base, const Tokenizer& extended,
                             std::uint64_t fallback_seed, SurgeryReport* report) {
    const std::size_t base_vocab = base.vocab_size();
    if (model.config.vocab_size != base_vocab) {
        throw ContractError("model vocab_size " + std::to_string(model.config.vocab_size) +
                            " does not match the base tokenizer's " + std::to_string(base_vocab));
    }
    if (extended.base_size() != base_vocab || extended.vocab_size() < base_vocab) {
        throw ContractError("extended tokenizer was not built on this base (base_size " +
                            std::to_string(extended.base_size()) + ", expected " + std::to_string(base_vocab) + ")");
    }
    for (std::size_t id = 0; id < base_vocab; ++id) {
        const auto tid = static_cast<TokenId>(id);
        if (base.token_bytes(tid) != extended.token_bytes(tid)) {
            throw ContractError("extended tokenizer disagrees with the base on token " + std::to_string(id));
        }
    }
    std::vector<std::vector<TokenId>> parts;
    for (std::size_t id = base_vocab; id < extended.vocab_size(); ++id) {
        parts.push_back(decompose(static_cast<TokenId>(id), extended));
    }

    Model out = model;
    out.embed = extend_embedding_rows(model.embed, parts, fallback_seed);
    if (model.head) out.head = extend_embedding_rows(*model.head, parts, fallback_seed + 1);
    out.config.vocab_size = extended.vocab_size();
    validate_model(out);
    fill_report(report, "embed-merge", model, out);
    if (report) report->notes.push_back(std::to_string(parts.size()) + " tokens added");
    return out;
}

Model dus_v1(const Model& model, std::size_t k, SurgeryReport* report) {
    require_unwired(model, "dus_v1");
    const std::size_t n = model.layers.size();
    if (k == 0 || k > n) {
        throw ParameterError("K must lie in [1, " + std::to_string(n) + "], got " + std::to_string(k));
    }
    Model out = model;
    out.layers.clear();
    for (std::size_t i = 0; i < k; ++i) out.layers.push_back(model.layers[i]);
    for (std::size_t i = n - k; i < n; ++i) out.layers.push_back(model.layers[i]);
    out.config.n_layers = out.layers.size();
    validate_model(out);
    fill_report(report, "dus-v1", model, out);
    return out;
}

Model dus_v2(const Model& model, const BlockPlan& plan, double alpha_init, SurgeryReport* report) {
    require_unwired(model, "dus_v2");
    if (plan.source_layers != model.layers.size() || plan.source_layers != plan.block_size * plan.usage.size()) {
        throw ContractError("plan was made for " + std::to_string(plan.source_layers) + " layers, the model has " +
                            std::to_string(model.layers.size()));
    }
    if (!std::isfinite(alpha_init)) throw ParameterError("alpha_init must be finite");

    Model out = model;
    out.layers.clear();
    SkipWiring wiring;
    wiring.block_size = plan.block_size;
    std::vector<std::optional<std::size_t>> latest(plan.usage.size() + 1);  // origin block -> position
    bool first_block_dup = false;
    for (std::size_t p = 0; p < plan.layout.size(); ++p) {
        const auto [n, d] = plan.layout[p];
        for (std::size_t l = 0; l < plan.block_size; ++l) out.layers.push_back(model.layers[(n - 1) * plan.block_size + l]);
        WiringEntry e;
        e.origin_block = n;
        e.dup_index = d;
        if (d >= 2) {
            e.alpha_id = out.alphas.size();
            out.alphas.push_back(Tensor({1}, {static_cast<float>(alpha_init)}));
            if (n == 1) {
                first_block_dup = true;
            } else {
                e.source = latest[n - 1];
            }
        }
        latest[n] = p;
        wiring.entries.push_back(e);
    }
    if (!out.alphas.empty()) out.wiring = std::move(wiring);
    out.config.n_layers = out.layers.size();
    validate_model(out);
    fill_report(report, "dus-v2", model, out);
    if (report) {
        report->first_block_duplicated = first_block_dup;
        if (first_block_dup) report->notes.push_back("block 1 is duplicated; its skip input is the embedding output");
    }
    if (first_block_dup) log::warn("block 1 is duplicated; its skip input is the embedding output");
    return out;
}

namespace {
std::string snapshot_name(std::size_t layer, const char* part) {
    return "layer." + std::to_string(layer) + ".ffn." + part;
}
constexpr const char* kSnapshotStep = "snapshot.step";
}  // namespace

FfnSnapshot snapshot_ffn(const Model& model, std::uint64_t step) {
    FfnSnapshot s;
    s.step = step;
    for (const auto& L : model.layers) {
        if (L.is_moe()) throw ContractError("snapshots are taken from dense FFN layers only");
        s.layers.push_back(L.experts.front());
    }
    return s;
}

void save_snapshot(const FfnSnapshot& snapshot, const std::filesystem::path& path) {
    TensorList list;
    for (std::size_t i = 0; i < snapshot.layers.size(); ++i) {
        list.push_back({snapshot_name(i, "gate"), snapshot.layers[i].gate});
        list.push_back({snapshot_name(i, "up"), snapshot.layers[i].up});
        list.push_back({snapshot_name(i, "down"), snapshot.layers[i].down});
    }
    list.push_back({kSnapshotStep, Tensor64({1}, {static_cast<double>(snapshot.step)})});
    save_container(list, path);
}

FfnSnapshot load_snapshot(const std::filesystem::path& path) {
    const TensorMap map = load_container(path);
    FfnSnapshot s;
    try {
        s.step = static_cast<std::uint64_t>(get_f64(map, kSnapshotStep)[0]);
        const std::size_t n_layers = (map.size() - 1) / 3;
        if (map.size() != n_layers * 3 + 1) throw ContractError("snapshot has an incomplete set of FFN tensors");
        for (std::size_t i = 0; i < n_layers; ++i) {
            s.layers.push_back({get_f32(map, snapshot_name(i, "gate")), get_f32(map, snapshot_name(i, "up")),
                                get_f32(map, snapshot_name(i, "down"))});
        }
    } catch (const ContractError& e) {
        throw ContractError(path.string() + ": not an FFN snapshot (" + e.what() + ")");
    }
    return s;
}

Model expand_moe(const Model& model, std::vector<FfnSnapshot> snapshots, std::size_t n_experts, std::size_t top_k,
                 std::uint64_t router_seed, SurgeryReport* report) {
    if (n_experts == 0) throw ParameterError("experts must be at least 1");
    if (snapshots.size() != n_experts - 1) {
        throw ParameterError("need experts−1 = " + std::to_string(n_experts - 1) + " snapshots, got " +
                             std::to_string(snapshots.size()));
    }
    if (top_k == 0 || top_k > n_experts) {
        throw ParameterError("top_k must lie in [1, " + std::to_string(n_experts) + "], got " + std::to_string(top_k));
    }
    if (model.config.n_experts != 1) throw ContractError("expand_moe expects a dense model");
    std::stable_sort(snapshots.begin(), snapshots.end(), [](const auto& a, const auto& b) { return a.step < b.step; });
    for (const auto& s : snapshots) {
        if (s.layers.size() != model.layers.size()) {
            throw ContractError("snapshot at step " + std::to_string(s.step) + " has " + std::to_string(s.layers.size()) +
                                " layers, the model has " + std::to_string(model.layers.size()));
        }
        for (std::size_t i = 0; i < s.layers.size(); ++i) {
            const auto& ref = model.layers[i].experts.front();
            const auto& f = s.layers[i];
            if (f.gate.shape() != ref.gate.shape() || f.up.shape() != ref.up.shape() || f.down.shape() != ref.down.shape()) {
                throw ContractError("snapshot at step " + std::to_string(s.step) + " layer " + std::to_string(i) +
                                    " has FFN shapes that differ from the model");
            }
        }
    }

    Model out = model;
    out.config.top_k = top_k;
    if (n_experts > 1) {
        out.config.n_experts = n_experts;
        std::mt19937_64 rng(router_seed);
        std::normal_distribution<double> normal(0.0, 0.02);
        for (std::size_t i = 0; i < out.layers.size(); ++i) {
            auto& L = out.layers[i];
            for (const auto& s : snapshots) L.experts.push_back(s.layers[i]);
            Tensor router({model.config.embed_dim, n_experts});
            for (auto& v : router.data()) v = static_cast<float>(normal(rng));
            L.router = std::move(router);
        }
    }
    validate_model(out);
    fill_report(report, "moe-expand", model, out);
    if (report) {
        for (const auto& s : snapshots) report->notes.push_back("expert from snapshot step " + std::to_string(s.step));
    }
    return out;
}

ModelConfig retheta_and_unwindow(const ModelConfig& config, double new_theta) {
    if (!(new_theta > 0.0) || !std::isfinite(new_theta)) {
        throw ParameterError("rope_theta must be positive, got " + std::to_string(new_theta));
    }
    ModelConfig out = config;
    out.rope_theta = new_theta;
    out.sliding_window.reset();
    return out;
}

RouterLoad router_load(const Model& model, const TokenBatch& batch) {
    if (model.config.n_experts < 2) throw ContractError("router_load needs a model with MoE layers");
    RouterTrace trace;
    forward(model, batch, &trace);
    RouterLoad load;
    load.tokens = batch.batch * batch.seq;
    load.top_k = model.config.top_k;
    load.layer_index = trace.layer_index;
    for (const auto& picks : trace.selected) {
        std::vector<std::size_t> counts(model.config.n_experts, 0);
        for (std::size_t e : picks) ++counts[e];
        std::vector<double> f(counts.size());
        for (std::size_t e = 0; e < counts.size(); ++e) {
            f[e] = static_cast<double>(counts[e]) / static_cast<double>(load.tokens);
        }
        load.fractions.push_back(std::move(f));
    }
    return load;
}

}  // namespace upscale
