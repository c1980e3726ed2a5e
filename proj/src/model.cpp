#include "upscale/model.hpp"

#include <map>
#include <random>
#include <set>

#include "json.hpp"
#include "upscale/error.hpp"
#include "upscale/kernels.hpp"

namespace upscale {

using json = nlohmann::json;

namespace {

std::string layer_name(std::size_t i, const std::string& leaf) { return "layer." + std::to_string(i) + "." + leaf; }

std::string expert_name(std::size_t i, std::size_t e, const char* part) {
    return layer_name(i, "ffn." + std::to_string(e) + "." + part);
}

template <class T, class F>
void visit_parameters(BasicModel<T>& m, F&& fn) {
    fn(std::string("embed.weight"), m.embed);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        auto& L = m.layers[i];
        fn(layer_name(i, "attn.q"), L.q);
        fn(layer_name(i, "attn.k"), L.k);
        fn(layer_name(i, "attn.v"), L.v);
        fn(layer_name(i, "attn.o"), L.o);
        fn(layer_name(i, "norm.attn"), L.attn_norm);
        fn(layer_name(i, "norm.ffn"), L.ffn_norm);
        if (L.router) fn(layer_name(i, "router"), *L.router);
        for (std::size_t e = 0; e < L.experts.size(); ++e) {
            fn(expert_name(i, e, "gate"), L.experts[e].gate);
            fn(expert_name(i, e, "up"), L.experts[e].up);
            fn(expert_name(i, e, "down"), L.experts[e].down);
        }
    }
    fn(std::string("final_norm"), m.final_norm);
    if (m.head) fn(std::string("head"), *m.head);
    for (std::size_t j = 0; j < m.alphas.size(); ++j) fn("alpha." + std::to_string(j), m.alphas[j]);
}

std::size_t alpha_count(const std::optional<SkipWiring>& wiring) {
    if (!wiring) return 0;
    std::size_t n = 0;
    for (const auto& e : wiring->entries) n += e.alpha_id ? 1 : 0;
    return n;
}

template <class T>
BasicTensor<T> take(std::map<std::string, BasicTensor<T>>& pool, const std::string& name) {
    auto it = pool.find(name);
    if (it == pool.end()) throw ValidationError("model is missing tensor '" + name + "'");
    BasicTensor<T> t = std::move(it->second);
    pool.erase(it);
    return t;
}

void validate_wiring(const SkipWiring& w, std::size_t n_layers, std::size_t n_alphas) {
    if (w.block_size == 0 || w.entries.empty() || w.entries.size() * w.block_size != n_layers) {
        throw ValidationError("skip wiring covers " + std::to_string(w.entries.size()) + " blocks of " +
                              std::to_string(w.block_size) + " layers but the model has " + std::to_string(n_layers));
    }
    std::set<std::size_t> alpha_ids;
    std::map<std::size_t, std::size_t> last_position;  // origin block -> latest instance seen so far
    std::size_t prev_origin = 0, prev_dup = 0;
    for (std::size_t p = 0; p < w.entries.size(); ++p) {
        const auto& e = w.entries[p];
        const bool continues = e.origin_block == prev_origin && e.dup_index == prev_dup + 1;
        const bool starts = e.origin_block > prev_origin && e.dup_index == 1;
        if (!continues && !starts) throw ValidationError("skip wiring layout is not in ascending block order at position " + std::to_string(p));
        if (e.dup_index == 1) {
            if (e.alpha_id || e.source) throw ValidationError("first instance of a block cannot carry a skip input");
        } else {
            if (!e.alpha_id) throw ValidationError("duplicated block at position " + std::to_string(p) + " lacks an alpha");
            if (!alpha_ids.insert(*e.alpha_id).second || *e.alpha_id >= n_alphas) {
                throw ValidationError("skip wiring alpha ids must be unique and below " + std::to_string(n_alphas));
            }
            const auto prev = last_position.find(e.origin_block - 1);
            if (e.origin_block == 1 || prev == last_position.end()) {
                if (e.source) throw ValidationError("block 1 duplicates take their skip from the embedding output");
            } else if (!e.source || *e.source != prev->second) {
                throw ValidationError("skip source at position " + std::to_string(p) +
                                      " must be the latest instance of the previous origin block");
            }
        }
        last_position[e.origin_block] = p;
        prev_origin = e.origin_block;
        prev_dup = e.dup_index;
    }
    if (alpha_ids.size() != n_alphas) throw ValidationError("model holds alphas that the wiring never uses");
}

}  // namespace

template <class T>
template <class U>
BasicModel<U> BasicModel<T>::cast() const {
    BasicModel<U> out;
    out.config = config;
    out.wiring = wiring;
    out.embed = embed.template cast<U>();
    for (const auto& L : layers) {
        BasicLayer<U> l;
        l.q = L.q.template cast<U>();
        l.k = L.k.template cast<U>();
        l.v = L.v.template cast<U>();
        l.o = L.o.template cast<U>();
        l.attn_norm = L.attn_norm.template cast<U>();
        l.ffn_norm = L.ffn_norm.template cast<U>();
        for (const auto& e : L.experts) {
            l.experts.push_back({e.gate.template cast<U>(), e.up.template cast<U>(), e.down.template cast<U>()});
        }
        if (L.router) l.router = L.router->template cast<U>();
        out.layers.push_back(std::move(l));
    }
    out.final_norm = final_norm.template cast<U>();
    if (head) out.head = head->template cast<U>();
    for (const auto& a : alphas) out.alphas.push_back(a.template cast<U>());
    return out;
}

template BasicModel<double> BasicModel<float>::cast<double>() const;
template BasicModel<float> BasicModel<double>::cast<float>() const;
template BasicModel<float> BasicModel<float>::cast<float>() const;

std::vector<ParamSpec> parameter_inventory(const ModelConfig& c) {
    validate(c);
    const std::size_t d = c.embed_dim, I = c.intermediate_dim, qd = c.n_heads * c.head_dim(), kd = c.kv_dim();
    std::vector<ParamSpec> out;
    out.push_back({"embed.weight", {c.vocab_size, d}});
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        out.push_back({layer_name(i, "attn.q"), {d, qd}});
        out.push_back({layer_name(i, "attn.k"), {d, kd}});
        out.push_back({layer_name(i, "attn.v"), {d, kd}});
        out.push_back({layer_name(i, "attn.o"), {qd, d}});
        out.push_back({layer_name(i, "norm.attn"), {d}});
        out.push_back({layer_name(i, "norm.ffn"), {d}});
        if (c.n_experts > 1) out.push_back({layer_name(i, "router"), {d, c.n_experts}});
        for (std::size_t e = 0; e < c.n_experts; ++e) {
            out.push_back({expert_name(i, e, "gate"), {d, I}});
            out.push_back({expert_name(i, e, "up"), {d, I}});
            out.push_back({expert_name(i, e, "down"), {I, d}});
        }
    }
    out.push_back({"final_norm", {d}});
    if (!c.tie_embeddings) out.push_back({"head", {c.vocab_size, d}});
    return out;
}

std::uint64_t param_count(const ModelConfig& c) {
    validate(c);
    const std::uint64_t d = c.embed_dim, I = c.intermediate_dim, V = c.vocab_size, M = c.n_experts;
    const std::uint64_t q_width = c.n_heads * c.head_dim();
    const std::uint64_t attention = d * q_width + 2 * d * c.kv_dim() + q_width * d;
    const std::uint64_t ffn = 3 * d * I;
    const std::uint64_t router = M > 1 ? d * M : 0;
    const std::uint64_t norms = 2 * d;
    const std::uint64_t per_layer = attention + M * ffn + router + norms;
    const std::uint64_t head = c.tie_embeddings ? 0 : V * d;
    return V * d + c.n_layers * per_layer + d + head;
}

Model build_model(const ModelConfig& config, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    TensorMap pool;
    for (const auto& spec : parameter_inventory(config)) {
        Tensor t(spec.shape);
        const bool is_norm = spec.name == "final_norm" || spec.name.find(".norm.") != std::string::npos;
        for (auto& v : t.data()) v = is_norm ? 1.0f : static_cast<float>(normal(rng));
        pool.emplace(spec.name, std::move(t));
    }
    return model_from_tensors(config, std::nullopt, pool);
}

Model model_from_tensors(const ModelConfig& config, const std::optional<SkipWiring>& wiring, const TensorMap& tensors) {
    validate(config);
    std::map<std::string, Tensor> pool;
    for (const auto& [name, t] : tensors) {
        const auto* f = std::get_if<Tensor>(&t);
        if (!f) throw ValidationError("model tensor '" + name + "' must be f32");
        pool.emplace(name, *f);
    }
    Model m;
    m.config = config;
    m.wiring = wiring;
    m.embed = take(pool, "embed.weight");
    for (std::size_t i = 0; i < config.n_layers; ++i) {
        BasicLayer<float> L;
        L.q = take(pool, layer_name(i, "attn.q"));
        L.k = take(pool, layer_name(i, "attn.k"));
        L.v = take(pool, layer_name(i, "attn.v"));
        L.o = take(pool, layer_name(i, "attn.o"));
        L.attn_norm = take(pool, layer_name(i, "norm.attn"));
        L.ffn_norm = take(pool, layer_name(i, "norm.ffn"));
        if (config.n_experts > 1) L.router = take(pool, layer_name(i, "router"));
        for (std::size_t e = 0; e < config.n_experts; ++e) {
            L.experts.push_back({take(pool, expert_name(i, e, "gate")), take(pool, expert_name(i, e, "up")),
                                 take(pool, expert_name(i, e, "down"))});
        }
        m.layers.push_back(std::move(L));
    }
    m.final_norm = take(pool, "final_norm");
    if (!config.tie_embeddings) m.head = take(pool, "head");
    const std::size_t n_alpha = alpha_count(wiring);
    for (std::size_t j = 0; j < n_alpha; ++j) m.alphas.push_back(take(pool, "alpha." + std::to_string(j)));
    if (!pool.empty()) throw ValidationError("unexpected tensor '" + pool.begin()->first + "' for this configuration");
    validate_model(m);
    return m;
}

template <class T>
void validate_model(const BasicModel<T>& m) {
    validate(m.config);
    if (m.layers.size() != m.config.n_layers) {
        throw ValidationError("model has " + std::to_string(m.layers.size()) + " layers, config says " +
                              std::to_string(m.config.n_layers));
    }
    if (m.config.tie_embeddings == m.head.has_value()) throw ValidationError("head presence disagrees with tie_embeddings");
    for (const auto& L : m.layers) {
        if (L.experts.size() != m.config.n_experts || L.router.has_value() != (m.config.n_experts > 1)) {
            throw ValidationError("layer expert layout disagrees with n_experts");
        }
    }
    const auto specs = parameter_inventory(m.config);
    std::size_t idx = 0;
    const auto& model = const_cast<BasicModel<T>&>(m);
    visit_parameters(const_cast<BasicModel<T>&>(model), [&](const std::string& name, BasicTensor<T>& t) {
        if (idx < specs.size()) {
            if (specs[idx].name != name || specs[idx].shape != t.shape()) {
                throw ValidationError("tensor '" + name + "' has shape " + shape_string(t.shape()) + ", expected " +
                                      specs[idx].name + " " + shape_string(specs[idx].shape));
            }
        } else if (t.shape() != Shape{1}) {
            throw ValidationError("skip scalar '" + name + "' must have shape [1]");
        }
        ++idx;
    });
    if (m.wiring) {
        validate_wiring(*m.wiring, m.layers.size(), m.alphas.size());
    } else if (!m.alphas.empty()) {
        throw ValidationError("model has skip scalars but no wiring");
    }
}

template <class T>
void for_each_parameter(BasicModel<T>& model, const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
    visit_parameters(model, fn);
}

template <class T>
void for_each_parameter(const BasicModel<T>& model,
                        const std::function<void(const std::string&, const BasicTensor<T>&)>& fn) {
    visit_parameters(const_cast<BasicModel<T>&>(model),
                     [&](const std::string& name, BasicTensor<T>& t) { fn(name, t); });
}

std::uint64_t count_parameters(const Model& model) {
    std::uint64_t n = 0;
    for_each_parameter<float>(model, [&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
}

template <class T>
ModelVars bind_parameters(Graph<T>& g, const BasicModel<T>& m, bool requires_grad) {
    ModelVars vars;
    auto bind = [&](const BasicTensor<T>& t) {
        Var v = g.leaf(t, requires_grad);
        vars.flat.push_back(v);
        return v;
    };
    vars.embed = bind(m.embed);
    for (const auto& L : m.layers) {
        ModelVars::Layer lv;
        lv.q = bind(L.q);
        lv.k = bind(L.k);
        lv.v = bind(L.v);
        lv.o = bind(L.o);
        lv.attn_norm = bind(L.attn_norm);
        lv.ffn_norm = bind(L.ffn_norm);
        if (L.router) lv.router = bind(*L.router);
        for (const auto& e : L.experts) {
            ModelVars::Ffn f;
            f.gate = bind(e.gate);
            f.up = bind(e.up);
            f.down = bind(e.down);
            lv.experts.push_back(f);
        }
        vars.layers.push_back(std::move(lv));
    }
    vars.final_norm = bind(m.final_norm);
    if (m.head) vars.head = bind(*m.head);
    for (const auto& a : m.alphas) vars.alphas.push_back(bind(a));
    return vars;
}

namespace {

template <class T>
Var dense_ffn(Graph<T>& g, const ModelVars::Ffn& f, Var h) {
    Var gate = ops::silu(g, ops::matmul(g, h, f.gate));
    Var up = ops::matmul(g, h, f.up);
    return ops::matmul(g, ops::mul(g, gate, up), f.down);
}

template <class T>
Var layer_forward(Graph<T>& g, const ModelConfig& c, const ModelVars::Layer& L, Var x, const AttentionShape& shape,
                  std::size_t layer_index, RouterTrace* trace) {
    Var h = ops::rms_norm(g, x, L.attn_norm, c.norm_eps);
    Var q = ops::rope(g, ops::matmul(g, h, L.q), shape.seq, c.n_heads, c.head_dim(), c.rope_theta);
    Var k = ops::rope(g, ops::matmul(g, h, L.k), shape.seq, c.n_kv_heads, c.head_dim(), c.rope_theta);
    Var v = ops::matmul(g, h, L.v);
    Var attn = ops::attention(g, q, k, v, shape);
    x = ops::add(g, x, ops::matmul(g, attn, L.o));

    Var h2 = ops::rms_norm(g, x, L.ffn_norm, c.norm_eps);
    Var ffn_out;
    if (!L.router) {
        ffn_out = dense_ffn(g, L.experts.front(), h2);
    } else {
        Var logits = ops::matmul(g, h2, *L.router);
        std::vector<std::size_t> picks;
        Var weights = ops::top_k_softmax(g, logits, c.top_k, &picks);
        std::vector<bool> used(L.experts.size(), false);
        for (std::size_t e : picks) used[e] = true;
        bool first = true;
        for (std::size_t e = 0; e < L.experts.size(); ++e) {
            // Experts no token selected contribute exact zeros; skip them.
            if (!used[e]) continue;
            Var term = ops::scale_by_column(g, dense_ffn(g, L.experts[e], h2), weights, e);
            ffn_out = first ? term : ops::add(g, ffn_out, term);
            first = false;
        }
        if (trace) {
            const auto& wv = g.value(weights);
            std::vector<double> w(picks.size());
            for (std::size_t i = 0; i < picks.size(); ++i) {
                const std::size_t row = i / c.top_k;
                w[i] = static_cast<double>(wv[row * wv.cols() + picks[i]]);
            }
            trace->layer_index.push_back(layer_index);
            trace->selected.push_back(std::move(picks));
            trace->weights.push_back(std::move(w));
        }
    }
    return ops::add(g, x, ffn_out);
}

}  // namespace

template <class T>
Var forward_graph(Graph<T>& g, const BasicModel<T>& m, const ModelVars& vars, const TokenBatch& batch, RouterTrace* trace) {
    const auto& c = m.config;
    if (batch.batch == 0 || batch.seq == 0 || batch.ids.size() != batch.batch * batch.seq) {
        throw DimensionError("token batch holds " + std::to_string(batch.ids.size()) + " ids for " +
                             std::to_string(batch.batch) + "x" + std::to_string(batch.seq));
    }
    if (batch.seq > c.ctx_len) {
        throw ContextError("sequence length " + std::to_string(batch.seq) + " exceeds ctx_len " + std::to_string(c.ctx_len));
    }
    AttentionShape shape{batch.batch, batch.seq, c.n_heads, c.n_kv_heads, c.head_dim(), c.sliding_window};
    Var x = ops::embedding(g, vars.embed, batch.ids);

    if (!m.wiring) {
        for (std::size_t i = 0; i < vars.layers.size(); ++i) x = layer_forward(g, c, vars.layers[i], x, shape, i, trace);
    } else {
        // latest[n] caches the output of the most recent instance of origin
        // block n; block 0 stands for the embedding output.
        std::map<std::size_t, Var> latest;
        latest[0] = x;
        const auto& w = *m.wiring;
        for (std::size_t p = 0; p < w.entries.size(); ++p) {
            const auto& e = w.entries[p];
            Var input = x;
            if (e.alpha_id) {
                const auto src = latest.find(e.origin_block - 1);
                if (src == latest.end()) throw ContractError("skip source block has not run yet");
                input = ops::add_scaled(g, x, src->second, vars.alphas.at(*e.alpha_id));
            }
            for (std::size_t l = p * w.block_size; l < (p + 1) * w.block_size; ++l) {
                input = layer_forward(g, c, vars.layers[l], input, shape, l, trace);
            }
            latest[e.origin_block] = input;
            x = input;
        }
    }
    Var h = ops::rms_norm(g, x, vars.final_norm, c.norm_eps);
    return ops::matmul_bt(g, h, vars.head ? *vars.head : vars.embed);
}

template <class T>
BasicTensor<T> forward(const BasicModel<T>& model, const TokenBatch& batch, RouterTrace* trace) {
    Graph<T> g;
    const auto vars = bind_parameters(g, model, false);
    const Var logits = forward_graph(g, model, vars, batch, trace);
    return g.value(logits).reshaped({batch.batch, batch.seq, model.config.vocab_size});
}

template <class T>
std::vector<BasicTensor<T>> collect_gradients(const Graph<T>& g, const ModelVars& vars) {
    std::vector<BasicTensor<T>> out;
    out.reserve(vars.flat.size());
    for (Var v : vars.flat) out.push_back(g.grad(v));
    return out;
}

std::filesystem::path config_path_for(const std::filesystem::path& path) {
    auto p = path;
    p += ".config.json";
    return p;
}

TensorList model_tensors(const Model& model) {
    TensorList out;
    for_each_parameter<float>(model, [&](const std::string& name, const Tensor& t) { out.push_back({name, t}); });
    return out;
}

std::string wiring_to_json(const SkipWiring& w) {
    json blocks = json::array();
    for (const auto& e : w.entries) {
        blocks.push_back({{"origin", e.origin_block},
                          {"dup", e.dup_index},
                          {"alpha", e.alpha_id ? json(*e.alpha_id) : json(nullptr)},
                          {"source", e.source ? json(*e.source) : json(nullptr)}});
    }
    return json{{"block_size", w.block_size}, {"blocks", blocks}}.dump();
}

SkipWiring wiring_from_json(const std::string& text) {
    try {
        const auto j = json::parse(text);
        SkipWiring w;
        w.block_size = j.at("block_size").get<std::size_t>();
        for (const auto& b : j.at("blocks")) {
            WiringEntry e;
            e.origin_block = b.at("origin").get<std::size_t>();
            e.dup_index = b.at("dup").get<std::size_t>();
            if (!b.at("alpha").is_null()) e.alpha_id = b.at("alpha").get<std::size_t>();
            if (!b.at("source").is_null()) e.source = b.at("source").get<std::size_t>();
            w.entries.push_back(e);
        }
        return w;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed skip wiring: ") + e.what());
    }
}

void save_model(const Model& model, const std::filesystem::path& path) {
    validate_model(model);
    auto doc = json::parse(config_to_json(model.config));
    if (model.wiring) doc["skip_wiring"] = json::parse(wiring_to_json(*model.wiring));
    save_container(model_tensors(model), path);
    write_text_atomic(config_path_for(path), doc.dump(2) + "\n");
}

Model load_model(const std::filesystem::path& path) {
    const std::string text = read_text_file(config_path_for(path));
    static const std::string wiring_key = "skip_wiring";
    const ModelConfig config = config_from_json(text, std::span<const std::string>(&wiring_key, 1));
    std::optional<SkipWiring> wiring;
    const auto doc = json::parse(text);
    if (doc.contains(wiring_key) && !doc[wiring_key].is_null()) wiring = wiring_from_json(doc[wiring_key].dump());
    return model_from_tensors(config, wiring, load_container(path));
}

#define UPSCALE_INSTANTIATE_MODEL(T)                                                                              \
    template void validate_model(const BasicModel<T>&);                                                           \
    template void for_each_parameter(BasicModel<T>&, const std::function<void(const std::string&, BasicTensor<T>&)>&); \
    template void for_each_parameter(const BasicModel<T>&,                                                        \
                                     const std::function<void(const std::string&, const BasicTensor<T>&)>&);     \
    template ModelVars bind_parameters(Graph<T>&, const BasicModel<T>&, bool);                                    \
    template Var forward_graph(Graph<T>&, const BasicModel<T>&, const ModelVars&, const TokenBatch&, RouterTrace*); \
    template BasicTensor<T> forward(const BasicModel<T>&, const TokenBatch&, RouterTrace*);                       \
    template std::vector<BasicTensor<T>> collect_gradients(const Graph<T>&, const ModelVars&);

UPSCALE_INSTANTIATE_MODEL(float)
UPSCALE_INSTANTIATE_MODEL(double)

#undef UPSCALE_INSTANTIATE_MODEL

}  // namespace upscale
