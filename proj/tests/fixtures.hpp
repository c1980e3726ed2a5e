#pragma once
// Generators and checks shared by the unit suites and the acceptance run.

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "support.hpp"
#include "upscale/checkpoint.hpp"
#include "upscale/graph.hpp"
#include "upscale/model.hpp"

namespace testing {

// Hand-built container image: magic, header length, header text, payload.
inline std::vector<std::uint8_t> container_image(const std::string& header, std::size_t payload_bytes,
                                                 const char* magic = upscale::kContainerMagic,
                                                 std::optional<std::uint64_t> declared = std::nullopt) {
    std::vector<std::uint8_t> out(magic, magic + 8);
    const std::uint64_t h = declared.value_or(header.size());
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(h >> (8 * i)));
    out.insert(out.end(), header.begin(), header.end());
    out.resize(out.size() + payload_bytes, 0);
    return out;
}

/// One malformed image per FormatCode, paired with the code it must raise.
inline std::vector<std::pair<std::vector<std::uint8_t>, upscale::FormatCode>> malformed_images() {
    using upscale::FormatCode;
    const std::string good = R"({"a":{"dtype":"f32","nbytes":8,"offset":0,"shape":[2]}})";
    return {
        {container_image(good, 8, "NOTMAGIC"), FormatCode::BadMagic},
        {container_image(good, 8, upscale::kContainerMagic, 1u << 30), FormatCode::BadHeaderLength},
        {container_image("{not json", 0), FormatCode::BadJson},
        {container_image(R"({"a":{"dtype":"i8","nbytes":2,"offset":0,"shape":[2]}})", 2), FormatCode::BadEntry},
        {container_image(R"({"a":{"dtype":"f32","nbytes":12,"offset":0,"shape":[2]}})", 12), FormatCode::SizeMismatch},
        {container_image(
             R"({"a":{"dtype":"f32","nbytes":8,"offset":0,"shape":[2]},"b":{"dtype":"f32","nbytes":8,"offset":4,"shape":[2]}})",
             12),
         FormatCode::Overlap},
        {container_image(R"({"a":{"dtype":"f32","nbytes":8,"offset":4,"shape":[2]}})", 12), FormatCode::Gap},
        {container_image(good, 5), FormatCode::Truncated},
        {container_image(good, 9), FormatCode::TrailingBytes},
    };
}

/// The FormatCode a decode raises, or nullopt if it accepted the bytes.
inline std::optional<upscale::FormatCode> decode_error(const std::vector<std::uint8_t>& bytes) {
    try {
        upscale::decode_container(bytes);
    } catch (const upscale::FormatError& e) {
        return e.code();
    }
    return std::nullopt;
}

inline upscale::TensorList random_fixture(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> count(0, 6), rank(1, 3), extent(1, 5), kind(0, 1);
    upscale::TensorList list;
    const int n = count(rng);
    for (int i = 0; i < n; ++i) {
        upscale::Shape s;
        for (int r = rank(rng); r > 0; --r) s.push_back(static_cast<std::size_t>(extent(rng)));
        const std::string name = "t" + std::to_string(i) + (kind(rng) ? ".weight" : "");
        if (kind(rng)) {
            list.push_back({name, random_tensor(s, rng, 10.0)});
        } else {
            list.push_back({name, random_tensor64(s, rng, 10.0)});
        }
    }
    return list;
}

inline bool same_tensor(const upscale::AnyTensor& a, const upscale::AnyTensor& b) {
    if (a.index() != b.index()) return false;
    if (const auto* f = std::get_if<upscale::Tensor>(&a)) return upscale::bit_equal(*f, std::get<upscale::Tensor>(b));
    return upscale::bit_equal(std::get<upscale::Tensor64>(a), std::get<upscale::Tensor64>(b));
}

inline upscale::ModelConfig random_config(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> small(1, 8);
    upscale::ModelConfig c;
    c.n_kv_heads = small(rng);
    c.n_heads = c.n_kv_heads * small(rng);
    c.embed_dim = c.n_heads * 2 * small(rng);
    c.intermediate_dim = small(rng) * 7;
    c.vocab_size = small(rng) * 100 + 3;
    c.n_layers = small(rng);
    c.n_experts = small(rng);
    c.top_k = std::uniform_int_distribution<std::size_t>(1, c.n_experts)(rng);
    c.rope_theta = std::uniform_real_distribution<double>(1.0, 1e7)(rng);
    if (small(rng) % 2) c.sliding_window = small(rng) * 13;
    c.ctx_len = small(rng) * 64;
    c.tie_embeddings = small(rng) % 2 == 0;
    c.norm_eps = std::uniform_real_distribution<double>(1e-9, 1e-3)(rng);
    return c;
}

struct GradCheck {
    std::size_t checked = 0;
    std::size_t failed = 0;
    double worst = 0.0;  // largest |a − n| / max(|a|, |n|, floor)
    std::string worst_tensor;
    std::vector<std::string> tensors;
};

/// Central differences on every element of every trainable tensor against
/// the tape's gradient of the mean next-token loss.
inline GradCheck model_gradient_check(upscale::Model64 model, const upscale::TokenBatch& batch,
                                      const std::vector<std::int32_t>& targets, double tol = 1e-3,
                                      double h = 1e-5, double floor = 1e-6) {
    using namespace upscale;
    auto loss_of = [&](const Model64& m) {
        Graph<double> g;
        const ModelVars vars = bind_parameters(g, m, false);
        return g.value(ops::cross_entropy(g, forward_graph(g, m, vars, batch), targets))[0];
    };
    Graph<double> g;
    const ModelVars vars = bind_parameters(g, model, true);
    const Var loss = ops::cross_entropy(g, forward_graph(g, model, vars, batch), targets);
    g.backward(loss);
    const auto grads = collect_gradients(g, vars);

    GradCheck out;
    std::vector<std::pair<std::string, Tensor64*>> params;
    for_each_parameter<double>(model, [&](const std::string& name, Tensor64& t) { params.emplace_back(name, &t); });
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& [name, t] = params[k];
        out.tensors.push_back(name);
        for (std::size_t i = 0; i < t->size(); ++i) {
            const double saved = (*t)[i];
            (*t)[i] = saved + h;
            const double up = loss_of(model);
            (*t)[i] = saved - h;
            const double down = loss_of(model);
            (*t)[i] = saved;
            const double numeric = (up - down) / (2 * h);
            const double a = grads[k][i];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            ++out.checked;
            if (err > tol) ++out.failed;
            if (err > out.worst) {
                out.worst = err;
                out.worst_tensor = name;
            }
        }
    }
    return out;
}

}  // namespace testing
