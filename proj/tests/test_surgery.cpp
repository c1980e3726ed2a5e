#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <array>
#include <random>

#include "oracle.hpp"
#include "support.hpp"
#include "upscale/error.hpp"
#include "upscale/kernels.hpp"
#include "upscale/surgery.hpp"

using namespace upscale;
using testing::rel_err;

namespace {

const std::vector<std::size_t> kJaiUsage{1, 1, 1, 2, 3, 3, 2, 1, 1, 1};

bool same_tensors(const Model& a, const Model& b) {
    const auto ta = model_tensors(a), tb = model_tensors(b);
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (ta[i].name != tb[i].name) return false;
        if (!bit_equal(std::get<Tensor>(ta[i].tensor), std::get<Tensor>(tb[i].tensor))) return false;
    }
    return true;
}

bool same_layer(const BasicLayer<float>& a, const BasicLayer<float>& b) {
    return bit_equal(a.q, b.q) && bit_equal(a.k, b.k) && bit_equal(a.v, b.v) && bit_equal(a.o, b.o) &&
           bit_equal(a.experts[0].gate, b.experts[0].gate) && bit_equal(a.experts[0].down, b.experts[0].down);
}

// Built layers are told apart by their random weights.
std::size_t source_index(const Model& src, const BasicLayer<float>& L) {
    for (std::size_t i = 0; i < src.layers.size(); ++i) {
        if (same_layer(src.layers[i], L)) return i + 1;
    }
    return 0;
}

FfnSnapshot random_snapshot(const Model& m, std::uint64_t step, std::uint64_t seed) {
    return snapshot_ffn(build_model(m.config, seed), step);
}

}  // namespace

TEST_CASE("block plans") {
    SUBCASE("the 40-layer plan reaches 64 layers") {
        const BlockPlan p = make_plan(40, 4, kJaiUsage);
        CHECK(p.depth() == 64);
        CHECK(p.layout.size() == 16);
        std::vector<std::size_t> per_block(11, 0);
        for (const auto& [n, d] : p.layout) per_block[n] = std::max(per_block[n], d);
        for (std::size_t n = 1; n <= 10; ++n) CHECK(per_block[n] == kJaiUsage[n - 1]);
        std::size_t dup = 0;
        for (const auto& [n, d] : p.layout) dup += d >= 2;
        CHECK(p.duplicate_count() == dup);
        CHECK(dup == 6);
    }
    SUBCASE("all ones is the identity layout") {
        const BlockPlan p = make_plan(12, 3, {1, 1, 1, 1});
        CHECK(p.depth() == 12);
        for (std::size_t i = 0; i < 4; ++i) CHECK(p.layout[i] == std::pair<std::size_t, std::size_t>{i + 1, 1});
    }
    SUBCASE("hand layout") {
        const BlockPlan p = make_plan(8, 4, {2, 1});
        using L = std::vector<std::pair<std::size_t, std::size_t>>;
        CHECK(p.layout == L{{1, 1}, {1, 2}, {2, 1}});
        CHECK(p.depth() == 12);
    }
    SUBCASE("rejections") {
        CHECK_THROWS_AS(make_plan(10, 4, {1, 1}), ValidationError);
        CHECK_THROWS_AS(make_plan(8, 4, {1}), ValidationError);
        CHECK_THROWS_AS(make_plan(8, 4, {1, 0}), ValidationError);
        CHECK_THROWS_AS(make_plan(8, 0, {}), ValidationError);
    }
    SUBCASE("depth formula over random plans") {
        std::mt19937_64 rng(3);
        std::uniform_int_distribution<std::size_t> pick(1, 5);
        for (int i = 0; i < 300; ++i) {
            const std::size_t b = pick(rng), blocks = pick(rng);
            std::vector<std::size_t> usage(blocks);
            std::size_t expect = 0;
            for (auto& u : usage) expect += b * (u = pick(rng));
            const BlockPlan p = make_plan(b * blocks, b, usage);
            CHECK(p.depth() == expect);
            for (std::size_t k = 1; k < p.layout.size(); ++k) CHECK(p.layout[k - 1] < p.layout[k]);
        }
    }
    SUBCASE("json") {
        const BlockPlan p = make_plan(40, 4, kJaiUsage);
        const BlockPlan back = plan_from_json(plan_to_json(p), 40);
        CHECK(back.layout == p.layout);
        CHECK_THROWS_AS(plan_from_json(plan_to_json(p), 36), ValidationError);
        CHECK_THROWS_AS(plan_from_json("{\"block_size\": 4}", 40), ValidationError);
    }
}

TEST_CASE("dus_v1 layer order") {
    ModelConfig c = testing::small_config(4);
    const Model src = build_model(c, 21);
    const Model out = dus_v1(src, 3);
    REQUIRE(out.layers.size() == 6);
    std::vector<std::size_t> order;
    for (const auto& L : out.layers) order.push_back(source_index(src, L));
    CHECK(order == std::vector<std::size_t>{1, 2, 3, 2, 3, 4});
    CHECK(out.config.n_layers == 6);
    CHECK_FALSE(out.wiring.has_value());
    CHECK_THROWS_AS(dus_v1(src, 0), ParameterError);
    CHECK_THROWS_AS(dus_v1(src, 5), ParameterError);

    const Model full = dus_v1(src, 4);
    REQUIRE(full.layers.size() == 8);
    for (std::size_t i = 0; i < 8; ++i) CHECK(source_index(src, full.layers[i]) == i % 4 + 1);

    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + rng() % 6, k = 1 + rng() % n;
        const Model s = build_model(testing::small_config(n, 16, 8), trial);
        const Model d = dus_v1(s, k);
        std::vector<std::size_t> want;
        for (std::size_t i = 1; i <= k; ++i) want.push_back(i);
        for (std::size_t i = n - k + 1; i <= n; ++i) want.push_back(i);
        std::vector<std::size_t> got;
        for (const auto& L : d.layers) got.push_back(source_index(s, L));
        CHECK(got == want);
    }
}

TEST_CASE("dus_v1 at production depth") {
    ModelConfig c = testing::small_config(40, 16, 8);
    const Model out = dus_v1(build_model(c, 1), 32);
    CHECK(out.layers.size() == 64);
}

TEST_CASE("dus_v2 identity and table plan") {
    const ModelConfig c = testing::small_config(4);
    const Model src = build_model(c, 17);
    const Model same = dus_v2(src, make_plan(4, 2, {1, 1}));
    CHECK(same_tensors(same, src));
    CHECK(same.config == src.config);
    CHECK_FALSE(same.wiring.has_value());
    std::mt19937_64 rng(17);
    const auto batch = testing::random_batch(2, 6, c.vocab_size, rng);
    CHECK(bit_equal(forward(same, batch), forward(src, batch)));

    const Model deep_src = build_model(testing::small_config(40, 16, 8), 2);
    SurgeryReport report;
    const Model deep = dus_v2(deep_src, make_plan(40, 4, kJaiUsage), 1.0, &report);
    CHECK(deep.layers.size() == 64);
    CHECK(deep.alphas.size() == 6);
    CHECK(report.alpha_count == 6);
    CHECK(report.depth_after == 64);
    CHECK(report.param_delta() == static_cast<std::int64_t>(count_parameters(deep) - count_parameters(deep_src)));
    CHECK_FALSE(report.first_block_duplicated);
    for (const auto& e : deep.wiring->entries) {
        CHECK(e.alpha_id.has_value() == (e.dup_index >= 2));
        if (e.alpha_id) CHECK(deep.alphas[*e.alpha_id][0] == 1.0f);
    }
    // Layout positions: 3,4 are block 4; 5,6,7 block 5; 8,9,10 block 6.
    const auto& w = deep.wiring->entries;
    CHECK(w[4].source == std::optional<std::size_t>(2));
    CHECK(w[5].origin_block == 5);
    CHECK_FALSE(w[5].source.has_value());
    CHECK(w[6].source == std::optional<std::size_t>(4));
    CHECK(w[7].source == std::optional<std::size_t>(4));
    CHECK(w[9].source == std::optional<std::size_t>(7));
    CHECK(w[12].source == std::optional<std::size_t>(10));

    CHECK_THROWS_AS(dus_v2(src, make_plan(8, 4, {1, 1})), ContractError);
    CHECK_THROWS_AS(dus_v2(dus_v2(src, make_plan(4, 2, {1, 2})), make_plan(6, 2, {1, 1, 1})), ContractError);
}

TEST_CASE("dus_v2 forward matches the unrolled oracle") {
    std::mt19937_64 rng(44);
    for (int trial = 0; trial < 8; ++trial) {
        const std::size_t blocks = 2 + trial % 3;
        std::vector<std::size_t> usage(blocks);
        for (auto& u : usage) u = 1 + rng() % 3;
        usage[1] = std::max<std::size_t>(usage[1], 2);
        const Model src = build_model(testing::small_config(blocks, 24, 16), trial);
        const double alpha = std::array{0.0, 0.5, 1.0}[trial % 3];
        const Model d = dus_v2(src, make_plan(blocks, 1, usage), alpha);
        const Model64 m = testing::lifted(d, 25.0, trial);
        const auto batch = testing::random_batch(2, 5, 24, rng);
        CHECK(rel_err(forward(m, batch).data(), oracle::batch_logits(m, batch)) <= 1e-6);
    }
}

TEST_CASE("duplicating block 1 uses the embedding output") {
    const Model src = build_model(testing::small_config(2), 5);
    SurgeryReport report;
    const Model d = dus_v2(src, make_plan(2, 1, {2, 1}), 0.5, &report);
    CHECK(report.first_block_duplicated);
    CHECK_FALSE(report.notes.empty());
    CHECK(d.wiring->entries[1].alpha_id.has_value());
    CHECK_FALSE(d.wiring->entries[1].source.has_value());
    const Model64 m = testing::lifted(d);
    std::mt19937_64 rng(5);
    const auto batch = testing::random_batch(1, 6, 32, rng);
    CHECK(rel_err(forward(m, batch).data(), oracle::batch_logits(m, batch)) <= 1e-6);
    CHECK(report.to_json().find("\"first_block_duplicated\": true") != std::string::npos);
}

TEST_CASE("embedding rows from decompositions") {
    std::mt19937_64 rng(1);
    const Tensor base = testing::random_tensor({6, 4}, rng);
    const Tensor out = extend_embedding_rows(base, {{2}, {1, 4}, {0, 3, 5}, {}}, 7);
    REQUIRE(out.shape() == Shape{10, 4});
    for (std::size_t i = 0; i < base.size(); ++i) CHECK(out[i] == base[i]);
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(out[6 * 4 + c] == base[2 * 4 + c]);
        CHECK(std::abs(out[7 * 4 + c] - (base[4 + c] + base[16 + c]) / 2.0) <= 1e-7);
        const double three = (static_cast<double>(base[c]) + base[12 + c] + base[20 + c]) / 3.0;
        CHECK(std::abs(out[8 * 4 + c] - three) <= 1e-7);
        CHECK(std::isfinite(out[9 * 4 + c]));
    }
    CHECK_THROWS_AS(extend_embedding_rows(base, {{6}}, 0), IdError);
}

TEST_CASE("fallback rows follow the base column statistics") {
    Tensor base({400, 2});
    std::mt19937_64 rng(2);
    std::normal_distribution<double> a(3.0, 0.5), b(-1.0, 2.0);
    for (std::size_t r = 0; r < 400; ++r) {
        base[r * 2] = static_cast<float>(a(rng));
        base[r * 2 + 1] = static_cast<float>(b(rng));
    }
    const Tensor out = extend_embedding_rows(base, std::vector<std::vector<TokenId>>(2000), 3);
    auto col_mean = [&](std::size_t from, std::size_t to, std::size_t c) {
        double s = 0;
        for (std::size_t r = from; r < to; ++r) s += out[r * 2 + c];
        return s / static_cast<double>(to - from);
    };
    CHECK(std::abs(col_mean(400, 2400, 0) - col_mean(0, 400, 0)) < 0.05);
    CHECK(std::abs(col_mean(400, 2400, 1) - col_mean(0, 400, 1)) < 0.2);
}

TEST_CASE("merge_token_embeddings") {
    const std::vector<std::string> english{"the cat sat on the mat", "the dog ate the bone"};
    const Tokenizer base = train_bpe(english, 12);
    const Tokenizer ext = extend_vocab(base, read_corpus("tests/data/thai_sample.txt"), base.vocab_size() + 25);
    ModelConfig c = testing::small_config(1, base.vocab_size(), 16);
    const Model m = build_model(c, 3);
    SurgeryReport report;
    const Model merged = merge_token_embeddings(m, base, ext, 11, &report);
    CHECK(merged.config.vocab_size == ext.vocab_size());
    CHECK(report.operation == "embed-merge");
    for (std::size_t i = 0; i < m.embed.size(); ++i) REQUIRE(merged.embed[i] == m.embed[i]);
    for (std::size_t id = base.vocab_size(); id < ext.vocab_size(); ++id) {
        const auto parts = decompose(static_cast<TokenId>(id), ext);
        REQUIRE_FALSE(parts.empty());
        for (const Tensor* table : {&m.embed, &*m.head}) {
            const Tensor& grown = table == &m.embed ? merged.embed : *merged.head;
            for (std::size_t col = 0; col < c.embed_dim; ++col) {
                double s = 0;
                for (TokenId p : parts) s += (*table)[static_cast<std::size_t>(p) * c.embed_dim + col];
                CHECK(std::abs(grown[id * c.embed_dim + col] - s / static_cast<double>(parts.size())) <= 1e-7);
            }
        }
    }
    // No new tokens: bit-for-bit the same model.
    Tokenizer none = base;
    none.set_base_size(base.vocab_size());
    CHECK(same_tensors(merge_token_embeddings(m, base, none, 11), m));

    const Model wrong = build_model(testing::small_config(1, base.vocab_size() + 1, 16), 3);
    CHECK_THROWS_AS(merge_token_embeddings(wrong, base, ext, 11), ContractError);
    CHECK_THROWS_AS(merge_token_embeddings(m, base, base, 11), ContractError);
}

TEST_CASE("expand_moe") {
    const ModelConfig c = testing::small_config(2);
    const Model dense = build_model(c, 30);
    std::vector<FfnSnapshot> snaps{random_snapshot(dense, 300, 3), random_snapshot(dense, 100, 1),
                                   random_snapshot(dense, 200, 2)};
    SurgeryReport report;
    const Model moe = expand_moe(dense, snaps, 4, 2, 7, &report);
    CHECK(moe.config.n_experts == 4);
    CHECK(moe.config.top_k == 2);
    for (std::size_t l = 0; l < 2; ++l) {
        const auto& L = moe.layers[l];
        REQUIRE(L.experts.size() == 4);
        CHECK(bit_equal(L.experts[0].gate, dense.layers[l].experts[0].gate));
        CHECK(bit_equal(L.experts[1].up, snaps[1].layers[l].up));
        CHECK(bit_equal(L.experts[2].up, snaps[2].layers[l].up));
        CHECK(bit_equal(L.experts[3].down, snaps[0].layers[l].down));
        REQUIRE(L.router.has_value());
        CHECK(L.router->shape() == Shape{c.embed_dim, 4});
    }
    CHECK(report.notes.size() == 3);

    SUBCASE("router draws are small Gaussians") {
        double ss = 0.0;
        for (float v : moe.layers[0].router->data()) ss += v * v;
        const double sd = std::sqrt(ss / static_cast<double>(moe.layers[0].router->size()));
        CHECK(sd > 0.01);
        CHECK(sd < 0.03);
    }
    SUBCASE("per-token output equals the brute-force oracle") {
        std::mt19937_64 rng(30);
        const Model64 m = testing::lifted(moe, 25.0, 30);
        for (int t = 0; t < 5; ++t) {
            const auto one = testing::random_batch(1, 1 + t, c.vocab_size, rng);
            CHECK(rel_err(forward(m, one).data(), oracle::batch_logits(m, one)) <= 1e-6);
        }
    }
    SUBCASE("one expert changes only metadata") {
        const Model same = expand_moe(dense, {}, 1, 1, 7);
        CHECK(same_tensors(same, dense));
        CHECK(same.config == dense.config);
    }
    SUBCASE("errors") {
        try {
            expand_moe(dense, {snaps[0], snaps[1]}, 4, 2, 7);
            FAIL("accepted two snapshots");
        } catch (const ParameterError& e) {
            CHECK(std::string(e.what()).find("need experts−1 = 3 snapshots") != std::string::npos);
        }
        CHECK_THROWS_AS(expand_moe(dense, snaps, 4, 5, 7), ParameterError);
        CHECK_THROWS_AS(expand_moe(dense, snaps, 4, 0, 7), ParameterError);
        auto bad = snaps;
        bad[1].layers[0].gate = Tensor({3, 3});
        CHECK_THROWS_AS(expand_moe(dense, bad, 4, 2, 7), ContractError);
        auto short_snap = snaps;
        short_snap[2].layers.pop_back();
        CHECK_THROWS_AS(expand_moe(dense, short_snap, 4, 2, 7), ContractError);
        CHECK_THROWS_AS(expand_moe(moe, snaps, 4, 2, 7), ContractError);
        CHECK_THROWS_AS(snapshot_ffn(moe, 1), ContractError);
    }
}

TEST_CASE("snapshots round trip through disk") {
    const Model dense = build_model(testing::small_config(3), 4);
    const FfnSnapshot s = snapshot_ffn(dense, 123456);
    testing::TempDir dir("snap");
    save_snapshot(s, dir / "s.upsk");
    const FfnSnapshot back = load_snapshot(dir / "s.upsk");
    CHECK(back.step == 123456);
    REQUIRE(back.layers.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(bit_equal(back.layers[i].gate, s.layers[i].gate));
        CHECK(bit_equal(back.layers[i].up, s.layers[i].up));
        CHECK(bit_equal(back.layers[i].down, s.layers[i].down));
    }
    save_model(dense, dir / "m.upsk");
    CHECK_THROWS_AS(load_snapshot(dir / "m.upsk"), ContractError);
}

TEST_CASE("retheta_and_unwindow") {
    const ModelConfig phi = phi3_medium_config();
    const ModelConfig out = retheta_and_unwindow(phi, 1e6);
    CHECK(out.rope_theta == jai1_config().rope_theta);
    CHECK(out.sliding_window == jai1_config().sliding_window);
    ModelConfig rest = out;
    rest.rope_theta = phi.rope_theta;
    rest.sliding_window = phi.sliding_window;
    CHECK(rest == phi);
    CHECK(retheta_and_unwindow(out, 1e6) == out);
    ModelConfig nowin = tiny_config();
    nowin.sliding_window.reset();
    ModelConfig only_theta = nowin;
    only_theta.rope_theta = 5e5;
    CHECK(retheta_and_unwindow(nowin, 5e5) == only_theta);
    CHECK_THROWS_AS(retheta_and_unwindow(phi, 0.0), ParameterError);
    CHECK_THROWS_AS(retheta_and_unwindow(phi, -1.0), ParameterError);
}

TEST_CASE("router load accounting") {
    const ModelConfig c = testing::small_config(2);
    const Model dense = build_model(c, 50);
    const Model moe = expand_moe(dense, {random_snapshot(dense, 1, 1), random_snapshot(dense, 2, 2),
                                         random_snapshot(dense, 3, 3)},
                                 4, 2, 51);
    std::mt19937_64 rng(50);
    const auto batch = testing::random_batch(8, 32, c.vocab_size, rng);

    SUBCASE("fractions sum to top_k") {
        const RouterLoad load = router_load(moe, batch);
        REQUIRE(load.fractions.size() == 2);
        for (const auto& f : load.fractions) {
            double s = 0.0;
            for (double v : f) s += v;
            CHECK(s == 2.0);
        }
    }
    SUBCASE("recount agrees with a per-token oracle") {
        const RouterLoad load = router_load(moe, batch);
        RouterTrace trace;
        forward(moe, batch, &trace);
        // Brute force from layer inputs is covered by the oracle tests; here
        // the counts are recomputed from selections token by token.
        for (std::size_t l = 0; l < 2; ++l) {
            std::vector<double> counts(4, 0.0);
            for (std::size_t t = 0; t < load.tokens; ++t) {
                for (std::size_t j = 0; j < 2; ++j) counts[trace.selected[l][t * 2 + j]] += 1.0;
            }
            for (std::size_t e = 0; e < 4; ++e) CHECK(load.fractions[l][e] == counts[e] / load.tokens);
        }
    }
    SUBCASE("identical router columns tie to experts 0 and 1") {
        Model tied = moe;
        for (auto& L : tied.layers) {
            auto& r = *L.router;
            for (std::size_t i = 0; i < c.embed_dim; ++i) {
                for (std::size_t e = 1; e < 4; ++e) r[i * 4 + e] = r[i * 4];
            }
        }
        const RouterLoad load = router_load(tied, batch);
        for (const auto& f : load.fractions) CHECK(f == std::vector<double>{1.0, 1.0, 0.0, 0.0});
    }
    CHECK_THROWS_AS(router_load(dense, batch), ContractError);
}
