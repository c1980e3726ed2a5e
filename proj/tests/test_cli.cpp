#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sstream>

#include "support.hpp"
#include "upscale/bpe.hpp"
#include "upscale/checkpoint.hpp"
#include "upscale/cli.hpp"
#include "upscale/surgery.hpp"

using namespace upscale;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

bool same_files(const std::filesystem::path& a, const std::filesystem::path& b) {
    return read_file_bytes(a) == read_file_bytes(b);
}

}  // namespace

TEST_CASE("plan prints the resulting depth") {
    const auto r = cli({"plan", "--layers", "40", "--block-size", "4", "--usage", "1,1,1,2,3,3,2,1,1,1"});
    CHECK(r.code == 0);
    CHECK(contains(r.out, "depth: 64"));
    CHECK(contains(r.out, "alphas: 6"));
    CHECK(contains(r.out, "layers  33-36"));
    const auto bad = cli({"plan", "--layers", "10", "--block-size", "4", "--usage", "1,1"});
    CHECK(bad.code == 2);
}

TEST_CASE("tpc on a byte tokenizer and ascii corpus") {
    testing::TempDir dir("cli");
    Tokenizer::byte_level().save(dir / "t.json");
    write_text_atomic(dir / "c.txt", "hello world\nplain ascii text\n");
    const auto r = cli({"tpc", "--tokenizer", (dir / "t.json").string(), "--corpus", (dir / "c.txt").string()});
    CHECK(r.code == 0);
    CHECK(contains(r.out, "tpc: 1.0000"));
}

TEST_CASE("moe-expand with too few snapshots") {
    testing::TempDir dir("cli");
    const auto r = cli({"moe-expand", "--model", (dir / "m.upsk").string(), "--snapshots",
                        (dir / "s1.upsk").string() + "," + (dir / "s2.upsk").string(), "--experts", "4", "--top-k", "2",
                        "--out", (dir / "o.upsk").string()});
    CHECK(r.code == 2);
    CHECK(contains(r.err, "need experts−1 = 3 snapshots"));
}

TEST_CASE("usage errors suggest the closest name") {
    const auto sub = cli({"plna", "--layers", "4"});
    CHECK(sub.code == 1);
    CHECK(contains(sub.err, "did you mean 'plan'"));
    const auto flag = cli({"plan", "--layer", "40", "--block-size", "4", "--usage", "1"});
    CHECK(flag.code == 1);
    CHECK(contains(flag.err, "did you mean '--layers'"));
    CHECK(cli({}).code == 1);
    CHECK(cli({"plan"}).code == 1);
    CHECK(cli({"plan", "--layers", "forty", "--block-size", "4", "--usage", "1"}).code == 1);
}

TEST_CASE("help on every subcommand") {
    for (const char* sub : {"init", "tokenizer-train", "tokenizer-extend", "tpc", "embed-merge", "plan", "dus",
                            "moe-expand", "retheta", "train", "param-count", "inspect", "router-load"}) {
        const auto r = cli({sub, "--help"});
        CHECK(r.code == 0);
        CHECK(contains(r.out, sub));
    }
    CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("param-count presets") {
    const auto r = cli({"param-count", "--preset", "jai1"});
    CHECK(r.code == 0);
    CHECK(contains(r.out, "params: " + std::to_string(param_count(jai1_config()))));
    CHECK(contains(cli({"param-count", "--preset", "phi3-medium"}).out, "(13.96B)"));
    CHECK(cli({"param-count", "--preset", "nope"}).code == 2);
}

TEST_CASE("missing files are runtime errors") {
    CHECK(cli({"inspect", "/nonexistent/x.upsk"}).code == 3);
}

TEST_CASE("subcommands match the library") {
    testing::TempDir dir("cli");
    const auto p = [&](const char* name) { return (dir / name).string(); };
    write_text_atomic(dir / "en.txt", "the cat sat on the mat\nthe dog ate the bone\n");
    write_text_atomic(dir / "th.txt", read_text_file("tests/data/thai_sample.txt"));

    REQUIRE(cli({"tokenizer-train", "--corpus", p("en.txt"), "--merges", "20", "--out", p("base.json")}).code == 0);
    const Tokenizer base = train_bpe(read_corpus(dir / "en.txt"), 20);
    CHECK(Tokenizer::load(dir / "base.json") == base);

    const std::string target = std::to_string(base.vocab_size() + 30);
    REQUIRE(cli({"tokenizer-extend", "--tokenizer", p("base.json"), "--corpus", p("th.txt"), "--target", target, "--out",
                 p("ext.json")})
                .code == 0);
    const Tokenizer ext = extend_vocab(base, read_corpus(dir / "th.txt"), base.vocab_size() + 30);
    CHECK(Tokenizer::load(dir / "ext.json") == ext);

    const std::string vocab = std::to_string(base.vocab_size());
    REQUIRE(cli({"init", "--vocab", vocab, "--layers", "4", "--dim", "16", "--ffn", "32", "--heads", "4", "--kv-heads",
                 "2", "--out", p("m.upsk"), "--seed", "3"})
                .code == 0);
    const Model m = load_model(dir / "m.upsk");
    CHECK(m.layers.size() == 4);

    REQUIRE(cli({"embed-merge", "--model", p("m.upsk"), "--base", p("base.json"), "--extended", p("ext.json"), "--out",
                 p("merged.upsk"), "--seed", "5"})
                .code == 0);
    save_model(merge_token_embeddings(m, base, ext, 5), dir / "merged_lib.upsk");
    CHECK(same_files(dir / "merged.upsk", dir / "merged_lib.upsk"));
    CHECK(std::filesystem::exists(dir / "merged.upsk.report.json"));

    const auto dus = cli({"dus", "--v2", "--model", p("merged.upsk"), "--block-size", "2", "--usage", "1,2", "--alpha",
                          "0.5", "--out", p("dus.upsk")});
    REQUIRE(dus.code == 0);
    const Model merged = load_model(dir / "merged.upsk");
    save_model(dus_v2(merged, make_plan(4, 2, {1, 2}), 0.5), dir / "dus_lib.upsk");
    CHECK(same_files(dir / "dus.upsk", dir / "dus_lib.upsk"));
    CHECK(same_files(dir / "dus.upsk.config.json", dir / "dus_lib.upsk.config.json"));

    REQUIRE(cli({"plan", "--layers", "4", "--block-size", "2", "--usage", "1,2", "--out", p("plan.json")}).code == 0);
    REQUIRE(cli({"dus", "--v2", "--model", p("merged.upsk"), "--plan", p("plan.json"), "--alpha", "0.5", "--out",
                 p("dus_plan.upsk")})
                .code == 0);
    CHECK(same_files(dir / "dus.upsk", dir / "dus_plan.upsk"));

    REQUIRE(cli({"dus", "--v1", "--k", "3", "--model", p("merged.upsk"), "--out", p("v1.upsk")}).code == 0);
    save_model(dus_v1(merged, 3), dir / "v1_lib.upsk");
    CHECK(same_files(dir / "v1.upsk", dir / "v1_lib.upsk"));
    CHECK(cli({"dus", "--v1", "--k", "9", "--model", p("merged.upsk"), "--out", p("bad.upsk")}).code == 2);
    CHECK(cli({"dus", "--v2", "--model", p("dus.upsk"), "--block-size", "2", "--usage", "1,1,1", "--out", p("bad.upsk")})
              .code == 2);

    std::vector<std::string> snaps;
    for (int s = 1; s <= 3; ++s) {
        const auto path = dir / ("s" + std::to_string(s) + ".upsk");
        save_snapshot(snapshot_ffn(build_model(merged.config, 40 + s), 100u * s), path);
        snaps.push_back(path.string());
    }
    REQUIRE(cli({"moe-expand", "--model", p("merged.upsk"), "--snapshots", snaps[2] + "," + snaps[0] + "," + snaps[1],
                 "--experts", "4", "--top-k", "2", "--seed", "9", "--out", p("moe.upsk")})
                .code == 0);
    std::vector<FfnSnapshot> loaded;
    for (const auto& s : snaps) loaded.push_back(load_snapshot(s));
    save_model(expand_moe(merged, loaded, 4, 2, 9), dir / "moe_lib.upsk");
    CHECK(same_files(dir / "moe.upsk", dir / "moe_lib.upsk"));

    const auto load = cli({"router-load", "--model", p("moe.upsk"), "--tokens", "256", "--seed", "2"});
    CHECK(load.code == 0);
    CHECK(cli({"router-load", "--model", p("merged.upsk"), "--tokens", "64"}).code == 2);

    REQUIRE(cli({"retheta", "--model", p("merged.upsk"), "--theta", "1000000", "--out", p("rt.upsk")}).code == 0);
    const Model rt = load_model(dir / "rt.upsk");
    CHECK(rt.config == retheta_and_unwindow(merged.config, 1e6));

    const auto inspect = cli({"inspect", p("dus.upsk")});
    CHECK(inspect.code == 0);
    CHECK(contains(inspect.out, "wiring: (1,1) (2,1) (2,2)"));
    CHECK(contains(cli({"inspect", "--tensors", p("dus.upsk")}).out, "alpha.0"));

    const auto report = cli({"plan", "--layers", "4", "--block-size", "2", "--usage", "1,2", "--report", p("r.json")});
    CHECK(report.code == 0);
    CHECK(contains(read_text_file(dir / "r.json"), "\"depth\""));
}

TEST_CASE("train subcommand") {
    testing::TempDir dir("cli");
    const auto p = [&](const char* name) { return (dir / name).string(); };
    std::string corpus;
    for (int i = 0; i < 40; ++i) corpus += "abcabcabcabcabcabc\n";
    write_text_atomic(dir / "c.txt", corpus);
    Tokenizer::byte_level().save(dir / "t.json");
    write_text_atomic(dir / "cfg.json",
                      R"({"steps": 5, "lr": 0.003, "ctx_len": 16, "batch": 4, "sources": [{"path": "c.txt"}]})");
    REQUIRE(cli({"init", "--vocab", "258", "--layers", "2", "--dim", "16", "--ffn", "32", "--heads", "2", "--kv-heads",
                 "1", "--out", p("m.upsk")})
                .code == 0);
    const auto r = cli({"train", "--model", p("m.upsk"), "--tokenizer", p("t.json"), "--config", p("cfg.json"), "--out",
                        p("run"), "--steps", "4", "--snapshot-every", "2"});
    CHECK(r.code == 0);
    CHECK(contains(r.out, "snapshots: 2"));
    CHECK(std::filesystem::exists(dir / "run" / "final.upsk"));
    CHECK(std::filesystem::exists(dir / "run" / "snapshots" / "ffn_step_000004.upsk"));
}

TEST_CASE("edit distance") {
    CHECK(edit_distance("kitten", "sitting") == 3);
    CHECK(edit_distance("", "abc") == 3);
    CHECK(edit_distance("plan", "plan") == 0);
}
