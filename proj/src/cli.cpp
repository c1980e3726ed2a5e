#include "upscale/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <fmt/core.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "upscale/bpe.hpp"
#include "upscale/checkpoint.hpp"
#include "upscale/error.hpp"
#include "upscale/log.hpp"
#include "upscale/model.hpp"
#include "upscale/surgery.hpp"
#include "upscale/train.hpp"

namespace upscale {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::size_t edit_distance(std::string_view a, std::string_view b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

namespace {

std::string closest(std::string_view word, const std::vector<std::string>& candidates) {
    std::string best;
    std::size_t best_d = std::string::npos;
    for (const auto& c : candidates) {
        const std::size_t d = edit_distance(word, c);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best_d <= std::max<std::size_t>(2, word.size() / 2) ? best : std::string();
}

std::vector<std::string> option_names(const CLI::App& app) {
    std::vector<std::string> names;
    for (const CLI::Option* opt : app.get_options()) {
        for (const auto& n : opt->get_lnames()) names.push_back("--" + n);
    }
    return names;
}

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Io:
        case ErrorKind::Numeric: return kExitRuntime;
        default: return kExitValidation;
    }
}

std::vector<std::size_t> parse_usage(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t pos = 0;
            const long long v = std::stoll(item, &pos);
            if (pos != item.size() || v < 0) throw std::invalid_argument(item);
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::logic_error&) {
            throw ValidationError("usage entry '" + item + "' is not a non-negative integer");
        }
    }
    if (out.empty()) throw ValidationError("usage list is empty");
    return out;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

json config_json(const ModelConfig& c) { return json::parse(config_to_json(c)); }

struct Context {
    std::ostream& out;
    std::ostream& err;
    std::string report_path;
    json report = json::object();

    void finish() const {
        if (!report_path.empty()) write_text_atomic(report_path, report.dump(2) + "\n");
    }
};

void write_surgery_report(const SurgeryReport& r, const fs::path& model_out, Context& ctx) {
    fs::path p = model_out;
    p += ".report.json";
    write_text_atomic(p, r.to_json() + "\n");
    ctx.report = json::parse(r.to_json());
    ctx.out << fmt::format("{}: depth {} -> {}, alphas {}, params {} -> {} ({:+})\n", r.operation, r.depth_before,
                           r.depth_after, r.alpha_count, r.params_before, r.params_after, r.param_delta());
    for (const auto& n : r.notes) ctx.out << "note: " << n << "\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Vocabulary, depth and expert up-scaling toolkit for small decoder-only transformers", "upscale-kit"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");
    bool verbose = false, quiet = false;
    app.add_flag("-v,--verbose", verbose, "Log debug detail to standard error");
    app.add_flag("-q,--quiet", quiet, "Only log warnings");

    Context ctx{out, err, {}, json::object()};
    std::uint64_t seed = 0;
    std::function<void()> action;

    auto add_common = [&](CLI::App* sub, bool randomized) {
        sub->add_option("--report", ctx.report_path, "Write a JSON report of the result to this path");
        if (randomized) sub->add_option("--seed", seed, "Random seed")->capture_default_str();
    };

    // init
    {
        auto* sub = app.add_subcommand("init", "Create a randomly initialized model");
        auto cfg = std::make_shared<ModelConfig>(tiny_config());
        auto config_path = std::make_shared<std::string>();
        auto out_path = std::make_shared<std::string>();
        auto vocab = std::make_shared<std::size_t>(0);
        auto layers = std::make_shared<std::size_t>(0);
        auto dim = std::make_shared<std::size_t>(0);
        auto ffn = std::make_shared<std::size_t>(0);
        auto heads = std::make_shared<std::size_t>(0);
        auto kv = std::make_shared<std::size_t>(0);
        auto ctx_len = std::make_shared<std::size_t>(0);
        auto window = std::make_shared<std::size_t>(0);
        sub->add_option("--config", *config_path, "Model config JSON (defaults to the tiny preset)");
        sub->add_option("--vocab", *vocab, "Override vocab_size");
        sub->add_option("--layers", *layers, "Override n_layers");
        sub->add_option("--dim", *dim, "Override embed_dim");
        sub->add_option("--ffn", *ffn, "Override intermediate_dim");
        sub->add_option("--heads", *heads, "Override n_heads");
        sub->add_option("--kv-heads", *kv, "Override n_kv_heads");
        sub->add_option("--ctx", *ctx_len, "Override ctx_len");
        sub->add_option("--window", *window, "Set a sliding window");
        sub->add_option("--out", *out_path, "Output model path")->required();
        add_common(sub, true);
        sub->callback([=, &ctx, &seed, &action] {
            action = [=, &ctx, &seed] {
                ModelConfig c = config_path->empty() ? *cfg : load_config(*config_path);
                if (*vocab) c.vocab_size = *vocab;
                if (*layers) c.n_layers = *layers;
                if (*dim) c.embed_dim = *dim;
                if (*ffn) c.intermediate_dim = *ffn;
                if (*heads) c.n_heads = *heads;
                if (*kv) c.n_kv_heads = *kv;
                if (*ctx_len) c.ctx_len = *ctx_len;
                if (*window) c.sliding_window = *window;
                const Model m = build_model(c, seed);
                save_model(m, *out_path);
                ctx.report = {{"path", *out_path}, {"params", count_parameters(m)}, {"config", config_json(c)}};
                ctx.out << fmt::format("wrote {} ({} parameters)\n", *out_path, count_parameters(m));
            };
        });
    }

    // tokenizer-train
    {
        auto* sub = app.add_subcommand("tokenizer-train", "Learn a byte-level BPE tokenizer from a corpus");
        auto corpus = std::make_shared<std::string>();
        auto out_path = std::make_shared<std::string>();
        auto merges = std::make_shared<std::size_t>(0);
        sub->add_option("--corpus", *corpus, "Corpus file (.txt lines or .jsonl with a text field)")->required();
        sub->add_option("--merges", *merges, "Number of merges to learn")->required();
        sub->add_option("--out", *out_path, "Output tokenizer JSON")->required();
        add_common(sub, false);
        sub->callback([=, &ctx, &action] {
            action = [=, &ctx] {
                const auto docs = read_corpus(*corpus);
                const Tokenizer t = train_bpe(docs, *merges);
                t.save(*out_path);
                ctx.report = {{"path", *out_path}, {"vocab_size", t.vocab_size()}, {"merges", t.num_merges()}};
                ctx.out << fmt::format("vocab_size: {}\nmerges: {}\n", t.vocab_size(), t.num_merges());
            };
        });
    }

    // tokenizer-extend
    {
        auto* sub = app.add_subcommand("tokenizer-extend", "Add merges learned on a new corpus to an existing tokenizer");
        auto base = std::make_shared<std::string>();
        auto corpus = std::make_shared<std::string>();
        auto out_path = std::make_shared<std::string>();
        auto target = std::make_shared<std::size_t>(0);
        sub->add_option("--tokenizer", *base, "Base tokenizer JSON")->required();
        sub->add_option("--corpus", *corpus, "Extension corpus")->required();
        sub->add_option("--target", *target, "Vocabulary size after extension")->required();
        sub->add_option("--out", *out_path, "Output tokenizer JSON")->required();
        add_common(sub, false);
        sub->callback([=, &ctx, &action] {
            action = [=, &ctx] {
                const Tokenizer b = Tokenizer::load(*base);
                const Tokenizer t = extend_vocab(b, read_corpus(*corpus), *target);
                t.save(*out_path);
                ctx.report = {{"path", *out_path}, {"base_size", t.base_size()}, {"vocab_size", t.vocab_size()},
                              {"added", t.vocab_size() - b.vocab_size()}};
                ctx.out << fmt::format("vocab_size: {} (+{})\n", t.vocab_size(), t.vocab_size() - b.vocab_size());
            };
        });
    }

    // tpc
    {
        auto* sub = app.add_subcommand("tpc", "Tokens per character of a tokenizer on a corpus");
        auto tok = std::make_shared<std::string>();
        auto corpus = std::make_shared<std::string>();
        sub->add_option("--tokenizer", *tok, "Tokenizer JSON")->required();
        sub->add_option("--corpus", *corpus, "Corpus file")->required();
        add_common(sub, false);
        sub->callback([=, &ctx, &action] {
            action = [=, &ctx] {
                const auto r = tokens_per_character(Tokenizer::load(*tok), read_corpus(*corpus));
                ctx.report = {{"tokens", r.total_tokens}, {"characters", r.total_characters}, {"tpc", r.tpc}};
                ctx.out << fmt::format("tokens: {}\ncharacters: {}\ntpc: {:.4f}\n", r.total_tokens, r.total_characters, r.tpc);
            };
        });
    }

    // embed-merge
    {
        auto* sub = app.add_subcommand("embed-merge", "Grow a model's embeddings to an extended tokenizer");
        auto model = std::make_shared<std::string>();
        auto base = std::make_shared<std::string>();
        auto ext = std::make_shared<std::string>();
        auto out_path = std::make_shared<std::string>();
        sub->add_option("--model", *model, "Input model")->required();
        sub->add_option("--base", *base, "Tokenizer the model was trained with")->required();
        sub->add_option("--extended", *ext, "Extended tokenizer")->required();
        sub->add_option("--out", *out_path, "Output model")->required();
        add_common(sub, true);
        sub->callback([=, &ctx, &seed, &action] {
            action = [=, &ctx, &seed] {
                SurgeryReport r;
                const Model m = merge_token_embeddings(load_model(*model), Tokenizer::load(*base),
                                                       Tokenizer::load(*ext), seed, &r);
                save_model(m, *out_path);
                write_surgery_report(r, *out_path, ctx);
            };
        });
    }

    // plan
    {
        auto* sub = app.add_subcommand("plan", "Show the layout of a block duplication plan");
        auto layers = std::make_shared<std::size_t>(0);
        auto block = std::make_shared<std::size_t>(0);
        auto usage = std::make_shared<std::string>();
        auto out_path = std::make_shared<std::string>();
        sub->add_option("--layers", *layers, "Source layer count")->required();
        sub->add_option("--block-size", *block, "Layers per block")->required();
        sub->add_option("--usage", *usage, "Comma-separated duplication count per block")->required();
        sub->add_option("--out", *out_path, "Write the plan JSON here");
        add_common(sub, false);
        sub->callback([=, &ctx, &action] {
            action = [=, &ctx] {
                const BlockPlan p = make_plan(*layers, *block, parse_usage(*usage));
                if (!out_path->empty()) write_text_atomic(*out_path, plan_to_json(p) + "\n");
                json layout = json::array();
                for (std::size_t n = 1; n <= p.usage.size(); ++n) {
                    const std::size_t first = (n - 1) * p.block_size + 1;
                    ctx.out << fmt::format("block {:>2}  layers {:>3}-{:<3}  usage {}\n", n, first,
                                           first + p.block_size - 1, p.usage[n - 1]);
                }
                for (const auto& [n, d] : p.layout) layout.push_back({n, d});
                ctx.out << fmt::format("alphas: {}\ndepth: {}\n", p.duplicate_count(), p.depth());
                ctx.report = {{"depth", p.depth()}, {"alphas", p.duplicate_count()}, {"layout", layout}};
            };
        });
    }

    // dus
    {
        auto* sub = app.add_subcommand("dus", "Depth up-scaling by layer duplication");
        auto model = std::make_shared<std::string>();
        auto out_path = std::make_shared<std::string>();
        auto v1 = std::make_shared<bool>(false);
        auto v2 = std::make_shared<bool>(false);
        auto k = std::make_shared<std::size_t>(0);
        auto plan_path = std::make_shared<std::string>();
        auto block = std::make_shared<std::size_t>(0);
        auto usage = std::make_shared<std::string>();
        auto alpha = std::make_shared<double>(1.0);
        sub->add_option("--model", *model, "Input model")->required();
        sub->add_option("--out", *out_path, "Output model")->required();
        auto* o1 = sub->add_flag("--v1", *v1, "Keep the first K and last K layers");
        auto* o2 = sub->add_flag("--v2", *v2, "Duplicate blocks in place with skip connections");
        o1->excludes(o2);
        sub->add_option("--k", *k, "K for --v1");
        sub->add_option("--plan", *plan_path, "Plan JSON for --v2");
        sub->add_option("--block-size", *block, "Block size for --v2 without --plan");
        sub->add_option("--usage", *usage, "Comma-separated usage for --v2 without --plan");
        sub->add_option("--alpha", *alpha, "Initial skip scale for duplicated blocks")->capture_default_str();
        add_common(sub, false);
        sub->callback([=, &ctx, &action] {
            if (!*v1 && !*v2) throw CLI::RequiredError("dus needs --v1 or --v2");
            if (*v1 && *k == 0) throw CLI::RequiredError("--v1 needs --k");
            if (*v2 && plan_path->empty() && (*block == 0 || usage->empty())) {
                throw CLI::RequiredError("--v2 needs --plan or --block-size with --usage");
            }
            action = [=, &ctx] {
                const Model src = load_model(*model);
                SurgeryReport r;
                Model m;
                if (*v1) {
                    m = dus_v1(src, *k, &r);
                } else {
                    const BlockPlan p = plan_path->empty() ? make_plan(src.layers.size(), *block, parse_usage(*usage))
                                                           : plan_from_json(read_text_file(*plan_path), src.layers.size());
                    m = dus_v2(src, p, *alpha, &r);
                }
                save_model(m, *out_path);
                write_surgery_report(r, *out_path, ctx);
            };
        });
    }

    // moe-expand
    {
        auto* sub = app.add_subcommand("moe-expand", "Turn dense FFNs into experts seeded from FFN snapshots");
        auto model = std::make_shared<std::string>();
        auto snaps = std::make_shared<std::string>();
        auto experts = std::make_shared<std::size_t>(4);
        auto top_k = std::make_shared<std::size_t>(2);
        auto out_path = std::make_shared<std::string>();
        sub->add_option("--model", *model, "Dense input model")->required();
        sub->add_option("--snapshots", *snaps, "Comma-separated FFN snapshot files");
        sub->add_option("--experts", *experts, "Number of experts M")->capture_default_str();
        sub->add_option("--top-k", *top_k, "Experts per token K")->capture_default_str();
        sub->add_option("--out", *out_path, "Output model")->required();
        add_common(sub, true);
        sub->callback([=, &ctx, &seed, &action] {
            action = [=, &ctx, &seed] {
                const auto files = split_list(*snaps);
                if (*experts == 0 || files.size() != *experts - 1) {
                    throw ParameterError(fmt::format("need experts−1 = {} snapshots, got {}",
                                                     *experts == 0 ? 0 : *experts - 1, files.size()));
                }
                std::vector<FfnSnapshot> s;
                for (const auto& f : files) s.push_back(load_snapshot(f));
                SurgeryReport r;
                const Model m = expand_moe(load_model(*model), std::move(s), *experts, *top_k, seed, &r);
                save_model(m, *out_path);
                write_surgery_report(r, *out_path, ctx);
            };
        });
    }

    // retheta
    {
        auto* sub = app.add_subcommand("retheta", "Set a new RoPE base and drop the sliding window");
        auto model = std::make_shared<std::string>();
        auto config = std::make_shared<std::string>();
        auto preset = std::make_shared<std::string>();
        auto theta = std::make_shared<double>(1e6);
        auto out_path = std::make_shared<std::string>();
        auto* om = sub->add_option("--model", *model, "Model to rewrite");
        auto* oc = sub->add_option("--config", *config, "Config JSON to rewrite");
        auto* op = sub->add_option("--preset", *preset, "phi3-medium or jai1");
        om->excludes(oc)->excludes(op);
        oc->excludes(op);
        sub->add_option("--theta", *theta, "New RoPE base")->capture_default_str();
        sub->add_option("--out", *out_path, "Output model or config path");
        add_common(sub, false);
        sub->callback([=, &ctx, &action] {
            if (model->empty() && config->empty() && preset->empty()) {
                throw CLI::RequiredError("retheta needs --model, --config or --preset");
            }
            if (!model->empty() && out_path->empty()) throw CLI::RequiredError("--model needs --out");
            action = [=, &ctx] {
                ModelConfig before;
                if (!model->empty()) {
                    Model m = load_model(*model);
                    before = m.config;
                    m.config = retheta_and_unwindow(m.config, *theta);
                    save_model(m, *out_path);
                } else {
                    if (!config->empty()) {
                        before = load_config(*config);
                    } else if (*preset == "phi3-medium") {
                        before = phi3_medium_config();
                    } else if (*preset == "jai1") {
                        before = jai1_config();
                    } else {
                        throw ValidationError("unknown preset '" + *preset + "'");
                    }
                    if (!out_path->empty()) save_config(retheta_and_unwindow(before, *theta), *out_path);
                }
                const ModelConfig after = retheta_and_unwindow(before, *theta);
                ctx.report = {{"before", config_json(before)}, {"after", config_json(after)}};
                ctx.out << fmt::format("rope_theta: {} -> {}\nsliding_window: {} -> null\n", before.rope_theta,
                                       after.rope_theta,
                                       before.sliding_window ? std::to_string(*before.sliding_window) : "null");
            };
        });
    }

    // train
    {
        auto* sub = app.add_subcommand("train", "Next-token training with packing, mixing and FFN snapshots");
        auto model = std::make_shared<std::string>();
        auto tok = std::make_shared<std::string>();
        auto config = std::make_shared<std::string>();
        auto out_dir = std::make_shared<std::string>();
        auto steps = std::make_shared<std::size_t>(0);
        auto snap = std::make_shared<long long>(-1);
        sub->add_option("--model", *model, "Input model")->required();
        sub->add_option("--tokenizer", *tok, "Tokenizer JSON")->required();
        sub->add_option("--config", *config, "Training config JSON")->required();
        sub->add_option("--out", *out_dir, "Output directory")->required();
        sub->add_option("--steps", *steps, "Override the configured step count");
        sub->add_option("--snapshot-every", *snap, "Override the configured snapshot interval");
        add_common(sub, false);
        sub->callback([=, &ctx, &action] {
            action = [=, &ctx] {
                TrainConfig tc = load_train_config(*config);
                if (*steps) tc.steps = *steps;
                if (*snap >= 0) tc.snapshot_every = static_cast<std::size_t>(*snap);
                const Tokenizer t = Tokenizer::load(*tok);
                Model m = load_model(*model);
                if (m.config.vocab_size != t.vocab_size()) {
                    throw ContractError(fmt::format("model vocab_size {} does not match the tokenizer's {}",
                                                    m.config.vocab_size, t.vocab_size()));
                }
                PackedBatch packed = prepare_training_rows(tc, t);
                log::info("packed {} rows of {} tokens", packed.rows.size(), tc.ctx_len);
                BatchStream stream(std::move(packed.rows), tc.batch, *t.special_id(kPadToken), tc.seed);
                TrainOptions opt;
                opt.steps = tc.steps;
                opt.adam.lr = tc.lr;
                opt.warmup = tc.warmup;
                opt.snapshot_every = tc.snapshot_every;
                opt.out_dir = *out_dir;
                const TrainReport r = train(m, [&] { return stream.next(); }, opt);
                json snaps = json::array();
                for (const auto& [step, path] : r.snapshots) snaps.push_back({{"step", step}, {"path", path.string()}});
                ctx.report = {{"steps", r.records.size()},
                              {"initial_loss", r.initial_loss()},
                              {"final_loss", r.final_loss()},
                              {"snapshots", snaps},
                              {"final_checkpoint", r.final_checkpoint.string()}};
                ctx.out << fmt::format("initial loss: {:.4f}\nfinal loss: {:.4f}\nsnapshots: {}\ncheckpoint: {}\n",
                                       r.initial_loss(), r.final_loss(), r.snapshots.size(),
                                       r.final_checkpoint.string());
                for (const auto& [step, path] : r.snapshots) ctx.out << fmt::format("snapshot {}: {}\n", step, path.string());
            };
        });
    }

    // param-count
    {
        auto* sub = app.add_subcommand("param-count", "Closed-form parameter count of a config");
        auto config = std::make_shared<std::string>();
        auto preset = std::make_shared<std::string>();
        sub->add_option("--config", *config, "Config JSON")->excludes(sub->add_option("--preset", *preset, "phi3-medium or jai1"));
        add_common(sub, false);
        sub->callback([=, &ctx, &action] {
            if (config->empty() && preset->empty()) throw CLI::RequiredError("param-count needs --config or --preset");
            action = [=, &ctx] {
                ModelConfig c;
                if (!config->empty()) {
                    c = load_config(*config);
                } else if (*preset == "phi3-medium") {
                    c = phi3_medium_config();
                } else if (*preset == "jai1") {
                    c = jai1_config();
                } else {
                    throw ValidationError("unknown preset '" + *preset + "' (expected phi3-medium or jai1)");
                }
                const std::uint64_t n = param_count(c);
                ctx.report = {{"params", n}, {"config", config_json(c)}};
                ctx.out << fmt::format("params: {} ({:.2f}B)\n", n, static_cast<double>(n) / 1e9);
            };
        });
    }

    // inspect
    {
        auto* sub = app.add_subcommand("inspect", "Summarize a model or list the tensors of any container");
        auto path = std::make_shared<std::string>();
        auto raw = std::make_shared<bool>(false);
        sub->add_option("path", *path, "Model or container file")->required();
        sub->add_flag("--tensors", *raw, "List container tensors instead of the model summary");
        add_common(sub, false);
        sub->callback([=, &ctx, &action] {
            action = [=, &ctx] {
                if (*raw || !fs::exists(config_path_for(*path))) {
                    const TensorMap map = load_container(*path);
                    json list = json::array();
                    for (const auto& [name, t] : map) {
                        const char* dt = dtype_of(t) == DType::F32 ? "f32" : "f64";
                        ctx.out << fmt::format("{:<32} {} {}\n", name, dt, shape_string(shape_of(t)));
                        list.push_back({{"name", name}, {"dtype", dt}, {"shape", shape_of(t)}});
                    }
                    ctx.report = {{"tensors", list}};
                    return;
                }
                const Model m = load_model(*path);
                const auto& c = m.config;
                ctx.out << fmt::format("layers: {}\nembed_dim: {}\nvocab_size: {}\nexperts: {} (top-{})\n", c.n_layers,
                                       c.embed_dim, c.vocab_size, c.n_experts, c.top_k);
                ctx.out << fmt::format("rope_theta: {}\nsliding_window: {}\nparams: {}\n", c.rope_theta,
                                       c.sliding_window ? std::to_string(*c.sliding_window) : "null",
                                       count_parameters(m));
                json alphas = json::array();
                for (const auto& a : m.alphas) alphas.push_back(a[0]);
                if (m.wiring) {
                    ctx.out << "wiring:";
                    for (const auto& e : m.wiring->entries) ctx.out << fmt::format(" ({},{})", e.origin_block, e.dup_index);
                    ctx.out << fmt::format("\nalphas: {}\n", alphas.dump());
                }
                ctx.report = {{"config", config_json(c)}, {"params", count_parameters(m)}, {"alphas", alphas}};
            };
        });
    }

    // router-load
    {
        auto* sub = app.add_subcommand("router-load", "Per-layer expert selection frequencies");
        auto model = std::make_shared<std::string>();
        auto tok = std::make_shared<std::string>();
        auto corpus = std::make_shared<std::string>();
        auto tokens = std::make_shared<std::size_t>(4096);
        sub->add_option("--model", *model, "MoE model")->required();
        sub->add_option("--tokenizer", *tok, "Tokenizer used with --corpus");
        sub->add_option("--corpus", *corpus, "Corpus to route (otherwise random tokens)");
        sub->add_option("--tokens", *tokens, "Number of random tokens when no corpus is given")->capture_default_str();
        add_common(sub, true);
        sub->callback([=, &ctx, &seed, &action] {
            if (!corpus->empty() && tok->empty()) throw CLI::RequiredError("--corpus needs --tokenizer");
            action = [=, &ctx, &seed] {
                const Model m = load_model(*model);
                std::vector<TokenId> ids;
                if (!corpus->empty()) {
                    const Tokenizer t = Tokenizer::load(*tok);
                    for (const auto& d : read_corpus(*corpus)) {
                        const auto e = t.encode(d);
                        ids.insert(ids.end(), e.begin(), e.end());
                    }
                } else {
                    std::mt19937_64 rng(seed);
                    std::uniform_int_distribution<TokenId> dist(0, static_cast<TokenId>(m.config.vocab_size - 1));
                    for (std::size_t i = 0; i < *tokens; ++i) ids.push_back(dist(rng));
                }
                const std::size_t seq = std::min<std::size_t>(m.config.ctx_len, 64);
                if (ids.size() < seq) throw ValidationError("router-load needs at least " + std::to_string(seq) + " tokens");
                ids.resize(ids.size() / seq * seq);
                const RouterLoad load = router_load(m, TokenBatch{ids.size() / seq, seq, ids});
                json layers = json::array();
                for (std::size_t l = 0; l < load.fractions.size(); ++l) {
                    std::string row;
                    for (double f : load.fractions[l]) row += fmt::format(" {:.4f}", f);
                    ctx.out << fmt::format("layer {:>3}:{}\n", load.layer_index[l], row);
                    layers.push_back({{"layer", load.layer_index[l]}, {"fractions", load.fractions[l]}});
                }
                ctx.report = {{"tokens", load.tokens}, {"top_k", load.top_k}, {"layers", layers}};
            };
        });
    }

    std::vector<std::string> sub_names;
    for (const CLI::App* s : app.get_subcommands([](const CLI::App*) { return true; })) sub_names.push_back(s->get_name());

    if (argc >= 2) {
        const std::string first = argv[1];
        if (!first.empty() && first[0] != '-' && std::find(sub_names.begin(), sub_names.end(), first) == sub_names.end()) {
            err << "error: unknown subcommand '" << first << "'";
            const std::string s = closest(first, sub_names);
            if (!s.empty()) err << "; did you mean '" << s << "'?";
            err << "\nrun 'upscale-kit --help' for the list of subcommands\n";
            return kExitUsage;
        }
        // Unknown flags are reported before CLI11's required-option checks
        // would mask them.
        if (const CLI::App* sub = first.empty() || first[0] == '-' ? nullptr : app.get_subcommand(first)) {
            auto known = option_names(*sub);
            known.push_back("--help");
            for (int i = 2; i < argc; ++i) {
                const std::string arg = argv[i];
                if (arg.rfind("--", 0) != 0 || arg == "--") continue;
                const std::string name = arg.substr(0, arg.find('='));
                if (std::find(known.begin(), known.end(), name) != known.end()) continue;
                err << "error: unknown option '" << name << "' for " << first;
                const std::string s = closest(name, known);
                if (!s.empty()) err << "; did you mean '" << s << "'?";
                err << "\n";
                return kExitUsage;
            }
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        const CLI::App* target = &app;
        for (const CLI::App* s : app.get_subcommands()) target = s;
        out << target->help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ExtrasError& e) {
        err << "error: " << e.what() << "\n";
        const CLI::App* target = &app;
        for (const CLI::App* s : app.get_subcommands()) target = s;
        for (const auto& extra : target->remaining()) {
            if (extra.rfind("--", 0) != 0) continue;
            const std::string s = closest(extra.substr(0, extra.find('=')), option_names(*target));
            if (!s.empty()) err << "did you mean '" << s << "'?\n";
        }
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }

    log::set_level(quiet ? log::Level::Warn : verbose ? log::Level::Debug : log::Level::Info);
    try {
        if (!action) throw ContractError("no subcommand selected");
        action();
        ctx.finish();
        return kExitOk;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

int run_cli(int argc, const char* const* argv) { return run_cli(argc, argv, std::cout, std::cerr); }

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"upscale-kit"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace upscale
