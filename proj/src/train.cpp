#include "upscale/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/core.h>

#include "json.hpp"
#include "upscale/error.hpp"
#include "upscale/log.hpp"
#include "upscale/surgery.hpp"

namespace upscale {

using json = nlohmann::json;

SequencePacker::SequencePacker(std::size_t ctx_len, TokenId eos_id, TokenId pad_id, std::size_t vocab_size)
    : eos_(eos_id), pad_(pad_id), vocab_(vocab_size) {
    if (ctx_len < 2) throw ParameterError("ctx_len must be at least 2, got " + std::to_string(ctx_len));
    out_.ctx_len = ctx_len;
}

void SequencePacker::close_row() {
    out_.rows.push_back(std::move(row_));
    out_.doc_starts.push_back(std::move(starts_));
    row_.clear();
    starts_.clear();
}

void SequencePacker::push(std::span<const TokenId> doc) {
    if (vocab_ > 0) {
        for (TokenId id : doc) {
            if (id < 0 || static_cast<std::size_t>(id) >= vocab_) {
                throw IdError("document token " + std::to_string(id) + " is outside the vocabulary of " +
                              std::to_string(vocab_));
            }
        }
    }
    starts_.push_back(row_.size());
    auto emit = [&](TokenId id) {
        row_.push_back(id);
        if (row_.size() == out_.ctx_len) close_row();
    };
    for (TokenId id : doc) emit(id);
    emit(eos_);
}

void SequencePacker::finish() {
    if (row_.empty() && starts_.empty()) return;
    row_.resize(out_.ctx_len, pad_);
    close_row();
}

PackedBatch SequencePacker::take() {
    PackedBatch out = std::move(out_);
    out_ = PackedBatch{out.ctx_len, {}, {}};
    return out;
}

PackedBatch pack_sequences(const std::vector<Document>& docs, std::size_t ctx_len, TokenId eos_id, TokenId pad_id,
                           std::size_t vocab_size) {
    SequencePacker packer(ctx_len, eos_id, pad_id, vocab_size);
    for (const auto& d : docs) packer.push(d);
    packer.finish();
    return packer.take();
}

CorpusMixer::CorpusMixer(std::vector<CorpusSource> sources, std::uint64_t seed)
    : sources_(std::move(sources)), cursor_(sources_.size(), 0), rng_(seed) {
    double total = 0.0;
    for (const auto& s : sources_) {
        if (!std::isfinite(s.weight) || s.weight < 0.0) {
            throw ParameterError("source '" + s.name + "' has invalid weight " + std::to_string(s.weight));
        }
        total += s.weight;
    }
    if (!(total > 0.0)) throw ParameterError("at least one corpus source needs a positive weight");
    for (std::size_t i = 0; i < sources_.size(); ++i) {
        if (sources_[i].weight <= 0.0) continue;
        if (sources_[i].docs.empty()) {
            log::warn("corpus source '{}' is empty", sources_[i].name);
            continue;
        }
        active_.push_back(i);
    }
    rebuild();
}

void CorpusMixer::rebuild() {
    std::vector<double> w;
    for (std::size_t i : active_) w.push_back(sources_[i].weight);
    dist_ = std::discrete_distribution<std::size_t>(w.begin(), w.end());
}

std::optional<std::size_t> CorpusMixer::draw() {
    if (active_.empty()) return std::nullopt;
    const std::size_t slot = active_.size() == 1 ? 0 : dist_(rng_);
    const std::size_t src = active_[slot];
    if (++cursor_[src] == sources_[src].docs.size()) {
        active_.erase(active_.begin() + static_cast<std::ptrdiff_t>(slot));
        if (!active_.empty()) {
            log::warn("corpus source '{}' exhausted; renormalizing over {} remaining", sources_[src].name, active_.size());
        }
        rebuild();
    }
    return src;
}

std::optional<Document> CorpusMixer::next() {
    const auto src = draw();
    if (!src) return std::nullopt;
    return sources_[*src].docs[cursor_[*src] - 1];
}

std::vector<Document> mix_corpora(std::vector<CorpusSource> sources, std::uint64_t seed) {
    CorpusMixer mixer(std::move(sources), seed);
    std::vector<Document> out;
    while (auto d = mixer.next()) out.push_back(std::move(*d));
    return out;
}

void adam_step(const std::vector<Tensor*>& weights, const std::vector<Tensor>& grads, AdamState& state,
               const AdamHyper& hyper) {
    if (!(hyper.lr > 0.0)) throw ParameterError("learning rate must be positive, got " + std::to_string(hyper.lr));
    if (!(hyper.beta1 > 0.0 && hyper.beta1 < 1.0) || !(hyper.beta2 > 0.0 && hyper.beta2 < 1.0)) {
        throw ParameterError("Adam betas must lie in (0, 1)");
    }
    if (weights.size() != grads.size()) {
        throw DimensionError(std::to_string(weights.size()) + " weights but " + std::to_string(grads.size()) + " gradients");
    }
    if (state.m.empty()) {
        for (const Tensor* w : weights) {
            state.m.emplace_back(w->size(), 0.0);
            state.v.emplace_back(w->size(), 0.0);
        }
    }
    if (state.m.size() != weights.size()) throw DimensionError("optimizer state does not match the parameter list");
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i]->shape() != grads[i].shape() || state.m[i].size() != weights[i]->size()) {
            throw DimensionError("gradient " + std::to_string(i) + " has shape " + shape_string(grads[i].shape()) +
                                 ", weight has " + shape_string(weights[i]->shape()));
        }
    }
    ++state.t;
    const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < weights.size(); ++i) {
        auto w = weights[i]->data();
        auto g = grads[i].data();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = g[j];
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
            const double update = hyper.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + hyper.eps);
            w[j] = static_cast<float>(static_cast<double>(w[j]) - update);
        }
    }
}

TrainBatch make_train_batch(const std::vector<std::vector<TokenId>>& rows, TokenId pad_id) {
    if (rows.empty()) throw ParameterError("training batch has no rows");
    const std::size_t len = rows.front().size();
    if (len < 2) throw ParameterError("training rows need at least 2 tokens");
    TrainBatch b;
    b.inputs.batch = rows.size();
    b.inputs.seq = len - 1;
    for (const auto& r : rows) {
        if (r.size() != len) throw DimensionError("training rows differ in length");
        b.inputs.ids.insert(b.inputs.ids.end(), r.begin(), r.end() - 1);
        for (std::size_t i = 1; i < len; ++i) b.targets.push_back(r[i] == pad_id ? -1 : r[i]);
    }
    return b;
}

BatchStream::BatchStream(std::vector<std::vector<TokenId>> rows, std::size_t batch, TokenId pad_id, std::uint64_t seed)
    : rows_(std::move(rows)), batch_(batch), seed_(seed), pad_(pad_id) {
    if (rows_.empty()) throw ParameterError("no training rows; the corpus is empty");
    if (batch_ == 0) throw ParameterError("batch size must be at least 1");
    reshuffle();
}

void BatchStream::reshuffle() {
    order_.resize(rows_.size());
    std::iota(order_.begin(), order_.end(), 0);
    std::mt19937_64 rng(seed_ + epoch_);
    std::shuffle(order_.begin(), order_.end(), rng);
    pos_ = 0;
}

TrainBatch BatchStream::next() {
    std::vector<std::vector<TokenId>> picked;
    while (picked.size() < batch_) {
        if (pos_ == order_.size()) {
            ++epoch_;
            reshuffle();
        }
        picked.push_back(rows_[order_[pos_++]]);
    }
    return make_train_batch(picked, pad_);
}

double scheduled_lr(const TrainOptions& options, std::size_t step) {
    if (options.warmup == 0) return options.adam.lr;
    return options.adam.lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(options.warmup));
}

TrainReport train(Model& model, const std::function<TrainBatch()>& batches, const TrainOptions& options) {
    if (options.steps == 0) throw ParameterError("steps must be at least 1");
    if (options.adam.lr < 0.0 || !std::isfinite(options.adam.lr)) {
        throw ParameterError("learning rate must be non-negative, got " + std::to_string(options.adam.lr));
    }
    if (options.snapshot_every > 0 && model.config.n_experts > 1) {
        throw ContractError("FFN snapshots need a dense model");
    }
    if (options.out_dir.empty()) throw ParameterError("train needs an output directory");
    std::filesystem::create_directories(options.out_dir);
    if (options.snapshot_every > 0) std::filesystem::create_directories(options.out_dir / "snapshots");

    const auto report_path = options.out_dir / "report.jsonl";
    std::ofstream report_file(report_path, std::ios::trunc);
    if (!report_file) throw IoError("cannot write " + report_path.string());

    TrainReport report;
    AdamState state;
    Model last_good = model;
    for (std::size_t step = 1; step <= options.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        const TrainBatch batch = batches();

        Graph<float> g;
        const ModelVars vars = bind_parameters(g, model, true);
        const Var logits = forward_graph(g, model, vars, batch.inputs);
        const Var loss = ops::cross_entropy(g, logits, batch.targets);
        const double loss_value = static_cast<double>(g.value(loss)[0]);
        if (!std::isfinite(loss_value)) {
            const auto keep = options.out_dir / "last_good.upsk";
            save_model(last_good, keep);
            throw NumericError("non-finite loss at step " + std::to_string(step) + "; last good weights saved to " +
                               keep.string());
        }
        last_good = model;

        const double lr = scheduled_lr(options, step);
        if (lr > 0.0) {
            g.backward(loss);
            std::vector<Tensor> grads = collect_gradients(g, vars);
            std::vector<Tensor*> weights;
            for_each_parameter<float>(model, [&](const std::string&, Tensor& t) { weights.push_back(&t); });
            AdamHyper hyper = options.adam;
            hyper.lr = lr;
            adam_step(weights, grads, state, hyper);
        }

        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.records.push_back({step, loss_value, seconds});
        report_file << json{{"step", step}, {"loss", loss_value}, {"seconds", seconds}}.dump() << '\n';
        report_file.flush();

        if (options.snapshot_every > 0 && step % options.snapshot_every == 0) {
            const auto path = options.out_dir / "snapshots" / fmt::format("ffn_step_{:06}.upsk", step);
            save_snapshot(snapshot_ffn(model, step), path);
            report.snapshots.emplace_back(step, path);
            log::info("step {}: saved FFN snapshot {}", step, path.string());
        }
    }
    report.final_checkpoint = options.out_dir / "final.upsk";
    save_model(model, report.final_checkpoint);
    return report;
}

TrainConfig train_config_from_json(const std::string& text, const std::filesystem::path& base_dir) {
    static const std::vector<std::string> known = {"steps", "lr",   "warmup", "snapshot_every",
                                                   "ctx_len", "batch", "seed", "sources"};
    TrainConfig c;
    try {
        const auto j = json::parse(text);
        if (!j.is_object()) throw ValidationError("training config must be a JSON object");
        for (const auto& [key, _] : j.items()) {
            if (std::find(known.begin(), known.end(), key) == known.end()) {
                throw ValidationError("unknown training config field '" + key + "'");
            }
        }
        c.steps = j.value("steps", c.steps);
        c.lr = j.value("lr", c.lr);
        c.warmup = j.value("warmup", c.warmup);
        c.snapshot_every = j.value("snapshot_every", c.snapshot_every);
        c.ctx_len = j.value("ctx_len", c.ctx_len);
        c.batch = j.value("batch", c.batch);
        c.seed = j.value("seed", c.seed);
        for (const auto& s : j.at("sources")) {
            TrainSourceSpec spec;
            spec.path = s.at("path").get<std::string>();
            if (spec.path.is_relative() && !base_dir.empty()) spec.path = base_dir / spec.path;
            spec.weight = s.value("weight", 1.0);
            c.sources.push_back(spec);
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed training config: ") + e.what());
    }
    if (c.sources.empty()) throw ValidationError("training config lists no sources");
    if (c.ctx_len < 2) throw ValidationError("training ctx_len must be at least 2");
    return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    return train_config_from_json(read_text_file(path), path.parent_path());
}

PackedBatch prepare_training_rows(const TrainConfig& config, const Tokenizer& tokenizer) {
    const auto eos = tokenizer.special_id(kEosToken);
    const auto pad = tokenizer.special_id(kPadToken);
    if (!eos || !pad) throw ContractError("tokenizer needs <|eos|> and <|pad|> specials for training");
    std::vector<CorpusSource> sources;
    for (const auto& spec : config.sources) {
        CorpusSource s;
        s.name = spec.path.filename().string();
        s.weight = spec.weight;
        for (const auto& text : read_corpus(spec.path)) s.docs.push_back(tokenizer.encode(text));
        sources.push_back(std::move(s));
    }
    return pack_sequences(mix_corpora(std::move(sources), config.seed), config.ctx_len, *eos, *pad,
                          tokenizer.vocab_size());
}

}  // namespace upscale
