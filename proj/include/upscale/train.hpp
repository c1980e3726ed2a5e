#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "upscale/bpe.hpp"
#include "upscale/model.hpp"

namespace upscale {

using Document = std::vector<TokenId>;

/// Rows of exactly ctx_len ids. doc_starts[r] lists the offsets in row r
/// where a document begins.
struct PackedBatch {
    std::size_t ctx_len = 0;
    std::vector<std::vector<TokenId>> rows;
    std::vector<std::vector<std::size_t>> doc_starts;
};

/// Incremental packer: documents are appended followed by eos and sliced
/// into rows; finish() pads the trailing partial row.
class SequencePacker {
public:
    /// vocab_size = 0 disables the id range check. Throws ParameterError
    /// for ctx_len < 2.
    SequencePacker(std::size_t ctx_len, TokenId eos_id, TokenId pad_id, std::size_t vocab_size = 0);

    void push(std::span<const TokenId> doc);
    void finish();
    PackedBatch take();

private:
    void close_row();

    PackedBatch out_;
    std::vector<TokenId> row_;
    std::vector<std::size_t> starts_;
    TokenId eos_, pad_;
    std::size_t vocab_;
};

PackedBatch pack_sequences(const std::vector<Document>& docs, std::size_t ctx_len, TokenId eos_id, TokenId pad_id,
                           std::size_t vocab_size = 0);

struct CorpusSource {
    std::string name;
    std::vector<Document> docs;
    double weight = 1.0;
};

/// Draws documents from weighted sources. A draw picks a source with
/// probability proportional to its weight and yields its next document;
/// exhausted sources drop out and the remaining weights renormalize.
class CorpusMixer {
public:
    /// Throws ParameterError for negative, non-finite or all-zero weights.
    CorpusMixer(std::vector<CorpusSource> sources, std::uint64_t seed);

    /// Index of the source the next document comes from, or nullopt once
    /// every source with positive weight is exhausted.
    std::optional<std::size_t> draw();
    /// Next document of the mixed stream.
    std::optional<Document> next();

    const std::vector<CorpusSource>& sources() const noexcept { return sources_; }

private:
    void rebuild();

    std::vector<CorpusSource> sources_;
    std::vector<std::size_t> cursor_;
    std::vector<std::size_t> active_;
    std::discrete_distribution<std::size_t> dist_;
    std::mt19937_64 rng_;
};

std::vector<Document> mix_corpora(std::vector<CorpusSource> sources, std::uint64_t seed);

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
};

struct AdamState {
    std::uint64_t t = 0;
    std::vector<std::vector<double>> m, v;
};

/// One bias-corrected Adam update. Throws ParameterError for lr ≤ 0 or
/// betas outside (0, 1), DimensionError when shapes disagree.
void adam_step(const std::vector<Tensor*>& weights, const std::vector<Tensor>& grads, AdamState& state,
               const AdamHyper& hyper);

/// Model input row[:-1] and next-token targets row[1:]; pad targets are
/// mapped to -1 and ignored by the loss.
struct TrainBatch {
    TokenBatch inputs;
    std::vector<std::int32_t> targets;
};

TrainBatch make_train_batch(const std::vector<std::vector<TokenId>>& rows, TokenId pad_id);

/// Cycles through packed rows in batches, reshuffling each epoch with
/// seed + epoch.
class BatchStream {
public:
    BatchStream(std::vector<std::vector<TokenId>> rows, std::size_t batch, TokenId pad_id, std::uint64_t seed);
    TrainBatch next();
    std::size_t rows() const noexcept { return rows_.size(); }

private:
    void reshuffle();

    std::vector<std::vector<TokenId>> rows_;
    std::vector<std::size_t> order_;
    std::size_t batch_, pos_ = 0;
    std::uint64_t seed_, epoch_ = 0;
    TokenId pad_;
};

struct TrainOptions {
    std::size_t steps = 1;
    AdamHyper adam;
    std::size_t warmup = 10;
    std::size_t snapshot_every = 0;  // 0 disables snapshots
    std::filesystem::path out_dir;
};

struct StepRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double seconds = 0.0;
};

struct TrainReport {
    std::vector<StepRecord> records;
    std::vector<std::pair<std::size_t, std::filesystem::path>> snapshots;
    std::filesystem::path final_checkpoint;

    double initial_loss() const { return records.front().loss; }
    double final_loss() const { return records.back().loss; }
};

/// Learning rate at 1-based step t: lr·min(1, t/warmup).
double scheduled_lr(const TrainOptions& options, std::size_t step);

/// Trains `model` in place. Writes report.jsonl, snapshots/ffn_step_NNNNNN.upsk
/// every snapshot_every steps and final.upsk under out_dir. A non-finite loss
/// saves last_good.upsk and throws NumericError naming the step.
TrainReport train(Model& model, const std::function<TrainBatch()>& batches, const TrainOptions& options);

struct TrainSourceSpec {
    std::filesystem::path path;
    double weight = 1.0;
};

struct TrainConfig {
    std::size_t steps = 100;
    double lr = 1e-3;
    std::size_t warmup = 10;
    std::size_t snapshot_every = 0;
    std::size_t ctx_len = 128;
    std::size_t batch = 8;
    std::uint64_t seed = 0;
    std::vector<TrainSourceSpec> sources;
};

/// Source paths are resolved relative to the config file's directory.
TrainConfig load_train_config(const std::filesystem::path& path);
TrainConfig train_config_from_json(const std::string& text, const std::filesystem::path& base_dir = {});

/// Tokenizes and mixes the configured sources and packs them into rows.
PackedBatch prepare_training_rows(const TrainConfig& config, const Tokenizer& tokenizer);

}  // namespace upscale
