#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace upscale {

using TokenId = std::int32_t;

struct MergeRule {
    TokenId left = 0;
    TokenId right = 0;

    friend bool operator==(const MergeRule&, const MergeRule&) = default;
};

inline constexpr const char* kPadToken = "<|pad|>";
inline constexpr const char* kEosToken = "<|eos|>";

std::vector<std::string> default_specials();

/// Byte-level BPE vocabulary.
///
/// Id layout: 0..255 are the raw bytes, then the special tokens, then one id
/// per merge in rank order. An extended tokenizer keeps every id of the
/// tokenizer it grew from and records that count as base_size.
class Tokenizer {
public:
    /// Pure byte tokenizer (no merges) with the given special tokens.
    static Tokenizer byte_level(const std::vector<std::string>& specials = default_specials());

    std::size_t vocab_size() const noexcept { return vocab_.size(); }
    /// Number of ids inherited from the tokenizer this one extends; 0 for a
    /// tokenizer that was trained from scratch.
    std::size_t base_size() const noexcept { return base_size_; }
    std::size_t num_merges() const noexcept { return merges_.size(); }
    TokenId first_merge_id() const noexcept { return static_cast<TokenId>(256 + specials_.size()); }
    /// Merges whose output id is below `id_limit`.
    std::size_t merges_below(std::size_t id_limit) const;

    const std::string& token_bytes(TokenId id) const;
    std::span<const MergeRule> merges() const noexcept { return merges_; }
    const std::vector<std::pair<std::string, TokenId>>& specials() const noexcept { return specials_; }
    std::optional<TokenId> special_id(std::string_view name) const;
    bool is_special(TokenId id) const noexcept;

    /// Pre-tokenizes on Unicode whitespace and applies merges per word,
    /// lowest rank first, leftmost occurrence first.
    std::vector<TokenId> encode(std::string_view text) const;
    /// Encodes raw bytes as a single word using only the first
    /// `merge_limit` merges.
    std::vector<TokenId> encode_word(std::string_view bytes, std::size_t merge_limit) const;
    /// Throws IdError on an out-of-range id. Special ids decode to their name.
    std::string decode(std::span<const TokenId> ids) const;

    /// Appends a merge; returns the new id.
    TokenId add_merge(TokenId left, TokenId right);
    void set_base_size(std::size_t n) { base_size_ = n; }

    std::string to_json() const;
    static Tokenizer from_json(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static Tokenizer load(const std::filesystem::path& path);

    friend bool operator==(const Tokenizer& a, const Tokenizer& b) {
        return a.vocab_ == b.vocab_ && a.merges_ == b.merges_ && a.base_size_ == b.base_size_ &&
               a.specials_ == b.specials_;
    }

private:
    void apply_merges(std::vector<TokenId>& ids, std::size_t merge_limit) const;

    std::vector<std::string> vocab_;
    std::vector<MergeRule> merges_;
    std::unordered_map<std::uint64_t, std::uint32_t> rank_;
    std::vector<std::pair<std::string, TokenId>> specials_;
    std::size_t base_size_ = 0;
};

/// Splits text into words: every Unicode whitespace character starts a new
/// word and stays attached as its first character. Invalid UTF-8 bytes are
/// treated as single non-whitespace characters.
std::vector<std::string_view> pretokenize(std::string_view text);

/// Number of Unicode scalar values; each invalid UTF-8 byte counts as one.
std::size_t count_unicode_scalars(std::string_view text);

/// Greedy BPE: repeatedly merges the most frequent adjacent pair; ties go to
/// the lexicographically smaller left byte-string, then right.
Tokenizer train_bpe(std::span<const std::string> corpus, std::size_t num_merges,
                    const std::vector<std::string>& specials = default_specials());

/// Continues BPE training on `corpus` starting from `base`'s segmentation
/// until the vocabulary holds `target_total` ids (fewer, with a warning,
/// if the corpus runs out of pairs). Throws ParameterError when
/// target_total is below the base vocabulary size.
Tokenizer extend_vocab(const Tokenizer& base, std::span<const std::string> corpus, std::size_t target_total);

/// Origin-token decomposition of an added token: its bytes encoded with the
/// base merges only. Throws ContractError for ids that already belong to the base.
std::vector<TokenId> decompose(TokenId new_id, const Tokenizer& extended);

struct TpcReport {
    std::size_t total_tokens = 0;
    std::size_t total_characters = 0;
    double tpc = 0.0;
};

TpcReport tokens_per_character(const Tokenizer& tokenizer, std::span<const std::string> corpus);

/// Reads documents: `.jsonl`/`.ndjson` files yield each line's "text"
/// field, any other file yields one document per non-empty line.
std::vector<std::string> read_corpus(const std::filesystem::path& path);

}  // namespace upscale
