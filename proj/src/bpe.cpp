#include "upscale/bpe.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "json.hpp"
#include "upscale/checkpoint.hpp"
#include "upscale/error.hpp"
#include "upscale/log.hpp"

namespace upscale {

using json = nlohmann::json;

namespace {

constexpr std::uint32_t kTokenizerVersion = 1;

std::uint64_t pair_key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

// Length of the UTF-8 sequence starting at text[i], or 0 if it is invalid.
std::size_t utf8_length(std::string_view text, std::size_t i, char32_t& cp) {
    const auto b0 = static_cast<unsigned char>(text[i]);
    std::size_t len = 0;
    if (b0 < 0x80) {
        cp = b0;
        return 1;
    } else if ((b0 & 0xE0) == 0xC0) {
        len = 2;
        cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
        len = 3;
        cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
        len = 4;
        cp = b0 & 0x07;
    } else {
        return 0;
    }
    if (i + len > text.size()) return 0;
    for (std::size_t k = 1; k < len; ++k) {
        const auto b = static_cast<unsigned char>(text[i + k]);
        if ((b & 0xC0) != 0x80) return 0;
        cp = (cp << 6) | (b & 0x3F);
    }
    // Reject overlong forms, surrogates and values past U+10FFFF.
    if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) || cp > 0x10FFFF ||
        (cp >= 0xD800 && cp <= 0xDFFF)) {
        return 0;
    }
    return len;
}

bool is_unicode_space(char32_t c) {
    switch (c) {
        case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20:
        case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
        case 0x202F: case 0x205F: case 0x3000:
            return true;
        default:
            return c >= 0x2000 && c <= 0x200A;
    }
}

std::string to_hex(const std::string& bytes) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(bytes.size() * 2);
    for (unsigned char b : bytes) {
        out.push_back(digits[b >> 4]);
        out.push_back(digits[b & 15]);
    }
    return out;
}

std::string from_hex(const std::string& hex) {
    auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        return -1;
    };
    if (hex.size() % 2 != 0) throw ValidationError("tokenizer vocab entry has odd hex length");
    std::string out;
    for (std::size_t i = 0; i < hex.size(); i += 2) {
        const int hi = nibble(hex[i]), lo = nibble(hex[i + 1]);
        if (hi < 0 || lo < 0) throw ValidationError("tokenizer vocab entry is not hex: " + hex);
        out.push_back(static_cast<char>(hi * 16 + lo));
    }
    return out;
}

// Shared greedy learner used by both training from scratch and extension.
struct Word {
    std::vector<TokenId> ids;
    std::int64_t count = 0;
};

std::vector<Word> collect_words(std::span<const std::string> corpus, const Tokenizer& start) {
    std::map<std::string_view, std::int64_t> counts;
    for (const auto& doc : corpus) {
        for (auto w : pretokenize(doc)) ++counts[w];
    }
    std::vector<Word> words;
    words.reserve(counts.size());
    for (const auto& [w, c] : counts) words.push_back({start.encode_word(w, start.num_merges()), c});
    return words;
}

// Returns false when no adjacent pair is left.
bool learn_one_merge(std::vector<Word>& words, Tokenizer& tok) {
    std::unordered_map<std::uint64_t, std::int64_t> counts;
    for (const auto& w : words) {
        for (std::size_t i = 0; i + 1 < w.ids.size(); ++i) counts[pair_key(w.ids[i], w.ids[i + 1])] += w.count;
    }
    if (counts.empty()) return false;
    std::uint64_t best = 0;
    std::int64_t best_count = -1;
    for (const auto& [key, c] : counts) {
        if (c < best_count) continue;
        if (c > best_count) {
            best = key;
            best_count = c;
            continue;
        }
        const auto l = static_cast<TokenId>(key >> 32), r = static_cast<TokenId>(key & 0xffffffffu);
        const auto bl = static_cast<TokenId>(best >> 32), br = static_cast<TokenId>(best & 0xffffffffu);
        const auto& ls = tok.token_bytes(l);
        const auto& bls = tok.token_bytes(bl);
        int cmp = ls.compare(bls);
        if (cmp == 0) cmp = tok.token_bytes(r).compare(tok.token_bytes(br));
        if (cmp < 0 || (cmp == 0 && key < best)) best = key;
    }
    const auto left = static_cast<TokenId>(best >> 32), right = static_cast<TokenId>(best & 0xffffffffu);
    const TokenId merged = tok.add_merge(left, right);
    for (auto& w : words) {
        if (w.ids.size() < 2) continue;
        std::size_t out = 0;
        for (std::size_t i = 0; i < w.ids.size();) {
            if (i + 1 < w.ids.size() && w.ids[i] == left && w.ids[i + 1] == right) {
                w.ids[out++] = merged;
                i += 2;
            } else {
                w.ids[out++] = w.ids[i++];
            }
        }
        w.ids.resize(out);
    }
    return true;
}

}  // namespace

std::vector<std::string> default_specials() { return {kPadToken, kEosToken}; }

Tokenizer Tokenizer::byte_level(const std::vector<std::string>& specials) {
    Tokenizer t;
    t.vocab_.reserve(256 + specials.size());
    for (int b = 0; b < 256; ++b) t.vocab_.emplace_back(1, static_cast<char>(b));
    std::set<std::string> seen;
    for (const auto& name : specials) {
        if (name.empty() || !seen.insert(name).second) throw ParameterError("special token names must be unique and non-empty");
        t.specials_.emplace_back(name, static_cast<TokenId>(t.vocab_.size()));
        t.vocab_.push_back(name);
    }
    return t;
}

std::size_t Tokenizer::merges_below(std::size_t id_limit) const {
    const auto first = static_cast<std::size_t>(first_merge_id());
    if (id_limit <= first) return 0;
    return std::min(merges_.size(), id_limit - first);
}

const std::string& Tokenizer::token_bytes(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
        throw IdError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab_.size()));
    }
    return vocab_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Tokenizer::special_id(std::string_view name) const {
    for (const auto& [n, id] : specials_) {
        if (n == name) return id;
    }
    return std::nullopt;
}

bool Tokenizer::is_special(TokenId id) const noexcept {
    return id >= 256 && id < first_merge_id();
}

TokenId Tokenizer::add_merge(TokenId left, TokenId right) {
    const auto& l = token_bytes(left);
    const auto& r = token_bytes(right);
    if (is_special(left) || is_special(right)) throw ContractError("special tokens cannot take part in merges");
    const auto key = pair_key(left, right);
    if (rank_.contains(key)) throw ContractError("merge (" + std::to_string(left) + "," + std::to_string(right) + ") already exists");
    rank_.emplace(key, static_cast<std::uint32_t>(merges_.size()));
    merges_.push_back({left, right});
    vocab_.push_back(l + r);
    return static_cast<TokenId>(vocab_.size() - 1);
}

void Tokenizer::apply_merges(std::vector<TokenId>& ids, std::size_t merge_limit) const {
    while (ids.size() > 1) {
        std::uint32_t best = UINT32_MAX;
        for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
            const auto it = rank_.find(pair_key(ids[i], ids[i + 1]));
            if (it != rank_.end() && it->second < merge_limit && it->second < best) best = it->second;
        }
        if (best == UINT32_MAX) break;
        // Merging every non-overlapping occurrence left to right is the same
        // as repeatedly merging the leftmost one: pairs that involve the new
        // token always rank higher than the merge that produced it.
        const auto [left, right] = merges_[best];
        const TokenId merged = first_merge_id() + static_cast<TokenId>(best);
        std::size_t out = 0;
        for (std::size_t i = 0; i < ids.size();) {
            if (i + 1 < ids.size() && ids[i] == left && ids[i + 1] == right) {
                ids[out++] = merged;
                i += 2;
            } else {
                ids[out++] = ids[i++];
            }
        }
        ids.resize(out);
    }
}

std::vector<TokenId> Tokenizer::encode_word(std::string_view bytes, std::size_t merge_limit) const {
    std::vector<TokenId> ids;
    ids.reserve(bytes.size());
    for (unsigned char b : bytes) ids.push_back(static_cast<TokenId>(b));
    apply_merges(ids, merge_limit);
    return ids;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
    std::vector<TokenId> out;
    for (auto word : pretokenize(text)) {
        const auto ids = encode_word(word, merges_.size());
        out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) out += token_bytes(id);
    return out;
}

std::string Tokenizer::to_json() const {
    json specials = json::object();
    for (const auto& [name, id] : specials_) specials[name] = id;
    json vocab = json::array();
    for (const auto& v : vocab_) vocab.push_back(to_hex(v));
    json merges = json::array();
    for (const auto& m : merges_) merges.push_back({m.left, m.right});
    json j = {{"version", kTokenizerVersion},
              {"base_size", base_size_},
              {"specials", specials},
              {"vocab", vocab},
              {"merges", merges}};
    return j.dump() + "\n";
}

Tokenizer Tokenizer::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("tokenizer file is not valid JSON: ") + e.what());
    }
    try {
        for (const auto& [key, _] : j.items()) {
            if (key != "version" && key != "base_size" && key != "specials" && key != "vocab" && key != "merges") {
                throw ValidationError("tokenizer file has unknown field '" + key + "'");
            }
        }
        if (j.at("version").get<std::uint32_t>() != kTokenizerVersion) {
            throw ValidationError("unsupported tokenizer version " + j.at("version").dump());
        }
        std::vector<std::pair<TokenId, std::string>> by_id;
        for (const auto& [name, id] : j.at("specials").items()) by_id.emplace_back(id.get<TokenId>(), name);
        std::sort(by_id.begin(), by_id.end());
        std::vector<std::string> names;
        for (std::size_t i = 0; i < by_id.size(); ++i) {
            if (by_id[i].first != static_cast<TokenId>(256 + i)) throw ValidationError("special ids must follow the 256 byte ids densely");
            names.push_back(by_id[i].second);
        }
        Tokenizer t = byte_level(names);
        const auto& vocab = j.at("vocab");
        for (const auto& m : j.at("merges")) {
            if (!m.is_array() || m.size() != 2) throw ValidationError("merge entries must be [left, right] pairs");
            t.add_merge(m[0].get<TokenId>(), m[1].get<TokenId>());
        }
        if (vocab.size() != t.vocab_.size()) {
            throw ValidationError("tokenizer vocab has " + std::to_string(vocab.size()) + " entries, merges imply " +
                                  std::to_string(t.vocab_.size()));
        }
        for (std::size_t i = 0; i < vocab.size(); ++i) {
            if (from_hex(vocab[i].get<std::string>()) != t.vocab_[i]) {
                throw ValidationError("tokenizer vocab entry " + std::to_string(i) + " disagrees with its merge");
            }
        }
        const auto base = j.at("base_size").get<std::size_t>();
        if (base > t.vocab_size()) throw ValidationError("tokenizer base_size exceeds vocabulary size");
        t.base_size_ = base;
        return t;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed tokenizer file: ") + e.what());
    } catch (const IdError& e) {
        throw ValidationError(std::string("malformed tokenizer file: ") + e.what());
    } catch (const ContractError& e) {
        throw ValidationError(std::string("malformed tokenizer file: ") + e.what());
    }
}

void Tokenizer::save(const std::filesystem::path& path) const { write_text_atomic(path, to_json()); }

Tokenizer Tokenizer::load(const std::filesystem::path& path) { return from_json(read_text_file(path)); }

std::vector<std::string_view> pretokenize(std::string_view text) {
    std::vector<std::string_view> words;
    std::size_t start = 0;
    for (std::size_t i = 0; i < text.size();) {
        char32_t cp = 0;
        std::size_t len = utf8_length(text, i, cp);
        const bool space = len != 0 && is_unicode_space(cp);
        if (len == 0) len = 1;
        if (space && i > start) {
            words.push_back(text.substr(start, i - start));
            start = i;
        }
        i += len;
    }
    if (start < text.size()) words.push_back(text.substr(start));
    return words;
}

std::size_t count_unicode_scalars(std::string_view text) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < text.size(); ++n) {
        char32_t cp = 0;
        const std::size_t len = utf8_length(text, i, cp);
        i += len == 0 ? 1 : len;
    }
    return n;
}

Tokenizer train_bpe(std::span<const std::string> corpus, std::size_t num_merges, const std::vector<std::string>& specials) {
    Tokenizer tok = Tokenizer::byte_level(specials);
    auto words = collect_words(corpus, tok);
    for (std::size_t m = 0; m < num_merges; ++m) {
        if (!learn_one_merge(words, tok)) {
            log::warn("train_bpe: corpus ran out of pairs after {} of {} merges", m, num_merges);
            break;
        }
    }
    return tok;
}

Tokenizer extend_vocab(const Tokenizer& base, std::span<const std::string> corpus, std::size_t target_total) {
    if (target_total < base.vocab_size()) {
        throw ParameterError("target vocabulary " + std::to_string(target_total) + " is smaller than the base vocabulary " +
                             std::to_string(base.vocab_size()));
    }
    Tokenizer tok = base;
    tok.set_base_size(base.vocab_size());
    auto words = collect_words(corpus, tok);
    while (tok.vocab_size() < target_total) {
        if (!learn_one_merge(words, tok)) {
            log::warn("extend_vocab: corpus exhausted after {} new tokens ({} requested)",
                      tok.vocab_size() - base.vocab_size(), target_total - base.vocab_size());
            break;
        }
    }
    return tok;
}

std::vector<TokenId> decompose(TokenId new_id, const Tokenizer& extended) {
    if (new_id < 0 || static_cast<std::size_t>(new_id) < extended.base_size()) {
        throw ContractError("token " + std::to_string(new_id) + " is already an origin token (base_size " +
                            std::to_string(extended.base_size()) + ")");
    }
    const auto& bytes = extended.token_bytes(new_id);
    return extended.encode_word(bytes, extended.merges_below(extended.base_size()));
}

TpcReport tokens_per_character(const Tokenizer& tokenizer, std::span<const std::string> corpus) {
    TpcReport r;
    for (const auto& doc : corpus) {
        r.total_tokens += tokenizer.encode(doc).size();
        r.total_characters += count_unicode_scalars(doc);
    }
    if (r.total_characters == 0) throw ParameterError("tokens_per_character needs a non-empty corpus");
    r.tpc = static_cast<double>(r.total_tokens) / static_cast<double>(r.total_characters);
    return r;
}

std::vector<std::string> read_corpus(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    const auto ext = path.extension().string();
    const bool jsonl = ext == ".jsonl" || ext == ".ndjson";
    std::vector<std::string> docs;
    std::size_t line_no = 0;
    for (std::size_t pos = 0; pos <= text.size();) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(pos, end - pos);
        ++line_no;
        pos = end + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!jsonl) {
            docs.push_back(std::move(line));
            continue;
        }
        try {
            const auto j = json::parse(line);
            docs.push_back(j.at("text").get<std::string>());
        } catch (const json::exception& e) {
            throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": expected a JSON object with a \"text\" string");
        }
    }
    return docs;
}

}  // namespace upscale
