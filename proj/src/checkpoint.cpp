#include "upscale/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <unistd.h>

#include "json.hpp"

namespace upscale {

using json = nlohmann::json;

namespace {

constexpr std::size_t kPrefixBytes = 16;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

template <class T, class Bits>
void put_values(std::vector<std::uint8_t>& out, std::span<const T> values) {
    for (T v : values) {
        const auto bits = std::bit_cast<Bits>(v);
        for (std::size_t i = 0; i < sizeof(Bits); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
}

template <class T, class Bits>
std::vector<T> get_values(const std::uint8_t* p, std::size_t count) {
    std::vector<T> out(count);
    for (std::size_t n = 0; n < count; ++n) {
        Bits bits = 0;
        for (std::size_t i = 0; i < sizeof(Bits); ++i) bits |= static_cast<Bits>(p[n * sizeof(Bits) + i]) << (8 * i);
        out[n] = std::bit_cast<T>(bits);
    }
    return out;
}

std::size_t width(DType d) { return d == DType::F32 ? 4 : 8; }

struct Entry {
    std::string name;
    DType dtype;
    Shape shape;
    std::uint64_t offset;
    std::uint64_t nbytes;
};

Entry parse_entry(const std::string& name, const json& j) {
    if (!j.is_object()) throw FormatError(FormatCode::BadEntry, "entry '" + name + "' is not an object");
    for (const auto& [key, _] : j.items()) {
        if (key != "dtype" && key != "shape" && key != "offset" && key != "nbytes") {
            throw FormatError(FormatCode::BadEntry, "entry '" + name + "' has unknown field '" + key + "'");
        }
    }
    Entry e{name, DType::F32, {}, 0, 0};
    const auto dt = j.find("dtype");
    if (dt == j.end() || !dt->is_string()) throw FormatError(FormatCode::BadEntry, "entry '" + name + "' lacks dtype");
    if (*dt == "f32") {
        e.dtype = DType::F32;
    } else if (*dt == "f64") {
        e.dtype = DType::F64;
    } else {
        throw FormatError(FormatCode::BadEntry, "entry '" + name + "' has unsupported dtype " + dt->dump());
    }
    const auto sh = j.find("shape");
    if (sh == j.end() || !sh->is_array() || sh->empty()) {
        throw FormatError(FormatCode::BadEntry, "entry '" + name + "' needs a non-empty shape array");
    }
    for (const auto& d : *sh) {
        if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0) {
            throw FormatError(FormatCode::BadEntry, "entry '" + name + "' has a non-positive extent");
        }
        e.shape.push_back(d.get<std::size_t>());
    }
    for (const char* key : {"offset", "nbytes"}) {
        const auto it = j.find(key);
        if (it == j.end() || !it->is_number_unsigned()) {
            throw FormatError(FormatCode::BadEntry, "entry '" + name + "' needs an unsigned " + key);
        }
    }
    e.offset = j["offset"].get<std::uint64_t>();
    e.nbytes = j["nbytes"].get<std::uint64_t>();
    std::uint64_t count = 1;
    for (std::size_t d : e.shape) {
        if (count > std::numeric_limits<std::uint64_t>::max() / d) {
            throw FormatError(FormatCode::SizeMismatch, "entry '" + name + "' element count overflows");
        }
        count *= d;
    }
    if (count > std::numeric_limits<std::uint64_t>::max() / width(e.dtype) || count * width(e.dtype) != e.nbytes) {
        throw FormatError(FormatCode::SizeMismatch, "entry '" + name + "' declares " + std::to_string(e.nbytes) +
                                                        " bytes for shape " + shape_string(e.shape));
    }
    return e;
}

}  // namespace

DType dtype_of(const AnyTensor& t) { return std::holds_alternative<Tensor>(t) ? DType::F32 : DType::F64; }

const Shape& shape_of(const AnyTensor& t) {
    return std::visit([](const auto& x) -> const Shape& { return x.shape(); }, t);
}

std::vector<std::uint8_t> encode_container(const TensorList& tensors) {
    std::vector<const NamedTensor*> order;
    std::set<std::string> seen;
    for (const auto& t : tensors) {
        if (t.name.empty()) throw ContractError("container tensor names must be non-empty");
        if (!seen.insert(t.name).second) throw ContractError("duplicate tensor name '" + t.name + "'");
        const bool finite = std::visit([](const auto& x) { return x.all_finite(); }, t.tensor);
        if (!finite) throw ContractError("tensor '" + t.name + "' holds non-finite values");
        order.push_back(&t);
    }
    std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) { return a->name < b->name; });

    json header = json::object();
    std::uint64_t offset = 0;
    for (const auto* t : order) {
        const DType dt = dtype_of(t->tensor);
        const auto& shape = shape_of(t->tensor);
        const std::uint64_t nbytes = element_count(shape) * width(dt);
        header[t->name] = {{"dtype", dt == DType::F32 ? "f32" : "f64"},
                           {"shape", shape},
                           {"offset", offset},
                           {"nbytes", nbytes}};
        offset += nbytes;
    }
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(kPrefixBytes + text.size() + offset);
    out.insert(out.end(), std::begin(kContainerMagic), std::end(kContainerMagic));
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto* t : order) {
        if (const auto* f = std::get_if<Tensor>(&t->tensor)) {
            put_values<float, std::uint32_t>(out, f->data());
        } else {
            put_values<double, std::uint64_t>(out, std::get<Tensor64>(t->tensor).data());
        }
    }
    return out;
}

TensorMap decode_container(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < sizeof(kContainerMagic) ||
        std::memcmp(bytes.data(), kContainerMagic, sizeof(kContainerMagic)) != 0) {
        throw FormatError(FormatCode::BadMagic, "missing UPSK1 prefix");
    }
    if (bytes.size() < kPrefixBytes) throw FormatError(FormatCode::BadHeaderLength, "file ends inside the prefix");
    const std::uint64_t hlen = get_u64(bytes.data() + 8);
    if (hlen > bytes.size() - kPrefixBytes) {
        throw FormatError(FormatCode::BadHeaderLength,
                          "header length " + std::to_string(hlen) + " exceeds file size " + std::to_string(bytes.size()));
    }
    json header;
    try {
        header = json::parse(bytes.begin() + kPrefixBytes, bytes.begin() + kPrefixBytes + static_cast<std::ptrdiff_t>(hlen));
    } catch (const json::exception& e) {
        throw FormatError(FormatCode::BadJson, e.what());
    }
    if (!header.is_object()) throw FormatError(FormatCode::BadJson, "header is not a JSON object");

    std::vector<Entry> entries;
    for (const auto& [name, value] : header.items()) {
        if (name.empty()) throw FormatError(FormatCode::BadEntry, "empty tensor name");
        entries.push_back(parse_entry(name, value));
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        return a.offset != b.offset ? a.offset < b.offset : a.nbytes < b.nbytes;
    });
    std::uint64_t expected = 0;
    for (const auto& e : entries) {
        if (e.offset < expected) {
            throw FormatError(FormatCode::Overlap, "tensor '" + e.name + "' at offset " + std::to_string(e.offset) +
                                                       " overlaps the previous range ending at " + std::to_string(expected));
        }
        if (e.offset > expected) {
            throw FormatError(FormatCode::Gap, "unused payload bytes before tensor '" + e.name + "'");
        }
        if (e.nbytes > std::numeric_limits<std::uint64_t>::max() - e.offset) {
            throw FormatError(FormatCode::SizeMismatch, "tensor '" + e.name + "' range overflows");
        }
        expected = e.offset + e.nbytes;
    }
    // Nothing is allocated until the declared total is known to fit in the file.
    const std::uint64_t payload = bytes.size() - kPrefixBytes - hlen;
    if (payload < expected) {
        throw FormatError(FormatCode::Truncated, "payload holds " + std::to_string(payload) + " bytes, header declares " +
                                                     std::to_string(expected));
    }
    if (payload > expected) {
        throw FormatError(FormatCode::TrailingBytes, std::to_string(payload - expected) + " bytes past the last tensor");
    }

    const std::uint8_t* base = bytes.data() + kPrefixBytes + hlen;
    TensorMap out;
    for (const auto& e : entries) {
        const std::size_t count = element_count(e.shape);
        if (e.dtype == DType::F32) {
            out.emplace(e.name, Tensor(e.shape, get_values<float, std::uint32_t>(base + e.offset, count)));
        } else {
            out.emplace(e.name, Tensor64(e.shape, get_values<double, std::uint64_t>(base + e.offset, count)));
        }
    }
    return out;
}

void save_container(const TensorList& tensors, const std::filesystem::path& path) {
    write_file_atomic(path, encode_container(tensors));
}

void save_container(const TensorMap& tensors, const std::filesystem::path& path) {
    TensorList list;
    list.reserve(tensors.size());
    for (const auto& [name, t] : tensors) list.push_back({name, t});
    save_container(list, path);
}

TensorMap load_container(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return decode_container(bytes);
    } catch (const FormatError& e) {
        throw FormatError(e.code(), path.string() + ": " + std::string(e.what()).substr(std::strlen(to_string(e.code())) + 2));
    }
}

const Tensor& get_f32(const TensorMap& map, const std::string& name) {
    const auto it = map.find(name);
    if (it == map.end()) throw ContractError("container has no tensor '" + name + "'");
    const auto* t = std::get_if<Tensor>(&it->second);
    if (!t) throw ContractError("tensor '" + name + "' is not f32");
    return *t;
}

const Tensor64& get_f64(const TensorMap& map, const std::string& name) {
    const auto it = map.find(name);
    if (it == map.end()) throw ContractError("container has no tensor '" + name + "'");
    const auto* t = std::get_if<Tensor64>(&it->second);
    if (!t) throw ContractError("tensor '" + name + "' is not f64");
    return *t;
}

std::string config_to_json(const ModelConfig& c) {
    validate(c);
    json j = {
        {"format_version", kConfigFormatVersion},
        {"vocab_size", c.vocab_size},
        {"embed_dim", c.embed_dim},
        {"intermediate_dim", c.intermediate_dim},
        {"n_layers", c.n_layers},
        {"n_heads", c.n_heads},
        {"n_kv_heads", c.n_kv_heads},
        {"n_experts", c.n_experts},
        {"top_k", c.top_k},
        {"rope_theta", c.rope_theta},
        {"sliding_window", c.sliding_window ? json(*c.sliding_window) : json(nullptr)},
        {"ctx_len", c.ctx_len},
        {"tie_embeddings", c.tie_embeddings},
        {"norm_eps", c.norm_eps},
    };
    return j.dump(2) + "\n";
}

ModelConfig config_from_json(const std::string& text, std::span<const std::string> extra_allowed) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ValidationError("config must be a JSON object");
    static const std::set<std::string> known = {
        "format_version", "vocab_size", "embed_dim", "intermediate_dim", "n_layers", "n_heads", "n_kv_heads",
        "n_experts",      "top_k",      "rope_theta", "sliding_window", "ctx_len",  "tie_embeddings", "norm_eps"};
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key) && std::find(extra_allowed.begin(), extra_allowed.end(), key) == extra_allowed.end()) {
            throw ValidationError("config has unknown field '" + key + "'");
        }
    }
    const auto ver = j.find("format_version");
    if (ver == j.end() || !ver->is_number_unsigned()) throw ValidationError("config lacks format_version");
    if (ver->get<std::uint64_t>() != kConfigFormatVersion) {
        throw ValidationError("config format_version " + ver->dump() + " is not supported (expected " +
                              std::to_string(kConfigFormatVersion) + ")");
    }
    auto count = [&](const char* key) -> std::size_t {
        const auto it = j.find(key);
        if (it == j.end()) throw ValidationError(std::string("config field '") + key + "' is missing");
        if (!it->is_number_unsigned()) throw ValidationError(std::string("config field '") + key + "' must be a non-negative integer");
        return it->get<std::size_t>();
    };
    auto real = [&](const char* key) -> double {
        const auto it = j.find(key);
        if (it == j.end() || !it->is_number()) throw ValidationError(std::string("config field '") + key + "' must be a number");
        return it->get<double>();
    };
    ModelConfig c;
    c.vocab_size = count("vocab_size");
    c.embed_dim = count("embed_dim");
    c.intermediate_dim = count("intermediate_dim");
    c.n_layers = count("n_layers");
    c.n_heads = count("n_heads");
    c.n_kv_heads = count("n_kv_heads");
    c.n_experts = count("n_experts");
    c.top_k = count("top_k");
    c.rope_theta = real("rope_theta");
    c.ctx_len = count("ctx_len");
    c.norm_eps = real("norm_eps");
    const auto win = j.find("sliding_window");
    if (win == j.end()) throw ValidationError("config field 'sliding_window' is missing");
    if (!win->is_null()) {
        if (!win->is_number_unsigned()) throw ValidationError("config field 'sliding_window' must be null or a count");
        c.sliding_window = win->get<std::size_t>();
    }
    const auto tie = j.find("tie_embeddings");
    if (tie == j.end() || !tie->is_boolean()) throw ValidationError("config field 'tie_embeddings' must be a boolean");
    c.tie_embeddings = tie->get<bool>();
    validate(c);
    return c;
}

void save_config(const ModelConfig& config, const std::filesystem::path& path) {
    write_text_atomic(path, config_to_json(config));
}

ModelConfig load_config(const std::filesystem::path& path) {
    static const std::string wiring_key = "skip_wiring";
    return config_from_json(read_text_file(path), std::span<const std::string>(&wiring_key, 1));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = in.tellg();
    if (size < 0) throw IoError("cannot size " + path.string());
    in.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> out(static_cast<std::size_t>(size));
    if (!out.empty() && !in.read(reinterpret_cast<char*>(out.data()), size)) {
        throw IoError("short read on " + path.string());
    }
    return out;
}

std::string read_text_file(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    auto tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot move temporary file onto " + path.string());
    }
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace upscale
