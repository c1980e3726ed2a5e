#pragma once

// Named-tensor container files.
//
// Layout (all integers little-endian):
//   bytes 0..7    magic "UPSK1\0\0\0"
//   bytes 8..15   u64 header length H
//   next H bytes  UTF-8 JSON object: name -> {dtype, shape, offset, nbytes}
//   remainder     payload; tensor ranges are contiguous, ascending, gap-free
//
// Offsets are relative to the start of the payload.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "upscale/config.hpp"
#include "upscale/tensor.hpp"

namespace upscale {

enum class DType { F32, F64 };

using AnyTensor = std::variant<Tensor, Tensor64>;

struct NamedTensor {
    std::string name;
    AnyTensor tensor;
};

using TensorList = std::vector<NamedTensor>;
using TensorMap = std::map<std::string, AnyTensor>;

inline constexpr char kContainerMagic[8] = {'U', 'P', 'S', 'K', '1', '\0', '\0', '\0'};
inline constexpr std::uint32_t kConfigFormatVersion = 1;

DType dtype_of(const AnyTensor& t);
const Shape& shape_of(const AnyTensor& t);

/// Serializes to the in-memory byte image. Throws ContractError on empty or
/// duplicate names and on non-finite values.
std::vector<std::uint8_t> encode_container(const TensorList& tensors);

/// Parses and validates a byte image; see FormatCode for the failure classes.
TensorMap decode_container(std::span<const std::uint8_t> bytes);

/// Atomic write (temporary file + rename). Tensors are stored in name order.
void save_container(const TensorList& tensors, const std::filesystem::path& path);
void save_container(const TensorMap& tensors, const std::filesystem::path& path);
TensorMap load_container(const std::filesystem::path& path);

// Typed accessors for loaded maps; throw ContractError when the entry is
// missing or stored with the other dtype.
const Tensor& get_f32(const TensorMap& map, const std::string& name);
const Tensor64& get_f64(const TensorMap& map, const std::string& name);

std::string config_to_json(const ModelConfig& config);
/// Rejects unknown fields, a missing or different format_version, and
/// invalid configs. `extra_allowed` names additional top-level keys the
/// caller handles itself.
ModelConfig config_from_json(const std::string& text, std::span<const std::string> extra_allowed = {});

void save_config(const ModelConfig& config, const std::filesystem::path& path);
ModelConfig load_config(const std::filesystem::path& path);

// Small file helpers shared by the other modules.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
std::string read_text_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace upscale
