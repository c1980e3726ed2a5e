#pragma once

// Value-level numeric kernels. The autodiff ops in graph.hpp call into these
// for their forward pass, so every model computation goes through one code path.

#include <cstdint>
#include <optional>
#include <span>

#include "upscale/tensor.hpp"

namespace upscale {

/// Standard 2-D product a[m×k] · b[k×n]. Throws DimensionError naming both
/// shapes when the inner extents differ.
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// a[m×k] · b[n×k]ᵀ, used for the output head so that it can share the
/// row-per-token layout of the embedding table.
template <class T>
BasicTensor<T> matmul_bt(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Softmax along the last axis with max subtraction.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x);

/// y = x / sqrt(mean(x²) + eps) · weight over the last axis. eps must be > 0.
template <class T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& weight, double eps);

template <class T>
BasicTensor<T> silu(const BasicTensor<T>& x);

/// Rotary embedding on x[heads×seq×head_dim] using the half-split pairing
/// (i, i + head_dim/2) and frequencies theta^(-2i/head_dim).
template <class T>
BasicTensor<T> apply_rope(const BasicTensor<T>& x, std::span<const std::size_t> positions,
                          double theta);

/// Rotate one head vector in place; `inverse` applies the transpose rotation.
template <class T>
void rope_rotate(std::span<T> head, std::size_t position, double theta, bool inverse = false);

/// Mean next-token cross-entropy in nats. logits is [N×V] (or [B×S×V]),
/// targets has N entries; negative targets are padding and are skipped.
/// Throws ParameterError when every position is padding.
template <class T>
double next_token_loss(const BasicTensor<T>& logits, std::span<const std::int32_t> targets);

/// Indices of the k largest entries in descending order; ties resolve to the
/// lower index.
template <class T>
void top_k_indices(std::span<const T> values, std::size_t k, std::span<std::size_t> out);

}  // namespace upscale
