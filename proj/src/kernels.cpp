#include "upscale/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace upscale {

namespace {

void require_matrix(const Shape& s, const char* what) {
    if (s.size() != 2) {
        throw DimensionError(std::string(what) + " expects a 2-D tensor, got " + shape_string(s));
    }
}

}  // namespace

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_matrix(a.shape(), "matmul");
    require_matrix(b.shape(), "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul inner dimensions differ: " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    }
    BasicTensor<T> out({m, n});
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        T* orow = po + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = pa[i * k + p];
            const T* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

template <class T>
BasicTensor<T> matmul_bt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_matrix(a.shape(), "matmul_bt");
    require_matrix(b.shape(), "matmul_bt");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) {
        throw DimensionError("matmul_bt inner dimensions differ: " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()) + "^T");
    }
    BasicTensor<T> out({m, n});
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = pa + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = pb + j * k;
            T acc = 0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            po[i * n + j] = acc;
        }
    }
    return out;
}

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
    if (x.cols() == 0) throw DimensionError("softmax over an empty last axis");
    BasicTensor<T> out(x.shape());
    const std::size_t n = x.cols();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        auto o = out.row(r);
        const T mx = *std::max_element(in.begin(), in.end());
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = std::exp(static_cast<double>(in[j]) - static_cast<double>(mx));
            o[j] = static_cast<T>(e);
            total += e;
        }
        for (std::size_t j = 0; j < n; ++j) o[j] = static_cast<T>(static_cast<double>(o[j]) / total);
    }
    return out;
}

template <class T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& weight, double eps) {
    if (!(eps > 0.0)) throw ParameterError("rms_norm eps must be positive, got " + std::to_string(eps));
    if (weight.rank() != 1 || weight.dim(0) != x.cols()) {
        throw DimensionError("rms_norm weight " + shape_string(weight.shape()) +
                             " does not match trailing dimension of " + shape_string(x.shape()));
    }
    BasicTensor<T> out(x.shape());
    const std::size_t d = x.cols();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        auto o = out.row(r);
        double ss = 0.0;
        for (T v : in) ss += static_cast<double>(v) * static_cast<double>(v);
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
        for (std::size_t j = 0; j < d; ++j) {
            o[j] = static_cast<T>(static_cast<double>(in[j]) * inv * static_cast<double>(weight[j]));
        }
    }
    return out;
}

template <class T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
    BasicTensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = x[i];
        out[i] = v / (T{1} + std::exp(-v));
    }
    return out;
}

template <class T>
void rope_rotate(std::span<T> head, std::size_t position, double theta, bool inverse) {
    const std::size_t hd = head.size();
    const std::size_t half = hd / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
        const double angle = static_cast<double>(position) * freq;
        const double c = std::cos(angle);
        const double s = inverse ? -std::sin(angle) : std::sin(angle);
        const double x0 = head[i];
        const double x1 = head[i + half];
        head[i] = static_cast<T>(x0 * c - x1 * s);
        head[i + half] = static_cast<T>(x0 * s + x1 * c);
    }
}

template <class T>
BasicTensor<T> apply_rope(const BasicTensor<T>& x, std::span<const std::size_t> positions, double theta) {
    if (x.rank() != 3) throw DimensionError("apply_rope expects heads x seq x head_dim, got " + shape_string(x.shape()));
    if (x.dim(2) % 2 != 0) throw ValidationError("apply_rope requires an even head_dim, got " + std::to_string(x.dim(2)));
    if (positions.size() != x.dim(1)) throw DimensionError("apply_rope needs one position per sequence entry");
    if (!(theta > 0.0)) throw ParameterError("rope theta must be positive");
    BasicTensor<T> out = x;
    const std::size_t seq = x.dim(1), hd = x.dim(2);
    for (std::size_t h = 0; h < x.dim(0); ++h) {
        for (std::size_t s = 0; s < seq; ++s) {
            rope_rotate(out.data().subspan((h * seq + s) * hd, hd), positions[s], theta);
        }
    }
    return out;
}

template <class T>
double next_token_loss(const BasicTensor<T>& logits, std::span<const std::int32_t> targets) {
    const std::size_t vocab = logits.cols();
    if (logits.rows() != targets.size()) {
        throw DimensionError("next_token_loss: " + std::to_string(targets.size()) + " targets for logits " +
                             shape_string(logits.shape()));
    }
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t r = 0; r < targets.size(); ++r) {
        const std::int32_t t = targets[r];
        if (t < 0) continue;
        if (static_cast<std::size_t>(t) >= vocab) throw IdError("target id " + std::to_string(t) + " out of range");
        auto row = logits.row(r);
        double mx = -std::numeric_limits<double>::infinity();
        for (T v : row) mx = std::max(mx, static_cast<double>(v));
        double se = 0.0;
        for (T v : row) se += std::exp(static_cast<double>(v) - mx);
        total += mx + std::log(se) - static_cast<double>(row[static_cast<std::size_t>(t)]);
        ++counted;
    }
    if (counted == 0) throw ParameterError("next_token_loss: every position is padding");
    return total / static_cast<double>(counted);
}

template <class T>
void top_k_indices(std::span<const T> values, std::size_t k, std::span<std::size_t> out) {
    if (k == 0 || k > values.size() || out.size() != k) {
        throw ParameterError("top_k: k=" + std::to_string(k) + " invalid for " + std::to_string(values.size()) + " values");
    }
    // Small M: insertion into a sorted prefix keeps the tie rule explicit.
    std::size_t filled = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::size_t pos = filled;
        while (pos > 0 && values[i] > values[out[pos - 1]]) --pos;
        if (pos >= k) continue;
        const std::size_t last = std::min(filled, k - 1);
        for (std::size_t j = last; j > pos; --j) out[j] = out[j - 1];
        out[pos] = i;
        if (filled < k) ++filled;
    }
}

#define UPSCALE_INSTANTIATE(T)                                                                        \
    template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                      \
    template BasicTensor<T> matmul_bt(const BasicTensor<T>&, const BasicTensor<T>&);                   \
    template BasicTensor<T> softmax(const BasicTensor<T>&);                                            \
    template BasicTensor<T> rms_norm(const BasicTensor<T>&, const BasicTensor<T>&, double);            \
    template BasicTensor<T> silu(const BasicTensor<T>&);                                               \
    template BasicTensor<T> apply_rope(const BasicTensor<T>&, std::span<const std::size_t>, double);   \
    template void rope_rotate(std::span<T>, std::size_t, double, bool);                                \
    template double next_token_loss(const BasicTensor<T>&, std::span<const std::int32_t>);             \
    template void top_k_indices(std::span<const T>, std::size_t, std::span<std::size_t>);

UPSCALE_INSTANTIATE(float)
UPSCALE_INSTANTIATE(double)

#undef UPSCALE_INSTANTIATE

}  // namespace upscale
