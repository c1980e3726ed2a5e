#pragma once
// Straight-line double-precision evaluation of the reference transformer,
// written independently of the tape in src/. Skip wiring is evaluated
// literally: a repeated block's input is the running activation plus alpha
// times the output of the newest copy of the block before it.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <utility>
#include <vector>

#include "upscale/model.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // [position][feature]

inline Mat times(const Mat& x, const upscale::Tensor64& w) {
    const std::size_t in = w.dim(0), out = w.dim(1);
    Mat y(x.size(), Vec(out, 0.0));
    for (std::size_t r = 0; r < x.size(); ++r) {
        for (std::size_t o = 0; o < out; ++o) {
            double s = 0.0;
            for (std::size_t i = 0; i < in; ++i) s += x[r][i] * w[i * out + o];
            y[r][o] = s;
        }
    }
    return y;
}

inline Mat rms(const Mat& x, const upscale::Tensor64& w, double eps) {
    Mat y = x;
    for (auto& row : y) {
        double ss = 0.0;
        for (double v : row) ss += v * v;
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(row.size()) + eps);
        for (std::size_t i = 0; i < row.size(); ++i) row[i] = row[i] * inv * w[i];
    }
    return y;
}

inline void rotate(Mat& x, std::size_t heads, std::size_t hd, double theta) {
    const std::size_t half = hd / 2;
    for (std::size_t pos = 0; pos < x.size(); ++pos) {
        for (std::size_t h = 0; h < heads; ++h) {
            double* v = &x[pos][h * hd];
            for (std::size_t i = 0; i < half; ++i) {
                const double angle = static_cast<double>(pos) * std::pow(theta, -2.0 * static_cast<double>(i) / hd);
                const double a = v[i], b = v[i + half];
                v[i] = a * std::cos(angle) - b * std::sin(angle);
                v[i + half] = a * std::sin(angle) + b * std::cos(angle);
            }
        }
    }
}

inline Vec softmax(const Vec& z) {
    const double m = *std::max_element(z.begin(), z.end());
    Vec e(z.size());
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (e[i] = std::exp(z[i] - m));
    for (auto& v : e) v /= s;
    return e;
}

inline Mat attend(const Mat& q, const Mat& k, const Mat& v, const upscale::ModelConfig& c) {
    const std::size_t hd = c.head_dim(), group = c.n_heads / c.n_kv_heads, seq = q.size();
    Mat out(seq, Vec(c.n_heads * hd, 0.0));
    for (std::size_t h = 0; h < c.n_heads; ++h) {
        const std::size_t g = h / group;
        for (std::size_t i = 0; i < seq; ++i) {
            std::vector<std::size_t> keys;
            for (std::size_t j = 0; j <= i; ++j) {
                if (!c.sliding_window || i - j < *c.sliding_window) keys.push_back(j);
            }
            Vec scores;
            for (std::size_t j : keys) {
                double s = 0.0;
                for (std::size_t t = 0; t < hd; ++t) s += q[i][h * hd + t] * k[j][g * hd + t];
                scores.push_back(s / std::sqrt(static_cast<double>(hd)));
            }
            const Vec p = softmax(scores);
            for (std::size_t n = 0; n < keys.size(); ++n) {
                for (std::size_t t = 0; t < hd; ++t) out[i][h * hd + t] += p[n] * v[keys[n]][g * hd + t];
            }
        }
    }
    return out;
}

inline Vec ffn(const Vec& x, const upscale::BasicFfn<double>& f) {
    const Mat row{x};
    Mat gate = times(row, f.gate), up = times(row, f.up);
    for (std::size_t i = 0; i < gate[0].size(); ++i) {
        const double g = gate[0][i];
        gate[0][i] = g / (1.0 + std::exp(-g)) * up[0][i];
    }
    return times(gate, f.down)[0];
}

/// All experts are evaluated; the top-k by router logit (ties to the lower
/// index) are mixed by a softmax over their logits.
inline Vec moe(const Vec& x, const upscale::BasicLayer<double>& L, std::size_t top_k) {
    const std::size_t m = L.experts.size();
    std::vector<Vec> outs;
    for (const auto& e : L.experts) outs.push_back(ffn(x, e));
    const Vec logits = times(Mat{x}, *L.router)[0];
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
    Vec chosen;
    for (std::size_t i = 0; i < top_k; ++i) chosen.push_back(logits[idx[i]]);
    const Vec w = softmax(chosen);
    Vec y(x.size(), 0.0);
    for (std::size_t i = 0; i < top_k; ++i) {
        for (std::size_t t = 0; t < y.size(); ++t) y[t] += w[i] * outs[idx[i]][t];
    }
    return y;
}

inline Mat layer(Mat x, const upscale::BasicLayer<double>& L, const upscale::ModelConfig& c) {
    const Mat h = rms(x, L.attn_norm, c.norm_eps);
    Mat q = times(h, L.q), k = times(h, L.k);
    const Mat v = times(h, L.v);
    rotate(q, c.n_heads, c.head_dim(), c.rope_theta);
    rotate(k, c.n_kv_heads, c.head_dim(), c.rope_theta);
    const Mat a = times(attend(q, k, v, c), L.o);
    for (std::size_t r = 0; r < x.size(); ++r) {
        for (std::size_t t = 0; t < x[r].size(); ++t) x[r][t] += a[r][t];
    }
    const Mat h2 = rms(x, L.ffn_norm, c.norm_eps);
    for (std::size_t r = 0; r < x.size(); ++r) {
        const Vec f = L.router ? moe(h2[r], L, c.top_k) : ffn(h2[r], L.experts.front());
        for (std::size_t t = 0; t < x[r].size(); ++t) x[r][t] += f[t];
    }
    return x;
}

/// Logits [seq][vocab] for one sequence.
inline Mat logits(const upscale::Model64& m, const std::vector<std::int32_t>& ids) {
    const auto& c = m.config;
    Mat x;
    for (auto id : ids) {
        const auto r = m.embed.row(static_cast<std::size_t>(id));
        x.emplace_back(r.begin(), r.end());
    }
    if (!m.wiring) {
        for (const auto& L : m.layers) x = layer(x, L, c);
    } else {
        const auto& w = *m.wiring;
        std::map<std::size_t, std::size_t> max_dup;
        for (const auto& e : w.entries) max_dup[e.origin_block] = std::max(max_dup[e.origin_block], e.dup_index);
        std::map<std::pair<std::size_t, std::size_t>, Mat> output;
        output[{0, 1}] = x;
        max_dup[0] = 1;
        for (std::size_t p = 0; p < w.entries.size(); ++p) {
            const auto& e = w.entries[p];
            Mat in = x;
            if (e.dup_index >= 2) {
                const double alpha = m.alphas.at(*e.alpha_id)[0];
                const Mat& prev = output.at({e.origin_block - 1, max_dup.at(e.origin_block - 1)});
                for (std::size_t r = 0; r < in.size(); ++r) {
                    for (std::size_t t = 0; t < in[r].size(); ++t) in[r][t] += alpha * prev[r][t];
                }
            }
            for (std::size_t l = p * w.block_size; l < (p + 1) * w.block_size; ++l) in = layer(in, m.layers[l], c);
            output[{e.origin_block, e.dup_index}] = in;
            x = in;
        }
    }
    const Mat h = rms(x, m.final_norm, c.norm_eps);
    const auto& head = m.head ? *m.head : m.embed;
    Mat out(h.size(), Vec(c.vocab_size, 0.0));
    for (std::size_t r = 0; r < h.size(); ++r) {
        for (std::size_t v = 0; v < c.vocab_size; ++v) {
            double s = 0.0;
            for (std::size_t t = 0; t < c.embed_dim; ++t) s += h[r][t] * head[v * c.embed_dim + t];
            out[r][v] = s;
        }
    }
    return out;
}

/// Logits for a whole batch flattened to [batch·seq·vocab].
inline std::vector<double> batch_logits(const upscale::Model64& m, const upscale::TokenBatch& b) {
    std::vector<double> flat;
    for (std::size_t i = 0; i < b.batch; ++i) {
        std::vector<std::int32_t> ids(b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.seq),
                                      b.ids.begin() + static_cast<std::ptrdiff_t>((i + 1) * b.seq));
        for (const auto& row : logits(m, ids)) flat.insert(flat.end(), row.begin(), row.end());
    }
    return flat;
}

}  // namespace oracle
