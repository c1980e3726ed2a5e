#include "upscale/graph.hpp"

#include <cmath>
#include <limits>
#include <memory>

#include "upscale/kernels.hpp"

namespace upscale {

const char* to_string(OpKind kind) {
    switch (kind) {
        case OpKind::Leaf: return "leaf";
        case OpKind::MatMul: return "matmul";
        case OpKind::MatMulBT: return "matmul_bt";
        case OpKind::Add: return "add";
        case OpKind::AddScaled: return "add_scaled";
        case OpKind::Mul: return "mul";
        case OpKind::Silu: return "silu";
        case OpKind::Softmax: return "softmax";
        case OpKind::RmsNorm: return "rms_norm";
        case OpKind::Embedding: return "embedding";
        case OpKind::Rope: return "rope";
        case OpKind::Attention: return "attention";
        case OpKind::TopKSoftmax: return "top_k_softmax";
        case OpKind::ScaleByColumn: return "scale_by_column";
        case OpKind::CrossEntropy: return "cross_entropy";
        case OpKind::Sum: return "sum";
    }
    return "?";
}

template <class T>
Var Graph<T>::leaf(BasicTensor<T> value, bool requires_grad) {
    Node n;
    n.kind = OpKind::Leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

template <class T>
Var Graph<T>::record(OpKind kind, std::vector<std::size_t> inputs, BasicTensor<T> value, Backward fn) {
    Node n;
    n.kind = kind;
    n.requires_grad = false;
    for (std::size_t i : inputs) {
        if (i >= nodes_.size()) throw ContractError("graph input refers to a later node");
        n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
    }
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

template <class T>
const BasicTensor<T>& Graph<T>::grad(Var v) const {
    if (grads_.size() != nodes_.size() || v.id >= grads_.size()) {
        throw ContractError("gradient requested before backward() covered this node");
    }
    return grads_[v.id];
}

template <class T>
void Graph<T>::backward(Var loss) {
    const auto& lv = nodes_.at(loss.id).value;
    if (lv.size() != 1) throw ContractError("backward needs a scalar loss, got shape " + shape_string(lv.shape()));
    grads_.clear();
    grads_.reserve(nodes_.size());
    for (const auto& n : nodes_) grads_.emplace_back(n.value.shape());
    grads_[loss.id][0] = T{1};
    visits_ = 0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        auto& n = nodes_[i];
        ++visits_;
        if (n.requires_grad && n.backward) n.backward(*this, i);
    }
    // Nodes recorded after the loss cannot influence it; they keep zero
    // gradients but still count as visited.
    visits_ += nodes_.size() - loss.id - 1;
}

template class Graph<float>;
template class Graph<double>;

namespace ops {

namespace {

template <class T>
void accumulate(BasicTensor<T>& dst, const BasicTensor<T>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) throw DimensionError(std::string(op) + " shape mismatch: " + shape_string(a) + " vs " + shape_string(b));
}

}  // namespace

template <class T>
Var matmul(Graph<T>& g, Var a, Var b) {
    auto out = upscale::matmul(g.value(a), g.value(b));
    return g.record(OpKind::MatMul, {a.id, b.id}, std::move(out), [a, b](Graph<T>& gr, std::size_t self) {
        const auto& go = gr.grad_buffer(self);
        const auto& av = gr.node_value(a.id);
        const auto& bv = gr.node_value(b.id);
        const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
        if (gr.node_requires_grad(a.id)) {
            // dA = dO · Bᵀ
            auto& ga = gr.grad_buffer(a.id);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    T acc = 0;
                    for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * bv[p * n + j];
                    ga[i * k + p] += acc;
                }
            }
        }
        if (gr.node_requires_grad(b.id)) {
            // dB = Aᵀ · dO
            auto& gb = gr.grad_buffer(b.id);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const T av_ip = av[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av_ip * go[i * n + j];
                }
            }
        }
    });
}

template <class T>
Var matmul_bt(Graph<T>& g, Var a, Var b) {
    auto out = upscale::matmul_bt(g.value(a), g.value(b));
    return g.record(OpKind::MatMulBT, {a.id, b.id}, std::move(out), [a, b](Graph<T>& gr, std::size_t self) {
        const auto& go = gr.grad_buffer(self);
        const auto& av = gr.node_value(a.id);
        const auto& bv = gr.node_value(b.id);
        const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
        if (gr.node_requires_grad(a.id)) {
            // dA = dO · B
            auto& ga = gr.grad_buffer(a.id);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const T gij = go[i * n + j];
                    for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gij * bv[j * k + p];
                }
            }
        }
        if (gr.node_requires_grad(b.id)) {
            // dB = dOᵀ · A
            auto& gb = gr.grad_buffer(b.id);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const T gij = go[i * n + j];
                    for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += gij * av[i * k + p];
                }
            }
        }
    });
}

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
    require_same_shape(g.value(a).shape(), g.value(b).shape(), "add");
    BasicTensor<T> out = g.value(a);
    accumulate(out, g.value(b));
    return g.record(OpKind::Add, {a.id, b.id}, std::move(out), [a, b](Graph<T>& gr, std::size_t self) {
        const auto& go = gr.grad_buffer(self);
        if (gr.node_requires_grad(a.id)) accumulate(gr.grad_buffer(a.id), go);
        if (gr.node_requires_grad(b.id)) accumulate(gr.grad_buffer(b.id), go);
    });
}

template <class T>
Var add_scaled(Graph<T>& g, Var x, Var y, Var alpha) {
    require_same_shape(g.value(x).shape(), g.value(y).shape(), "add_scaled");
    if (g.value(alpha).size() != 1) throw DimensionError("add_scaled alpha must hold one value");
    const T s = g.value(alpha)[0];
    BasicTensor<T> out = g.value(x);
    const auto& yv = g.value(y);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * yv[i];
    return g.record(OpKind::AddScaled, {x.id, y.id, alpha.id}, std::move(out),
                    [x, y, alpha](Graph<T>& gr, std::size_t self) {
                        const auto& go = gr.grad_buffer(self);
                        const T sv = gr.node_value(alpha.id)[0];
                        if (gr.node_requires_grad(x.id)) accumulate(gr.grad_buffer(x.id), go);
                        if (gr.node_requires_grad(y.id)) {
                            auto& gy = gr.grad_buffer(y.id);
                            for (std::size_t i = 0; i < gy.size(); ++i) gy[i] += sv * go[i];
                        }
                        if (gr.node_requires_grad(alpha.id)) {
                            const auto& yv2 = gr.node_value(y.id);
                            T acc = 0;
                            for (std::size_t i = 0; i < go.size(); ++i) acc += go[i] * yv2[i];
                            gr.grad_buffer(alpha.id)[0] += acc;
                        }
                    });
}

template <class T>
Var mul(Graph<T>& g, Var a, Var b) {
    require_same_shape(g.value(a).shape(), g.value(b).shape(), "mul");
    BasicTensor<T> out = g.value(a);
    const auto& bv = g.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return g.record(OpKind::Mul, {a.id, b.id}, std::move(out), [a, b](Graph<T>& gr, std::size_t self) {
        const auto& go = gr.grad_buffer(self);
        const auto& av = gr.node_value(a.id);
        const auto& bv2 = gr.node_value(b.id);
        if (gr.node_requires_grad(a.id)) {
            auto& ga = gr.grad_buffer(a.id);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bv2[i];
        }
        if (gr.node_requires_grad(b.id)) {
            auto& gb = gr.grad_buffer(b.id);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * av[i];
        }
    });
}

template <class T>
Var silu(Graph<T>& g, Var x) {
    auto out = upscale::silu(g.value(x));
    return g.record(OpKind::Silu, {x.id}, std::move(out), [x](Graph<T>& gr, std::size_t self) {
        const auto& go = gr.grad_buffer(self);
        const auto& xv = gr.node_value(x.id);
        auto& gx = gr.grad_buffer(x.id);
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const T sig = T{1} / (T{1} + std::exp(-xv[i]));
            gx[i] += go[i] * sig * (T{1} + xv[i] * (T{1} - sig));
        }
    });
}

template <class T>
Var softmax(Graph<T>& g, Var x) {
    auto out = upscale::softmax(g.value(x));
    return g.record(OpKind::Softmax, {x.id}, std::move(out), [x](Graph<T>& gr, std::size_t self) {
        const auto& go = gr.grad_buffer(self);
        const auto& y = gr.node_value(self);
        auto& gx = gr.grad_buffer(x.id);
        const std::size_t n = y.cols();
        for (std::size_t r = 0; r < y.rows(); ++r) {
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += go[r * n + j] * y[r * n + j];
            for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (go[r * n + j] - dot);
        }
    });
}

template <class T>
Var rms_norm(Graph<T>& g, Var x, Var weight, double eps) {
    auto out = upscale::rms_norm(g.value(x), g.value(weight), eps);
    return g.record(OpKind::RmsNorm, {x.id, weight.id}, std::move(out), [x, weight, eps](Graph<T>& gr, std::size_t self) {
        const auto& go = gr.grad_buffer(self);
        const auto& xv = gr.node_value(x.id);
        const auto& wv = gr.node_value(weight.id);
        const std::size_t d = xv.cols();
        const bool need_x = gr.node_requires_grad(x.id);
        const bool need_w = gr.node_requires_grad(weight.id);
        for (std::size_t r = 0; r < xv.rows(); ++r) {
            double ss = 0.0;
            for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(xv[r * d + j]) * xv[r * d + j];
            const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
            if (need_w) {
                auto& gw = gr.grad_buffer(weight.id);
                for (std::size_t j = 0; j < d; ++j) gw[j] += static_cast<T>(go[r * d + j] * xv[r * d + j] * inv);
            }
            if (need_x) {
                // dx = inv·(g⊙w) − x·inv³/d · Σ(g⊙w⊙x)
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(go[r * d + j]) * wv[j] * xv[r * d + j];
                const double coef = dot * inv * inv * inv / static_cast<double>(d);
                auto& gx = gr.grad_buffer(x.id);
                for (std::size_t j = 0; j < d; ++j) {
                    gx[r * d + j] += static_cast<T>(inv * go[r * d + j] * wv[j] - coef * xv[r * d + j]);
                }
            }
        }
    });
}

template <class T>
Var embedding(Graph<T>& g, Var table, std::span<const std::int32_t> ids) {
    const auto& tv = g.value(table);
    if (tv.rank() != 2) throw DimensionError("embedding table must be 2-D, got " + shape_string(tv.shape()));
    const std::size_t vocab = tv.dim(0), d = tv.dim(1);
    BasicTensor<T> out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw IdError("token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
        }
        auto src = tv.row(static_cast<std::size_t>(ids[i]));
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    return g.record(OpKind::Embedding, {table.id}, std::move(out),
                    [table, saved = std::move(saved)](Graph<T>& gr, std::size_t self) {
                        const auto& go = gr.grad_buffer(self);
                        auto& gt = gr.grad_buffer(table.id);
                        const std::size_t d2 = go.cols();
                        for (std::size_t i = 0; i < saved.size(); ++i) {
                            const std::size_t r = static_cast<std::size_t>(saved[i]);
                            for (std::size_t j = 0; j < d2; ++j) gt[r * d2 + j] += go[i * d2 + j];
                        }
                    });
}

template <class T>
Var rope(Graph<T>& g, Var x, std::size_t seq, std::size_t n_heads, std::size_t head_dim, double theta) {
    const auto& xv = g.value(x);
    if (head_dim % 2 != 0) throw ValidationError("rope requires an even head_dim, got " + std::to_string(head_dim));
    if (xv.cols() != n_heads * head_dim || xv.rows() % seq != 0) {
        throw DimensionError("rope layout mismatch for " + shape_string(xv.shape()));
    }
    BasicTensor<T> out = xv;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            rope_rotate(out.row(r).subspan(h * head_dim, head_dim), r % seq, theta);
        }
    }
    return g.record(OpKind::Rope, {x.id}, std::move(out), [x, seq, n_heads, head_dim, theta](Graph<T>& gr, std::size_t self) {
        BasicTensor<T> back = gr.grad_buffer(self);
        for (std::size_t r = 0; r < back.rows(); ++r) {
            for (std::size_t h = 0; h < n_heads; ++h) {
                rope_rotate(back.row(r).subspan(h * head_dim, head_dim), r % seq, theta, true);
            }
        }
        accumulate(gr.grad_buffer(x.id), back);
    });
}

template <class T>
Var attention(Graph<T>& g, Var q, Var k, Var v, const AttentionShape& s) {
    const auto& qv = g.value(q);
    const auto& kv = g.value(k);
    const auto& vv = g.value(v);
    const std::size_t rows = s.batch * s.seq;
    const std::size_t qd = s.n_heads * s.head_dim, kd = s.n_kv_heads * s.head_dim;
    if (s.n_kv_heads == 0 || s.n_heads % s.n_kv_heads != 0) {
        throw ValidationError("n_heads must be a multiple of n_kv_heads");
    }
    if (qv.rows() != rows || qv.cols() != qd || kv.rows() != rows || kv.cols() != kd || vv.rows() != rows ||
        vv.cols() != kd) {
        throw DimensionError("attention input shapes " + shape_string(qv.shape()) + ", " + shape_string(kv.shape()) +
                             ", " + shape_string(vv.shape()) + " do not match the head layout");
    }
    const std::size_t group = s.n_heads / s.n_kv_heads;
    const std::size_t hd = s.head_dim;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    // probs[b][h][i][j], zero outside the causal window.
    auto probs = std::make_shared<std::vector<T>>(s.batch * s.n_heads * s.seq * s.seq, T{0});
    BasicTensor<T> out({rows, qd});
    std::vector<double> scores(s.seq);
    for (std::size_t b = 0; b < s.batch; ++b) {
        for (std::size_t h = 0; h < s.n_heads; ++h) {
            const std::size_t kh = h / group;
            for (std::size_t i = 0; i < s.seq; ++i) {
                const std::size_t lo = (s.window && i + 1 > *s.window) ? i + 1 - *s.window : 0;
                const T* qi = &qv[(b * s.seq + i) * qd + h * hd];
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = lo; j <= i; ++j) {
                    const T* kj = &kv[(b * s.seq + j) * kd + kh * hd];
                    T dot = 0;
                    for (std::size_t c = 0; c < hd; ++c) dot += qi[c] * kj[c];
                    scores[j] = static_cast<double>(dot * scale);
                    mx = std::max(mx, scores[j]);
                }
                double total = 0.0;
                for (std::size_t j = lo; j <= i; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    total += scores[j];
                }
                T* prow = &(*probs)[((b * s.n_heads + h) * s.seq + i) * s.seq];
                T* oi = &out[(b * s.seq + i) * qd + h * hd];
                for (std::size_t j = lo; j <= i; ++j) {
                    const T p = static_cast<T>(scores[j] / total);
                    prow[j] = p;
                    const T* vj = &vv[(b * s.seq + j) * kd + kh * hd];
                    for (std::size_t c = 0; c < hd; ++c) oi[c] += p * vj[c];
                }
            }
        }
    }
    return g.record(OpKind::Attention, {q.id, k.id, v.id}, std::move(out),
                    [q, k, v, s, probs, group, scale](Graph<T>& gr, std::size_t self) {
                        const auto& go = gr.grad_buffer(self);
                        const auto& qv2 = gr.node_value(q.id);
                        const auto& kv2 = gr.node_value(k.id);
                        const auto& vv2 = gr.node_value(v.id);
                        const std::size_t hd2 = s.head_dim;
                        const std::size_t qd2 = s.n_heads * hd2, kd2 = s.n_kv_heads * hd2;
                        // Buffers are allocated for every input; unused ones are ignored.
                        BasicTensor<T> gq(qv2.shape()), gk(kv2.shape()), gv(vv2.shape());
                        std::vector<T> dp(s.seq);
                        for (std::size_t b = 0; b < s.batch; ++b) {
                            for (std::size_t h = 0; h < s.n_heads; ++h) {
                                const std::size_t kh = h / group;
                                for (std::size_t i = 0; i < s.seq; ++i) {
                                    const std::size_t lo = (s.window && i + 1 > *s.window) ? i + 1 - *s.window : 0;
                                    const T* prow = &(*probs)[((b * s.n_heads + h) * s.seq + i) * s.seq];
                                    const T* goi = &go[(b * s.seq + i) * qd2 + h * hd2];
                                    T dot = 0;
                                    for (std::size_t j = lo; j <= i; ++j) {
                                        const T* vj = &vv2[(b * s.seq + j) * kd2 + kh * hd2];
                                        T* gvj = &gv[(b * s.seq + j) * kd2 + kh * hd2];
                                        T acc = 0;
                                        for (std::size_t c = 0; c < hd2; ++c) {
                                            acc += goi[c] * vj[c];
                                            gvj[c] += prow[j] * goi[c];
                                        }
                                        dp[j] = acc;
                                        dot += acc * prow[j];
                                    }
                                    const T* qi = &qv2[(b * s.seq + i) * qd2 + h * hd2];
                                    T* gqi = &gq[(b * s.seq + i) * qd2 + h * hd2];
                                    for (std::size_t j = lo; j <= i; ++j) {
                                        const T ds = prow[j] * (dp[j] - dot) * scale;
                                        const T* kj = &kv2[(b * s.seq + j) * kd2 + kh * hd2];
                                        T* gkj = &gk[(b * s.seq + j) * kd2 + kh * hd2];
                                        for (std::size_t c = 0; c < hd2; ++c) {
                                            gqi[c] += ds * kj[c];
                                            gkj[c] += ds * qi[c];
                                        }
                                    }
                                }
                            }
                        }
                        if (gr.node_requires_grad(q.id)) accumulate(gr.grad_buffer(q.id), gq);
                        if (gr.node_requires_grad(k.id)) accumulate(gr.grad_buffer(k.id), gk);
                        if (gr.node_requires_grad(v.id)) accumulate(gr.grad_buffer(v.id), gv);
                    });
}

template <class T>
Var top_k_softmax(Graph<T>& g, Var logits, std::size_t k, std::vector<std::size_t>* selected) {
    const auto& lv = g.value(logits);
    const std::size_t m = lv.cols();
    if (k == 0 || k > m) throw ParameterError("top_k must lie in [1, " + std::to_string(m) + "]");
    BasicTensor<T> out(lv.shape());
    std::vector<std::size_t> picks(lv.rows() * k);
    for (std::size_t r = 0; r < lv.rows(); ++r) {
        auto row = lv.row(r);
        std::span<std::size_t> idx(picks.data() + r * k, k);
        top_k_indices<T>(row, k, idx);
        const double mx = static_cast<double>(row[idx[0]]);
        double total = 0.0;
        for (std::size_t e : idx) total += std::exp(static_cast<double>(row[e]) - mx);
        for (std::size_t e : idx) out[r * m + e] = static_cast<T>(std::exp(static_cast<double>(row[e]) - mx) / total);
    }
    if (selected) *selected = picks;
    return g.record(OpKind::TopKSoftmax, {logits.id}, std::move(out),
                    [logits, k, picks = std::move(picks)](Graph<T>& gr, std::size_t self) {
                        const auto& go = gr.grad_buffer(self);
                        const auto& y = gr.node_value(self);
                        auto& gl = gr.grad_buffer(logits.id);
                        const std::size_t m2 = y.cols();
                        for (std::size_t r = 0; r < y.rows(); ++r) {
                            T dot = 0;
                            for (std::size_t t = 0; t < k; ++t) {
                                const std::size_t e = picks[r * k + t];
                                dot += go[r * m2 + e] * y[r * m2 + e];
                            }
                            for (std::size_t t = 0; t < k; ++t) {
                                const std::size_t e = picks[r * k + t];
                                gl[r * m2 + e] += y[r * m2 + e] * (go[r * m2 + e] - dot);
                            }
                        }
                    });
}

template <class T>
Var scale_by_column(Graph<T>& g, Var x, Var weights, std::size_t column) {
    const auto& xv = g.value(x);
    const auto& wv = g.value(weights);
    if (wv.rows() != xv.rows() || column >= wv.cols()) {
        throw DimensionError("scale_by_column: weights " + shape_string(wv.shape()) + " incompatible with " +
                             shape_string(xv.shape()));
    }
    BasicTensor<T> out = xv;
    const std::size_t d = xv.cols(), m = wv.cols();
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        const T w = wv[r * m + column];
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] *= w;
    }
    return g.record(OpKind::ScaleByColumn, {x.id, weights.id}, std::move(out),
                    [x, weights, column](Graph<T>& gr, std::size_t self) {
                        const auto& go = gr.grad_buffer(self);
                        const auto& xv2 = gr.node_value(x.id);
                        const auto& wv2 = gr.node_value(weights.id);
                        const std::size_t d2 = xv2.cols(), m2 = wv2.cols();
                        for (std::size_t r = 0; r < xv2.rows(); ++r) {
                            const T w = wv2[r * m2 + column];
                            if (gr.node_requires_grad(x.id)) {
                                auto& gx = gr.grad_buffer(x.id);
                                for (std::size_t j = 0; j < d2; ++j) gx[r * d2 + j] += go[r * d2 + j] * w;
                            }
                            if (gr.node_requires_grad(weights.id)) {
                                T acc = 0;
                                for (std::size_t j = 0; j < d2; ++j) acc += go[r * d2 + j] * xv2[r * d2 + j];
                                gr.grad_buffer(weights.id)[r * m2 + column] += acc;
                            }
                        }
                    });
}

template <class T>
Var cross_entropy(Graph<T>& g, Var logits, std::span<const std::int32_t> targets) {
    const double loss = next_token_loss(g.value(logits), targets);
    std::vector<std::int32_t> saved(targets.begin(), targets.end());
    std::size_t counted = 0;
    for (auto t : saved) counted += t >= 0 ? 1 : 0;
    BasicTensor<T> out({1}, {static_cast<T>(loss)});
    return g.record(OpKind::CrossEntropy, {logits.id}, std::move(out),
                    [logits, saved = std::move(saved), counted](Graph<T>& gr, std::size_t self) {
                        const T scale = gr.grad_buffer(self)[0] / static_cast<T>(counted);
                        const auto& lv = gr.node_value(logits.id);
                        auto& gl = gr.grad_buffer(logits.id);
                        const std::size_t v = lv.cols();
                        for (std::size_t r = 0; r < saved.size(); ++r) {
                            if (saved[r] < 0) continue;
                            auto row = lv.row(r);
                            double mx = -std::numeric_limits<double>::infinity();
                            for (T x : row) mx = std::max(mx, static_cast<double>(x));
                            double se = 0.0;
                            for (T x : row) se += std::exp(static_cast<double>(x) - mx);
                            for (std::size_t j = 0; j < v; ++j) {
                                const double p = std::exp(static_cast<double>(row[j]) - mx) / se;
                                const double onehot = (static_cast<std::int32_t>(j) == saved[r]) ? 1.0 : 0.0;
                                gl[r * v + j] += static_cast<T>((p - onehot) * scale);
                            }
                        }
                    });
}

template <class T>
Var sum(Graph<T>& g, Var x) {
    const auto& xv = g.value(x);
    T acc = 0;
    for (T v : xv.data()) acc += v;
    return g.record(OpKind::Sum, {x.id}, BasicTensor<T>({1}, {acc}), [x](Graph<T>& gr, std::size_t self) {
        const T go = gr.grad_buffer(self)[0];
        auto& gx = gr.grad_buffer(x.id);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go;
    });
}

#define UPSCALE_INSTANTIATE_OPS(T)                                                                   \
    template Var matmul(Graph<T>&, Var, Var);                                                         \
    template Var matmul_bt(Graph<T>&, Var, Var);                                                      \
    template Var add(Graph<T>&, Var, Var);                                                            \
    template Var add_scaled(Graph<T>&, Var, Var, Var);                                                \
    template Var mul(Graph<T>&, Var, Var);                                                            \
    template Var silu(Graph<T>&, Var);                                                                \
    template Var softmax(Graph<T>&, Var);                                                             \
    template Var rms_norm(Graph<T>&, Var, Var, double);                                               \
    template Var embedding(Graph<T>&, Var, std::span<const std::int32_t>);                            \
    template Var rope(Graph<T>&, Var, std::size_t, std::size_t, std::size_t, double);                 \
    template Var attention(Graph<T>&, Var, Var, Var, const AttentionShape&);                          \
    template Var top_k_softmax(Graph<T>&, Var, std::size_t, std::vector<std::size_t>*);               \
    template Var scale_by_column(Graph<T>&, Var, Var, std::size_t);                                   \
    template Var cross_entropy(Graph<T>&, Var, std::span<const std::int32_t>);                        \
    template Var sum(Graph<T>&, Var);

UPSCALE_INSTANTIATE_OPS(float)
UPSCALE_INSTANTIATE_OPS(double)

#undef UPSCALE_INSTANTIATE_OPS

}  // namespace ops
}  // namespace upscale
