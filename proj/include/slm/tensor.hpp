#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "slm/common.hpp"
#include "slm/rng.hpp"

// Minimal differentiable tensor operations: a per-sample tape of 2-D row-major
// tensors with hand-written backward passes, dense kernels through Eigen.
// Forward/backward over one tape is single-threaded and deterministic.
namespace slm::numerics {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstVecMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
class Graph;

template <typename T>
struct Tensor {
    Graph<T>* graph = nullptr;
    int id = -1;

    bool valid() const { return graph != nullptr && id >= 0; }
    int rows() const;
    int cols() const;
    size_t count() const;
    std::span<T> values();
    std::span<const T> values() const;
    std::span<const T> grad() const;
    T scalar() const;
};

template <typename T>
class Graph {
public:
    struct Node {
        int rows = 0, cols = 0;
        std::vector<T> val_store, grad_store;
        T* val = nullptr;
        T* grad = nullptr; // nullptr: constant, gradient not tracked
        std::function<void()> backward;
    };

    // Copies the data; no gradient.
    Tensor<T> constant(int rows, int cols, std::span<const T> data) {
        SLM_REQUIRE(data.size() == static_cast<size_t>(rows) * cols,
                    "Graph::constant: data size mismatch");
        Tensor<T> t = alloc(rows, cols, /*needs_grad=*/false);
        std::copy(data.begin(), data.end(), node(t.id).val);
        return t;
    }

    // Binds external value/gradient storage (parameters). Gradients accumulate.
    Tensor<T> leaf(int rows, int cols, T* val, T* grad) {
        nodes_.emplace_back();
        Node& n = nodes_.back();
        n.rows = rows;
        n.cols = cols;
        n.val = val;
        n.grad = grad;
        Tensor<T> t{this, static_cast<int>(nodes_.size()) - 1};
        return t;
    }

    Tensor<T> alloc(int rows, int cols, bool needs_grad) {
        nodes_.emplace_back();
        Node& n = nodes_.back();
        n.rows = rows;
        n.cols = cols;
        const size_t count = static_cast<size_t>(rows) * cols;
        n.val_store.resize(count);
        n.val = n.val_store.data();
        if (needs_grad) {
            n.grad_store.assign(count, T(0));
            n.grad = n.grad_store.data();
        }
        return Tensor<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    size_t num_nodes() const { return nodes_.size(); }

    bool tracked(const Tensor<T>& t) const { return node(t.id).grad != nullptr; }

    // Reverse pass from one scalar with seed gradient 1.
    void backward(const Tensor<T>& loss) { backward_seeded({{loss, T(1)}}); }

    // Reverse pass from several scalars, each with its own seed gradient.
    void backward_seeded(const std::vector<std::pair<Tensor<T>, T>>& seeds) {
        for (const auto& [t, seed] : seeds) {
            Node& n = node(t.id);
            SLM_REQUIRE(n.rows == 1 && n.cols == 1, "Graph::backward: seeds must be scalars");
            if (n.grad) n.grad[0] += seed;
        }
        for (size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (n.grad && n.backward) n.backward();
        }
    }

private:
    std::deque<Node> nodes_;
};

template <typename T>
int Tensor<T>::rows() const { return graph->node(id).rows; }
template <typename T>
int Tensor<T>::cols() const { return graph->node(id).cols; }
template <typename T>
size_t Tensor<T>::count() const { return static_cast<size_t>(rows()) * cols(); }
template <typename T>
std::span<T> Tensor<T>::values() {
    auto& n = graph->node(id);
    return {n.val, static_cast<size_t>(n.rows) * n.cols};
}
template <typename T>
std::span<const T> Tensor<T>::values() const {
    const auto& n = graph->node(id);
    return {n.val, static_cast<size_t>(n.rows) * n.cols};
}
template <typename T>
std::span<const T> Tensor<T>::grad() const {
    const auto& n = graph->node(id);
    SLM_REQUIRE(n.grad != nullptr, "Tensor::grad: gradient not tracked");
    return {n.grad, static_cast<size_t>(n.rows) * n.cols};
}
template <typename T>
T Tensor<T>::scalar() const {
    SLM_REQUIRE(count() == 1, "Tensor::scalar: not a scalar");
    return values()[0];
}

namespace detail {

template <typename T>
MatMap<T> vmap(typename Graph<T>::Node& n) {
    return MatMap<T>(n.val, n.rows, n.cols);
}
template <typename T>
MatMap<T> gmap(typename Graph<T>::Node& n) {
    return MatMap<T>(n.grad, n.rows, n.cols);
}

template <typename T>
Graph<T>& same_graph(const Tensor<T>& a, const Tensor<T>& b) {
    SLM_REQUIRE(a.valid() && b.valid() && a.graph == b.graph,
                "tensor op: operands from different graphs");
    return *a.graph;
}

template <typename T>
void check_finite(std::span<const T> vals, const char* op) {
    for (T v : vals)
        if (!std::isfinite(static_cast<double>(v)))
            fail_numeric(cat(op, ": non-finite input"));
}

}  // namespace detail

template <typename T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
    Graph<T>& g = detail::same_graph(a, b);
    SLM_REQUIRE(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    const bool track = g.tracked(a) || g.tracked(b);
    Tensor<T> out = g.alloc(a.rows(), a.cols(), track);
    detail::vmap<T>(g.node(out.id)) =
        detail::vmap<T>(g.node(a.id)) + detail::vmap<T>(g.node(b.id));
    if (track) {
        g.node(out.id).backward = [&g, ai = a.id, bi = b.id, oi = out.id] {
            auto& on = g.node(oi);
            const size_t n = static_cast<size_t>(on.rows) * on.cols;
            if (T* ga = g.node(ai).grad) VecMap<T>(ga, n) += ConstVecMap<T>(on.grad, n);
            if (T* gb = g.node(bi).grad) VecMap<T>(gb, n) += ConstVecMap<T>(on.grad, n);
        };
    }
    return out;
}

template <typename T>
Tensor<T> scale(Tensor<T> a, T factor) {
    Graph<T>& g = *a.graph;
    const bool track = g.tracked(a);
    Tensor<T> out = g.alloc(a.rows(), a.cols(), track);
    detail::vmap<T>(g.node(out.id)) = detail::vmap<T>(g.node(a.id)) * factor;
    if (track) {
        g.node(out.id).backward = [&g, ai = a.id, oi = out.id, factor] {
            auto& on = g.node(oi);
            const size_t n = static_cast<size_t>(on.rows) * on.cols;
            VecMap<T>(g.node(ai).grad, n) += ConstVecMap<T>(on.grad, n) * factor;
        };
    }
    return out;
}

// y = x * W (+ b per row); x [n,in], W [in,out], b [1,out] (pass invalid Tensor for no bias)
template <typename T>
Tensor<T> linear(Tensor<T> x, Tensor<T> w, Tensor<T> b = {}) {
    Graph<T>& g = detail::same_graph(x, w);
    SLM_REQUIRE(x.cols() == w.rows(), "linear: inner dimension mismatch");
    if (b.valid())
        SLM_REQUIRE(b.rows() == 1 && b.cols() == w.cols(), "linear: bias shape mismatch");
    const bool track = g.tracked(x) || g.tracked(w) || (b.valid() && g.tracked(b));
    Tensor<T> out = g.alloc(x.rows(), w.cols(), track);

    auto xm = detail::vmap<T>(g.node(x.id));
    auto wm = detail::vmap<T>(g.node(w.id));
    auto om = detail::vmap<T>(g.node(out.id));
    om.noalias() = xm * wm;
    if (b.valid())
        om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(
            g.node(b.id).val, w.cols());

    if (track) {
        g.node(out.id).backward = [&g, xi = x.id, wi = w.id, bi = b.valid() ? b.id : -1,
                                   oi = out.id] {
            auto& on = g.node(oi);
            auto dout = detail::gmap<T>(on);
            auto& xn = g.node(xi);
            auto& wn = g.node(wi);
            if (xn.grad)
                detail::gmap<T>(xn).noalias() += dout * detail::vmap<T>(wn).transpose();
            if (wn.grad)
                detail::gmap<T>(wn).noalias() += detail::vmap<T>(xn).transpose() * dout;
            if (bi >= 0)
                if (T* gb = g.node(bi).grad)
                    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb, on.cols) +=
                        dout.colwise().sum();
        };
    }
    return out;
}

// Normalizes the last axis to zero mean / unit variance (eps 1e-5), then
// applies per-column gain and bias. gain/bias are [1, d].
template <typename T>
Tensor<T> layer_norm(Tensor<T> x, Tensor<T> gain, Tensor<T> bias) {
    Graph<T>& g = detail::same_graph(x, gain);
    SLM_REQUIRE(gain.rows() == 1 && gain.cols() == x.cols() && bias.rows() == 1 &&
                    bias.cols() == x.cols(),
                "layer_norm: gain/bias shape mismatch");
    const T eps = T(1e-5);
    const int n = x.rows(), d = x.cols();
    const bool track = g.tracked(x) || g.tracked(gain) || g.tracked(bias);
    Tensor<T> out = g.alloc(n, d, track);

    // Cache normalized rows and 1/std per row for the backward pass.
    auto xhat = std::make_shared<Mat<T>>(n, d);
    auto inv_std = std::make_shared<Eigen::Array<T, Eigen::Dynamic, 1>>(n);
    {
        auto xm = detail::vmap<T>(g.node(x.id));
        auto om = detail::vmap<T>(g.node(out.id));
        auto gm = ConstVecMap<T>(g.node(gain.id).val, d);
        auto bm = ConstVecMap<T>(g.node(bias.id).val, d);
        for (int i = 0; i < n; ++i) {
            auto row = xm.row(i).array();
            const T mean = row.mean();
            const T var = (row - mean).square().sum() / T(d);
            const T is = T(1) / std::sqrt(var + eps);
            (*inv_std)(i) = is;
            xhat->row(i) = ((row - mean) * is).matrix();
            om.row(i) = (xhat->row(i).array() * gm.transpose() + bm.transpose()).matrix();
        }
    }

    if (track) {
        g.node(out.id).backward = [&g, xi = x.id, gi = gain.id, bi = bias.id, oi = out.id,
                                   xhat, inv_std] {
            auto& on = g.node(oi);
            auto dout = detail::gmap<T>(on);
            const int n2 = on.rows, d2 = on.cols;
            auto& xn = g.node(xi);
            auto gm = ConstVecMap<T>(g.node(gi).val, d2);
            if (T* gg = g.node(gi).grad) {
                VecMap<T> acc(gg, d2);
                for (int i = 0; i < n2; ++i)
                    acc += (dout.row(i).array() * xhat->row(i).array()).transpose();
            }
            if (T* gb = g.node(bi).grad) {
                VecMap<T> acc(gb, d2);
                for (int i = 0; i < n2; ++i) acc += dout.row(i).array().transpose();
            }
            if (xn.grad) {
                auto dx = detail::gmap<T>(xn);
                for (int i = 0; i < n2; ++i) {
                    Eigen::Array<T, Eigen::Dynamic, 1> dxhat =
                        (dout.row(i).array() * gm.transpose()).transpose();
                    const T m1 = dxhat.mean();
                    const T m2 = (dxhat * xhat->row(i).array().transpose()).mean();
                    dx.row(i).array() +=
                        ((dxhat - m1 - xhat->row(i).array().transpose() * m2) * (*inv_std)(i))
                            .transpose();
                }
            }
        };
    }
    return out;
}

// tanh-approximation GELU; smooth everywhere, which keeps finite differences honest.
template <typename T>
Tensor<T> gelu(Tensor<T> x) {
    Graph<T>& g = *x.graph;
    const bool track = g.tracked(x);
    Tensor<T> out = g.alloc(x.rows(), x.cols(), track);
    const size_t n = x.count();
    const T c0 = T(0.7978845608028654); // sqrt(2/pi)
    const T c1 = T(0.044715);
    const T* xv = g.node(x.id).val;
    T* ov = g.node(out.id).val;
    for (size_t i = 0; i < n; ++i) {
        const T t = std::tanh(c0 * (xv[i] + c1 * xv[i] * xv[i] * xv[i]));
        ov[i] = T(0.5) * xv[i] * (T(1) + t);
    }
    if (track) {
        g.node(out.id).backward = [&g, xi = x.id, oi = out.id, c0, c1] {
            auto& on = g.node(oi);
            auto& xn = g.node(xi);
            const size_t count = static_cast<size_t>(on.rows) * on.cols;
            for (size_t i = 0; i < count; ++i) {
                const T x0 = xn.val[i];
                const T u = c0 * (x0 + c1 * x0 * x0 * x0);
                const T t = std::tanh(u);
                const T du = c0 * (T(1) + T(3) * c1 * x0 * x0);
                const T d = T(0.5) * (T(1) + t) + T(0.5) * x0 * (T(1) - t * t) * du;
                xn.grad[i] += on.grad[i] * d;
            }
        };
    }
    return out;
}

// Max-subtracted softmax along `axis` (0 = down columns, 1/-1 = along rows).
template <typename T>
Tensor<T> softmax(Tensor<T> x, int axis = -1) {
    Graph<T>& g = *x.graph;
    SLM_REQUIRE(axis == -1 || axis == 0 || axis == 1, "softmax: axis must be 0 or 1");
    detail::check_finite<T>(x.values(), "softmax");
    const bool row_axis = axis != 0;
    const bool track = g.tracked(x);
    Tensor<T> out = g.alloc(x.rows(), x.cols(), track);
    auto xm = detail::vmap<T>(g.node(x.id));
    auto om = detail::vmap<T>(g.node(out.id));
    if (row_axis) {
        for (int i = 0; i < x.rows(); ++i) {
            auto row = xm.row(i).array();
            Eigen::Array<T, 1, Eigen::Dynamic> e = (row - row.maxCoeff()).exp();
            om.row(i) = (e / e.sum()).matrix();
        }
    } else {
        for (int j = 0; j < x.cols(); ++j) {
            auto col = xm.col(j).array();
            Eigen::Array<T, Eigen::Dynamic, 1> e = (col - col.maxCoeff()).exp();
            om.col(j) = (e / e.sum()).matrix();
        }
    }
    if (track) {
        g.node(out.id).backward = [&g, xi = x.id, oi = out.id, row_axis] {
            auto& on = g.node(oi);
            auto y = detail::vmap<T>(on);
            auto dy = detail::gmap<T>(on);
            auto dx = detail::gmap<T>(g.node(xi));
            if (row_axis) {
                for (int i = 0; i < on.rows; ++i) {
                    const T dot = (dy.row(i).array() * y.row(i).array()).sum();
                    dx.row(i).array() += (dy.row(i).array() - dot) * y.row(i).array();
                }
            } else {
                for (int j = 0; j < on.cols; ++j) {
                    const T dot = (dy.col(j).array() * y.col(j).array()).sum();
                    dx.col(j).array() += (dy.col(j).array() - dot) * y.col(j).array();
                }
            }
        };
    }
    return out;
}

enum class AttnMode { causal, full };

// Scaled dot-product multi-head attention over already-projected q/k/v
// [n, d]. Causal mode zeroes attention to positions j > i.
template <typename T>
Tensor<T> attention(Tensor<T> q, Tensor<T> k, Tensor<T> v, int heads, AttnMode mode) {
    Graph<T>& g = detail::same_graph(q, k);
    detail::same_graph(k, v);
    const int n = q.rows(), d = q.cols();
    SLM_REQUIRE(k.rows() == n && v.rows() == n && k.cols() == d && v.cols() == d,
                "attention: q/k/v shape mismatch");
    SLM_REQUIRE(heads >= 1 && d % heads == 0, "attention: head count must divide dim");
    const int dh = d / heads;
    const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
    const bool causal = mode == AttnMode::causal;
    const bool track = g.tracked(q) || g.tracked(k) || g.tracked(v);
    Tensor<T> out = g.alloc(n, d, track);

    // Per-head attention probabilities, kept for the backward pass.
    auto probs = std::make_shared<std::vector<Mat<T>>>();
    probs->reserve(heads);

    auto qm = detail::vmap<T>(g.node(q.id));
    auto km = detail::vmap<T>(g.node(k.id));
    auto vm = detail::vmap<T>(g.node(v.id));
    auto om = detail::vmap<T>(g.node(out.id));
    for (int h = 0; h < heads; ++h) {
        auto qh = qm.middleCols(h * dh, dh);
        auto kh = km.middleCols(h * dh, dh);
        auto vh = vm.middleCols(h * dh, dh);
        Mat<T> scores(n, n);
        scores.noalias() = qh * kh.transpose();
        scores *= inv_scale;
        Mat<T> p = Mat<T>::Zero(n, n);
        for (int i = 0; i < n; ++i) {
            const int limit = causal ? i + 1 : n;
            auto row = scores.row(i).head(limit).array();
            Eigen::Array<T, 1, Eigen::Dynamic> e = (row - row.maxCoeff()).exp();
            p.row(i).head(limit) = (e / e.sum()).matrix();
        }
        om.middleCols(h * dh, dh).noalias() = p * vh;
        probs->push_back(std::move(p));
    }

    if (track) {
        g.node(out.id).backward = [&g, qi = q.id, ki = k.id, vi = v.id, oi = out.id, heads,
                                   dh, inv_scale, probs] {
            auto& on = g.node(oi);
            const int n2 = on.rows;
            auto dout = detail::gmap<T>(on);
            auto& qn = g.node(qi);
            auto& kn = g.node(ki);
            auto& vn = g.node(vi);
            auto qv = detail::vmap<T>(qn);
            auto kv = detail::vmap<T>(kn);
            auto vv = detail::vmap<T>(vn);
            for (int h = 0; h < heads; ++h) {
                const Mat<T>& p = (*probs)[static_cast<size_t>(h)];
                auto dout_h = dout.middleCols(h * dh, dh);
                if (vn.grad)
                    detail::gmap<T>(vn).middleCols(h * dh, dh).noalias() +=
                        p.transpose() * dout_h;
                if (!qn.grad && !kn.grad) continue;
                Mat<T> dp(n2, n2);
                dp.noalias() = dout_h * vv.middleCols(h * dh, dh).transpose();
                // dS = P .* (dP - rowsum(dP .* P)); masked entries have P == 0.
                Mat<T> ds(n2, n2);
                for (int i = 0; i < n2; ++i) {
                    const T dot = (dp.row(i).array() * p.row(i).array()).sum();
                    ds.row(i) = ((dp.row(i).array() - dot) * p.row(i).array()).matrix();
                }
                ds *= inv_scale;
                if (qn.grad)
                    detail::gmap<T>(qn).middleCols(h * dh, dh).noalias() +=
                        ds * kv.middleCols(h * dh, dh);
                if (kn.grad)
                    detail::gmap<T>(kn).middleCols(h * dh, dh).noalias() +=
                        ds.transpose() * qv.middleCols(h * dh, dh);
            }
        };
    }
    return out;
}

// Inverted dropout; pass enabled=false (or p == 0) for the identity.
template <typename T>
Tensor<T> dropout(Tensor<T> x, double p, Rng* rng, bool enabled) {
    if (!enabled || p <= 0.0) return x;
    SLM_REQUIRE(p < 1.0, "dropout: p must be < 1");
    SLM_REQUIRE(rng != nullptr, "dropout: rng required when enabled");
    Graph<T>& g = *x.graph;
    const bool track = g.tracked(x);
    Tensor<T> out = g.alloc(x.rows(), x.cols(), track);
    const size_t n = x.count();
    const T keep_scale = T(1.0 / (1.0 - p));
    auto mask = std::make_shared<std::vector<uint8_t>>(n);
    const T* xv = g.node(x.id).val;
    T* ov = g.node(out.id).val;
    for (size_t i = 0; i < n; ++i) {
        const bool keep = rng->uniform_real() >= p;
        (*mask)[i] = keep;
        ov[i] = keep ? xv[i] * keep_scale : T(0);
    }
    if (track) {
        g.node(out.id).backward = [&g, xi = x.id, oi = out.id, keep_scale, mask] {
            auto& on = g.node(oi);
            auto& xn = g.node(xi);
            const size_t count = static_cast<size_t>(on.rows) * on.cols;
            for (size_t i = 0; i < count; ++i)
                if ((*mask)[i]) xn.grad[i] += on.grad[i] * keep_scale;
        };
    }
    return out;
}

// Gathers rows of `table` [V, d] at `ids`; gradient accumulates only on the
// looked-up rows.
template <typename T>
Tensor<T> embedding_lookup(Tensor<T> table, std::span<const int> ids) {
    Graph<T>& g = *table.graph;
    const int v = table.rows(), d = table.cols();
    for (int id : ids)
        SLM_REQUIRE(id >= 0 && id < v, "embedding_lookup: id out of range");
    const bool track = g.tracked(table);
    Tensor<T> out = g.alloc(static_cast<int>(ids.size()), d, track);
    auto tm = detail::vmap<T>(g.node(table.id));
    auto om = detail::vmap<T>(g.node(out.id));
    for (size_t i = 0; i < ids.size(); ++i) om.row(static_cast<int>(i)) = tm.row(ids[i]);
    if (track) {
        auto idx = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
        g.node(out.id).backward = [&g, ti = table.id, oi = out.id, idx] {
            auto dout = detail::gmap<T>(g.node(oi));
            auto dtab = detail::gmap<T>(g.node(ti));
            for (size_t i = 0; i < idx->size(); ++i)
                dtab.row((*idx)[i]) += dout.row(static_cast<int>(i));
        };
    }
    return out;
}

// y[i] = sum over tables t of table_t[indices[t][i]], skipping entries of -1.
// One fused gather for mixed-role sequence embeddings.
template <typename T>
Tensor<T> multi_gather_sum(const std::vector<Tensor<T>>& tables,
                           const std::vector<std::vector<int>>& indices, int n) {
    SLM_REQUIRE(!tables.empty() && indices.size() == tables.size(),
                "multi_gather_sum: one index column required per table");
    Graph<T>& g = *tables[0].graph;
    const int d = tables[0].cols();
    bool track = false;
    for (size_t t = 0; t < tables.size(); ++t) {
        SLM_REQUIRE(tables[t].graph == &g, "multi_gather_sum: tables from different graphs");
        SLM_REQUIRE(tables[t].cols() == d, "multi_gather_sum: table widths differ");
        SLM_REQUIRE(indices[t].size() == static_cast<size_t>(n),
                    "multi_gather_sum: index column length mismatch");
        for (int id : indices[t])
            SLM_REQUIRE(id < tables[t].rows(), "multi_gather_sum: id out of range");
        track = track || g.tracked(tables[t]);
    }
    Tensor<T> out = g.alloc(n, d, track);
    auto om = detail::vmap<T>(g.node(out.id));
    om.setZero();
    for (size_t t = 0; t < tables.size(); ++t) {
        auto tm = detail::vmap<T>(g.node(tables[t].id));
        for (int i = 0; i < n; ++i)
            if (indices[t][static_cast<size_t>(i)] >= 0)
                om.row(i) += tm.row(indices[t][static_cast<size_t>(i)]);
    }
    if (track) {
        auto idx = std::make_shared<std::vector<std::vector<int>>>(indices);
        std::vector<int> table_ids;
        for (const auto& t : tables) table_ids.push_back(t.id);
        g.node(out.id).backward = [&g, table_ids, oi = out.id, idx] {
            auto dout = detail::gmap<T>(g.node(oi));
            for (size_t t = 0; t < table_ids.size(); ++t) {
                auto& tn = g.node(table_ids[t]);
                if (!tn.grad) continue;
                auto dtab = detail::gmap<T>(tn);
                const auto& col = (*idx)[t];
                for (size_t i = 0; i < col.size(); ++i)
                    if (col[i] >= 0) dtab.row(col[i]) += dout.row(static_cast<int>(i));
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> gather_rows(Tensor<T> x, std::span<const int> idx) {
    Graph<T>& g = *x.graph;
    for (int i : idx)
        SLM_REQUIRE(i >= 0 && i < x.rows(), "gather_rows: index out of range");
    const bool track = g.tracked(x);
    Tensor<T> out = g.alloc(static_cast<int>(idx.size()), x.cols(), track);
    auto xm = detail::vmap<T>(g.node(x.id));
    auto om = detail::vmap<T>(g.node(out.id));
    for (size_t i = 0; i < idx.size(); ++i) om.row(static_cast<int>(i)) = xm.row(idx[i]);
    if (track) {
        auto rows = std::make_shared<std::vector<int>>(idx.begin(), idx.end());
        g.node(out.id).backward = [&g, xi = x.id, oi = out.id, rows] {
            auto dout = detail::gmap<T>(g.node(oi));
            auto dx = detail::gmap<T>(g.node(xi));
            for (size_t i = 0; i < rows->size(); ++i)
                dx.row((*rows)[i]) += dout.row(static_cast<int>(i));
        };
    }
    return out;
}

template <typename T>
std::pair<Tensor<T>, size_t> masked_ce_sum(Tensor<T> logits, std::span<const int> targets,
                                           std::span<const uint8_t> use);

// -log softmax(logits)[target] for one [1, V] row; masked-out positions
// contribute exactly zero value and gradient.
template <typename T>
Tensor<T> cross_entropy(Tensor<T> logits, int target, bool mask = true) {
    Graph<T>& g = *logits.graph;
    SLM_REQUIRE(logits.rows() == 1, "cross_entropy: expected a single logits row");
    SLM_REQUIRE(target >= 0 && target < logits.cols(), "cross_entropy: target out of range");
    std::vector<int> targets{target};
    std::vector<uint8_t> use{static_cast<uint8_t>(mask ? 1 : 0)};
    auto [sum, count] = masked_ce_sum(logits, targets, use);
    (void)count;
    return sum;
}

// Sum of per-position NLL over positions with use[i] != 0; second member of
// the pair is the number of positions that contributed. logits [n, V].
template <typename T>
std::pair<Tensor<T>, size_t> masked_ce_sum(Tensor<T> logits, std::span<const int> targets,
                                           std::span<const uint8_t> use) {
    Graph<T>& g = *logits.graph;
    const int n = logits.rows(), v = logits.cols();
    SLM_REQUIRE(targets.size() == static_cast<size_t>(n) && use.size() == static_cast<size_t>(n),
                "masked_ce_sum: targets/mask length mismatch");
    size_t count = 0;
    for (int i = 0; i < n; ++i)
        if (use[static_cast<size_t>(i)]) {
            ++count;
            SLM_REQUIRE(targets[static_cast<size_t>(i)] >= 0 &&
                            targets[static_cast<size_t>(i)] < v,
                        "masked_ce_sum: target out of range");
        }
    const bool track = g.tracked(logits);
    Tensor<T> out = g.alloc(1, 1, track);

    // log-sum-exp per contributing row, cached for backward
    auto lse = std::make_shared<std::vector<T>>(static_cast<size_t>(n), T(0));
    auto lm = detail::vmap<T>(g.node(logits.id));
    T total = T(0);
    for (int i = 0; i < n; ++i) {
        if (!use[static_cast<size_t>(i)]) continue;
        auto row = lm.row(i).array();
        const T mx = row.maxCoeff();
        if (!std::isfinite(static_cast<double>(mx))) fail_numeric("masked_ce_sum: non-finite logits");
        const T l = mx + std::log((row - mx).exp().sum());
        (*lse)[static_cast<size_t>(i)] = l;
        total += l - row(targets[static_cast<size_t>(i)]);
    }
    g.node(out.id).val[0] = total;

    if (track) {
        auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
        auto msk = std::make_shared<std::vector<uint8_t>>(use.begin(), use.end());
        g.node(out.id).backward = [&g, li = logits.id, oi = out.id, tgt, msk, lse] {
            const T go = g.node(oi).grad[0];
            if (go == T(0)) return;
            auto& ln = g.node(li);
            auto lv = detail::vmap<T>(ln);
            auto lg = detail::gmap<T>(ln);
            for (int i = 0; i < ln.rows; ++i) {
                if (!(*msk)[static_cast<size_t>(i)]) continue;
                const T l = (*lse)[static_cast<size_t>(i)];
                lg.row(i).array() += go * (lv.row(i).array() - l).exp();
                lg(i, (*tgt)[static_cast<size_t>(i)]) -= go;
            }
        };
    }
    return {out, count};
}

}  // namespace slm::numerics
