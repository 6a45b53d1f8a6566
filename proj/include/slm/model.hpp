#pragma once

#include <atomic>
#include <map>
#include <string>
#include <vector>

#include "slm/rng.hpp"
#include "slm/sequence.hpp"
#include "slm/tensor.hpp"
#include "slm/tokens.hpp"

namespace slm::model {

struct ModelConfig {
    int ar_layers = 12;
    int nar_layers = 12;
    int embed_dim = 512;
    int model_dim = 1024;
    int ffn_dim = 4096;
    int heads = 16;
    double dropout = 0.1;
    tokens::VocabSpec vocab;
    int max_len = 2048;
    // Acoustic-prompt embedding tables; off for a semantic-only cascade member.
    bool acoustic_embeddings = true;

    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

struct ParamCount {
    struct Item {
        std::string component;
        long long count;
    };
    std::vector<Item> items;
    long long total = 0;

    long long component(const std::string& name) const;
};

// Exact scalar parameter count for a config, itemized per component. Matches
// the constructed model's parameter store entry for entry.
ParamCount param_count(const ModelConfig& config);

template <typename T>
struct ParamStore {
    struct Entry {
        std::string name;
        int rows = 0, cols = 0;
        std::vector<T> value;

        size_t count() const { return static_cast<size_t>(rows) * cols; }
    };

    std::vector<Entry> entries;

    int add(const std::string& name, int rows, int cols) {
        entries.push_back({name, rows, cols, std::vector<T>(static_cast<size_t>(rows) * cols)});
        return static_cast<int>(entries.size()) - 1;
    }

    int find(const std::string& name) const {
        for (size_t i = 0; i < entries.size(); ++i)
            if (entries[i].name == name) return static_cast<int>(i);
        return -1;
    }

    size_t total_scalars() const {
        size_t n = 0;
        for (const auto& e : entries) n += e.count();
        return n;
    }
};

// Gradient buffers aligned with a ParamStore; one per reduction group so batch
// summation order stays fixed regardless of thread count.
template <typename T>
struct GradStore {
    std::vector<std::vector<T>> grads;

    void init(const ParamStore<T>& params) {
        grads.clear();
        grads.reserve(params.entries.size());
        for (const auto& e : params.entries) grads.emplace_back(e.count(), T(0));
    }

    void zero() {
        for (auto& g : grads) std::fill(g.begin(), g.end(), T(0));
    }

    // this += other, entry by entry, in index order
    void accumulate(const GradStore& other) {
        for (size_t i = 0; i < grads.size(); ++i) {
            const auto& src = other.grads[i];
            auto& dst = grads[i];
            for (size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
    }
};

template <typename T>
class SpeechLM;

// One forward pass: a graph plus lazily-bound parameter leaves. With a null
// GradStore the pass runs gradient-free (evaluation mode).
template <typename T>
struct RunContext {
    numerics::Graph<T> graph;
    const SpeechLM<T>* model = nullptr;
    GradStore<T>* grads = nullptr;
    std::vector<numerics::Tensor<T>> bound;

    explicit RunContext(const SpeechLM<T>& m, GradStore<T>* g = nullptr);
    numerics::Tensor<T> param(int index);
};

template <typename T>
class SpeechLM {
public:
    SpeechLM(ModelConfig config, uint64_t seed);

    const ModelConfig& config() const { return config_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    bool has_ar_head() const { return config_.ar_layers >= 1; }
    bool has_nar() const {
        return config_.nar_layers >= 1 && config_.vocab.num_codebooks >= 2;
    }

    // Mixed-role token embedding plus learned absolute position embedding,
    // [count, embed_dim] for positions [from, from+count) of the sample.
    numerics::Tensor<T> embed_positions(RunContext<T>& ctx, const sequence::CotSample& sample,
                                        size_t from, size_t count) const;
    numerics::Tensor<T> embed_position(RunContext<T>& ctx, const sequence::CotSample& sample,
                                       size_t index) const {
        return embed_positions(ctx, sample, index, 1);
    }

    struct ArForward {
        numerics::Tensor<T> h;      // [n, model_dim]
        numerics::Tensor<T> logits; // [n, ar_vocab]; invalid when the model has no AR head
    };
    ArForward ar_forward(RunContext<T>& ctx, const sequence::CotSample& sample, bool train_mode,
                         Rng* dropout_rng = nullptr) const;

    struct NarForward {
        std::vector<numerics::Tensor<T>> logits; // per codebook 2..C, [m, acoustic_size]
        std::vector<int> positions;              // TGT_AC1 positions, ascending
    };
    // Runs the NAR stack once with full attention over the whole H_ar sequence;
    // heads are read only at TGT_AC1 positions.
    NarForward nar_forward(RunContext<T>& ctx, const ArForward& ar,
                           const sequence::CotSample& sample, bool train_mode,
                           Rng* dropout_rng = nullptr) const;

    uint64_t nar_forward_calls() const { return nar_calls_.load(); }
    void reset_nar_forward_calls() const { nar_calls_.store(0); }

    // Named parameter indices.
    struct LayerParams {
        int ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
        int ln2_g, ln2_b, w1, b1, w2, b2;
    };
    int idx_ar_embed() const { return idx_ar_embed_; }
    int idx_ac_embed(int codebook) const { return idx_ac_embed_.at(static_cast<size_t>(codebook)); }
    int idx_pos_embed() const { return idx_pos_embed_; }
    int idx_lift_w() const { return idx_lift_w_; }
    int idx_lift_b() const { return idx_lift_b_; }
    const std::vector<LayerParams>& ar_layer_params() const { return ar_layers_; }
    const std::vector<LayerParams>& nar_layer_params() const { return nar_layers_; }
    int idx_ar_final_g() const { return idx_ar_final_g_; }
    int idx_ar_final_b() const { return idx_ar_final_b_; }
    int idx_nar_final_g() const { return idx_nar_final_g_; }
    int idx_nar_final_b() const { return idx_nar_final_b_; }
    int idx_ar_head() const { return idx_ar_head_; }
    const std::vector<int>& idx_nar_heads() const { return idx_nar_heads_; }

private:
    numerics::Tensor<T> decoder_layer(RunContext<T>& ctx, numerics::Tensor<T> x,
                                      const LayerParams& lp, numerics::AttnMode mode,
                                      bool train_mode, Rng* dropout_rng) const;

    ModelConfig config_;
    ParamStore<T> params_;

    int idx_ar_embed_ = -1;
    std::vector<int> idx_ac_embed_; // per codebook, only when acoustic_embeddings
    int idx_pos_embed_ = -1;
    int idx_lift_w_ = -1, idx_lift_b_ = -1;
    std::vector<LayerParams> ar_layers_, nar_layers_;
    int idx_ar_final_g_ = -1, idx_ar_final_b_ = -1;
    int idx_nar_final_g_ = -1, idx_nar_final_b_ = -1;
    int idx_ar_head_ = -1;
    std::vector<int> idx_nar_heads_; // codebooks 2..C

    mutable std::atomic<uint64_t> nar_calls_{0};
};

// ---------------------------------------------------------------------------
// implementation

template <typename T>
RunContext<T>::RunContext(const SpeechLM<T>& m, GradStore<T>* g) : model(&m), grads(g) {
    bound.resize(m.params().entries.size());
}

template <typename T>
numerics::Tensor<T> RunContext<T>::param(int index) {
    auto& slot = bound[static_cast<size_t>(index)];
    if (!slot.valid()) {
        // const_cast: the graph never writes leaf values, only reads them.
        auto& entry = const_cast<ParamStore<T>&>(model->params()).entries[static_cast<size_t>(index)];
        T* grad = grads ? grads->grads[static_cast<size_t>(index)].data() : nullptr;
        slot = graph.leaf(entry.rows, entry.cols, entry.value.data(), grad);
    }
    return slot;
}

template <typename T>
SpeechLM<T>::SpeechLM(ModelConfig config, uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    const auto& v = config_.vocab;
    const int e = config_.embed_dim;
    const int d = config_.model_dim;
    const int f = config_.ffn_dim;
    const int C = v.num_codebooks;

    idx_ar_embed_ = params_.add("embed.ar", v.ar_vocab_size(), e);
    if (config_.acoustic_embeddings) {
        idx_ac_embed_.resize(static_cast<size_t>(C) + 1, -1);
        for (int c = 1; c <= C; ++c)
            idx_ac_embed_[static_cast<size_t>(c)] = params_.add(cat("embed.ac.", c), v.acoustic_size, e);
    }
    idx_pos_embed_ = params_.add("embed.pos", config_.max_len, e);
    idx_lift_w_ = params_.add("lift.w", e, d);
    idx_lift_b_ = params_.add("lift.b", 1, d);

    auto add_layer = [&](const std::string& prefix) {
        LayerParams lp;
        lp.ln1_g = params_.add(prefix + ".ln1.g", 1, d);
        lp.ln1_b = params_.add(prefix + ".ln1.b", 1, d);
        lp.wq = params_.add(prefix + ".attn.wq", d, d);
        lp.bq = params_.add(prefix + ".attn.bq", 1, d);
        lp.wk = params_.add(prefix + ".attn.wk", d, d);
        lp.bk = params_.add(prefix + ".attn.bk", 1, d);
        lp.wv = params_.add(prefix + ".attn.wv", d, d);
        lp.bv = params_.add(prefix + ".attn.bv", 1, d);
        lp.wo = params_.add(prefix + ".attn.wo", d, d);
        lp.bo = params_.add(prefix + ".attn.bo", 1, d);
        lp.ln2_g = params_.add(prefix + ".ln2.g", 1, d);
        lp.ln2_b = params_.add(prefix + ".ln2.b", 1, d);
        lp.w1 = params_.add(prefix + ".ffn.w1", d, f);
        lp.b1 = params_.add(prefix + ".ffn.b1", 1, f);
        lp.w2 = params_.add(prefix + ".ffn.w2", f, d);
        lp.b2 = params_.add(prefix + ".ffn.b2", 1, d);
        return lp;
    };
    for (int l = 0; l < config_.ar_layers; ++l) ar_layers_.push_back(add_layer(cat("ar.", l)));
    if (config_.ar_layers >= 1) {
        idx_ar_final_g_ = params_.add("ar.final_ln.g", 1, d);
        idx_ar_final_b_ = params_.add("ar.final_ln.b", 1, d);
        idx_ar_head_ = params_.add("head.ar", d, v.ar_vocab_size());
    }
    for (int l = 0; l < config_.nar_layers; ++l) nar_layers_.push_back(add_layer(cat("nar.", l)));
    if (config_.nar_layers >= 1) {
        idx_nar_final_g_ = params_.add("nar.final_ln.g", 1, d);
        idx_nar_final_b_ = params_.add("nar.final_ln.b", 1, d);
        for (int c = 2; c <= C; ++c)
            idx_nar_heads_.push_back(params_.add(cat("head.nar.", c), d, v.acoustic_size));
    }

    // Seed-controlled init: N(0, 0.02) embeddings, Glorot-uniform linear maps,
    // unit gain / zero bias layer norms.
    Rng rng(derive_seed(seed, {0x1217u}));
    for (auto& entry : params_.entries) {
        const bool is_embed = entry.name.rfind("embed.", 0) == 0;
        const bool is_gain = entry.name.size() >= 2 && entry.name.substr(entry.name.size() - 2) == ".g";
        const bool is_bias_vec = entry.rows == 1;
        if (is_embed) {
            for (auto& x : entry.value) x = static_cast<T>(rng.gaussian() * 0.02);
        } else if (is_gain && is_bias_vec) {
            std::fill(entry.value.begin(), entry.value.end(), T(1));
        } else if (is_bias_vec) {
            std::fill(entry.value.begin(), entry.value.end(), T(0));
        } else {
            const double bound = std::sqrt(6.0 / (entry.rows + entry.cols));
            for (auto& x : entry.value) x = static_cast<T>(rng.uniform_real(-bound, bound));
        }
    }
}

template <typename T>
numerics::Tensor<T> SpeechLM<T>::embed_positions(RunContext<T>& ctx,
                                                 const sequence::CotSample& sample, size_t from,
                                                 size_t count) const {
    SLM_REQUIRE(from + count <= sample.size(), "embed_positions: range out of bounds");
    SLM_REQUIRE(from + count <= static_cast<size_t>(config_.max_len),
                "embed_positions: sequence exceeds max_len");
    const int C = config_.vocab.num_codebooks;
    const int n = static_cast<int>(count);

    std::vector<numerics::Tensor<T>> tables;
    std::vector<std::vector<int>> indices;
    tables.push_back(ctx.param(idx_ar_embed_));
    indices.emplace_back(count, -1);
    tables.push_back(ctx.param(idx_pos_embed_));
    indices.emplace_back(count, -1);
    int first_ac_table = -1;
    if (config_.acoustic_embeddings) {
        first_ac_table = static_cast<int>(tables.size());
        for (int c = 1; c <= C; ++c) {
            tables.push_back(ctx.param(idx_ac_embed_[static_cast<size_t>(c)]));
            indices.emplace_back(count, -1);
        }
    }

    for (size_t i = 0; i < count; ++i) {
        const auto& pos = sample.positions[from + i];
        indices[1][i] = static_cast<int>(from + i);
        if (pos.kind == sequence::SegmentKind::AC_PROMPT) {
            SLM_REQUIRE(config_.acoustic_embeddings,
                        "embed_positions: prompt frame but model has no acoustic tables");
            SLM_REQUIRE(static_cast<int>(pos.frame.size()) == C,
                        "embed_positions: frame width mismatch");
            for (int c = 1; c <= C; ++c)
                indices[static_cast<size_t>(first_ac_table + c - 1)][i] = pos.frame[static_cast<size_t>(c - 1)];
        } else {
            SLM_REQUIRE(pos.ar_id >= 0 && pos.ar_id < config_.vocab.ar_vocab_size(),
                        "embed_positions: AR id out of range");
            indices[0][i] = pos.ar_id;
        }
    }
    return numerics::multi_gather_sum(tables, indices, n);
}

template <typename T>
numerics::Tensor<T> SpeechLM<T>::decoder_layer(RunContext<T>& ctx, numerics::Tensor<T> x,
                                               const LayerParams& lp, numerics::AttnMode mode,
                                               bool train_mode, Rng* dropout_rng) const {
    using namespace numerics;
    auto normed = layer_norm(x, ctx.param(lp.ln1_g), ctx.param(lp.ln1_b));
    auto q = linear(normed, ctx.param(lp.wq), ctx.param(lp.bq));
    auto k = linear(normed, ctx.param(lp.wk), ctx.param(lp.bk));
    auto v = linear(normed, ctx.param(lp.wv), ctx.param(lp.bv));
    auto attn = attention(q, k, v, config_.heads, mode);
    auto proj = linear(attn, ctx.param(lp.wo), ctx.param(lp.bo));
    x = add(x, dropout(proj, config_.dropout, dropout_rng, train_mode));
    auto normed2 = layer_norm(x, ctx.param(lp.ln2_g), ctx.param(lp.ln2_b));
    auto ff = linear(gelu(linear(normed2, ctx.param(lp.w1), ctx.param(lp.b1))),
                     ctx.param(lp.w2), ctx.param(lp.b2));
    return add(x, dropout(ff, config_.dropout, dropout_rng, train_mode));
}

template <typename T>
typename SpeechLM<T>::ArForward SpeechLM<T>::ar_forward(RunContext<T>& ctx,
                                                        const sequence::CotSample& sample,
                                                        bool train_mode, Rng* dropout_rng) const {
    using namespace numerics;
    const size_t n = sample.size();
    SLM_REQUIRE(n >= 1, "ar_forward: empty sample");
    SLM_REQUIRE(n <= static_cast<size_t>(config_.max_len), "ar_forward: sample exceeds max_len");
    SLM_REQUIRE(!train_mode || config_.dropout == 0.0 || dropout_rng != nullptr,
                "ar_forward: dropout rng required in train mode");

    auto x = embed_positions(ctx, sample, 0, n);
    x = dropout(x, config_.dropout, dropout_rng, train_mode);
    x = linear(x, ctx.param(idx_lift_w_), ctx.param(idx_lift_b_));
    for (const auto& lp : ar_layers_)
        x = decoder_layer(ctx, x, lp, AttnMode::causal, train_mode, dropout_rng);

    ArForward out;
    if (config_.ar_layers >= 1) {
        out.h = layer_norm(x, ctx.param(idx_ar_final_g_), ctx.param(idx_ar_final_b_));
        out.logits = linear(out.h, ctx.param(idx_ar_head_));
    } else {
        out.h = x; // embedded sequence routed straight to the NAR stack
    }
    return out;
}

template <typename T>
typename SpeechLM<T>::NarForward SpeechLM<T>::nar_forward(RunContext<T>& ctx,
                                                          const ArForward& ar,
                                                          const sequence::CotSample& sample,
                                                          bool train_mode,
                                                          Rng* dropout_rng) const {
    using namespace numerics;
    SLM_REQUIRE(has_nar(), "nar_forward: model has no NAR stack or a single codebook");
    SLM_REQUIRE(static_cast<size_t>(ar.h.rows()) == sample.size(),
                "nar_forward: H_ar does not match the sample");
    nar_calls_.fetch_add(1, std::memory_order_relaxed);

    auto y = ar.h;
    for (const auto& lp : nar_layers_)
        y = decoder_layer(ctx, y, lp, AttnMode::full, train_mode, dropout_rng);
    y = layer_norm(y, ctx.param(idx_nar_final_g_), ctx.param(idx_nar_final_b_));

    NarForward out;
    for (size_t i = 0; i < sample.size(); ++i)
        if (sample.loss_mask_nar[i]) out.positions.push_back(static_cast<int>(i));
    auto rows = gather_rows(y, out.positions);
    out.logits.reserve(idx_nar_heads_.size());
    for (int head : idx_nar_heads_) out.logits.push_back(linear(rows, ctx.param(head)));
    return out;
}

}  // namespace slm::model
