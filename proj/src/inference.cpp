#include "slm/inference.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>

namespace slm::inference {

using model::SpeechLM;
using sequence::Layout;
using sequence::Position;
using sequence::SegmentKind;
using tokens::AcousticSequence;
using tokens::SemanticSequence;

namespace {

using RowVec = Eigen::Matrix<float, 1, Eigen::Dynamic>;
using ConstMat = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic,
                                                Eigen::RowMajor>>;
using ConstRow = Eigen::Map<const Eigen::Matrix<float, 1, Eigen::Dynamic>>;

ConstMat mat_of(const model::ParamStore<float>::Entry& e) {
    return ConstMat(e.value.data(), e.rows, e.cols);
}
ConstRow row_of(const model::ParamStore<float>::Entry& e) {
    return ConstRow(e.value.data(), e.cols);
}

void layer_norm_row(RowVec& x, const model::ParamStore<float>::Entry& gain,
                    const model::ParamStore<float>::Entry& bias) {
    const float mean = x.mean();
    const float var = (x.array() - mean).square().mean();
    const float inv = 1.0f / std::sqrt(var + 1e-5f);
    x = (((x.array() - mean) * inv) * row_of(gain).array() + row_of(bias).array()).matrix();
}

void gelu_row(RowVec& x) {
    constexpr float c0 = 0.7978845608028654f;
    constexpr float c1 = 0.044715f;
    for (int i = 0; i < x.size(); ++i) {
        const float v = x(i);
        x(i) = 0.5f * v * (1.0f + std::tanh(c0 * (v + c1 * v * v * v)));
    }
}

}  // namespace

void DecodeConfig::validate() const {
    SLM_REQUIRE(beam_size >= 1, "DecodeConfig: beam_size must be >= 1");
    SLM_REQUIRE(temperature > 0.0, "DecodeConfig: temperature must be positive");
    SLM_REQUIRE(max_sem_len >= 1 && max_ac_len >= 1, "DecodeConfig: length caps must be >= 1");
    SLM_REQUIRE(prompt_ratio >= 0.0 && prompt_ratio <= 1.0,
                "DecodeConfig: prompt_ratio must be in [0, 1]");
}

IncrementalDecoder::IncrementalDecoder(const SpeechLM<float>& m) : model_(&m) {
    SLM_REQUIRE(m.has_ar_head(), "IncrementalDecoder: model has no AR stack");
}

IncrementalDecoder::State IncrementalDecoder::fresh_state() const {
    State s;
    const size_t layers = model_->ar_layer_params().size();
    s.k_cache.resize(layers);
    s.v_cache.resize(layers);
    return s;
}

std::vector<float> IncrementalDecoder::step(State& state, const Position& pos, int index) const {
    const auto& cfg = model_->config();
    const auto& params = model_->params().entries;
    SLM_REQUIRE(index == state.len, "IncrementalDecoder: positions must be fed in order");
    SLM_REQUIRE(index < cfg.max_len, "IncrementalDecoder: sequence exceeds max_len");
    const int e = cfg.embed_dim;
    const int d = cfg.model_dim;
    const int heads = cfg.heads;
    const int dh = d / heads;
    const float inv_scale = 1.0f / std::sqrt(static_cast<float>(dh));

    // Token + position embedding, matching SpeechLM::embed_positions.
    RowVec emb = RowVec::Zero(e);
    if (pos.kind == SegmentKind::AC_PROMPT) {
        SLM_REQUIRE(cfg.acoustic_embeddings,
                    "IncrementalDecoder: prompt frame but model has no acoustic tables");
        for (int c = 1; c <= cfg.vocab.num_codebooks; ++c)
            emb += mat_of(params[static_cast<size_t>(model_->idx_ac_embed(c))])
                       .row(pos.frame[static_cast<size_t>(c - 1)]);
    } else {
        SLM_REQUIRE(pos.ar_id >= 0 && pos.ar_id < cfg.vocab.ar_vocab_size(),
                    "IncrementalDecoder: AR id out of range");
        emb += mat_of(params[static_cast<size_t>(model_->idx_ar_embed())]).row(pos.ar_id);
    }
    emb += mat_of(params[static_cast<size_t>(model_->idx_pos_embed())]).row(index);

    RowVec x = emb * mat_of(params[static_cast<size_t>(model_->idx_lift_w())]);
    x += row_of(params[static_cast<size_t>(model_->idx_lift_b())]);

    const auto& layers = model_->ar_layer_params();
    for (size_t l = 0; l < layers.size(); ++l) {
        const auto& lp = layers[l];
        RowVec normed = x;
        layer_norm_row(normed, params[static_cast<size_t>(lp.ln1_g)], params[static_cast<size_t>(lp.ln1_b)]);
        RowVec q = normed * mat_of(params[static_cast<size_t>(lp.wq)]) + row_of(params[static_cast<size_t>(lp.bq)]);
        RowVec k = normed * mat_of(params[static_cast<size_t>(lp.wk)]) + row_of(params[static_cast<size_t>(lp.bk)]);
        RowVec v = normed * mat_of(params[static_cast<size_t>(lp.wv)]) + row_of(params[static_cast<size_t>(lp.bv)]);

        auto& kc = state.k_cache[l];
        auto& vc = state.v_cache[l];
        kc.insert(kc.end(), k.data(), k.data() + d);
        vc.insert(vc.end(), v.data(), v.data() + d);
        const int n = state.len + 1;

        RowVec attn(d);
        std::vector<float> scores(static_cast<size_t>(n));
        for (int h = 0; h < heads; ++h) {
            const int off = h * dh;
            float max_score = -std::numeric_limits<float>::infinity();
            for (int j = 0; j < n; ++j) {
                const float* kj = kc.data() + static_cast<size_t>(j) * d + off;
                float dot = 0.0f;
                for (int t = 0; t < dh; ++t) dot += q(off + t) * kj[t];
                scores[static_cast<size_t>(j)] = dot * inv_scale;
                max_score = std::max(max_score, scores[static_cast<size_t>(j)]);
            }
            float denom = 0.0f;
            for (int j = 0; j < n; ++j) {
                scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - max_score);
                denom += scores[static_cast<size_t>(j)];
            }
            for (int t = 0; t < dh; ++t) {
                float acc = 0.0f;
                for (int j = 0; j < n; ++j)
                    acc += scores[static_cast<size_t>(j)] * vc[static_cast<size_t>(j) * d + off + t];
                attn(off + t) = acc / denom;
            }
        }
        x += attn * mat_of(params[static_cast<size_t>(lp.wo)]) + row_of(params[static_cast<size_t>(lp.bo)]);

        RowVec normed2 = x;
        layer_norm_row(normed2, params[static_cast<size_t>(lp.ln2_g)], params[static_cast<size_t>(lp.ln2_b)]);
        RowVec hidden = normed2 * mat_of(params[static_cast<size_t>(lp.w1)]) + row_of(params[static_cast<size_t>(lp.b1)]);
        gelu_row(hidden);
        x += hidden * mat_of(params[static_cast<size_t>(lp.w2)]) + row_of(params[static_cast<size_t>(lp.b2)]);
    }
    state.len += 1;

    RowVec h = x;
    layer_norm_row(h, params[static_cast<size_t>(model_->idx_ar_final_g())],
                   params[static_cast<size_t>(model_->idx_ar_final_b())]);
    RowVec logits = h * mat_of(params[static_cast<size_t>(model_->idx_ar_head())]);
    return {logits.data(), logits.data() + logits.size()};
}

std::vector<float> IncrementalDecoder::prefix(State& state,
                                              const std::vector<Position>& positions) const {
    SLM_REQUIRE(!positions.empty(), "IncrementalDecoder: empty prefix");
    std::vector<float> logits;
    for (const auto& pos : positions) logits = step(state, pos, state.len);
    return logits;
}

namespace {

std::vector<Position> semantic_prefix(const tokens::VocabSpec& vocab, const SemanticSequence& src) {
    SLM_REQUIRE(!src.ids.empty(), "semantic prefix: empty source sequence");
    std::vector<Position> out;
    out.reserve(src.ids.size() + 1);
    for (TokenId id : src.ids) {
        SLM_REQUIRE(id >= 0 && id < vocab.semantic_size, "semantic prefix: id out of vocabulary");
        out.push_back({SegmentKind::SRC_SEM, vocab.ar_id_of_semantic(id), {}});
    }
    out.push_back({SegmentKind::SEP_SEM, vocab.sep_sem, {}});
    return out;
}

void append_acoustic_prefix(std::vector<Position>& prefix, const tokens::VocabSpec& vocab,
                            const SemanticSequence& tgt, const AcousticSequence& prompt) {
    if (!tgt.ids.empty()) {
        for (TokenId id : tgt.ids)
            prefix.push_back({SegmentKind::TGT_SEM, vocab.ar_id_of_semantic(id), {}});
        prefix.push_back({SegmentKind::EOS_SEM, vocab.eos_sem, {}});
    }
    for (size_t i = 0; i < prompt.num_frames(); ++i) {
        std::vector<TokenId> frame(static_cast<size_t>(vocab.num_codebooks));
        for (int c = 0; c < vocab.num_codebooks; ++c) frame[static_cast<size_t>(c)] = prompt.streams[static_cast<size_t>(c)][i];
        prefix.push_back({SegmentKind::AC_PROMPT, vocab.ar_id_of_acoustic(frame[0]), std::move(frame)});
    }
    prefix.push_back({SegmentKind::SEP_AC, vocab.sep_ac, {}});
}

double log_softmax_at(const std::vector<float>& logits, const std::vector<TokenId>& allowed,
                      TokenId id) {
    double mx = -std::numeric_limits<double>::infinity();
    for (TokenId a : allowed) mx = std::max(mx, static_cast<double>(logits[static_cast<size_t>(a)]));
    double denom = 0.0;
    for (TokenId a : allowed) denom += std::exp(static_cast<double>(logits[static_cast<size_t>(a)]) - mx);
    return static_cast<double>(logits[static_cast<size_t>(id)]) - mx - std::log(denom);
}

}  // namespace

SemanticSequence beam_search_semantic(const SpeechLM<float>& m, const SemanticSequence& src,
                                      const DecodeConfig& config, bool* truncated) {
    config.validate();
    const auto& vocab = m.config().vocab;
    IncrementalDecoder dec(m);

    std::vector<TokenId> allowed;
    for (TokenId u = 0; u < vocab.semantic_size; ++u) allowed.push_back(vocab.ar_id_of_semantic(u));
    allowed.push_back(vocab.eos_sem);

    struct Hyp {
        IncrementalDecoder::State state;
        std::vector<TokenId> units; // raw semantic units
        double logp = 0.0;
        std::vector<float> logits;  // logits after the last fed token
    };
    struct Finished {
        std::vector<TokenId> units;
        double norm_score;
    };

    auto run = [&](int beam_width) -> std::pair<std::vector<Finished>, std::optional<Finished>> {
        Hyp root;
        root.state = dec.fresh_state();
        root.logits = dec.prefix(root.state, semantic_prefix(vocab, src));
        std::vector<Hyp> live;
        live.push_back(std::move(root));
        std::vector<Finished> finished;

        const size_t prefix_len = src.ids.size() + 1;
        for (int t = 0; t < config.max_sem_len && !live.empty(); ++t) {
            struct Cand {
                size_t hyp;
                TokenId ar_id;
                double logp;
            };
            std::vector<Cand> cands;
            for (size_t hi = 0; hi < live.size(); ++hi) {
                for (TokenId a : allowed) {
                    if (t == 0 && a == vocab.eos_sem) continue; // at least one unit
                    cands.push_back({hi, a, live[hi].logp + log_softmax_at(live[hi].logits, allowed, a)});
                }
            }
            std::stable_sort(cands.begin(), cands.end(),
                             [](const Cand& a, const Cand& b) { return a.logp > b.logp; });
            if (static_cast<int>(cands.size()) > beam_width) cands.resize(static_cast<size_t>(beam_width));

            std::vector<Hyp> next;
            for (const Cand& c : cands) {
                if (c.ar_id == vocab.eos_sem) {
                    const double norm = c.logp / static_cast<double>(t + 1); // generated incl. EOS
                    finished.push_back({live[c.hyp].units, norm});
                    continue;
                }
                Hyp h;
                h.state = live[c.hyp].state; // fork the KV cache
                h.units = live[c.hyp].units;
                h.units.push_back(c.ar_id); // semantic AR ids equal raw unit ids
                h.logp = c.logp;
                h.logits = dec.step(h.state, {SegmentKind::TGT_SEM, c.ar_id, {}},
                                    static_cast<int>(prefix_len) + t);
                next.push_back(std::move(h));
            }
            live = std::move(next);
        }
        std::optional<Finished> best_live;
        for (const Hyp& h : live) {
            const double norm = h.logp / static_cast<double>(std::max<size_t>(1, h.units.size()));
            if (!best_live || norm > best_live->norm_score) best_live = Finished{h.units, norm};
        }
        return {std::move(finished), std::move(best_live)};
    };

    auto [finished, best_live] = run(config.beam_size);
    if (config.beam_size > 1) {
        // The greedy rollout always participates, so beam output never scores
        // below greedy under the shared normalization.
        auto [greedy_finished, greedy_live] = run(1);
        for (auto& f : greedy_finished) finished.push_back(std::move(f));
        if (finished.empty() && greedy_live &&
            (!best_live || greedy_live->norm_score > best_live->norm_score))
            best_live = greedy_live;
    }

    if (truncated) *truncated = finished.empty();
    const Finished* best = nullptr;
    for (const auto& f : finished)
        if (!best || f.norm_score > best->norm_score) best = &f;
    if (!best) {
        SLM_REQUIRE(best_live.has_value(), "beam_search_semantic: no hypothesis produced");
        return SemanticSequence{best_live->units};
    }
    return SemanticSequence{best->units};
}

std::vector<TokenId> sample_first_stream(const SpeechLM<float>& m, const SemanticSequence& src,
                                         const SemanticSequence& tgt, const AcousticSequence& prompt,
                                         const DecodeConfig& config, Rng& rng, bool* truncated) {
    config.validate();
    const auto& vocab = m.config().vocab;
    IncrementalDecoder dec(m);

    std::vector<Position> prefix = semantic_prefix(vocab, src);
    append_acoustic_prefix(prefix, vocab, tgt, prompt);

    std::vector<TokenId> allowed;
    for (TokenId a = 0; a < vocab.acoustic_size; ++a) allowed.push_back(vocab.ar_id_of_acoustic(a));
    allowed.push_back(vocab.eos_ac);

    auto state = dec.fresh_state();
    std::vector<float> logits = dec.prefix(state, prefix);
    std::vector<TokenId> out;
    bool stopped = false;
    const bool argmax = config.temperature < 1e-6;
    for (int t = 0; t < config.max_ac_len; ++t) {
        TokenId pick = allowed[0];
        if (argmax) {
            float best = -std::numeric_limits<float>::infinity();
            for (TokenId a : allowed)
                if (logits[static_cast<size_t>(a)] > best) {
                    best = logits[static_cast<size_t>(a)];
                    pick = a;
                }
        } else {
            double mx = -std::numeric_limits<double>::infinity();
            for (TokenId a : allowed)
                mx = std::max(mx, static_cast<double>(logits[static_cast<size_t>(a)]) / config.temperature);
            double denom = 0.0;
            std::vector<double> probs;
            probs.reserve(allowed.size());
            for (TokenId a : allowed) {
                const double p =
                    std::exp(static_cast<double>(logits[static_cast<size_t>(a)]) / config.temperature - mx);
                probs.push_back(p);
                denom += p;
            }
            const double u = rng.uniform_real() * denom;
            double acc = 0.0;
            for (size_t i = 0; i < allowed.size(); ++i) {
                acc += probs[i];
                if (u < acc || i + 1 == allowed.size()) {
                    pick = allowed[i];
                    break;
                }
            }
        }
        if (pick == vocab.eos_ac) {
            stopped = true;
            break;
        }
        out.push_back(vocab.acoustic_of_ar_id(pick));
        logits = dec.step(state, {SegmentKind::TGT_AC1, pick, {}},
                          static_cast<int>(prefix.size()) + t);
    }
    if (truncated) *truncated = !stopped;
    return out;
}

namespace {

AcousticSequence with_dummy_residuals(const std::vector<TokenId>& first_stream, int num_codebooks) {
    AcousticSequence ac;
    ac.streams.assign(static_cast<size_t>(num_codebooks), {});
    ac.streams[0] = first_stream;
    for (int c = 1; c < num_codebooks; ++c)
        ac.streams[static_cast<size_t>(c)].assign(first_stream.size(), 0);
    return ac;
}

}  // namespace

AcousticSequence nar_decode_streams(const SpeechLM<float>& m, const SemanticSequence& src,
                                    const SemanticSequence& tgt, const AcousticSequence& prompt,
                                    const std::vector<TokenId>& first_stream) {
    const auto& vocab = m.config().vocab;
    const int C = vocab.num_codebooks;
    AcousticSequence out;
    out.style = -1;
    out.streams.assign(static_cast<size_t>(C), {});
    out.streams[0] = first_stream;
    if (first_stream.empty()) {
        return out;
    }
    if (C == 1) return out;
    SLM_REQUIRE(m.has_nar(), "nar_decode_streams: model has no NAR stack");

    const AcousticSequence scaffold = with_dummy_residuals(first_stream, C);
    sequence::CotSample sample =
        tgt.ids.empty() ? sequence::build_acoustic_task_sample(vocab, src, prompt, scaffold)
                        : sequence::build_cot_sample(vocab, src, tgt, prompt, scaffold);

    model::RunContext<float> ctx(m, nullptr);
    auto ar = m.ar_forward(ctx, sample, /*train_mode=*/false, nullptr);
    auto nar = m.nar_forward(ctx, ar, sample, /*train_mode=*/false, nullptr);

    const size_t frames = first_stream.size();
    SLM_REQUIRE(nar.positions.size() == frames, "nar_decode_streams: position count mismatch");
    for (int c = 2; c <= C; ++c) {
        const auto& logits = nar.logits[static_cast<size_t>(c - 2)];
        auto vals = logits.values();
        const int va = logits.cols();
        auto& stream = out.streams[static_cast<size_t>(c - 1)];
        stream.resize(frames);
        for (size_t i = 0; i < frames; ++i) {
            const float* row = vals.data() + i * static_cast<size_t>(va);
            stream[i] = static_cast<TokenId>(
                std::max_element(row, row + va) - row);
        }
    }
    return out;
}

AcousticSequence prefix_crop(const AcousticSequence& ac, double ratio) {
    SLM_REQUIRE(ratio >= 0.0 && ratio <= 1.0, "prefix_crop: ratio out of range");
    ac.validate();
    const size_t t_a = ac.num_frames();
    size_t len = static_cast<size_t>(std::floor(ratio * static_cast<double>(t_a)));
    if (ratio > 0.0 && len == 0 && t_a > 0) len = 1;
    AcousticSequence out;
    out.style = ac.style;
    out.streams.reserve(ac.streams.size());
    for (const auto& stream : ac.streams)
        out.streams.emplace_back(stream.begin(), stream.begin() + static_cast<long>(len));
    return out;
}

TranslateResult translate(const SpeechLM<float>& m, Layout layout, const SemanticSequence& src_sem,
                          const AcousticSequence& src_ac, const DecodeConfig& config, Rng& rng) {
    config.validate();
    TranslateResult res;
    const uint64_t nar_before = m.nar_forward_calls();
    using clock = std::chrono::steady_clock;

    const bool semantic_stage = layout == Layout::cot || layout == Layout::semantic_only;
    if (semantic_stage) {
        const auto t0 = clock::now();
        res.sem = beam_search_semantic(m, src_sem, config, &res.sem_truncated);
        res.timing.semantic_s = std::chrono::duration<double>(clock::now() - t0).count();
    }
    if (layout == Layout::semantic_only) {
        // No acoustic pathway; only the translated semantics are returned.
        return res;
    }

    const AcousticSequence prompt = prefix_crop(src_ac, config.prompt_ratio);
    // no_cot / no_semantic models condition on S_src only
    const SemanticSequence no_tgt;
    const SemanticSequence& tgt_for_prefix = layout == Layout::cot ? res.sem : no_tgt;

    const auto t1 = clock::now();
    std::vector<TokenId> first =
        sample_first_stream(m, src_sem, tgt_for_prefix, prompt, config, rng, &res.ac_truncated);
    res.timing.first_stream_s = std::chrono::duration<double>(clock::now() - t1).count();

    const auto t2 = clock::now();
    res.ac = nar_decode_streams(m, src_sem, tgt_for_prefix, prompt, first);
    res.timing.residual_s = std::chrono::duration<double>(clock::now() - t2).count();

    res.nar_forward_calls = m.nar_forward_calls() - nar_before;
    return res;
}

}  // namespace slm::inference
