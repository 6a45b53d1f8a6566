#include "slm/sequence.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace slm::sequence {

using nlohmann::json;

std::string to_string(SegmentKind k) {
    switch (k) {
        case SegmentKind::SRC_SEM: return "SRC_SEM";
        case SegmentKind::SEP_SEM: return "SEP_SEM";
        case SegmentKind::TGT_SEM: return "TGT_SEM";
        case SegmentKind::EOS_SEM: return "EOS_SEM";
        case SegmentKind::AC_PROMPT: return "AC_PROMPT";
        case SegmentKind::SEP_AC: return "SEP_AC";
        case SegmentKind::TGT_AC1: return "TGT_AC1";
        case SegmentKind::EOS_AC: return "EOS_AC";
    }
    return "?";
}

std::string to_string(Layout l) {
    switch (l) {
        case Layout::cot: return "cot";
        case Layout::no_cot: return "no_cot";
        case Layout::no_semantic: return "no_semantic";
        case Layout::semantic_only: return "semantic_only";
    }
    return "?";
}

Layout layout_from_string(const std::string& s) {
    if (s == "cot") return Layout::cot;
    if (s == "no_cot") return Layout::no_cot;
    if (s == "no_semantic") return Layout::no_semantic;
    if (s == "semantic_only") return Layout::semantic_only;
    fail_input("unknown layout: " + s);
}

void PromptPolicy::validate() const {
    SLM_REQUIRE(0.0 <= ratio_min && ratio_min <= ratio_max && ratio_max <= 1.0,
                "PromptPolicy: need 0 <= ratio_min <= ratio_max <= 1");
}

AcousticSequence crop_acoustic_prompt(const AcousticSequence& ac, const PromptPolicy& policy,
                                      Rng& rng) {
    policy.validate();
    ac.validate();
    const size_t t_a = ac.num_frames();
    SLM_REQUIRE(t_a >= 1, "crop_acoustic_prompt: empty acoustic sequence");

    const double ratio = rng.uniform_real(policy.ratio_min, policy.ratio_max);
    size_t len = static_cast<size_t>(std::floor(ratio * static_cast<double>(t_a)));
    if (ratio > 0.0 && len == 0) len = 1;
    if (len > t_a) len = t_a;

    size_t start = 0;
    if (policy.placement == PromptPolicy::Placement::random_start && len < t_a)
        start = rng.uniform_below(t_a - len + 1);

    AcousticSequence out;
    out.style = ac.style;
    out.streams.reserve(ac.streams.size());
    for (const auto& stream : ac.streams)
        out.streams.emplace_back(stream.begin() + start, stream.begin() + start + len);
    return out;
}

namespace {

struct Builder {
    const VocabSpec& vocab;
    CotSample sample;

    explicit Builder(const VocabSpec& v) : vocab(v) {
        sample.num_codebooks = v.num_codebooks;
    }

    void begin_segment(SegmentKind kind) {
        sample.segments.push_back({kind, sample.positions.size(), sample.positions.size()});
    }

    void push(SegmentKind kind, TokenId ar_id, std::vector<TokenId> frame = {}) {
        sample.positions.push_back({kind, ar_id, std::move(frame)});
        sample.segments.back().end = sample.positions.size();
    }

    void semantic_segment(SegmentKind kind, const SemanticSequence& sem) {
        begin_segment(kind);
        for (TokenId id : sem.ids) {
            SLM_REQUIRE(id >= 0 && id < vocab.semantic_size,
                        "sample builder: semantic id out of vocabulary");
            push(kind, vocab.ar_id_of_semantic(id));
        }
    }

    void special(SegmentKind kind, TokenId id) {
        begin_segment(kind);
        push(kind, id);
    }

    void acoustic_segment(SegmentKind kind, const AcousticSequence& ac) {
        ac.validate();
        if (ac.num_frames() == 0) return; // empty prompt: segment omitted entirely
        SLM_REQUIRE(ac.num_streams() == vocab.num_codebooks,
                    "sample builder: acoustic stream count mismatch");
        begin_segment(kind);
        for (size_t i = 0; i < ac.num_frames(); ++i) {
            std::vector<TokenId> frame(vocab.num_codebooks);
            for (int c = 0; c < vocab.num_codebooks; ++c) {
                const TokenId id = ac.streams[c][i];
                SLM_REQUIRE(id >= 0 && id < vocab.acoustic_size,
                            "sample builder: acoustic id out of vocabulary");
                frame[c] = id;
            }
            push(kind, vocab.ar_id_of_acoustic(frame[0]), std::move(frame));
        }
    }

    CotSample finish() {
        const size_t n = sample.positions.size();
        sample.ar_target.resize(n);
        sample.nar_target.resize(n);
        sample.loss_mask_ar.resize(n);
        sample.loss_mask_nar.resize(n);
        for (size_t i = 0; i < n; ++i) {
            const auto& pos = sample.positions[i];
            sample.ar_target[i] = i + 1 < n ? sample.positions[i + 1].ar_id : -1;
            const bool target_kind = pos.kind == SegmentKind::TGT_SEM ||
                                     pos.kind == SegmentKind::EOS_SEM ||
                                     pos.kind == SegmentKind::TGT_AC1 ||
                                     pos.kind == SegmentKind::EOS_AC;
            sample.loss_mask_ar[i] = target_kind ? 1 : 0;
            sample.loss_mask_nar[i] = pos.kind == SegmentKind::TGT_AC1 ? 1 : 0;
            if (sample.loss_mask_nar[i])
                sample.nar_target[i] =
                    std::vector<TokenId>(pos.frame.begin() + 1, pos.frame.end());
        }
        return std::move(sample);
    }
};

}  // namespace

CotSample build_cot_sample(const VocabSpec& vocab, const SemanticSequence& src_sem,
                           const SemanticSequence& tgt_sem, const AcousticSequence& prompt,
                           const AcousticSequence& tgt_ac) {
    SLM_REQUIRE(!src_sem.ids.empty(), "build_cot_sample: empty source semantics");
    SLM_REQUIRE(!tgt_sem.ids.empty(), "build_cot_sample: empty target semantics");
    Builder b(vocab);
    b.semantic_segment(SegmentKind::SRC_SEM, src_sem);
    b.special(SegmentKind::SEP_SEM, vocab.sep_sem);
    b.semantic_segment(SegmentKind::TGT_SEM, tgt_sem);
    b.special(SegmentKind::EOS_SEM, vocab.eos_sem);
    b.acoustic_segment(SegmentKind::AC_PROMPT, prompt);
    b.special(SegmentKind::SEP_AC, vocab.sep_ac);
    b.acoustic_segment(SegmentKind::TGT_AC1, tgt_ac);
    b.special(SegmentKind::EOS_AC, vocab.eos_ac);
    return b.finish();
}

CotSample build_acoustic_task_sample(const VocabSpec& vocab, const SemanticSequence& sem_prompt,
                                     const AcousticSequence& prompt,
                                     const AcousticSequence& tgt_ac) {
    SLM_REQUIRE(!sem_prompt.ids.empty(), "build_acoustic_task_sample: empty semantic prompt");
    Builder b(vocab);
    b.semantic_segment(SegmentKind::SRC_SEM, sem_prompt);
    b.special(SegmentKind::SEP_SEM, vocab.sep_sem);
    b.acoustic_segment(SegmentKind::AC_PROMPT, prompt);
    b.special(SegmentKind::SEP_AC, vocab.sep_ac);
    b.acoustic_segment(SegmentKind::TGT_AC1, tgt_ac);
    b.special(SegmentKind::EOS_AC, vocab.eos_ac);
    return b.finish();
}

std::pair<CotSample, CotSample> build_no_cot_samples(const VocabSpec& vocab,
                                                     const AlignedPair& pair,
                                                     const PromptPolicy& policy, Rng& rng) {
    const AcousticSequence prompt = crop_acoustic_prompt(pair.tgt_ac, policy, rng);
    CotSample translation = build_acoustic_task_sample(vocab, pair.src_sem, prompt, pair.tgt_ac);
    CotSample style_transfer = build_acoustic_task_sample(vocab, pair.tgt_sem, prompt, pair.tgt_ac);
    return {std::move(translation), std::move(style_transfer)};
}

CotSample build_no_semantic_sample(const VocabSpec& vocab, const AlignedPair& pair,
                                   const PromptPolicy& policy, Rng& rng) {
    const AcousticSequence prompt = crop_acoustic_prompt(pair.tgt_ac, policy, rng);
    return build_acoustic_task_sample(vocab, pair.src_sem, prompt, pair.tgt_ac);
}

CotSample build_semantic_only_sample(const VocabSpec& vocab, const SemanticSequence& src_sem,
                                     const SemanticSequence& tgt_sem) {
    SLM_REQUIRE(!src_sem.ids.empty(), "build_semantic_only_sample: empty source semantics");
    SLM_REQUIRE(!tgt_sem.ids.empty(), "build_semantic_only_sample: empty target semantics");
    Builder b(vocab);
    b.semantic_segment(SegmentKind::SRC_SEM, src_sem);
    b.special(SegmentKind::SEP_SEM, vocab.sep_sem);
    b.semantic_segment(SegmentKind::TGT_SEM, tgt_sem);
    b.special(SegmentKind::EOS_SEM, vocab.eos_sem);
    return b.finish();
}

std::vector<CotSample> build_training_samples(const VocabSpec& vocab, const AlignedPair& pair,
                                              Layout layout, const PromptPolicy& policy,
                                              Rng& rng) {
    std::vector<CotSample> out;
    switch (layout) {
        case Layout::cot: {
            const AcousticSequence prompt = crop_acoustic_prompt(pair.tgt_ac, policy, rng);
            out.push_back(build_cot_sample(vocab, pair.src_sem, pair.tgt_sem, prompt, pair.tgt_ac));
            break;
        }
        case Layout::no_cot: {
            auto [a, b] = build_no_cot_samples(vocab, pair, policy, rng);
            out.push_back(std::move(a));
            out.push_back(std::move(b));
            break;
        }
        case Layout::no_semantic:
            out.push_back(build_no_semantic_sample(vocab, pair, policy, rng));
            break;
        case Layout::semantic_only:
            out.push_back(build_semantic_only_sample(vocab, pair.src_sem, pair.tgt_sem));
            break;
    }
    return out;
}

namespace {

const Segment* find_segment(const CotSample& s, SegmentKind kind) {
    for (const auto& seg : s.segments)
        if (seg.kind == kind) return &seg;
    return nullptr;
}

}  // namespace

SemanticSequence CotSample::src_semantic() const {
    const Segment* seg = find_segment(*this, SegmentKind::SRC_SEM);
    SLM_REQUIRE(seg, "CotSample: no SRC_SEM segment");
    SemanticSequence out;
    for (size_t i = seg->begin; i < seg->end; ++i) out.ids.push_back(positions[i].ar_id);
    return out;
}

SemanticSequence CotSample::tgt_semantic(const VocabSpec& vocab) const {
    const Segment* seg = find_segment(*this, SegmentKind::TGT_SEM);
    SLM_REQUIRE(seg, "CotSample: no TGT_SEM segment");
    SemanticSequence out;
    for (size_t i = seg->begin; i < seg->end; ++i) {
        SLM_REQUIRE(vocab.ar_id_is_semantic(positions[i].ar_id),
                    "CotSample: non-semantic id in TGT_SEM segment");
        out.ids.push_back(positions[i].ar_id);
    }
    return out;
}

namespace {

AcousticSequence frames_to_acoustic(const CotSample& s, const Segment* seg, int num_codebooks) {
    AcousticSequence out;
    out.streams.assign(num_codebooks, {});
    if (!seg) return out;
    for (auto& stream : out.streams) stream.reserve(seg->end - seg->begin);
    for (size_t i = seg->begin; i < seg->end; ++i)
        for (int c = 0; c < num_codebooks; ++c)
            out.streams[c].push_back(s.positions[i].frame[c]);
    return out;
}

}  // namespace

AcousticSequence CotSample::prompt_acoustic() const {
    return frames_to_acoustic(*this, find_segment(*this, SegmentKind::AC_PROMPT), num_codebooks);
}

AcousticSequence CotSample::target_acoustic() const {
    return frames_to_acoustic(*this, find_segment(*this, SegmentKind::TGT_AC1), num_codebooks);
}

std::string CotSample::to_json() const {
    json jpos = json::array();
    for (const auto& p : positions)
        jpos.push_back({{"kind", to_string(p.kind)}, {"ar_id", p.ar_id}, {"frame", p.frame}});
    json jseg = json::array();
    for (const auto& s : segments)
        jseg.push_back({{"kind", to_string(s.kind)}, {"begin", s.begin}, {"end", s.end}});
    json j{{"positions", jpos},
           {"segments", jseg},
           {"ar_target", ar_target},
           {"nar_target", nar_target},
           {"loss_mask_ar", loss_mask_ar},
           {"loss_mask_nar", loss_mask_nar},
           {"num_codebooks", num_codebooks}};
    return j.dump(2);
}

}  // namespace slm::sequence
