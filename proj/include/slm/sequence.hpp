#pragma once

#include <string>
#include <utility>
#include <vector>

#include "slm/rng.hpp"
#include "slm/tokens.hpp"

namespace slm::sequence {

using tokens::AcousticSequence;
using tokens::AlignedPair;
using tokens::SemanticSequence;
using tokens::VocabSpec;

// Segments always appear in this order; ablation layouts omit segments but
// never reorder them. SRC_SEM is the leading semantic-prompt segment of every
// layout, whichever sequence fills it.
enum class SegmentKind : uint8_t {
    SRC_SEM,
    SEP_SEM,
    TGT_SEM,
    EOS_SEM,
    AC_PROMPT,
    SEP_AC,
    TGT_AC1,
    EOS_AC,
};

std::string to_string(SegmentKind k);

struct Position {
    SegmentKind kind;
    // Unified AR-stream id: the semantic/special id on semantic segments, the
    // first-codebook id on acoustic segments.
    TokenId ar_id;
    // All C raw acoustic ids at AC_PROMPT and TGT_AC1 positions, empty elsewhere.
    std::vector<TokenId> frame;
};

struct Segment {
    SegmentKind kind;
    size_t begin; // position index, inclusive
    size_t end;   // exclusive
};

// One fully laid-out training/inference token sequence.
//
// loss_mask_ar[i] marks position i's own token as a prediction target (the
// loss pairs it with the logits at i-1). ar_target[i] holds the AR-stream id
// of position i+1 (-1 at the last position), so the pair consumed by the AR
// loss at position i is (logits[i], ar_target[i]) gated by loss_mask_ar[i+1].
struct CotSample {
    std::vector<Position> positions;
    std::vector<TokenId> ar_target;
    std::vector<std::vector<TokenId>> nar_target; // codebook 2..C ids at TGT_AC1 positions
    std::vector<uint8_t> loss_mask_ar;
    std::vector<uint8_t> loss_mask_nar; // true exactly at TGT_AC1
    std::vector<Segment> segments;
    int num_codebooks = 1;

    size_t size() const { return positions.size(); }

    // Lossless segment recovery.
    SemanticSequence src_semantic() const;
    SemanticSequence tgt_semantic(const VocabSpec& vocab) const;
    AcousticSequence prompt_acoustic() const;
    AcousticSequence target_acoustic() const;

    std::string to_json() const; // golden-file fixtures
};

struct PromptPolicy {
    double ratio_min = 0.25;
    double ratio_max = 0.30;
    enum class Placement { prefix, random_start } placement = Placement::random_start;

    void validate() const;
};

// Contiguous crop of all C streams. The prompt length is floor(ratio * T_a)
// with a minimum of 1 whenever the drawn ratio is positive; an empty prompt
// requires ratio_max == 0.
AcousticSequence crop_acoustic_prompt(const AcousticSequence& ac, const PromptPolicy& policy,
                                      Rng& rng);

// [S_src, SEP_SEM, S_tgt, EOS_SEM, A_prompt, SEP_AC, A_tgt1, EOS_AC].
// An empty prompt omits AC_PROMPT but keeps SEP_AC.
CotSample build_cot_sample(const VocabSpec& vocab, const SemanticSequence& src_sem,
                           const SemanticSequence& tgt_sem, const AcousticSequence& prompt,
                           const AcousticSequence& tgt_ac);

// [sem_prompt, SEP_SEM, A_prompt, SEP_AC, A_tgt1, EOS_AC]: the acoustic
// generation task conditioned on one semantic sequence. Shared by the no-CoT
// pair, the no-semantic ablation and the cascade stages 2/3.
CotSample build_acoustic_task_sample(const VocabSpec& vocab, const SemanticSequence& sem_prompt,
                                     const AcousticSequence& prompt, const AcousticSequence& tgt_ac);

// Multi-task pair: (S_src -> A_tgt, S_tgt -> A_tgt), one shared prompt crop.
std::pair<CotSample, CotSample> build_no_cot_samples(const VocabSpec& vocab,
                                                     const AlignedPair& pair,
                                                     const PromptPolicy& policy, Rng& rng);

CotSample build_no_semantic_sample(const VocabSpec& vocab, const AlignedPair& pair,
                                   const PromptPolicy& policy, Rng& rng);

// [S_src, SEP_SEM, S_tgt, EOS_SEM]; no acoustic segments.
CotSample build_semantic_only_sample(const VocabSpec& vocab, const SemanticSequence& src_sem,
                                     const SemanticSequence& tgt_sem);

enum class Layout { cot, no_cot, no_semantic, semantic_only };

std::string to_string(Layout l);
Layout layout_from_string(const std::string& s);

// Training-time sample assembly: crops the prompt from the TARGET acoustic
// sequence per policy and builds the layout's samples (two for no_cot).
std::vector<CotSample> build_training_samples(const VocabSpec& vocab, const AlignedPair& pair,
                                              Layout layout, const PromptPolicy& policy, Rng& rng);

}  // namespace slm::sequence
