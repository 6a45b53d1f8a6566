#pragma once

#include <optional>
#include <string>
#include <vector>

#include "slm/model.hpp"
#include "slm/sequence.hpp"

namespace slm::inference {

struct DecodeConfig {
    int beam_size = 10;
    double temperature = 0.9;
    int max_sem_len = 48;      // hard cap on generated semantic tokens
    int max_ac_len = 128;      // hard cap on generated first-stream tokens
    double prompt_ratio = 0.3; // prefix fraction of the source acoustic sequence
    uint64_t seed = 0;

    void validate() const;
};

// Incremental evaluation of the AR stack with per-layer key/value caches.
// Read-only over the model; one decoder per generation thread.
class IncrementalDecoder {
public:
    explicit IncrementalDecoder(const model::SpeechLM<float>& m);

    struct State {
        // per layer: [len, model_dim] rows, appended as tokens arrive
        std::vector<std::vector<float>> k_cache, v_cache;
        int len = 0;
    };

    State fresh_state() const;
    // Feeds one position; returns the AR logits row for predicting the next
    // token. `index` is the absolute position of this token in the sequence.
    std::vector<float> step(State& state, const sequence::Position& pos, int index) const;
    // Feeds a prefix, returning the logits after its last position.
    std::vector<float> prefix(State& state, const std::vector<sequence::Position>& positions) const;

    const model::SpeechLM<float>& lm() const { return *model_; }

private:
    const model::SpeechLM<float>* model_;
};

struct StageTiming {
    double semantic_s = 0.0;
    double first_stream_s = 0.0;
    double residual_s = 0.0;
};

struct TranslateResult {
    tokens::SemanticSequence sem;  // decoded target semantics
    tokens::AcousticSequence ac;   // C streams; empty for semantic-only models
    bool sem_truncated = false;
    bool ac_truncated = false;
    StageTiming timing;
    uint64_t nar_forward_calls = 0;
};

// Length-normalized beam search over semantic ids + EOS_SEM, starting after
// [S_src, SEP_SEM]. The greedy rollout is always part of the candidate pool,
// so the returned normalized score is never below the greedy score.
tokens::SemanticSequence beam_search_semantic(const model::SpeechLM<float>& m,
                                              const tokens::SemanticSequence& src,
                                              const DecodeConfig& config,
                                              bool* truncated = nullptr);

// Temperature sampling of first-codebook ids + EOS_AC after
// [S_src, SEP_SEM, S_tgt, EOS_SEM, A_prompt, SEP_AC]. Temperatures below 1e-6
// take the argmax branch. With no target semantics (no_cot / no_semantic
// models), pass an empty tgt and the semantic target segment is omitted.
std::vector<TokenId> sample_first_stream(const model::SpeechLM<float>& m,
                                         const tokens::SemanticSequence& src,
                                         const tokens::SemanticSequence& tgt,
                                         const tokens::AcousticSequence& prompt,
                                         const DecodeConfig& config, Rng& rng,
                                         bool* truncated = nullptr);

// One ar_forward + one nar_forward in evaluation mode; residual streams 2..C
// are the per-position argmax of each codebook head. Stream 1 of the result is
// first_stream itself.
tokens::AcousticSequence nar_decode_streams(const model::SpeechLM<float>& m,
                                            const tokens::SemanticSequence& src,
                                            const tokens::SemanticSequence& tgt,
                                            const tokens::AcousticSequence& prompt,
                                            const std::vector<TokenId>& first_stream);

// Composes the stages appropriate for the model's training layout:
//   cot:            beam semantics -> sample stream 1 -> parallel NAR decode
//   no_cot/no_sem:  sample stream 1 (conditioned on S_src) -> NAR decode
//   semantic_only:  beam semantics only (no acoustic output)
// The acoustic prompt is a prefix crop of A_src at config.prompt_ratio.
TranslateResult translate(const model::SpeechLM<float>& m, sequence::Layout layout,
                          const tokens::SemanticSequence& src_sem,
                          const tokens::AcousticSequence& src_ac, const DecodeConfig& config,
                          Rng& rng);

// Prefix crop at a fixed ratio (deterministic, placement = prefix).
tokens::AcousticSequence prefix_crop(const tokens::AcousticSequence& ac, double ratio);

}  // namespace slm::inference
