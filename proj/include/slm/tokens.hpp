#pragma once

#include <string>
#include <vector>

#include "slm/common.hpp"
#include "slm/rng.hpp"

namespace slm::tokens {

// Unified AR id space: [0, semantic_size) semantic units,
// [semantic_size, semantic_size + acoustic_size) first-codebook acoustic units,
// then the five specials. Residual codebooks never enter this space; their ids
// stay raw per-codebook acoustic ids.
struct VocabSpec {
    int semantic_size = 32;
    int acoustic_size = 64;
    int num_codebooks = 8;

    TokenId sep_sem = 0;
    TokenId eos_sem = 0;
    TokenId sep_ac = 0;
    TokenId eos_ac = 0;
    TokenId pad = 0;

    static VocabSpec make(int semantic_size, int acoustic_size, int num_codebooks);

    int ar_vocab_size() const { return semantic_size + acoustic_size + 5; }
    TokenId ar_id_of_semantic(TokenId unit) const { return unit; }
    TokenId ar_id_of_acoustic(TokenId unit) const { return semantic_size + unit; }
    bool ar_id_is_semantic(TokenId id) const { return id >= 0 && id < semantic_size; }
    bool ar_id_is_acoustic(TokenId id) const {
        return id >= semantic_size && id < semantic_size + acoustic_size;
    }
    TokenId acoustic_of_ar_id(TokenId id) const { return id - semantic_size; }

    void validate() const;
};

enum class Reorder { reverse, identity };

std::string to_string(Reorder r);
Reorder reorder_from_string(const std::string& s);

// The synthetic translation + style world. Content maps g_c and style maps h_c
// are stored as explicit per-codebook tables into the acoustic id space; their
// ranges are disjoint so decoding is unambiguous.
struct TaskSpec {
    VocabSpec vocab;
    std::vector<TokenId> permutation;  // semantic substitution cipher, a bijection
    Reorder reorder = Reorder::reverse;
    int upsample = 2;   // r: acoustic frames per target semantic unit
    int num_styles = 8; // K
    std::vector<std::vector<TokenId>> content_maps; // [c][unit]  -> acoustic id (g_c)
    std::vector<std::vector<TokenId>> style_maps;   // [c][style] -> acoustic id (h_c)
    int sem_len_min = 8;
    int sem_len_max = 24;
    uint64_t seed = 0;

    // Defaults: g_c(u) = (u + 7c) mod floor(A/2),
    //           h_c(s) = floor(A/2) + (s + 3c) mod floor(A/2), c counted from 1.
    static TaskSpec make_default(uint64_t seed);
    static TaskSpec make(const VocabSpec& vocab, Reorder reorder, int upsample,
                         int num_styles, int sem_len_min, int sem_len_max, uint64_t seed);

    void validate() const;

    std::string to_json() const;
    static TaskSpec from_json(const std::string& text);
};

struct SemanticSequence {
    std::vector<TokenId> ids;

    size_t length() const { return ids.size(); }
    bool operator==(const SemanticSequence&) const = default;
};

struct AcousticSequence {
    std::vector<std::vector<TokenId>> streams; // C streams of equal length
    StyleId style = -1;                        // -1 when unknown (model output)

    int num_streams() const { return static_cast<int>(streams.size()); }
    size_t num_frames() const { return streams.empty() ? 0 : streams[0].size(); }
    void validate() const; // equal stream lengths
    bool operator==(const AcousticSequence&) const = default;
};

struct AlignedPair {
    SemanticSequence src_sem;
    AcousticSequence src_ac;  // style s_src
    SemanticSequence tgt_sem;
    AcousticSequence tgt_ac;  // style s_tgt
};

SemanticSequence semantic_transform(const TaskSpec& task, const SemanticSequence& src);
SemanticSequence inverse_transform(const TaskSpec& task, const SemanticSequence& tgt);

AcousticSequence acoustic_encode(const TaskSpec& task, const SemanticSequence& sem, StyleId style);

struct DecodeResult {
    SemanticSequence sem;
    StyleId style = 0;
    double confidence = 0.0; // fraction of frames agreeing with the majority
};

// Total on arbitrary ids: unmapped ids count as disagreement, never throws.
DecodeResult acoustic_decode(const TaskSpec& task, const AcousticSequence& ac);

AlignedPair generate_pair(const TaskSpec& task, Rng& rng);

// Dataset file: one record per line,
// "src_sem<TAB>tgt_sem<TAB>s_src<TAB>s_tgt" with space-separated ids.
// Acoustic streams are re-derived from the TaskSpec at load time.
void save_dataset(const std::string& path, const std::vector<AlignedPair>& pairs);
std::vector<AlignedPair> load_dataset(const std::string& path, const TaskSpec& task);

void save_task_spec(const std::string& path, const TaskSpec& task);
TaskSpec load_task_spec(const std::string& path);

}  // namespace slm::tokens
