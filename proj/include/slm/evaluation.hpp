#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slm/inference.hpp"
#include "slm/model.hpp"
#include "slm/tokens.hpp"

namespace slm::evaluation {

struct SemanticScore {
    double bleu = 0.0;        // 0..100
    double exact_match = 0.0; // 0..1
};

// Corpus BLEU over unit id sequences: n-grams up to 4, uniform weights,
// standard brevity penalty. Single reference per hypothesis.
double corpus_bleu(std::span<const std::vector<TokenId>> hyps,
                   std::span<const std::vector<TokenId>> refs);

// Oracle-decodes each output and scores the recovered semantics against the
// references (the ASR-BLEU analog).
SemanticScore semantic_score(const tokens::TaskSpec& task,
                             std::span<const tokens::AcousticSequence> outputs,
                             std::span<const tokens::SemanticSequence> refs);

// Fraction of outputs whose oracle-decoded style equals the SOURCE style
// (the vocal-style-similarity analog); chance level is 1/num_styles.
double style_score(const tokens::TaskSpec& task,
                   std::span<const tokens::AcousticSequence> outputs,
                   std::span<const StyleId> source_styles);

struct EvalReport {
    SemanticScore semantic;
    double style = 0.0;
    double mean_confidence = 0.0;
    double min_confidence = 0.0;
    size_t n_samples = 0;
    std::string config_fingerprint;

    std::string to_json() const;
};

EvalReport evaluate_outputs(const tokens::TaskSpec& task,
                            std::span<const tokens::AcousticSequence> outputs,
                            std::span<const tokens::SemanticSequence> refs,
                            std::span<const StyleId> source_styles,
                            const std::string& fingerprint);

// Translates every test pair (source-prefix prompts at decode.prompt_ratio)
// and scores the outputs. Samples are processed concurrently; aggregation is
// order-independent. For a semantic-only model the predicted semantics are
// re-encoded with a per-sample random style, mirroring a vocoder with no
// style input.
EvalReport evaluate_model(const tokens::TaskSpec& task, const model::SpeechLM<float>& m,
                          sequence::Layout layout,
                          std::span<const tokens::AlignedPair> test_pairs,
                          const inference::DecodeConfig& decode, int threads, uint64_t seed);

struct AblationRow {
    std::string variant;
    uint64_t seed = 0;
    bool missing = false;
    EvalReport report;
};

struct AblationTable {
    std::vector<AblationRow> rows;

    // Mean over present rows of one variant; nullopt when none exist.
    std::optional<EvalReport> variant_mean(const std::string& variant) const;
    std::string to_csv() const;
    std::string to_json() const;
};

struct VariantModels {
    std::string name;
    sequence::Layout layout;
    // One model per seed; a null pointer produces a labeled gap in the table.
    std::vector<const model::SpeechLM<float>*> models;
    std::vector<uint64_t> seeds;
};

// Scores every variant/seed; asserts nothing itself.
AblationTable ablation_report(const tokens::TaskSpec& task,
                              std::span<const tokens::AlignedPair> test_pairs,
                              const std::vector<VariantModels>& variants,
                              const inference::DecodeConfig& decode, int threads);

struct SweepCell {
    std::string train_range; // label, e.g. "0.25-0.30"
    double test_ratio = 0.0;
    uint64_t seed = 0;
    SemanticScore semantic;
    double style = 0.0;
};

struct SweepMatrix {
    std::vector<SweepCell> cells;

    double mean_style(const std::string& range, double ratio) const;
    double mean_bleu(const std::string& range, double ratio) const;
    std::string to_csv() const;
    std::string to_json() const;
    // Style-transfer curve per training range as an SVG line chart.
    std::string to_svg() const;
};

struct SweepModels {
    std::string range_label;
    std::vector<const model::SpeechLM<float>*> models; // one per seed
    std::vector<uint64_t> seeds;
};

// Evaluates each trained range at each test prompt ratio.
SweepMatrix prompt_ratio_sweep(const tokens::TaskSpec& task,
                               std::span<const tokens::AlignedPair> test_pairs,
                               const std::vector<SweepModels>& models,
                               std::span<const double> test_ratios,
                               const inference::DecodeConfig& decode_base, int threads);

}  // namespace slm::evaluation
