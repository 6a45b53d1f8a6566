#pragma once

#include <memory>
#include <string>

#include "slm/inference.hpp"
#include "slm/model.hpp"
#include "slm/training.hpp"

namespace slm::baselines {

// The cascaded three-LM comparator: LM-1 translates semantics, LM-2 generates
// the first acoustic stream, LM-3 fills the residual streams. The acoustic
// prompt is a fixed frame count (the "3 seconds" analog: upsample * 3 frames).
struct CascadeConfig {
    model::ModelConfig lm1; // semantic translator: AR only, no acoustic tables
    model::ModelConfig lm2; // first-stream generator: AR only
    model::ModelConfig lm3; // residual generator: NAR only
    int fixed_prompt_frames = 6;

    void validate() const;
};

// Per-LM configs matched to a unified model: same dims, LM-1/LM-2 carry the
// unified AR depth, LM-3 the NAR depth.
CascadeConfig matched_cascade(const model::ModelConfig& unified);

long long cascade_param_total(const CascadeConfig& config);

struct CascadeModels {
    std::unique_ptr<model::SpeechLM<float>> lm1, lm2, lm3;
};

CascadeModels make_cascade_models(const CascadeConfig& config, uint64_t seed);

struct CascadeTrainResult {
    training::FitResult lm1, lm2, lm3;
};

// Three independent trainings: LM-1 on [S_src, SEP, S_tgt, EOS], LM-2/LM-3 on
// [S_tgt, SEP, A_prompt, SEP, A_tgt1, EOS] with a fixed-length target crop.
CascadeTrainResult train_cascade(CascadeModels& models, const CascadeConfig& config,
                                 const std::vector<tokens::AlignedPair>& dataset,
                                 const tokens::TaskSpec& task, const training::TrainConfig& base,
                                 const std::string& out_dir, bool quiet = true);

// Three-stage pipeline; stage errors propagate with a "cascade stage k" label.
// The acoustic prompt is the source prefix of fixed_prompt_frames frames.
inference::TranslateResult translate_cascade(const CascadeModels& models,
                                             const CascadeConfig& config,
                                             const tokens::SemanticSequence& src_sem,
                                             const tokens::AcousticSequence& src_ac,
                                             const inference::DecodeConfig& decode, Rng& rng);

}  // namespace slm::baselines
