#include "slm/baselines.hpp"

#include <chrono>

namespace slm::baselines {

using model::ModelConfig;
using model::SpeechLM;
using sequence::CotSample;
using tokens::AcousticSequence;
using tokens::AlignedPair;
using tokens::SemanticSequence;

void CascadeConfig::validate() const {
    lm1.validate();
    lm2.validate();
    lm3.validate();
    SLM_REQUIRE(lm1.nar_layers == 0 && lm1.ar_layers >= 1,
                "CascadeConfig: LM-1 must be AR-only");
    SLM_REQUIRE(!lm1.acoustic_embeddings, "CascadeConfig: LM-1 must not carry acoustic tables");
    SLM_REQUIRE(lm2.nar_layers == 0 && lm2.ar_layers >= 1,
                "CascadeConfig: LM-2 must be AR-only");
    SLM_REQUIRE(lm3.ar_layers == 0 && lm3.nar_layers >= 1,
                "CascadeConfig: LM-3 must be NAR-only");
    SLM_REQUIRE(fixed_prompt_frames >= 1, "CascadeConfig: fixed_prompt_frames must be >= 1");
}

CascadeConfig matched_cascade(const ModelConfig& unified) {
    CascadeConfig c;
    c.lm1 = unified;
    c.lm1.nar_layers = 0;
    c.lm1.acoustic_embeddings = false;
    c.lm2 = unified;
    c.lm2.nar_layers = 0;
    c.lm3 = unified;
    c.lm3.ar_layers = 0;
    c.validate();
    return c;
}

long long cascade_param_total(const CascadeConfig& config) {
    return model::param_count(config.lm1).total + model::param_count(config.lm2).total +
           model::param_count(config.lm3).total;
}

CascadeModels make_cascade_models(const CascadeConfig& config, uint64_t seed) {
    config.validate();
    CascadeModels m;
    m.lm1 = std::make_unique<SpeechLM<float>>(config.lm1, derive_seed(seed, {0xCA5C, 1}));
    m.lm2 = std::make_unique<SpeechLM<float>>(config.lm2, derive_seed(seed, {0xCA5C, 2}));
    m.lm3 = std::make_unique<SpeechLM<float>>(config.lm3, derive_seed(seed, {0xCA5C, 3}));
    return m;
}

namespace {

// Contiguous fixed-length crop of all streams (clamped to the sequence).
AcousticSequence crop_fixed_frames(const AcousticSequence& ac, int frames,
                                   sequence::PromptPolicy::Placement placement, Rng& rng) {
    ac.validate();
    const size_t t_a = ac.num_frames();
    const size_t len = std::min<size_t>(static_cast<size_t>(frames), t_a);
    size_t start = 0;
    if (placement == sequence::PromptPolicy::Placement::random_start && len < t_a)
        start = rng.uniform_below(t_a - len + 1);
    AcousticSequence out;
    out.style = ac.style;
    out.streams.reserve(ac.streams.size());
    for (const auto& stream : ac.streams)
        out.streams.emplace_back(stream.begin() + static_cast<long>(start),
                                 stream.begin() + static_cast<long>(start + len));
    return out;
}

}  // namespace

CascadeTrainResult train_cascade(CascadeModels& models, const CascadeConfig& config,
                                 const std::vector<AlignedPair>& dataset,
                                 const tokens::TaskSpec& task, const training::TrainConfig& base,
                                 const std::string& out_dir, bool quiet) {
    config.validate();
    const auto vocab = task.vocab;

    CascadeTrainResult result;
    {
        training::TrainConfig cfg = base;
        cfg.layout = sequence::Layout::semantic_only;
        result.lm1 = training::fit(*models.lm1, dataset, task, cfg, out_dir + "/lm1", "", quiet);
    }
    // LM-2 and LM-3 share the monolingual acoustic task with a fixed-length
    // target crop; LM-2 trains the AR stream, LM-3 the residual codebooks.
    const int frames = config.fixed_prompt_frames;
    auto acoustic_builder = [vocab, frames](const AlignedPair& pair, Rng& rng) {
        AcousticSequence prompt = crop_fixed_frames(
            pair.tgt_ac, frames, sequence::PromptPolicy::Placement::random_start, rng);
        std::vector<CotSample> out;
        out.push_back(
            sequence::build_acoustic_task_sample(vocab, pair.tgt_sem, prompt, pair.tgt_ac));
        return out;
    };
    {
        training::TrainConfig cfg = base;
        cfg.layout = sequence::Layout::no_semantic; // informational; builder overrides assembly
        result.lm2 = training::fit(*models.lm2, dataset, task, cfg, out_dir + "/lm2", "", quiet,
                                   acoustic_builder);
    }
    {
        training::TrainConfig cfg = base;
        cfg.layout = sequence::Layout::no_semantic;
        result.lm3 = training::fit(*models.lm3, dataset, task, cfg, out_dir + "/lm3", "", quiet,
                                   acoustic_builder);
    }
    return result;
}

inference::TranslateResult translate_cascade(const CascadeModels& models,
                                             const CascadeConfig& config,
                                             const SemanticSequence& src_sem,
                                             const AcousticSequence& src_ac,
                                             const inference::DecodeConfig& decode, Rng& rng) {
    SLM_REQUIRE(models.lm1 && models.lm2 && models.lm3, "translate_cascade: missing models");
    decode.validate();
    inference::TranslateResult res;
    using clock = std::chrono::steady_clock;

    auto staged = [](int stage, auto&& fn) {
        try {
            return fn();
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument(cat("cascade stage ", stage, ": ", e.what()));
        } catch (const std::domain_error& e) {
            throw std::domain_error(cat("cascade stage ", stage, ": ", e.what()));
        } catch (const std::exception& e) {
            throw std::runtime_error(cat("cascade stage ", stage, ": ", e.what()));
        }
    };

    const auto t0 = clock::now();
    res.sem = staged(1, [&] {
        return inference::beam_search_semantic(*models.lm1, src_sem, decode, &res.sem_truncated);
    });
    res.timing.semantic_s = std::chrono::duration<double>(clock::now() - t0).count();

    // Fixed-length source prefix, the cascade analog of the 3-second prompt.
    AcousticSequence prompt;
    prompt.style = src_ac.style;
    const size_t len =
        std::min<size_t>(static_cast<size_t>(config.fixed_prompt_frames), src_ac.num_frames());
    for (const auto& stream : src_ac.streams)
        prompt.streams.emplace_back(stream.begin(), stream.begin() + static_cast<long>(len));

    const auto t1 = clock::now();
    const uint64_t nar_before = models.lm3->nar_forward_calls();
    std::vector<TokenId> first = staged(2, [&] {
        return inference::sample_first_stream(*models.lm2, res.sem, SemanticSequence{}, prompt,
                                              decode, rng, &res.ac_truncated);
    });
    res.timing.first_stream_s = std::chrono::duration<double>(clock::now() - t1).count();

    const auto t2 = clock::now();
    res.ac = staged(3, [&] {
        return inference::nar_decode_streams(*models.lm3, res.sem, SemanticSequence{}, prompt,
                                             first);
    });
    res.timing.residual_s = std::chrono::duration<double>(clock::now() - t2).count();
    res.nar_forward_calls = models.lm3->nar_forward_calls() - nar_before;
    return res;
}

}  // namespace slm::baselines
