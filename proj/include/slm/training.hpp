#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slm/model.hpp"
#include "slm/sequence.hpp"
#include "slm/tensor.hpp"

namespace slm::training {

// Layout assembly hook: pairs to training samples, one call per pair per step.
// The default builds TrainConfig.layout via sequence::build_training_samples.
using SampleBuilder =
    std::function<std::vector<sequence::CotSample>(const tokens::AlignedPair&, Rng&)>;

// Named rng sub-streams; all randomness derives from (seed, stream, step, ...).
enum Stream : uint64_t {
    kCropStream = 1,
    kDropoutStream = 2,
    kCodebookStream = 3,
    kShuffleStream = 4,
    kValCropStream = 5,
    kValCodebookStream = 6,
};

struct TrainConfig {
    double learning_rate = 2e-4;
    double dropout = 0.1;
    int batch_size = 16;
    int max_steps = 1000;
    sequence::PromptPolicy prompt_policy;
    sequence::Layout layout = sequence::Layout::cot;
    uint64_t seed = 0;

    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-9;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    int warmup_steps = -1; // -1: 1% of max_steps, at least 1

    int log_interval = 50;
    int checkpoint_interval = 0; // 0: final checkpoint only
    int threads = 0;             // 0: hardware concurrency
    int grad_group = 2;          // samples summed per gradient buffer
    int val_pairs = 32;          // monitoring slice taken from the dataset tail

    void validate() const;
    int effective_warmup() const;
};

struct LossBreakdown {
    double loss_ar = 0.0;
    double loss_nar = 0.0;
    double loss_total = 0.0;
    int codebook_drawn = -1; // -1 when no NAR loss this step
    size_t ar_tokens = 0;
    size_t nar_tokens = 0;
    bool ar_mask_empty = false;
};

template <typename T>
struct ScalarLoss {
    numerics::Tensor<T> value; // invalid when count == 0
    size_t count = 0;
};

// Sum of next-token NLL over predicted positions: the pair at position i is
// (logits[i], ar_target[i]), used iff loss_mask_ar[i+1]. Prompt positions
// contribute exactly zero value and gradient.
template <typename T>
ScalarLoss<T> ar_loss_sum(numerics::Tensor<T> logits_ar, const sequence::CotSample& sample) {
    const size_t n = sample.size();
    SLM_REQUIRE(static_cast<size_t>(logits_ar.rows()) == n, "ar_loss_sum: logits/sample mismatch");
    std::vector<int> targets(n, 0);
    std::vector<uint8_t> use(n, 0);
    for (size_t i = 0; i + 1 < n; ++i) {
        if (!sample.loss_mask_ar[i + 1]) continue;
        targets[i] = sample.ar_target[i];
        use[i] = 1;
    }
    auto [sum, count] = numerics::masked_ce_sum(logits_ar, targets, use);
    return {count > 0 ? sum : numerics::Tensor<T>{}, count};
}

// Mean NLL over masked positions; 0 with a warning flag when the mask is empty.
template <typename T>
numerics::Tensor<T> compute_ar_loss(numerics::Graph<T>& g, numerics::Tensor<T> logits_ar,
                                    const sequence::CotSample& sample,
                                    bool* empty_warning = nullptr) {
    auto sum = ar_loss_sum(logits_ar, sample);
    if (empty_warning) *empty_warning = sum.count == 0;
    if (sum.count == 0) return g.alloc(1, 1, false);
    return numerics::scale(sum.value, T(1.0 / static_cast<double>(sum.count)));
}

// Sum of NLL for the drawn codebook's targets at TGT_AC1 positions; other
// codebooks are untouched this step.
template <typename T>
ScalarLoss<T> nar_loss_sum(const typename model::SpeechLM<T>::NarForward& nar,
                           const sequence::CotSample& sample, int c_drawn) {
    const int C = sample.num_codebooks;
    SLM_REQUIRE(c_drawn >= 2 && c_drawn <= C, "nar_loss_sum: codebook out of range");
    const auto& positions = nar.positions;
    if (positions.empty()) return {};
    std::vector<int> targets;
    targets.reserve(positions.size());
    for (int p : positions)
        targets.push_back(sample.nar_target[static_cast<size_t>(p)][static_cast<size_t>(c_drawn - 2)]);
    std::vector<uint8_t> use(positions.size(), 1);
    auto [sum, count] = numerics::masked_ce_sum(nar.logits[static_cast<size_t>(c_drawn - 2)],
                                                targets, use);
    return {sum, count};
}

// Mean NLL for codebook c_drawn; defined as 0 when C == 1 (AR-only model).
template <typename T>
numerics::Tensor<T> compute_nar_loss(numerics::Graph<T>& g,
                                     const typename model::SpeechLM<T>::NarForward& nar,
                                     const sequence::CotSample& sample, int c_drawn) {
    if (sample.num_codebooks == 1) return g.alloc(1, 1, false);
    auto sum = nar_loss_sum<T>(nar, sample, c_drawn);
    if (sum.count == 0) return g.alloc(1, 1, false);
    return numerics::scale(sum.value, T(1.0 / static_cast<double>(sum.count)));
}

int draw_codebook(uint64_t seed, uint64_t step, int num_codebooks);

struct FitResult {
    uint64_t steps = 0;
    LossBreakdown last;
    std::string checkpoint_prefix; // final checkpoint, "<prefix>.model" + "<prefix>.state"
    std::string metrics_path;
    double wallclock_seconds = 0.0;
};

class Trainer {
public:
    Trainer(model::SpeechLM<float>& m, const tokens::TaskSpec& task, TrainConfig config,
            SampleBuilder builder = nullptr);

    // One optimizer update over a batch of pairs. `step` is the global
    // 0-based step index; all per-step randomness derives from it.
    LossBreakdown train_step(std::span<const tokens::AlignedPair> batch, uint64_t step);

    // Evaluation-mode loss over a slice (no dropout, no update).
    LossBreakdown eval_loss(std::span<const tokens::AlignedPair> pairs, uint64_t step);

    uint64_t steps_done() const { return steps_done_; }

    void save_state(const std::string& prefix) const; // optimizer moments + step
    void load_state(const std::string& prefix);

    const TrainConfig& config() const { return config_; }

private:
    LossBreakdown run_batch(std::span<const tokens::AlignedPair> batch, uint64_t step,
                            bool update);
    void apply_update(uint64_t step);

    model::SpeechLM<float>& model_;
    const tokens::TaskSpec& task_;
    TrainConfig config_;
    SampleBuilder builder_;
    std::vector<std::vector<float>> adam_m_, adam_v_;
    uint64_t steps_done_ = 0;
    std::vector<model::GradStore<float>> group_grads_;
};

// Runs max_steps of shuffled-batch training with periodic metrics (newline-
// delimited JSON) and checkpoints under out_dir. With resume_prefix set,
// continues from that checkpoint and matches the uninterrupted run bit-exactly.
FitResult fit(model::SpeechLM<float>& m, const std::vector<tokens::AlignedPair>& dataset,
              const tokens::TaskSpec& task, const TrainConfig& config, const std::string& out_dir,
              const std::string& resume_prefix = "", bool quiet = true,
              SampleBuilder builder = nullptr);

}  // namespace slm::training
