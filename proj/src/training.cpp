#include "slm/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>

#include "json.hpp"
#include "slm/checkpoint.hpp"

namespace slm::training {

namespace fs = std::filesystem;
using model::GradStore;
using model::RunContext;
using model::SpeechLM;
using sequence::CotSample;
using sequence::Layout;
using tokens::AlignedPair;

void TrainConfig::validate() const {
    SLM_REQUIRE(learning_rate > 0.0, "TrainConfig: learning_rate must be positive");
    SLM_REQUIRE(dropout >= 0.0 && dropout < 1.0, "TrainConfig: dropout must be in [0, 1)");
    SLM_REQUIRE(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    SLM_REQUIRE(max_steps >= 1, "TrainConfig: max_steps must be >= 1");
    SLM_REQUIRE(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
                "TrainConfig: betas must be in [0, 1)");
    SLM_REQUIRE(adam_eps > 0.0, "TrainConfig: adam_eps must be positive");
    SLM_REQUIRE(weight_decay >= 0.0, "TrainConfig: weight_decay must be >= 0");
    SLM_REQUIRE(grad_clip >= 0.0, "TrainConfig: grad_clip must be >= 0");
    SLM_REQUIRE(log_interval >= 1, "TrainConfig: log_interval must be >= 1");
    SLM_REQUIRE(grad_group >= 1, "TrainConfig: grad_group must be >= 1");
    prompt_policy.validate();
}

int TrainConfig::effective_warmup() const {
    if (warmup_steps >= 0) return warmup_steps;
    return std::max(1, max_steps / 100);
}

int draw_codebook(uint64_t seed, uint64_t step, int num_codebooks) {
    if (num_codebooks < 2) return -1;
    Rng rng(derive_seed(seed, {kCodebookStream, step}));
    return 2 + static_cast<int>(rng.uniform_below(static_cast<uint64_t>(num_codebooks - 1)));
}

Trainer::Trainer(SpeechLM<float>& m, const tokens::TaskSpec& task, TrainConfig config,
                 SampleBuilder builder)
    : model_(m), task_(task), config_(std::move(config)), builder_(std::move(builder)) {
    config_.validate();
    const auto& entries = model_.params().entries;
    adam_m_.reserve(entries.size());
    adam_v_.reserve(entries.size());
    for (const auto& e : entries) {
        adam_m_.emplace_back(e.count(), 0.0f);
        adam_v_.emplace_back(e.count(), 0.0f);
    }
}

LossBreakdown Trainer::run_batch(std::span<const AlignedPair> batch, uint64_t step, bool update) {
    SLM_REQUIRE(!batch.empty(), "train_step: empty batch");
    const auto& vocab = task_.vocab;
    const int C = vocab.num_codebooks;

    // Layout assembly: fresh prompt crop per pair per step.
    std::vector<CotSample> samples;
    samples.reserve(batch.size() * (config_.layout == Layout::no_cot ? 2 : 1));
    const uint64_t crop_stream = update ? kCropStream : kValCropStream;
    for (size_t s = 0; s < batch.size(); ++s) {
        Rng rng(derive_seed(config_.seed, {crop_stream, step, s}));
        auto built = builder_ ? builder_(batch[s], rng)
                              : sequence::build_training_samples(vocab, batch[s], config_.layout,
                                                                 config_.prompt_policy, rng);
        for (auto& sm : built) samples.push_back(std::move(sm));
    }

    size_t n_ar = 0, n_nar = 0;
    for (const auto& sm : samples) {
        for (size_t i = 0; i + 1 < sm.size(); ++i)
            if (sm.loss_mask_ar[i + 1]) ++n_ar;
        if (model_.has_nar())
            for (uint8_t m : sm.loss_mask_nar) n_nar += m;
    }
    if (!model_.has_ar_head()) n_ar = 0;

    // One codebook draw per step; evaluation uses its own stream.
    const int codebook = [&] {
        if (n_nar == 0) return -1;
        if (update) return draw_codebook(config_.seed, step, C);
        Rng rng(derive_seed(config_.seed, {kValCodebookStream, step}));
        return 2 + static_cast<int>(rng.uniform_below(static_cast<uint64_t>(C - 1)));
    }();

    const size_t group = static_cast<size_t>(config_.grad_group);
    const size_t num_groups = (samples.size() + group - 1) / group;
    if (update) {
        while (group_grads_.size() < num_groups) {
            group_grads_.emplace_back();
            group_grads_.back().init(model_.params());
        }
    }

    std::vector<double> ar_sums(samples.size(), 0.0), nar_sums(samples.size(), 0.0);
    std::atomic<size_t> next_group{0};
    std::vector<std::exception_ptr> errors(num_groups);

    auto process_group = [&](size_t gi) {
        GradStore<float>* gs = nullptr;
        if (update) {
            gs = &group_grads_[gi];
            gs->zero();
        }
        const size_t begin = gi * group;
        const size_t end = std::min(samples.size(), begin + group);
        for (size_t j = begin; j < end; ++j) {
            const CotSample& sm = samples[j];
            RunContext<float> ctx(model_, gs);
            Rng dropout_rng(derive_seed(config_.seed, {kDropoutStream, step, j}));
            auto ar = model_.ar_forward(ctx, sm, /*train_mode=*/update,
                                        update ? &dropout_rng : nullptr);

            ScalarLoss<float> ar_loss;
            if (model_.has_ar_head()) ar_loss = ar_loss_sum(ar.logits, sm);
            ScalarLoss<float> nar_loss;
            bool has_nar_positions = false;
            for (uint8_t m : sm.loss_mask_nar) has_nar_positions |= (m != 0);
            if (model_.has_nar() && has_nar_positions && codebook >= 2) {
                auto nar = model_.nar_forward(ctx, ar, sm, update, update ? &dropout_rng : nullptr);
                nar_loss = nar_loss_sum<float>(nar, sm, codebook);
            }
            if (ar_loss.count > 0) ar_sums[j] = static_cast<double>(ar_loss.value.scalar());
            if (nar_loss.count > 0) nar_sums[j] = static_cast<double>(nar_loss.value.scalar());

            if (update) {
                std::vector<std::pair<numerics::Tensor<float>, float>> seeds;
                if (ar_loss.count > 0)
                    seeds.push_back({ar_loss.value, static_cast<float>(1.0 / static_cast<double>(n_ar))});
                if (nar_loss.count > 0)
                    seeds.push_back({nar_loss.value, static_cast<float>(1.0 / static_cast<double>(n_nar))});
                if (!seeds.empty()) ctx.graph.backward_seeded(seeds);
            }
        }
    };

    auto worker = [&] {
        while (true) {
            const size_t gi = next_group.fetch_add(1);
            if (gi >= num_groups) break;
            try {
                process_group(gi);
            } catch (...) {
                errors[gi] = std::current_exception();
            }
        }
    };

    int threads = config_.threads > 0 ? config_.threads
                                      : static_cast<int>(std::thread::hardware_concurrency());
    threads = std::max(1, std::min<int>(threads, static_cast<int>(num_groups)));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(threads));
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& err : errors)
        if (err) std::rethrow_exception(err);

    if (update) {
        for (size_t gi = 1; gi < num_groups; ++gi) group_grads_[0].accumulate(group_grads_[gi]);
        apply_update(step);
    }

    LossBreakdown out;
    double ar_total = 0.0, nar_total = 0.0;
    for (double v : ar_sums) ar_total += v;
    for (double v : nar_sums) nar_total += v;
    out.loss_ar = n_ar > 0 ? ar_total / static_cast<double>(n_ar) : 0.0;
    out.loss_nar = n_nar > 0 ? nar_total / static_cast<double>(n_nar) : 0.0;
    out.loss_total = out.loss_ar + out.loss_nar;
    out.codebook_drawn = codebook;
    out.ar_tokens = n_ar;
    out.nar_tokens = n_nar;
    out.ar_mask_empty = n_ar == 0;
    if (!std::isfinite(out.loss_total))
        fail_numeric(cat("train_step: non-finite loss at step ", step, " (ar=", out.loss_ar,
                         ", nar=", out.loss_nar, ")"));
    return out;
}

LossBreakdown Trainer::train_step(std::span<const AlignedPair> batch, uint64_t step) {
    LossBreakdown lb = run_batch(batch, step, /*update=*/true);
    steps_done_ = step + 1;
    return lb;
}

LossBreakdown Trainer::eval_loss(std::span<const AlignedPair> pairs, uint64_t step) {
    return run_batch(pairs, step, /*update=*/false);
}

void Trainer::apply_update(uint64_t step) {
    auto& entries = model_.params().entries;
    auto& grads = group_grads_[0].grads;

    // Global-norm clip, accumulated in parameter order.
    float scale = 1.0f;
    if (config_.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& g : grads)
            for (float v : g) sq += static_cast<double>(v) * v;
        const double norm = std::sqrt(sq);
        if (norm > config_.grad_clip) scale = static_cast<float>(config_.grad_clip / norm);
    }

    const double t = static_cast<double>(step) + 1.0;
    const double lr = config_.learning_rate *
                      std::min(1.0, t / static_cast<double>(config_.effective_warmup()));
    const float b1 = static_cast<float>(config_.beta1);
    const float b2 = static_cast<float>(config_.beta2);
    const float inv_bc1 = static_cast<float>(1.0 / (1.0 - std::pow(config_.beta1, t)));
    const float inv_bc2 = static_cast<float>(1.0 / (1.0 - std::pow(config_.beta2, t)));
    const float eps = static_cast<float>(config_.adam_eps);
    const float lrf = static_cast<float>(lr);
    const float decay = static_cast<float>(lr * config_.weight_decay);

    for (size_t i = 0; i < entries.size(); ++i) {
        auto& p = entries[i].value;
        auto& g = grads[i];
        auto& m = adam_m_[i];
        auto& v = adam_v_[i];
        // decoupled weight decay on matrices; vectors (biases, gains) exempt
        const bool decayed = entries[i].rows > 1;
        for (size_t j = 0; j < p.size(); ++j) {
            const float gj = g[j] * scale;
            m[j] = b1 * m[j] + (1.0f - b1) * gj;
            v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
            const float mh = m[j] * inv_bc1;
            const float vh = v[j] * inv_bc2;
            p[j] -= lrf * (mh / (std::sqrt(vh) + eps));
            if (decayed) p[j] -= decay * p[j];
        }
    }
}

void Trainer::save_state(const std::string& prefix) const {
    std::vector<io::NamedArray<float>> arrays;
    const auto& entries = model_.params().entries;
    for (size_t i = 0; i < entries.size(); ++i)
        arrays.push_back({"m." + entries[i].name, entries[i].rows, entries[i].cols,
                          const_cast<float*>(adam_m_[i].data())});
    for (size_t i = 0; i < entries.size(); ++i)
        arrays.push_back({"v." + entries[i].name, entries[i].rows, entries[i].cols,
                          const_cast<float*>(adam_v_[i].data())});
    io::write_tensor_file(prefix, arrays,
                          {{"step", std::to_string(steps_done_)},
                           {"kind", "train_state"}});
}

void Trainer::load_state(const std::string& prefix) {
    std::vector<io::NamedArray<float>> arrays;
    const auto& entries = model_.params().entries;
    for (size_t i = 0; i < entries.size(); ++i)
        arrays.push_back({"m." + entries[i].name, entries[i].rows, entries[i].cols,
                          adam_m_[i].data()});
    for (size_t i = 0; i < entries.size(); ++i)
        arrays.push_back({"v." + entries[i].name, entries[i].rows, entries[i].cols,
                          adam_v_[i].data()});
    const auto metadata = io::read_tensor_file(prefix, arrays);
    const auto it = metadata.find("step");
    SLM_REQUIRE(it != metadata.end(), "load_state: missing step in " + prefix);
    steps_done_ = std::stoull(it->second);
}

namespace {

void save_checkpoint(const std::string& prefix, const SpeechLM<float>& m, const Trainer& trainer,
                     const TrainConfig& config) {
    io::save_model(prefix + ".model", m,
                   {{"train_layout", sequence::to_string(config.layout)},
                    {"step", std::to_string(trainer.steps_done())}});
    trainer.save_state(prefix + ".state");
}

}  // namespace

FitResult fit(SpeechLM<float>& m, const std::vector<AlignedPair>& dataset,
              const tokens::TaskSpec& task, const TrainConfig& config, const std::string& out_dir,
              const std::string& resume_prefix, bool quiet, SampleBuilder builder) {
    config.validate();
    SLM_REQUIRE(!dataset.empty(), "fit: empty dataset");
    fs::create_directories(out_dir);

    Trainer trainer(m, task, config, std::move(builder));
    uint64_t start_step = 0;
    if (!resume_prefix.empty()) {
        io::read_tensor_file(resume_prefix + ".model", io::arrays_of(m.params()));
        trainer.load_state(resume_prefix + ".state");
        start_step = trainer.steps_done();
        SLM_REQUIRE(start_step <= static_cast<uint64_t>(config.max_steps),
                    "fit: resume checkpoint is past max_steps");
    }

    const std::string metrics_path = out_dir + "/metrics.ndjson";
    std::ofstream metrics(metrics_path,
                          start_step == 0 ? std::ios::trunc : (std::ios::app | std::ios::ate));
    if (!metrics) fail_input("fit: cannot open " + metrics_path);

    const size_t n = dataset.size();
    const size_t bs = std::min<size_t>(static_cast<size_t>(config.batch_size), n);
    const size_t steps_per_epoch = (n + bs - 1) / bs;

    const size_t val_count = std::min<size_t>(static_cast<size_t>(std::max(1, config.val_pairs)), n);
    const std::span<const AlignedPair> val_slice{dataset.data() + (n - val_count), val_count};

    std::vector<size_t> perm(n);
    uint64_t perm_epoch = UINT64_MAX;
    std::vector<AlignedPair> batch;
    batch.reserve(bs);

    const auto t0 = std::chrono::steady_clock::now();
    FitResult result;
    for (uint64_t s = start_step; s < static_cast<uint64_t>(config.max_steps); ++s) {
        const uint64_t epoch = s / steps_per_epoch;
        const uint64_t slot = s % steps_per_epoch;
        if (epoch != perm_epoch) {
            std::iota(perm.begin(), perm.end(), size_t{0});
            Rng rng(derive_seed(config.seed, {kShuffleStream, epoch}));
            for (size_t i = n; i > 1; --i) {
                const size_t j = rng.uniform_below(i);
                std::swap(perm[i - 1], perm[j]);
            }
            perm_epoch = epoch;
        }
        batch.clear();
        const size_t begin = slot * bs;
        const size_t end = std::min(n, begin + bs);
        for (size_t i = begin; i < end; ++i) batch.push_back(dataset[perm[i]]);

        result.last = trainer.train_step(batch, s);

        const bool log_now = (s + 1) % static_cast<uint64_t>(config.log_interval) == 0 ||
                             s + 1 == static_cast<uint64_t>(config.max_steps);
        if (log_now) {
            const LossBreakdown val = trainer.eval_loss(val_slice, s);
            const double wallclock =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            nlohmann::json line{{"step", s + 1},
                                {"loss_ar", result.last.loss_ar},
                                {"loss_nar", result.last.loss_nar},
                                {"loss_total", result.last.loss_total},
                                {"codebook_drawn", result.last.codebook_drawn},
                                {"wallclock", wallclock},
                                {"val_loss_total", val.loss_total}};
            metrics << line.dump() << '\n';
            metrics.flush();
            if (!quiet)
                std::fprintf(stderr, "step %llu  loss %.4f (ar %.4f nar %.4f)  val %.4f\n",
                             static_cast<unsigned long long>(s + 1), result.last.loss_total,
                             result.last.loss_ar, result.last.loss_nar, val.loss_total);
        }
        if (config.checkpoint_interval > 0 &&
            (s + 1) % static_cast<uint64_t>(config.checkpoint_interval) == 0 &&
            s + 1 < static_cast<uint64_t>(config.max_steps)) {
            save_checkpoint(cat(out_dir, "/checkpoint_step", s + 1), m, trainer, config);
        }
    }

    const std::string final_prefix = out_dir + "/checkpoint";
    save_checkpoint(final_prefix, m, trainer, config);
    result.steps = trainer.steps_done();
    result.checkpoint_prefix = final_prefix;
    result.metrics_path = metrics_path;
    result.wallclock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

}  // namespace slm::training
