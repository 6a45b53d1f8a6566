#include "slm/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <thread>

#include "json.hpp"

namespace slm::evaluation {

using inference::DecodeConfig;
using model::SpeechLM;
using sequence::Layout;
using tokens::AcousticSequence;
using tokens::AlignedPair;
using tokens::SemanticSequence;
using tokens::TaskSpec;

double corpus_bleu(std::span<const std::vector<TokenId>> hyps,
                   std::span<const std::vector<TokenId>> refs) {
    SLM_REQUIRE(hyps.size() == refs.size(), "corpus_bleu: hypothesis/reference count mismatch");
    constexpr int kMaxOrder = 4;
    size_t hyp_len = 0, ref_len = 0;
    size_t clipped[kMaxOrder] = {0, 0, 0, 0};
    size_t totals[kMaxOrder] = {0, 0, 0, 0};

    for (size_t s = 0; s < hyps.size(); ++s) {
        const auto& hyp = hyps[s];
        const auto& ref = refs[s];
        hyp_len += hyp.size();
        ref_len += ref.size();
        for (int n = 1; n <= kMaxOrder; ++n) {
            if (hyp.size() < static_cast<size_t>(n)) continue;
            std::map<std::vector<TokenId>, size_t> ref_grams;
            if (ref.size() >= static_cast<size_t>(n))
                for (size_t i = 0; i + n <= ref.size(); ++i)
                    ++ref_grams[std::vector<TokenId>(ref.begin() + i, ref.begin() + i + n)];
            std::map<std::vector<TokenId>, size_t> hyp_grams;
            for (size_t i = 0; i + n <= hyp.size(); ++i)
                ++hyp_grams[std::vector<TokenId>(hyp.begin() + i, hyp.begin() + i + n)];
            totals[n - 1] += hyp.size() - n + 1;
            for (const auto& [gram, count] : hyp_grams) {
                const auto it = ref_grams.find(gram);
                if (it != ref_grams.end()) clipped[n - 1] += std::min(count, it->second);
            }
        }
    }

    if (hyp_len == 0) return 0.0;
    double log_precision = 0.0;
    for (int n = 0; n < kMaxOrder; ++n) {
        if (totals[n] == 0 || clipped[n] == 0) return 0.0;
        log_precision += std::log(static_cast<double>(clipped[n]) / static_cast<double>(totals[n]));
    }
    const double bp = hyp_len >= ref_len
                          ? 1.0
                          : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
    return 100.0 * bp * std::exp(log_precision / kMaxOrder);
}

SemanticScore semantic_score(const TaskSpec& task, std::span<const AcousticSequence> outputs,
                             std::span<const SemanticSequence> refs) {
    SLM_REQUIRE(outputs.size() == refs.size(), "semantic_score: output/reference count mismatch");
    SLM_REQUIRE(!outputs.empty(), "semantic_score: empty evaluation set");
    std::vector<std::vector<TokenId>> hyps, refs_ids;
    hyps.reserve(outputs.size());
    refs_ids.reserve(refs.size());
    size_t exact = 0;
    for (size_t i = 0; i < outputs.size(); ++i) {
        auto decoded = tokens::acoustic_decode(task, outputs[i]);
        if (decoded.sem.ids == refs[i].ids) ++exact;
        hyps.push_back(std::move(decoded.sem.ids));
        refs_ids.push_back(refs[i].ids);
    }
    SemanticScore score;
    score.bleu = corpus_bleu(hyps, refs_ids);
    score.exact_match = static_cast<double>(exact) / static_cast<double>(outputs.size());
    return score;
}

double style_score(const TaskSpec& task, std::span<const AcousticSequence> outputs,
                   std::span<const StyleId> source_styles) {
    SLM_REQUIRE(outputs.size() == source_styles.size(), "style_score: length mismatch");
    SLM_REQUIRE(!outputs.empty(), "style_score: empty evaluation set");
    size_t matches = 0;
    for (size_t i = 0; i < outputs.size(); ++i)
        if (tokens::acoustic_decode(task, outputs[i]).style == source_styles[i]) ++matches;
    return static_cast<double>(matches) / static_cast<double>(outputs.size());
}

std::string EvalReport::to_json() const {
    nlohmann::json j{{"bleu", semantic.bleu},
                     {"exact_match", semantic.exact_match},
                     {"style_score", style},
                     {"mean_confidence", mean_confidence},
                     {"min_confidence", min_confidence},
                     {"n_samples", n_samples},
                     {"config_fingerprint", config_fingerprint}};
    return j.dump(2);
}

EvalReport evaluate_outputs(const TaskSpec& task, std::span<const AcousticSequence> outputs,
                            std::span<const SemanticSequence> refs,
                            std::span<const StyleId> source_styles,
                            const std::string& fingerprint) {
    EvalReport report;
    report.semantic = semantic_score(task, outputs, refs);
    report.style = style_score(task, outputs, source_styles);
    report.n_samples = outputs.size();
    report.config_fingerprint = fingerprint;
    double conf_sum = 0.0, conf_min = 1.0;
    for (const auto& out : outputs) {
        const double c = tokens::acoustic_decode(task, out).confidence;
        conf_sum += c;
        conf_min = std::min(conf_min, c);
    }
    report.mean_confidence = conf_sum / static_cast<double>(outputs.size());
    report.min_confidence = conf_min;
    return report;
}

EvalReport evaluate_model(const TaskSpec& task, const SpeechLM<float>& m, Layout layout,
                          std::span<const AlignedPair> test_pairs, const DecodeConfig& decode,
                          int threads, uint64_t seed) {
    SLM_REQUIRE(!test_pairs.empty(), "evaluate_model: empty test set");
    const size_t n = test_pairs.size();
    std::vector<AcousticSequence> outputs(n);
    std::vector<SemanticSequence> refs(n);
    std::vector<StyleId> src_styles(n);
    std::vector<std::exception_ptr> errors(n);

    std::atomic<size_t> next{0};
    auto worker = [&] {
        while (true) {
            const size_t i = next.fetch_add(1);
            if (i >= n) break;
            try {
                const auto& pair = test_pairs[i];
                refs[i] = pair.tgt_sem;
                src_styles[i] = pair.src_ac.style;
                Rng rng(derive_seed(seed, {0xE7A1, i}));
                auto res = inference::translate(m, layout, pair.src_sem, pair.src_ac, decode, rng);
                if (layout == Layout::semantic_only) {
                    // Vocoder analog: synthesis from semantics alone carries no
                    // source style; encode with a random style.
                    const auto style = static_cast<StyleId>(
                        rng.uniform_below(static_cast<uint64_t>(task.num_styles)));
                    outputs[i] = tokens::acoustic_encode(task, res.sem, style);
                } else {
                    outputs[i] = std::move(res.ac);
                }
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    int nthreads = threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency());
    nthreads = std::max(1, std::min<int>(nthreads, static_cast<int>(n)));
    if (nthreads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& err : errors)
        if (err) std::rethrow_exception(err);

    const std::string fingerprint =
        cat("layout=", sequence::to_string(layout), ";beam=", decode.beam_size,
            ";temp=", decode.temperature, ";ratio=", decode.prompt_ratio, ";seed=", seed,
            ";n=", n);
    return evaluate_outputs(task, outputs, refs, src_styles, fingerprint);
}

std::optional<EvalReport> AblationTable::variant_mean(const std::string& variant) const {
    EvalReport mean;
    size_t count = 0;
    for (const auto& row : rows) {
        if (row.variant != variant || row.missing) continue;
        mean.semantic.bleu += row.report.semantic.bleu;
        mean.semantic.exact_match += row.report.semantic.exact_match;
        mean.style += row.report.style;
        mean.mean_confidence += row.report.mean_confidence;
        mean.min_confidence += row.report.min_confidence;
        mean.n_samples = row.report.n_samples;
        ++count;
    }
    if (count == 0) return std::nullopt;
    const double k = static_cast<double>(count);
    mean.semantic.bleu /= k;
    mean.semantic.exact_match /= k;
    mean.style /= k;
    mean.mean_confidence /= k;
    mean.min_confidence /= k;
    mean.config_fingerprint = cat("mean over ", count, " seeds");
    return mean;
}

std::string AblationTable::to_csv() const {
    std::string csv = "variant,seed,status,bleu,exact_match,style_score,mean_confidence,n_samples\n";
    for (const auto& row : rows) {
        if (row.missing) {
            csv += cat(row.variant, ",", row.seed, ",missing,,,,,\n");
            continue;
        }
        csv += cat(row.variant, ",", row.seed, ",ok,", row.report.semantic.bleu, ",",
                   row.report.semantic.exact_match, ",", row.report.style, ",",
                   row.report.mean_confidence, ",", row.report.n_samples, "\n");
    }
    // mean rows
    std::vector<std::string> seen;
    for (const auto& row : rows) {
        if (std::find(seen.begin(), seen.end(), row.variant) != seen.end()) continue;
        seen.push_back(row.variant);
        if (auto mean = variant_mean(row.variant))
            csv += cat(row.variant, ",mean,ok,", mean->semantic.bleu, ",",
                       mean->semantic.exact_match, ",", mean->style, ",", mean->mean_confidence,
                       ",", mean->n_samples, "\n");
        else
            csv += cat(row.variant, ",mean,missing,,,,,\n");
    }
    return csv;
}

std::string AblationTable::to_json() const {
    nlohmann::json jrows = nlohmann::json::array();
    for (const auto& row : rows) {
        nlohmann::json r{{"variant", row.variant}, {"seed", row.seed}, {"missing", row.missing}};
        if (!row.missing) {
            r["bleu"] = row.report.semantic.bleu;
            r["exact_match"] = row.report.semantic.exact_match;
            r["style_score"] = row.report.style;
            r["mean_confidence"] = row.report.mean_confidence;
            r["n_samples"] = row.report.n_samples;
        }
        jrows.push_back(std::move(r));
    }
    nlohmann::json jmeans = nlohmann::json::object();
    std::vector<std::string> seen;
    for (const auto& row : rows) {
        if (std::find(seen.begin(), seen.end(), row.variant) != seen.end()) continue;
        seen.push_back(row.variant);
        if (auto mean = variant_mean(row.variant))
            jmeans[row.variant] = {{"bleu", mean->semantic.bleu},
                                   {"exact_match", mean->semantic.exact_match},
                                   {"style_score", mean->style}};
    }
    return nlohmann::json{{"rows", jrows}, {"means", jmeans}}.dump(2);
}

AblationTable ablation_report(const TaskSpec& task, std::span<const AlignedPair> test_pairs,
                              const std::vector<VariantModels>& variants,
                              const DecodeConfig& decode, int threads) {
    AblationTable table;
    for (const auto& variant : variants) {
        SLM_REQUIRE(variant.models.size() == variant.seeds.size(),
                    "ablation_report: one seed label required per model");
        for (size_t s = 0; s < variant.models.size(); ++s) {
            AblationRow row;
            row.variant = variant.name;
            row.seed = variant.seeds[s];
            if (variant.models[s] == nullptr) {
                row.missing = true; // labeled gap
            } else {
                row.report = evaluate_model(task, *variant.models[s], variant.layout, test_pairs,
                                            decode, threads, variant.seeds[s]);
            }
            table.rows.push_back(std::move(row));
        }
    }
    return table;
}

double SweepMatrix::mean_style(const std::string& range, double ratio) const {
    double sum = 0.0;
    size_t count = 0;
    for (const auto& c : cells)
        if (c.train_range == range && std::fabs(c.test_ratio - ratio) < 1e-12) {
            sum += c.style;
            ++count;
        }
    SLM_REQUIRE(count > 0, "SweepMatrix: no cells for the requested range/ratio");
    return sum / static_cast<double>(count);
}

double SweepMatrix::mean_bleu(const std::string& range, double ratio) const {
    double sum = 0.0;
    size_t count = 0;
    for (const auto& c : cells)
        if (c.train_range == range && std::fabs(c.test_ratio - ratio) < 1e-12) {
            sum += c.semantic.bleu;
            ++count;
        }
    SLM_REQUIRE(count > 0, "SweepMatrix: no cells for the requested range/ratio");
    return sum / static_cast<double>(count);
}

std::string SweepMatrix::to_csv() const {
    std::string csv = "train_range,test_ratio,seed,bleu,exact_match,style_score\n";
    for (const auto& c : cells)
        csv += cat(c.train_range, ",", c.test_ratio, ",", c.seed, ",", c.semantic.bleu, ",",
                   c.semantic.exact_match, ",", c.style, "\n");
    return csv;
}

std::string SweepMatrix::to_json() const {
    nlohmann::json jcells = nlohmann::json::array();
    for (const auto& c : cells)
        jcells.push_back({{"train_range", c.train_range},
                          {"test_ratio", c.test_ratio},
                          {"seed", c.seed},
                          {"bleu", c.semantic.bleu},
                          {"exact_match", c.semantic.exact_match},
                          {"style_score", c.style}});
    return nlohmann::json{{"cells", jcells}}.dump(2);
}

std::string SweepMatrix::to_svg() const {
    // distinct ranges and sorted ratios
    std::vector<std::string> ranges;
    std::vector<double> ratios;
    for (const auto& c : cells) {
        if (std::find(ranges.begin(), ranges.end(), c.train_range) == ranges.end())
            ranges.push_back(c.train_range);
        if (std::find_if(ratios.begin(), ratios.end(), [&](double r) {
                return std::fabs(r - c.test_ratio) < 1e-12;
            }) == ratios.end())
            ratios.push_back(c.test_ratio);
    }
    std::sort(ratios.begin(), ratios.end());
    const double w = 480, h = 320, mx = 56, my = 32;
    std::string svg = cat("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"", w, "\" height=\"",
                          h, "\" viewBox=\"0 0 ", w, " ", h, "\">\n",
                          "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    auto x_of = [&](double ratio) {
        const double lo = ratios.front(), hi = ratios.back();
        const double t = hi > lo ? (ratio - lo) / (hi - lo) : 0.5;
        return mx + t * (w - 2 * mx);
    };
    auto y_of = [&](double style) { return h - my - style * (h - 2 * my); };
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"};
    svg += cat("<line x1=\"", mx, "\" y1=\"", h - my, "\" x2=\"", w - mx, "\" y2=\"", h - my,
               "\" stroke=\"black\"/>\n");
    svg += cat("<line x1=\"", mx, "\" y1=\"", my, "\" x2=\"", mx, "\" y2=\"", h - my,
               "\" stroke=\"black\"/>\n");
    for (double r : ratios)
        svg += cat("<text x=\"", x_of(r), "\" y=\"", h - my + 16,
                   "\" font-size=\"10\" text-anchor=\"middle\">", r, "</text>\n");
    for (size_t gi = 0; gi < ranges.size(); ++gi) {
        std::string points;
        for (double r : ratios)
            points += cat(x_of(r), ",", y_of(mean_style(ranges[gi], r)), " ");
        svg += cat("<polyline fill=\"none\" stroke=\"", colors[gi % 5], "\" points=\"", points,
                   "\"/>\n");
        svg += cat("<text x=\"", w - mx + 4, "\" y=\"",
                   y_of(mean_style(ranges[gi], ratios.back())), "\" font-size=\"10\" fill=\"",
                   colors[gi % 5], "\">", ranges[gi], "</text>\n");
    }
    svg += cat("<text x=\"", w / 2, "\" y=\"", h - 4,
               "\" font-size=\"11\" text-anchor=\"middle\">test prompt ratio</text>\n");
    svg += cat("<text x=\"12\" y=\"", h / 2,
               "\" font-size=\"11\" transform=\"rotate(-90 12 ", h / 2,
               ")\" text-anchor=\"middle\">style score</text>\n");
    svg += "</svg>\n";
    return svg;
}

SweepMatrix prompt_ratio_sweep(const TaskSpec& task, std::span<const AlignedPair> test_pairs,
                               const std::vector<SweepModels>& models,
                               std::span<const double> test_ratios,
                               const DecodeConfig& decode_base, int threads) {
    SweepMatrix matrix;
    for (const auto& group : models) {
        SLM_REQUIRE(group.models.size() == group.seeds.size(),
                    "prompt_ratio_sweep: one seed label required per model");
        for (size_t s = 0; s < group.models.size(); ++s) {
            SLM_REQUIRE(group.models[s] != nullptr, "prompt_ratio_sweep: missing model");
            for (double ratio : test_ratios) {
                DecodeConfig decode = decode_base;
                decode.prompt_ratio = ratio;
                const EvalReport report =
                    evaluate_model(task, *group.models[s], Layout::cot, test_pairs, decode,
                                   threads, group.seeds[s]);
                SweepCell cell;
                cell.train_range = group.range_label;
                cell.test_ratio = ratio;
                cell.seed = group.seeds[s];
                cell.semantic = report.semantic;
                cell.style = report.style;
                matrix.cells.push_back(std::move(cell));
            }
        }
    }
    return matrix;
}

}  // namespace slm::evaluation
