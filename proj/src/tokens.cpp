#include "slm/tokens.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include "json.hpp"

namespace slm::tokens {

using nlohmann::json;

VocabSpec VocabSpec::make(int semantic_size, int acoustic_size, int num_codebooks) {
    VocabSpec v;
    v.semantic_size = semantic_size;
    v.acoustic_size = acoustic_size;
    v.num_codebooks = num_codebooks;
    const TokenId base = semantic_size + acoustic_size;
    v.sep_sem = base + 0;
    v.eos_sem = base + 1;
    v.sep_ac = base + 2;
    v.eos_ac = base + 3;
    v.pad = base + 4;
    v.validate();
    return v;
}

void VocabSpec::validate() const {
    SLM_REQUIRE(semantic_size >= 1, "VocabSpec: semantic_size must be >= 1");
    SLM_REQUIRE(acoustic_size >= 1, "VocabSpec: acoustic_size must be >= 1");
    SLM_REQUIRE(num_codebooks >= 1, "VocabSpec: num_codebooks must be >= 1");
    const TokenId unit_end = semantic_size + acoustic_size;
    std::set<TokenId> specials{sep_sem, eos_sem, sep_ac, eos_ac, pad};
    SLM_REQUIRE(specials.size() == 5, "VocabSpec: special ids must be distinct");
    for (TokenId s : specials)
        SLM_REQUIRE(s >= unit_end, "VocabSpec: special ids must not collide with unit ids");
}

std::string to_string(Reorder r) {
    return r == Reorder::reverse ? "reverse" : "identity";
}

Reorder reorder_from_string(const std::string& s) {
    if (s == "reverse") return Reorder::reverse;
    if (s == "identity") return Reorder::identity;
    fail_input("unknown reorder mode: " + s);
}

TaskSpec TaskSpec::make(const VocabSpec& vocab, Reorder reorder, int upsample,
                        int num_styles, int sem_len_min, int sem_len_max, uint64_t seed) {
    TaskSpec t;
    t.vocab = vocab;
    t.reorder = reorder;
    t.upsample = upsample;
    t.num_styles = num_styles;
    t.sem_len_min = sem_len_min;
    t.sem_len_max = sem_len_max;
    t.seed = seed;

    // Seed-controlled random cipher.
    t.permutation.resize(vocab.semantic_size);
    for (int i = 0; i < vocab.semantic_size; ++i) t.permutation[i] = i;
    Rng rng(derive_seed(seed, {0x7a5c}));
    for (int i = vocab.semantic_size - 1; i > 0; --i) {
        const auto j = static_cast<int>(rng.uniform_below(static_cast<uint64_t>(i) + 1));
        std::swap(t.permutation[i], t.permutation[j]);
    }

    const int half = vocab.acoustic_size / 2;
    t.content_maps.resize(vocab.num_codebooks);
    t.style_maps.resize(vocab.num_codebooks);
    for (int c = 1; c <= vocab.num_codebooks; ++c) {
        auto& g = t.content_maps[c - 1];
        g.resize(vocab.semantic_size);
        for (int u = 0; u < vocab.semantic_size; ++u) g[u] = (u + 7 * c) % half;
        auto& h = t.style_maps[c - 1];
        h.resize(num_styles);
        for (int s = 0; s < num_styles; ++s) h[s] = half + (s + 3 * c) % half;
    }
    t.validate();
    return t;
}

TaskSpec TaskSpec::make_default(uint64_t seed) {
    return make(VocabSpec::make(32, 64, 8), Reorder::reverse, /*upsample=*/2,
                /*num_styles=*/8, /*sem_len_min=*/8, /*sem_len_max=*/24, seed);
}

void TaskSpec::validate() const {
    vocab.validate();
    SLM_REQUIRE(upsample >= 1, "TaskSpec: upsample must be >= 1");
    SLM_REQUIRE(num_styles >= 2, "TaskSpec: num_styles must be >= 2");
    SLM_REQUIRE(sem_len_min >= 1 && sem_len_min <= sem_len_max,
                "TaskSpec: invalid semantic length range");

    SLM_REQUIRE(static_cast<int>(permutation.size()) == vocab.semantic_size,
                "TaskSpec: permutation size must equal semantic_size");
    std::vector<bool> seen(permutation.size(), false);
    for (TokenId p : permutation) {
        SLM_REQUIRE(p >= 0 && p < vocab.semantic_size, "TaskSpec: permutation value out of range");
        SLM_REQUIRE(!seen[p], "TaskSpec: permutation is not a bijection");
        seen[p] = true;
    }

    SLM_REQUIRE(static_cast<int>(content_maps.size()) == vocab.num_codebooks &&
                    static_cast<int>(style_maps.size()) == vocab.num_codebooks,
                "TaskSpec: one content and one style map required per codebook");
    for (int c = 0; c < vocab.num_codebooks; ++c) {
        const auto& g = content_maps[c];
        const auto& h = style_maps[c];
        SLM_REQUIRE(static_cast<int>(g.size()) == vocab.semantic_size,
                    "TaskSpec: content map must cover every semantic unit");
        SLM_REQUIRE(static_cast<int>(h.size()) == num_styles,
                    "TaskSpec: style map must cover every style");
        std::set<TokenId> g_range, h_range;
        for (TokenId v : g) {
            SLM_REQUIRE(v >= 0 && v < vocab.acoustic_size, "TaskSpec: content map id out of range");
            SLM_REQUIRE(g_range.insert(v).second, "TaskSpec: content map not injective");
        }
        for (TokenId v : h) {
            SLM_REQUIRE(v >= 0 && v < vocab.acoustic_size, "TaskSpec: style map id out of range");
            SLM_REQUIRE(h_range.insert(v).second, "TaskSpec: style map not injective");
        }
        for (TokenId v : h)
            SLM_REQUIRE(!g_range.count(v), "TaskSpec: content and style ranges must be disjoint");
    }
}

void AcousticSequence::validate() const {
    for (const auto& s : streams)
        SLM_REQUIRE(s.size() == streams[0].size(), "AcousticSequence: unequal stream lengths");
}

SemanticSequence semantic_transform(const TaskSpec& task, const SemanticSequence& src) {
    SemanticSequence out;
    out.ids.reserve(src.ids.size());
    for (TokenId id : src.ids) {
        SLM_REQUIRE(id >= 0 && id < task.vocab.semantic_size,
                    "semantic_transform: id out of vocabulary");
        out.ids.push_back(task.permutation[id]);
    }
    if (task.reorder == Reorder::reverse) std::reverse(out.ids.begin(), out.ids.end());
    return out;
}

SemanticSequence inverse_transform(const TaskSpec& task, const SemanticSequence& tgt) {
    std::vector<TokenId> inverse(task.permutation.size());
    for (size_t i = 0; i < task.permutation.size(); ++i)
        inverse[task.permutation[i]] = static_cast<TokenId>(i);

    std::vector<TokenId> ids = tgt.ids;
    if (task.reorder == Reorder::reverse) std::reverse(ids.begin(), ids.end());
    for (TokenId& id : ids) {
        SLM_REQUIRE(id >= 0 && id < task.vocab.semantic_size,
                    "inverse_transform: id out of vocabulary");
        id = inverse[id];
    }
    return SemanticSequence{std::move(ids)};
}

AcousticSequence acoustic_encode(const TaskSpec& task, const SemanticSequence& sem, StyleId style) {
    SLM_REQUIRE(style >= 0 && style < task.num_styles, "acoustic_encode: style out of range");
    const int C = task.vocab.num_codebooks;
    const int r = task.upsample;
    const size_t t_s = sem.ids.size();
    for (TokenId id : sem.ids)
        SLM_REQUIRE(id >= 0 && id < task.vocab.semantic_size,
                    "acoustic_encode: semantic id out of vocabulary");

    AcousticSequence out;
    out.style = style;
    out.streams.assign(C, std::vector<TokenId>(t_s * static_cast<size_t>(r)));
    if (r >= 2) {
        // Last frame of each group of r carries style, the first r-1 carry content.
        for (int c = 0; c < C; ++c) {
            auto& stream = out.streams[c];
            for (size_t i = 0; i < t_s; ++i) {
                const size_t base = i * static_cast<size_t>(r);
                for (int k = 0; k < r - 1; ++k)
                    stream[base + k] = task.content_maps[c][sem.ids[i]];
                stream[base + r - 1] = task.style_maps[c][style];
            }
        }
    } else {
        // r == 1: content everywhere; style replaces every even frame of the last stream.
        for (int c = 0; c < C; ++c) {
            auto& stream = out.streams[c];
            for (size_t i = 0; i < t_s; ++i) stream[i] = task.content_maps[c][sem.ids[i]];
        }
        auto& last = out.streams[C - 1];
        for (size_t i = 0; i < t_s; i += 2) last[i] = task.style_maps[C - 1][style];
    }
    return out;
}

namespace {

// id -> mapped value, or -1 when the id is outside the map's range
std::vector<TokenId> invert_map(const std::vector<TokenId>& fwd, int acoustic_size) {
    std::vector<TokenId> inv(acoustic_size, -1);
    for (size_t k = 0; k < fwd.size(); ++k)
        if (fwd[k] >= 0 && fwd[k] < acoustic_size) inv[fwd[k]] = static_cast<TokenId>(k);
    return inv;
}

TokenId lookup(const std::vector<TokenId>& inv, TokenId id) {
    if (id < 0 || id >= static_cast<TokenId>(inv.size())) return -1;
    return inv[id];
}

// Most frequent non-negative candidate; smallest wins ties. Returns the winner
// (or -1 when no candidate is valid) and the number of votes it received.
std::pair<TokenId, size_t> majority(const std::map<TokenId, size_t>& votes) {
    TokenId best = -1;
    size_t best_count = 0;
    for (const auto& [cand, count] : votes) {
        if (count > best_count) {
            best = cand;
            best_count = count;
        }
    }
    return {best, best_count};
}

}  // namespace

DecodeResult acoustic_decode(const TaskSpec& task, const AcousticSequence& ac) {
    ac.validate();
    const int C = task.vocab.num_codebooks;
    SLM_REQUIRE(ac.num_streams() == C, "acoustic_decode: stream count mismatch");
    const int r = task.upsample;
    const size_t t_a = ac.num_frames();
    const int A = task.vocab.acoustic_size;

    std::vector<std::vector<TokenId>> inv_g(C), inv_h(C);
    for (int c = 0; c < C; ++c) {
        inv_g[c] = invert_map(task.content_maps[c], A);
        inv_h[c] = invert_map(task.style_maps[c], A);
    }

    DecodeResult res;
    size_t agreeing = 0;
    std::map<TokenId, size_t> style_votes;
    // per-cell candidates deferred until the style majority is known
    std::vector<TokenId> style_cells;

    if (r >= 2) {
        const size_t groups = t_a / static_cast<size_t>(r);
        res.sem.ids.resize(groups, 0);
        for (size_t i = 0; i < groups; ++i) {
            std::map<TokenId, size_t> unit_votes;
            std::vector<TokenId> cell_candidates; // content cells of this group, in stream order
            for (int c = 0; c < C; ++c) {
                const auto& stream = ac.streams[c];
                const size_t base = i * static_cast<size_t>(r);
                for (int k = 0; k < r - 1; ++k) {
                    const TokenId cand = lookup(inv_g[c], stream[base + k]);
                    cell_candidates.push_back(cand);
                    if (cand >= 0) ++unit_votes[cand];
                }
                const TokenId s_cand = lookup(inv_h[c], stream[base + r - 1]);
                style_cells.push_back(s_cand);
                if (s_cand >= 0) ++style_votes[s_cand];
            }
            const auto [unit, _] = majority(unit_votes);
            res.sem.ids[i] = unit >= 0 ? unit : 0;
            if (unit >= 0)
                for (TokenId cand : cell_candidates)
                    if (cand == unit) ++agreeing;
        }
    } else {
        res.sem.ids.resize(t_a, 0);
        for (size_t i = 0; i < t_a; ++i) {
            std::map<TokenId, size_t> unit_votes;
            std::vector<TokenId> cell_candidates;
            for (int c = 0; c < C; ++c) {
                const bool style_cell = (c == C - 1) && (i % 2 == 0);
                if (style_cell) {
                    const TokenId s_cand = lookup(inv_h[c], ac.streams[c][i]);
                    style_cells.push_back(s_cand);
                    if (s_cand >= 0) ++style_votes[s_cand];
                } else {
                    const TokenId cand = lookup(inv_g[c], ac.streams[c][i]);
                    cell_candidates.push_back(cand);
                    if (cand >= 0) ++unit_votes[cand];
                }
            }
            const auto [unit, _] = majority(unit_votes);
            res.sem.ids[i] = unit >= 0 ? unit : 0;
            if (unit >= 0)
                for (TokenId cand : cell_candidates)
                    if (cand == unit) ++agreeing;
        }
    }

    const auto [style, _] = majority(style_votes);
    res.style = style >= 0 ? style : 0;
    if (style >= 0)
        for (TokenId cand : style_cells)
            if (cand == style) ++agreeing;

    const size_t total_cells = static_cast<size_t>(C) * t_a;
    res.confidence = total_cells > 0 ? static_cast<double>(agreeing) / static_cast<double>(total_cells)
                                     : 0.0;
    return res;
}

AlignedPair generate_pair(const TaskSpec& task, Rng& rng) {
    const auto t_s = static_cast<size_t>(rng.uniform_int(task.sem_len_min, task.sem_len_max));
    AlignedPair pair;
    pair.src_sem.ids.resize(t_s);
    for (auto& id : pair.src_sem.ids)
        id = static_cast<TokenId>(rng.uniform_below(static_cast<uint64_t>(task.vocab.semantic_size)));
    const auto s_src = static_cast<StyleId>(rng.uniform_below(static_cast<uint64_t>(task.num_styles)));
    const auto s_tgt = static_cast<StyleId>(rng.uniform_below(static_cast<uint64_t>(task.num_styles)));
    pair.tgt_sem = semantic_transform(task, pair.src_sem);
    pair.src_ac = acoustic_encode(task, pair.src_sem, s_src);
    pair.tgt_ac = acoustic_encode(task, pair.tgt_sem, s_tgt);
    return pair;
}

namespace {

std::string join_ids(const std::vector<TokenId>& ids) {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(ids[i]);
    }
    return out;
}

std::vector<TokenId> parse_ids(const std::string& field, const std::string& path) {
    std::vector<TokenId> ids;
    std::istringstream is(field);
    long v = 0;
    while (is >> v) ids.push_back(static_cast<TokenId>(v));
    SLM_REQUIRE(is.eof(), "malformed id list in dataset file " + path);
    return ids;
}

}  // namespace

void save_dataset(const std::string& path, const std::vector<AlignedPair>& pairs) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail_input("save_dataset: cannot open " + path);
    for (const auto& p : pairs) {
        out << join_ids(p.src_sem.ids) << '\t' << join_ids(p.tgt_sem.ids) << '\t'
            << p.src_ac.style << '\t' << p.tgt_ac.style << '\n';
    }
    if (!out) fail_input("save_dataset: write failed for " + path);
}

std::vector<AlignedPair> load_dataset(const std::string& path, const TaskSpec& task) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail_input("load_dataset: cannot open " + path);
    std::vector<AlignedPair> pairs;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        size_t start = 0;
        while (true) {
            const size_t tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        SLM_REQUIRE(fields.size() == 4,
                    cat("load_dataset: expected 4 tab-separated fields at ", path, ":", lineno));
        AlignedPair p;
        p.src_sem.ids = parse_ids(fields[0], path);
        p.tgt_sem.ids = parse_ids(fields[1], path);
        const int s_src = std::stoi(fields[2]);
        const int s_tgt = std::stoi(fields[3]);
        SLM_REQUIRE(!p.src_sem.ids.empty() && !p.tgt_sem.ids.empty(),
                    cat("load_dataset: empty sequence at ", path, ":", lineno));
        p.src_ac = acoustic_encode(task, p.src_sem, s_src);
        p.tgt_ac = acoustic_encode(task, p.tgt_sem, s_tgt);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

namespace {

json vocab_to_json(const VocabSpec& v) {
    return json{{"semantic_size", v.semantic_size}, {"acoustic_size", v.acoustic_size},
                {"num_codebooks", v.num_codebooks}, {"sep_sem", v.sep_sem},
                {"eos_sem", v.eos_sem},             {"sep_ac", v.sep_ac},
                {"eos_ac", v.eos_ac},               {"pad", v.pad}};
}

VocabSpec vocab_from_json(const json& j) {
    VocabSpec v;
    v.semantic_size = j.at("semantic_size").get<int>();
    v.acoustic_size = j.at("acoustic_size").get<int>();
    v.num_codebooks = j.at("num_codebooks").get<int>();
    v.sep_sem = j.at("sep_sem").get<TokenId>();
    v.eos_sem = j.at("eos_sem").get<TokenId>();
    v.sep_ac = j.at("sep_ac").get<TokenId>();
    v.eos_ac = j.at("eos_ac").get<TokenId>();
    v.pad = j.at("pad").get<TokenId>();
    v.validate();
    return v;
}

}  // namespace

std::string TaskSpec::to_json() const {
    json j{{"vocab", vocab_to_json(vocab)},
           {"permutation", permutation},
           {"reorder", to_string(reorder)},
           {"upsample", upsample},
           {"num_styles", num_styles},
           {"content_maps", content_maps},
           {"style_maps", style_maps},
           {"sem_len_min", sem_len_min},
           {"sem_len_max", sem_len_max},
           {"seed", seed}};
    return j.dump(2);
}

TaskSpec TaskSpec::from_json(const std::string& text) {
    const json j = json::parse(text);
    TaskSpec t;
    t.vocab = vocab_from_json(j.at("vocab"));
    t.permutation = j.at("permutation").get<std::vector<TokenId>>();
    t.reorder = reorder_from_string(j.at("reorder").get<std::string>());
    t.upsample = j.at("upsample").get<int>();
    t.num_styles = j.at("num_styles").get<int>();
    t.content_maps = j.at("content_maps").get<std::vector<std::vector<TokenId>>>();
    t.style_maps = j.at("style_maps").get<std::vector<std::vector<TokenId>>>();
    t.sem_len_min = j.at("sem_len_min").get<int>();
    t.sem_len_max = j.at("sem_len_max").get<int>();
    t.seed = j.at("seed").get<uint64_t>();
    t.validate();
    return t;
}

void save_task_spec(const std::string& path, const TaskSpec& task) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail_input("save_task_spec: cannot open " + path);
    out << task.to_json() << '\n';
    if (!out) fail_input("save_task_spec: write failed for " + path);
}

TaskSpec load_task_spec(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail_input("load_task_spec: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return TaskSpec::from_json(text);
}

}  // namespace slm::tokens
