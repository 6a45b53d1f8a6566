#include "slm/model.hpp"

#include "json.hpp"

namespace slm::model {

using nlohmann::json;

void ModelConfig::validate() const {
    vocab.validate();
    SLM_REQUIRE(ar_layers >= 0 && nar_layers >= 0, "ModelConfig: negative layer count");
    SLM_REQUIRE(ar_layers + nar_layers >= 1, "ModelConfig: at least one decoder layer required");
    SLM_REQUIRE(embed_dim >= 1 && model_dim >= 1 && ffn_dim >= 1 && heads >= 1 && max_len >= 1,
                "ModelConfig: all dimensions must be >= 1");
    SLM_REQUIRE(model_dim % heads == 0, "ModelConfig: model_dim must be divisible by heads");
    SLM_REQUIRE(dropout >= 0.0 && dropout < 1.0, "ModelConfig: dropout must be in [0, 1)");
}

std::string ModelConfig::to_json() const {
    json j{{"ar_layers", ar_layers},
           {"nar_layers", nar_layers},
           {"embed_dim", embed_dim},
           {"model_dim", model_dim},
           {"ffn_dim", ffn_dim},
           {"heads", heads},
           {"dropout", dropout},
           {"max_len", max_len},
           {"acoustic_embeddings", acoustic_embeddings},
           {"vocab",
            {{"semantic_size", vocab.semantic_size},
             {"acoustic_size", vocab.acoustic_size},
             {"num_codebooks", vocab.num_codebooks},
             {"sep_sem", vocab.sep_sem},
             {"eos_sem", vocab.eos_sem},
             {"sep_ac", vocab.sep_ac},
             {"eos_ac", vocab.eos_ac},
             {"pad", vocab.pad}}}};
    return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    const json j = json::parse(text);
    ModelConfig c;
    c.ar_layers = j.at("ar_layers").get<int>();
    c.nar_layers = j.at("nar_layers").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.model_dim = j.at("model_dim").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.heads = j.at("heads").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.max_len = j.at("max_len").get<int>();
    c.acoustic_embeddings = j.at("acoustic_embeddings").get<bool>();
    const json& v = j.at("vocab");
    c.vocab.semantic_size = v.at("semantic_size").get<int>();
    c.vocab.acoustic_size = v.at("acoustic_size").get<int>();
    c.vocab.num_codebooks = v.at("num_codebooks").get<int>();
    c.vocab.sep_sem = v.at("sep_sem").get<TokenId>();
    c.vocab.eos_sem = v.at("eos_sem").get<TokenId>();
    c.vocab.sep_ac = v.at("sep_ac").get<TokenId>();
    c.vocab.eos_ac = v.at("eos_ac").get<TokenId>();
    c.vocab.pad = v.at("pad").get<TokenId>();
    c.validate();
    return c;
}

long long ParamCount::component(const std::string& name) const {
    for (const auto& item : items)
        if (item.component == name) return item.count;
    return 0;
}

ParamCount param_count(const ModelConfig& config) {
    config.validate();
    const long long e = config.embed_dim;
    const long long d = config.model_dim;
    const long long f = config.ffn_dim;
    const long long v_ar = config.vocab.ar_vocab_size();
    const long long a = config.vocab.acoustic_size;
    const long long c = config.vocab.num_codebooks;

    // ln1 + 4 projections with bias + ln2 + two ffn maps with bias
    const long long per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);

    ParamCount out;
    auto item = [&](const std::string& name, long long count) {
        out.items.push_back({name, count});
        out.total += count;
    };
    item("embeddings.ar", v_ar * e);
    item("embeddings.acoustic", config.acoustic_embeddings ? c * a * e : 0);
    item("embeddings.position", static_cast<long long>(config.max_len) * e);
    item("lift", e * d + d);
    item("ar_stack", config.ar_layers * per_layer + (config.ar_layers >= 1 ? 2 * d : 0));
    item("head.ar", config.ar_layers >= 1 ? d * v_ar : 0);
    item("nar_stack", config.nar_layers * per_layer + (config.nar_layers >= 1 ? 2 * d : 0));
    item("heads.nar", config.nar_layers >= 1 ? (c - 1) * d * a : 0);
    return out;
}

}  // namespace slm::model
