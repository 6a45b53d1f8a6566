#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "slm/common.hpp"
#include "slm/model.hpp"

#include "json.hpp"

// Checkpoint format: <prefix>.json manifest (parameter name -> dtype, shape,
// byte offset) plus <prefix>.bin, one raw little-endian float array. Round
// trips are bit-exact.
namespace slm::io {

template <typename T>
const char* dtype_name() {
    if constexpr (sizeof(T) == 4)
        return "f32";
    else
        return "f64";
}

template <typename T>
struct NamedArray {
    std::string name;
    int rows = 0, cols = 0;
    T* data = nullptr;

    size_t count() const { return static_cast<size_t>(rows) * cols; }
};

template <typename T>
void write_tensor_file(const std::string& prefix, const std::vector<NamedArray<T>>& arrays,
                       const std::map<std::string, std::string>& metadata) {
    nlohmann::json params = nlohmann::json::array();
    size_t offset = 0;
    for (const auto& a : arrays) {
        params.push_back({{"name", a.name},
                          {"dtype", dtype_name<T>()},
                          {"shape", std::vector<int>{a.rows, a.cols}},
                          {"offset", offset}});
        offset += a.count() * sizeof(T);
    }
    nlohmann::json manifest{{"version", 1},
                            {"dtype", dtype_name<T>()},
                            {"metadata", metadata},
                            {"params", params}};

    std::ofstream mf(prefix + ".json", std::ios::binary);
    if (!mf) fail_input("write_tensor_file: cannot open " + prefix + ".json");
    mf << manifest.dump(2) << '\n';
    if (!mf) fail_input("write_tensor_file: manifest write failed for " + prefix);

    std::ofstream bf(prefix + ".bin", std::ios::binary);
    if (!bf) fail_input("write_tensor_file: cannot open " + prefix + ".bin");
    for (const auto& a : arrays)
        bf.write(reinterpret_cast<const char*>(a.data),
                 static_cast<std::streamsize>(a.count() * sizeof(T)));
    if (!bf) fail_input("write_tensor_file: data write failed for " + prefix);
}

// Loads into caller-provided arrays; names, shapes and dtype must match the
// manifest exactly.
template <typename T>
std::map<std::string, std::string> read_tensor_file(const std::string& prefix,
                                                    const std::vector<NamedArray<T>>& arrays) {
    std::ifstream mf(prefix + ".json", std::ios::binary);
    if (!mf) fail_input("read_tensor_file: cannot open " + prefix + ".json");
    nlohmann::json manifest = nlohmann::json::parse(mf);
    SLM_REQUIRE(manifest.at("dtype").get<std::string>() == dtype_name<T>(),
                "read_tensor_file: dtype mismatch in " + prefix);
    const auto& params = manifest.at("params");
    SLM_REQUIRE(params.size() == arrays.size(),
                cat("read_tensor_file: parameter count mismatch in ", prefix, " (file ",
                    params.size(), ", expected ", arrays.size(), ")"));

    std::ifstream bf(prefix + ".bin", std::ios::binary);
    if (!bf) fail_input("read_tensor_file: cannot open " + prefix + ".bin");
    for (size_t i = 0; i < arrays.size(); ++i) {
        const auto& p = params[i];
        const auto& a = arrays[i];
        SLM_REQUIRE(p.at("name").get<std::string>() == a.name,
                    cat("read_tensor_file: parameter name mismatch at index ", i, " in ", prefix));
        const auto shape = p.at("shape").get<std::vector<int>>();
        SLM_REQUIRE(shape.size() == 2 && shape[0] == a.rows && shape[1] == a.cols,
                    "read_tensor_file: shape mismatch for " + a.name);
        bf.seekg(static_cast<std::streamoff>(p.at("offset").get<size_t>()));
        bf.read(reinterpret_cast<char*>(a.data),
                static_cast<std::streamsize>(a.count() * sizeof(T)));
        SLM_REQUIRE(bf.good(), "read_tensor_file: short read for " + a.name);
    }
    std::map<std::string, std::string> metadata;
    if (manifest.contains("metadata"))
        metadata = manifest.at("metadata").get<std::map<std::string, std::string>>();
    return metadata;
}

template <typename T>
std::vector<NamedArray<T>> arrays_of(model::ParamStore<T>& params) {
    std::vector<NamedArray<T>> arrays;
    arrays.reserve(params.entries.size());
    for (auto& e : params.entries) arrays.push_back({e.name, e.rows, e.cols, e.value.data()});
    return arrays;
}

template <typename T>
void save_model(const std::string& prefix, const model::SpeechLM<T>& m,
                std::map<std::string, std::string> metadata = {}) {
    metadata["model_config"] = m.config().to_json();
    auto& params = const_cast<model::SpeechLM<T>&>(m).params();
    write_tensor_file(prefix, arrays_of(params), metadata);
}

template <typename T>
model::SpeechLM<T> load_model(const std::string& prefix,
                              std::map<std::string, std::string>* metadata_out = nullptr) {
    std::ifstream mf(prefix + ".json", std::ios::binary);
    if (!mf) fail_input("load_model: cannot open " + prefix + ".json");
    nlohmann::json manifest = nlohmann::json::parse(mf);
    const auto metadata = manifest.at("metadata").get<std::map<std::string, std::string>>();
    const auto it = metadata.find("model_config");
    SLM_REQUIRE(it != metadata.end(), "load_model: manifest has no model_config");
    model::SpeechLM<T> m(model::ModelConfig::from_json(it->second), /*seed=*/0);
    read_tensor_file(prefix, arrays_of(m.params()));
    if (metadata_out) *metadata_out = metadata;
    return m;
}

}  // namespace slm::io
