#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "metrosynth/agents.hpp"

namespace metrosynth::io {

using nlohmann::json;

inline json output_map_to_json(const agents::OutputMap& map) {
    json j;
    j["kind"] = map.kind == agents::OutputKind::Interval ? "interval" : "categorical";
    if (map.kind == agents::OutputKind::Interval) {
        json cs = json::array();
        for (const auto& c : map.controls)
            cs.push_back({{"name", c.name}, {"lo", c.lo}, {"hi", c.hi}, {"log_scale", c.log_scale}});
        j["controls"] = cs;
    } else {
        j["choices"] = map.choices;
    }
    return j;
}

inline agents::OutputMap output_map_from_json(const json& j) {
    agents::OutputMap map;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "interval") {
        map.kind = agents::OutputKind::Interval;
        for (const auto& c : j.at("controls"))
            map.controls.push_back({c.at("name").get<std::string>(), c.at("lo").get<double>(),
                                    c.at("hi").get<double>(), c.at("log_scale").get<bool>()});
    } else if (kind == "categorical") {
        map.kind = agents::OutputKind::Categorical;
        map.choices = j.at("choices").get<std::vector<double>>();
    } else {
        throw std::runtime_error("checkpoint: unknown output map kind " + kind);
    }
    return map;
}

inline json variables_to_json(const std::vector<ad::Variable>& vars) {
    json out = json::array();
    for (const auto& v : vars) {
        json jv;
        jv["name"] = v.name;
        jv["rank"] = v.value.rank();
        jv["rows"] = v.value.rows();
        jv["cols"] = v.value.cols();
        jv["data"] = v.value.to_vector();
        out.push_back(jv);
    }
    return out;
}

inline void variables_from_json(const json& j, std::vector<ad::Variable>& vars) {
    if (j.size() != vars.size())
        throw std::runtime_error("checkpoint: variable count mismatch (" + std::to_string(j.size()) +
                                 " stored, " + std::to_string(vars.size()) + " expected)");
    for (std::size_t i = 0; i < vars.size(); ++i) {
        const json& jv = j[i];
        const int rank = jv.at("rank").get<int>();
        const int rows = jv.at("rows").get<int>();
        const int cols = jv.at("cols").get<int>();
        std::vector<double> data = jv.at("data").get<std::vector<double>>();
        if (rank != vars[i].value.rank() || rows != vars[i].value.rows() || cols != vars[i].value.cols())
            throw std::runtime_error("checkpoint: shape mismatch for variable " + vars[i].name);
        if (rank == 0) vars[i].value = Tensor::scalar(data.at(0));
        else if (rank == 1) vars[i].value = Tensor::vector(std::move(data));
        else vars[i].value = Tensor::matrix(rows, cols, std::move(data));
    }
}

template <class Agent>
json checkpoint_to_json(const std::string& kind, const Agent& agent) {
    json j;
    j["version"] = 1;
    j["agent"] = kind;
    j["variables"] = variables_to_json(agent.variables());
    return j;
}

inline void write_json(const std::string& path, const json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << j.dump(2) << '\n';
}

inline json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    json j;
    in >> j;
    return j;
}

} // namespace metrosynth::io
