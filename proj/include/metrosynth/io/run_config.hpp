#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "metrosynth/models/dolinar.hpp"
#include "metrosynth/models/nv_center.hpp"
#include "metrosynth/simulation.hpp"
#include "metrosynth/training.hpp"

namespace metrosynth::io {

using nlohmann::json;

/// Configuration problem tied to a specific field; maps to exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& field, const std::string& what)
        : std::runtime_error("config field '" + field + "': " + what) {}
};

namespace detail {

template <class T>
T require(const json& j, const std::string& field) {
    if (!j.contains(field)) throw ConfigError(field, "missing required field");
    try {
        return j.at(field).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(field, e.what());
    }
}

template <class T>
T optional(const json& j, const std::string& field, T fallback) {
    if (!j.contains(field) || j.at(field).is_null()) return fallback;
    try {
        return j.at(field).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(field, e.what());
    }
}

} // namespace detail

struct ModelConfig {
    std::string name;  // "nv_dc" | "dolinar"
    // nv_dc
    double t2_star = std::numeric_limits<double>::infinity();
    std::string resource = "measurements";  // or "time"
    double tau_min = 0.01;
    double tau_max = 0.0;  // 0 -> default 100 * min(T2*, 100)
    bool tau_log_scale = true;
    double prior_lo = 0.0, prior_hi = 1.0;
    // dolinar
    int n_references = 4;
    double alpha_lo = 0.05, alpha_hi = 1.50;
    double theta_max = 3.14159265358979323846;

    double resolved_tau_max() const {
        if (tau_max > 0.0) return tau_max;
        return 100.0 * std::min(t2_star, 100.0);
    }

    models::NvDcModel make_nv() const {
        return models::NvDcModel(
            t2_star,
            resource == "time" ? models::NvDcModel::Resource::EvolutionTime
                               : models::NvDcModel::Resource::Measurements,
            tau_min, resolved_tau_max(), prior_lo, prior_hi, tau_log_scale);
    }

    models::DolinarModel make_dolinar() const {
        return models::DolinarModel(n_references, alpha_lo, alpha_hi, theta_max);
    }
};

struct AgentConfig {
    std::string kind;  // mlp | static | pgh | sigma_inverse | constant
    std::vector<double> constant_values;
    double tau_max_clamp = 0.0;  // 0 -> default R_max
};

struct FullConfig {
    ModelConfig model;
    AgentConfig agent;
    sim::RunConfig run;
    train::LossSpec loss;
    std::string loss_kind = "cumulative";
    std::string pointwise_kind;  // resolved per model when empty
    bool fisher_mode = false;    // loss kind "cr" / "cr_log"
    bool fisher_log = false;
};

inline train::LossSpec::Kind loss_kind_from_string(const std::string& s) {
    if (s == "mse") return train::LossSpec::Kind::Mse;
    if (s == "discrimination") return train::LossSpec::Kind::Discrimination;
    if (s == "cumulative") return train::LossSpec::Kind::Cumulative;
    if (s == "logarithmic") return train::LossSpec::Kind::Logarithmic;
    if (s == "information_gain") return train::LossSpec::Kind::InformationGain;
    throw ConfigError("loss.kind", "unknown loss kind '" + s + "'");
}

inline FullConfig parse_config(const json& j) {
    FullConfig cfg;
    const int version = detail::optional<int>(j, "version", 1);
    if (version != 1) throw ConfigError("version", "unsupported schema version");

    if (!j.contains("model")) throw ConfigError("model", "missing required field");
    const json& jm = j.at("model");
    cfg.model.name = detail::require<std::string>(jm, "name");
    if (cfg.model.name == "nv_dc") {
        if (jm.contains("t2_star") && !jm.at("t2_star").is_null())
            cfg.model.t2_star = jm.at("t2_star").get<double>();
        cfg.model.resource = detail::optional<std::string>(jm, "resource", "measurements");
        if (cfg.model.resource != "measurements" && cfg.model.resource != "time")
            throw ConfigError("model.resource", "expected 'measurements' or 'time'");
        cfg.model.tau_min = detail::optional<double>(jm, "tau_min", 0.01);
        cfg.model.tau_max = detail::optional<double>(jm, "tau_max", 0.0);
        cfg.model.tau_log_scale = detail::optional<bool>(jm, "tau_log_scale", true);
        cfg.model.prior_lo = detail::optional<double>(jm, "prior_lo", 0.0);
        cfg.model.prior_hi = detail::optional<double>(jm, "prior_hi", 1.0);
    } else if (cfg.model.name == "dolinar") {
        cfg.model.n_references = detail::optional<int>(jm, "n_references", 4);
        cfg.model.alpha_lo = detail::optional<double>(jm, "alpha_lo", 0.05);
        cfg.model.alpha_hi = detail::optional<double>(jm, "alpha_hi", 1.50);
        cfg.model.theta_max = detail::optional<double>(jm, "theta_max", 3.14159265358979323846);
    } else {
        throw ConfigError("model.name", "unknown model '" + cfg.model.name + "'");
    }

    if (!j.contains("agent")) throw ConfigError("agent", "missing required field");
    const json& ja = j.at("agent");
    cfg.agent.kind = detail::require<std::string>(ja, "kind");
    if (cfg.agent.kind == "constant")
        cfg.agent.constant_values = detail::require<std::vector<double>>(ja, "values");
    cfg.agent.tau_max_clamp = detail::optional<double>(ja, "tau_max_clamp", 0.0);

    const json jpf = j.value("particle_filter", json::object());
    cfg.run.particles = detail::optional<int>(jpf, "particles", 480);
    cfg.run.resampling.threshold = detail::optional<double>(jpf, "threshold", 0.5);
    cfg.run.resampling.soft_alpha = detail::optional<double>(jpf, "soft_alpha", 0.5);
    cfg.run.resampling.perturb_beta = detail::optional<double>(jpf, "perturb_beta", 0.98);
    cfg.run.resampling.keep_gamma = detail::optional<double>(jpf, "keep_gamma", 0.99);
    cfg.run.resampling.batch_fraction = detail::optional<double>(jpf, "batch_fraction", 0.98);
    cfg.run.resampling.scibior_correction = detail::optional<bool>(jpf, "scibior", true);
    cfg.run.resampling.perturbation = detail::optional<bool>(jpf, "perturbation", true);
    cfg.run.resampling.proposal = detail::optional<bool>(jpf, "proposal", true);

    const json jl = j.value("loss", json::object());
    cfg.loss_kind = detail::optional<std::string>(jl, "kind", "cumulative");
    if (cfg.loss_kind == "cr" || cfg.loss_kind == "cr_log") {
        cfg.fisher_mode = true;
        cfg.fisher_log = cfg.loss_kind == "cr_log";
        cfg.loss.kind = train::LossSpec::Kind::Mse;
    } else {
        cfg.loss.kind = loss_kind_from_string(cfg.loss_kind);
    }
    cfg.pointwise_kind = detail::optional<std::string>(jl, "pointwise", "");
    cfg.loss.baseline = detail::optional<bool>(jl, "baseline", true);
    cfg.loss.resource_limited = detail::optional<bool>(jl, "resource_limited", false);
    cfg.loss.loglik_terms = detail::optional<bool>(jl, "loglik_terms", true);
    cfg.loss.ig_eps_scale = detail::optional<double>(jl, "ig_eps_scale", 1e-12);

    const json jt = j.value("training", json::object());
    cfg.run.batch_size = detail::optional<int>(jt, "batch_size", 128);
    cfg.run.update_steps = detail::optional<int>(jt, "update_steps", 100);
    cfg.run.learning_rate = detail::optional<double>(jt, "learning_rate", 1e-2);
    cfg.run.accumulate = detail::optional<int>(jt, "accumulate", 1);
    cfg.run.grad_clip_enabled = detail::optional<bool>(jt, "grad_clip_enabled", false);
    cfg.run.grad_clip = detail::optional<double>(jt, "grad_clip", 1e3);

    const json jlim = j.value("limits", json::object());
    cfg.run.max_steps = detail::optional<int>(jlim, "max_steps", 20);
    cfg.run.max_resources = detail::optional<double>(jlim, "max_resources",
                                                     static_cast<double>(cfg.run.max_steps));
    cfg.run.nu = detail::optional<double>(jlim, "nu", 0.98);

    cfg.run.seed = detail::optional<std::uint64_t>(j, "seed", 0);
    cfg.run.outcome_mixing = detail::optional<double>(jl, "outcome_mixing", 0.0);

    // pointwise loss: per-model defaults select the parameter of interest
    const int d = cfg.model.name == "dolinar" ? 2 : 1;
    std::string pw = cfg.pointwise_kind;
    if (pw.empty()) pw = cfg.model.name == "dolinar" ? "mse" : "mse";
    if (cfg.loss.kind == train::LossSpec::Kind::Discrimination) pw = "discrimination";
    cfg.loss.pointwise.kind = pw == "discrimination" ? sim::PointwiseLoss::Kind::Discrimination
                                                     : sim::PointwiseLoss::Kind::Mse;
    if (jl.contains("g")) {
        std::vector<double> g = detail::require<std::vector<double>>(jl, "g");
        if (static_cast<int>(g.size()) != d * d)
            throw ConfigError("loss.g", "expected " + std::to_string(d * d) + " entries");
        cfg.loss.pointwise.g = Tensor::matrix(d, d, std::move(g));
    } else if (cfg.model.name == "dolinar") {
        cfg.loss.pointwise.g = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 0.0});  // sign only
    } else {
        cfg.loss.pointwise.g = Tensor::matrix(1, 1, {1.0});
    }
    cfg.run.pointwise = cfg.loss.effective_pointwise();

    try {
        cfg.run.validate();
        cfg.run.pointwise.validate(d);
    } catch (const std::exception& e) {
        throw ConfigError("(run parameters)", e.what());
    }
    return cfg;
}

inline json resolved_config_json(const FullConfig& cfg) {
    json j;
    j["version"] = 1;
    json jm;
    jm["name"] = cfg.model.name;
    if (cfg.model.name == "nv_dc") {
        if (std::isinf(cfg.model.t2_star)) jm["t2_star"] = nullptr;
        else jm["t2_star"] = cfg.model.t2_star;
        jm["resource"] = cfg.model.resource;
        jm["tau_min"] = cfg.model.tau_min;
        jm["tau_max"] = cfg.model.resolved_tau_max();
        jm["tau_log_scale"] = cfg.model.tau_log_scale;
        jm["prior_lo"] = cfg.model.prior_lo;
        jm["prior_hi"] = cfg.model.prior_hi;
    } else {
        jm["n_references"] = cfg.model.n_references;
        jm["alpha_lo"] = cfg.model.alpha_lo;
        jm["alpha_hi"] = cfg.model.alpha_hi;
        jm["theta_max"] = cfg.model.theta_max;
    }
    j["model"] = jm;
    json ja;
    ja["kind"] = cfg.agent.kind;
    if (!cfg.agent.constant_values.empty()) ja["values"] = cfg.agent.constant_values;
    if (cfg.agent.tau_max_clamp > 0.0) ja["tau_max_clamp"] = cfg.agent.tau_max_clamp;
    j["agent"] = ja;
    json jpf;
    jpf["particles"] = cfg.run.particles;
    jpf["threshold"] = cfg.run.resampling.threshold;
    jpf["soft_alpha"] = cfg.run.resampling.soft_alpha;
    jpf["perturb_beta"] = cfg.run.resampling.perturb_beta;
    jpf["keep_gamma"] = cfg.run.resampling.keep_gamma;
    jpf["batch_fraction"] = cfg.run.resampling.batch_fraction;
    jpf["scibior"] = cfg.run.resampling.scibior_correction;
    jpf["perturbation"] = cfg.run.resampling.perturbation;
    jpf["proposal"] = cfg.run.resampling.proposal;
    j["particle_filter"] = jpf;
    json jl;
    jl["kind"] = cfg.loss_kind;
    jl["pointwise"] = cfg.loss.pointwise.kind == sim::PointwiseLoss::Kind::Mse ? "mse" : "discrimination";
    jl["baseline"] = cfg.loss.baseline;
    jl["resource_limited"] = cfg.loss.resource_limited;
    jl["loglik_terms"] = cfg.loss.loglik_terms;
    jl["g"] = cfg.loss.pointwise.g.to_vector();
    jl["outcome_mixing"] = cfg.run.outcome_mixing;
    j["loss"] = jl;
    json jt;
    jt["batch_size"] = cfg.run.batch_size;
    jt["update_steps"] = cfg.run.update_steps;
    jt["learning_rate"] = cfg.run.learning_rate;
    jt["accumulate"] = cfg.run.accumulate;
    jt["grad_clip_enabled"] = cfg.run.grad_clip_enabled;
    j["training"] = jt;
    json jlim;
    jlim["max_steps"] = cfg.run.max_steps;
    jlim["max_resources"] = cfg.run.max_resources;
    jlim["nu"] = cfg.run.nu;
    j["limits"] = jlim;
    j["seed"] = cfg.run.seed;
    return j;
}

} // namespace metrosynth::io
