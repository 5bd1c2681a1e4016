#pragma once

#include <fstream>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "conditioning.hpp"
#include "denoiser.hpp"
#include "diffusion_math.hpp"
#include "errors.hpp"
#include "traj_data.hpp"

namespace trajweaver {

inline constexpr const char* kCheckpointFormat = "spdm-ckpt-v1";

/// Everything recovery needs: network, schedule, embedders and the dataset
/// normalization the network was trained under.
struct Checkpoint {
    std::shared_ptr<Denoiser> model;
    NoiseSchedule schedule;
    EmbedderRegistry embedders;
    NormStats norm;
    nlohmann::json train_echo = nlohmann::json::object();

    nlohmann::json to_json() const {
        return {{"format", kCheckpointFormat},
                {"config", model->config()},
                {"schedule", schedule_descriptor(schedule)},
                {"layout", model->layout().to_json()},
                {"embedders", embedders.to_json()},
                {"norm", norm},
                {"train", train_echo},
                {"params", model->parameters_to_json()}};
    }

    static Checkpoint from_json(const nlohmann::json& j) {
        if (j.value("format", std::string{}) != kCheckpointFormat)
            throw CompatibilityError("not a " + std::string(kCheckpointFormat) + " checkpoint");
        Checkpoint c;
        const auto cfg = j.at("config").get<DenoiserConfig>();
        c.schedule = schedule_from_descriptor(j.at("schedule"));
        c.embedders = EmbedderRegistry::from_json(j.at("embedders"));
        const auto layout = ConditionLayout::from_json(j.at("layout"));
        if (!(layout == c.embedders.layout()))
            throw CompatibilityError("checkpoint layout disagrees with its embedder list");
        c.norm = j.at("norm").get<NormStats>();
        c.train_echo = j.value("train", nlohmann::json::object());
        c.model = std::make_shared<Denoiser>(cfg, layout, 0);
        c.model->parameters_from_json(j.at("params"));
        return c;
    }

    /// Throws CompatibilityError unless `registry` yields this model's layout.
    void check_compatible(const EmbedderRegistry& registry) const {
        if (!(registry.layout() == model->layout()))
            throw CompatibilityError("task embedders do not match the checkpoint's condition layout");
    }
};

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << c.to_json().dump();
    if (!os) throw IoError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("checkpoint not found or unreadable: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(1, std::string("checkpoint: ") + e.what());
    }
    return Checkpoint::from_json(j);
}

}  // namespace trajweaver
