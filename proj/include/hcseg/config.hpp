#pragma once

#include <filesystem>
#include <string>

#include "hcseg/dataset.hpp"
#include "hcseg/model.hpp"
#include "hcseg/training.hpp"
#include "json.hpp"

namespace hcseg {

// Everything needed to reproduce a run. Serialized as JSON with an explicit
// schema version; unknown keys are rejected.
struct RunConfig {
    static constexpr int kSchemaVersion = 1;

    ModelConfig model;
    TrainConfig train;
    // Used when no manifest is given: the dataset is synthesized in memory.
    SyntheticSpec data;
    std::filesystem::path manifest; // optional dataset manifest
    std::filesystem::path out_dir = "runs/default";
    std::uint64_t seed = 0;

    // Copies the run seed into the model and training seeds.
    void apply_seed(std::uint64_t s);
    // Throws ContractError naming the offending field.
    void validate() const;
};

// Small defaults that train in minutes on one core.
RunConfig default_run_config();

nlohmann::ordered_json to_json(const RunConfig& cfg);
// Missing keys keep the values of `base`.
RunConfig run_config_from_json(const nlohmann::ordered_json& j, const RunConfig& base = default_run_config());
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);

} // namespace hcseg
