// SPDX-License-Identifier: Apache-2.0
//
// Run configuration. One JSON file snapshots every setting; keys missing from
// the file keep their defaults, unknown keys are rejected, and dotted-path
// overrides from the command line are applied before parsing.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "moecl/backbone.hpp"
#include "moecl/data.hpp"
#include "moecl/ddas.hpp"
#include "moecl/moe.hpp"
#include "moecl/trainer.hpp"

namespace moecl {

struct StreamSettings {
    std::string path;  // saved stream directory; empty: generate synthetically
    std::uint64_t data_seed = 7;
    WorldConfig world;
    StreamLayout layout;
};

struct CilSettings {
    std::size_t classes = 20;
    std::size_t steps = 10;
    std::size_t batch = 128;
    double label_smoothing = 0.0;
    double weight_decay = 0.0;
    std::size_t experts = 2;
    std::size_t top_k = 2;
    bool naive_baseline = true;
    bool freeze_steps = false;  // activate-freeze after every step rather than once at the end
};

struct SweepSettings {
    std::vector<double> thresholds{0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 4.0};
    std::vector<std::size_t> experts{2, 4, 8, 16, 20, 22};
    std::vector<std::size_t> top_k{1, 2, 3, 4};
};

enum class FeatureKind { Backbone, RandomProjection };

struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir;  // empty: derived from the output root
    std::string checkpoint;  // pretrained backbone; empty: <output root>/pretrain/checkpoint.mclb
    StreamSettings stream;
    BackboneGeometry geometry;  // patches, patch_dim and name_dim follow the world
    double logit_scale = 10.0;
    PretrainConfig pretrain{.steps = 1000, .batch = 32, .lr = 3e-3};
    ReferenceSpec reference;
    MoeConfig moe;
    DdasConfig ddas;
    FeatureKind ddas_features = FeatureKind::Backbone;
    TrainConfig train;
    CilSettings cil;
    bool baseline = false;  // also run the shared-adapter baseline
    SweepSettings sweep;

    void validate() const;
    BackboneGeometry effective_geometry() const;
    TrainConfig effective_train() const;
};

nlohmann::ordered_json to_json(const RunConfig& config);
/// Strict: unknown keys and wrongly typed values throw Config errors.
RunConfig run_config_from_json(const nlohmann::json& j);

/// Replaces the value at a dotted path ("train.iterations") with `value`,
/// parsed as JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& path, const std::string& value);

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
void write_run_config(const RunConfig& config, const std::filesystem::path& path);

/// MOECL_OUTPUT_ROOT, or "runs" when unset.
std::filesystem::path output_root();

}  // namespace moecl
