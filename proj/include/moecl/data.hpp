// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-domain task streams. A sample is a grid of patch vectors
// rendered from a latent class code; a task adds its own domain shift (and
// optionally a linear distortion) on top. Class "names" are noisy linear views
// of the same latent codes, which is what lets a pretrained text tower
// recognise classes it has never seen.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "moecl/rng.hpp"
#include "moecl/tensor.hpp"

namespace moecl {

using TaskId = std::uint32_t;
using ClassId = std::uint32_t;

/// Class ids at or above this value belong to the pretext/reference world.
inline constexpr ClassId kPretextClassBase = 1'000'000;

struct LabeledSet {
    std::size_t patches = 0;
    std::size_t patch_dim = 0;
    std::vector<double> values;  // size() * patches * patch_dim, row-major
    std::vector<ClassId> labels;
    std::vector<std::uint64_t> sample_ids;

    std::size_t size() const noexcept { return labels.size(); }
    bool empty() const noexcept { return labels.empty(); }
    std::size_t sample_width() const noexcept { return patches * patch_dim; }
    std::span<const double> sample(std::size_t i) const;
    Tensor image(std::size_t i) const;
    void append(std::span<const double> sample, ClassId label, std::uint64_t id);
    LabeledSet subset(std::span<const std::size_t> indices) const;

    bool operator==(const LabeledSet&) const = default;
};

using ClassCatalog = std::map<ClassId, std::vector<double>>;

struct Task {
    TaskId id = 0;
    std::string name;
    std::vector<ClassId> classes;
    LabeledSet train;
    LabeledSet eval;

    bool operator==(const Task&) const = default;
};

struct TaskStream {
    std::vector<Task> tasks;
    ClassCatalog names;

    const Task& task(TaskId id) const;
    std::size_t size() const noexcept { return tasks.size(); }
    bool operator==(const TaskStream&) const = default;
};

struct SyntheticTaskSpec {
    TaskId id = 0;
    std::string name;
    std::size_t classes = 4;
    std::size_t train_per_class = 100;
    std::size_t eval_per_class = 50;
    double noise = 1.0;                 // per-entry sigma
    std::vector<double> domain_shift;   // patch_dim, added to every patch
    double domain_mix = 0.0;            // blend toward a per-task random linear map
};

struct WorldConfig {
    std::size_t patches = 16;
    std::size_t patch_dim = 16;
    std::size_t latent_dim = 8;
    std::size_t name_dim = 16;
    double class_scale = 1.0;
    double name_noise = 0.1;
};

struct StreamLayout {
    std::size_t tasks = 5;
    std::size_t classes_per_task = 4;
    std::size_t train_per_class = 100;
    std::size_t eval_per_class = 50;
    double noise = 1.0;
    double separation = 6.0;  // pairwise domain-shift distance in units of noise
    double domain_mix = 0.0;
};

struct ReferenceSpec {
    std::size_t pretext_classes = 32;
    std::size_t heldout_classes = 8;
    std::size_t samples_per_class = 40;
    std::size_t heldout_per_class = 20;
    double spread = 1.5;  // latent scale relative to task classes
    double noise = 1.0;
};

struct ReferenceSet {
    LabeledSet pretext;   // pretext training classes
    LabeledSet heldout;   // unseen pretext classes, for zero-shot checks
    std::vector<ClassId> pretext_classes;
    std::vector<ClassId> heldout_classes;
    ClassCatalog names;
};

class SyntheticWorld {
   public:
    SyntheticWorld(const WorldConfig& config, std::uint64_t seed);

    const WorldConfig& config() const noexcept { return config_; }

    /// Task specs whose domain shifts are mutually orthogonal with pairwise
    /// distance separation * noise.
    std::vector<SyntheticTaskSpec> default_specs(const StreamLayout& layout, std::uint64_t seed) const;
    TaskStream generate_stream(std::span<const SyntheticTaskSpec> specs, std::uint64_t seed) const;
    ReferenceSet generate_reference(std::uint64_t seed, const ReferenceSpec& spec) const;
    /// Samples from fresh classes whose domain shift lies at least
    /// distance_sigma * noise away from every given task shift.
    LabeledSet generate_probe(std::span<const SyntheticTaskSpec> specs, double distance_sigma, std::size_t count,
                              std::uint64_t seed) const;

    std::vector<double> latent_code(ClassId id, std::uint64_t seed, double scale) const;
    std::vector<double> name_vector(std::span<const double> latent, std::uint64_t seed) const;

   private:
    void render(std::span<const double> latent, const SyntheticTaskSpec& spec, std::span<const double> mix,
                Rng& rng, std::vector<double>& out) const;

    WorldConfig config_;
    std::uint64_t seed_;
    std::vector<double> renderer_;  // patches x patch_dim x latent_dim
    std::vector<double> namer_;     // name_dim x latent_dim
};

/// Keeps exactly `shots` training samples per class; the eval split is untouched.
Task few_shot_subsample(const Task& task, std::size_t shots, std::uint64_t seed);

/// Splits one task's classes into `steps` disjoint, contiguous groups.
std::vector<Task> split_class_incremental(const Task& task, std::size_t steps);

// MCLD1 dataset files: magic "MCLD1", u32 patches, u32 patch_dim,
// u32 class_count, u64 sample_count, then f64 values, i64 labels and u64
// sample ids, all little-endian.
void save_dataset(const LabeledSet& set, const std::filesystem::path& path);
LabeledSet load_dataset(const std::filesystem::path& path);

/// A directory holding stream.json plus one MCLD1 file per task split.
void save_stream(const TaskStream& stream, const std::filesystem::path& dir);
TaskStream load_stream(const std::filesystem::path& dir);

void export_dataset_csv(const LabeledSet& set, const std::filesystem::path& path);

}  // namespace moecl
