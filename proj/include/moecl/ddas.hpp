// SPDX-License-Identifier: Apache-2.0
//
// Distribution-discriminative auto-selector. One small autoencoder per learned
// task scores how well it reconstructs an input's frozen feature; the lowest
// score picks the task route unless every score is above the threshold, in
// which case the input is treated as unseen and handled zero-shot.

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moecl/backbone.hpp"
#include "moecl/checkpoint.hpp"
#include "moecl/optim.hpp"
#include "moecl/tensor.hpp"

namespace moecl {

using Feature = std::vector<double>;

class FeatureSource {
   public:
    virtual ~FeatureSource() = default;
    virtual std::size_t dim() const = 0;
    virtual Feature extract(const Tensor& image) const = 0;
};

/// Pooled patch tokens of the frozen image tower, adapters excluded.
class BackboneFeatures : public FeatureSource {
   public:
    explicit BackboneFeatures(Backbone backbone) : backbone_(std::move(backbone)) {}
    std::size_t dim() const override { return backbone_.geometry().width; }
    Feature extract(const Tensor& image) const override { return backbone_.image().pooled_features(image); }

   private:
    Backbone backbone_;
};

/// Mean patch vector pushed through a fixed Gaussian projection.
class RandomProjectionFeatures : public FeatureSource {
   public:
    RandomProjectionFeatures(std::size_t patch_dim, std::size_t out_dim, std::uint64_t seed);
    std::size_t dim() const override { return out_dim_; }
    Feature extract(const Tensor& image) const override;

   private:
    std::size_t patch_dim_;
    std::size_t out_dim_;
    std::vector<double> projection_;  // patch_dim x out_dim
};

enum class ReconstructionLoss { Mse, Mae, SmoothL1 };

std::string to_string(ReconstructionLoss loss);
ReconstructionLoss reconstruction_loss_from_string(const std::string& name);

class TaskAutoencoder {
   public:
    TaskAutoencoder(TaskId task, std::size_t dim, std::size_t bottleneck, std::uint64_t seed);

    TaskId task() const noexcept { return task_; }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t bottleneck() const noexcept { return bottleneck_; }
    /// Reconstruction of a batch of features [B x d_f].
    Tensor reconstruct(const Tensor& batch) const;
    /// Mean squared reconstruction error of one feature.
    double score(std::span<const double> feature) const;
    Tensor loss(const Tensor& batch, ReconstructionLoss kind) const;
    std::vector<Tensor> parameters() const { return {w1_, b1_, w2_, b2_}; }
    std::uint64_t digest() const;

   private:
    TaskId task_;
    std::size_t dim_;
    std::size_t bottleneck_;
    Tensor w1_, b1_, w2_, b2_;
};

struct RoutingDecision {
    enum class Kind { ZeroShot, Task };
    Kind kind = Kind::ZeroShot;
    TaskId task = 0;
    std::vector<double> scores;  // per learned task, ascending task id

    bool zero_shot() const noexcept { return kind == Kind::ZeroShot; }
};

/// Task(argmin) unless the minimum is strictly above `threshold`; the lower
/// task id wins an exact tie.
RoutingDecision route_scores(std::span<const TaskId> tasks, std::span<const double> scores, double threshold);

/// Nearest-rank quantile: the ceil(q n)-th smallest value, the minimum at q = 0.
double nearest_rank_quantile(std::vector<double> values, double q);

struct DdasConfig {
    std::size_t bottleneck = 0;  // 0: d_f / 4
    ReconstructionLoss loss = ReconstructionLoss::Mse;
    double lr = 1e-3;
    std::size_t batch = 32;
    std::size_t task_iterations = 300;
    std::size_t reference_iterations = 1000;
    double quantile = 0.95;
    std::optional<double> fixed_threshold = std::nullopt;
    double calibration_fraction = 0.2;
};

class DdasBank {
   public:
    DdasBank(const DdasConfig& config, std::shared_ptr<const FeatureSource> source);

    const DdasConfig& config() const noexcept { return config_; }
    std::size_t feature_dim() const;
    Feature feature(const Tensor& image) const;

    bool has_autoencoder(TaskId task) const { return autoencoders_.contains(task); }
    TaskAutoencoder& add_autoencoder(TaskId task, std::uint64_t seed);
    const TaskAutoencoder& autoencoder(TaskId task) const;
    /// One optimiser step on a batch of features; returns the batch loss.
    double train_step(TaskId task, std::span<const Feature> batch);
    /// Adds the autoencoder and runs `iterations` minibatch steps.
    void train_autoencoder(TaskId task, std::span<const Feature> features, std::size_t iterations,
                           std::uint64_t seed);
    double mean_score(TaskId task, std::span<const Feature> features) const;

    /// Learned task ids (the reference autoencoder, id 0, excluded).
    std::vector<TaskId> tasks() const;
    std::vector<double> score_all(std::span<const double> feature) const;
    std::optional<double> reference_score(std::span<const double> feature) const;

    double threshold() const;
    bool has_threshold() const noexcept { return threshold_.has_value(); }
    void set_threshold(double value);
    /// Pools own-task scores over the given held-out features and takes the
    /// quantile. A configured fixed threshold takes precedence.
    double calibrate_threshold(const std::map<TaskId, std::vector<Feature>>& held_out, double quantile);
    RoutingDecision select(std::span<const double> scores) const;

    void save(Container& out) const;
    void load(const Container& in);

   private:
    static Tensor stack(std::span<const Feature> batch, std::size_t dim);

    DdasConfig config_;
    std::shared_ptr<const FeatureSource> source_;
    std::map<TaskId, TaskAutoencoder> autoencoders_;
    std::map<TaskId, AdamW> optimizers_;
    std::optional<double> threshold_;
};

}  // namespace moecl
