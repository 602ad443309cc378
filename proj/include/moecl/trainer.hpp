// SPDX-License-Identifier: Apache-2.0
//
// Sequential continual-learning driver. A ContinualModel bundles the frozen
// backbone, one MoE adapter per tower and the DDAS bank; run_stream trains it
// task by task and fills the accuracy matrix with task-agnostic evaluation.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moecl/backbone.hpp"
#include "moecl/ddas.hpp"
#include "moecl/metrics.hpp"
#include "moecl/moe.hpp"
#include "moecl/optim.hpp"

namespace moecl {

enum class Mode { Mtil, FewShot, Cil };

std::string to_string(Mode mode);
Mode mode_from_string(const std::string& name);

struct TrainConfig {
    std::size_t iterations = 1000;
    std::size_t batch = 64;
    double lr = 1e-3;
    double label_smoothing = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    Mode mode = Mode::Mtil;
    std::size_t shots = 5;       // few-shot mode
    std::size_t cil_steps = 10;  // class-incremental mode
    bool interleave_ddas = true;  // false: train the task autoencoder after the adapters
    bool task_oracle = false;     // evaluate with the true task route
    std::uint64_t seed = 0;

    void validate() const;
    AdamWConfig optimizer() const;
};

using ProgressFn = std::function<void(const std::string&)>;

class ContinualModel {
   public:
    /// `features` defaults to the backbone's own pooled patch tokens.
    ContinualModel(Backbone backbone, const MoeConfig& moe, const DdasConfig& ddas, std::uint64_t seed,
                   std::shared_ptr<const FeatureSource> features = nullptr);

    Backbone& backbone() noexcept { return backbone_; }
    const Backbone& backbone() const noexcept { return backbone_; }
    MoeAdapter& image_adapter() noexcept { return image_; }
    MoeAdapter& text_adapter() noexcept { return text_; }
    const MoeAdapter& image_adapter() const noexcept { return image_; }
    const MoeAdapter& text_adapter() const noexcept { return text_; }
    DdasBank& ddas() noexcept { return ddas_; }
    const DdasBank& ddas() const noexcept { return ddas_; }
    const MoeConfig& moe_config() const noexcept { return moe_config_; }
    std::uint64_t seed() const noexcept { return seed_; }

    /// Image embedding through the adapters of `route`, or the bare tower.
    Tensor encode_image(const Tensor& image, std::optional<TaskId> route, bool tally = false);
    Tensor encode_classes(std::span<const ClassId> classes, std::optional<TaskId> route, bool tally = false);

    void add_task(TaskId task);
    std::vector<TaskId> tasks() const;
    std::vector<Tensor> trainable_parameters(TaskId task) const;

    /// Held-out features kept for threshold calibration.
    std::map<TaskId, std::vector<Feature>>& calibration() noexcept { return calibration_; }

    void save(Container& out) const;
    void load(const Container& in);

   private:
    Backbone backbone_;
    MoeConfig moe_config_;
    std::uint64_t seed_;
    MoeAdapter image_;
    MoeAdapter text_;
    DdasBank ddas_;
    std::map<TaskId, std::vector<Feature>> calibration_;
};

struct TaskReport {
    TaskId task = 0;
    double final_loss = 0.0;      // mean over the last tenth of iterations
    double train_accuracy = 0.0;  // percent, own route
    double ddas_loss = 0.0;
    double threshold = 0.0;
    std::vector<std::vector<std::size_t>> frozen_image;  // per block
    std::vector<std::vector<std::size_t>> frozen_text;
};

TaskReport train_task(ContinualModel& model, const Task& task, const TrainConfig& cfg, const ProgressFn& progress = {});

/// One image's routing outcome under the final set of autoencoders.
struct ScoreRecord {
    TaskId eval_task = 0;
    std::uint64_t sample_id = 0;
    std::optional<double> reference;
    std::vector<double> scores;
    std::optional<TaskId> route;  // empty: zero-shot
};

struct RoutingSummary {
    std::size_t seen_samples = 0;    // eval images of learned tasks
    std::size_t identified = 0;      // lowest score belongs to the own task
    std::size_t routed_to_own = 0;   // Task(own) chosen, threshold included
    std::size_t unseen_samples = 0;  // eval images of tasks not yet learned
    std::size_t unseen_zero_shot = 0;
    std::size_t zero_shot_total = 0;
    std::size_t total = 0;
};

struct ThresholdRow {
    double threshold = 0.0;
    EvalMatrix matrix;
    RoutingSummary routing;  // pooled over every row of the matrix
};

struct StreamOptions {
    std::vector<double> threshold_grid;
    ProgressFn progress;
};

struct StreamResult {
    EvalMatrix matrix;
    std::vector<TaskReport> tasks;
    RoutingSummary final_routing;  // last row only
    std::vector<ScoreRecord> final_scores;
    std::vector<ThresholdRow> sweep;
};

StreamResult run_stream(ContinualModel& model, const TaskStream& stream, const TrainConfig& cfg,
                        const StreamOptions& options = {});

struct BaselineResult {
    EvalMatrix matrix;
    std::vector<double> final_losses;
};

/// One shared low-rank adapter per block, fine-tuned across every task.
BaselineResult run_baseline_shared_adapter(const Backbone& backbone, const TaskStream& stream, const TrainConfig& cfg,
                                           std::size_t rank, double init_std, const ProgressFn& progress = {});

struct CilResult {
    CilReport report;
    std::vector<std::vector<ClassId>> step_classes;
};

/// Single router over `moe.experts` experts, no DDAS, evaluation over every
/// class seen so far after each step. The single router makes the whole split
/// one task, so activate-freeze runs once after the last step unless
/// `freeze_at_steps` asks for it after every step. Class names must already
/// be registered with the text tower.
CilResult run_cil(const Backbone& backbone, std::span<const Task> steps, const MoeConfig& moe, const TrainConfig& cfg,
                  const ProgressFn& progress = {}, bool freeze_at_steps = false);

/// The same protocol with one continually fine-tuned shared adapter.
CilResult run_cil_naive(const Backbone& backbone, std::span<const Task> steps, std::size_t rank, double init_std,
                        const TrainConfig& cfg, const ProgressFn& progress = {});

/// Percent correct among `classes` for the given sockets, no gradients.
double evaluate_accuracy(const Backbone& backbone, AdapterSocket* image_socket, AdapterSocket* text_socket,
                         const SocketCall& call, const LabeledSet& data, std::span<const ClassId> classes);

}  // namespace moecl
