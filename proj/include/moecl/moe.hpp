// SPDX-License-Identifier: Apache-2.0
//
// Mixture of low-rank adapter experts. Every (tower, block) pair owns one
// MoeLayer: a shared pool of experts plus one router per task. A router maps
// the [CLS] row of the post-attention tokens to expert logits; the top-k are
// mixed with softmax weights over the selected logits only.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "moecl/backbone.hpp"
#include "moecl/checkpoint.hpp"
#include "moecl/data.hpp"
#include "moecl/tensor.hpp"

namespace moecl {

enum class CountingMode { Online, PostPass };

struct MoeConfig {
    std::size_t experts = 22;
    std::size_t top_k = 2;
    std::size_t rank = 4;
    double expert_init_std = 0.02;
    double router_init_std = 0.02;
    std::size_t router_hidden = 0;  // 0: single linear layer
    CountingMode counting = CountingMode::Online;

    void validate() const;
};

class Expert {
   public:
    Expert(std::size_t width, std::size_t rank, double init_std, Rng& rng);

    /// (x A) B, same shape as x.
    Tensor forward(const Tensor& x) const;
    Tensor& down() noexcept { return a_; }
    Tensor& up() noexcept { return b_; }
    const Tensor& down() const noexcept { return a_; }
    const Tensor& up() const noexcept { return b_; }
    bool frozen() const noexcept { return frozen_; }
    void freeze();
    std::uint64_t digest() const;

   private:
    Tensor a_;  // [d x r]
    Tensor b_;  // [r x d]
    bool frozen_ = false;
};

class Router {
   public:
    Router(TaskId task, std::size_t width, std::size_t experts, std::size_t hidden, double init_std, Rng& rng);

    TaskId task() const noexcept { return task_; }
    /// Logits [1 x N_E] for a [1 x d] input.
    Tensor logits(const Tensor& cls) const;
    std::vector<Tensor> parameters() const;
    void set_trainable(bool trainable);
    std::uint64_t digest() const;

   private:
    TaskId task_;
    std::vector<Tensor> weights_;  // alternating weight, bias
};

struct GateWeights {
    std::vector<double> w;              // length N_E, zero outside the selected set
    std::vector<std::size_t> selected;  // ascending expert ids
    Tensor probs;                       // [1 x N_E], differentiable
};

/// Indices of the k largest values; lower index wins ties. Returned ascending.
std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k);

/// Softmax over the top-k entries of `logits` [1 x N]; the rest are exactly zero.
GateWeights gate_from_logits(const Tensor& logits, std::size_t k);

class MoeLayer {
   public:
    MoeLayer(std::size_t width, const MoeConfig& config, std::uint64_t seed);

    std::size_t width() const noexcept { return width_; }
    std::size_t expert_count() const noexcept { return experts_.size(); }
    std::size_t top_k() const noexcept { return top_k_; }
    Expert& expert(std::size_t i) { return experts_.at(i); }
    const Expert& expert(std::size_t i) const { return experts_.at(i); }
    bool has_router(TaskId task) const { return routers_.contains(task); }
    const Router& router(TaskId task) const;
    std::vector<TaskId> tasks() const;

    /// Adds a router for `task` and freezes every earlier router.
    Router& add_task_router(TaskId task, std::uint64_t seed);
    GateWeights route(TaskId task, const Tensor& cls) const;
    /// Sum of the selected experts' deltas weighted by the gate. With `tally`
    /// the selection is counted against the task.
    Tensor forward(TaskId task, const Tensor& x, bool tally);

    /// Freezes the k most-selected unfrozen experts with a nonzero count.
    std::vector<std::size_t> freeze_top_activated(TaskId task);
    std::vector<Tensor> trainable_parameters(TaskId task) const;

    /// Counts one forward that selected `selected` for the task.
    void tally(TaskId task, std::span<const std::size_t> selected);
    const std::vector<std::uint64_t>& counts(TaskId task) const;
    std::uint64_t forwards(TaskId task) const;
    void reset_counts(TaskId task);
    std::set<std::size_t> frozen_set() const;

    void save(Container& out, const std::string& prefix) const;
    void load(const Container& in, const std::string& prefix);

   private:
    std::size_t width_;
    std::size_t top_k_;
    MoeConfig config_;
    std::vector<Expert> experts_;
    std::map<TaskId, Router> routers_;
    std::map<TaskId, std::vector<std::uint64_t>> counts_;
    std::map<TaskId, std::uint64_t> forwards_;
};

/// One MoeLayer per transformer block of a tower.
class MoeAdapter : public AdapterSocket {
   public:
    MoeAdapter(std::string tower, std::size_t blocks, std::size_t width, const MoeConfig& config,
               std::uint64_t seed);

    const std::string& tower() const noexcept { return tower_; }
    std::size_t blocks() const override { return layers_.size(); }
    Tensor delta(std::size_t block, const Tensor& attended, const SocketCall& call) override;

    MoeLayer& layer(std::size_t b) { return layers_.at(b); }
    const MoeLayer& layer(std::size_t b) const { return layers_.at(b); }
    void add_task(TaskId task, std::uint64_t seed);
    bool has_task(TaskId task) const;
    /// Newly frozen ids per block.
    std::vector<std::vector<std::size_t>> freeze_top_activated(TaskId task);
    std::vector<Tensor> trainable_parameters(TaskId task) const;

    void save(Container& out) const;
    void load(const Container& in);

   private:
    std::string tower_;
    std::vector<MoeLayer> layers_;
};

/// A single always-on low-rank adapter per block, shared by every task.
class SharedAdapter : public AdapterSocket {
   public:
    SharedAdapter(std::size_t blocks, std::size_t width, std::size_t rank, double init_std, std::uint64_t seed);

    std::size_t blocks() const override { return experts_.size(); }
    Tensor delta(std::size_t block, const Tensor& attended, const SocketCall& call) override;
    std::vector<Tensor> trainable_parameters() const;

   private:
    std::vector<Expert> experts_;
};

/// CSV with columns tower,block,task,expert,count,frequency where frequency is
/// count over the number of counted forwards of that (block, task).
void export_activation_heatmap(std::span<const MoeAdapter* const> adapters, const std::filesystem::path& path);

}  // namespace moecl
