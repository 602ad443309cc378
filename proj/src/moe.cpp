// SPDX-License-Identifier: Apache-2.0
#include "moecl/moe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace moecl {

void MoeConfig::validate() const {
    if (experts == 0) throw Error(ErrorKind::Config, "moe: expert count must be positive");
    if (top_k == 0) throw Error(ErrorKind::Config, "moe: top_k must be positive");
    if (rank == 0) throw Error(ErrorKind::Config, "moe: rank must be positive");
    if (!(expert_init_std >= 0.0) || !(router_init_std >= 0.0)) {
        throw Error(ErrorKind::Config, "moe: init std must be nonnegative");
    }
}

// ---- Expert ---------------------------------------------------------------

Expert::Expert(std::size_t width, std::size_t rank, double init_std, Rng& rng)
    : a_(rng.normal_tensor({width, rank}, init_std, true)), b_(Tensor::zeros({rank, width}, true)) {}

Tensor Expert::forward(const Tensor& x) const {
    if (x.rank() != 2 || x.cols() != a_.rows()) {
        throw Error(ErrorKind::Dimension, "expert: input " + shape_string(x.shape()) + " does not match width " +
                                              std::to_string(a_.rows()));
    }
    return matmul(matmul(x, a_), b_);
}

void Expert::freeze() {
    frozen_ = true;
    a_.set_requires_grad(false);
    b_.set_requires_grad(false);
    a_.zero_grad();
    b_.zero_grad();
}

std::uint64_t Expert::digest() const { return hash_values(b_.data(), hash_values(a_.data())); }

// ---- Router ---------------------------------------------------------------

Router::Router(TaskId task, std::size_t width, std::size_t experts, std::size_t hidden, double init_std, Rng& rng)
    : task_(task) {
    const std::size_t mid = hidden == 0 ? experts : hidden;
    weights_.push_back(rng.normal_tensor({width, mid}, init_std, true));
    weights_.push_back(Tensor::zeros({mid}, true));
    if (hidden != 0) {
        weights_.push_back(rng.normal_tensor({hidden, experts}, init_std, true));
        weights_.push_back(Tensor::zeros({experts}, true));
    }
}

Tensor Router::logits(const Tensor& cls) const {
    Tensor h = add_bias(matmul(cls, weights_[0]), weights_[1]);
    if (weights_.size() == 4) h = add_bias(matmul(relu(h), weights_[2]), weights_[3]);
    return h;
}

std::vector<Tensor> Router::parameters() const { return weights_; }

void Router::set_trainable(bool trainable) {
    for (Tensor& w : weights_) {
        w.set_requires_grad(trainable);
        w.zero_grad();
    }
}

std::uint64_t Router::digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const Tensor& w : weights_) h = hash_values(w.data(), h);
    return h;
}

// ---- gating ---------------------------------------------------------------

std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    k = std::min(k, values.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return values[a] > values[b] || (values[a] == values[b] && a < b); });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

GateWeights gate_from_logits(const Tensor& logits, std::size_t k) {
    const std::size_t n = logits.numel();
    if (n == 0) throw Error(ErrorKind::EmptySupport, "gate: no experts");
    if (k == 0) throw Error(ErrorKind::Config, "gate: top_k must be positive");
    GateWeights gate;
    gate.selected = top_k_indices(logits.data(), k);
    std::set<std::size_t> masked;
    for (std::size_t i = 0, s = 0; i < n; ++i) {
        if (s < gate.selected.size() && gate.selected[s] == i) {
            ++s;
        } else {
            masked.insert(i);
        }
    }
    gate.probs = softmax(logits, masked);
    gate.w.assign(gate.probs.data().begin(), gate.probs.data().end());
    return gate;
}

// ---- MoeLayer -------------------------------------------------------------

MoeLayer::MoeLayer(std::size_t width, const MoeConfig& config, std::uint64_t seed)
    : width_(width), top_k_(std::min(config.top_k, config.experts)), config_(config) {
    config.validate();
    Rng rng(derive_seed(seed, "experts"));
    experts_.reserve(config.experts);
    for (std::size_t i = 0; i < config.experts; ++i) experts_.emplace_back(width, config.rank, config.expert_init_std, rng);
}

const Router& MoeLayer::router(TaskId task) const {
    const auto it = routers_.find(task);
    if (it == routers_.end()) throw Error(ErrorKind::UnknownTask, "moe: no router for task " + std::to_string(task));
    return it->second;
}

std::vector<TaskId> MoeLayer::tasks() const {
    std::vector<TaskId> out;
    for (const auto& [t, r] : routers_) out.push_back(t);
    return out;
}

Router& MoeLayer::add_task_router(TaskId task, std::uint64_t seed) {
    if (routers_.contains(task)) {
        throw Error(ErrorKind::Duplicate, "moe: router for task " + std::to_string(task) + " already exists");
    }
    for (auto& [t, r] : routers_) r.set_trainable(false);
    Rng rng(derive_seed(seed, "router"));
    auto [it, inserted] = routers_.emplace(
        task, Router(task, width_, experts_.size(), config_.router_hidden, config_.router_init_std, rng));
    counts_[task].assign(experts_.size(), 0);
    forwards_[task] = 0;
    return it->second;
}

GateWeights MoeLayer::route(TaskId task, const Tensor& cls) const {
    if (cls.rank() != 2 || cls.rows() != 1 || cls.cols() != width_) {
        throw Error(ErrorKind::Dimension, "moe: router input must be [1 x " + std::to_string(width_) + "]");
    }
    return gate_from_logits(router(task).logits(cls), top_k_);
}

Tensor MoeLayer::forward(TaskId task, const Tensor& x, bool tally) {
    const GateWeights gate = route(task, row(x, 0));
    Tensor y;
    for (std::size_t i : gate.selected) {
        const Tensor term = scale_by(experts_[i].forward(x), gate.probs, i);
        y = y.defined() ? add(y, term) : term;
    }
    if (tally) this->tally(task, gate.selected);
    return y;
}

void MoeLayer::tally(TaskId task, std::span<const std::size_t> selected) {
    counts(task);
    auto& c = counts_[task];
    for (std::size_t i : selected) {
        if (i >= c.size()) throw Error(ErrorKind::OutOfRange, "moe: expert id out of range");
        ++c[i];
    }
    ++forwards_[task];
}

std::vector<std::size_t> MoeLayer::freeze_top_activated(TaskId task) {
    const auto& c = counts(task);
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < experts_.size(); ++i) {
        if (!experts_[i].frozen() && c[i] > 0) candidates.push_back(i);
    }
    std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) { return c[a] > c[b]; });
    candidates.resize(std::min(candidates.size(), top_k_));
    std::sort(candidates.begin(), candidates.end());
    for (std::size_t i : candidates) experts_[i].freeze();
    return candidates;
}

std::vector<Tensor> MoeLayer::trainable_parameters(TaskId task) const {
    std::vector<Tensor> out = router(task).parameters();
    for (const Expert& e : experts_) {
        if (e.frozen()) continue;
        out.push_back(e.down());
        out.push_back(e.up());
    }
    return out;
}

const std::vector<std::uint64_t>& MoeLayer::counts(TaskId task) const {
    const auto it = counts_.find(task);
    if (it == counts_.end()) throw Error(ErrorKind::UnknownTask, "moe: no counts for task " + std::to_string(task));
    return it->second;
}

std::uint64_t MoeLayer::forwards(TaskId task) const {
    counts(task);
    return forwards_.at(task);
}

void MoeLayer::reset_counts(TaskId task) {
    counts(task);
    counts_[task].assign(experts_.size(), 0);
    forwards_[task] = 0;
}

std::set<std::size_t> MoeLayer::frozen_set() const {
    std::set<std::size_t> out;
    for (std::size_t i = 0; i < experts_.size(); ++i)
        if (experts_[i].frozen()) out.insert(i);
    return out;
}

void MoeLayer::save(Container& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < experts_.size(); ++i) {
        const std::string p = prefix + "expert" + std::to_string(i) + "/";
        out.put(p + "A", experts_[i].down());
        out.put(p + "B", experts_[i].up());
    }
    std::vector<double> frozen;
    for (std::size_t i : frozen_set()) frozen.push_back(static_cast<double>(i));
    out.put(prefix + "frozen", {frozen.size()}, frozen);
    for (const auto& [task, r] : routers_) {
        const std::string p = prefix + "router/" + std::to_string(task) + "/";
        const auto params = r.parameters();
        for (std::size_t j = 0; j < params.size(); ++j) out.put(p + std::to_string(j), params[j]);
        const auto& c = counts_.at(task);
        out.put(prefix + "counts/" + std::to_string(task), {c.size()}, std::vector<double>(c.begin(), c.end()));
        out.put(prefix + "forwards/" + std::to_string(task), {1}, {static_cast<double>(forwards_.at(task))});
    }
}

void MoeLayer::load(const Container& in, const std::string& prefix) {
    for (std::size_t i = 0; i < experts_.size(); ++i) {
        const std::string p = prefix + "expert" + std::to_string(i) + "/";
        in.load_into(p + "A", experts_[i].down());
        in.load_into(p + "B", experts_[i].up());
    }
    for (double v : in.get(prefix + "frozen").values) {
        const auto i = static_cast<std::size_t>(v);
        if (i >= experts_.size()) throw Error(ErrorKind::Format, "checkpoint: frozen expert id out of range");
        experts_[i].freeze();
    }
    routers_.clear();
    counts_.clear();
    forwards_.clear();
    const std::string counts_prefix = prefix + "counts/";
    for (const auto& name : in.names_with_prefix(counts_prefix)) {
        const auto task = static_cast<TaskId>(std::stoul(name.substr(counts_prefix.size())));
        Router& r = add_task_router(task, 0);
        auto params = r.parameters();
        for (std::size_t j = 0; j < params.size(); ++j) {
            in.load_into(prefix + "router/" + std::to_string(task) + "/" + std::to_string(j), params[j]);
        }
        const auto& c = in.get(name).values;
        if (c.size() != experts_.size()) throw Error(ErrorKind::Format, "checkpoint: count vector size mismatch");
        counts_[task].assign(c.begin(), c.end());
        forwards_[task] = static_cast<std::uint64_t>(in.get(prefix + "forwards/" + std::to_string(task)).values.at(0));
    }
    for (auto& [t, r] : routers_) r.set_trainable(false);
}

// ---- MoeAdapter -----------------------------------------------------------

MoeAdapter::MoeAdapter(std::string tower, std::size_t blocks, std::size_t width, const MoeConfig& config,
                       std::uint64_t seed)
    : tower_(std::move(tower)) {
    for (std::size_t b = 0; b < blocks; ++b) {
        layers_.emplace_back(width, config, derive_seed(derive_seed(seed, tower_), b));
    }
}

Tensor MoeAdapter::delta(std::size_t block, const Tensor& attended, const SocketCall& call) {
    if (!call.task) throw Error(ErrorKind::UnknownTask, "moe adapter: forward without a task id");
    return layers_.at(block).forward(*call.task, attended, call.tally);
}

void MoeAdapter::add_task(TaskId task, std::uint64_t seed) {
    for (std::size_t b = 0; b < layers_.size(); ++b) {
        layers_[b].add_task_router(task, derive_seed(derive_seed(derive_seed(seed, tower_), b), task));
    }
}

bool MoeAdapter::has_task(TaskId task) const { return !layers_.empty() && layers_.front().has_router(task); }

std::vector<std::vector<std::size_t>> MoeAdapter::freeze_top_activated(TaskId task) {
    std::vector<std::vector<std::size_t>> out;
    for (MoeLayer& l : layers_) out.push_back(l.freeze_top_activated(task));
    return out;
}

std::vector<Tensor> MoeAdapter::trainable_parameters(TaskId task) const {
    std::vector<Tensor> out;
    for (const MoeLayer& l : layers_) {
        auto p = l.trainable_parameters(task);
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

void MoeAdapter::save(Container& out) const {
    for (std::size_t b = 0; b < layers_.size(); ++b) {
        layers_[b].save(out, "adapter/" + tower_ + "/block" + std::to_string(b) + "/");
    }
}

void MoeAdapter::load(const Container& in) {
    for (std::size_t b = 0; b < layers_.size(); ++b) {
        layers_[b].load(in, "adapter/" + tower_ + "/block" + std::to_string(b) + "/");
    }
}

// ---- SharedAdapter --------------------------------------------------------

SharedAdapter::SharedAdapter(std::size_t blocks, std::size_t width, std::size_t rank, double init_std,
                             std::uint64_t seed) {
    Rng rng(derive_seed(seed, "shared-adapter"));
    for (std::size_t b = 0; b < blocks; ++b) experts_.emplace_back(width, rank, init_std, rng);
}

Tensor SharedAdapter::delta(std::size_t block, const Tensor& attended, const SocketCall&) {
    return experts_.at(block).forward(attended);
}

std::vector<Tensor> SharedAdapter::trainable_parameters() const {
    std::vector<Tensor> out;
    for (const Expert& e : experts_) {
        out.push_back(e.down());
        out.push_back(e.up());
    }
    return out;
}

// ---- heatmap --------------------------------------------------------------

void export_activation_heatmap(std::span<const MoeAdapter* const> adapters, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
    out << "tower,block,task,expert,count,frequency\n";
    char freq[32];
    for (const MoeAdapter* adapter : adapters) {
        for (std::size_t b = 0; b < adapter->blocks(); ++b) {
            const MoeLayer& layer = adapter->layer(b);
            for (TaskId task : layer.tasks()) {
                const auto& c = layer.counts(task);
                const std::uint64_t n = layer.forwards(task);
                for (std::size_t e = 0; e < c.size(); ++e) {
                    const double f = n == 0 ? 0.0 : static_cast<double>(c[e]) / static_cast<double>(n);
                    std::snprintf(freq, sizeof freq, "%.6f", f);
                    out << adapter->tower() << ',' << b << ',' << task << ',' << e << ',' << c[e] << ',' << freq
                        << '\n';
                }
            }
        }
    }
    if (!out) throw Error(ErrorKind::Io, "failed writing " + path.string());
}

}  // namespace moecl
