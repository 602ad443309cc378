// SPDX-License-Identifier: Apache-2.0
#include "moecl/ddas.hpp"

#include <algorithm>
#include <cmath>

namespace moecl {

RandomProjectionFeatures::RandomProjectionFeatures(std::size_t patch_dim, std::size_t out_dim, std::uint64_t seed)
    : patch_dim_(patch_dim), out_dim_(out_dim), projection_(patch_dim * out_dim) {
    if (patch_dim == 0 || out_dim == 0) throw Error(ErrorKind::Config, "random projection: dimensions must be positive");
    Rng rng(derive_seed(seed, "ddas-projection"));
    const double std = 1.0 / std::sqrt(static_cast<double>(patch_dim));
    for (double& v : projection_) v = rng.normal(0.0, std);
}

Feature RandomProjectionFeatures::extract(const Tensor& image) const {
    if (image.rank() != 2 || image.cols() != patch_dim_) {
        throw Error(ErrorKind::Dimension, "random projection: image has wrong patch width");
    }
    std::vector<double> mean(patch_dim_, 0.0);
    for (std::size_t p = 0; p < image.rows(); ++p)
        for (std::size_t j = 0; j < patch_dim_; ++j) mean[j] += image.at(p, j) / static_cast<double>(image.rows());
    Feature out(out_dim_, 0.0);
    for (std::size_t j = 0; j < patch_dim_; ++j)
        for (std::size_t o = 0; o < out_dim_; ++o) out[o] += mean[j] * projection_[j * out_dim_ + o];
    return out;
}

std::string to_string(ReconstructionLoss loss) {
    switch (loss) {
        case ReconstructionLoss::Mse: return "mse";
        case ReconstructionLoss::Mae: return "mae";
        case ReconstructionLoss::SmoothL1: return "smooth_l1";
    }
    return "mse";
}

ReconstructionLoss reconstruction_loss_from_string(const std::string& name) {
    if (name == "mse") return ReconstructionLoss::Mse;
    if (name == "mae") return ReconstructionLoss::Mae;
    if (name == "smooth_l1") return ReconstructionLoss::SmoothL1;
    throw Error(ErrorKind::Config, "unknown reconstruction loss '" + name + "'");
}

// ---- TaskAutoencoder ------------------------------------------------------

TaskAutoencoder::TaskAutoencoder(TaskId task, std::size_t dim, std::size_t bottleneck, std::uint64_t seed)
    : task_(task), dim_(dim), bottleneck_(bottleneck) {
    if (dim == 0 || bottleneck == 0) throw Error(ErrorKind::Config, "autoencoder: dimensions must be positive");
    if (bottleneck >= dim) throw Error(ErrorKind::Config, "autoencoder: bottleneck must be smaller than the input");
    Rng rng(derive_seed(seed, task));
    w1_ = rng.normal_tensor({dim, bottleneck}, 1.0 / std::sqrt(static_cast<double>(dim)), true);
    b1_ = Tensor::zeros({bottleneck}, true);
    w2_ = rng.normal_tensor({bottleneck, dim}, 1.0 / std::sqrt(static_cast<double>(bottleneck)), true);
    b2_ = Tensor::zeros({dim}, true);
}

Tensor TaskAutoencoder::reconstruct(const Tensor& batch) const {
    if (batch.rank() != 2 || batch.cols() != dim_) {
        throw Error(ErrorKind::Dimension, "autoencoder: expected features of width " + std::to_string(dim_));
    }
    return add_bias(matmul(relu(add_bias(matmul(batch, w1_), b1_)), w2_), b2_);
}

double TaskAutoencoder::score(std::span<const double> feature) const {
    NoGradGuard guard;
    const Tensor f = Tensor::from({1, dim_}, std::vector<double>(feature.begin(), feature.end()));
    return mse(f, reconstruct(f)).item();
}

Tensor TaskAutoencoder::loss(const Tensor& batch, ReconstructionLoss kind) const {
    const Tensor out = reconstruct(batch);
    switch (kind) {
        case ReconstructionLoss::Mae: return mae(out, batch);
        case ReconstructionLoss::SmoothL1: return smooth_l1(out, batch);
        case ReconstructionLoss::Mse: break;
    }
    return mse(out, batch);
}

std::uint64_t TaskAutoencoder::digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const Tensor& p : parameters()) h = hash_values(p.data(), h);
    return h;
}

// ---- routing --------------------------------------------------------------

RoutingDecision route_scores(std::span<const TaskId> tasks, std::span<const double> scores, double threshold) {
    if (scores.empty()) throw Error(ErrorKind::EmptyInput, "select: no task scores");
    if (tasks.size() != scores.size()) throw Error(ErrorKind::Dimension, "select: task and score counts differ");
    RoutingDecision d;
    d.scores.assign(scores.begin(), scores.end());
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] < scores[best] || (scores[i] == scores[best] && tasks[i] < tasks[best])) best = i;
    }
    if (scores[best] > threshold) return d;
    d.kind = RoutingDecision::Kind::Task;
    d.task = tasks[best];
    return d;
}

double nearest_rank_quantile(std::vector<double> values, double q) {
    if (values.empty()) throw Error(ErrorKind::EmptyInput, "quantile of an empty set");
    if (!(q >= 0.0 && q <= 1.0)) throw Error(ErrorKind::OutOfRange, "quantile must lie in [0, 1]");
    std::sort(values.begin(), values.end());
    const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
    return values[std::max<std::size_t>(rank, 1) - 1];
}

// ---- DdasBank -------------------------------------------------------------

DdasBank::DdasBank(const DdasConfig& config, std::shared_ptr<const FeatureSource> source)
    : config_(config), source_(std::move(source)) {
    if (config.batch == 0) throw Error(ErrorKind::Config, "ddas: batch must be positive");
    if (!(config.quantile >= 0.0 && config.quantile <= 1.0)) throw Error(ErrorKind::Config, "ddas: quantile outside [0, 1]");
    if (config.fixed_threshold && !(*config.fixed_threshold >= 0.0)) {
        throw Error(ErrorKind::Config, "ddas: threshold must be nonnegative");
    }
    if (config.fixed_threshold) threshold_ = config.fixed_threshold;
}

std::size_t DdasBank::feature_dim() const {
    if (!source_) throw Error(ErrorKind::State, "ddas: feature source not initialised");
    return source_->dim();
}

Feature DdasBank::feature(const Tensor& image) const {
    if (!source_) throw Error(ErrorKind::State, "ddas: feature source not initialised");
    return source_->extract(image);
}

TaskAutoencoder& DdasBank::add_autoencoder(TaskId task, std::uint64_t seed) {
    if (autoencoders_.contains(task)) {
        throw Error(ErrorKind::Duplicate, "ddas: autoencoder for task " + std::to_string(task) + " already exists");
    }
    const std::size_t dim = feature_dim();
    const std::size_t b = config_.bottleneck == 0 ? std::max<std::size_t>(1, dim / 4) : config_.bottleneck;
    auto [it, ok] = autoencoders_.emplace(task, TaskAutoencoder(task, dim, b, seed));
    optimizers_.emplace(task, AdamW({.lr = config_.lr}));
    return it->second;
}

const TaskAutoencoder& DdasBank::autoencoder(TaskId task) const {
    const auto it = autoencoders_.find(task);
    if (it == autoencoders_.end()) throw Error(ErrorKind::UnknownTask, "ddas: no autoencoder for task " + std::to_string(task));
    return it->second;
}

Tensor DdasBank::stack(std::span<const Feature> batch, std::size_t dim) {
    std::vector<double> values;
    values.reserve(batch.size() * dim);
    for (const Feature& f : batch) {
        if (f.size() != dim) throw Error(ErrorKind::Dimension, "ddas: feature has wrong width");
        values.insert(values.end(), f.begin(), f.end());
    }
    return Tensor::from({batch.size(), dim}, std::move(values));
}

double DdasBank::train_step(TaskId task, std::span<const Feature> batch) {
    if (batch.empty()) throw Error(ErrorKind::EmptyInput, "ddas: empty training batch");
    const TaskAutoencoder& ae = autoencoder(task);
    std::vector<Tensor> params = ae.parameters();
    const Tensor loss = ae.loss(stack(batch, ae.dim()), config_.loss);
    backward(loss);
    optimizers_.at(task).step(params);
    zero_grads(params);
    return loss.item();
}

void DdasBank::train_autoencoder(TaskId task, std::span<const Feature> features, std::size_t iterations,
                                 std::uint64_t seed) {
    if (features.empty()) throw Error(ErrorKind::EmptyInput, "ddas: no features to train on");
    add_autoencoder(task, seed);
    Rng rng(derive_seed(seed, "ddas-batches"));
    const std::size_t b = std::min(config_.batch, features.size());
    std::vector<Feature> batch(b);
    for (std::size_t it = 0; it < iterations; ++it) {
        for (auto& f : batch) f = features[rng.index(features.size())];
        train_step(task, batch);
    }
}

double DdasBank::mean_score(TaskId task, std::span<const Feature> features) const {
    if (features.empty()) throw Error(ErrorKind::EmptyInput, "ddas: no features to score");
    const TaskAutoencoder& ae = autoencoder(task);
    double total = 0.0;
    for (const Feature& f : features) total += ae.score(f);
    return total / static_cast<double>(features.size());
}

std::vector<TaskId> DdasBank::tasks() const {
    std::vector<TaskId> out;
    for (const auto& [t, ae] : autoencoders_)
        if (t != 0) out.push_back(t);
    return out;
}

std::vector<double> DdasBank::score_all(std::span<const double> feature) const {
    std::vector<double> out;
    for (const auto& [t, ae] : autoencoders_)
        if (t != 0) out.push_back(ae.score(feature));
    return out;
}

std::optional<double> DdasBank::reference_score(std::span<const double> feature) const {
    const auto it = autoencoders_.find(0);
    if (it == autoencoders_.end()) return std::nullopt;
    return it->second.score(feature);
}

double DdasBank::threshold() const {
    if (!threshold_) throw Error(ErrorKind::State, "ddas: threshold not set");
    return *threshold_;
}

void DdasBank::set_threshold(double value) {
    if (!(value >= 0.0) || !std::isfinite(value)) throw Error(ErrorKind::OutOfRange, "ddas: threshold must be finite and nonnegative");
    threshold_ = value;
}

double DdasBank::calibrate_threshold(const std::map<TaskId, std::vector<Feature>>& held_out, double quantile) {
    if (config_.fixed_threshold) {
        threshold_ = config_.fixed_threshold;
        return *threshold_;
    }
    std::vector<double> pooled;
    for (const auto& [task, features] : held_out) {
        const TaskAutoencoder& ae = autoencoder(task);
        for (const Feature& f : features) pooled.push_back(ae.score(f));
    }
    if (pooled.empty()) throw Error(ErrorKind::EmptyInput, "ddas: no held-out scores to calibrate on");
    threshold_ = nearest_rank_quantile(std::move(pooled), quantile);
    return *threshold_;
}

RoutingDecision DdasBank::select(std::span<const double> scores) const {
    const auto ids = tasks();
    return route_scores(ids, scores, threshold());
}

void DdasBank::save(Container& out) const {
    for (const auto& [t, ae] : autoencoders_) {
        const std::string p = "ddas/ae" + std::to_string(t) + "/";
        const auto params = ae.parameters();
        for (std::size_t j = 0; j < params.size(); ++j) out.put(p + std::to_string(j), params[j]);
    }
    if (threshold_) out.put("ddas/threshold", {1}, {*threshold_});
}

void DdasBank::load(const Container& in) {
    autoencoders_.clear();
    optimizers_.clear();
    std::map<TaskId, bool> seen;
    for (const auto& name : in.names_with_prefix("ddas/ae")) {
        const std::string rest = name.substr(7);
        seen[static_cast<TaskId>(std::stoul(rest.substr(0, rest.find('/'))))] = true;
    }
    for (const auto& [t, unused] : seen) {
        TaskAutoencoder& ae = add_autoencoder(t, 0);
        auto params = ae.parameters();
        for (std::size_t j = 0; j < params.size(); ++j) {
            in.load_into("ddas/ae" + std::to_string(t) + "/" + std::to_string(j), params[j]);
        }
    }
    threshold_.reset();
    if (in.contains("ddas/threshold")) threshold_ = in.get("ddas/threshold").values.at(0);
}

}  // namespace moecl
