// SPDX-License-Identifier: Apache-2.0
#include "moecl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace moecl {

std::string to_string(Mode mode) {
    switch (mode) {
        case Mode::Mtil: return "mtil";
        case Mode::FewShot: return "fewshot";
        case Mode::Cil: return "cil";
    }
    return "mtil";
}

Mode mode_from_string(const std::string& name) {
    if (name == "mtil") return Mode::Mtil;
    if (name == "fewshot") return Mode::FewShot;
    if (name == "cil") return Mode::Cil;
    throw Error(ErrorKind::Config, "unknown mode '" + name + "' (expected mtil, fewshot or cil)");
}

void TrainConfig::validate() const {
    if (iterations == 0) throw Error(ErrorKind::Config, "iterations must be positive");
    if (batch == 0) throw Error(ErrorKind::Config, "batch must be positive");
    if (!(lr > 0.0)) throw Error(ErrorKind::Config, "learning rate must be positive");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
        throw Error(ErrorKind::Config, "label smoothing must lie in [0, 1)");
    }
    if (!(weight_decay >= 0.0)) throw Error(ErrorKind::Config, "weight decay must be nonnegative");
    if (mode == Mode::FewShot && shots == 0) throw Error(ErrorKind::Config, "few-shot mode needs shots >= 1");
    if (mode == Mode::Cil && cil_steps == 0) throw Error(ErrorKind::Config, "class-incremental mode needs steps >= 1");
}

AdamWConfig TrainConfig::optimizer() const {
    return {.lr = lr, .beta1 = beta1, .beta2 = beta2, .eps = eps, .weight_decay = weight_decay};
}

// ---- ContinualModel -------------------------------------------------------

ContinualModel::ContinualModel(Backbone backbone, const MoeConfig& moe, const DdasConfig& ddas, std::uint64_t seed,
                               std::shared_ptr<const FeatureSource> features)
    : backbone_(std::move(backbone)),
      moe_config_(moe),
      seed_(seed),
      image_("image", backbone_.geometry().blocks, backbone_.geometry().width, moe, derive_seed(seed, "moe")),
      text_("text", backbone_.geometry().blocks, backbone_.geometry().width, moe, derive_seed(seed, "moe")),
      ddas_(ddas, features ? std::move(features) : std::make_shared<BackboneFeatures>(backbone_)) {}

Tensor ContinualModel::encode_image(const Tensor& image, std::optional<TaskId> route, bool tally) {
    if (!route) return backbone_.image().encode(image);
    return backbone_.image().encode(image, &image_, {.task = route, .tally = tally});
}

Tensor ContinualModel::encode_classes(std::span<const ClassId> classes, std::optional<TaskId> route, bool tally) {
    if (!route) return backbone_.text().encode_classes(classes);
    return backbone_.text().encode_classes(classes, &text_, {.task = route, .tally = tally});
}

void ContinualModel::add_task(TaskId task) {
    const std::uint64_t s = derive_seed(seed_, "routers");
    image_.add_task(task, s);
    text_.add_task(task, s);
}

std::vector<TaskId> ContinualModel::tasks() const { return image_.layer(0).tasks(); }

std::vector<Tensor> ContinualModel::trainable_parameters(TaskId task) const {
    auto out = image_.trainable_parameters(task);
    auto text = text_.trainable_parameters(task);
    out.insert(out.end(), text.begin(), text.end());
    return out;
}

void ContinualModel::save(Container& out) const {
    backbone_.save(out);
    image_.save(out);
    text_.save(out);
    ddas_.save(out);
}

void ContinualModel::load(const Container& in) {
    image_.load(in);
    text_.load(in);
    ddas_.load(in);
}

// ---- shared training loop -------------------------------------------------

namespace {

struct LoopSpec {
    const Backbone* backbone = nullptr;
    AdapterSocket* image = nullptr;
    AdapterSocket* text = nullptr;
    SocketCall call;
    std::vector<Tensor> params;
    const LabeledSet* data = nullptr;
    std::span<const ClassId> classes;
    std::string label;
};

double mean_tail(const std::vector<double>& losses) {
    const std::size_t window = std::max<std::size_t>(1, losses.size() / 10);
    return std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(window), losses.end(), 0.0) /
           static_cast<double>(window);
}

/// Minibatch cosine-logit training; returns the per-iteration losses.
std::vector<double> train_loop(const LoopSpec& spec, const TrainConfig& cfg, std::uint64_t seed,
                               const std::function<void(std::size_t)>& after_step) {
    if (spec.data->empty()) throw Error(ErrorKind::EmptyInput, spec.label + ": no training samples");
    std::map<ClassId, std::size_t> position;
    for (std::size_t c = 0; c < spec.classes.size(); ++c) position[spec.classes[c]] = c;
    for (ClassId y : spec.data->labels) {
        if (!position.contains(y)) throw Error(ErrorKind::OutOfRange, spec.label + ": label outside the class set");
    }
    AdamW optimizer(cfg.optimizer());
    std::vector<Tensor> params = spec.params;
    Rng rng(seed);
    const double eps = spec.classes.size() > 1 ? cfg.label_smoothing : 0.0;
    std::vector<double> losses;
    losses.reserve(cfg.iterations);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        try {
            const Tensor text_t = transpose(spec.backbone->text().encode_classes(spec.classes, spec.text, spec.call));
            Tensor loss;
            for (std::size_t b = 0; b < cfg.batch; ++b) {
                const std::size_t i = rng.index(spec.data->size());
                const Tensor emb = spec.backbone->image().encode(spec.data->image(i), spec.image, spec.call);
                const Tensor logits = scale(matmul(emb, text_t), spec.backbone->logit_scale());
                const Tensor ce = cross_entropy_smoothed(logits, position.at(spec.data->labels[i]), eps);
                loss = loss.defined() ? add(loss, ce) : ce;
            }
            loss = scale(loss, 1.0 / static_cast<double>(cfg.batch));
            losses.push_back(loss.item());
            if (loss.requires_grad()) {
                backward(loss);
                optimizer.step(params);
                zero_grads(params);
            }
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::NonFinite) throw;
            const double last = losses.empty() ? std::nan("") : losses.back();
            throw Error(ErrorKind::NonFinite, spec.label + ": iteration " + std::to_string(it) + " aborted (" +
                                                  e.what() + "); previous loss " + std::to_string(last));
        }
        if (after_step) after_step(it);
    }
    return losses;
}

std::vector<ClassId> predict(const Backbone& backbone, AdapterSocket* image_socket, const SocketCall& call,
                             const LabeledSet& data, std::span<const ClassId> classes, const Tensor& text) {
    NoGradGuard guard;
    std::vector<ClassId> out;
    out.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Tensor emb = backbone.image().encode(data.image(i), image_socket, call);
        out.push_back(classify_cosine(emb.data(), classes, text).predicted);
    }
    return out;
}

double percent(std::size_t correct, std::size_t total) {
    return total == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace

double evaluate_accuracy(const Backbone& backbone, AdapterSocket* image_socket, AdapterSocket* text_socket,
                         const SocketCall& call, const LabeledSet& data, std::span<const ClassId> classes) {
    if (data.empty()) throw Error(ErrorKind::EmptyInput, "evaluate: no samples");
    NoGradGuard guard;
    const Tensor text = backbone.text().encode_classes(classes, text_socket, call);
    const auto pred = predict(backbone, image_socket, call, data, classes, text);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
    return percent(correct, data.size());
}

// ---- train_task -----------------------------------------------------------

TaskReport train_task(ContinualModel& model, const Task& task, const TrainConfig& cfg, const ProgressFn& progress) {
    cfg.validate();
    if (task.train.empty()) throw Error(ErrorKind::EmptyInput, "task " + std::to_string(task.id) + " has no training data");
    if (task.id == 0) throw Error(ErrorKind::Config, "task id 0 is reserved for the reference autoencoder");
    DdasBank& ddas = model.ddas();
    const DdasConfig& dcfg = ddas.config();

    model.add_task(task.id);

    // Hold out part of the training split for threshold calibration.
    const std::size_t n = task.train.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng(derive_seed(derive_seed(cfg.seed, "calibration"), task.id));
    split_rng.shuffle(order.begin(), order.end());
    const auto want = static_cast<std::size_t>(std::llround(dcfg.calibration_fraction * static_cast<double>(n)));
    const std::size_t held = std::min(want, n - 1);
    std::vector<Feature> fit, calibration;
    for (std::size_t k = 0; k < n; ++k) {
        Feature f = ddas.feature(task.train.image(order[k]));
        (k < held ? calibration : fit).push_back(std::move(f));
    }
    if (calibration.empty()) calibration = fit;

    ddas.add_autoencoder(task.id, derive_seed(cfg.seed, "autoencoder"));
    Rng ae_rng(derive_seed(derive_seed(cfg.seed, "ae-batches"), task.id));
    const std::size_t ae_batch = std::min(dcfg.batch, fit.size());
    std::vector<Feature> batch(ae_batch);
    double ae_loss = 0.0;
    auto ae_steps = [&](std::size_t count) {
        for (std::size_t s = 0; s < count; ++s) {
            for (auto& f : batch) f = fit[ae_rng.index(fit.size())];
            ae_loss = ddas.train_step(task.id, batch);
        }
    };

    const bool online = model.moe_config().counting == CountingMode::Online;
    LoopSpec spec;
    spec.backbone = &model.backbone();
    spec.image = &model.image_adapter();
    spec.text = &model.text_adapter();
    spec.call = {.task = task.id, .tally = online};
    spec.params = model.trainable_parameters(task.id);
    spec.data = &task.train;
    spec.classes = task.classes;
    spec.label = "task " + std::to_string(task.id);

    const std::size_t total_ae = dcfg.task_iterations;
    const std::size_t iters = cfg.iterations;
    auto interleaved = [&](std::size_t it) {
        if (cfg.interleave_ddas) ae_steps((it + 1) * total_ae / iters - it * total_ae / iters);
    };
    const auto losses = train_loop(spec, cfg, derive_seed(derive_seed(cfg.seed, "batches"), task.id), interleaved);
    if (!cfg.interleave_ddas) ae_steps(total_ae);

    if (!online) {
        NoGradGuard guard;
        for (std::size_t b = 0; b < model.image_adapter().blocks(); ++b) {
            model.image_adapter().layer(b).reset_counts(task.id);
            model.text_adapter().layer(b).reset_counts(task.id);
        }
        for (std::size_t i = 0; i < task.train.size(); ++i) model.encode_image(task.train.image(i), task.id, true);
        model.encode_classes(task.classes, task.id, true);
    }

    TaskReport report;
    report.task = task.id;
    report.final_loss = mean_tail(losses);
    report.ddas_loss = ae_loss;
    report.frozen_image = model.image_adapter().freeze_top_activated(task.id);
    report.frozen_text = model.text_adapter().freeze_top_activated(task.id);
    model.calibration()[task.id] = std::move(calibration);
    report.threshold = ddas.calibrate_threshold(model.calibration(), dcfg.quantile);
    report.train_accuracy = evaluate_accuracy(model.backbone(), &model.image_adapter(), &model.text_adapter(),
                                              {.task = task.id}, task.train, task.classes);
    if (progress) {
        progress("task " + std::to_string(task.id) + ": loss " + std::to_string(report.final_loss) + ", train acc " +
                 std::to_string(report.train_accuracy) + ", threshold " + std::to_string(report.threshold));
    }
    return report;
}

// ---- run_stream -----------------------------------------------------------

namespace {

void check_stream(const TaskStream& stream) {
    for (std::size_t i = 0; i < stream.tasks.size(); ++i) {
        if (stream.tasks[i].id == 0) throw Error(ErrorKind::Config, "task id 0 is reserved");
        if (i > 0 && stream.tasks[i].id <= stream.tasks[i - 1].id) {
            throw Error(ErrorKind::Config, "task ids must increase strictly along the stream");
        }
    }
}

std::vector<std::string> task_names(const TaskStream& stream) {
    std::vector<std::string> names;
    for (const Task& t : stream.tasks) names.push_back(t.name.empty() ? "task" + std::to_string(t.id) : t.name);
    return names;
}

struct EvalCache {
    std::vector<Feature> features;
    std::vector<ClassId> zero_shot;
};

}  // namespace

StreamResult run_stream(ContinualModel& model, const TaskStream& stream, const TrainConfig& cfg,
                        const StreamOptions& options) {
    cfg.validate();
    check_stream(stream);
    model.backbone().text().register_catalog(stream.names);
    const std::size_t t_count = stream.tasks.size();
    StreamResult result;
    result.matrix = EvalMatrix(t_count, task_names(stream));
    for (double g : options.threshold_grid) {
        if (!(g >= 0.0)) throw Error(ErrorKind::Config, "threshold grid values must be nonnegative");
        result.sweep.push_back({g, EvalMatrix(t_count, task_names(stream)), {}});
    }

    std::vector<EvalCache> cache(t_count);
    auto cached = [&](std::size_t j) -> EvalCache& {
        EvalCache& c = cache[j];
        const Task& task = stream.tasks[j];
        if (c.features.empty() && !task.eval.empty()) {
            for (std::size_t n = 0; n < task.eval.size(); ++n) c.features.push_back(model.ddas().feature(task.eval.image(n)));
            NoGradGuard guard;
            const Tensor text = model.encode_classes(task.classes, std::nullopt);
            c.zero_shot = predict(model.backbone(), nullptr, {}, task.eval, task.classes, text);
        }
        return c;
    };

    for (std::size_t i = 0; i < t_count; ++i) {
        result.tasks.push_back(train_task(model, stream.tasks[i], cfg, options.progress));
        const std::vector<TaskId> learned = model.ddas().tasks();
        const double threshold = model.ddas().threshold();
        const bool last_row = i + 1 == t_count;
        RoutingSummary row_summary;
        std::map<std::pair<TaskId, std::size_t>, Tensor> text_cache;

        for (std::size_t j = 0; j < t_count; ++j) {
            const Task& task = stream.tasks[j];
            if (task.eval.empty()) throw Error(ErrorKind::EmptyInput, "task " + std::to_string(task.id) + " has no eval split");
            EvalCache& c = cached(j);
            const bool seen = j <= i;
            auto route_pred = [&](TaskId route, std::size_t n) {
                auto key = std::make_pair(route, j);
                auto it = text_cache.find(key);
                if (it == text_cache.end()) {
                    NoGradGuard guard;
                    it = text_cache.emplace(key, model.encode_classes(task.classes, route)).first;
                }
                NoGradGuard guard;
                const Tensor emb = model.encode_image(task.eval.image(n), route);
                return classify_cosine(emb.data(), task.classes, it->second).predicted;
            };

            std::size_t correct = 0;
            std::vector<std::size_t> sweep_correct(result.sweep.size(), 0);
            for (std::size_t n = 0; n < task.eval.size(); ++n) {
                const ClassId label = task.eval.labels[n];
                const auto scores = model.ddas().score_all(c.features[n]);
                const RoutingDecision decision = route_scores(learned, scores, threshold);
                const std::size_t argmin =
                    static_cast<std::size_t>(std::min_element(scores.begin(), scores.end()) - scores.begin());
                const TaskId nearest = learned[argmin];
                const double lowest = scores[argmin];

                std::optional<TaskId> route;
                if (cfg.task_oracle) {
                    if (seen) route = task.id;
                } else if (!decision.zero_shot()) {
                    route = decision.task;
                }
                std::optional<ClassId> nearest_pred;
                auto nearest_prediction = [&] {
                    if (!nearest_pred) nearest_pred = route_pred(nearest, n);
                    return *nearest_pred;
                };
                const ClassId pred = route ? (route == nearest ? nearest_prediction() : route_pred(*route, n))
                                           : c.zero_shot[n];
                correct += pred == label;

                auto tally = [&](RoutingSummary& s, bool zero) {
                    ++s.total;
                    s.zero_shot_total += zero;
                    if (seen) {
                        ++s.seen_samples;
                        s.identified += nearest == task.id;
                        s.routed_to_own += !zero && nearest == task.id;
                    } else {
                        ++s.unseen_samples;
                        s.unseen_zero_shot += zero;
                    }
                };
                tally(row_summary, decision.zero_shot());
                for (std::size_t g = 0; g < result.sweep.size(); ++g) {
                    const bool zero = lowest > result.sweep[g].threshold;
                    const ClassId p = zero ? c.zero_shot[n] : nearest_prediction();
                    sweep_correct[g] += p == label;
                    tally(result.sweep[g].routing, zero);
                }
                if (last_row) {
                    ScoreRecord rec;
                    rec.eval_task = task.id;
                    rec.sample_id = task.eval.sample_ids[n];
                    rec.reference = model.ddas().reference_score(c.features[n]);
                    rec.scores = scores;
                    if (!decision.zero_shot()) rec.route = decision.task;
                    result.final_scores.push_back(std::move(rec));
                }
            }
            result.matrix.record(i + 1, j + 1, percent(correct, task.eval.size()));
            for (std::size_t g = 0; g < result.sweep.size(); ++g) {
                result.sweep[g].matrix.record(i + 1, j + 1, percent(sweep_correct[g], task.eval.size()));
            }
        }
        if (last_row) result.final_routing = row_summary;
        if (options.progress) {
            std::string row = "after task " + std::to_string(stream.tasks[i].id) + ":";
            for (std::size_t j = 0; j < t_count; ++j) row += " " + std::to_string(result.matrix.at(i + 1, j + 1)).substr(0, 5);
            options.progress(row);
        }
    }
    return result;
}

// ---- shared-adapter baseline ----------------------------------------------

BaselineResult run_baseline_shared_adapter(const Backbone& backbone_in, const TaskStream& stream,
                                           const TrainConfig& cfg, std::size_t rank, double init_std,
                                           const ProgressFn& progress) {
    cfg.validate();
    check_stream(stream);
    Backbone backbone = backbone_in;
    backbone.text().register_catalog(stream.names);
    const auto& g = backbone.geometry();
    SharedAdapter image(g.blocks, g.width, rank, init_std, derive_seed(cfg.seed, "baseline-image"));
    SharedAdapter text(g.blocks, g.width, rank, init_std, derive_seed(cfg.seed, "baseline-text"));
    std::vector<Tensor> params = image.trainable_parameters();
    for (const Tensor& p : text.trainable_parameters()) params.push_back(p);

    BaselineResult result;
    result.matrix = EvalMatrix(stream.tasks.size(), task_names(stream));
    for (std::size_t i = 0; i < stream.tasks.size(); ++i) {
        const Task& task = stream.tasks[i];
        LoopSpec spec;
        spec.backbone = &backbone;
        spec.image = &image;
        spec.text = &text;
        spec.params = params;
        spec.data = &task.train;
        spec.classes = task.classes;
        spec.label = "baseline task " + std::to_string(task.id);
        const auto losses = train_loop(spec, cfg, derive_seed(derive_seed(cfg.seed, "batches"), task.id), {});
        result.final_losses.push_back(mean_tail(losses));
        for (std::size_t j = 0; j < stream.tasks.size(); ++j) {
            const Task& other = stream.tasks[j];
            result.matrix.record(i + 1, j + 1, evaluate_accuracy(backbone, &image, &text, {}, other.eval, other.classes));
        }
        if (progress) progress("baseline after task " + std::to_string(task.id) + ": task-1 acc " +
                               std::to_string(result.matrix.at(i + 1, 1)));
    }
    return result;
}

// ---- class-incremental ----------------------------------------------------

namespace {

void check_cil_steps(std::span<const Task> steps) {
    if (steps.empty()) throw Error(ErrorKind::EmptyInput, "class-incremental run needs at least one step");
    std::set<ClassId> seen;
    for (const Task& s : steps) {
        for (ClassId c : s.classes) {
            if (!seen.insert(c).second) {
                throw Error(ErrorKind::Duplicate, "class " + std::to_string(c) + " appears in more than one step");
            }
        }
    }
}

template <typename TrainStep>
CilResult cil_protocol(Backbone& backbone, std::span<const Task> steps, AdapterSocket* image, AdapterSocket* text,
                       const SocketCall& eval_call, TrainStep&& train_step, const ProgressFn& progress) {
    check_cil_steps(steps);
    CilResult result;
    std::vector<double> accuracies;
    std::vector<ClassId> seen_classes;
    LabeledSet seen_eval;
    for (std::size_t s = 0; s < steps.size(); ++s) {
        const Task& step = steps[s];
        train_step(step, s);
        seen_classes.insert(seen_classes.end(), step.classes.begin(), step.classes.end());
        for (std::size_t n = 0; n < step.eval.size(); ++n) {
            seen_eval.patches = step.eval.patches;
            seen_eval.patch_dim = step.eval.patch_dim;
            seen_eval.append(step.eval.sample(n), step.eval.labels[n], step.eval.sample_ids[n]);
        }
        result.step_classes.push_back(step.classes);
        accuracies.push_back(evaluate_accuracy(backbone, image, text, eval_call, seen_eval, seen_classes));
        if (progress) {
            progress("step " + std::to_string(s + 1) + ": accuracy over " + std::to_string(seen_classes.size()) +
                     " classes " + std::to_string(accuracies.back()));
        }
    }
    result.report = cil_aggregate(accuracies);
    return result;
}

}  // namespace

CilResult run_cil(const Backbone& backbone_in, std::span<const Task> steps, const MoeConfig& moe,
                  const TrainConfig& cfg, const ProgressFn& progress, bool freeze_at_steps) {
    cfg.validate();
    Backbone backbone = backbone_in;
    const auto& g = backbone.geometry();
    MoeAdapter image("image", g.blocks, g.width, moe, derive_seed(cfg.seed, "cil-moe"));
    MoeAdapter text("text", g.blocks, g.width, moe, derive_seed(cfg.seed, "cil-moe"));
    constexpr TaskId kRouter = 1;
    image.add_task(kRouter, derive_seed(cfg.seed, "cil-router"));
    text.add_task(kRouter, derive_seed(cfg.seed, "cil-router"));
    const bool online = moe.counting == CountingMode::Online;

    auto train_step = [&](const Task& step, std::size_t s) {
        LoopSpec spec;
        spec.backbone = &backbone;
        spec.image = &image;
        spec.text = &text;
        spec.call = {.task = kRouter, .tally = online};
        spec.params = image.trainable_parameters(kRouter);
        for (const Tensor& p : text.trainable_parameters(kRouter)) spec.params.push_back(p);
        spec.data = &step.train;
        spec.classes = step.classes;
        spec.label = "cil step " + std::to_string(s + 1);
        train_loop(spec, cfg, derive_seed(derive_seed(cfg.seed, "cil-batches"), s), {});
        if (!online) {
            NoGradGuard guard;
            const SocketCall call{.task = kRouter, .tally = true};
            for (std::size_t i = 0; i < step.train.size(); ++i) backbone.image().encode(step.train.image(i), &image, call);
            backbone.text().encode_classes(step.classes, &text, call);
        }
        if (freeze_at_steps || s + 1 == steps.size()) {
            image.freeze_top_activated(kRouter);
            text.freeze_top_activated(kRouter);
        }
    };
    return cil_protocol(backbone, steps, &image, &text, {.task = kRouter}, train_step, progress);
}

CilResult run_cil_naive(const Backbone& backbone_in, std::span<const Task> steps, std::size_t rank, double init_std,
                        const TrainConfig& cfg, const ProgressFn& progress) {
    cfg.validate();
    Backbone backbone = backbone_in;
    const auto& g = backbone.geometry();
    SharedAdapter image(g.blocks, g.width, rank, init_std, derive_seed(cfg.seed, "naive-image"));
    SharedAdapter text(g.blocks, g.width, rank, init_std, derive_seed(cfg.seed, "naive-text"));
    std::vector<Tensor> params = image.trainable_parameters();
    for (const Tensor& p : text.trainable_parameters()) params.push_back(p);

    auto train_step = [&](const Task& step, std::size_t s) {
        LoopSpec spec;
        spec.backbone = &backbone;
        spec.image = &image;
        spec.text = &text;
        spec.params = params;
        spec.data = &step.train;
        spec.classes = step.classes;
        spec.label = "naive step " + std::to_string(s + 1);
        train_loop(spec, cfg, derive_seed(derive_seed(cfg.seed, "cil-batches"), s), {});
    };
    return cil_protocol(backbone, steps, &image, &text, {}, train_step, progress);
}

}  // namespace moecl
