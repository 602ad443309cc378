// SPDX-License-Identifier: Apache-2.0
#include "moecl/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "moecl/error.hpp"

namespace moecl {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string counting_name(CountingMode m) { return m == CountingMode::Online ? "online" : "postpass"; }

CountingMode counting_from(const std::string& s) {
    if (s == "online") return CountingMode::Online;
    if (s == "postpass") return CountingMode::PostPass;
    throw Error(ErrorKind::Config, "moe.counting must be 'online' or 'postpass', got '" + s + "'");
}

std::string feature_name(FeatureKind k) { return k == FeatureKind::Backbone ? "backbone" : "random_projection"; }

FeatureKind feature_from(const std::string& s) {
    if (s == "backbone") return FeatureKind::Backbone;
    if (s == "random_projection") return FeatureKind::RandomProjection;
    throw Error(ErrorKind::Config, "ddas.features must be 'backbone' or 'random_projection', got '" + s + "'");
}

// Reads the keys of one object and complains about anything left over.
class Section {
   public:
    Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw Error(ErrorKind::Config, label() + " must be an object");
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        used_.insert(key);
        if (!j_.contains(key)) return;
        const json& v = j_.at(key);
        if constexpr (std::is_same_v<T, bool>) {
            require(v.is_boolean(), key, "a boolean");
            out = v.get<bool>();
        } else if constexpr (std::is_integral_v<T>) {
            require(v.is_number_unsigned(), key, "a nonnegative integer");
            out = v.get<T>();
        } else if constexpr (std::is_floating_point_v<T>) {
            require(v.is_number(), key, "a number");
            out = v.get<T>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            require(v.is_string(), key, "a string");
            out = v.get<std::string>();
        } else {
            require(v.is_array(), key, "an array");
            T values;
            for (const json& item : v) {
                using V = typename T::value_type;
                if constexpr (std::is_integral_v<V>) {
                    require(item.is_number_unsigned(), key, "an array of nonnegative integers");
                } else {
                    require(item.is_number(), key, "an array of numbers");
                }
                values.push_back(item.get<V>());
            }
            out = std::move(values);
        }
    }

    template <typename F>
    void section(const std::string& key, F&& read) {
        used_.insert(key);
        if (!j_.contains(key)) return;
        Section s(j_.at(key), where_.empty() ? key : where_ + "." + key);
        read(s);
        s.finish();
    }

    bool has(const std::string& key) const { return j_.contains(key); }
    const json& raw(const std::string& key) {
        used_.insert(key);
        return j_.at(key);
    }

    void finish() const {
        for (const auto& [key, unused] : j_.items()) {
            if (!used_.contains(key)) {
                throw Error(ErrorKind::Config, "unknown config key '" + (where_.empty() ? key : where_ + "." + key) + "'");
            }
        }
    }

   private:
    std::string label() const { return where_.empty() ? "config" : "'" + where_ + "'"; }
    void require(bool ok, const std::string& key, const char* what) const {
        if (!ok) {
            throw Error(ErrorKind::Config,
                        "config key '" + (where_.empty() ? key : where_ + "." + key) + "' must be " + what);
        }
    }

    const json& j_;
    std::string where_;
    std::set<std::string> used_;
};

}  // namespace

void RunConfig::validate() const {
    effective_geometry().validate();
    if (!(logit_scale > 0.0)) throw Error(ErrorKind::Config, "logit_scale must be positive");
    moe.validate();
    effective_train().validate();
    if (stream.layout.tasks == 0 && stream.path.empty()) throw Error(ErrorKind::Config, "stream.tasks must be positive");
    if (stream.layout.classes_per_task == 0) throw Error(ErrorKind::Config, "stream.classes_per_task must be positive");
    if (pretrain.steps == 0 || pretrain.batch == 0) throw Error(ErrorKind::Config, "pretrain steps and batch must be positive");
    if (!(ddas.quantile >= 0.0 && ddas.quantile <= 1.0)) throw Error(ErrorKind::Config, "ddas.quantile must lie in [0, 1]");
    if (!(ddas.calibration_fraction >= 0.0 && ddas.calibration_fraction < 1.0)) {
        throw Error(ErrorKind::Config, "ddas.calibration_fraction must lie in [0, 1)");
    }
    if (ddas.batch == 0) throw Error(ErrorKind::Config, "ddas.batch must be positive");
    if (cil.steps == 0 || cil.classes < cil.steps) {
        throw Error(ErrorKind::Config, "cil.classes must be at least cil.steps, and steps positive");
    }
}

BackboneGeometry RunConfig::effective_geometry() const {
    BackboneGeometry g = geometry;
    g.patches = stream.world.patches;
    g.patch_dim = stream.world.patch_dim;
    g.name_dim = stream.world.name_dim;
    return g;
}

TrainConfig RunConfig::effective_train() const {
    TrainConfig t = train;
    t.seed = seed;
    t.cil_steps = cil.steps;
    return t;
}

ordered_json to_json(const RunConfig& c) {
    ordered_json j;
    j["seed"] = c.seed;
    j["mode"] = to_string(c.train.mode);
    j["output_dir"] = c.output_dir;
    j["checkpoint"] = c.checkpoint;
    const auto& w = c.stream.world;
    const auto& l = c.stream.layout;
    j["stream"] = {{"path", c.stream.path},
                   {"data_seed", c.stream.data_seed},
                   {"patches", w.patches},
                   {"patch_dim", w.patch_dim},
                   {"latent_dim", w.latent_dim},
                   {"name_dim", w.name_dim},
                   {"class_scale", w.class_scale},
                   {"name_noise", w.name_noise},
                   {"tasks", l.tasks},
                   {"classes_per_task", l.classes_per_task},
                   {"train_per_class", l.train_per_class},
                   {"eval_per_class", l.eval_per_class},
                   {"noise", l.noise},
                   {"separation", l.separation},
                   {"domain_mix", l.domain_mix}};
    const auto& g = c.geometry;
    j["backbone"] = {{"blocks", g.blocks},           {"width", g.width},
                     {"heads", g.heads},             {"mlp_hidden", g.mlp_hidden},
                     {"embed_dim", g.embed_dim},     {"logit_scale", c.logit_scale}};
    const auto& r = c.reference;
    j["pretrain"] = {{"steps", c.pretrain.steps},
                     {"batch", c.pretrain.batch},
                     {"lr", c.pretrain.lr},
                     {"weight_decay", c.pretrain.weight_decay},
                     {"pretext_classes", r.pretext_classes},
                     {"heldout_classes", r.heldout_classes},
                     {"samples_per_class", r.samples_per_class},
                     {"heldout_per_class", r.heldout_per_class},
                     {"spread", r.spread},
                     {"noise", r.noise}};
    j["moe"] = {{"experts", c.moe.experts},
                {"top_k", c.moe.top_k},
                {"rank", c.moe.rank},
                {"expert_init_std", c.moe.expert_init_std},
                {"router_init_std", c.moe.router_init_std},
                {"router_hidden", c.moe.router_hidden},
                {"counting", counting_name(c.moe.counting)}};
    const auto& d = c.ddas;
    j["ddas"] = {{"features", feature_name(c.ddas_features)},
                 {"bottleneck", d.bottleneck},
                 {"loss", to_string(d.loss)},
                 {"lr", d.lr},
                 {"batch", d.batch},
                 {"task_iterations", d.task_iterations},
                 {"reference_iterations", d.reference_iterations},
                 {"quantile", d.quantile},
                 {"threshold", d.fixed_threshold ? ordered_json(*d.fixed_threshold) : ordered_json(nullptr)},
                 {"calibration_fraction", d.calibration_fraction}};
    const auto& t = c.train;
    j["train"] = {{"iterations", t.iterations},
                  {"batch", t.batch},
                  {"lr", t.lr},
                  {"label_smoothing", t.label_smoothing},
                  {"beta1", t.beta1},
                  {"beta2", t.beta2},
                  {"eps", t.eps},
                  {"weight_decay", t.weight_decay},
                  {"shots", t.shots},
                  {"interleave_ddas", t.interleave_ddas},
                  {"task_oracle", t.task_oracle}};
    j["cil"] = {{"classes", c.cil.classes},
                {"steps", c.cil.steps},
                {"batch", c.cil.batch},
                {"label_smoothing", c.cil.label_smoothing},
                {"weight_decay", c.cil.weight_decay},
                {"experts", c.cil.experts},
                {"top_k", c.cil.top_k},
                {"naive_baseline", c.cil.naive_baseline},
                {"freeze_steps", c.cil.freeze_steps}};
    j["baseline"] = c.baseline;
    j["sweep"] = {{"thresholds", c.sweep.thresholds}, {"experts", c.sweep.experts}, {"top_k", c.sweep.top_k}};
    return j;
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    Section root(j, "");
    root.get("seed", c.seed);
    std::string mode = to_string(c.train.mode);
    root.get("mode", mode);
    c.train.mode = mode_from_string(mode);
    root.get("output_dir", c.output_dir);
    root.get("checkpoint", c.checkpoint);
    root.section("stream", [&](Section& s) {
        s.get("path", c.stream.path);
        s.get("data_seed", c.stream.data_seed);
        auto& w = c.stream.world;
        s.get("patches", w.patches);
        s.get("patch_dim", w.patch_dim);
        s.get("latent_dim", w.latent_dim);
        s.get("name_dim", w.name_dim);
        s.get("class_scale", w.class_scale);
        s.get("name_noise", w.name_noise);
        auto& l = c.stream.layout;
        s.get("tasks", l.tasks);
        s.get("classes_per_task", l.classes_per_task);
        s.get("train_per_class", l.train_per_class);
        s.get("eval_per_class", l.eval_per_class);
        s.get("noise", l.noise);
        s.get("separation", l.separation);
        s.get("domain_mix", l.domain_mix);
    });
    root.section("backbone", [&](Section& s) {
        s.get("blocks", c.geometry.blocks);
        s.get("width", c.geometry.width);
        s.get("heads", c.geometry.heads);
        s.get("mlp_hidden", c.geometry.mlp_hidden);
        s.get("embed_dim", c.geometry.embed_dim);
        s.get("logit_scale", c.logit_scale);
    });
    root.section("pretrain", [&](Section& s) {
        s.get("steps", c.pretrain.steps);
        s.get("batch", c.pretrain.batch);
        s.get("lr", c.pretrain.lr);
        s.get("weight_decay", c.pretrain.weight_decay);
        s.get("pretext_classes", c.reference.pretext_classes);
        s.get("heldout_classes", c.reference.heldout_classes);
        s.get("samples_per_class", c.reference.samples_per_class);
        s.get("heldout_per_class", c.reference.heldout_per_class);
        s.get("spread", c.reference.spread);
        s.get("noise", c.reference.noise);
    });
    root.section("moe", [&](Section& s) {
        s.get("experts", c.moe.experts);
        s.get("top_k", c.moe.top_k);
        s.get("rank", c.moe.rank);
        s.get("expert_init_std", c.moe.expert_init_std);
        s.get("router_init_std", c.moe.router_init_std);
        s.get("router_hidden", c.moe.router_hidden);
        std::string counting = counting_name(c.moe.counting);
        s.get("counting", counting);
        c.moe.counting = counting_from(counting);
    });
    root.section("ddas", [&](Section& s) {
        std::string features = feature_name(c.ddas_features);
        s.get("features", features);
        c.ddas_features = feature_from(features);
        s.get("bottleneck", c.ddas.bottleneck);
        std::string loss = to_string(c.ddas.loss);
        s.get("loss", loss);
        c.ddas.loss = reconstruction_loss_from_string(loss);
        s.get("lr", c.ddas.lr);
        s.get("batch", c.ddas.batch);
        s.get("task_iterations", c.ddas.task_iterations);
        s.get("reference_iterations", c.ddas.reference_iterations);
        s.get("quantile", c.ddas.quantile);
        if (s.has("threshold")) {
            const json& v = s.raw("threshold");
            if (v.is_null()) {
                c.ddas.fixed_threshold.reset();
            } else if (v.is_number()) {
                c.ddas.fixed_threshold = v.get<double>();
            } else {
                throw Error(ErrorKind::Config, "config key 'ddas.threshold' must be a number or null");
            }
        }
        s.get("calibration_fraction", c.ddas.calibration_fraction);
    });
    root.section("train", [&](Section& s) {
        s.get("iterations", c.train.iterations);
        s.get("batch", c.train.batch);
        s.get("lr", c.train.lr);
        s.get("label_smoothing", c.train.label_smoothing);
        s.get("beta1", c.train.beta1);
        s.get("beta2", c.train.beta2);
        s.get("eps", c.train.eps);
        s.get("weight_decay", c.train.weight_decay);
        s.get("shots", c.train.shots);
        s.get("interleave_ddas", c.train.interleave_ddas);
        s.get("task_oracle", c.train.task_oracle);
    });
    root.section("cil", [&](Section& s) {
        s.get("classes", c.cil.classes);
        s.get("steps", c.cil.steps);
        s.get("batch", c.cil.batch);
        s.get("label_smoothing", c.cil.label_smoothing);
        s.get("weight_decay", c.cil.weight_decay);
        s.get("experts", c.cil.experts);
        s.get("top_k", c.cil.top_k);
        s.get("naive_baseline", c.cil.naive_baseline);
        s.get("freeze_steps", c.cil.freeze_steps);
    });
    root.get("baseline", c.baseline);
    root.section("sweep", [&](Section& s) {
        s.get("thresholds", c.sweep.thresholds);
        s.get("experts", c.sweep.experts);
        s.get("top_k", c.sweep.top_k);
    });
    root.finish();
    c.validate();
    return c;
}

void apply_override(json& j, const std::string& path, const std::string& value) {
    if (path.empty()) throw Error(ErrorKind::Config, "empty override path");
    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = value;
    json* node = &j;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->is_object()) throw Error(ErrorKind::Config, "override path '" + path + "' crosses a non-object");
        node = &(*node)[parts[i]];
        if (node->is_null()) *node = json::object();
    }
    if (!node->is_object()) throw Error(ErrorKind::Config, "override path '" + path + "' crosses a non-object");
    (*node)[parts.back()] = std::move(parsed);
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    json j = json::object();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw Error(ErrorKind::Io, "cannot open config " + path.string());
        try {
            j = json::parse(in);
        } catch (const json::parse_error& e) {
            throw Error(ErrorKind::Config, "config " + path.string() + " is not valid JSON: " + e.what());
        }
    }
    for (const std::string& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw Error(ErrorKind::Config, "override '" + o + "' is not key=value");
        apply_override(j, o.substr(0, eq), o.substr(eq + 1));
    }
    return run_config_from_json(j);
}

void write_run_config(const RunConfig& config, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
    out << to_json(config).dump(2) << "\n";
}

std::filesystem::path output_root() {
    const char* env = std::getenv("MOECL_OUTPUT_ROOT");
    return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

}  // namespace moecl
