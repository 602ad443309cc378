// SPDX-License-Identifier: Apache-2.0
#include "moecl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>

#include "binary_io.hpp"
#include "json.hpp"

namespace moecl {

namespace {

constexpr std::uint64_t kProbeClassBase = 2'000'000;

std::uint64_t sample_id(std::uint64_t group, std::uint64_t split, std::uint64_t index) {
    return (group << 40) | (split << 39) | index;
}

std::vector<double> random_matrix(std::uint64_t seed, std::size_t rows, std::size_t cols, double stddev) {
    Rng rng(seed);
    return rng.normal_vector(rows * cols, stddev);
}

}  // namespace

// ---- LabeledSet -----------------------------------------------------------

std::span<const double> LabeledSet::sample(std::size_t i) const {
    if (i >= size()) throw Error(ErrorKind::OutOfRange, "LabeledSet: sample index out of range");
    return std::span<const double>(values).subspan(i * sample_width(), sample_width());
}

Tensor LabeledSet::image(std::size_t i) const {
    const auto s = sample(i);
    return Tensor::from({patches, patch_dim}, std::vector<double>(s.begin(), s.end()));
}

void LabeledSet::append(std::span<const double> s, ClassId label, std::uint64_t id) {
    if (s.size() != sample_width()) throw Error(ErrorKind::Dimension, "LabeledSet: sample width mismatch");
    values.insert(values.end(), s.begin(), s.end());
    labels.push_back(label);
    sample_ids.push_back(id);
}

LabeledSet LabeledSet::subset(std::span<const std::size_t> indices) const {
    LabeledSet out;
    out.patches = patches;
    out.patch_dim = patch_dim;
    for (std::size_t i : indices) out.append(sample(i), labels[i], sample_ids[i]);
    return out;
}

const Task& TaskStream::task(TaskId id) const {
    for (const auto& t : tasks) {
        if (t.id == id) return t;
    }
    throw Error(ErrorKind::UnknownTask, "TaskStream: unknown task " + std::to_string(id));
}

// ---- SyntheticWorld -------------------------------------------------------

SyntheticWorld::SyntheticWorld(const WorldConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
    if (config.patches == 0 || config.patch_dim == 0 || config.latent_dim == 0 || config.name_dim == 0) {
        throw Error(ErrorKind::Config, "SyntheticWorld: dimensions must be positive");
    }
    const double inv_sqrt_latent = 1.0 / std::sqrt(static_cast<double>(config.latent_dim));
    renderer_ = random_matrix(derive_seed(seed, "renderer"), config.patches * config.patch_dim, config.latent_dim,
                              inv_sqrt_latent);
    namer_ = random_matrix(derive_seed(seed, "namer"), config.name_dim, config.latent_dim, inv_sqrt_latent);
}

std::vector<double> SyntheticWorld::latent_code(ClassId id, std::uint64_t seed, double scale) const {
    Rng rng(derive_seed(derive_seed(seed, "latent"), id));
    return rng.normal_vector(config_.latent_dim, scale * config_.class_scale);
}

std::vector<double> SyntheticWorld::name_vector(std::span<const double> latent, std::uint64_t seed) const {
    Rng rng(derive_seed(seed, "name"));
    std::vector<double> out(config_.name_dim, 0.0);
    for (std::size_t i = 0; i < config_.name_dim; ++i) {
        for (std::size_t j = 0; j < config_.latent_dim; ++j) out[i] += namer_[i * config_.latent_dim + j] * latent[j];
        out[i] += rng.normal(0.0, config_.name_noise);
    }
    return out;
}

void SyntheticWorld::render(std::span<const double> latent, const SyntheticTaskSpec& spec, std::span<const double> mix,
                            Rng& rng, std::vector<double>& out) const {
    const std::size_t pd = config_.patch_dim;
    const std::size_t ld = config_.latent_dim;
    out.assign(config_.patches * pd, 0.0);
    std::vector<double> clean(pd);
    for (std::size_t p = 0; p < config_.patches; ++p) {
        for (std::size_t i = 0; i < pd; ++i) {
            const double* g = renderer_.data() + (p * pd + i) * ld;
            double v = 0.0;
            for (std::size_t j = 0; j < ld; ++j) v += g[j] * latent[j];
            clean[i] = v;
        }
        for (std::size_t i = 0; i < pd; ++i) {
            double v = clean[i];
            if (!mix.empty()) {
                double mixed = 0.0;
                for (std::size_t j = 0; j < pd; ++j) mixed += mix[i * pd + j] * clean[j];
                v = (1.0 - spec.domain_mix) * v + spec.domain_mix * mixed;
            }
            if (!spec.domain_shift.empty()) v += spec.domain_shift[i];
            out[p * pd + i] = v + rng.normal(0.0, spec.noise);
        }
    }
}

std::vector<SyntheticTaskSpec> SyntheticWorld::default_specs(const StreamLayout& layout, std::uint64_t seed) const {
    const std::size_t pd = config_.patch_dim;
    if (layout.tasks == 0) throw Error(ErrorKind::EmptyInput, "default_specs: no tasks requested");
    if (layout.tasks > pd) throw Error(ErrorKind::Config, "default_specs: more tasks than orthogonal shift directions");
    // Gram-Schmidt over Gaussian draws gives mutually orthogonal unit shifts.
    Rng rng(derive_seed(seed, "shifts"));
    std::vector<std::vector<double>> basis;
    while (basis.size() < layout.tasks) {
        std::vector<double> v = rng.normal_vector(pd);
        for (const auto& b : basis) {
            double dot = 0.0;
            for (std::size_t i = 0; i < pd; ++i) dot += v[i] * b[i];
            for (std::size_t i = 0; i < pd; ++i) v[i] -= dot * b[i];
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-6) continue;
        for (double& x : v) x /= norm;
        basis.push_back(std::move(v));
    }
    const double radius = layout.separation * layout.noise / std::sqrt(2.0);
    std::vector<SyntheticTaskSpec> specs;
    for (std::size_t t = 0; t < layout.tasks; ++t) {
        SyntheticTaskSpec s;
        s.id = static_cast<TaskId>(t + 1);
        s.name = "task" + std::to_string(t + 1);
        s.classes = layout.classes_per_task;
        s.train_per_class = layout.train_per_class;
        s.eval_per_class = layout.eval_per_class;
        s.noise = layout.noise;
        s.domain_mix = layout.domain_mix;
        s.domain_shift = basis[t];
        for (double& x : s.domain_shift) x *= radius;
        specs.push_back(std::move(s));
    }
    return specs;
}

TaskStream SyntheticWorld::generate_stream(std::span<const SyntheticTaskSpec> specs, std::uint64_t seed) const {
    if (specs.empty()) throw Error(ErrorKind::EmptyInput, "generate_stream: no task specs");
    std::set<TaskId> ids;
    for (const auto& s : specs) {
        if (s.id == 0) throw Error(ErrorKind::Config, "generate_stream: task id 0 is reserved for the reference set");
        if (!ids.insert(s.id).second) throw Error(ErrorKind::Duplicate, "generate_stream: duplicate task id " + std::to_string(s.id));
        if (s.classes == 0) throw Error(ErrorKind::Config, "generate_stream: task without classes");
        if (!s.domain_shift.empty() && s.domain_shift.size() != config_.patch_dim) {
            throw Error(ErrorKind::Dimension, "generate_stream: domain shift length must equal patch_dim");
        }
    }
    TaskStream stream;
    ClassId next_class = 0;
    const std::size_t pd = config_.patch_dim;
    for (const auto& spec : specs) {
        Task task;
        task.id = spec.id;
        task.name = spec.name.empty() ? "task" + std::to_string(spec.id) : spec.name;
        task.train.patches = task.eval.patches = config_.patches;
        task.train.patch_dim = task.eval.patch_dim = pd;
        std::vector<double> mix;
        if (spec.domain_mix != 0.0) mix = random_matrix(derive_seed(seed, 1000 + spec.id), pd, pd, 1.0 / std::sqrt(double(pd)));
        std::uint64_t train_index = 0;
        std::uint64_t eval_index = 0;
        std::vector<double> buffer;
        for (std::size_t c = 0; c < spec.classes; ++c) {
            const ClassId cls = next_class++;
            task.classes.push_back(cls);
            const auto latent = latent_code(cls, seed, 1.0);
            stream.names[cls] = name_vector(latent, derive_seed(seed, cls));
            Rng rng(derive_seed(derive_seed(seed, "samples"), cls));
            for (std::size_t i = 0; i < spec.train_per_class; ++i) {
                render(latent, spec, mix, rng, buffer);
                task.train.append(buffer, cls, sample_id(spec.id, 0, train_index++));
            }
            for (std::size_t i = 0; i < spec.eval_per_class; ++i) {
                render(latent, spec, mix, rng, buffer);
                task.eval.append(buffer, cls, sample_id(spec.id, 1, eval_index++));
            }
        }
        stream.tasks.push_back(std::move(task));
    }
    return stream;
}

ReferenceSet SyntheticWorld::generate_reference(std::uint64_t seed, const ReferenceSpec& spec) const {
    if (spec.pretext_classes == 0 || spec.samples_per_class == 0) {
        throw Error(ErrorKind::EmptyInput, "generate_reference: size must be positive");
    }
    ReferenceSet ref;
    ref.pretext.patches = ref.heldout.patches = config_.patches;
    ref.pretext.patch_dim = ref.heldout.patch_dim = config_.patch_dim;
    SyntheticTaskSpec plain;
    plain.noise = spec.noise;
    std::vector<double> buffer;
    const std::size_t total = spec.pretext_classes + spec.heldout_classes;
    for (std::size_t c = 0; c < total; ++c) {
        const ClassId cls = kPretextClassBase + static_cast<ClassId>(c);
        const bool heldout = c >= spec.pretext_classes;
        const auto latent = latent_code(cls, seed, spec.spread);
        ref.names[cls] = name_vector(latent, derive_seed(seed, cls));
        (heldout ? ref.heldout_classes : ref.pretext_classes).push_back(cls);
        Rng rng(derive_seed(derive_seed(seed, "reference"), cls));
        const std::size_t count = heldout ? spec.heldout_per_class : spec.samples_per_class;
        LabeledSet& target = heldout ? ref.heldout : ref.pretext;
        for (std::size_t i = 0; i < count; ++i) {
            render(latent, plain, {}, rng, buffer);
            target.append(buffer, cls, sample_id(0xffff, heldout ? 1 : 0, target.size()));
        }
    }
    return ref;
}

LabeledSet SyntheticWorld::generate_probe(std::span<const SyntheticTaskSpec> specs, double distance_sigma,
                                          std::size_t count, std::uint64_t seed) const {
    if (specs.empty()) throw Error(ErrorKind::EmptyInput, "generate_probe: no task specs");
    const std::size_t pd = config_.patch_dim;
    const double noise = specs.front().noise;
    double max_norm = 0.0;
    for (const auto& s : specs) {
        double n2 = 0.0;
        for (double v : s.domain_shift) n2 += v * v;
        max_norm = std::max(max_norm, std::sqrt(n2));
    }
    // |r u - s| >= r - |s| >= distance for a unit direction u.
    Rng rng(derive_seed(seed, "probe"));
    std::vector<double> dir = rng.normal_vector(pd);
    double norm = 0.0;
    for (double v : dir) norm += v * v;
    norm = std::sqrt(norm);
    SyntheticTaskSpec probe;
    probe.noise = noise;
    probe.domain_shift.resize(pd);
    const double radius = distance_sigma * noise + max_norm;
    for (std::size_t i = 0; i < pd; ++i) probe.domain_shift[i] = dir[i] / norm * radius;

    LabeledSet out;
    out.patches = config_.patches;
    out.patch_dim = pd;
    std::vector<double> buffer;
    for (std::size_t i = 0; i < count; ++i) {
        const ClassId cls = static_cast<ClassId>(kProbeClassBase + i % 8);
        const auto latent = latent_code(cls, seed, 1.0);
        render(latent, probe, {}, rng, buffer);
        out.append(buffer, cls, sample_id(0xfffe, 0, i));
    }
    return out;
}

// ---- subsampling / splitting ----------------------------------------------

Task few_shot_subsample(const Task& task, std::size_t shots, std::uint64_t seed) {
    if (shots == 0) throw Error(ErrorKind::Config, "few_shot_subsample: shots must be >= 1");
    std::vector<std::size_t> chosen;
    for (ClassId cls : task.classes) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < task.train.size(); ++i) {
            if (task.train.labels[i] == cls) idx.push_back(i);
        }
        if (idx.size() < shots) {
            throw Error(ErrorKind::EmptyInput, "few_shot_subsample: class " + std::to_string(cls) + " has " +
                                                   std::to_string(idx.size()) + " samples, fewer than " +
                                                   std::to_string(shots));
        }
        Rng rng(derive_seed(seed, cls));
        rng.shuffle(idx.begin(), idx.end());
        chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(shots));
    }
    std::sort(chosen.begin(), chosen.end());
    Task out = task;
    out.train = task.train.subset(chosen);
    return out;
}

std::vector<Task> split_class_incremental(const Task& task, std::size_t steps) {
    if (steps == 0 || steps > task.classes.size()) {
        throw Error(ErrorKind::Config, "split_class_incremental: steps must be in [1, class count]");
    }
    std::vector<Task> out;
    std::size_t begin = 0;
    for (std::size_t s = 0; s < steps; ++s) {
        const std::size_t len = task.classes.size() / steps + (s < task.classes.size() % steps ? 1 : 0);
        Task step;
        step.id = static_cast<TaskId>(s + 1);
        step.name = task.name + "/step" + std::to_string(s + 1);
        step.classes.assign(task.classes.begin() + static_cast<std::ptrdiff_t>(begin),
                            task.classes.begin() + static_cast<std::ptrdiff_t>(begin + len));
        const std::set<ClassId> members(step.classes.begin(), step.classes.end());
        auto filter = [&](const LabeledSet& set) {
            std::vector<std::size_t> idx;
            for (std::size_t i = 0; i < set.size(); ++i) {
                if (members.contains(set.labels[i])) idx.push_back(i);
            }
            return set.subset(idx);
        };
        step.train = filter(task.train);
        step.eval = filter(task.eval);
        out.push_back(std::move(step));
        begin += len;
    }
    return out;
}

// ---- files ----------------------------------------------------------------

void save_dataset(const LabeledSet& set, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "save_dataset: cannot open " + path.string());
    std::set<ClassId> classes(set.labels.begin(), set.labels.end());
    out.write("MCLD1", 5);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(set.patches));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(set.patch_dim));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(classes.size()));
    io::write_le<std::uint64_t>(out, set.size());
    for (double v : set.values) io::write_le<double>(out, v);
    for (ClassId l : set.labels) io::write_le<std::int64_t>(out, static_cast<std::int64_t>(l));
    for (std::uint64_t id : set.sample_ids) io::write_le<std::uint64_t>(out, id);
    if (!out) throw Error(ErrorKind::Io, "save_dataset: write failed for " + path.string());
}

LabeledSet load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "load_dataset: cannot open " + path.string());
    const std::string what = "load_dataset(" + path.string() + ")";
    io::expect_magic(in, "MCLD1", what);
    LabeledSet set;
    set.patches = io::read_le<std::uint32_t>(in, what);
    set.patch_dim = io::read_le<std::uint32_t>(in, what);
    const auto class_count = io::read_le<std::uint32_t>(in, what);
    const auto count = io::read_le<std::uint64_t>(in, what);
    // Reject headers that promise more payload than the file holds before allocating.
    const auto header_end = in.tellg();
    in.seekg(0, std::ios::end);
    const auto remaining = static_cast<std::uint64_t>(in.tellg() - header_end);
    in.seekg(header_end);
    const std::uint64_t expected = count * (set.patches * set.patch_dim * 8 + 8 + 8);
    if (remaining != expected) {
        throw Error(ErrorKind::Format, what + ": payload is " + std::to_string(remaining) + " bytes, header declares " +
                                           std::to_string(expected));
    }
    set.values.resize(count * set.patches * set.patch_dim);
    for (double& v : set.values) v = io::read_le<double>(in, what);
    set.labels.resize(count);
    for (ClassId& l : set.labels) {
        const auto raw = io::read_le<std::int64_t>(in, what);
        if (raw < 0 || raw > std::numeric_limits<ClassId>::max()) throw Error(ErrorKind::Format, what + ": bad label");
        l = static_cast<ClassId>(raw);
    }
    set.sample_ids.resize(count);
    for (auto& id : set.sample_ids) id = io::read_le<std::uint64_t>(in, what);
    const std::set<ClassId> classes(set.labels.begin(), set.labels.end());
    if (classes.size() != class_count) throw Error(ErrorKind::Format, what + ": class count mismatch");
    for (double v : set.values) {
        if (!std::isfinite(v)) throw Error(ErrorKind::Format, what + ": non-finite feature");
    }
    return set;
}

void save_stream(const TaskStream& stream, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "moecl-stream-1";
    for (const auto& task : stream.tasks) {
        const std::string stem = "task" + std::to_string(task.id);
        save_dataset(task.train, dir / (stem + "_train.mcld"));
        save_dataset(task.eval, dir / (stem + "_eval.mcld"));
        manifest["tasks"].push_back({{"id", task.id},
                                     {"name", task.name},
                                     {"classes", task.classes},
                                     {"train", stem + "_train.mcld"},
                                     {"eval", stem + "_eval.mcld"}});
    }
    for (const auto& [cls, vec] : stream.names) manifest["names"][std::to_string(cls)] = vec;
    std::ofstream out(dir / "stream.json");
    if (!out) throw Error(ErrorKind::Io, "save_stream: cannot write manifest in " + dir.string());
    out << manifest.dump(2) << "\n";
}

TaskStream load_stream(const std::filesystem::path& dir) {
    std::ifstream in(dir / "stream.json");
    if (!in) throw Error(ErrorKind::Io, "load_stream: missing stream.json in " + dir.string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Format, std::string("load_stream: ") + e.what());
    }
    TaskStream stream;
    for (const auto& t : manifest.at("tasks")) {
        Task task;
        task.id = t.at("id").get<TaskId>();
        task.name = t.at("name").get<std::string>();
        task.classes = t.at("classes").get<std::vector<ClassId>>();
        task.train = load_dataset(dir / t.at("train").get<std::string>());
        task.eval = load_dataset(dir / t.at("eval").get<std::string>());
        stream.tasks.push_back(std::move(task));
    }
    for (const auto& [key, vec] : manifest.at("names").items()) {
        stream.names[static_cast<ClassId>(std::stoul(key))] = vec.get<std::vector<double>>();
    }
    return stream;
}

void export_dataset_csv(const LabeledSet& set, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::Io, "export_dataset_csv: cannot open " + path.string());
    out << "sample_id,label";
    for (std::size_t i = 0; i < set.sample_width(); ++i) out << ",v" << i;
    out << "\n" << std::setprecision(17);
    for (std::size_t s = 0; s < set.size(); ++s) {
        out << set.sample_ids[s] << "," << set.labels[s];
        for (double v : set.sample(s)) out << "," << v;
        out << "\n";
    }
}

}  // namespace moecl
