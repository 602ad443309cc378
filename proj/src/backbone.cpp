// SPDX-License-Identifier: Apache-2.0
#include "moecl/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "moecl/optim.hpp"

namespace moecl {

namespace {

Tensor init_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
    return rng.normal_tensor({rows, cols}, 1.0 / std::sqrt(static_cast<double>(rows)));
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

}  // namespace

void BackboneGeometry::validate() const {
    if (blocks == 0 || width == 0 || heads == 0 || patches == 0 || patch_dim == 0 || mlp_hidden == 0 ||
        name_dim == 0 || embed_dim == 0) {
        throw Error(ErrorKind::Config, "backbone geometry: every dimension must be positive");
    }
    if (width % heads != 0) throw Error(ErrorKind::Config, "backbone geometry: width must be divisible by heads");
}

// ---- TransformerBlock -----------------------------------------------------

TransformerBlock::TransformerBlock(std::size_t width, std::size_t mlp_hidden, std::size_t heads, Rng& rng)
    : heads_(heads),
      ln1_gain_(Tensor::full({width}, 1.0)),
      ln1_bias_(Tensor::zeros({width})),
      wq_(init_matrix(rng, width, width)),
      bq_(Tensor::zeros({width})),
      wk_(init_matrix(rng, width, width)),
      bk_(Tensor::zeros({width})),
      wv_(init_matrix(rng, width, width)),
      bv_(Tensor::zeros({width})),
      wo_(init_matrix(rng, width, width)),
      bo_(Tensor::zeros({width})),
      ln2_gain_(Tensor::full({width}, 1.0)),
      ln2_bias_(Tensor::zeros({width})),
      w1_(init_matrix(rng, width, mlp_hidden)),
      b1_(Tensor::zeros({mlp_hidden})),
      w2_(init_matrix(rng, mlp_hidden, width)),
      b2_(Tensor::zeros({width})) {}

Tensor TransformerBlock::attend(const Tensor& x) const {
    const Tensor h = layer_norm(x, ln1_gain_, ln1_bias_);
    const Tensor q = linear(h, wq_, bq_);
    const Tensor k = linear(h, wk_, bk_);
    const Tensor v = linear(h, wv_, bv_);
    return linear(multi_head_attention(q, k, v, heads_), wo_, bo_);
}

Tensor TransformerBlock::feed_forward(const Tensor& x) const {
    const Tensor h = layer_norm(x, ln2_gain_, ln2_bias_);
    return linear(gelu(linear(h, w1_, b1_)), w2_, b2_);
}

void TransformerBlock::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    const std::pair<const char*, const Tensor*> items[] = {
        {"ln1_gain", &ln1_gain_}, {"ln1_bias", &ln1_bias_}, {"wq", &wq_}, {"bq", &bq_}, {"wk", &wk_},
        {"bk", &bk_},             {"wv", &wv_},             {"bv", &bv_}, {"wo", &wo_}, {"bo", &bo_},
        {"ln2_gain", &ln2_gain_}, {"ln2_bias", &ln2_bias_}, {"w1", &w1_}, {"b1", &b1_}, {"w2", &w2_},
        {"b2", &b2_}};
    for (const auto& [name, t] : items) out.push_back({prefix + name, *t});
}

Tensor run_blocks(std::span<const TransformerBlock> blocks, Tensor x, AdapterSocket* sockets, const SocketCall& call) {
    if (sockets && sockets->blocks() != blocks.size()) {
        throw Error(ErrorKind::Dimension, "adapter socket count does not match block count");
    }
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        Tensor attended = blocks[b].attend(x);
        // The delta joins the attention branch before the residual sum.
        if (sockets) attended = add(attended, sockets->delta(b, attended, call));
        x = add(x, attended);
        x = add(x, blocks[b].feed_forward(x));
    }
    return x;
}

// ---- ImageTower -----------------------------------------------------------

ImageTower::ImageTower(const BackboneGeometry& geometry, std::uint64_t seed) : geometry_(geometry) {
    geometry.validate();
    Rng rng(derive_seed(seed, "image-tower"));
    const std::size_t d = geometry.width;
    patch_proj_ = init_matrix(rng, geometry.patch_dim, d);
    patch_bias_ = Tensor::zeros({d});
    cls_token_ = rng.normal_tensor({1, d}, 0.1);
    positions_ = rng.normal_tensor({geometry.tokens(), d}, 0.1);
    for (std::size_t b = 0; b < geometry.blocks; ++b) blocks_.emplace_back(d, geometry.mlp_hidden, geometry.heads, rng);
    final_gain_ = Tensor::full({d}, 1.0);
    final_bias_ = Tensor::zeros({d});
    projection_ = init_matrix(rng, d, geometry.embed_dim);
}

Tensor ImageTower::tokens(const Tensor& image) const {
    if (image.rank() != 2 || image.rows() != geometry_.patches || image.cols() != geometry_.patch_dim) {
        throw Error(ErrorKind::Dimension, "image tower expects [" + std::to_string(geometry_.patches) + "x" +
                                              std::to_string(geometry_.patch_dim) + "] patches, got " +
                                              shape_string(image.shape()));
    }
    const std::vector<Tensor> parts{cls_token_, linear(image, patch_proj_, patch_bias_)};
    return add(concat_rows(parts), positions_);
}

Tensor ImageTower::encode_unnormalized(const Tensor& image, AdapterSocket* sockets, const SocketCall& call) const {
    const Tensor x = run_blocks(blocks_, tokens(image), sockets, call);
    return matmul(layer_norm(row(x, 0), final_gain_, final_bias_), projection_);
}

Tensor ImageTower::encode(const Tensor& image, AdapterSocket* sockets, const SocketCall& call) const {
    return l2_normalize(encode_unnormalized(image, sockets, call));
}

std::vector<double> ImageTower::pooled_features(const Tensor& image) const {
    NoGradGuard guard;
    const Tensor x = run_blocks(blocks_, tokens(image), nullptr, {});
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    std::vector<double> out(d, 0.0);
    for (std::size_t i = 1; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[j] += x.at(i, j);
    for (double& v : out) v /= static_cast<double>(n - 1);
    return out;
}

std::vector<NamedTensor> ImageTower::parameters() const {
    std::vector<NamedTensor> out{{"image/patch_proj", patch_proj_},
                                 {"image/patch_bias", patch_bias_},
                                 {"image/cls_token", cls_token_},
                                 {"image/positions", positions_}};
    for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect("image/block" + std::to_string(b) + "/", out);
    out.push_back({"image/final_gain", final_gain_});
    out.push_back({"image/final_bias", final_bias_});
    out.push_back({"image/projection", projection_});
    return out;
}

// ---- TextTower ------------------------------------------------------------

TextTower::TextTower(const BackboneGeometry& geometry, std::uint64_t seed) : geometry_(geometry) {
    geometry.validate();
    Rng rng(derive_seed(seed, "text-tower"));
    const std::size_t d = geometry.width;
    name_proj_ = init_matrix(rng, geometry.name_dim, d);
    name_bias_ = Tensor::zeros({d});
    for (std::size_t b = 0; b < geometry.blocks; ++b) blocks_.emplace_back(d, geometry.mlp_hidden, geometry.heads, rng);
    final_gain_ = Tensor::full({d}, 1.0);
    final_bias_ = Tensor::zeros({d});
    projection_ = init_matrix(rng, d, geometry.embed_dim);
}

void TextTower::register_class(ClassId id, std::span<const double> name) {
    if (name.size() != geometry_.name_dim) {
        throw Error(ErrorKind::Dimension, "text tower: class name vector has wrong length");
    }
    std::vector<double> values(name.begin(), name.end());
    if (auto it = prototypes_.find(id); it != prototypes_.end()) {
        if (!std::equal(values.begin(), values.end(), it->second.data().begin())) {
            throw Error(ErrorKind::Duplicate, "text tower: class " + std::to_string(id) + " registered twice");
        }
        return;
    }
    prototypes_.emplace(id, Tensor::from({1, geometry_.name_dim}, std::move(values)));
}

void TextTower::register_catalog(const ClassCatalog& catalog) {
    for (const auto& [id, name] : catalog) register_class(id, name);
}

Tensor TextTower::encode_name(const Tensor& name, AdapterSocket* sockets, const SocketCall& call) const {
    const Tensor token = linear(name, name_proj_, name_bias_);
    const Tensor x = run_blocks(blocks_, token, sockets, call);
    return l2_normalize(matmul(layer_norm(x, final_gain_, final_bias_), projection_));
}

Tensor TextTower::encode(ClassId id, AdapterSocket* sockets, const SocketCall& call) const {
    const auto it = prototypes_.find(id);
    if (it == prototypes_.end()) throw Error(ErrorKind::OutOfRange, "text tower: unknown class " + std::to_string(id));
    return encode_name(it->second, sockets, call);
}

Tensor TextTower::encode_classes(std::span<const ClassId> ids, AdapterSocket* sockets, const SocketCall& call) const {
    if (ids.empty()) throw Error(ErrorKind::EmptyInput, "text tower: empty class set");
    std::vector<Tensor> rows;
    rows.reserve(ids.size());
    for (ClassId id : ids) rows.push_back(encode(id, sockets, call));
    return concat_rows(rows);
}

std::vector<NamedTensor> TextTower::parameters() const {
    std::vector<NamedTensor> out{{"text/name_proj", name_proj_}, {"text/name_bias", name_bias_}};
    for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect("text/block" + std::to_string(b) + "/", out);
    out.push_back({"text/final_gain", final_gain_});
    out.push_back({"text/final_bias", final_bias_});
    out.push_back({"text/projection", projection_});
    return out;
}

// ---- Backbone -------------------------------------------------------------

Backbone::Backbone(const BackboneGeometry& geometry, std::uint64_t seed, double logit_scale)
    : geometry_(geometry), logit_scale_(logit_scale), image_(geometry, seed), text_(geometry, seed) {
    if (!(logit_scale > 0.0)) throw Error(ErrorKind::Config, "backbone: logit scale must be positive");
}

std::vector<NamedTensor> Backbone::parameters() const {
    auto out = image_.parameters();
    auto text = text_.parameters();
    out.insert(out.end(), text.begin(), text.end());
    return out;
}

void Backbone::set_trainable(bool trainable) {
    for (auto& p : parameters()) {
        p.tensor.set_requires_grad(trainable);
        p.tensor.zero_grad();
    }
}

bool Backbone::frozen() const {
    const auto params = parameters();
    return std::none_of(params.begin(), params.end(), [](const auto& p) { return p.tensor.requires_grad(); });
}

std::uint64_t Backbone::digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : parameters()) h = hash_values(p.tensor.data(), h);
    return h;
}

void Backbone::save(Container& out) const {
    const auto& g = geometry_;
    out.put("backbone/geometry", {8},
            {double(g.blocks), double(g.width), double(g.heads), double(g.patches), double(g.patch_dim),
             double(g.mlp_hidden), double(g.name_dim), double(g.embed_dim)});
    out.put("backbone/logit_scale", {1}, {logit_scale_});
    for (const auto& p : parameters()) out.put("backbone/" + p.name, p.tensor);
    for (const auto& [id, proto] : text_.prototypes()) out.put("backbone/prototype/" + std::to_string(id), proto);
}

Backbone Backbone::load(const Container& in) {
    const auto& g = in.get("backbone/geometry").values;
    if (g.size() != 8) throw Error(ErrorKind::Format, "checkpoint: malformed backbone geometry");
    BackboneGeometry geometry;
    geometry.blocks = static_cast<std::size_t>(g[0]);
    geometry.width = static_cast<std::size_t>(g[1]);
    geometry.heads = static_cast<std::size_t>(g[2]);
    geometry.patches = static_cast<std::size_t>(g[3]);
    geometry.patch_dim = static_cast<std::size_t>(g[4]);
    geometry.mlp_hidden = static_cast<std::size_t>(g[5]);
    geometry.name_dim = static_cast<std::size_t>(g[6]);
    geometry.embed_dim = static_cast<std::size_t>(g[7]);
    Backbone bb(geometry, 0, in.get("backbone/logit_scale").values.at(0));
    for (auto& p : bb.parameters()) in.load_into("backbone/" + p.name, p.tensor);
    const std::string prefix = "backbone/prototype/";
    for (const auto& name : in.names_with_prefix(prefix)) {
        const auto id = static_cast<ClassId>(std::stoul(name.substr(prefix.size())));
        bb.text_.register_class(id, in.get(name).values);
    }
    bb.freeze();
    return bb;
}

// ---- classification -------------------------------------------------------

CosineResult classify_cosine(std::span<const double> image_embedding, std::span<const ClassId> classes,
                             const Tensor& class_embeddings) {
    if (classes.empty()) throw Error(ErrorKind::EmptyInput, "classify_cosine: empty class set");
    if (class_embeddings.rank() != 2 || class_embeddings.rows() != classes.size() ||
        class_embeddings.cols() != image_embedding.size()) {
        throw Error(ErrorKind::Dimension, "classify_cosine: embedding shapes disagree");
    }
    CosineResult result;
    result.similarities.resize(classes.size());
    const std::size_t e = image_embedding.size();
    std::size_t best = 0;
    for (std::size_t c = 0; c < classes.size(); ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < e; ++j) s += image_embedding[j] * class_embeddings.at(c, j);
        result.similarities[c] = s;
        const double top = result.similarities[best];
        if (s > top || (s == top && classes[c] < classes[best])) best = c;
    }
    result.predicted = classes[best];
    return result;
}

// ---- pretraining ----------------------------------------------------------

double zero_shot_accuracy(const Backbone& backbone, const LabeledSet& samples, std::span<const ClassId> classes) {
    if (samples.empty()) throw Error(ErrorKind::EmptyInput, "zero_shot_accuracy: no samples");
    NoGradGuard guard;
    const Tensor text = backbone.text().encode_classes(classes);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Tensor emb = backbone.image().encode(samples.image(i));
        if (classify_cosine(emb.data(), classes, text).predicted == samples.labels[i]) ++correct;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(samples.size());
}

PretrainReport pretrain_backbone(Backbone& backbone, const ReferenceSet& reference, const PretrainConfig& config) {
    if (reference.pretext.empty()) throw Error(ErrorKind::EmptyInput, "pretrain_backbone: empty pretext set");
    backbone.text().register_catalog(reference.names);
    PretrainReport report;
    const auto& classes = reference.pretext_classes;
    std::map<ClassId, std::size_t> index_of;
    for (std::size_t i = 0; i < classes.size(); ++i) index_of[classes[i]] = i;

    if (config.steps > 0) {
        backbone.set_trainable(true);
        std::vector<Tensor> params;
        for (auto& p : backbone.parameters()) params.push_back(p.tensor);
        AdamW optimizer({.lr = config.lr, .weight_decay = config.weight_decay});
        Rng rng(derive_seed(config.seed, "pretrain"));
        const std::size_t window = std::max<std::size_t>(1, config.steps / 10);
        double head = 0.0;
        double tail = 0.0;
        const std::size_t batch = std::min(config.batch, reference.pretext.size());
        for (std::size_t step = 0; step < config.steps; ++step) {
            const Tensor text_t = transpose(backbone.text().encode_classes(classes));
            Tensor loss;
            for (std::size_t b = 0; b < batch; ++b) {
                const std::size_t i = rng.index(reference.pretext.size());
                const Tensor emb = backbone.image().encode(reference.pretext.image(i));
                const Tensor logits = scale(matmul(emb, text_t), backbone.logit_scale());
                const Tensor ce = cross_entropy_smoothed(logits, index_of.at(reference.pretext.labels[i]), 0.0);
                loss = loss.defined() ? add(loss, ce) : ce;
            }
            loss = scale(loss, 1.0 / static_cast<double>(batch));
            if (step < window) head += loss.item();
            if (step + window >= config.steps) tail += loss.item();
            backward(loss);
            optimizer.step(params);
            zero_grads(params);
        }
        report.initial_loss = head / static_cast<double>(window);
        report.final_loss = tail / static_cast<double>(window);
        report.loss_decreased = report.final_loss < report.initial_loss;
        if (!report.loss_decreased) {
            std::cerr << "warning: pretraining loss did not decrease (" << report.initial_loss << " -> "
                      << report.final_loss << "); freezing anyway\n";
        }
    }
    backbone.freeze();
    if (!reference.heldout.empty() && !reference.heldout_classes.empty()) {
        report.heldout_zero_shot = zero_shot_accuracy(backbone, reference.heldout, reference.heldout_classes);
    }
    return report;
}

}  // namespace moecl
