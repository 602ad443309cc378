// SPDX-License-Identifier: Apache-2.0
//
// Frozen two-tower stand-in for a pretrained vision-language model. The image
// tower is a small pre-LN transformer over patch tokens with a leading [CLS]
// token; the text tower runs a class-name vector through the same block
// structure as a one-token sequence. Both towers expose a per-block socket
// after attention where adapters add their delta.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moecl/checkpoint.hpp"
#include "moecl/data.hpp"
#include "moecl/rng.hpp"
#include "moecl/tensor.hpp"

namespace moecl {

struct BackboneGeometry {
    std::size_t blocks = 2;
    std::size_t width = 32;
    std::size_t heads = 4;
    std::size_t patches = 16;
    std::size_t patch_dim = 16;
    std::size_t mlp_hidden = 64;
    std::size_t name_dim = 16;
    std::size_t embed_dim = 32;

    std::size_t tokens() const noexcept { return patches + 1; }
    void validate() const;
    bool operator==(const BackboneGeometry&) const = default;
};

/// What an adapter needs to know about the current forward pass.
struct SocketCall {
    std::optional<TaskId> task;
    bool tally = false;  // count expert selections (training-mode forwards)
};

/// Attachment point receiving post-attention tokens of one block and
/// returning an additive delta of the same shape.
class AdapterSocket {
   public:
    virtual ~AdapterSocket() = default;
    virtual std::size_t blocks() const = 0;
    virtual Tensor delta(std::size_t block, const Tensor& attended, const SocketCall& call) = 0;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

class TransformerBlock {
   public:
    TransformerBlock() = default;
    TransformerBlock(std::size_t width, std::size_t mlp_hidden, std::size_t heads, Rng& rng);

    /// MHSA(LN(x)), the branch the adapters attach to.
    Tensor attend(const Tensor& x) const;
    /// MLP(LN(x)).
    Tensor feed_forward(const Tensor& x) const;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;

   private:
    std::size_t heads_ = 1;
    Tensor ln1_gain_, ln1_bias_;
    Tensor wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
    Tensor ln2_gain_, ln2_bias_;
    Tensor w1_, b1_, w2_, b2_;
};

/// Runs tokens through the blocks, inserting socket deltas after attention.
Tensor run_blocks(std::span<const TransformerBlock> blocks, Tensor x, AdapterSocket* sockets, const SocketCall& call);

class ImageTower {
   public:
    ImageTower(const BackboneGeometry& geometry, std::uint64_t seed);

    /// L2-normalised [CLS] embedding, [1 x embed_dim].
    Tensor encode(const Tensor& image, AdapterSocket* sockets = nullptr, const SocketCall& call = {}) const;
    /// The [CLS] embedding before normalisation.
    Tensor encode_unnormalized(const Tensor& image, AdapterSocket* sockets = nullptr,
                               const SocketCall& call = {}) const;
    /// Mean of the patch tokens of the adapter-free final residual stream.
    std::vector<double> pooled_features(const Tensor& image) const;
    std::vector<NamedTensor> parameters() const;

   private:
    Tensor tokens(const Tensor& image) const;

    BackboneGeometry geometry_;
    Tensor patch_proj_, patch_bias_, cls_token_, positions_;
    std::vector<TransformerBlock> blocks_;
    Tensor final_gain_, final_bias_, projection_;
};

class TextTower {
   public:
    TextTower(const BackboneGeometry& geometry, std::uint64_t seed);

    /// Adds a class-name prototype; re-registering an identical vector is a no-op.
    void register_class(ClassId id, std::span<const double> name);
    void register_catalog(const ClassCatalog& catalog);
    bool has_class(ClassId id) const { return prototypes_.contains(id); }
    const std::map<ClassId, Tensor>& prototypes() const noexcept { return prototypes_; }

    Tensor encode(ClassId id, AdapterSocket* sockets = nullptr, const SocketCall& call = {}) const;
    Tensor encode_name(const Tensor& name, AdapterSocket* sockets = nullptr, const SocketCall& call = {}) const;
    /// Stacked embeddings, one row per class.
    Tensor encode_classes(std::span<const ClassId> ids, AdapterSocket* sockets = nullptr,
                          const SocketCall& call = {}) const;
    std::vector<NamedTensor> parameters() const;

   private:
    BackboneGeometry geometry_;
    Tensor name_proj_, name_bias_;
    std::vector<TransformerBlock> blocks_;
    Tensor final_gain_, final_bias_, projection_;
    std::map<ClassId, Tensor> prototypes_;
};

class Backbone {
   public:
    Backbone(const BackboneGeometry& geometry, std::uint64_t seed, double logit_scale = 10.0);

    const BackboneGeometry& geometry() const noexcept { return geometry_; }
    ImageTower& image() noexcept { return image_; }
    const ImageTower& image() const noexcept { return image_; }
    TextTower& text() noexcept { return text_; }
    const TextTower& text() const noexcept { return text_; }
    double logit_scale() const noexcept { return logit_scale_; }

    std::vector<NamedTensor> parameters() const;
    void set_trainable(bool trainable);
    void freeze() { set_trainable(false); }
    bool frozen() const;
    /// Byte-level hash of every tower parameter.
    std::uint64_t digest() const;

    void save(Container& out) const;
    static Backbone load(const Container& in);

   private:
    BackboneGeometry geometry_;
    double logit_scale_;
    ImageTower image_;
    TextTower text_;
};

struct CosineResult {
    std::vector<double> similarities;
    ClassId predicted = 0;
};

/// Dot products of a unit image embedding against unit class embeddings
/// [M x e]; the highest wins, lowest class id on an exact tie.
CosineResult classify_cosine(std::span<const double> image_embedding, std::span<const ClassId> classes,
                             const Tensor& class_embeddings);

struct PretrainConfig {
    std::size_t steps = 2000;
    std::size_t batch = 32;
    double lr = 1e-3;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
};

struct PretrainReport {
    double initial_loss = 0.0;  // mean over the first tenth of steps
    double final_loss = 0.0;    // mean over the last tenth of steps
    bool loss_decreased = false;
    double heldout_zero_shot = 0.0;  // percent
};

/// Contrastive image-to-class-name training on pretext classes, then freeze.
PretrainReport pretrain_backbone(Backbone& backbone, const ReferenceSet& reference, const PretrainConfig& config);

/// Percent of samples whose cosine prediction among `classes` is correct,
/// using the adapter-free towers.
double zero_shot_accuracy(const Backbone& backbone, const LabeledSet& samples, std::span<const ClassId> classes);

}  // namespace moecl
