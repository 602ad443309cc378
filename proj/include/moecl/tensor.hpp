// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensors with tape-free reverse-mode differentiation. Every
// primitive records its inputs and a backward closure when any input requires
// a gradient; backward() walks the resulting DAG once in reverse topological
// order.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "moecl/error.hpp"

namespace moecl {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until the first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

class Tensor {
   public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const;
    std::size_t numel() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t rows() const;  // 2-D only
    std::size_t cols() const;  // 2-D only

    std::span<const double> data() const;
    /// Direct write access for parameter initialisation, optimisers and loaders.
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t i) const { return data()[i]; }
    double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    /// Accumulated gradient; zeros when nothing has been accumulated yet.
    std::vector<double> grad() const;
    std::span<const double> grad_view() const;
    void zero_grad();

    /// Copy of the values with no history.
    Tensor detach() const;
    const char* op_name() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

   private:
    std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
   public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

bool grad_enabled() noexcept;

/// Nodes reachable from a root that participate in differentiation, inputs
/// before consumers.
class ComputeGraph {
   public:
    static ComputeGraph from_root(const Tensor& root);

    std::size_t size() const noexcept { return nodes_.size(); }
    std::vector<std::string> ops() const;
    bool is_topological() const;
    const std::vector<std::shared_ptr<detail::Node>>& nodes() const { return nodes_; }

   private:
    std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Accumulates d(root)/d(t) into every reachable tensor that requires a grad.
/// Returns the number of nodes visited.
std::size_t backward(const Tensor& root);

// ---- primitives -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// x[m x n] + bias[n] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
/// Row-wise layer normalisation with per-column gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// Softmax over a flat vector. Masked entries are exactly zero and excluded
/// from the normaliser.
Tensor softmax(const Tensor& logits, const std::set<std::size_t>& mask = {});
/// Scaled dot-product attention over `heads` column blocks of q, k, v [n x d].
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);
/// Row i of a 2-D tensor as [1 x n].
Tensor row(const Tensor& x, std::size_t i);
Tensor mean_rows(const Tensor& x);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor l2_normalize(const Tensor& x);
/// x * s[index]; lets a gate weight scale an expert output.
Tensor scale_by(const Tensor& x, const Tensor& s, std::size_t index);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

enum class Reduction { Sum, Mean };

/// Squared error between equal-shaped tensors; Mean is the default.
Tensor mse(const Tensor& a, const Tensor& b, Reduction reduction = Reduction::Mean);
Tensor mae(const Tensor& a, const Tensor& b);
Tensor smooth_l1(const Tensor& a, const Tensor& b, double beta = 1.0);
/// Cross-entropy against (1-eps) on the target and eps/(n-1) elsewhere.
Tensor cross_entropy_smoothed(const Tensor& logits, std::size_t target, double eps);

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double h = 1e-5);

}  // namespace moecl
