// SPDX-License-Identifier: Apache-2.0
#include "moecl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

namespace moecl {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<detail::Node>;

[[noreturn]] void dimension_error(const std::string& op, const std::string& detail) {
    throw Error(ErrorKind::Dimension, op + ": " + detail);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        dimension_error(op, "shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
}

void require_2d(const char* op, const Tensor& t) {
    if (t.rank() != 2) dimension_error(op, "expected a 2-D tensor, got " + shape_string(t.shape()));
}

// Builds the output node; history is kept only when some input needs a grad.
Tensor make_result(const char* op, Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   std::function<void(detail::Node&)> backward) {
    for (double v : data) {
        if (!std::isfinite(v)) throw Error(ErrorKind::NonFinite, std::string(op) + ": non-finite value produced");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        for (const auto& in : inputs) node->inputs.push_back(in.node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

Tensor make_result_n(const char* op, Shape shape, std::vector<double> data, std::span<const Tensor> inputs,
                     std::function<void(detail::Node&)> backward) {
    for (double v : data) {
        if (!std::isfinite(v)) throw Error(ErrorKind::NonFinite, std::string(op) + ": non-finite value produced");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        for (const auto& in : inputs) node->inputs.push_back(in.node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

bool wants(const NodePtr& n) { return n->requires_grad; }

// c[m x n] (+)= a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// c[m x k] += g[m x n] * b[k x n]^T
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* gi = g + i * n;
        double* ci = c + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* bp = b + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
            ci[p] += acc;
        }
    }
}

// c[k x n] += a[m x k]^T * g[m x n]
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* gi = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            double* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += aip * gi[j];
        }
    }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) noexcept {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto node = std::make_shared<detail::Node>();
    node->data.assign(shape_numel(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        dimension_error("Tensor::from", shape_string(shape) + " does not hold " + std::to_string(values.size()) +
                                            " values");
    }
    for (double v : values) {
        if (!std::isfinite(v)) throw Error(ErrorKind::NonFinite, "Tensor::from: non-finite value");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
    if (!node_) throw Error(ErrorKind::State, "undefined tensor");
    return node_->shape;
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::size_t Tensor::rows() const {
    require_2d("rows", *this);
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    require_2d("cols", *this);
    return node_->shape[1];
}

std::span<const double> Tensor::data() const {
    if (!node_) throw Error(ErrorKind::State, "undefined tensor");
    return node_->data;
}

std::span<double> Tensor::mutable_data() {
    if (!node_) throw Error(ErrorKind::State, "undefined tensor");
    return node_->data;
}

double Tensor::item() const {
    if (numel() != 1) dimension_error("item", "tensor is not a scalar " + shape_string(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    if (!node_) throw Error(ErrorKind::State, "undefined tensor");
    node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
    if (!node_) throw Error(ErrorKind::State, "undefined tensor");
    if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
    return node_->grad;
}

std::span<const double> Tensor::grad_view() const {
    if (!node_) throw Error(ErrorKind::State, "undefined tensor");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return from(shape(), std::vector<double>(data().begin(), data().end())); }

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

// ---- graph ----------------------------------------------------------------

ComputeGraph ComputeGraph::from_root(const Tensor& root) {
    ComputeGraph graph;
    if (!root.requires_grad()) return graph;
    std::unordered_set<const detail::Node*> seen;
    // Iterative post-order DFS: a node is emitted after all of its inputs.
    std::vector<std::pair<NodePtr, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            const NodePtr& in = node->inputs[next++];
            if (in->requires_grad && seen.insert(in.get()).second) stack.emplace_back(in, 0);
        } else {
            graph.nodes_.push_back(node);
            stack.pop_back();
        }
    }
    return graph;
}

std::vector<std::string> ComputeGraph::ops() const {
    std::vector<std::string> out;
    out.reserve(nodes_.size());
    for (const auto& n : nodes_) out.emplace_back(n->op);
    return out;
}

bool ComputeGraph::is_topological() const {
    std::unordered_set<const detail::Node*> emitted;
    for (const auto& n : nodes_) {
        for (const auto& in : n->inputs) {
            if (in->requires_grad && !emitted.contains(in.get())) return false;
        }
        emitted.insert(n.get());
    }
    return true;
}

std::size_t backward(const Tensor& root) {
    if (!root.defined() || root.numel() != 1) {
        throw Error(ErrorKind::Dimension, "backward: root must be a scalar");
    }
    if (!root.requires_grad()) throw Error(ErrorKind::State, "backward: root does not require grad");
    const ComputeGraph graph = ComputeGraph::from_root(root);
    root.node()->grad_buffer()[0] += 1.0;
    const auto& nodes = graph.nodes();
    std::size_t visited = 0;
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        detail::Node& n = **it;
        ++visited;
        if (n.backward && !n.grad.empty()) n.backward(n);
    }
    return visited;
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        for (const auto& in : self.inputs) {
            if (!wants(in)) continue;
            auto& g = in->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_result("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        const double sign[2] = {1.0, -1.0};
        for (std::size_t k = 0; k < 2; ++k) {
            const auto& in = self.inputs[k];
            if (!wants(in)) continue;
            auto& g = in->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        const auto& x = self.inputs[0];
        const auto& y = self.inputs[1];
        if (wants(x)) {
            auto& g = x->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y->data[i];
        }
        if (wants(y)) {
            auto& g = y->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x->data[i];
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
    return make_result("scale", a.shape(), std::move(out), {a}, [factor](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    require_2d("add_bias", x);
    const std::size_t m = x.rows();
    const std::size_t n = x.cols();
    if (bias.numel() != n) dimension_error("add_bias", "bias length " + std::to_string(bias.numel()) + " != " + std::to_string(n));
    std::vector<double> out(x.data().begin(), x.data().end());
    const auto b = bias.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
    }
    return make_result("add_bias", x.shape(), std::move(out), {x, bias}, [m, n](detail::Node& self) {
        if (wants(self.inputs[0])) {
            auto& g = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants(self.inputs[1])) {
            auto& g = self.inputs[1]->grad_buffer();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
            }
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d("matmul", a);
    require_2d("matmul", b);
    const std::size_t m = a.rows();
    const std::size_t k = a.cols();
    const std::size_t n = b.cols();
    if (b.rows() != k) {
        dimension_error("matmul", "inner dimensions disagree " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    return make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
        const auto& x = self.inputs[0];
        const auto& y = self.inputs[1];
        if (wants(x)) gemm_nt(self.grad.data(), y->data.data(), x->grad_buffer().data(), m, n, k);
        if (wants(y)) gemm_tn(x->data.data(), self.grad.data(), y->grad_buffer().data(), m, k, n);
    });
}

Tensor transpose(const Tensor& a) {
    require_2d("transpose", a);
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    std::vector<double> out(m * n);
    const auto d = a.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = d[i * n + j];
    }
    return make_result("transpose", {n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
        }
    });
}

Tensor gelu(const Tensor& x) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    std::vector<double> out(x.numel());
    const auto d = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * d[i] * (1.0 + std::erf(d[i] * kInvSqrt2));
    return make_result("gelu", x.shape(), std::move(out), {x}, [](detail::Node& self) {
        const auto& in = self.inputs[0];
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = in->data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            g[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto d = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] > 0.0 ? d[i] : 0.0;
    return make_result("relu", x.shape(), std::move(out), {x}, [](detail::Node& self) {
        const auto& in = self.inputs[0];
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (in->data[i] > 0.0) g[i] += self.grad[i];
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_2d("layer_norm", x);
    const std::size_t m = x.rows();
    const std::size_t n = x.cols();
    if (gain.numel() != n || bias.numel() != n) dimension_error("layer_norm", "gain/bias length mismatch");
    std::vector<double> out(m * n);
    auto normalized = std::make_shared<std::vector<double>>(m * n);
    auto inv_std = std::make_shared<std::vector<double>>(m);
    const auto d = x.data();
    const auto gv = gain.data();
    const auto bv = bias.data();
    for (std::size_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += d[i * n + j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double c = d[i * n + j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const double xh = (d[i * n + j] - mu) * is;
            (*normalized)[i * n + j] = xh;
            out[i * n + j] = xh * gv[j] + bv[j];
        }
    }
    return make_result("layer_norm", x.shape(), std::move(out), {x, gain, bias},
                       [m, n, normalized, inv_std](detail::Node& self) {
                           const auto& xin = self.inputs[0];
                           const auto& gin = self.inputs[1];
                           const auto& bin = self.inputs[2];
                           const auto& xh = *normalized;
                           if (wants(gin)) {
                               auto& g = gin->grad_buffer();
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j] * xh[i * n + j];
                           }
                           if (wants(bin)) {
                               auto& g = bin->grad_buffer();
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                           }
                           if (wants(xin)) {
                               auto& g = xin->grad_buffer();
                               const double inv_n = 1.0 / static_cast<double>(n);
                               for (std::size_t i = 0; i < m; ++i) {
                                   double mean_dxh = 0.0;
                                   double mean_dxh_xh = 0.0;
                                   for (std::size_t j = 0; j < n; ++j) {
                                       const double dxh = self.grad[i * n + j] * gin->data[j];
                                       mean_dxh += dxh;
                                       mean_dxh_xh += dxh * xh[i * n + j];
                                   }
                                   mean_dxh *= inv_n;
                                   mean_dxh_xh *= inv_n;
                                   for (std::size_t j = 0; j < n; ++j) {
                                       const double dxh = self.grad[i * n + j] * gin->data[j];
                                       g[i * n + j] += (*inv_std)[i] * (dxh - mean_dxh - xh[i * n + j] * mean_dxh_xh);
                                   }
                               }
                           }
                       });
}

Tensor softmax(const Tensor& logits, const std::set<std::size_t>& mask) {
    const std::size_t n = logits.numel();
    if (n == 0) throw Error(ErrorKind::EmptySupport, "softmax: empty input");
    for (std::size_t i : mask) {
        if (i >= n) throw Error(ErrorKind::OutOfRange, "softmax: mask index " + std::to_string(i) + " out of range");
    }
    if (mask.size() == n) throw Error(ErrorKind::EmptySupport, "softmax: every index is masked");
    const auto d = logits.data();
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        if (!mask.contains(i)) peak = std::max(peak, d[i]);
    }
    std::vector<double> out(n, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask.contains(i)) continue;
        out[i] = std::exp(d[i] - peak);
        total += out[i];
    }
    for (double& v : out) v /= total;
    return make_result("softmax", logits.shape(), std::move(out), {logits}, [n](detail::Node& self) {
        // Masked outputs are constant zero, so their rows of the Jacobian vanish.
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += self.data[i] * self.grad[i];
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.data[i] * (self.grad[i] - dot);
    });
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
    require_2d("multi_head_attention", q);
    require_same_shape("multi_head_attention", q, k);
    require_same_shape("multi_head_attention", q, v);
    const std::size_t n = q.rows();
    const std::size_t d = q.cols();
    if (heads == 0 || d % heads != 0) dimension_error("multi_head_attention", "width not divisible by heads");
    const std::size_t dh = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    auto probs = std::make_shared<std::vector<double>>(heads * n * n);
    std::vector<double> out(n * d, 0.0);
    const auto qd = q.data();
    const auto kd = k.data();
    const auto vd = v.data();
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        double* p = probs->data() + h * n * n;
        for (std::size_t i = 0; i < n; ++i) {
            double peak = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += qd[i * d + off + c] * kd[j * d + off + c];
                s *= inv_scale;
                p[i * n + j] = s;
                peak = std::max(peak, s);
            }
            double total = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                p[i * n + j] = std::exp(p[i * n + j] - peak);
                total += p[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) p[i * n + j] /= total;
            for (std::size_t j = 0; j < n; ++j) {
                const double w = p[i * n + j];
                for (std::size_t c = 0; c < dh; ++c) out[i * d + off + c] += w * vd[j * d + off + c];
            }
        }
    }
    return make_result("multi_head_attention", {n, d}, std::move(out), {q, k, v},
                       [n, d, heads, dh, inv_scale, probs](detail::Node& self) {
                           const auto& qn = self.inputs[0];
                           const auto& kn = self.inputs[1];
                           const auto& vn = self.inputs[2];
                           std::vector<double> dp(n * n);
                           for (std::size_t h = 0; h < heads; ++h) {
                               const std::size_t off = h * dh;
                               const double* p = probs->data() + h * n * n;
                               if (wants(vn)) {
                                   auto& gv = vn->grad_buffer();
                                   for (std::size_t i = 0; i < n; ++i)
                                       for (std::size_t j = 0; j < n; ++j) {
                                           const double w = p[i * n + j];
                                           for (std::size_t c = 0; c < dh; ++c)
                                               gv[j * d + off + c] += w * self.grad[i * d + off + c];
                                       }
                               }
                               if (!wants(qn) && !wants(kn)) continue;
                               // dS = P * (dP - rowsum(dP * P)), dP = dO V^T
                               for (std::size_t i = 0; i < n; ++i) {
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j < n; ++j) {
                                       double s = 0.0;
                                       for (std::size_t c = 0; c < dh; ++c)
                                           s += self.grad[i * d + off + c] * vn->data[j * d + off + c];
                                       dp[i * n + j] = s;
                                       dot += s * p[i * n + j];
                                   }
                                   for (std::size_t j = 0; j < n; ++j)
                                       dp[i * n + j] = p[i * n + j] * (dp[i * n + j] - dot) * inv_scale;
                               }
                               if (wants(qn)) {
                                   auto& gq = qn->grad_buffer();
                                   for (std::size_t i = 0; i < n; ++i)
                                       for (std::size_t j = 0; j < n; ++j) {
                                           const double s = dp[i * n + j];
                                           for (std::size_t c = 0; c < dh; ++c)
                                               gq[i * d + off + c] += s * kn->data[j * d + off + c];
                                       }
                               }
                               if (wants(kn)) {
                                   auto& gk = kn->grad_buffer();
                                   for (std::size_t i = 0; i < n; ++i)
                                       for (std::size_t j = 0; j < n; ++j) {
                                           const double s = dp[i * n + j];
                                           for (std::size_t c = 0; c < dh; ++c)
                                               gk[j * d + off + c] += s * qn->data[i * d + off + c];
                                       }
                               }
                           }
                       });
}

// ---- structural -----------------------------------------------------------

Tensor row(const Tensor& x, std::size_t i) {
    require_2d("row", x);
    const std::size_t n = x.cols();
    if (i >= x.rows()) throw Error(ErrorKind::OutOfRange, "row: index out of range");
    std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(i * n),
                            x.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    return make_result("row", {1, n}, std::move(out), {x}, [i, n](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j];
    });
}

Tensor mean_rows(const Tensor& x) {
    require_2d("mean_rows", x);
    const std::size_t m = x.rows();
    const std::size_t n = x.cols();
    if (m == 0) throw Error(ErrorKind::EmptyInput, "mean_rows: no rows");
    std::vector<double> out(n, 0.0);
    const auto d = x.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += d[i * n + j];
    for (double& v : out) v /= static_cast<double>(m);
    return make_result("mean_rows", {1, n}, std::move(out), {x}, [m, n](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const double inv = 1.0 / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j] * inv;
    });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw Error(ErrorKind::EmptyInput, "concat_rows: nothing to concatenate");
    const std::size_t n = parts.front().cols();
    std::size_t m = 0;
    for (const auto& p : parts) {
        if (p.cols() != n) dimension_error("concat_rows", "column counts differ");
        m += p.rows();
    }
    std::vector<double> out;
    out.reserve(m * n);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return make_result_n("concat_rows", {m, n}, std::move(out), parts, [](detail::Node& self) {
        std::size_t offset = 0;
        for (const auto& in : self.inputs) {
            const std::size_t len = in->data.size();
            if (wants(in)) {
                auto& g = in->grad_buffer();
                for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
            }
            offset += len;
        }
    });
}

Tensor l2_normalize(const Tensor& x) {
    const auto d = x.data();
    double norm2 = 0.0;
    for (double v : d) norm2 += v * v;
    const double norm = std::sqrt(norm2);
    if (!(norm > 0.0)) throw Error(ErrorKind::NonFinite, "l2_normalize: zero vector");
    std::vector<double> out(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] / norm;
    return make_result("l2_normalize", x.shape(), std::move(out), {x}, [norm](detail::Node& self) {
        double dot = 0.0;
        for (std::size_t i = 0; i < self.data.size(); ++i) dot += self.data[i] * self.grad[i];
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += (self.grad[i] - self.data[i] * dot) / norm;
    });
}

Tensor scale_by(const Tensor& x, const Tensor& s, std::size_t index) {
    if (index >= s.numel()) throw Error(ErrorKind::OutOfRange, "scale_by: index out of range");
    const double factor = s.data()[index];
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
    return make_result("scale_by", x.shape(), std::move(out), {x, s}, [index, factor](detail::Node& self) {
        const auto& xin = self.inputs[0];
        const auto& sin = self.inputs[1];
        if (wants(xin)) {
            auto& g = xin->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
        }
        if (wants(sin)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xin->data[i];
            sin->grad_buffer()[index] += acc;
        }
    });
}

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) total += v;
    return make_result("sum", {1}, {total}, {x}, [](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (double& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    const std::size_t n = x.numel();
    if (n == 0) throw Error(ErrorKind::EmptyInput, "mean: empty tensor");
    double total = 0.0;
    for (double v : x.data()) total += v;
    return make_result("mean", {1}, {total / static_cast<double>(n)}, {x}, [n](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const double share = self.grad[0] / static_cast<double>(n);
        for (double& v : g) v += share;
    });
}

// ---- losses ---------------------------------------------------------------

Tensor mse(const Tensor& a, const Tensor& b, Reduction reduction) {
    require_same_shape("mse", a, b);
    const std::size_t n = a.numel();
    if (n == 0) throw Error(ErrorKind::EmptyInput, "mse: empty tensors");
    const double norm = reduction == Reduction::Mean ? 1.0 / static_cast<double>(n) : 1.0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double diff = a.data()[i] - b.data()[i];
        total += diff * diff;
    }
    return make_result("mse", {1}, {total * norm}, {a, b}, [n, norm](detail::Node& self) {
        const auto& x = self.inputs[0];
        const auto& y = self.inputs[1];
        const double gs = 2.0 * norm * self.grad[0];
        for (std::size_t i = 0; i < n; ++i) {
            const double diff = x->data[i] - y->data[i];
            if (wants(x)) x->grad_buffer()[i] += gs * diff;
            if (wants(y)) y->grad_buffer()[i] -= gs * diff;
        }
    });
}

Tensor mae(const Tensor& a, const Tensor& b) {
    require_same_shape("mae", a, b);
    const std::size_t n = a.numel();
    if (n == 0) throw Error(ErrorKind::EmptyInput, "mae: empty tensors");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += std::abs(a.data()[i] - b.data()[i]);
    return make_result("mae", {1}, {total / static_cast<double>(n)}, {a, b}, [n](detail::Node& self) {
        const auto& x = self.inputs[0];
        const auto& y = self.inputs[1];
        const double gs = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double diff = x->data[i] - y->data[i];
            const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
            if (wants(x)) x->grad_buffer()[i] += gs * sgn;
            if (wants(y)) y->grad_buffer()[i] -= gs * sgn;
        }
    });
}

Tensor smooth_l1(const Tensor& a, const Tensor& b, double beta) {
    require_same_shape("smooth_l1", a, b);
    const std::size_t n = a.numel();
    if (n == 0) throw Error(ErrorKind::EmptyInput, "smooth_l1: empty tensors");
    if (!(beta > 0.0)) throw Error(ErrorKind::OutOfRange, "smooth_l1: beta must be positive");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double diff = std::abs(a.data()[i] - b.data()[i]);
        total += diff < beta ? 0.5 * diff * diff / beta : diff - 0.5 * beta;
    }
    return make_result("smooth_l1", {1}, {total / static_cast<double>(n)}, {a, b}, [n, beta](detail::Node& self) {
        const auto& x = self.inputs[0];
        const auto& y = self.inputs[1];
        const double gs = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double diff = x->data[i] - y->data[i];
            const double d = std::abs(diff) < beta ? diff / beta : (diff > 0.0 ? 1.0 : -1.0);
            if (wants(x)) x->grad_buffer()[i] += gs * d;
            if (wants(y)) y->grad_buffer()[i] -= gs * d;
        }
    });
}

Tensor cross_entropy_smoothed(const Tensor& logits, std::size_t target, double eps) {
    const std::size_t n = logits.numel();
    if (n == 0) throw Error(ErrorKind::EmptyInput, "cross_entropy_smoothed: empty logits");
    if (target >= n) throw Error(ErrorKind::OutOfRange, "cross_entropy_smoothed: target out of range");
    if (!(eps >= 0.0 && eps < 1.0)) throw Error(ErrorKind::OutOfRange, "cross_entropy_smoothed: eps outside [0,1)");
    std::vector<double> q(n, n > 1 ? eps / static_cast<double>(n - 1) : 0.0);
    q[target] = n > 1 ? 1.0 - eps : 1.0;
    const auto d = logits.data();
    const double peak = *std::max_element(d.begin(), d.end());
    double total = 0.0;
    for (double v : d) total += std::exp(v - peak);
    const double log_z = peak + std::log(total);
    auto probs = std::make_shared<std::vector<double>>(n);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double logp = d[i] - log_z;
        (*probs)[i] = std::exp(logp);
        loss -= q[i] * logp;
    }
    return make_result("cross_entropy_smoothed", {1}, {loss}, {logits},
                       [probs, q = std::move(q)](detail::Node& self) {
                           auto& g = self.inputs[0]->grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * ((*probs)[i] - q[i]);
                       });
}

// ---- verification ---------------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double h) {
    Tensor x = Tensor::from(point.shape(), std::vector<double>(point.data().begin(), point.data().end()), true);
    const Tensor y = f(x);
    if (y.numel() != 1) throw Error(ErrorKind::Dimension, "grad_check: f must be scalar-valued");
    if (!std::isfinite(y.item())) throw Error(ErrorKind::NonFinite, "grad_check: non-finite evaluation");
    const std::vector<double> analytic = y.requires_grad() ? (backward(y), x.grad()) : std::vector<double>(x.numel(), 0.0);

    NoGradGuard guard;
    double worst = 0.0;
    auto values = x.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + h;
        const double up = f(x).item();
        values[i] = saved - h;
        const double down = f(x).item();
        values[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw Error(ErrorKind::NonFinite, "grad_check: non-finite evaluation");
        }
        const double numeric = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
    }
    return worst;
}

}  // namespace moecl
