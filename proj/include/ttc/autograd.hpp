#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace ttc::ag {

using Matrix = Eigen::MatrixXd;
/// One byte per position; nonzero marks a visible key.
using Mask = std::vector<std::uint8_t>;

/// One value in a reverse-mode tape. Nodes hold their inputs, so the graph
/// lives exactly as long as the output Var that roots it.
struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    Matrix& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    bool requires_grad() const { return node_->requires_grad; }
    /// Freezing a leaf keeps later graphs from tracking it.
    void set_requires_grad(bool on) const { node_->requires_grad = on; }
    double scalar() const { return node_->value(0, 0); }
    void zero_grad();

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& ptr() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node> node_;
};

/// Disables tape recording on this thread while alive (inference).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

Var constant(Matrix value);
/// A trainable leaf; gradients accumulate into it across backward passes.
Var parameter(Matrix value);

/// Seeds d(out)/d(out) = 1 for a 1x1 output and propagates to every leaf.
void backward(const Var& out);

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  ///< elementwise
/// a (r x c) + row (1 x c) broadcast over rows.
Var add_row(const Var& a, const Var& row);
Var scale(const Var& a, double s);
Var add_constant(const Var& a, const Matrix& c);
Var transpose(const Var& a);
Var softmax_rows(const Var& a);
Var gelu(const Var& a);
Var softplus(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var hcat(std::span<const Var> parts);
Var vcat(std::span<const Var> parts);
/// Rows of `table` selected by `ids` (embedding lookup).
Var gather_rows(const Var& table, std::span<const int> ids);
/// Row-major reshape.
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);
Var mean_of(std::span<const Var> parts);
Var sum_all(const Var& a);

/// Mean squared error against a constant target; 1x1.
Var mse(const Var& pred, const Matrix& target);
/// Mean token cross-entropy over rows whose label is >= 0; 0 when all rows
/// are ignored. 1x1.
Var cross_entropy(const Var& logits, std::span<const int> labels);

/// Causal (or full) scaled dot-product attention for one head.
/// `key_mask[j] == false` hides key j from every query.
Var attention(const Var& q, const Var& k, const Var& v, std::span<const std::uint8_t> key_mask, bool causal);

}  // namespace ttc::ag
