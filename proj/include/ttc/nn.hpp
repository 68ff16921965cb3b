#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttc/autograd.hpp"
#include "ttc/util.hpp"

namespace ttc::nn {

using ag::Matrix;
using ag::Var;

struct NamedParameter {
    std::string name;
    Var var;
};

/// Ordered, named view over parameter leaves (shared with their owners).
class ParameterList {
public:
    void add(std::string name, const Var& var) { items_.push_back({std::move(name), var}); }
    void append(const ParameterList& other);

    const std::vector<NamedParameter>& items() const { return items_; }
    std::vector<Var> vars() const;
    std::size_t size() const { return items_.size(); }
    std::size_t scalar_count() const;

    void zero_grad();
    std::vector<Matrix> snapshot() const;
    void restore(const std::vector<Matrix>& values);
    /// FNV-1a over every value, in order.
    std::uint64_t checksum() const;

    nlohmann::json to_json() const;
    /// Loads values by name; throws on missing names or shape mismatch.
    void load_json(const nlohmann::json& j);

private:
    std::vector<NamedParameter> items_;
};

/// Marks leaves as constants for the guard's lifetime, so graphs built
/// meanwhile skip their gradients.
class FreezeGuard {
public:
    explicit FreezeGuard(std::vector<Var> vars);
    ~FreezeGuard();
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

private:
    std::vector<Var> vars_;
};

Matrix xavier_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng);
Matrix normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

/// y = x W + b, with an optional low-rank delta (x A) B * (alpha / r).
/// Shapes: W in x out, b 1 x out, A in x r, B r x out (B starts at zero).
class Linear {
public:
    Linear() = default;
    Linear(Eigen::Index in, Eigen::Index out, Rng& rng, bool bias = true);

    Var forward(const Var& x) const;
    /// Tape-free evaluation for inference.
    Matrix apply(const Matrix& x) const;

    void attach_lora(Eigen::Index rank, double alpha, Rng& rng);
    void detach_lora() { lora_a_ = {}; lora_b_ = {}; }
    bool has_lora() const { return static_cast<bool>(lora_a_); }

    void collect(const std::string& prefix, ParameterList& base) const;
    void collect_lora(const std::string& prefix, ParameterList& adapters) const;

    Var weight;
    Var bias;

    Eigen::Index in_features() const { return weight.rows(); }
    Eigen::Index out_features() const { return weight.cols(); }

private:
    Var lora_a_;
    Var lora_b_;
    double lora_scale_ = 0.0;
};

class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(Eigen::Index dim);

    Var forward(const Var& x) const { return ag::layer_norm_rows(x, gamma, beta); }
    Matrix apply(const Matrix& x) const;
    void collect(const std::string& prefix, ParameterList& base) const;

    Var gamma;
    Var beta;
};

/// Sub-layer classes that low-rank adapters may target.
enum class AdapterTarget { attention, feed_forward };

/// Key/value cache of one block for incremental decoding.
struct KvCache {
    Matrix keys;    // capacity x dim; the first `length` rows are live
    Matrix values;  // capacity x dim
    ag::Mask mask;  // length
    Eigen::Index length = 0;
};

/// Pre-norm transformer block: x + Attn(LN(x)), then x + FFN(LN(x)).
class TransformerBlock {
public:
    TransformerBlock() = default;
    TransformerBlock(Eigen::Index dim, Eigen::Index heads, Eigen::Index ffn_mult, Rng& rng);

    Var forward(const Var& x, std::span<const std::uint8_t> key_mask, bool causal) const;
    /// Appends rows at absolute positions to the cache and returns their
    /// outputs. Rows attend causally to all cached (unmasked) keys.
    Matrix apply_incremental(const Matrix& x, std::span<const std::uint8_t> rows_mask, KvCache& cache) const;

    void attach_lora(std::span<const AdapterTarget> targets, Eigen::Index rank, double alpha, Rng& rng);
    void detach_lora();
    void collect(const std::string& prefix, ParameterList& base) const;
    void collect_lora(const std::string& prefix, ParameterList& adapters) const;

    Eigen::Index heads() const { return heads_; }

private:
    Eigen::Index heads_ = 1;
    LayerNorm ln1_, ln2_;
    Linear q_, k_, v_, o_, up_, down_;
};

/// Adam with optional global-norm gradient clipping.
class Adam {
public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double clip_norm = 0.0;  ///< 0 disables clipping
    };

    Adam(std::vector<Var> params, Options options);

    /// Applies one update from the accumulated gradients, scaled by `grad_scale`.
    void step(double grad_scale = 1.0);
    void zero_grad();
    std::size_t steps() const { return t_; }

private:
    std::vector<Var> params_;
    std::vector<Matrix> m_, v_;
    Options opt_;
    std::size_t t_ = 0;
};

}  // namespace ttc::nn
