#include "ttc/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace ttc::nn {

void ParameterList::append(const ParameterList& other) {
    items_.insert(items_.end(), other.items_.begin(), other.items_.end());
}

std::vector<Var> ParameterList::vars() const {
    std::vector<Var> out;
    out.reserve(items_.size());
    for (const auto& p : items_) out.push_back(p.var);
    return out;
}

std::size_t ParameterList::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += static_cast<std::size_t>(p.var.value().size());
    return n;
}

void ParameterList::zero_grad() {
    for (auto& p : items_) p.var.zero_grad();
}

std::vector<Matrix> ParameterList::snapshot() const {
    std::vector<Matrix> out;
    out.reserve(items_.size());
    for (const auto& p : items_) out.push_back(p.var.value());
    return out;
}

void ParameterList::restore(const std::vector<Matrix>& values) {
    if (values.size() != items_.size()) throw std::invalid_argument("snapshot does not match the parameter list");
    for (std::size_t i = 0; i < values.size(); ++i) items_[i].var.mutable_value() = values[i];
}

std::uint64_t ParameterList::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : items_) {
        const Matrix& m = p.var.value();
        h = fnv1a64(std::span<const double>(m.data(), static_cast<std::size_t>(m.size())), h);
    }
    return h;
}

nlohmann::json ParameterList::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& p : items_) {
        const Matrix& m = p.var.value();
        std::vector<double> data(m.data(), m.data() + m.size());
        j[p.name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
    }
    return j;
}

void ParameterList::load_json(const nlohmann::json& j) {
    for (auto& p : items_) {
        if (!j.contains(p.name)) throw std::runtime_error("checkpoint lacks parameter '" + p.name + "'");
        const auto& e = j.at(p.name);
        Matrix& m = p.var.mutable_value();
        if (e.at("rows").get<Eigen::Index>() != m.rows() || e.at("cols").get<Eigen::Index>() != m.cols()) {
            throw std::runtime_error("checkpoint parameter '" + p.name + "' has the wrong shape");
        }
        const auto data = e.at("data").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(data.size()) != m.size()) {
            throw std::runtime_error("checkpoint parameter '" + p.name + "' has the wrong size");
        }
        m = Eigen::Map<const Matrix>(data.data(), m.rows(), m.cols());
    }
}

FreezeGuard::FreezeGuard(std::vector<Var> vars) : vars_(std::move(vars)) {
    for (const auto& v : vars_) v.set_requires_grad(false);
}

FreezeGuard::~FreezeGuard() {
    for (const auto& v : vars_) v.set_requires_grad(true);
}

Matrix xavier_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Matrix m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c) {
        for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.uniform(-limit, limit);
    }
    return m;
}

Matrix normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    Matrix m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c) {
        for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = stddev * rng.normal();
    }
    return m;
}

Linear::Linear(Eigen::Index in, Eigen::Index out, Rng& rng, bool bias)
    : weight(ag::parameter(xavier_uniform(in, out, rng))) {
    if (bias) this->bias = ag::parameter(Matrix::Zero(1, out));
}

Var Linear::forward(const Var& x) const {
    Var y = ag::matmul(x, weight);
    if (bias) y = ag::add_row(y, bias);
    if (lora_a_ && lora_a_.cols() > 0) {
        y = ag::add(y, ag::scale(ag::matmul(ag::matmul(x, lora_a_), lora_b_), lora_scale_));
    }
    return y;
}

Matrix Linear::apply(const Matrix& x) const {
    Matrix y = x * weight.value();
    if (bias) y.rowwise() += bias.value().row(0);
    if (lora_a_ && lora_a_.cols() > 0) y.noalias() += ((x * lora_a_.value()) * lora_b_.value()) * lora_scale_;
    return y;
}

void Linear::attach_lora(Eigen::Index rank, double alpha, Rng& rng) {
    if (rank < 0) throw std::invalid_argument("adapter rank must be nonnegative");
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features()));
    Matrix a(in_features(), rank);
    for (Eigen::Index c = 0; c < rank; ++c) {
        for (Eigen::Index r = 0; r < a.rows(); ++r) a(r, c) = rng.uniform(-bound, bound);
    }
    lora_a_ = ag::parameter(std::move(a));
    lora_b_ = ag::parameter(Matrix::Zero(rank, out_features()));
    lora_scale_ = rank > 0 ? alpha / static_cast<double>(rank) : 0.0;
}

void Linear::collect(const std::string& prefix, ParameterList& base) const {
    base.add(prefix + ".weight", weight);
    if (bias) base.add(prefix + ".bias", bias);
}

void Linear::collect_lora(const std::string& prefix, ParameterList& adapters) const {
    if (!has_lora()) return;
    adapters.add(prefix + ".lora_a", lora_a_);
    adapters.add(prefix + ".lora_b", lora_b_);
}

LayerNorm::LayerNorm(Eigen::Index dim)
    : gamma(ag::parameter(Matrix::Ones(1, dim))), beta(ag::parameter(Matrix::Zero(1, dim))) {}

Matrix LayerNorm::apply(const Matrix& x) const {
    Matrix y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().mean();
        y.row(r) = ((x.row(r).array() - mean) / std::sqrt(var + 1e-5)) * gamma.value().row(0).array() +
                   beta.value().row(0).array();
    }
    return y;
}

void LayerNorm::collect(const std::string& prefix, ParameterList& base) const {
    base.add(prefix + ".gamma", gamma);
    base.add(prefix + ".beta", beta);
}

TransformerBlock::TransformerBlock(Eigen::Index dim, Eigen::Index heads, Eigen::Index ffn_mult, Rng& rng)
    : heads_(heads),
      ln1_(dim),
      ln2_(dim),
      q_(dim, dim, rng),
      k_(dim, dim, rng),
      v_(dim, dim, rng),
      o_(dim, dim, rng),
      up_(dim, dim * ffn_mult, rng),
      down_(dim * ffn_mult, dim, rng) {
    if (heads <= 0 || dim % heads != 0) throw std::invalid_argument("model dim must be divisible by head count");
}

Var TransformerBlock::forward(const Var& x, std::span<const std::uint8_t> key_mask, bool causal) const {
    const Var h = ln1_.forward(x);
    const Var q = q_.forward(h);
    const Var k = k_.forward(h);
    const Var v = v_.forward(h);
    const Eigen::Index hd = q.cols() / heads_;
    std::vector<Var> outs;
    outs.reserve(static_cast<std::size_t>(heads_));
    for (Eigen::Index i = 0; i < heads_; ++i) {
        outs.push_back(ag::attention(ag::slice_cols(q, i * hd, hd), ag::slice_cols(k, i * hd, hd),
                                     ag::slice_cols(v, i * hd, hd), key_mask, causal));
    }
    const Var attended = heads_ == 1 ? outs.front() : ag::hcat(outs);
    const Var x1 = ag::add(x, o_.forward(attended));
    const Var ff = down_.forward(ag::gelu(up_.forward(ln2_.forward(x1))));
    return ag::add(x1, ff);
}

Matrix TransformerBlock::apply_incremental(const Matrix& x, std::span<const std::uint8_t> rows_mask, KvCache& cache) const {
    const Matrix h = ln1_.apply(x);
    const Matrix q = q_.apply(h);
    const Matrix k = k_.apply(h);
    const Matrix v = v_.apply(h);
    const Eigen::Index base = cache.length;
    const Eigen::Index n = x.rows();
    const Eigen::Index dim = x.cols();
    const Eigen::Index total = base + n;
    if (cache.keys.rows() < total) {
        // Geometric growth keeps token-by-token decoding linear in copies.
        const Eigen::Index cap = std::max<Eigen::Index>(total, 2 * cache.keys.rows());
        cache.keys.conservativeResize(cap, dim);
        cache.values.conservativeResize(cap, dim);
    }
    cache.keys.middleRows(base, n) = k;
    cache.values.middleRows(base, n) = v;
    cache.mask.insert(cache.mask.end(), rows_mask.begin(), rows_mask.end());
    cache.length = total;

    const Eigen::Index hd = dim / heads_;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    constexpr double kNegInf = -std::numeric_limits<double>::infinity();
    const bool any_masked = std::find(cache.mask.begin(), cache.mask.end(), 0) != cache.mask.end();
    Matrix attended = Matrix::Zero(n, dim);
    for (Eigen::Index head = 0; head < heads_; ++head) {
        // keys x queries, so each query's scores are contiguous.
        Matrix scores = cache.keys.block(0, head * hd, total, hd) * q.middleCols(head * hd, hd).transpose();
        scores *= inv_sqrt;
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::Index limit = base + i + 1;
            auto live = scores.col(i).head(limit);
            if (any_masked) {
                for (Eigen::Index j = 0; j < limit; ++j) {
                    if (!cache.mask[static_cast<std::size_t>(j)]) live(j) = kNegInf;
                }
            }
            scores.col(i).tail(total - limit).setZero();
            const double m = live.maxCoeff();
            if (m == kNegInf) {
                live.setZero();
                continue;
            }
            live = (live.array() - m).exp().matrix();
            live /= live.sum();
        }
        attended.middleCols(head * hd, hd) = scores.transpose() * cache.values.block(0, head * hd, total, hd);
    }
    const Matrix x1 = x + o_.apply(attended);
    const Matrix up = up_.apply(ln2_.apply(x1));
    constexpr double c = 0.7978845608028654;
    const Matrix act = up.unaryExpr([](double u) { return 0.5 * u * (1.0 + std::tanh(c * (u + 0.044715 * u * u * u))); });
    return x1 + down_.apply(act);
}

void TransformerBlock::attach_lora(std::span<const AdapterTarget> targets, Eigen::Index rank, double alpha, Rng& rng) {
    for (const auto t : targets) {
        if (t == AdapterTarget::attention) {
            for (Linear* l : {&q_, &k_, &v_, &o_}) l->attach_lora(rank, alpha, rng);
        } else {
            for (Linear* l : {&up_, &down_}) l->attach_lora(rank, alpha, rng);
        }
    }
}

void TransformerBlock::detach_lora() {
    for (Linear* l : {&q_, &k_, &v_, &o_, &up_, &down_}) l->detach_lora();
}

void TransformerBlock::collect(const std::string& prefix, ParameterList& base) const {
    ln1_.collect(prefix + ".ln1", base);
    q_.collect(prefix + ".q", base);
    k_.collect(prefix + ".k", base);
    v_.collect(prefix + ".v", base);
    o_.collect(prefix + ".o", base);
    ln2_.collect(prefix + ".ln2", base);
    up_.collect(prefix + ".ffn_up", base);
    down_.collect(prefix + ".ffn_down", base);
}

void TransformerBlock::collect_lora(const std::string& prefix, ParameterList& adapters) const {
    q_.collect_lora(prefix + ".q", adapters);
    k_.collect_lora(prefix + ".k", adapters);
    v_.collect_lora(prefix + ".v", adapters);
    o_.collect_lora(prefix + ".o", adapters);
    up_.collect_lora(prefix + ".ffn_up", adapters);
    down_.collect_lora(prefix + ".ffn_down", adapters);
}

Adam::Adam(std::vector<Var> params, Options options) : params_(std::move(params)), opt_(options) {
    for (const auto& p : params_) {
        m_.push_back(Matrix::Zero(p.rows(), p.cols()));
        v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

void Adam::step(double grad_scale) {
    ++t_;
    double clip = 1.0;
    if (opt_.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& p : params_) {
            if (p.grad().size()) sq += p.grad().squaredNorm();
        }
        const double norm = std::sqrt(sq) * grad_scale;
        if (norm > opt_.clip_norm) clip = opt_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Var& p = params_[i];
        if (p.grad().size() == 0) continue;
        const Matrix g = p.grad() * (grad_scale * clip);
        m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
        v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.cwiseProduct(g);
        p.mutable_value().array() -=
            opt_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opt_.eps);
    }
}

}  // namespace ttc::nn
