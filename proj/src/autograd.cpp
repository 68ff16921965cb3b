#include "ttc/autograd.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace ttc::ag {
namespace {

using Row = Eigen::RowVectorXd;

thread_local bool g_grad_enabled = true;

std::shared_ptr<Node> make_node(Matrix value, std::initializer_list<Var> inputs) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const auto& in : inputs) {
        if (in.requires_grad() && g_grad_enabled) n->requires_grad = true;
    }
    if (n->requires_grad) {
        for (const auto& in : inputs) n->inputs.push_back(in.ptr());
    }
    return n;
}

std::shared_ptr<Node> make_node(Matrix value, std::span<const Var> inputs) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const auto& in : inputs) {
        if (in.requires_grad() && g_grad_enabled) n->requires_grad = true;
    }
    if (n->requires_grad) {
        for (const auto& in : inputs) n->inputs.push_back(in.ptr());
    }
    return n;
}

void shape_check(bool ok, const char* op, const Var& a, const Var& b) {
    if (!ok) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()));
    }
}

void accumulate(Node& input, const Matrix& g) {
    if (input.requires_grad) input.grad_buffer() += g;
}

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Matrix& Node::grad_buffer() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) grad = Matrix::Zero(value.rows(), value.cols());
    return grad;
}

void Var::zero_grad() {
    if (node_) node_->grad = Matrix::Zero(node_->value.rows(), node_->value.cols());
}

Var constant(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(n);
}

Var parameter(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->grad = Matrix::Zero(n->value.rows(), n->value.cols());
    return Var(n);
}

void backward(const Var& out) {
    if (out.rows() != 1 || out.cols() != 1) throw std::invalid_argument("backward: output must be 1x1");
    if (!out.requires_grad()) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{out.node(), 0}};
    visited.insert(out.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // Interior nodes start from zero; leaves keep accumulating.
    for (Node* n : order) {
        if (n->backward) n->grad = Matrix::Zero(n->value.rows(), n->value.cols());
    }
    out.node()->grad_buffer()(0, 0) += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

Var matmul(const Var& a, const Var& b) {
    shape_check(a.cols() == b.rows(), "matmul", a, b);
    auto n = make_node(a.value() * b.value(), {a, b});
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            Node& x = *self.inputs[0];
            Node& y = *self.inputs[1];
            if (x.requires_grad) x.grad_buffer().noalias() += self.grad * y.value.transpose();
            if (y.requires_grad) y.grad_buffer().noalias() += x.value.transpose() * self.grad;
        };
    }
    return Var(n);
}

Var add(const Var& a, const Var& b) {
    shape_check(a.rows() == b.rows() && a.cols() == b.cols(), "add", a, b);
    auto n = make_node(a.value() + b.value(), {a, b});
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            accumulate(*self.inputs[0], self.grad);
            accumulate(*self.inputs[1], self.grad);
        };
    }
    return Var(n);
}

Var sub(const Var& a, const Var& b) {
    shape_check(a.rows() == b.rows() && a.cols() == b.cols(), "sub", a, b);
    auto n = make_node(a.value() - b.value(), {a, b});
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            accumulate(*self.inputs[0], self.grad);
            accumulate(*self.inputs[1], -self.grad);
        };
    }
    return Var(n);
}

Var mul(const Var& a, const Var& b) {
    shape_check(a.rows() == b.rows() && a.cols() == b.cols(), "mul", a, b);
    auto n = make_node(a.value().cwiseProduct(b.value()), {a, b});
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            Node& x = *self.inputs[0];
            Node& y = *self.inputs[1];
            if (x.requires_grad) x.grad_buffer() += self.grad.cwiseProduct(y.value);
            if (y.requires_grad) y.grad_buffer() += self.grad.cwiseProduct(x.value);
        };
    }
    return Var(n);
}

Var add_row(const Var& a, const Var& row) {
    shape_check(row.rows() == 1 && row.cols() == a.cols(), "add_row", a, row);
    Matrix v = a.value();
    v.rowwise() += row.value().row(0);
    auto n = make_node(std::move(v), {a, row});
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            accumulate(*self.inputs[0], self.grad);
            Node& r = *self.inputs[1];
            if (r.requires_grad) r.grad_buffer() += self.grad.colwise().sum();
        };
    }
    return Var(n);
}

Var scale(const Var& a, double s) {
    auto n = make_node(a.value() * s, {a});
    if (n->requires_grad) {
        n->backward = [s](Node& self) { accumulate(*self.inputs[0], self.grad * s); };
    }
    return Var(n);
}

Var add_constant(const Var& a, const Matrix& c) {
    if (a.rows() != c.rows() || a.cols() != c.cols()) throw std::invalid_argument("add_constant: shape mismatch");
    auto n = make_node(a.value() + c, {a});
    if (n->requires_grad) {
        n->backward = [](Node& self) { accumulate(*self.inputs[0], self.grad); };
    }
    return Var(n);
}

Var transpose(const Var& a) {
    auto n = make_node(a.value().transpose(), {a});
    if (n->requires_grad) {
        n->backward = [](Node& self) { accumulate(*self.inputs[0], self.grad.transpose()); };
    }
    return Var(n);
}

Var softmax_rows(const Var& a) {
    Matrix y(a.rows(), a.cols());
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        const double m = a.value().row(r).maxCoeff();
        if (m == kNegInf) {
            y.row(r).setZero();
            continue;
        }
        Row e = (a.value().row(r).array() - m).exp().matrix();
        y.row(r) = e / e.sum();
    }
    auto n = make_node(std::move(y), {a});
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            const Matrix& y = self.value;
            const Eigen::VectorXd dot = (self.grad.cwiseProduct(y)).rowwise().sum();
            Matrix g = y.cwiseProduct(self.grad.colwise() - dot);
            accumulate(*self.inputs[0], g);
        };
    }
    return Var(n);
}

Var gelu(const Var& a) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    const Matrix& x = a.value();
    Matrix y = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))); });
    auto n = make_node(std::move(y), {a});
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            const Matrix& x = self.inputs[0]->value;
            Matrix d = x.unaryExpr([](double v) {
                const double u = c * (v + 0.044715 * v * v * v);
                const double t = std::tanh(u);
                return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * v * v);
            });
            accumulate(*self.inputs[0], self.grad.cwiseProduct(d));
        };
    }
    return Var(n);
}

Var softplus(const Var& a) {
    Matrix y = a.value().unaryExpr([](double v) { return v > 30 ? v : std::log1p(std::exp(v)); });
    auto n = make_node(std::move(y), {a});
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            Matrix s = self.inputs[0]->value.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
            accumulate(*self.inputs[0], self.grad.cwiseProduct(s));
        };
    }
    return Var(n);
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Eigen::Index d = x.cols();
    if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
        throw std::invalid_argument("layer_norm_rows: gamma/beta must be 1x" + std::to_string(d));
    }
    const Matrix& xv = x.value();
    Matrix xhat(xv.rows(), d);
    Eigen::VectorXd inv_std(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
        const double mean = xv.row(r).mean();
        const double var = (xv.row(r).array() - mean).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
    }
    Matrix y = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    auto n = make_node(std::move(y), {x, gamma, beta});
    if (n->requires_grad) {
        n->backward = [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
            Node& xn = *self.inputs[0];
            Node& g = *self.inputs[1];
            Node& b = *self.inputs[2];
            if (g.requires_grad) g.grad_buffer() += self.grad.cwiseProduct(xhat).colwise().sum();
            if (b.requires_grad) b.grad_buffer() += self.grad.colwise().sum();
            if (xn.requires_grad) {
                Matrix dxhat = self.grad.array().rowwise() * g.value.row(0).array();
                const Eigen::VectorXd m1 = dxhat.rowwise().mean();
                const Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
                Matrix dx = ((dxhat.colwise() - m1) - (xhat.array().colwise() * m2.array()).matrix());
                dx = dx.array().colwise() * inv_std.array();
                xn.grad_buffer() += dx;
            }
        };
    }
    return Var(n);
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows out of range");
    auto n = make_node(a.value().middleRows(start, count), {a});
    if (n->requires_grad) {
        n->backward = [start, count](Node& self) {
            Node& in = *self.inputs[0];
            if (in.requires_grad) in.grad_buffer().middleRows(start, count) += self.grad;
        };
    }
    return Var(n);
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols out of range");
    auto n = make_node(a.value().middleCols(start, count), {a});
    if (n->requires_grad) {
        n->backward = [start, count](Node& self) {
            Node& in = *self.inputs[0];
            if (in.requires_grad) in.grad_buffer().middleCols(start, count) += self.grad;
        };
    }
    return Var(n);
}

Var hcat(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("hcat of nothing");
    Eigen::Index cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != parts[0].rows()) throw std::invalid_argument("hcat: row count mismatch");
        cols += p.cols();
    }
    Matrix v(parts[0].rows(), cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        v.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    auto n = make_node(std::move(v), parts);
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            Eigen::Index at = 0;
            for (auto& in : self.inputs) {
                const Eigen::Index c = in->value.cols();
                if (in->requires_grad) in->grad_buffer() += self.grad.middleCols(at, c);
                at += c;
            }
        };
    }
    return Var(n);
}

Var vcat(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("vcat of nothing");
    Eigen::Index rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != parts[0].cols()) throw std::invalid_argument("vcat: column count mismatch");
        rows += p.rows();
    }
    Matrix v(rows, parts[0].cols());
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        v.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    auto n = make_node(std::move(v), parts);
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            Eigen::Index at = 0;
            for (auto& in : self.inputs) {
                const Eigen::Index r = in->value.rows();
                if (in->requires_grad) in->grad_buffer() += self.grad.middleRows(at, r);
                at += r;
            }
        };
    }
    return Var(n);
}

Var gather_rows(const Var& table, std::span<const int> ids) {
    Matrix v(static_cast<Eigen::Index>(ids.size()), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table.rows()) throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]));
        v.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
    }
    auto n = make_node(std::move(v), {table});
    if (n->requires_grad) {
        n->backward = [ids = std::vector<int>(ids.begin(), ids.end())](Node& self) {
            Node& t = *self.inputs[0];
            Matrix& g = t.grad_buffer();
            for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += self.grad.row(static_cast<Eigen::Index>(i));
        };
    }
    return Var(n);
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
    if (rows * cols != a.rows() * a.cols()) throw std::invalid_argument("reshape: element count mismatch");
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const RowMajor src = a.value();
    const RowMajor dst = Eigen::Map<const RowMajor>(src.data(), rows, cols);
    auto n = make_node(Matrix(dst), {a});
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            Node& in = *self.inputs[0];
            const RowMajor g = self.grad;
            const RowMajor back = Eigen::Map<const RowMajor>(g.data(), in.value.rows(), in.value.cols());
            accumulate(in, Matrix(back));
        };
    }
    return Var(n);
}

Var mean_of(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("mean_of nothing");
    Matrix v = Matrix::Zero(parts[0].rows(), parts[0].cols());
    for (const auto& p : parts) {
        if (p.rows() != v.rows() || p.cols() != v.cols()) throw std::invalid_argument("mean_of: shape mismatch");
        v += p.value();
    }
    const double inv = 1.0 / static_cast<double>(parts.size());
    v *= inv;
    auto n = make_node(std::move(v), parts);
    if (n->requires_grad) {
        n->backward = [inv](Node& self) {
            for (auto& in : self.inputs) accumulate(*in, self.grad * inv);
        };
    }
    return Var(n);
}

Var sum_all(const Var& a) {
    Matrix v(1, 1);
    v(0, 0) = a.value().sum();
    auto n = make_node(std::move(v), {a});
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            Node& in = *self.inputs[0];
            accumulate(in, Matrix::Constant(in.value.rows(), in.value.cols(), self.grad(0, 0)));
        };
    }
    return Var(n);
}

Var mse(const Var& pred, const Matrix& target) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw std::invalid_argument("mse: shape mismatch");
    const Matrix diff = pred.value() - target;
    const double count = static_cast<double>(diff.size());
    Matrix v(1, 1);
    v(0, 0) = diff.squaredNorm() / count;
    auto n = make_node(std::move(v), {pred});
    if (n->requires_grad) {
        n->backward = [diff, count](Node& self) { accumulate(*self.inputs[0], diff * (2.0 * self.grad(0, 0) / count)); };
    }
    return Var(n);
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
    if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) throw std::invalid_argument("cross_entropy: label count");
    const Matrix& z = logits.value();
    Matrix probs = Matrix::Zero(z.rows(), z.cols());
    double total = 0.0;
    std::size_t count = 0;
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const int label = labels[static_cast<std::size_t>(r)];
        if (label < 0) continue;
        if (label >= z.cols()) throw std::out_of_range("cross_entropy: label " + std::to_string(label));
        const double m = z.row(r).maxCoeff();
        Row e = (z.row(r).array() - m).exp().matrix();
        const double s = e.sum();
        total += std::log(s) + m - z(r, label);
        probs.row(r) = e / s;
        probs(r, label) -= 1.0;
        ++count;
    }
    Matrix v(1, 1);
    v(0, 0) = count ? total / static_cast<double>(count) : 0.0;
    auto n = make_node(std::move(v), {logits});
    if (n->requires_grad && count > 0) {
        n->backward = [g = std::move(probs), count](Node& self) {
            accumulate(*self.inputs[0], g * (self.grad(0, 0) / static_cast<double>(count)));
        };
    }
    return Var(n);
}

Var attention(const Var& q, const Var& k, const Var& v, std::span<const std::uint8_t> key_mask, bool causal) {
    const Eigen::Index tq = q.rows();
    const Eigen::Index tk = k.rows();
    if (q.cols() != k.cols() || v.rows() != tk || static_cast<Eigen::Index>(key_mask.size()) != tk) {
        throw std::invalid_argument("attention: shape mismatch");
    }
    if (causal && tq != tk) throw std::invalid_argument("attention: causal requires square scores");
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Matrix s = (q.value() * k.value().transpose()) * inv_sqrt;
    Matrix p = Matrix::Zero(tq, tk);
    for (Eigen::Index i = 0; i < tq; ++i) {
        double m = kNegInf;
        const Eigen::Index limit = causal ? i + 1 : tk;
        for (Eigen::Index j = 0; j < limit; ++j) {
            if (key_mask[static_cast<std::size_t>(j)]) m = std::max(m, s(i, j));
        }
        if (m == kNegInf) continue;
        double sum = 0.0;
        for (Eigen::Index j = 0; j < limit; ++j) {
            if (key_mask[static_cast<std::size_t>(j)]) {
                p(i, j) = std::exp(s(i, j) - m);
                sum += p(i, j);
            }
        }
        p.row(i) /= sum;
    }
    auto n = make_node(p * v.value(), {q, k, v});
    if (n->requires_grad) {
        n->backward = [p = std::move(p), inv_sqrt](Node& self) {
            Node& qn = *self.inputs[0];
            Node& kn = *self.inputs[1];
            Node& vn = *self.inputs[2];
            if (vn.requires_grad) vn.grad_buffer().noalias() += p.transpose() * self.grad;
            if (!qn.requires_grad && !kn.requires_grad) return;
            const Matrix dp = self.grad * vn.value.transpose();
            const Eigen::VectorXd dot = dp.cwiseProduct(p).rowwise().sum();
            const Matrix ds = (p.cwiseProduct(dp.colwise() - dot)) * inv_sqrt;
            if (qn.requires_grad) qn.grad_buffer().noalias() += ds * kn.value;
            if (kn.requires_grad) kn.grad_buffer().noalias() += ds.transpose() * qn.value;
        };
    }
    return Var(n);
}

}  // namespace ttc::ag
