// Independent reference implementations shared by the unit tests and the
// acceptance binary. Deliberately naive.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ttc/autograd.hpp"
#include "ttc/nn.hpp"
#include "ttc/stemmer.hpp"
#include "ttc/util.hpp"

namespace ttc::oracle {

struct GradCheck {
    double max_rel_error = 0.0;
    std::string worst;
    double worst_analytic = 0.0, worst_numeric = 0.0;
    std::size_t checked = 0;
};

/// Central differences against the analytic gradient of every entry of
/// every parameter. `loss` must rebuild the graph on each call.
inline GradCheck check_gradients(const nn::ParameterList& params, const std::function<ag::Var()>& loss,
                                 double eps = 1e-5, double floor = 1e-7) {
    for (auto p : params.items()) p.var.zero_grad();
    ag::backward(loss());
    GradCheck out;
    for (auto p : params.items()) {
        ag::Matrix& w = p.var.mutable_value();
        const ag::Matrix analytic = p.var.grad();
        for (Eigen::Index i = 0; i < w.size(); ++i) {
            const double keep = w.data()[i];
            w.data()[i] = keep + eps;
            const double up = loss().scalar();
            w.data()[i] = keep - eps;
            const double down = loss().scalar();
            w.data()[i] = keep;
            const double numeric = (up - down) / (2 * eps);
            const double a = analytic.data()[i];
            const double rel = std::abs(a - numeric) / std::max(floor, std::abs(a) + std::abs(numeric));
            ++out.checked;
            if (rel > out.max_rel_error) {
                out.max_rel_error = rel;
                out.worst = p.name + "[" + std::to_string(i) + "]";
                out.worst_analytic = a;
                out.worst_numeric = numeric;
            }
        }
    }
    return out;
}

inline std::map<std::vector<std::string>, int> ngram_counts(const std::vector<std::string>& t, int n) {
    std::map<std::vector<std::string>, int> c;
    for (std::size_t i = 0; i + n <= t.size(); ++i) ++c[std::vector<std::string>(t.begin() + i, t.begin() + i + n)];
    return c;
}

struct Prf {
    double p = 0, r = 0, f = 0;
};

inline Prf prf(double overlap, double cand, double ref) {
    Prf o;
    o.p = cand > 0 ? overlap / cand : 0.0;
    o.r = ref > 0 ? overlap / ref : 0.0;
    o.f = o.p + o.r > 0 ? 2 * o.p * o.r / (o.p + o.r) : 0.0;
    return o;
}

/// Clipped n-gram overlap, enumerated by brute force over candidate n-grams.
inline Prf rouge_n(const std::vector<std::string>& ref, const std::vector<std::string>& cand, int n) {
    const auto rc = ngram_counts(ref, n);
    const auto cc = ngram_counts(cand, n);
    double overlap = 0, total_c = 0, total_r = 0;
    for (const auto& [g, c] : cc) {
        total_c += c;
        const auto it = rc.find(g);
        if (it != rc.end()) overlap += std::min(c, it->second);
    }
    for (const auto& kv : rc) total_r += kv.second;
    return prf(overlap, total_c, total_r);
}

inline std::size_t lcs(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
    for (std::size_t i = 1; i <= a.size(); ++i)
        for (std::size_t j = 1; j <= b.size(); ++j)
            d[i][j] = a[i - 1] == b[j - 1] ? d[i - 1][j - 1] + 1 : std::max(d[i - 1][j], d[i][j - 1]);
    return d[a.size()][b.size()];
}

inline Prf rouge_l(const std::vector<std::string>& ref, const std::vector<std::string>& cand) {
    return prf(double(lcs(ref, cand)), double(cand.size()), double(ref.size()));
}

inline std::vector<std::string> random_words(Rng& rng, std::size_t max_len, std::size_t vocab) {
    std::vector<std::string> w(rng.index(max_len + 1));
    for (auto& s : w) s = std::string(1, char('a' + rng.index(vocab)));
    return w;
}

inline std::string join(const std::vector<std::string>& w) {
    std::string s;
    for (const auto& x : w) s += (s.empty() ? "" : " ") + x;
    return s;
}

/// Second METEOR implementation: exact-then-stem alignment by explicit
/// scanning, chunks counted as breaks in the aligned reference positions.
inline double meteor_oracle(const std::vector<std::string>& ref, const std::vector<std::string>& cand) {
    std::vector<long> align(cand.size(), -1);
    std::vector<char> taken(ref.size(), 0);
    for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t i = 0; i < cand.size(); ++i) {
            if (align[i] != -1) continue;
            for (std::size_t j = 0; j < ref.size(); ++j) {
                const bool eq = pass == 0 ? cand[i] == ref[j] : porter_stem(cand[i]) == porter_stem(ref[j]);
                if (!taken[j] && eq) {
                    align[i] = long(j);
                    taken[j] = 1;
                    break;
                }
            }
        }
    }
    double m = 0, chunks = 0;
    for (std::size_t i = 0; i < cand.size(); ++i) {
        if (align[i] < 0) continue;
        m += 1;
        const bool continues = i > 0 && align[i - 1] >= 0 && align[i] == align[i - 1] + 1;
        if (!continues) chunks += 1;
    }
    if (m == 0) return 0.0;
    const double p = m / double(cand.size()), r = m / double(ref.size());
    const double f = p * r / (0.9 * p + 0.1 * r);
    return f * (1.0 - 0.5 * std::pow(chunks / m, 3));
}

}  // namespace ttc::oracle
