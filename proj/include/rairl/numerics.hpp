#pragma once

// Dense numeric substrate: row-major matrices, named parameter blocks, Adam,
// and a central-difference gradient oracle. Everything is float64.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rairl/error.hpp"
#include "rairl/rng.hpp"

namespace rairl {

using Vector = std::vector<double>;

class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    DenseMatrix(std::size_t rows, std::size_t cols, Vector data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw InvalidInput("DenseMatrix: data length does not match rows x cols");
        }
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
    }

    friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    Vector data_;
};

// y += A x
inline void gemv_add(const DenseMatrix& a, std::span<const double> x, std::span<double> y) noexcept {
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const auto row = a.row(r);
        double acc = 0.0;
        for (std::size_t c = 0; c < row.size(); ++c) {
            acc += row[c] * x[c];
        }
        y[r] += acc;
    }
}

// y += A^T x
inline void gemv_t_add(const DenseMatrix& a, std::span<const double> x, std::span<double> y) noexcept {
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double xr = x[r];
        if (xr == 0.0) {
            continue;
        }
        const auto row = a.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) {
            y[c] += row[c] * xr;
        }
    }
}

// A += x y^T
inline void ger_add(DenseMatrix& a, std::span<const double> x, std::span<const double> y) noexcept {
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double xr = x[r];
        if (xr == 0.0) {
            continue;
        }
        auto row = a.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) {
            row[c] += xr * y[c];
        }
    }
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) noexcept {
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] += alpha * x[i];
    }
}

inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

inline double l2_norm(std::span<const double> a) noexcept { return std::sqrt(dot(a, a)); }

/// Named parameter blocks with a stable flattening order (insertion order).
class ParameterSet {
public:
    std::size_t add(std::string name, DenseMatrix block) {
        if (find(name) != npos) {
            throw InvalidInput("ParameterSet: duplicate block name '" + name + "'");
        }
        names_.push_back(std::move(name));
        blocks_.push_back(std::move(block));
        return blocks_.size() - 1;
    }

    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    std::size_t find(std::string_view name) const noexcept {
        for (std::size_t i = 0; i < names_.size(); ++i) {
            if (names_[i] == name) {
                return i;
            }
        }
        return npos;
    }

    std::size_t block_count() const noexcept { return blocks_.size(); }
    const std::string& name(std::size_t i) const { return names_.at(i); }

    DenseMatrix& operator[](std::size_t i) noexcept { return blocks_[i]; }
    const DenseMatrix& operator[](std::size_t i) const noexcept { return blocks_[i]; }

    const DenseMatrix& block(std::string_view name) const {
        const auto i = find(name);
        if (i == npos) {
            throw InvalidInput("ParameterSet: no block named '" + std::string(name) + "'");
        }
        return blocks_[i];
    }
    DenseMatrix& block(std::string_view name) {
        return const_cast<DenseMatrix&>(std::as_const(*this).block(name));
    }

    std::size_t total_dim() const noexcept {
        std::size_t n = 0;
        for (const auto& b : blocks_) {
            n += b.size();
        }
        return n;
    }

    Vector flatten() const {
        Vector out;
        out.reserve(total_dim());
        for (const auto& b : blocks_) {
            out.insert(out.end(), b.data().begin(), b.data().end());
        }
        return out;
    }

    void unflatten(std::span<const double> flat) {
        if (flat.size() != total_dim()) {
            throw InvalidInput("ParameterSet::unflatten: expected " + std::to_string(total_dim()) +
                               " values, got " + std::to_string(flat.size()));
        }
        std::size_t off = 0;
        for (auto& b : blocks_) {
            auto d = b.data();
            std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), d.size(), d.begin());
            off += d.size();
        }
    }

    ParameterSet zeros_like() const {
        ParameterSet out;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            out.add(names_[i], DenseMatrix(blocks_[i].rows(), blocks_[i].cols()));
        }
        return out;
    }

    bool same_layout(const ParameterSet& other) const noexcept {
        if (other.blocks_.size() != blocks_.size()) {
            return false;
        }
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            if (names_[i] != other.names_[i] || blocks_[i].rows() != other.blocks_[i].rows() ||
                blocks_[i].cols() != other.blocks_[i].cols()) {
                return false;
            }
        }
        return true;
    }

    /// this += alpha * other
    void add_scaled(double alpha, const ParameterSet& other) {
        if (!same_layout(other)) {
            throw InvalidInput("ParameterSet::add_scaled: layout mismatch");
        }
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            axpy(alpha, other.blocks_[i].data(), blocks_[i].data());
        }
    }

    void scale(double alpha) noexcept {
        for (auto& b : blocks_) {
            for (double& x : b.data()) {
                x *= alpha;
            }
        }
    }

    double norm() const noexcept {
        double acc = 0.0;
        for (const auto& b : blocks_) {
            acc += dot(b.data(), b.data());
        }
        return std::sqrt(acc);
    }

    bool all_finite() const noexcept {
        return std::all_of(blocks_.begin(), blocks_.end(),
                           [](const DenseMatrix& b) { return b.all_finite(); });
    }

    friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

private:
    std::vector<std::string> names_;
    std::vector<DenseMatrix> blocks_;
};

inline void fill_uniform(DenseMatrix& m, Rng& rng, double lo, double hi) {
    for (double& x : m.data()) {
        x = rng.uniform(lo, hi);
    }
}

// ---------------------------------------------------------------------------
// Activations

inline double sigmoid(double x) noexcept {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double logit(double p) noexcept { return std::log(p) - std::log1p(-p); }

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) noexcept {
    if (x > 0.0) {
        return x + std::log1p(std::exp(-x));
    }
    return std::log1p(std::exp(x));
}

inline Vector log_softmax(std::span<const double> logits) {
    if (logits.empty()) {
        throw InvalidInput("log_softmax: empty input");
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double z : logits) {
        sum += std::exp(z - mx);
    }
    const double lse = mx + std::log(sum);
    Vector out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = logits[i] - lse;
    }
    return out;
}

inline Vector softmax(std::span<const double> logits) {
    if (logits.empty()) {
        throw InvalidInput("softmax: empty input");
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    Vector out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    for (double& p : out) {
        p /= sum;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    std::size_t step = 0;
    Vector first_moment;
    Vector second_moment;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double learning_rate = 1e-5;

    static AdamState for_parameters(const ParameterSet& params, double learning_rate = 1e-5) {
        if (!(learning_rate > 0.0)) {
            throw InvalidInput("AdamState: learning rate must be positive");
        }
        AdamState s;
        s.first_moment.assign(params.total_dim(), 0.0);
        s.second_moment.assign(params.total_dim(), 0.0);
        s.learning_rate = learning_rate;
        return s;
    }

    friend bool operator==(const AdamState&, const AdamState&) = default;
};

struct AdamResult {
    ParameterSet params;
    AdamState state;
};

/// One bias-corrected Adam update. Pure: inputs are taken by value and the
/// updated copies returned.
inline AdamResult adam_step(ParameterSet params, const ParameterSet& grads, AdamState state) {
    if (!params.same_layout(grads)) {
        throw InvalidInput("adam_step: gradient layout does not match parameters");
    }
    const std::size_t n = params.total_dim();
    if (state.first_moment.size() != n || state.second_moment.size() != n) {
        throw InvalidInput("adam_step: optimizer moments do not match parameter count");
    }
    if (!grads.all_finite()) {
        throw NumericalError("adam_step: non-finite gradient");
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(state.beta1, t);
    const double bc2 = 1.0 - std::pow(state.beta2, t);
    std::size_t k = 0;
    for (std::size_t b = 0; b < params.block_count(); ++b) {
        auto p = params[b].data();
        const auto g = grads[b].data();
        for (std::size_t i = 0; i < p.size(); ++i, ++k) {
            double& m = state.first_moment[k];
            double& v = state.second_moment[k];
            m = state.beta1 * m + (1.0 - state.beta1) * g[i];
            v = state.beta2 * v + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            p[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
    return {std::move(params), std::move(state)};
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central differences (L(p + h e_i) - L(p - h e_i)) / 2h for every coordinate.
template <class LossFn>
ParameterSet finite_difference_gradient(LossFn&& loss, const ParameterSet& params, double step = 1e-5) {
    if (!(step > 0.0)) {
        throw InvalidInput("finite_difference_gradient: step must be positive");
    }
    ParameterSet probe = params;
    ParameterSet grad = params.zeros_like();
    for (std::size_t b = 0; b < probe.block_count(); ++b) {
        auto p = probe[b].data();
        auto g = grad[b].data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double orig = p[i];
            p[i] = orig + step;
            const double up = loss(std::as_const(probe));
            p[i] = orig - step;
            const double down = loss(std::as_const(probe));
            p[i] = orig;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw NumericalError("finite_difference_gradient: non-finite loss at block '" +
                                     probe.name(b) + "'");
            }
            g[i] = (up - down) / (2.0 * step);
        }
    }
    return grad;
}

/// ||a - b|| / max(||a||, ||b||, floor): the comparison used by every gradient check.
inline double relative_error(const ParameterSet& a, const ParameterSet& b, double floor = 1e-10) {
    ParameterSet diff = a;
    diff.add_scaled(-1.0, b);
    return diff.norm() / std::max({a.norm(), b.norm(), floor});
}

}  // namespace rairl
