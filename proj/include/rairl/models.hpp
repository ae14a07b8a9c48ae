#pragma once

// The two players. Both are single-layer tanh RNNs conditioned on the context
// feature at t = 0. The discriminator adds a reward head g(w, s, s'), a
// shaping head h(s), and a sentence-level head used only by the GAN baseline.

#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "rairl/envworld.hpp"
#include "rairl/error.hpp"
#include "rairl/numerics.hpp"
#include "rairl/rng.hpp"

namespace rairl {

struct ModelShape {
    std::size_t vocab = 0;
    std::size_t embedding = 16;
    std::size_t hidden = 32;
    std::size_t context = 8;
    TokenId bos{};
    TokenId eos{};

    friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

inline ModelShape shape_for(const GrammarWorld& world, std::size_t embedding = 16, std::size_t hidden = 32) {
    return {world.vocab().size(), embedding, hidden, world.context_dim(), world.vocab().bos(),
            world.vocab().eos()};
}

inline constexpr double init_range = 0.08;

struct RecurrentState {
    Vector vector;
    std::size_t step = 0;

    friend bool operator==(const RecurrentState&, const RecurrentState&) = default;
};

namespace detail {

inline void tanh_inplace(std::span<double> v) noexcept {
    for (double& x : v) {
        x = std::tanh(x);
    }
}

// ds (in) -> ds * (1 - s^2)
inline Vector tanh_backward(std::span<const double> ds, std::span<const double> s) {
    Vector out(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out[i] = ds[i] * (1.0 - s[i] * s[i]);
    }
    return out;
}

inline void check_context_dim(std::span<const double> ctx, std::size_t expected) {
    if (ctx.size() != expected) {
        throw InvalidInput("context feature has dimension " + std::to_string(ctx.size()) + ", expected " +
                           std::to_string(expected));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Generator

/// Teacher-forced forward pass. states[0] is the context-initialised state;
/// states[t + 1] is the state that produced log_probs[t] for tokens[t].
struct PolicyTrace {
    Vector context;
    TokenSeq tokens;
    TokenSeq inputs;  // BOS, tokens[0], ..., tokens[n - 2]
    std::vector<Vector> states;
    std::vector<Vector> log_probs;

    std::size_t length() const noexcept { return tokens.size(); }
    double token_log_prob(std::size_t t) const { return log_probs[t][to_index(tokens[t])]; }
    double total_log_prob() const {
        double s = 0.0;
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            s += token_log_prob(t);
        }
        return s;
    }
};

class PolicyNet {
public:
    enum Block : std::size_t { embed, ctx_w, ctx_b, in_w, rec_w, rec_b, out_w, out_b };

    PolicyNet(ModelShape shape, ParameterSet params) : shape_(shape), params_(std::move(params)) {
        if (!params_.same_layout(layout(shape_))) {
            throw InvalidInput("PolicyNet: parameter layout does not match shape");
        }
        if (!params_.all_finite()) {
            throw InvalidInput("PolicyNet: parameters must be finite");
        }
    }

    static ParameterSet layout(const ModelShape& s) {
        ParameterSet p;
        p.add("policy.embed", DenseMatrix(s.vocab, s.embedding));
        p.add("policy.ctx_w", DenseMatrix(s.hidden, s.context));
        p.add("policy.ctx_b", DenseMatrix(s.hidden, 1));
        p.add("policy.in_w", DenseMatrix(s.hidden, s.embedding));
        p.add("policy.rec_w", DenseMatrix(s.hidden, s.hidden));
        p.add("policy.rec_b", DenseMatrix(s.hidden, 1));
        p.add("policy.out_w", DenseMatrix(s.vocab, s.hidden));
        p.add("policy.out_b", DenseMatrix(s.vocab, 1));
        return p;
    }

    static PolicyNet zeros(ModelShape shape) { return PolicyNet(shape, layout(shape)); }

    /// Weights uniform in [-0.08, 0.08], biases zero. `embeddings`, when given,
    /// seeds the token embedding matrix.
    static PolicyNet random(ModelShape shape, Rng& rng, const DenseMatrix* embeddings = nullptr) {
        ParameterSet p = layout(shape);
        for (Block b : {embed, ctx_w, in_w, rec_w, out_w}) {
            fill_uniform(p[b], rng, -init_range, init_range);
        }
        if (embeddings != nullptr) {
            if (embeddings->rows() != shape.vocab || embeddings->cols() != shape.embedding) {
                throw InvalidInput("PolicyNet: initial embeddings have the wrong shape");
            }
            p[embed] = *embeddings;
        }
        return PolicyNet(shape, std::move(p));
    }

    const ModelShape& shape() const noexcept { return shape_; }
    const ParameterSet& params() const noexcept { return params_; }
    ParameterSet& params() noexcept { return params_; }

    void set_params(ParameterSet p) {
        if (!p.same_layout(params_)) {
            throw InvalidInput("PolicyNet::set_params: layout mismatch");
        }
        params_ = std::move(p);
    }

    RecurrentState init_state(std::span<const double> context) const {
        detail::check_context_dim(context, shape_.context);
        Vector s(params_[ctx_b].data().begin(), params_[ctx_b].data().end());
        gemv_add(params_[ctx_w], context, s);
        detail::tanh_inplace(s);
        return {std::move(s), 0};
    }

    struct StepOutput {
        RecurrentState next;
        Vector logits;
    };

    StepOutput step(const RecurrentState& state, TokenId prev) const {
        if (to_index(prev) >= shape_.vocab) {
            throw InvalidInput("PolicyNet::step: token id out of range");
        }
        if (state.vector.size() != shape_.hidden) {
            throw InvalidInput("PolicyNet::step: state dimension mismatch");
        }
        Vector s(params_[rec_b].data().begin(), params_[rec_b].data().end());
        gemv_add(params_[in_w], params_[embed].row(to_index(prev)), s);
        gemv_add(params_[rec_w], state.vector, s);
        detail::tanh_inplace(s);
        Vector logits(params_[out_b].data().begin(), params_[out_b].data().end());
        gemv_add(params_[out_w], s, logits);
        return {{std::move(s), state.step + 1}, std::move(logits)};
    }

    PolicyTrace trace(std::span<const double> context, std::span<const TokenId> tokens) const {
        PolicyTrace tr;
        tr.context.assign(context.begin(), context.end());
        tr.tokens.assign(tokens.begin(), tokens.end());
        RecurrentState s = init_state(context);
        tr.states.push_back(s.vector);
        TokenId prev = shape_.bos;
        for (TokenId w : tokens) {
            if (to_index(w) >= shape_.vocab) {
                throw InvalidInput("PolicyNet::trace: token id out of range");
            }
            auto out = step(s, prev);
            tr.inputs.push_back(prev);
            tr.log_probs.push_back(log_softmax(out.logits));
            tr.states.push_back(out.next.vector);
            s = std::move(out.next);
            prev = w;
        }
        return tr;
    }

    /// Accumulates dL/dparams into `grad` given dL/dlogits at every step.
    void backward(const PolicyTrace& tr, std::span<const Vector> dlogits, ParameterSet& grad) const {
        const std::size_t n = tr.length();
        Vector carry(shape_.hidden, 0.0);
        for (std::size_t k = n; k-- > 0;) {
            const auto& s = tr.states[k + 1];
            const auto& dl = dlogits[k];
            ger_add(grad[out_w], dl, s);
            axpy(1.0, dl, grad[out_b].data());
            gemv_t_add(params_[out_w], dl, carry);
            const Vector da = detail::tanh_backward(carry, s);
            const auto x = params_[embed].row(to_index(tr.inputs[k]));
            ger_add(grad[in_w], da, x);
            gemv_t_add(params_[in_w], da, grad[embed].row(to_index(tr.inputs[k])));
            ger_add(grad[rec_w], da, tr.states[k]);
            axpy(1.0, da, grad[rec_b].data());
            std::fill(carry.begin(), carry.end(), 0.0);
            gemv_t_add(params_[rec_w], da, carry);
        }
        const Vector da0 = detail::tanh_backward(carry, tr.states[0]);
        ger_add(grad[ctx_w], da0, tr.context);
        axpy(1.0, da0, grad[ctx_b].data());
    }

private:
    ModelShape shape_;
    ParameterSet params_;
};

inline RecurrentState policy_init_state(const PolicyNet& policy, std::span<const double> context) {
    return policy.init_state(context);
}

inline PolicyNet::StepOutput policy_step(const PolicyNet& policy, const RecurrentState& state, TokenId prev) {
    return policy.step(state, prev);
}

/// Teacher-forced log pi(w_t | prefix) along a given sequence.
inline Vector sequence_log_probs(const PolicyNet& policy, std::span<const double> context,
                                 std::span<const TokenId> tokens) {
    const auto tr = policy.trace(context, tokens);
    Vector out(tr.length());
    for (std::size_t t = 0; t < out.size(); ++t) {
        out[t] = tr.token_log_prob(t);
    }
    return out;
}

struct SampledSequence {
    SequenceSample sample;
    PolicyTrace trace;

    Vector log_probs() const {
        Vector out(trace.length());
        for (std::size_t t = 0; t < out.size(); ++t) {
            out[t] = trace.token_log_prob(t);
        }
        return out;
    }
};

/// Ancestral sampling after an optional fixed prefix. Stops at EOS; if
/// max_len tokens are reached without one, the last token is forced to EOS
/// (its log-probability is still the model's).
inline SampledSequence sample_sequence(const PolicyNet& policy, const Context& context, Rng& rng,
                                       std::size_t max_len, std::span<const TokenId> prefix = {}) {
    if (max_len < 1) {
        throw InvalidInput("sample_sequence: max_len must be at least 1");
    }
    const auto& shape = policy.shape();
    SampledSequence out;
    out.sample.context = context.id;
    out.sample.source = SampleSource::generated;
    auto& tr = out.trace;
    tr.context = context.feature;
    RecurrentState s = policy.init_state(context.feature);
    tr.states.push_back(s.vector);
    TokenId prev = shape.bos;
    while (true) {
        const std::size_t t = tr.tokens.size();
        auto step = policy.step(s, prev);
        Vector lp = log_softmax(step.logits);
        TokenId w{};
        if (t < prefix.size()) {
            w = prefix[t];
        } else if (t + 1 >= max_len) {
            w = shape.eos;
        } else {
            Vector probs(lp.size());
            for (std::size_t i = 0; i < lp.size(); ++i) {
                probs[i] = std::exp(lp[i]);
            }
            w = token_id(rng.categorical(probs));
        }
        tr.inputs.push_back(prev);
        tr.log_probs.push_back(std::move(lp));
        tr.states.push_back(step.next.vector);
        tr.tokens.push_back(w);
        s = std::move(step.next);
        prev = w;
        if (w == shape.eos) {
            break;
        }
    }
    out.sample.tokens = tr.tokens;
    return out;
}

// ---------------------------------------------------------------------------
// Discriminator

/// states[0] is the context state, states[t + 1] follows tokens[t]. The
/// reward for tokens[t] uses (states[t], states[t + 1]).
struct DiscriminatorTrace {
    Vector context;
    TokenSeq tokens;
    std::vector<Vector> states;
    std::vector<Vector> g_hidden;
    Vector g;  // n
    Vector h;  // n + 1
    Vector f;  // n
    double sentence_logit = 0.0;

    std::size_t length() const noexcept { return tokens.size(); }
    double sum_f() const {
        double s = 0.0;
        for (double x : f) {
            s += x;
        }
        return s;
    }
    double sum_g() const {
        double s = 0.0;
        for (double x : g) {
            s += x;
        }
        return s;
    }
};

class DiscriminatorNet {
public:
    enum Block : std::size_t {
        embed,
        ctx_w,
        ctx_b,
        in_w,
        rec_w,
        rec_b,
        g_tok,
        g_cur,
        g_next,
        g_bias,
        g_out,
        g_out_b,
        h_w,
        h_b,
        sent_w,
        sent_b
    };

    DiscriminatorNet(ModelShape shape, ParameterSet params, double gamma = 1.0)
        : shape_(shape), params_(std::move(params)), gamma_(gamma) {
        if (!(gamma_ > 0.0 && gamma_ <= 1.0)) {
            throw InvalidInput("DiscriminatorNet: gamma must lie in (0, 1]");
        }
        if (!params_.same_layout(layout(shape_))) {
            throw InvalidInput("DiscriminatorNet: parameter layout does not match shape");
        }
        if (!params_.all_finite()) {
            throw InvalidInput("DiscriminatorNet: parameters must be finite");
        }
    }

    static ParameterSet layout(const ModelShape& s) {
        const std::size_t k = s.hidden;
        ParameterSet p;
        p.add("disc.embed", DenseMatrix(s.vocab, s.embedding));
        p.add("disc.ctx_w", DenseMatrix(s.hidden, s.context));
        p.add("disc.ctx_b", DenseMatrix(s.hidden, 1));
        p.add("disc.in_w", DenseMatrix(s.hidden, s.embedding));
        p.add("disc.rec_w", DenseMatrix(s.hidden, s.hidden));
        p.add("disc.rec_b", DenseMatrix(s.hidden, 1));
        p.add("disc.g_tok", DenseMatrix(k, s.embedding));
        p.add("disc.g_cur", DenseMatrix(k, s.hidden));
        p.add("disc.g_next", DenseMatrix(k, s.hidden));
        p.add("disc.g_bias", DenseMatrix(k, 1));
        p.add("disc.g_out", DenseMatrix(1, k));
        p.add("disc.g_out_b", DenseMatrix(1, 1));
        p.add("disc.h_w", DenseMatrix(1, s.hidden));
        p.add("disc.h_b", DenseMatrix(1, 1));
        p.add("disc.sent_w", DenseMatrix(1, s.hidden));
        p.add("disc.sent_b", DenseMatrix(1, 1));
        return p;
    }

    static DiscriminatorNet zeros(ModelShape shape, double gamma = 1.0) {
        return DiscriminatorNet(shape, layout(shape), gamma);
    }

    static DiscriminatorNet random(ModelShape shape, Rng& rng, double gamma = 1.0,
                                   const DenseMatrix* embeddings = nullptr) {
        ParameterSet p = layout(shape);
        for (Block b : {embed, ctx_w, in_w, rec_w, g_tok, g_cur, g_next, g_out, h_w, sent_w}) {
            fill_uniform(p[b], rng, -init_range, init_range);
        }
        if (embeddings != nullptr) {
            if (embeddings->rows() != shape.vocab || embeddings->cols() != shape.embedding) {
                throw InvalidInput("DiscriminatorNet: initial embeddings have the wrong shape");
            }
            p[embed] = *embeddings;
        }
        return DiscriminatorNet(shape, std::move(p), gamma);
    }

    const ModelShape& shape() const noexcept { return shape_; }
    const ParameterSet& params() const noexcept { return params_; }
    ParameterSet& params() noexcept { return params_; }
    double gamma() const noexcept { return gamma_; }

    void set_params(ParameterSet p) {
        if (!p.same_layout(params_)) {
            throw InvalidInput("DiscriminatorNet::set_params: layout mismatch");
        }
        params_ = std::move(p);
    }

    RecurrentState init_state(std::span<const double> context) const {
        detail::check_context_dim(context, shape_.context);
        Vector s(params_[ctx_b].data().begin(), params_[ctx_b].data().end());
        gemv_add(params_[ctx_w], context, s);
        detail::tanh_inplace(s);
        return {std::move(s), 0};
    }

    RecurrentState advance(const RecurrentState& state, TokenId token) const {
        if (to_index(token) >= shape_.vocab) {
            throw InvalidInput("DiscriminatorNet: token id out of range");
        }
        Vector s(params_[rec_b].data().begin(), params_[rec_b].data().end());
        gemv_add(params_[in_w], params_[embed].row(to_index(token)), s);
        gemv_add(params_[rec_w], state.vector, s);
        detail::tanh_inplace(s);
        return {std::move(s), state.step + 1};
    }

    /// Shaping head h(s) = tanh(w . s + b), bounded in (-1, 1).
    double shaping(std::span<const double> s) const {
        return std::tanh(dot(params_[h_w].row(0), s) + params_[h_b](0, 0));
    }

    /// Reward head g(w, s, s') = v . tanh(A e_w + B s + C s' + b) + c.
    double reward(TokenId token, std::span<const double> s, std::span<const double> s_next,
                  Vector* hidden = nullptr) const {
        Vector a(params_[g_bias].data().begin(), params_[g_bias].data().end());
        gemv_add(params_[g_tok], params_[embed].row(to_index(token)), a);
        gemv_add(params_[g_cur], s, a);
        gemv_add(params_[g_next], s_next, a);
        detail::tanh_inplace(a);
        const double out = dot(params_[g_out].row(0), a) + params_[g_out_b](0, 0);
        if (hidden != nullptr) {
            *hidden = std::move(a);
        }
        return out;
    }

    double sentence_logit(std::span<const double> final_state) const {
        return dot(params_[sent_w].row(0), final_state) + params_[sent_b](0, 0);
    }

    DiscriminatorTrace encode(std::span<const double> context, std::span<const TokenId> tokens) const {
        DiscriminatorTrace tr;
        tr.context.assign(context.begin(), context.end());
        tr.tokens.assign(tokens.begin(), tokens.end());
        RecurrentState s = init_state(context);
        tr.states.push_back(s.vector);
        for (TokenId w : tokens) {
            s = advance(s, w);
            tr.states.push_back(s.vector);
        }
        const std::size_t n = tokens.size();
        tr.h.resize(n + 1);
        for (std::size_t i = 0; i <= n; ++i) {
            tr.h[i] = shaping(tr.states[i]);
        }
        tr.g.resize(n);
        tr.f.resize(n);
        tr.g_hidden.resize(n);
        for (std::size_t t = 0; t < n; ++t) {
            tr.g[t] = reward(tokens[t], tr.states[t], tr.states[t + 1], &tr.g_hidden[t]);
            tr.f[t] = tr.g[t] + gamma_ * tr.h[t + 1] - tr.h[t];
        }
        tr.sentence_logit = sentence_logit(tr.states[n]);
        return tr;
    }

    /// Accumulates dL/dparams given dL/df_t and dL/d(sentence logit).
    void backward(const DiscriminatorTrace& tr, std::span<const double> df, double d_sentence,
                  ParameterSet& grad) const {
        const std::size_t n = tr.length();
        const std::size_t hid = shape_.hidden;
        std::vector<Vector> ds(n + 1, Vector(hid, 0.0));
        Vector dh(n + 1, 0.0);
        for (std::size_t t = 0; t < n; ++t) {
            const double dg = df[t];
            dh[t + 1] += gamma_ * dg;
            dh[t] -= dg;
            if (dg == 0.0) {
                continue;
            }
            const auto& a = tr.g_hidden[t];
            axpy(dg, a, grad[g_out].row(0));
            grad[g_out_b](0, 0) += dg;
            Vector da(a.size());
            const auto v = params_[g_out].row(0);
            for (std::size_t i = 0; i < a.size(); ++i) {
                da[i] = dg * v[i] * (1.0 - a[i] * a[i]);
            }
            const auto tok = to_index(tr.tokens[t]);
            ger_add(grad[g_tok], da, params_[embed].row(tok));
            gemv_t_add(params_[g_tok], da, grad[embed].row(tok));
            ger_add(grad[g_cur], da, tr.states[t]);
            gemv_t_add(params_[g_cur], da, ds[t]);
            ger_add(grad[g_next], da, tr.states[t + 1]);
            gemv_t_add(params_[g_next], da, ds[t + 1]);
            axpy(1.0, da, grad[g_bias].data());
        }
        for (std::size_t i = 0; i <= n; ++i) {
            if (dh[i] == 0.0) {
                continue;
            }
            const double dz = dh[i] * (1.0 - tr.h[i] * tr.h[i]);
            axpy(dz, tr.states[i], grad[h_w].row(0));
            grad[h_b](0, 0) += dz;
            axpy(dz, params_[h_w].row(0), ds[i]);
        }
        if (d_sentence != 0.0) {
            axpy(d_sentence, tr.states[n], grad[sent_w].row(0));
            grad[sent_b](0, 0) += d_sentence;
            axpy(d_sentence, params_[sent_w].row(0), ds[n]);
        }
        Vector carry(hid, 0.0);
        for (std::size_t t = n; t-- > 0;) {
            Vector total = ds[t + 1];
            axpy(1.0, carry, total);
            const Vector du = detail::tanh_backward(total, tr.states[t + 1]);
            const auto tok = to_index(tr.tokens[t]);
            ger_add(grad[in_w], du, params_[embed].row(tok));
            gemv_t_add(params_[in_w], du, grad[embed].row(tok));
            ger_add(grad[rec_w], du, tr.states[t]);
            axpy(1.0, du, grad[rec_b].data());
            std::fill(carry.begin(), carry.end(), 0.0);
            gemv_t_add(params_[rec_w], du, carry);
        }
        Vector total0 = ds[0];
        axpy(1.0, carry, total0);
        const Vector du0 = detail::tanh_backward(total0, tr.states[0]);
        ger_add(grad[ctx_w], du0, tr.context);
        axpy(1.0, du0, grad[ctx_b].data());
    }

private:
    ModelShape shape_;
    ParameterSet params_;
    double gamma_ = 1.0;
};

inline std::vector<RecurrentState> discriminator_encode(const DiscriminatorNet& disc, std::span<const double> context,
                                                        std::span<const TokenId> tokens) {
    std::vector<RecurrentState> out;
    out.push_back(disc.init_state(context));
    for (TokenId w : tokens) {
        out.push_back(disc.advance(out.back(), w));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reward algebra

struct RewardValue {
    double g = 0.0;
    double f = 0.0;
};

/// f = g + gamma h(s') - h(s).
inline double shaped_reward(double g, double h_cur, double h_next, double gamma) noexcept {
    return g + gamma * h_next - h_cur;
}

inline RewardValue reward_f(const DiscriminatorNet& disc, TokenId token, const RecurrentState& s,
                            const RecurrentState& s_next) {
    const double g = disc.reward(token, s.vector, s_next.vector);
    return {g, shaped_reward(g, disc.shaping(s.vector), disc.shaping(s_next.vector), disc.gamma())};
}

/// p(w, s) = exp(f).
inline double estimated_density(double f) noexcept { return std::exp(f); }

/// D = sigmoid(f - log pi) = exp(f) / (exp(f) + pi).
inline double decision_boundary(double f, double log_pi) noexcept { return sigmoid(f - log_pi); }

struct RewardBreakdownEntry {
    TokenId token{};
    double g = 0.0;
    double h_cur = 0.0;
    double h_next = 0.0;
    double f = 0.0;
    double log_pi = 0.0;
    double d = 0.0;
};

struct RewardBreakdown {
    std::vector<RewardBreakdownEntry> positions;
    double sum_f = 0.0;
    double sum_g = 0.0;
    double sum_d_logit = 0.0;  // sum of f - log pi
};

inline RewardBreakdown reward_breakdown(const DiscriminatorNet& disc, const PolicyNet& policy,
                                        std::span<const double> context, std::span<const TokenId> tokens) {
    const auto dt = disc.encode(context, tokens);
    const auto pt = policy.trace(context, tokens);
    RewardBreakdown rb;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        RewardBreakdownEntry e;
        e.token = tokens[t];
        e.g = dt.g[t];
        e.h_cur = dt.h[t];
        e.h_next = dt.h[t + 1];
        e.f = dt.f[t];
        e.log_pi = pt.token_log_prob(t);
        e.d = decision_boundary(e.f, e.log_pi);
        rb.sum_f += e.f;
        rb.sum_g += e.g;
        rb.sum_d_logit += e.f - e.log_pi;
        rb.positions.push_back(e);
    }
    return rb;
}

}  // namespace rairl
