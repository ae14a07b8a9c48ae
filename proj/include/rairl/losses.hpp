#pragma once

// Losses for both players. Generator gradients are score-function gradients:
// every coefficient (f - log pi, r, D_gen) is computed first and then held
// fixed while log pi is differentiated.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rairl/envworld.hpp"
#include "rairl/error.hpp"
#include "rairl/models.hpp"
#include "rairl/numerics.hpp"

namespace rairl {

enum class LossKind { mle, rl, gan, airl, rairl };

inline std::string_view to_string(LossKind k) noexcept {
    switch (k) {
        case LossKind::mle: return "mle";
        case LossKind::rl: return "rl";
        case LossKind::gan: return "gan";
        case LossKind::airl: return "airl";
        case LossKind::rairl: return "rairl";
    }
    return "?";
}

inline LossKind parse_loss_kind(std::string_view s) {
    for (LossKind k : {LossKind::mle, LossKind::rl, LossKind::gan, LossKind::airl, LossKind::rairl}) {
        if (to_string(k) == s) {
            return k;
        }
    }
    throw InvalidInput("unknown loss kind '" + std::string(s) + "'");
}

struct LossOptions {
    LossKind kind = LossKind::rairl;
    bool use_constant_term = true;
    bool use_conditional_term = true;
    /// MLE only: add the sum over non-true tokens of log(1 - pi).
    bool mle_full_form = false;

    static LossOptions defaults(LossKind kind) {
        LossOptions o;
        o.kind = kind;
        if (kind == LossKind::airl) {
            o.use_constant_term = false;
            o.use_conditional_term = false;
        }
        return o;
    }

    friend bool operator==(const LossOptions&, const LossOptions&) = default;
};

/// Probability floor applied to D and 1 - pi before taking logs.
inline constexpr double probability_clamp = 1e-12;

/// A sequence evaluated by both players.
struct ScoredSequence {
    std::size_t context = 0;
    PolicyTrace policy;
    DiscriminatorTrace disc;

    std::size_t length() const noexcept { return policy.length(); }
    const TokenSeq& tokens() const noexcept { return policy.tokens; }
    double log_pi(std::size_t t) const { return policy.token_log_prob(t); }
    double f(std::size_t t) const { return disc.f[t]; }
    /// The detached logit coefficient f - log pi.
    double logit(std::size_t t) const { return f(t) - log_pi(t); }
    double d(std::size_t t) const { return sigmoid(logit(t)); }
};

inline ScoredSequence score_sequence(const PolicyNet& policy, const DiscriminatorNet& disc, const Context& context,
                                     std::span<const TokenId> tokens) {
    return {context.id, policy.trace(context.feature, tokens), disc.encode(context.feature, tokens)};
}

inline ScoredSequence score_sequence(PolicyTrace trace, const DiscriminatorNet& disc, std::size_t context_id) {
    auto dt = disc.encode(trace.context, trace.tokens);
    return {context_id, std::move(trace), std::move(dt)};
}

// ---------------------------------------------------------------------------
// Discriminator

struct DiscriminatorLossResult {
    double loss = 0.0;
    ParameterSet gradient;
    bool clamped = false;  // some D hit the 1e-12 floor
};

namespace detail {

// -log(sigmoid(x)) with the D floor; returns (value, d value / dx).
inline std::pair<double, double> neg_log_sigmoid(double x, bool& clamped) {
    const double cap = -std::log(probability_clamp);
    const double v = softplus(-x);
    if (v >= cap) {
        clamped = true;
        return {cap, 0.0};
    }
    return {v, -sigmoid(-x)};
}

}  // namespace detail

/// Accumulates scale * (sum_t -log D(true_t) - log(1 - D(gen_t))) into grad.
/// log pi enters D as a constant input.
inline double accumulate_discriminator_loss(const DiscriminatorNet& disc, const ScoredSequence& truth,
                                            const ScoredSequence& gen, double scale, ParameterSet& grad,
                                            bool& clamped) {
    double loss = 0.0;
    Vector df(truth.length());
    for (std::size_t t = 0; t < truth.length(); ++t) {
        const auto [v, dv] = detail::neg_log_sigmoid(truth.logit(t), clamped);
        loss += v;
        df[t] = scale * dv;
    }
    disc.backward(truth.disc, df, 0.0, grad);
    df.assign(gen.length(), 0.0);
    for (std::size_t t = 0; t < gen.length(); ++t) {
        // -log(1 - sigmoid(x)) = -log(sigmoid(-x))
        const auto [v, dv] = detail::neg_log_sigmoid(-gen.logit(t), clamped);
        loss += v;
        df[t] = -scale * dv;
    }
    disc.backward(gen.disc, df, 0.0, grad);
    return scale * loss;
}

inline DiscriminatorLossResult discriminator_loss(const DiscriminatorNet& disc, const ScoredSequence& truth,
                                                  const ScoredSequence& gen) {
    DiscriminatorLossResult r;
    r.gradient = disc.params().zeros_like();
    r.loss = accumulate_discriminator_loss(disc, truth, gen, 1.0, r.gradient, r.clamped);
    return r;
}

/// Sentence-level binary objective on the GAN head: -log Ds(true) - log(1 - Ds(gen)).
inline double accumulate_gan_discriminator_loss(const DiscriminatorNet& disc, const ScoredSequence& truth,
                                                const ScoredSequence& gen, double scale, ParameterSet& grad,
                                                bool& clamped) {
    const auto [vt, dvt] = detail::neg_log_sigmoid(truth.disc.sentence_logit, clamped);
    const auto [vg, dvg] = detail::neg_log_sigmoid(-gen.disc.sentence_logit, clamped);
    const Vector no_f_true(truth.length(), 0.0);
    const Vector no_f_gen(gen.length(), 0.0);
    disc.backward(truth.disc, no_f_true, scale * dvt, grad);
    disc.backward(gen.disc, no_f_gen, -scale * dvg, grad);
    return scale * (vt + vg);
}

inline DiscriminatorLossResult gan_discriminator_loss(const DiscriminatorNet& disc, const ScoredSequence& truth,
                                                      const ScoredSequence& gen) {
    DiscriminatorLossResult r;
    r.gradient = disc.params().zeros_like();
    r.loss = accumulate_gan_discriminator_loss(disc, truth, gen, 1.0, r.gradient, r.clamped);
    return r;
}

// ---------------------------------------------------------------------------
// Generator

/// Gradient of -scale * sum_t c_t log pi(w_t) with c_t held fixed.
inline double accumulate_weighted_log_likelihood(const PolicyNet& policy, const PolicyTrace& trace,
                                                 std::span<const double> coefficients, double scale,
                                                 ParameterSet& grad) {
    std::vector<Vector> dlogits(trace.length());
    double loss = 0.0;
    for (std::size_t t = 0; t < trace.length(); ++t) {
        const auto& lp = trace.log_probs[t];
        const double c = scale * coefficients[t];
        auto& dl = dlogits[t];
        dl.resize(lp.size());
        for (std::size_t k = 0; k < lp.size(); ++k) {
            dl[k] = c * std::exp(lp[k]);
        }
        dl[to_index(trace.tokens[t])] -= c;
        loss -= c * trace.token_log_prob(t);
    }
    policy.backward(trace, dlogits, grad);
    return loss;
}

struct GeneratorGradientReport {
    ParameterSet gradient;
    Vector coefficients;       // per generated position
    Vector true_coefficients;  // per ground-truth position (conditional term), empty if unused
    bool detached = true;
    double surrogate_loss = 0.0;
};

/// Refined generator update:
///   -sum_t (f_t - log pi_t) log pi_t - sum_t (f^true_t - log pi^true_t) log pi^true_t
/// Disabling the constant term subtracts 1 from every coefficient; disabling
/// the conditional term drops the ground-truth sum.
inline double accumulate_rairl_generator(const PolicyNet& policy, const ScoredSequence& gen,
                                         const ScoredSequence* truth, const LossOptions& opt, double scale,
                                         ParameterSet& grad, Vector* coef_out = nullptr,
                                         Vector* true_coef_out = nullptr) {
    const double offset = opt.use_constant_term ? 0.0 : 1.0;
    Vector c(gen.length());
    for (std::size_t t = 0; t < gen.length(); ++t) {
        c[t] = gen.logit(t) - offset;
    }
    double loss = accumulate_weighted_log_likelihood(policy, gen.policy, c, scale, grad);
    if (coef_out != nullptr) {
        *coef_out = c;
    }
    if (opt.use_conditional_term) {
        if (truth == nullptr) {
            throw InvalidInput("rAIRL conditional term requires a ground-truth sample");
        }
        Vector ct(truth->length());
        for (std::size_t t = 0; t < truth->length(); ++t) {
            ct[t] = truth->logit(t) - offset;
        }
        loss += accumulate_weighted_log_likelihood(policy, truth->policy, ct, scale, grad);
        if (true_coef_out != nullptr) {
            *true_coef_out = std::move(ct);
        }
    }
    return loss;
}

inline GeneratorGradientReport rairl_generator_loss(const PolicyNet& policy, const ScoredSequence& gen,
                                                    const ScoredSequence& truth,
                                                    const LossOptions& opt = LossOptions::defaults(LossKind::rairl)) {
    GeneratorGradientReport r;
    r.gradient = policy.params().zeros_like();
    r.surrogate_loss = accumulate_rairl_generator(policy, gen, &truth, opt, 1.0, r.gradient, &r.coefficients,
                                                  &r.true_coefficients);
    return r;
}

/// Vanilla AIRL generator: coefficient f - log pi - 1, no conditional term.
inline GeneratorGradientReport airl_generator_gradient(const PolicyNet& policy, const ScoredSequence& gen) {
    GeneratorGradientReport r;
    r.gradient = policy.params().zeros_like();
    r.surrogate_loss = accumulate_rairl_generator(policy, gen, nullptr, LossOptions::defaults(LossKind::airl), 1.0,
                                                  r.gradient, &r.coefficients);
    return r;
}

struct LossResult {
    double loss = 0.0;
    ParameterSet gradient;
    bool clamped = false;
};

/// -sum_t log pi^true_t, optionally minus sum_t sum_{k != true} log(1 - pi_k).
inline double accumulate_mle(const PolicyNet& policy, const PolicyTrace& truth, bool full_form, double scale,
                             ParameterSet& grad, bool& clamped) {
    const Vector ones(truth.length(), 1.0);
    double loss = accumulate_weighted_log_likelihood(policy, truth, ones, scale, grad);
    if (!full_form) {
        return loss;
    }
    std::vector<Vector> dlogits(truth.length());
    for (std::size_t t = 0; t < truth.length(); ++t) {
        const auto& lp = truth.log_probs[t];
        const std::size_t w = to_index(truth.tokens[t]);
        Vector p(lp.size());
        for (std::size_t k = 0; k < lp.size(); ++k) {
            p[k] = std::exp(lp[k]);
        }
        // d/dz_j [-sum_{k != w} log(1 - p_k)] = [j != w] p_j/(1-p_j) - p_j * sum_{k != w} p_k/(1-p_k)
        Vector ratio(lp.size(), 0.0);
        double sum_ratio = 0.0;
        for (std::size_t k = 0; k < lp.size(); ++k) {
            if (k == w) {
                continue;
            }
            double q = 1.0 - p[k];
            if (q < probability_clamp) {
                q = probability_clamp;
                clamped = true;
                loss -= scale * std::log(q);
                continue;  // held at the floor: no gradient through this term
            }
            loss -= scale * std::log(q);
            ratio[k] = p[k] / q;
            sum_ratio += ratio[k];
        }
        auto& dl = dlogits[t];
        dl.resize(lp.size());
        for (std::size_t j = 0; j < lp.size(); ++j) {
            dl[j] = scale * (ratio[j] - p[j] * sum_ratio);
        }
    }
    policy.backward(truth, dlogits, grad);
    return loss;
}

inline LossResult mle_loss(const PolicyNet& policy, const PolicyTrace& truth, bool full_form = false) {
    LossResult r;
    r.gradient = policy.params().zeros_like();
    r.loss = accumulate_mle(policy, truth, full_form, 1.0, r.gradient, r.clamped);
    return r;
}

/// Unigram-overlap F1 between token multisets.
inline double handcrafted_metric(std::span<const TokenId> generated, std::span<const TokenId> reference) {
    if (generated.empty() || reference.empty()) {
        throw InvalidInput("handcrafted_metric: sequences must be non-empty");
    }
    std::map<TokenId, int> ref_counts;
    for (TokenId t : reference) {
        ++ref_counts[t];
    }
    int overlap = 0;
    for (TokenId t : generated) {
        auto it = ref_counts.find(t);
        if (it != ref_counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) {
        return 0.0;
    }
    const double precision = static_cast<double>(overlap) / static_cast<double>(generated.size());
    const double recall = static_cast<double>(overlap) / static_cast<double>(reference.size());
    return 2.0 * precision * recall / (precision + recall);
}

/// Drops a trailing EOS so the metric compares content only.
inline std::span<const TokenId> strip_eos(std::span<const TokenId> tokens, TokenId eos) {
    if (!tokens.empty() && tokens.back() == eos) {
        return tokens.first(tokens.size() - 1);
    }
    return tokens;
}

/// Best metric over a reference set (multi-reference scoring).
inline double best_reference_metric(std::span<const TokenId> generated, const std::vector<TokenSeq>& references,
                                    TokenId eos) {
    const auto g = strip_eos(generated, eos);
    if (g.empty()) {
        return 0.0;
    }
    double best = 0.0;
    for (const auto& ref : references) {
        const auto r = strip_eos(ref, eos);
        if (!r.empty()) {
            best = std::max(best, handcrafted_metric(g, r));
        }
    }
    return best;
}

/// -r * sum_t log pi_t with r fixed.
inline LossResult rl_loss(const PolicyNet& policy, const PolicyTrace& gen, double r) {
    LossResult out;
    out.gradient = policy.params().zeros_like();
    const Vector c(gen.length(), r);
    out.loss = accumulate_weighted_log_likelihood(policy, gen, c, 1.0, out.gradient);
    return out;
}

/// -d_gen * sum_t log pi_t with d_gen held fixed.
inline GeneratorGradientReport gan_sentence_loss(const PolicyNet& policy, const PolicyTrace& gen, double d_gen) {
    GeneratorGradientReport r;
    r.gradient = policy.params().zeros_like();
    r.coefficients.assign(gen.length(), d_gen);
    r.surrogate_loss = accumulate_weighted_log_likelihood(policy, gen, r.coefficients, 1.0, r.gradient);
    return r;
}

/// Same, with D_gen = sigmoid(sentence head) of the scored sequence.
inline GeneratorGradientReport gan_sentence_loss(const PolicyNet& policy, const ScoredSequence& gen) {
    return gan_sentence_loss(policy, gen.policy, sigmoid(gen.disc.sentence_logit));
}

}  // namespace rairl
