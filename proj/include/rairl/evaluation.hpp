#pragma once

// Measurement procedures: correlation coefficients, reward compactness,
// diversity, diagnosis-and-rewrite, the one-step game, and top-k ranking.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "rairl/envworld.hpp"
#include "rairl/error.hpp"
#include "rairl/losses.hpp"
#include "rairl/models.hpp"
#include "rairl/numerics.hpp"
#include "rairl/rng.hpp"

namespace rairl {

// ---------------------------------------------------------------------------
// Correlations

namespace detail {

inline void check_pair(std::span<const double> x, std::span<const double> y, const char* who) {
    if (x.size() != y.size()) {
        throw InvalidInput(std::string(who) + ": length mismatch");
    }
    if (x.size() < 2) {
        throw InvalidInput(std::string(who) + ": need at least two points");
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i]) || !std::isfinite(y[i])) {
            throw InvalidInput(std::string(who) + ": non-finite input");
        }
    }
}

/// Average ranks (1-based), ties share the mean rank.
inline Vector average_ranks(std::span<const double> x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    Vector r(x.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) {
            ++j;
        }
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            r[order[k]] = avg;
        }
        i = j + 1;
    }
    return r;
}

}  // namespace detail

inline double pearson(std::span<const double> x, std::span<const double> y) {
    detail::check_pair(x, y, "pearson");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (!(sxx > 0.0) || !(syy > 0.0)) {
        throw DegenerateInput("pearson: zero variance");
    }
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
    detail::check_pair(x, y, "spearman");
    const auto rx = detail::average_ranks(x);
    const auto ry = detail::average_ranks(y);
    try {
        return pearson(rx, ry);
    } catch (const DegenerateInput&) {
        throw DegenerateInput("spearman: zero variance");
    }
}

/// Kendall tau-b: (C - D) / sqrt((n0 - n1)(n0 - n2)).
inline double kendall(std::span<const double> x, std::span<const double> y) {
    detail::check_pair(x, y, "kendall");
    const std::size_t n = x.size();
    double concordant = 0.0;
    double discordant = 0.0;
    double ties_x = 0.0;
    double ties_y = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double dx = x[i] - x[j];
            const double dy = y[i] - y[j];
            if (dx == 0.0) {
                ties_x += 1.0;
            }
            if (dy == 0.0) {
                ties_y += 1.0;
            }
            if (dx == 0.0 || dy == 0.0) {
                continue;
            }
            if ((dx > 0.0) == (dy > 0.0)) {
                concordant += 1.0;
            } else {
                discordant += 1.0;
            }
        }
    }
    const double n0 = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
    const double denom = (n0 - ties_x) * (n0 - ties_y);
    if (!(denom > 0.0)) {
        throw DegenerateInput("kendall: zero variance");
    }
    return (concordant - discordant) / std::sqrt(denom);
}

struct Correlations {
    std::optional<double> pearson;
    std::optional<double> spearman;
    std::optional<double> kendall;
    std::size_t count = 0;
};

/// All three coefficients; a degenerate input leaves the entry empty and adds a warning.
inline Correlations correlate(std::span<const double> x, std::span<const double> y,
                              std::vector<std::string>* warnings = nullptr, const std::string& label = "") {
    Correlations c;
    c.count = x.size();
    if (x.size() < 2) {
        if (warnings != nullptr) {
            warnings->push_back(label + ": fewer than two probes");
        }
        return c;
    }
    const auto attempt = [&](auto fn, std::optional<double>& out) {
        try {
            out = fn(x, y);
        } catch (const DegenerateInput& e) {
            if (warnings != nullptr) {
                warnings->push_back(label + ": " + e.what());
            }
        }
    };
    attempt([](auto a, auto b) { return pearson(a, b); }, c.pearson);
    attempt([](auto a, auto b) { return spearman(a, b); }, c.spearman);
    attempt([](auto a, auto b) { return kendall(a, b); }, c.kendall);
    return c;
}

// ---------------------------------------------------------------------------
// Sentence scoring

enum class SentenceScorer { sum_f, sum_g };

inline std::string_view to_string(SentenceScorer s) noexcept { return s == SentenceScorer::sum_f ? "sum_f" : "sum_g"; }

inline SentenceScorer parse_sentence_scorer(std::string_view s) {
    if (s == "sum_f") {
        return SentenceScorer::sum_f;
    }
    if (s == "sum_g") {
        return SentenceScorer::sum_g;
    }
    throw InvalidInput("unknown sentence scorer '" + std::string(s) + "'");
}

inline double sentence_reward(const DiscriminatorNet& disc, const Context& ctx, std::span<const TokenId> tokens,
                              SentenceScorer scorer = SentenceScorer::sum_f) {
    const auto tr = disc.encode(ctx.feature, tokens);
    return scorer == SentenceScorer::sum_f ? tr.sum_f() : tr.sum_g();
}

// ---------------------------------------------------------------------------
// Compactness

struct CompactnessProbe {
    std::size_t sentence = 0;
    std::size_t position = 0;
    TokenId original{};
    TokenId replacement{};
    double reward_delta = 0.0;
    double distance = 0.0;
    bool same_class = false;
};

struct CompactnessReport {
    std::vector<CompactnessProbe> probes;
    Correlations same_class;       // RP_S
    Correlations different_class;  // RP_D
    std::size_t skipped = 0;
    std::vector<std::string> warnings;
};

/// Replaces the first content token of every sentence once with another member
/// of its class and once with a token from a different class, then correlates
/// |reward change| with embedding distance in each bucket. Sentence reward is
/// given by `score` (tokens -> scalar).
template <typename Score>
CompactnessReport compactness_probe_with(const GrammarWorld& world, const std::vector<SequenceSample>& corpus,
                                         Rng& rng, Score&& score) {
    const auto& vocab = world.vocab();
    const auto content = vocab.content_tokens();
    CompactnessReport rep;
    Vector ds, rs, dd, rd;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& s = corpus[i];
        std::optional<std::size_t> pos;
        for (std::size_t t = 0; t < s.tokens.size(); ++t) {
            if (vocab.is_content(s.tokens[t])) {
                pos = t;
                break;
            }
        }
        if (!pos) {
            ++rep.skipped;
            continue;
        }
        const TokenId orig = s.tokens[*pos];
        const auto cls = *vocab.class_of(orig);
        std::vector<TokenId> same;
        std::vector<TokenId> other;
        for (TokenId t : content) {
            if (t == orig) {
                continue;
            }
            (vocab.class_of(t) == cls ? same : other).push_back(t);
        }
        const double base = score(s.context, std::span<const TokenId>(s.tokens));
        const auto probe = [&](const std::vector<TokenId>& pool, bool same_flag) {
            if (pool.empty()) {
                return;
            }
            TokenSeq edited = s.tokens;
            edited[*pos] = pool[rng.index(pool.size())];
            CompactnessProbe p;
            p.sentence = i;
            p.position = *pos;
            p.original = orig;
            p.replacement = edited[*pos];
            p.reward_delta = std::abs(base - score(s.context, std::span<const TokenId>(edited)));
            p.distance = embedding_distance(vocab, orig, p.replacement);
            p.same_class = same_flag;
            (same_flag ? ds : dd).push_back(p.distance);
            (same_flag ? rs : rd).push_back(p.reward_delta);
            rep.probes.push_back(p);
        };
        probe(same, true);
        probe(other, false);
    }
    if (rep.probes.empty()) {
        throw DegenerateInput("compactness_probe: no sentence has a replaceable token");
    }
    rep.same_class = correlate(rs, ds, &rep.warnings, "same-class");
    rep.different_class = correlate(rd, dd, &rep.warnings, "different-class");
    return rep;
}

inline CompactnessReport compactness_probe(const GrammarWorld& world, const DiscriminatorNet& disc,
                                           const std::vector<SequenceSample>& corpus, Rng& rng,
                                           SentenceScorer scorer = SentenceScorer::sum_f) {
    return compactness_probe_with(world, corpus, rng, [&](std::size_t ctx, std::span<const TokenId> tokens) {
        return sentence_reward(disc, world.context(ctx), tokens, scorer);
    });
}

// ---------------------------------------------------------------------------
// Diversity

struct DiversityReport {
    double coverage = 0.0;
    double novel_ratio = 0.0;
    std::size_t distinct = 0;
    std::size_t generated = 0;
    std::size_t generated_vocab = 0;
    std::size_t reference_vocab = 0;
};

/// Distinct content tokens used by a corpus.
inline std::set<TokenId> vocabulary_usage(const std::vector<SequenceSample>& corpus, const Vocabulary& vocab) {
    std::set<TokenId> out;
    for (const auto& s : corpus) {
        for (TokenId t : s.tokens) {
            if (vocab.is_content(t)) {
                out.insert(t);
            }
        }
    }
    return out;
}

/// coverage = |generated vocabulary| / |reference vocabulary|; novel ratio =
/// share of generated sentences absent from the training corpus; distinct =
/// number of different generated sentences.
inline DiversityReport diversity_metrics(const std::vector<SequenceSample>& generated,
                                         const std::vector<SequenceSample>& training,
                                         const std::set<TokenId>& reference_vocab, const Vocabulary& vocab) {
    if (generated.empty() || training.empty() || reference_vocab.empty()) {
        throw InvalidInput("diversity_metrics: corpora must be non-empty");
    }
    std::set<TokenSeq> seen;
    for (const auto& s : training) {
        seen.insert(s.tokens);
    }
    std::set<TokenSeq> distinct;
    std::size_t novel = 0;
    for (const auto& s : generated) {
        distinct.insert(s.tokens);
        if (!seen.contains(s.tokens)) {
            ++novel;
        }
    }
    DiversityReport r;
    r.generated = generated.size();
    r.distinct = distinct.size();
    r.novel_ratio = static_cast<double>(novel) / static_cast<double>(generated.size());
    r.generated_vocab = vocabulary_usage(generated, vocab).size();
    r.reference_vocab = reference_vocab.size();
    r.coverage = static_cast<double>(r.generated_vocab) / static_cast<double>(r.reference_vocab);
    return r;
}

// ---------------------------------------------------------------------------
// Diagnosis and rewrite

/// Per-position reward used by the drop-rate rule.
///   f        shaped reward f_t
///   g        reward head g_t
///   density  exp(f_t)
///   relative exp(f_t - max_w f(w | prefix)), the density relative to the best
///            token the discriminator would accept at that position
enum class PositionScorer { f, g, density, relative };

inline std::string_view to_string(PositionScorer s) noexcept {
    switch (s) {
        case PositionScorer::f: return "f";
        case PositionScorer::g: return "g";
        case PositionScorer::density: return "density";
        case PositionScorer::relative: return "relative";
    }
    return "?";
}

inline PositionScorer parse_position_scorer(std::string_view s) {
    for (PositionScorer k : {PositionScorer::f, PositionScorer::g, PositionScorer::density, PositionScorer::relative}) {
        if (to_string(k) == s) {
            return k;
        }
    }
    throw InvalidInput("unknown position scorer '" + std::string(s) + "'");
}

inline Vector position_rewards(const DiscriminatorNet& disc, const Context& ctx, std::span<const TokenId> tokens,
                               PositionScorer scorer) {
    const auto tr = disc.encode(ctx.feature, tokens);
    Vector out(tokens.size());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        switch (scorer) {
            case PositionScorer::f: out[t] = tr.f[t]; break;
            case PositionScorer::g: out[t] = tr.g[t]; break;
            case PositionScorer::density: out[t] = std::exp(tr.f[t]); break;
            case PositionScorer::relative: {
                const RecurrentState s{tr.states[t], t};
                double best = -std::numeric_limits<double>::infinity();
                for (std::size_t w = 0; w < disc.shape().vocab; ++w) {
                    if (token_id(w) == disc.shape().bos) {
                        continue;
                    }
                    best = std::max(best, reward_f(disc, token_id(w), s, disc.advance(s, token_id(w))).f);
                }
                out[t] = std::exp(tr.f[t] - best);
                break;
            }
        }
    }
    return out;
}

/// First t >= 1 whose drop rate exceeds `threshold`. Where |r_{t-1}| <= 1e-6
/// the raw drop is compared with threshold * scale instead.
inline std::optional<std::size_t> find_drop(std::span<const double> rewards, double threshold, double scale,
                                            Vector* drop_rates = nullptr) {
    std::optional<std::size_t> flagged;
    if (drop_rates != nullptr) {
        drop_rates->assign(rewards.size(), 0.0);
    }
    for (std::size_t t = 1; t < rewards.size(); ++t) {
        const double prev = rewards[t - 1];
        const double drop = prev - rewards[t];
        bool hit = false;
        double rate = 0.0;
        if (std::abs(prev) > 1e-6) {
            rate = drop / std::abs(prev);
            hit = rate > threshold;
        } else {
            rate = scale > 0.0 ? drop / scale : 0.0;
            hit = drop > threshold * scale;
        }
        if (drop_rates != nullptr) {
            (*drop_rates)[t] = rate;
        }
        if (hit && !flagged) {
            flagged = t;
        }
    }
    return flagged;
}

struct DiagnosisOptions {
    double threshold = 0.5;
    PositionScorer scorer = PositionScorer::relative;
    double scale = 1.0;  // fallback scale for near-zero rewards (corpus mean |reward|)
    std::size_t max_length = 8;
};

struct DiagnosisResult {
    std::optional<std::size_t> flagged;
    Vector rewards;
    Vector drop_rates;
    std::optional<SequenceSample> rewrite;
    std::optional<SequenceSample> baseline_rewrite;
    std::size_t baseline_position = 0;
    double original_metric = 0.0;
    double rewrite_metric = 0.0;
    double baseline_metric = 0.0;
    /// rewrite_metric - baseline_metric; zero when nothing is flagged.
    double improvement = 0.0;
};

/// Flags the first sharp reward drop and resamples the suffix from there with
/// the policy; a second rewrite from a uniform position in [1, len - 1] gives
/// the baseline. Both rewrites draw from independent streams split from `rng`.
inline DiagnosisResult diagnose_and_rewrite(const DiscriminatorNet& disc, const PolicyNet& policy, const Context& ctx,
                                            const SequenceSample& sample, const std::vector<TokenSeq>& references,
                                            const DiagnosisOptions& opt, Rng& rng) {
    DiagnosisResult r;
    const TokenId eos = policy.shape().eos;
    const std::uint64_t rewrite_seed = rng.next();
    const std::uint64_t baseline_seed = rng.next();
    const std::size_t baseline_draw = sample.tokens.size() >= 2 ? 1 + rng.index(sample.tokens.size() - 1) : 0;
    r.original_metric = best_reference_metric(sample.tokens, references, eos);
    if (sample.tokens.size() < 2) {
        return r;
    }
    r.rewards = position_rewards(disc, ctx, sample.tokens, opt.scorer);
    r.flagged = find_drop(r.rewards, opt.threshold, opt.scale, &r.drop_rates);
    if (!r.flagged) {
        return r;
    }
    const auto rewrite_from = [&](std::size_t pos, std::uint64_t seed) {
        Rng local(seed);
        const std::span<const TokenId> prefix(sample.tokens.data(), pos);
        auto out = sample_sequence(policy, ctx, local, opt.max_length, prefix);
        out.sample.context = sample.context;
        return out.sample;
    };
    r.rewrite = rewrite_from(*r.flagged, rewrite_seed);
    r.baseline_position = baseline_draw;
    r.baseline_rewrite = rewrite_from(baseline_draw, baseline_seed);
    r.rewrite_metric = best_reference_metric(r.rewrite->tokens, references, eos);
    r.baseline_metric = best_reference_metric(r.baseline_rewrite->tokens, references, eos);
    r.improvement = r.rewrite_metric - r.baseline_metric;
    return r;
}

// ---------------------------------------------------------------------------
// Reward recovery

struct RewardProbe {
    std::size_t context = 0;
    TokenSeq prefix;
    TokenId token{};
    double learned = 0.0;  // g at the probed position
    double truth = 0.0;    // true_token_reward
};

struct RewardRecovery {
    std::vector<RewardProbe> probes;
    Correlations correlations;
    std::vector<std::string> warnings;
};

/// Probes (context, prefix, token) triples: the prefix is a random prefix of a
/// true sentence; the token is a valid continuation with probability
/// `valid_share`, otherwise uniform over every non-BOS token.
inline RewardRecovery reward_recovery_probe(const GrammarWorld& world, const DiscriminatorNet& disc, Rng& rng,
                                            std::size_t count, double valid_share = 0.5) {
    const auto& v = world.vocab();
    std::vector<TokenId> any;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (token_id(i) != v.bos()) {
            any.push_back(token_id(i));
        }
    }
    RewardRecovery out;
    Vector learned, truth;
    for (std::size_t i = 0; i < count; ++i) {
        const auto s = sample_pair(world, rng);
        const std::size_t cut = rng.index(s.tokens.size());
        RewardProbe p;
        p.context = s.context;
        p.prefix.assign(s.tokens.begin(), s.tokens.begin() + static_cast<std::ptrdiff_t>(cut));
        if (rng.uniform() < valid_share) {
            const auto valid = valid_continuations(world, s.context, p.prefix);
            p.token = valid[rng.index(valid.size())];
        } else {
            p.token = any[rng.index(any.size())];
        }
        TokenSeq seq = p.prefix;
        seq.push_back(p.token);
        p.learned = disc.encode(world.context(s.context).feature, seq).g.back();
        p.truth = true_token_reward(world, s.context, p.prefix, p.token);
        learned.push_back(p.learned);
        truth.push_back(p.truth);
        out.probes.push_back(std::move(p));
    }
    out.correlations = correlate(learned, truth, &out.warnings, "reward recovery");
    return out;
}

// ---------------------------------------------------------------------------
// Corrupted corpora for diagnosis

struct CorruptedSample {
    SequenceSample sample;
    std::size_t position = 0;  // index of the injected token
    TokenId original{};
};

/// True sentences with one content token at a position in [1, n_content - 1]
/// replaced by a token of a different class that is not a valid continuation
/// of the prefix there. Sentences with fewer than two content tokens are
/// redrawn.
inline std::vector<CorruptedSample> corrupt_corpus(const GrammarWorld& world, Rng& rng, std::size_t count) {
    const auto& v = world.vocab();
    const auto content = v.content_tokens();
    std::vector<CorruptedSample> out;
    std::size_t attempts = 0;
    while (out.size() < count) {
        if (++attempts > 1000 * (count + 1)) {
            throw DegenerateInput("corrupt_corpus: world has too few multi-token sentences");
        }
        auto s = sample_pair(world, rng);
        const std::size_t n_content = s.tokens.size() - 1;
        if (n_content < 2) {
            continue;
        }
        const std::size_t pos = 1 + rng.index(n_content - 1);
        const TokenId orig = s.tokens[pos];
        const auto valid = valid_continuations(world, s.context, std::span<const TokenId>(s.tokens.data(), pos));
        std::vector<TokenId> pool;
        for (TokenId t : content) {
            if (v.class_of(t) != v.class_of(orig) && std::find(valid.begin(), valid.end(), t) == valid.end()) {
                pool.push_back(t);
            }
        }
        if (pool.empty()) {
            continue;
        }
        s.tokens[pos] = pool[rng.index(pool.size())];
        s.source = SampleSource::generated;
        out.push_back({std::move(s), pos, orig});
    }
    return out;
}

struct DiagnosisEvaluation {
    std::vector<DiagnosisResult> results;
    std::size_t sentences = 0;
    std::size_t flagged = 0;
    std::size_t correct = 0;             // flagged exactly at the injected position
    double precision = 0.0;              // correct / flagged, 0 when nothing is flagged
    double mean_rewrite_metric = 0.0;    // over flagged sentences
    double mean_baseline_metric = 0.0;   // over flagged sentences
    double mean_improvement = 0.0;       // over flagged sentences
    double scale = 0.0;
};

/// Mean |position reward| over the corpus; the fallback scale of the drop rule.
inline double diagnosis_scale(const DiscriminatorNet& disc, const GrammarWorld& world,
                              const std::vector<SequenceSample>& corpus, PositionScorer scorer) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& s : corpus) {
        for (double r : position_rewards(disc, world.context(s.context), s.tokens, scorer)) {
            sum += std::abs(r);
            ++n;
        }
    }
    return n ? sum / static_cast<double>(n) : 1.0;
}

inline DiagnosisEvaluation evaluate_diagnosis(const DiscriminatorNet& disc, const PolicyNet& policy,
                                              const GrammarWorld& world,
                                              const std::vector<CorruptedSample>& corpus, DiagnosisOptions opt,
                                              Rng& rng) {
    std::vector<std::vector<TokenSeq>> refs(world.context_count());
    for (std::size_t c = 0; c < world.context_count(); ++c) {
        for (const auto& s : enumerate_true_sentences(world, c)) {
            refs[c].push_back(s.tokens);
        }
    }
    std::vector<SequenceSample> plain;
    for (const auto& c : corpus) {
        plain.push_back(c.sample);
    }
    DiagnosisEvaluation ev;
    ev.scale = diagnosis_scale(disc, world, plain, opt.scorer);
    opt.scale = ev.scale;
    ev.sentences = corpus.size();
    for (const auto& c : corpus) {
        auto r = diagnose_and_rewrite(disc, policy, world.context(c.sample.context), c.sample,
                                      refs[c.sample.context], opt, rng);
        if (r.flagged) {
            ++ev.flagged;
            ev.correct += *r.flagged == c.position;
            ev.mean_rewrite_metric += r.rewrite_metric;
            ev.mean_baseline_metric += r.baseline_metric;
        }
        ev.results.push_back(std::move(r));
    }
    if (ev.flagged > 0) {
        const double f = static_cast<double>(ev.flagged);
        ev.precision = static_cast<double>(ev.correct) / f;
        ev.mean_rewrite_metric /= f;
        ev.mean_baseline_metric /= f;
        ev.mean_improvement = ev.mean_rewrite_metric - ev.mean_baseline_metric;
    }
    return ev;
}

// ---------------------------------------------------------------------------
// One-step game

enum class GameVariant { vanilla, refined };

inline std::string_view to_string(GameVariant v) noexcept { return v == GameVariant::vanilla ? "vanilla" : "refined"; }

struct GamePoint {
    std::size_t step = 0;
    Vector pi;
    Vector f;
    Vector d;
    double generator_grad_norm = 0.0;
    double discriminator_grad_norm = 0.0;
};

struct GameOptions {
    std::size_t steps = 2000;
    double generator_rate = 0.1;
    double discriminator_rate = 0.1;
};

/// Exact gradients of the single-step game at logits z and rewards f.
/// Discriminator: d/df_k of E_p[-log D] + E_pi[-log(1 - D)] = -p_k (1 - D_k) + pi_k D_k.
/// Generator: -sum_k c_k grad_z log pi_k with c_k = f_k - log pi_k (refined)
/// or f_k - log pi_k - 1 (vanilla); grad_z log pi_k = e_k - pi.
inline Vector game_discriminator_gradient(std::span<const double> p, std::span<const double> z,
                                          std::span<const double> f) {
    const Vector lp = log_softmax(z);
    Vector g(f.size());
    for (std::size_t k = 0; k < f.size(); ++k) {
        const double d = sigmoid(f[k] - lp[k]);
        g[k] = -p[k] * (1.0 - d) + std::exp(lp[k]) * d;
    }
    return g;
}

inline Vector game_generator_gradient(std::span<const double> z, std::span<const double> f, GameVariant variant) {
    const Vector lp = log_softmax(z);
    const double offset = variant == GameVariant::vanilla ? 1.0 : 0.0;
    double sum_c = 0.0;
    Vector c(z.size());
    for (std::size_t k = 0; k < z.size(); ++k) {
        c[k] = f[k] - lp[k] - offset;
        sum_c += c[k];
    }
    Vector g(z.size());
    for (std::size_t j = 0; j < z.size(); ++j) {
        g[j] = -(c[j] - std::exp(lp[j]) * sum_c);
    }
    return g;
}

/// Alternating plain gradient descent: discriminator step, then generator step
/// against the updated rewards. Point 0 is the initial state.
inline std::vector<GamePoint> one_step_game(std::span<const double> p_true, Vector z, Vector f, GameVariant variant,
                                            const GameOptions& opt) {
    if (p_true.empty() || p_true.size() > 4 || z.size() != p_true.size() || f.size() != p_true.size()) {
        throw InvalidInput("one_step_game: need matching vectors of at most 4 tokens");
    }
    double total = 0.0;
    for (double x : p_true) {
        if (!(x > 0.0)) {
            throw InvalidInput("one_step_game: true distribution must be strictly positive");
        }
        total += x;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw InvalidInput("one_step_game: true distribution must sum to 1");
    }
    std::vector<GamePoint> out;
    const auto record = [&](std::size_t step) {
        GamePoint pt;
        pt.step = step;
        const Vector lp = log_softmax(z);
        pt.pi = softmax(z);
        pt.f = f;
        pt.d.resize(z.size());
        for (std::size_t k = 0; k < z.size(); ++k) {
            pt.d[k] = sigmoid(f[k] - lp[k]);
        }
        pt.generator_grad_norm = l2_norm(game_generator_gradient(z, f, variant));
        pt.discriminator_grad_norm = l2_norm(game_discriminator_gradient(p_true, z, f));
        out.push_back(std::move(pt));
    };
    record(0);
    for (std::size_t step = 1; step <= opt.steps; ++step) {
        axpy(-opt.discriminator_rate, game_discriminator_gradient(p_true, z, f), f);
        axpy(-opt.generator_rate, game_generator_gradient(z, f, variant), z);
        for (double x : z) {
            if (!std::isfinite(x)) {
                throw NumericalError("one_step_game: diverged at step " + std::to_string(step));
            }
        }
        record(step);
    }
    return out;
}

/// Pooled standard deviation of D over tokens and the last `fraction` of steps.
inline double final_window_d_std(const std::vector<GamePoint>& traj, double fraction = 0.1) {
    if (traj.empty()) {
        throw InvalidInput("final_window_d_std: empty trajectory");
    }
    const std::size_t n = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(traj.size()))));
    Vector all;
    for (std::size_t i = traj.size() - n; i < traj.size(); ++i) {
        all.insert(all.end(), traj[i].d.begin(), traj[i].d.end());
    }
    const double mean = std::accumulate(all.begin(), all.end(), 0.0) / static_cast<double>(all.size());
    double var = 0.0;
    for (double x : all) {
        var += (x - mean) * (x - mean);
    }
    return std::sqrt(var / static_cast<double>(all.size()));
}

// ---------------------------------------------------------------------------
// Top-k

struct RankedSequence {
    SequenceSample sample;
    double reward = 0.0;
};

struct TopKResult {
    std::vector<RankedSequence> ranked;
    bool shortfall = false;
};

/// Draws `samples` sequences, removes duplicates, ranks by sentence reward.
inline TopKResult top_k_by_reward(const PolicyNet& policy, const DiscriminatorNet& disc, const Context& ctx,
                                  std::size_t k, std::size_t samples, std::size_t max_length, Rng& rng,
                                  SentenceScorer scorer = SentenceScorer::sum_f) {
    if (samples < k || k == 0) {
        throw InvalidInput("top_k_by_reward: need 1 <= k <= samples");
    }
    std::set<TokenSeq> seen;
    TopKResult out;
    for (std::size_t i = 0; i < samples; ++i) {
        auto s = sample_sequence(policy, ctx, rng, max_length).sample;
        if (seen.insert(s.tokens).second) {
            const double r = sentence_reward(disc, ctx, s.tokens, scorer);
            out.ranked.push_back({std::move(s), r});
        }
    }
    std::stable_sort(out.ranked.begin(), out.ranked.end(),
                     [](const RankedSequence& a, const RankedSequence& b) { return a.reward > b.reward; });
    if (out.ranked.size() < k) {
        out.shortfall = true;
    } else {
        out.ranked.resize(k);
    }
    return out;
}

}  // namespace rairl
