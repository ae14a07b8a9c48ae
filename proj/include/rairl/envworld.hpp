#pragma once

// Synthetic caption worlds: contexts stand in for images, a templated
// grammar defines the true sentence distribution, and a synonym-structured
// vocabulary with embeddings gives a known token-level reward.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rairl/error.hpp"
#include "rairl/numerics.hpp"
#include "rairl/rng.hpp"

namespace rairl {

enum class TokenId : std::uint32_t {};

constexpr std::size_t to_index(TokenId t) noexcept { return static_cast<std::size_t>(t); }
constexpr TokenId token_id(std::size_t i) noexcept { return static_cast<TokenId>(i); }

using TokenSeq = std::vector<TokenId>;

struct SynonymClass {
    std::string name;
    std::vector<TokenId> members;
    Vector member_weights;  // sums to 1; uniform unless configured
};

class Vocabulary {
public:
    Vocabulary() = default;

    Vocabulary(std::vector<std::string> names, TokenId bos, TokenId eos,
               std::vector<SynonymClass> classes, DenseMatrix embeddings)
        : names_(std::move(names)),
          bos_(bos),
          eos_(eos),
          classes_(std::move(classes)),
          embeddings_(std::move(embeddings)) {
        validate();
    }

    std::size_t size() const noexcept { return names_.size(); }
    TokenId bos() const noexcept { return bos_; }
    TokenId eos() const noexcept { return eos_; }

    bool contains(TokenId t) const noexcept { return to_index(t) < names_.size(); }

    const std::string& name(TokenId t) const {
        check(t);
        return names_[to_index(t)];
    }

    std::optional<TokenId> find(std::string_view name) const {
        const auto it = by_name_.find(std::string(name));
        if (it == by_name_.end()) {
            return std::nullopt;
        }
        return it->second;
    }

    TokenId id(std::string_view name) const {
        if (auto t = find(name)) {
            return *t;
        }
        throw InvalidInput("unknown token '" + std::string(name) + "'");
    }

    const std::vector<SynonymClass>& classes() const noexcept { return classes_; }

    std::optional<std::size_t> class_index(std::string_view name) const {
        for (std::size_t i = 0; i < classes_.size(); ++i) {
            if (classes_[i].name == name) {
                return i;
            }
        }
        return std::nullopt;
    }

    /// Synonym class of a content token; none for BOS/EOS.
    std::optional<std::size_t> class_of(TokenId t) const {
        check(t);
        const int c = class_of_[to_index(t)];
        if (c < 0) {
            return std::nullopt;
        }
        return static_cast<std::size_t>(c);
    }

    bool is_content(TokenId t) const { return t != bos_ && t != eos_; }

    std::vector<TokenId> content_tokens() const {
        std::vector<TokenId> out;
        for (std::size_t i = 0; i < size(); ++i) {
            if (is_content(token_id(i))) {
                out.push_back(token_id(i));
            }
        }
        return out;
    }

    std::size_t embedding_dim() const noexcept { return embeddings_.cols(); }
    std::span<const double> embedding(TokenId t) const {
        check(t);
        return embeddings_.row(to_index(t));
    }
    const DenseMatrix& embeddings() const noexcept { return embeddings_; }

    void check(TokenId t) const {
        if (!contains(t)) {
            throw InvalidInput("token id " + std::to_string(to_index(t)) + " out of range");
        }
    }

private:
    void validate() {
        by_name_.clear();
        for (std::size_t i = 0; i < names_.size(); ++i) {
            if (!by_name_.emplace(names_[i], token_id(i)).second) {
                throw InvalidInput("Vocabulary: duplicate token name '" + names_[i] + "'");
            }
        }
        if (!contains(bos_) || !contains(eos_) || bos_ == eos_) {
            throw InvalidInput("Vocabulary: BOS and EOS must be distinct valid tokens");
        }
        if (embeddings_.rows() != names_.size() || embeddings_.cols() == 0 || !embeddings_.all_finite()) {
            throw InvalidInput("Vocabulary: embeddings must be a finite (vocab x dim) matrix");
        }
        class_of_.assign(names_.size(), -1);
        for (std::size_t c = 0; c < classes_.size(); ++c) {
            auto& cls = classes_[c];
            if (cls.members.empty()) {
                throw InvalidInput("Vocabulary: class '" + cls.name + "' is empty");
            }
            if (cls.member_weights.empty()) {
                cls.member_weights.assign(cls.members.size(), 1.0 / static_cast<double>(cls.members.size()));
            }
            if (cls.member_weights.size() != cls.members.size()) {
                throw InvalidInput("Vocabulary: class '" + cls.name + "' weight count mismatch");
            }
            double total = 0.0;
            for (double w : cls.member_weights) {
                if (!(w >= 0.0)) {
                    throw InvalidInput("Vocabulary: negative member weight in '" + cls.name + "'");
                }
                total += w;
            }
            if (std::abs(total - 1.0) > 1e-9) {
                throw InvalidInput("Vocabulary: member weights of '" + cls.name + "' must sum to 1");
            }
            for (TokenId t : cls.members) {
                check(t);
                if (!is_content(t)) {
                    throw InvalidInput("Vocabulary: BOS/EOS cannot belong to a synonym class");
                }
                if (class_of_[to_index(t)] >= 0) {
                    throw InvalidInput("Vocabulary: token '" + names_[to_index(t)] + "' is in two classes");
                }
                class_of_[to_index(t)] = static_cast<int>(c);
            }
        }
        for (std::size_t i = 0; i < names_.size(); ++i) {
            if (is_content(token_id(i)) && class_of_[i] < 0) {
                throw InvalidInput("Vocabulary: token '" + names_[i] + "' has no synonym class");
            }
        }
    }

    std::vector<std::string> names_;
    TokenId bos_{};
    TokenId eos_{};
    std::vector<SynonymClass> classes_;
    DenseMatrix embeddings_;
    std::vector<int> class_of_;
    std::unordered_map<std::string, TokenId> by_name_;
};

inline double embedding_distance(const Vocabulary& vocab, TokenId a, TokenId b) {
    const auto ea = vocab.embedding(a);
    const auto eb = vocab.embedding(b);
    double acc = 0.0;
    for (std::size_t i = 0; i < ea.size(); ++i) {
        const double d = ea[i] - eb[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

struct EmbeddingSeparation {
    double max_intra_class = 0.0;
    double min_inter_class = std::numeric_limits<double>::infinity();
    double max_pairwise = 0.0;
};

/// Brute force over all token pairs. BOS and EOS count as singleton groups.
inline EmbeddingSeparation embedding_separation(const Vocabulary& vocab) {
    EmbeddingSeparation s;
    for (std::size_t i = 0; i < vocab.size(); ++i) {
        for (std::size_t j = i + 1; j < vocab.size(); ++j) {
            const auto a = token_id(i);
            const auto b = token_id(j);
            const double d = embedding_distance(vocab, a, b);
            s.max_pairwise = std::max(s.max_pairwise, d);
            const auto ca = vocab.class_of(a);
            const auto cb = vocab.class_of(b);
            if (ca && cb && *ca == *cb) {
                s.max_intra_class = std::max(s.max_intra_class, d);
            } else {
                s.min_inter_class = std::min(s.min_inter_class, d);
            }
        }
    }
    return s;
}

struct Context {
    std::size_t id = 0;
    std::string name;
    Vector feature;
};

struct Slot {
    enum class Kind { synonym_class, token };
    Kind kind = Kind::token;
    std::size_t class_index = 0;  // valid when kind == synonym_class
    TokenId token{};              // valid when kind == token
};

/// Slot sequence; EOS is appended implicitly.
struct SentenceTemplate {
    std::vector<Slot> slots;
    double weight = 0.0;
};

struct RewardRule {
    /// Distance at which a substituted token's reward reaches zero.
    /// Defaults to the largest pairwise embedding distance in the vocabulary.
    std::optional<double> d_max;
};

enum class SampleSource { ground_truth, generated };

struct SequenceSample {
    std::size_t context = 0;
    TokenSeq tokens;  // after BOS, ending with EOS
    SampleSource source = SampleSource::ground_truth;

    friend bool operator==(const SequenceSample&, const SequenceSample&) = default;
};

struct WeightedSentence {
    TokenSeq tokens;
    double probability = 0.0;
};

class GrammarWorld {
public:
    GrammarWorld(Vocabulary vocab, std::vector<Context> contexts,
                 std::vector<std::vector<SentenceTemplate>> templates, RewardRule rule,
                 std::size_t max_length)
        : vocab_(std::move(vocab)),
          contexts_(std::move(contexts)),
          templates_(std::move(templates)),
          rule_(rule),
          max_length_(max_length) {
        validate();
    }

    const Vocabulary& vocab() const noexcept { return vocab_; }
    const std::vector<Context>& contexts() const noexcept { return contexts_; }
    const Context& context(std::size_t id) const {
        check_context(id);
        return contexts_[id];
    }
    std::size_t context_count() const noexcept { return contexts_.size(); }
    std::size_t context_dim() const noexcept { return contexts_.front().feature.size(); }
    const std::vector<SentenceTemplate>& templates(std::size_t ctx) const {
        check_context(ctx);
        return templates_[ctx];
    }
    const RewardRule& reward_rule() const noexcept { return rule_; }
    double d_max() const noexcept { return d_max_; }
    std::size_t max_length() const noexcept { return max_length_; }

    void check_context(std::size_t id) const {
        if (id >= contexts_.size()) {
            throw InvalidInput("unknown context id " + std::to_string(id));
        }
    }

    bool slot_accepts(const Slot& slot, TokenId t) const {
        if (slot.kind == Slot::Kind::token) {
            return slot.token == t;
        }
        const auto c = vocab_.class_of(t);
        return c && *c == slot.class_index;
    }

    /// Probability the slot emits token t (class member weight, or 1 for a fixed token).
    double slot_prob(const Slot& slot, TokenId t) const {
        if (slot.kind == Slot::Kind::token) {
            return slot.token == t ? 1.0 : 0.0;
        }
        const auto& cls = vocab_.classes()[slot.class_index];
        for (std::size_t i = 0; i < cls.members.size(); ++i) {
            if (cls.members[i] == t) {
                return cls.member_weights[i];
            }
        }
        return 0.0;
    }

private:
    void validate() {
        if (contexts_.empty()) {
            throw InvalidInput("GrammarWorld: at least one context required");
        }
        if (templates_.size() != contexts_.size()) {
            throw InvalidInput("GrammarWorld: one template list per context required");
        }
        const std::size_t dim = contexts_.front().feature.size();
        for (std::size_t c = 0; c < contexts_.size(); ++c) {
            if (contexts_[c].id != c) {
                throw InvalidInput("GrammarWorld: context ids must be 0..n-1 in order");
            }
            if (contexts_[c].feature.size() != dim || dim == 0) {
                throw InvalidInput("GrammarWorld: context feature dimensions differ");
            }
            for (double x : contexts_[c].feature) {
                if (!std::isfinite(x)) {
                    throw InvalidInput("GrammarWorld: non-finite context feature");
                }
            }
            if (templates_[c].empty()) {
                throw InvalidInput("GrammarWorld: context " + std::to_string(c) + " has no templates");
            }
            double total = 0.0;
            for (const auto& t : templates_[c]) {
                if (!(t.weight >= 0.0)) {
                    throw InvalidInput("GrammarWorld: negative template weight");
                }
                total += t.weight;
                if (t.slots.size() + 1 > max_length_) {
                    throw InvalidInput("GrammarWorld: template longer than max length");
                }
                for (const auto& s : t.slots) {
                    if (s.kind == Slot::Kind::token) {
                        vocab_.check(s.token);
                        if (!vocab_.is_content(s.token)) {
                            throw InvalidInput("GrammarWorld: template slots cannot hold BOS/EOS");
                        }
                    } else if (s.class_index >= vocab_.classes().size()) {
                        throw InvalidInput("GrammarWorld: template references unknown class");
                    }
                }
            }
            if (std::abs(total - 1.0) > 1e-9) {
                throw InvalidInput("GrammarWorld: template weights of context " + std::to_string(c) +
                                   " must sum to 1");
            }
        }
        const auto sep = embedding_separation(vocab_);
        d_max_ = rule_.d_max.value_or(sep.max_pairwise);
        if (!(d_max_ > 0.0)) {
            throw InvalidInput("GrammarWorld: reward d_max must be positive");
        }
    }

    Vocabulary vocab_;
    std::vector<Context> contexts_;
    std::vector<std::vector<SentenceTemplate>> templates_;
    RewardRule rule_;
    std::size_t max_length_ = 0;
    double d_max_ = 1.0;
};

// ---------------------------------------------------------------------------
// Ground-truth distribution

inline SequenceSample sample_true_sentence(const GrammarWorld& world, std::size_t ctx, Rng& rng) {
    const auto& templates = world.templates(ctx);
    Vector weights;
    weights.reserve(templates.size());
    for (const auto& t : templates) {
        weights.push_back(t.weight);
    }
    const auto& tpl = templates[rng.categorical(weights)];
    SequenceSample s;
    s.context = ctx;
    s.source = SampleSource::ground_truth;
    for (const auto& slot : tpl.slots) {
        if (slot.kind == Slot::Kind::token) {
            s.tokens.push_back(slot.token);
        } else {
            const auto& cls = world.vocab().classes()[slot.class_index];
            s.tokens.push_back(cls.members[rng.categorical(cls.member_weights)]);
        }
    }
    s.tokens.push_back(world.vocab().eos());
    return s;
}

/// Uniform context, then a sentence from its true distribution.
inline SequenceSample sample_pair(const GrammarWorld& world, Rng& rng) {
    return sample_true_sentence(world, rng.index(world.context_count()), rng);
}

inline double true_sentence_prob(const GrammarWorld& world, std::size_t ctx, std::span<const TokenId> tokens) {
    world.check_context(ctx);
    if (tokens.empty() || tokens.back() != world.vocab().eos()) {
        return 0.0;
    }
    double total = 0.0;
    for (const auto& tpl : world.templates(ctx)) {
        if (tpl.slots.size() + 1 != tokens.size()) {
            continue;
        }
        double p = tpl.weight;
        for (std::size_t i = 0; i < tpl.slots.size() && p > 0.0; ++i) {
            p *= world.slot_prob(tpl.slots[i], tokens[i]);
        }
        total += p;
    }
    return total;
}

/// Every sentence with positive true probability, merged across templates.
inline std::vector<WeightedSentence> enumerate_true_sentences(const GrammarWorld& world, std::size_t ctx,
                                                              std::size_t cap = 100000) {
    std::map<TokenSeq, double> acc;
    std::size_t expanded = 0;
    for (const auto& tpl : world.templates(ctx)) {
        if (tpl.weight <= 0.0) {
            continue;
        }
        // Odometer over slot choices.
        std::vector<std::vector<std::pair<TokenId, double>>> choices;
        for (const auto& slot : tpl.slots) {
            std::vector<std::pair<TokenId, double>> opts;
            if (slot.kind == Slot::Kind::token) {
                opts.emplace_back(slot.token, 1.0);
            } else {
                const auto& cls = world.vocab().classes()[slot.class_index];
                for (std::size_t i = 0; i < cls.members.size(); ++i) {
                    if (cls.member_weights[i] > 0.0) {
                        opts.emplace_back(cls.members[i], cls.member_weights[i]);
                    }
                }
            }
            choices.push_back(std::move(opts));
        }
        std::vector<std::size_t> odo(choices.size(), 0);
        while (true) {
            if (++expanded > cap) {
                throw Unsupported("enumerate_true_sentences: more than " + std::to_string(cap) +
                                  " expansions");
            }
            TokenSeq s;
            double p = tpl.weight;
            for (std::size_t i = 0; i < choices.size(); ++i) {
                s.push_back(choices[i][odo[i]].first);
                p *= choices[i][odo[i]].second;
            }
            s.push_back(world.vocab().eos());
            acc[s] += p;
            std::size_t k = 0;
            while (k < odo.size() && ++odo[k] == choices[k].size()) {
                odo[k] = 0;
                ++k;
            }
            if (k == odo.size()) {
                break;
            }
        }
    }
    std::vector<WeightedSentence> out;
    out.reserve(acc.size());
    for (auto& [tokens, p] : acc) {
        out.push_back({tokens, p});
    }
    return out;
}

/// Tokens that extend `prefix` along at least one template of the context.
inline std::vector<TokenId> valid_continuations(const GrammarWorld& world, std::size_t ctx,
                                                std::span<const TokenId> prefix) {
    std::set<TokenId> out;
    for (const auto& tpl : world.templates(ctx)) {
        if (tpl.weight <= 0.0 || prefix.size() > tpl.slots.size()) {
            continue;
        }
        bool consistent = true;
        for (std::size_t i = 0; i < prefix.size() && consistent; ++i) {
            consistent = world.slot_accepts(tpl.slots[i], prefix[i]);
        }
        if (!consistent) {
            continue;
        }
        if (prefix.size() == tpl.slots.size()) {
            out.insert(world.vocab().eos());
            continue;
        }
        const auto& slot = tpl.slots[prefix.size()];
        if (slot.kind == Slot::Kind::token) {
            out.insert(slot.token);
        } else {
            for (TokenId t : world.vocab().classes()[slot.class_index].members) {
                out.insert(t);
            }
        }
    }
    return {out.begin(), out.end()};
}

/// 1 for a valid continuation; otherwise max(0, 1 - d / d_max) where d is the
/// embedding distance to the nearest valid continuation; 0 off the grammar.
inline double true_token_reward(const GrammarWorld& world, std::size_t ctx, std::span<const TokenId> prefix,
                                TokenId token) {
    world.vocab().check(token);
    const auto valid = valid_continuations(world, ctx, prefix);
    if (valid.empty()) {
        return 0.0;
    }
    double nearest = std::numeric_limits<double>::infinity();
    for (TokenId v : valid) {
        if (v == token) {
            return 1.0;
        }
        nearest = std::min(nearest, embedding_distance(world.vocab(), token, v));
    }
    return std::max(0.0, 1.0 - nearest / world.d_max());
}

inline void validate_sample(const GrammarWorld& world, const SequenceSample& s) {
    world.check_context(s.context);
    if (s.tokens.empty() || s.tokens.size() > world.max_length()) {
        throw InvalidInput("sequence length must be in [1, max_length]");
    }
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
        world.vocab().check(s.tokens[i]);
        const bool is_eos = s.tokens[i] == world.vocab().eos();
        if (is_eos != (i + 1 == s.tokens.size())) {
            throw InvalidInput("sequence must contain exactly one EOS, at the end");
        }
    }
}

// ---------------------------------------------------------------------------
// Construction

struct ClassSpec {
    std::string name;
    std::vector<std::string> tokens;
    Vector weights;  // optional
};

struct SlotSpec {
    bool is_class = false;
    std::string name;
};

struct TemplateSpec {
    double weight = 0.0;
    std::vector<SlotSpec> slots;
};

struct ContextSpec {
    std::string name;
    std::optional<Vector> feature;
    std::vector<TemplateSpec> templates;
};

struct WorldSpec {
    std::uint64_t seed = 7;
    std::size_t embedding_dim = 16;
    std::size_t context_dim = 8;
    std::size_t max_length = 8;
    std::string bos = "<bos>";
    std::string eos = "<eos>";
    std::vector<ClassSpec> classes;
    std::map<std::string, Vector> embeddings;  // optional per-token override
    std::vector<ContextSpec> contexts;
    RewardRule reward_rule;
};

namespace detail {

inline Vector random_unit(Rng& rng, std::size_t dim) {
    Vector v(dim);
    double n = 0.0;
    while (n < 1e-12) {
        for (double& x : v) {
            x = rng.normal();
        }
        n = l2_norm(v);
    }
    for (double& x : v) {
        x /= n;
    }
    return v;
}

}  // namespace detail

/// Class centroids on the unit sphere (pairwise at least 0.6 apart), members
/// perturbed uniformly inside a 0.1-ball. BOS and EOS get their own centroids.
inline DenseMatrix synthetic_embeddings(const std::vector<std::vector<std::size_t>>& groups,
                                        std::size_t vocab_size, std::size_t dim, Rng& rng) {
    constexpr double min_centroid_gap = 0.6;
    constexpr double member_radius = 0.1;
    std::vector<Vector> centroids;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        for (int attempt = 0;; ++attempt) {
            if (attempt > 10000) {
                throw InvalidInput("synthetic_embeddings: cannot separate centroids; raise embedding_dim");
            }
            Vector c = detail::random_unit(rng, dim);
            bool ok = true;
            for (const auto& other : centroids) {
                double d2 = 0.0;
                for (std::size_t i = 0; i < dim; ++i) {
                    d2 += (c[i] - other[i]) * (c[i] - other[i]);
                }
                ok = ok && std::sqrt(d2) >= min_centroid_gap;
            }
            if (ok) {
                centroids.push_back(std::move(c));
                break;
            }
        }
    }
    DenseMatrix emb(vocab_size, dim);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        for (std::size_t tok : groups[g]) {
            const Vector dir = detail::random_unit(rng, dim);
            const double r = member_radius * std::pow(rng.uniform(), 1.0 / static_cast<double>(dim));
            for (std::size_t i = 0; i < dim; ++i) {
                emb(tok, i) = centroids[g][i] + r * dir[i];
            }
        }
    }
    return emb;
}

inline GrammarWorld build_world(const WorldSpec& spec) {
    if (spec.classes.empty() || spec.contexts.empty()) {
        throw InvalidInput("world spec needs classes and contexts");
    }
    std::vector<std::string> names{spec.bos, spec.eos};
    for (const auto& c : spec.classes) {
        names.insert(names.end(), c.tokens.begin(), c.tokens.end());
    }
    std::unordered_map<std::string, std::size_t> idx;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (!idx.emplace(names[i], i).second) {
            throw InvalidInput("world spec: duplicate token name '" + names[i] + "'");
        }
    }

    std::vector<std::vector<std::size_t>> groups{{0}, {1}};
    std::vector<SynonymClass> classes;
    for (const auto& c : spec.classes) {
        SynonymClass sc;
        sc.name = c.name;
        sc.member_weights = c.weights;
        std::vector<std::size_t> group;
        for (const auto& t : c.tokens) {
            sc.members.push_back(token_id(idx.at(t)));
            group.push_back(idx.at(t));
        }
        groups.push_back(std::move(group));
        classes.push_back(std::move(sc));
    }

    Rng emb_rng(derive_seed(spec.seed, 1));
    DenseMatrix emb = synthetic_embeddings(groups, names.size(), spec.embedding_dim, emb_rng);
    for (const auto& [tok, vec] : spec.embeddings) {
        const auto it = idx.find(tok);
        if (it == idx.end()) {
            throw InvalidInput("world spec: embedding for unknown token '" + tok + "'");
        }
        if (vec.size() != spec.embedding_dim) {
            throw InvalidInput("world spec: embedding for '" + tok + "' has wrong dimension");
        }
        std::copy(vec.begin(), vec.end(), emb.row(it->second).begin());
    }

    Vocabulary vocab(names, token_id(0), token_id(1), std::move(classes), std::move(emb));
    if (spec.embeddings.empty()) {
        const auto sep = embedding_separation(vocab);
        if (!(sep.max_intra_class < sep.min_inter_class)) {
            throw InvalidInput("synthetic embeddings violate class separation");
        }
    }

    Rng ctx_rng(derive_seed(spec.seed, 2));
    std::vector<Context> contexts;
    std::vector<std::vector<SentenceTemplate>> templates;
    for (std::size_t c = 0; c < spec.contexts.size(); ++c) {
        const auto& cs = spec.contexts[c];
        Context ctx;
        ctx.id = c;
        ctx.name = cs.name;
        if (cs.feature) {
            ctx.feature = *cs.feature;
        } else {
            ctx.feature.resize(spec.context_dim);
            for (double& x : ctx.feature) {
                x = ctx_rng.uniform(-1.0, 1.0);
            }
        }
        contexts.push_back(std::move(ctx));
        std::vector<SentenceTemplate> tpls;
        for (const auto& ts : cs.templates) {
            SentenceTemplate tpl;
            tpl.weight = ts.weight;
            for (const auto& ss : ts.slots) {
                Slot slot;
                if (ss.is_class) {
                    const auto ci = vocab.class_index(ss.name);
                    if (!ci) {
                        throw InvalidInput("world spec: unknown class '" + ss.name + "'");
                    }
                    slot.kind = Slot::Kind::synonym_class;
                    slot.class_index = *ci;
                } else {
                    slot.kind = Slot::Kind::token;
                    slot.token = vocab.id(ss.name);
                }
                tpl.slots.push_back(slot);
            }
            tpls.push_back(std::move(tpl));
        }
        templates.push_back(std::move(tpls));
    }
    return GrammarWorld(std::move(vocab), std::move(contexts), std::move(templates), spec.reward_rule,
                        spec.max_length);
}

inline SlotSpec class_slot(std::string name) { return {true, std::move(name)}; }
inline SlotSpec token_slot(std::string name) { return {false, std::move(name)}; }

/// Three scenes, 24 content tokens in 8 synonym classes, max length 8.
inline WorldSpec default_world_spec(std::uint64_t seed = 7) {
    WorldSpec w;
    w.seed = seed;
    w.classes = {
        {"DET", {"a", "the", "one"}, {}},
        {"ANIMAL", {"dog", "puppy", "hound"}, {}},
        {"PERSON", {"man", "guy", "fellow"}, {}},
        {"VEHICLE", {"bus", "coach", "van"}, {}},
        {"MOTION", {"runs", "walks", "jogs"}, {}},
        {"HOLD", {"holds", "carries", "grabs"}, {}},
        {"OBJECT", {"ball", "toy", "stick"}, {}},
        {"PLACE", {"home", "outside", "away"}, {}},
    };
    w.contexts = {
        {"park",
         std::nullopt,
         {
             {0.5, {class_slot("DET"), class_slot("ANIMAL"), class_slot("MOTION"), class_slot("PLACE")}},
             {0.3, {token_slot("a"), class_slot("ANIMAL"), class_slot("HOLD"), token_slot("the"),
                    class_slot("OBJECT")}},
             {0.2, {class_slot("ANIMAL"), class_slot("MOTION")}},
         }},
        {"yard",
         std::nullopt,
         {
             {0.6, {token_slot("the"), class_slot("PERSON"), class_slot("HOLD"), class_slot("DET"),
                    class_slot("OBJECT")}},
             {0.4, {class_slot("DET"), class_slot("PERSON"), class_slot("MOTION"), class_slot("PLACE")}},
         }},
        {"street",
         std::nullopt,
         {
             {0.5, {token_slot("the"), class_slot("VEHICLE"), class_slot("MOTION"), class_slot("PLACE")}},
             {0.5, {token_slot("a"), class_slot("PERSON"), class_slot("HOLD"), token_slot("the"),
                    class_slot("VEHICLE")}},
         }},
    };
    return w;
}

inline GrammarWorld default_world(std::uint64_t seed = 7) { return build_world(default_world_spec(seed)); }

// ---------------------------------------------------------------------------
// World definition files (JSON, version 1)

inline constexpr int world_format_version = 1;

namespace detail {

inline void require_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                         std::string_view where) {
    if (!j.is_object()) {
        throw FormatError(std::string(where) + ": expected an object");
    }
    for (const auto& [key, _] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw FormatError(std::string(where) + ": unknown key '" + key + "'");
        }
    }
}

}  // namespace detail

inline WorldSpec world_spec_from_json(const nlohmann::json& j) {
    using detail::require_keys;
    try {
        require_keys(j, {"version", "seed", "embedding_dim", "context_dim", "max_length", "bos", "eos",
                         "classes", "embeddings", "contexts", "reward_rule"},
                     "world");
        if (!j.contains("version")) {
            throw FormatError("world: missing required 'version'");
        }
        if (j.at("version").get<int>() != world_format_version) {
            throw VersionError("world: unsupported version " + j.at("version").dump());
        }
        WorldSpec w;
        w.seed = j.value("seed", w.seed);
        w.embedding_dim = j.value("embedding_dim", w.embedding_dim);
        w.context_dim = j.value("context_dim", w.context_dim);
        w.max_length = j.value("max_length", w.max_length);
        w.bos = j.value("bos", w.bos);
        w.eos = j.value("eos", w.eos);
        for (const auto& c : j.at("classes")) {
            require_keys(c, {"name", "tokens", "weights"}, "world.classes[]");
            w.classes.push_back({c.at("name").get<std::string>(), c.at("tokens").get<std::vector<std::string>>(),
                                 c.value("weights", Vector{})});
        }
        if (j.contains("embeddings")) {
            w.embeddings = j.at("embeddings").get<std::map<std::string, Vector>>();
        }
        for (const auto& c : j.at("contexts")) {
            require_keys(c, {"name", "feature", "templates"}, "world.contexts[]");
            ContextSpec cs;
            cs.name = c.value("name", std::string{});
            if (c.contains("feature")) {
                cs.feature = c.at("feature").get<Vector>();
            }
            for (const auto& t : c.at("templates")) {
                require_keys(t, {"weight", "slots"}, "world.contexts[].templates[]");
                TemplateSpec ts;
                ts.weight = t.at("weight").get<double>();
                for (const auto& s : t.at("slots")) {
                    const auto text = s.get<std::string>();
                    if (text.rfind("class:", 0) == 0) {
                        ts.slots.push_back(class_slot(text.substr(6)));
                    } else if (text.rfind("token:", 0) == 0) {
                        ts.slots.push_back(token_slot(text.substr(6)));
                    } else {
                        throw FormatError("world: slot '" + text + "' must start with class: or token:");
                    }
                }
                cs.templates.push_back(std::move(ts));
            }
            w.contexts.push_back(std::move(cs));
        }
        if (j.contains("reward_rule")) {
            require_keys(j.at("reward_rule"), {"d_max"}, "world.reward_rule");
            if (j.at("reward_rule").contains("d_max")) {
                w.reward_rule.d_max = j.at("reward_rule").at("d_max").get<double>();
            }
        }
        return w;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("world: ") + e.what());
    }
}

inline nlohmann::json world_spec_to_json(const WorldSpec& w) {
    nlohmann::json j;
    j["version"] = world_format_version;
    j["seed"] = w.seed;
    j["embedding_dim"] = w.embedding_dim;
    j["context_dim"] = w.context_dim;
    j["max_length"] = w.max_length;
    j["bos"] = w.bos;
    j["eos"] = w.eos;
    j["classes"] = nlohmann::json::array();
    for (const auto& c : w.classes) {
        nlohmann::json cj{{"name", c.name}, {"tokens", c.tokens}};
        if (!c.weights.empty()) {
            cj["weights"] = c.weights;
        }
        j["classes"].push_back(cj);
    }
    if (!w.embeddings.empty()) {
        j["embeddings"] = w.embeddings;
    }
    j["contexts"] = nlohmann::json::array();
    for (const auto& c : w.contexts) {
        nlohmann::json cj{{"name", c.name}, {"templates", nlohmann::json::array()}};
        if (c.feature) {
            cj["feature"] = *c.feature;
        }
        for (const auto& t : c.templates) {
            nlohmann::json slots = nlohmann::json::array();
            for (const auto& s : t.slots) {
                slots.push_back((s.is_class ? "class:" : "token:") + s.name);
            }
            cj["templates"].push_back({{"weight", t.weight}, {"slots", slots}});
        }
        j["contexts"].push_back(cj);
    }
    if (w.reward_rule.d_max) {
        j["reward_rule"] = {{"d_max", *w.reward_rule.d_max}};
    }
    return j;
}

inline WorldSpec load_world_spec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InvalidInput("cannot open world file " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("world file " + path.string() + ": " + e.what());
    }
    return world_spec_from_json(j);
}

}  // namespace rairl
