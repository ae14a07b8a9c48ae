#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "rairl/envworld.hpp"

using namespace rairl;

namespace {

// Five tokens in the plane with hand-placed embeddings.
WorldSpec tiny_spec() {
    WorldSpec w;
    w.embedding_dim = 2;
    w.context_dim = 2;
    w.max_length = 4;
    w.classes = {{"A", {"x", "y"}, {0.25, 0.75}}, {"B", {"z"}, {}}};
    w.embeddings = {{"<bos>", {10.0, 10.0}},
                    {"<eos>", {-10.0, 10.0}},
                    {"x", {0.0, 0.0}},
                    {"y", {0.0, 1.0}},
                    {"z", {3.0, 0.0}}};
    w.contexts = {{"only", Vector{0.5, -0.5}, {{1.0, {class_slot("A"), token_slot("z")}}}}};
    w.reward_rule.d_max = 4.0;
    return w;
}

TokenSeq seq(const GrammarWorld& w, std::initializer_list<const char*> names) {
    TokenSeq out;
    for (const char* n : names) {
        out.push_back(w.vocab().id(n));
    }
    return out;
}

}  // namespace

TEST(DefaultWorld, Shape) {
    const auto w = default_world();
    EXPECT_EQ(w.vocab().size(), 26u);
    EXPECT_EQ(w.vocab().content_tokens().size(), 24u);
    EXPECT_EQ(w.vocab().classes().size(), 8u);
    EXPECT_EQ(w.context_count(), 3u);
    EXPECT_EQ(w.max_length(), 8u);
    EXPECT_EQ(w.vocab().embedding_dim(), 16u);
    EXPECT_EQ(w.context_dim(), 8u);
}

TEST(DefaultWorld, DeterministicPerSeed) {
    const auto a = default_world(7);
    const auto b = default_world(7);
    const auto c = default_world(8);
    EXPECT_EQ(a.vocab().embeddings(), b.vocab().embeddings());
    EXPECT_EQ(a.context(1).feature, b.context(1).feature);
    EXPECT_FALSE(a.vocab().embeddings() == c.vocab().embeddings());
}

TEST(DefaultWorld, SynonymsCloserThanOtherTokens) {
    for (std::uint64_t seed : {1u, 7u, 99u}) {
        const auto w = default_world(seed);
        const auto sep = embedding_separation(w.vocab());
        EXPECT_LT(sep.max_intra_class, sep.min_inter_class);
        EXPECT_LE(sep.max_intra_class, 0.2 + 1e-12);
        EXPECT_DOUBLE_EQ(w.d_max(), sep.max_pairwise);
    }
}

TEST(DefaultWorld, SeparationMatchesBruteForce) {
    const auto w = default_world();
    const auto& v = w.vocab();
    double intra = 0.0;
    double inter = 1e9;
    for (std::size_t i = 0; i < v.size(); ++i) {
        for (std::size_t j = 0; j < v.size(); ++j) {
            if (i == j) {
                continue;
            }
            const auto ci = v.class_of(token_id(i));
            const auto cj = v.class_of(token_id(j));
            double d2 = 0.0;
            for (std::size_t k = 0; k < v.embedding_dim(); ++k) {
                const double d = v.embeddings()(i, k) - v.embeddings()(j, k);
                d2 += d * d;
            }
            if (ci && cj && *ci == *cj) {
                intra = std::max(intra, std::sqrt(d2));
            } else {
                inter = std::min(inter, std::sqrt(d2));
            }
        }
    }
    const auto sep = embedding_separation(v);
    EXPECT_NEAR(sep.max_intra_class, intra, 1e-12);
    EXPECT_NEAR(sep.min_inter_class, inter, 1e-12);
}

TEST(TrueDistribution, EnumerationSumsToOne) {
    const auto w = default_world();
    for (std::size_t c = 0; c < w.context_count(); ++c) {
        double total = 0.0;
        for (const auto& s : enumerate_true_sentences(w, c)) {
            EXPECT_GT(s.probability, 0.0);
            EXPECT_NEAR(true_sentence_prob(w, c, s.tokens), s.probability, 1e-15);
            total += s.probability;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(TrueDistribution, HandComputedProbabilities) {
    const auto w = default_world();
    // park: 0.2 * (1/3) * (1/3)
    EXPECT_NEAR(true_sentence_prob(w, 0, seq(w, {"dog", "runs", "<eos>"})), 0.2 / 9.0, 1e-15);
    // park: 0.5 * (1/3)^4
    EXPECT_NEAR(true_sentence_prob(w, 0, seq(w, {"a", "dog", "runs", "home", "<eos>"})), 0.5 / 81.0, 1e-15);
    // park, fixed tokens "a" and "the": 0.3 * (1/3)^3
    EXPECT_NEAR(true_sentence_prob(w, 0, seq(w, {"a", "dog", "holds", "the", "ball", "<eos>"})), 0.3 / 27.0,
                1e-15);
    // yard: "the" is both a fixed token and a DET member; only the first template has five slots.
    EXPECT_NEAR(true_sentence_prob(w, 1, seq(w, {"the", "man", "holds", "a", "ball", "<eos>"})), 0.6 / 81.0,
                1e-15);
    EXPECT_EQ(true_sentence_prob(w, 0, seq(w, {"dog", "runs"})), 0.0);
    EXPECT_EQ(true_sentence_prob(w, 0, seq(w, {"bus", "runs", "<eos>"})), 0.0);
    EXPECT_EQ(true_sentence_prob(w, 2, seq(w, {"dog", "runs", "<eos>"})), 0.0);
}

TEST(TrueDistribution, SamplerMatchesProbabilities) {
    const auto w = default_world();
    Rng rng(123);
    const std::size_t n = 60000;
    std::map<TokenSeq, std::size_t> counts;
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = sample_true_sentence(w, 1, rng);
        EXPECT_EQ(s.source, SampleSource::ground_truth);
        ++counts[s.tokens];
    }
    for (const auto& [tokens, k] : counts) {
        const double p = true_sentence_prob(w, 1, tokens);
        ASSERT_GT(p, 0.0);
        const double sd = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
        EXPECT_NEAR(static_cast<double>(k) / static_cast<double>(n), p, 5.0 * sd + 1e-4);
    }
    EXPECT_EQ(counts.size(), enumerate_true_sentences(w, 1).size());
}

TEST(TrueDistribution, SampledSentencesValidate) {
    const auto w = default_world();
    Rng rng(4);
    for (int i = 0; i < 500; ++i) {
        const auto s = sample_pair(w, rng);
        EXPECT_NO_THROW(validate_sample(w, s));
        EXPECT_GT(true_sentence_prob(w, s.context, s.tokens), 0.0);
    }
}

TEST(TrueDistribution, EnumerationCapRaises) {
    const auto w = default_world();
    EXPECT_THROW(enumerate_true_sentences(w, 0, 10), Unsupported);
}

TEST(TokenReward, HandPlacedEmbeddings) {
    const auto w = build_world(tiny_spec());
    ASSERT_DOUBLE_EQ(w.d_max(), 4.0);
    const TokenSeq none;
    EXPECT_DOUBLE_EQ(true_token_reward(w, 0, none, w.vocab().id("x")), 1.0);
    EXPECT_DOUBLE_EQ(true_token_reward(w, 0, none, w.vocab().id("y")), 1.0);
    // z is 3 from the nearest valid token x
    EXPECT_NEAR(true_token_reward(w, 0, none, w.vocab().id("z")), 0.25, 1e-15);
    // after "x", only z is valid; y sits sqrt(10) away
    EXPECT_NEAR(true_token_reward(w, 0, seq(w, {"x"}), w.vocab().id("y")), 1.0 - std::sqrt(10.0) / 4.0, 1e-15);
    EXPECT_DOUBLE_EQ(true_token_reward(w, 0, seq(w, {"y", "z"}), w.vocab().id("<eos>")), 1.0);
    // far outside d_max
    EXPECT_EQ(true_token_reward(w, 0, none, w.vocab().id("<eos>")), 0.0);
    // prefix already off the grammar
    EXPECT_EQ(true_token_reward(w, 0, seq(w, {"z"}), w.vocab().id("z")), 0.0);
}

TEST(TokenReward, BoundedOnDefaultWorld) {
    const auto w = default_world();
    Rng rng(8);
    for (int i = 0; i < 200; ++i) {
        const auto s = sample_pair(w, rng);
        for (std::size_t t = 0; t < s.tokens.size(); ++t) {
            const std::span<const TokenId> prefix(s.tokens.data(), t);
            EXPECT_DOUBLE_EQ(true_token_reward(w, s.context, prefix, s.tokens[t]), 1.0);
            const auto other = token_id(rng.index(w.vocab().size()));
            const double r = true_token_reward(w, s.context, prefix, other);
            EXPECT_GE(r, 0.0);
            EXPECT_LE(r, 1.0);
        }
    }
}

TEST(TokenReward, SharedPrefixAcceptsBothTemplates) {
    const auto w = default_world();
    // "the" opens both yard templates, so HOLD and MOTION continue it but OBJECT does not.
    const auto prefix = seq(w, {"the", "man"});
    const double near = true_token_reward(w, 1, prefix, w.vocab().id("carries"));
    EXPECT_EQ(near, 1.0);
    const double motion = true_token_reward(w, 1, prefix, w.vocab().id("runs"));
    EXPECT_EQ(motion, 1.0);
    const double obj = true_token_reward(w, 1, prefix, w.vocab().id("ball"));
    EXPECT_LT(obj, 1.0);
}

TEST(TinyWorld, ClassWeightsRespected) {
    const auto w = build_world(tiny_spec());
    EXPECT_NEAR(true_sentence_prob(w, 0, seq(w, {"x", "z", "<eos>"})), 0.25, 1e-15);
    EXPECT_NEAR(true_sentence_prob(w, 0, seq(w, {"y", "z", "<eos>"})), 0.75, 1e-15);
    const auto cont = valid_continuations(w, 0, seq(w, {"x"}));
    ASSERT_EQ(cont.size(), 1u);
    EXPECT_EQ(cont[0], w.vocab().id("z"));
}

TEST(Validation, RejectsMalformedWorlds) {
    auto bad_weights = tiny_spec();
    bad_weights.contexts[0].templates[0].weight = 0.5;
    EXPECT_THROW(build_world(bad_weights), InvalidInput);

    auto dup = tiny_spec();
    dup.classes[1].tokens = {"x"};
    EXPECT_THROW(build_world(dup), InvalidInput);

    auto unknown = tiny_spec();
    unknown.contexts[0].templates[0].slots.push_back(class_slot("C"));
    EXPECT_THROW(build_world(unknown), InvalidInput);

    auto too_long = tiny_spec();
    too_long.max_length = 2;
    EXPECT_THROW(build_world(too_long), InvalidInput);

    auto member_weights = tiny_spec();
    member_weights.classes[0].weights = {0.5, 0.6};
    EXPECT_THROW(build_world(member_weights), InvalidInput);
}

TEST(Validation, SampleChecks) {
    const auto w = default_world();
    EXPECT_THROW(validate_sample(w, {5, seq(w, {"dog", "<eos>"}), SampleSource::generated}), InvalidInput);
    EXPECT_THROW(validate_sample(w, {0, seq(w, {"dog", "runs"}), SampleSource::generated}), InvalidInput);
    EXPECT_THROW(validate_sample(w, {0, seq(w, {"<eos>", "dog", "<eos>"}), SampleSource::generated}),
                 InvalidInput);
    EXPECT_THROW(validate_sample(w, {0, {}, SampleSource::generated}), InvalidInput);
    TokenSeq long_seq(9, w.vocab().id("dog"));
    long_seq.back() = w.vocab().eos();
    EXPECT_THROW(validate_sample(w, {0, long_seq, SampleSource::generated}), InvalidInput);
    EXPECT_NO_THROW(validate_sample(w, {0, seq(w, {"bus", "<eos>"}), SampleSource::generated}));
}

TEST(WorldJson, RoundTrip) {
    const auto spec = default_world_spec(11);
    const auto j = world_spec_to_json(spec);
    EXPECT_EQ(j.at("version"), world_format_version);
    const auto back = world_spec_from_json(j);
    EXPECT_EQ(world_spec_to_json(back), j);
    const auto a = build_world(spec);
    const auto b = build_world(back);
    EXPECT_EQ(a.vocab().embeddings(), b.vocab().embeddings());
}

TEST(WorldJson, VersionAndKeysEnforced) {
    auto j = world_spec_to_json(tiny_spec());
    auto missing = j;
    missing.erase("version");
    EXPECT_THROW(world_spec_from_json(missing), FormatError);
    auto future = j;
    future["version"] = 2;
    EXPECT_THROW(world_spec_from_json(future), VersionError);
    auto extra = j;
    extra["colour"] = "blue";
    EXPECT_THROW(world_spec_from_json(extra), FormatError);
    auto bad_slot = j;
    bad_slot["contexts"][0]["templates"][0]["slots"][0] = "x";
    EXPECT_THROW(world_spec_from_json(bad_slot), FormatError);
    auto bad_type = j;
    bad_type["max_length"] = "long";
    EXPECT_THROW(world_spec_from_json(bad_type), FormatError);
}

TEST(WorldJson, LoadsFromFile) {
    const auto path = std::filesystem::temp_directory_path() / "rairl_world_test.json";
    {
        std::ofstream out(path);
        out << world_spec_to_json(tiny_spec()).dump(2);
    }
    const auto w = build_world(load_world_spec(path));
    EXPECT_EQ(w.vocab().size(), 5u);
    std::filesystem::remove(path);
    EXPECT_THROW(load_world_spec(path), InvalidInput);
}

namespace {

WorldSpec two_template_spec(double w0, double w1) {
    WorldSpec w;
    w.embedding_dim = 3;
    w.context_dim = 2;
    w.max_length = 3;
    w.classes = {{"N", {"p", "q"}, {}}, {"V", {"r"}, {}}};
    w.contexts = {{"c", std::nullopt, {{w0, {token_slot("p"), token_slot("r")}}, {w1, {token_slot("q")}}}}};
    return w;
}

}  // namespace

TEST(TrueDistribution, SingleTemplateAlwaysSampled) {
    auto spec = two_template_spec(1.0, 0.0);
    const auto w = build_world(spec);
    Rng rng(4);
    const auto expect = seq(w, {"p", "r", "<eos>"});
    for (int i = 0; i < 200; ++i) {
        EXPECT_EQ(sample_true_sentence(w, 0, rng).tokens, expect);
    }
    EXPECT_DOUBLE_EQ(true_sentence_prob(w, 0, expect), 1.0);
    EXPECT_EQ(true_sentence_prob(w, 0, seq(w, {"q", "<eos>"})), 0.0);
    EXPECT_EQ(true_sentence_prob(w, 0, seq(w, {"r", "p", "<eos>"})), 0.0);
}

TEST(TrueDistribution, EvenTemplatesWithinBinomialBounds) {
    const auto w = build_world(two_template_spec(0.5, 0.5));
    Rng rng(5);
    const auto first = seq(w, {"p", "r", "<eos>"});
    int hits = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        hits += sample_true_sentence(w, 0, rng).tokens == first;
    }
    // 3 sigma of Binomial(10000, 0.5) is 150.
    EXPECT_LE(std::abs(hits - n / 2), 150);
}

TEST(TrueDistribution, UniformSynonymSlotSplitsEvenly) {
    WorldSpec spec;
    spec.embedding_dim = 2;
    spec.context_dim = 1;
    spec.max_length = 2;
    spec.classes = {{"A", {"u", "v"}, {}}};
    spec.contexts = {{"c", std::nullopt, {{1.0, {class_slot("A")}}}}};
    const auto w = build_world(spec);
    EXPECT_DOUBLE_EQ(true_sentence_prob(w, 0, seq(w, {"u", "<eos>"})), 0.5);
    EXPECT_DOUBLE_EQ(true_sentence_prob(w, 0, seq(w, {"v", "<eos>"})), 0.5);
}

TEST(TokenReward, DecreasesWithDistanceToValidSet) {
    const auto w = default_world();
    const auto& v = w.vocab();
    Rng rng(9);
    for (int i = 0; i < 50; ++i) {
        const auto s = sample_pair(w, rng);
        const std::size_t cut = rng.index(s.tokens.size());
        const std::span<const TokenId> prefix(s.tokens.data(), cut);
        const auto valid = valid_continuations(w, s.context, prefix);
        std::vector<std::pair<double, double>> by_distance;
        for (std::size_t k = 0; k < v.size(); ++k) {
            const auto tok = token_id(k);
            if (std::find(valid.begin(), valid.end(), tok) != valid.end()) {
                EXPECT_EQ(true_token_reward(w, s.context, prefix, tok), 1.0);
                continue;
            }
            double nearest = std::numeric_limits<double>::infinity();
            for (TokenId t : valid) {
                nearest = std::min(nearest, embedding_distance(v, tok, t));
            }
            const double r = true_token_reward(w, s.context, prefix, tok);
            EXPECT_GE(r, 0.0);
            EXPECT_LT(r, 1.0);
            by_distance.emplace_back(nearest, r);
        }
        std::sort(by_distance.begin(), by_distance.end());
        for (std::size_t k = 1; k < by_distance.size(); ++k) {
            EXPECT_LE(by_distance[k].second, by_distance[k - 1].second);
        }
    }
}

TEST(TokenReward, SynonymOutsideTemplateStillValid) {
    // The class weight of y is nonzero but any class member fills a class slot.
    auto spec = tiny_spec();
    spec.classes[0].weights = Vector{1.0, 0.0};
    const auto w = build_world(spec);
    EXPECT_EQ(true_token_reward(w, 0, TokenSeq{}, w.vocab().id("y")), 1.0);
}

TEST(EmbeddingDistance, ZeroOnDiagonalAndSymmetric) {
    const auto w = default_world();
    const auto& v = w.vocab();
    for (std::size_t a = 0; a < v.size(); ++a) {
        EXPECT_EQ(embedding_distance(v, token_id(a), token_id(a)), 0.0);
        for (std::size_t b = 0; b < v.size(); ++b) {
            EXPECT_EQ(embedding_distance(v, token_id(a), token_id(b)), embedding_distance(v, token_id(b), token_id(a)));
        }
    }
    EXPECT_THROW(embedding_distance(v, token_id(0), token_id(v.size())), InvalidInput);
}
