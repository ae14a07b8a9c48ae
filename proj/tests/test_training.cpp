#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "rairl/checkpoint.hpp"
#include "rairl/training.hpp"

using namespace rairl;

namespace {

TrainingConfig small_config(LossKind kind = LossKind::rairl) {
    TrainingConfig c;
    c.loss = LossOptions::defaults(kind);
    c.iterations = 6;
    c.batch_size = 4;
    c.eval_every = 2;
    c.probe_batch = 4;
    c.diversity_samples = 5;
    c.corpus_size = 20;
    c.hidden_dim = 8;
    c.seed = 42;
    return c;
}

const GrammarWorld& world() {
    static const GrammarWorld w = default_world();
    return w;
}

std::string csv(const RunRecord& r) {
    std::ostringstream os;
    write_run_csv(os, r);
    return os.str();
}

std::string bytes(const Checkpoint& ck) {
    std::ostringstream os;
    write_checkpoint(os, ck);
    return os.str();
}

}  // namespace

TEST(TrainingConfig, JsonRoundTrip) {
    auto c = small_config(LossKind::airl);
    c.gamma = 0.9;
    c.loss.use_conditional_term = true;
    EXPECT_EQ(training_config_from_json(training_config_to_json(c)), c);
}

TEST(TrainingConfig, LossKindSetsTermDefaults) {
    const auto c = training_config_from_json({{"loss", "airl"}});
    EXPECT_EQ(c.loss, LossOptions::defaults(LossKind::airl));
    const auto d = training_config_from_json({{"loss", "rairl"}, {"use_conditional_term", false}});
    EXPECT_TRUE(d.loss.use_constant_term);
    EXPECT_FALSE(d.loss.use_conditional_term);
}

TEST(TrainingConfig, RejectsBadInput) {
    EXPECT_THROW(training_config_from_json({{"iterationz", 5}}), ConfigError);
    EXPECT_THROW(training_config_from_json({{"loss", "ppo"}}), ConfigError);
    EXPECT_THROW(training_config_from_json({{"generator_lr", 0.0}}), ConfigError);
    EXPECT_THROW(training_config_from_json({{"discriminator_lr", -1.0}}), ConfigError);
    EXPECT_THROW(training_config_from_json({{"gamma", 0.0}}), ConfigError);
    EXPECT_THROW(training_config_from_json({{"gamma", 1.5}}), ConfigError);
    EXPECT_THROW(training_config_from_json({{"batch_size", 0}}), ConfigError);
    EXPECT_THROW(training_config_from_json({{"iterations", "many"}}), ConfigError);
}

TEST(PolicyKl, TwoSentenceArithmetic) {
    const std::vector<WeightedSentence> support{{{token_id(2), token_id(1)}, 0.5}, {{token_id(3), token_id(1)}, 0.5}};
    const auto model = [](const TokenSeq& t) { return std::log(t[0] == token_id(2) ? 0.9 : 0.1); };
    // 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1)
    EXPECT_NEAR(kl_over_support(support, model), 0.510825623765990683, 1e-15);
    const auto truth = [](const TokenSeq&) { return std::log(0.5); };
    EXPECT_EQ(kl_over_support(support, truth), 0.0);
}

TEST(PolicyKl, TrueDistributionGivesZero) {
    const auto& w = world();
    for (std::size_t c = 0; c < w.context_count(); ++c) {
        const auto support = enumerate_true_sentences(w, c);
        const auto exact = [&](const TokenSeq& t) { return std::log(true_sentence_prob(w, c, t)); };
        EXPECT_NEAR(kl_over_support(support, exact), 0.0, 1e-12);
    }
}

TEST(PolicyKl, NonNegativeAndCapped) {
    const auto& w = world();
    Rng rng(3);
    for (int i = 0; i < 3; ++i) {
        const auto p = PolicyNet::random(shape_for(w), rng);
        for (std::size_t c = 0; c < w.context_count(); ++c) {
            EXPECT_GT(exact_policy_kl(w, p, c), 0.0);
        }
    }
    const auto p = PolicyNet::random(shape_for(w), rng);
    EXPECT_THROW(exact_policy_kl(w, p, 0, 10), Unsupported);
}

TEST(Trainer, EvalOnlyKeepsParameters) {
    auto c = small_config();
    c.iterations = 0;
    Trainer t(c, world());
    const auto before = t.state();
    const auto rec = t.run(0);
    ASSERT_EQ(rec.points.size(), 1u);
    EXPECT_EQ(rec.points[0].iteration, 0u);
    EXPECT_EQ(t.state(), before);
    EXPECT_EQ(rec.points[0].kl.size(), world().context_count());
    EXPECT_FALSE(rec.abort);
}

TEST(Trainer, EvaluatePointsAndRanges) {
    const auto c = small_config();
    Trainer t(c, world());
    const auto rec = t.run(c.iterations);
    ASSERT_EQ(rec.points.size(), 4u);
    for (std::size_t i = 0; i < rec.points.size(); ++i) {
        const auto& p = rec.points[i];
        EXPECT_EQ(p.iteration, 2 * i);
        EXPECT_GT(p.mean_d_gen, 0.0);
        EXPECT_LT(p.mean_d_gen, 1.0);
        EXPECT_GE(p.mean_abs_dev, std::abs(p.mean_d_gen - 0.5) - 1e-15);
        EXPECT_GT(p.kl_mean, 0.0);
        EXPECT_GE(p.novel_ratio, 0.0);
        EXPECT_LE(p.novel_ratio, 1.0);
        EXPECT_LE(p.distinct, 15u);
        EXPECT_TRUE(std::isfinite(p.disc_loss));
    }
    EXPECT_EQ(t.iteration(), 6u);
}

TEST(Trainer, Deterministic) {
    const auto c = small_config();
    Trainer a(c, world());
    Trainer b(c, world());
    const auto ra = a.run(c.iterations);
    const auto rb = b.run(c.iterations);
    EXPECT_EQ(ra, rb);
    EXPECT_EQ(csv(ra), csv(rb));
    EXPECT_EQ(a.state(), b.state());

    auto other = c;
    other.seed = 43;
    Trainer d(other, world());
    EXPECT_NE(d.run(other.iterations), ra);
}

TEST(Trainer, EvaluationDoesNotPerturbTraining) {
    auto c = small_config();
    Trainer a(c, world());
    a.run(c.iterations);
    c.eval_every = 1;
    Trainer b(c, world());
    b.run(c.iterations);
    EXPECT_EQ(a.state(), b.state());
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
    const auto c = small_config();
    Trainer full(c, world());
    const auto whole = full.run(c.iterations);

    Trainer first(c, world());
    const auto head = first.run(3);
    Checkpoint ck{training_config_to_json(c), first.state()};
    std::istringstream is(bytes(ck));
    const auto loaded = read_checkpoint(is);
    Trainer second(training_config_from_json(loaded.config), world(), loaded.state);
    EXPECT_EQ(second.iteration(), 3u);
    const auto tail = second.run(c.iterations, head);
    EXPECT_EQ(tail, whole);
    EXPECT_EQ(second.state(), full.state());
}

TEST(Trainer, AllLossKindsStayFinite) {
    for (auto kind : {LossKind::mle, LossKind::rl, LossKind::gan, LossKind::airl, LossKind::rairl}) {
        auto c = small_config(kind);
        c.loss.mle_full_form = kind == LossKind::mle;
        Trainer t(c, world());
        const auto rec = t.run(c.iterations);
        EXPECT_FALSE(rec.abort) << to_string(kind);
        EXPECT_TRUE(t.policy().params().all_finite()) << to_string(kind);
        EXPECT_TRUE(t.discriminator().params().all_finite()) << to_string(kind);
    }
}

TEST(Trainer, GanTrainsOnlySentenceHead) {
    const auto c = small_config(LossKind::gan);
    Trainer t(c, world());
    const auto before = t.discriminator().params();
    t.run(2);
    const auto& after = t.discriminator().params();
    for (std::size_t b = 0; b < after.block_count(); ++b) {
        const auto& name = after.name(b);
        const bool head = name == "disc.sent_w" || name == "disc.sent_b";
        if (!head && name.starts_with("disc.g_")) {
            EXPECT_EQ(after[b], before[b]) << name;
        }
        if (head) {
            EXPECT_NE(after[b], before[b]) << name;
        }
    }
}

TEST(Trainer, NonFiniteParametersAbort) {
    const auto c = small_config();
    Trainer t(c, world());
    auto s = t.state();
    s.disc[0](0, 0) = std::numeric_limits<double>::quiet_NaN();
    s.disc.block("disc.g_out_b")(0, 0) = std::numeric_limits<double>::quiet_NaN();
    t.restore(s);
    const auto rec = t.run(c.iterations, RunRecord{world().context_count(), {RunPoint{}}, std::nullopt});
    ASSERT_TRUE(rec.abort);
    EXPECT_EQ(rec.abort->iteration, 1u);
    EXPECT_NE(rec.abort->message.find("non-finite"), std::string::npos);
}

TEST(Trainer, EmbeddingInitNeedsMatchingDim) {
    auto c = small_config();
    c.embedding_dim = 5;
    EXPECT_THROW(Trainer(c, world()), ConfigError);
    c.init_embeddings_from_world = false;
    EXPECT_NO_THROW(Trainer(c, world()));
}

TEST(RunCsv, HeaderAndRows) {
    const auto c = small_config();
    Trainer t(c, world());
    const auto rec = t.run(4);
    const auto text = csv(rec);
    std::istringstream is(text);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line,
              "iteration,mean_d_gen,std_d_gen,mean_d_true,mean_abs_dev,disc_loss,gen_loss,kl_0,kl_1,kl_2,kl_mean,"
              "distinct,coverage,novel_ratio,clamped");
    std::size_t rows = 0;
    while (std::getline(is, line)) {
        ++rows;
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 14);
    }
    EXPECT_EQ(rows, rec.points.size());
}

TEST(FormatDouble, ShortestRoundTrip) {
    EXPECT_EQ(format_double(0.1), "0.1");
    EXPECT_EQ(format_double(1.0), "1");
    EXPECT_EQ(format_double(-2.5e-300), "-2.5e-300");
    EXPECT_EQ(std::stod(format_double(1.0 / 3.0)), 1.0 / 3.0);
    EXPECT_EQ(format_double(std::nan("")), "nan");
}

TEST(FinalWindow, AveragesLastTenPercent) {
    RunRecord r;
    for (std::size_t i = 0; i <= 100; i += 5) {
        RunPoint p;
        p.iteration = i;
        p.kl_mean = i >= 90 ? 1.0 : 100.0;
        r.points.push_back(p);
    }
    EXPECT_EQ(final_window_mean(r, [](const RunPoint& p) { return p.kl_mean; }), 1.0);
    EXPECT_THROW(final_window_mean(RunRecord{}, [](const RunPoint& p) { return p.kl_mean; }), InvalidInput);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    const auto c = small_config();
    Trainer t(c, world());
    t.run(3);
    const Checkpoint ck{training_config_to_json(c), t.state()};
    const auto text = bytes(ck);
    std::istringstream is(text);
    const auto back = read_checkpoint(is);
    EXPECT_EQ(back, ck);
    EXPECT_EQ(bytes(back), text);
    EXPECT_EQ(text.substr(0, 8), "RAIRLCKP");
    EXPECT_EQ(text[8], 1);
    EXPECT_EQ(text[9], 0);
}

TEST(Checkpoint, FileRoundTrip) {
    const auto c = small_config();
    Trainer t(c, world());
    const Checkpoint ck{training_config_to_json(c), t.state()};
    const std::string path = ::testing::TempDir() + "rairl_test.ckpt";
    save_checkpoint(path, ck);
    EXPECT_EQ(load_checkpoint(path), ck);
    EXPECT_THROW(load_checkpoint(path + ".missing"), InvalidInput);
}

TEST(Checkpoint, CorruptionIsRejected) {
    const auto c = small_config();
    Trainer t(c, world());
    const auto text = bytes(Checkpoint{training_config_to_json(c), t.state()});
    const auto read = [](std::string s) {
        std::istringstream is(s);
        return read_checkpoint(is);
    };
    for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{10}, std::size_t{30}, text.size() - 1}) {
        EXPECT_THROW(read(text.substr(0, cut)), FormatError) << cut;
    }
    auto bad_magic = text;
    bad_magic[0] = 'X';
    EXPECT_THROW(read(bad_magic), FormatError);
    auto bad_version = text;
    bad_version[8] = 2;
    EXPECT_THROW(read(bad_version), VersionError);
    EXPECT_THROW(read(text + "x"), FormatError);
    auto bad_json = text;
    bad_json[20] = '#';
    EXPECT_THROW(read(bad_json), FormatError);
}

TEST(Checkpoint, LayoutMismatchRejectedOnRestore) {
    auto c = small_config();
    Trainer t(c, world());
    auto s = t.state();
    c.hidden_dim = 9;
    EXPECT_THROW(Trainer(c, world(), s), FormatError);
}
