#pragma once

// The alternating training loop (discriminator step, then generator step),
// the baseline loops sharing it, exact KL to the true distribution, and the
// per-evaluation run record.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rairl/envworld.hpp"
#include "rairl/error.hpp"
#include "rairl/evaluation.hpp"
#include "rairl/losses.hpp"
#include "rairl/models.hpp"
#include "rairl/numerics.hpp"
#include "rairl/rng.hpp"

namespace rairl {

struct TrainingConfig {
    LossOptions loss = LossOptions::defaults(LossKind::rairl);
    std::size_t iterations = 20000;
    std::size_t batch_size = 16;
    double generator_lr = 1e-3;
    double discriminator_lr = 1e-3;
    double gamma = 1.0;
    std::uint64_t seed = 1;
    std::size_t eval_every = 200;
    std::size_t probe_batch = 64;         // pairs scored at each evaluation
    std::size_t diversity_samples = 100;  // generated sentences per context at each evaluation
    std::size_t corpus_size = 1000;       // fixed reference corpus for novelty and coverage
    std::size_t embedding_dim = 16;
    std::size_t hidden_dim = 32;
    bool init_embeddings_from_world = true;
    std::size_t kl_enumeration_cap = 100000;

    void validate() const {
        if (batch_size < 1) {
            throw ConfigError("training: batch_size must be at least 1");
        }
        if (!(generator_lr > 0.0) || !(discriminator_lr > 0.0)) {
            throw ConfigError("training: learning rates must be positive");
        }
        if (!(gamma > 0.0 && gamma <= 1.0)) {
            throw ConfigError("training: gamma must lie in (0, 1]");
        }
        if (eval_every < 1) {
            throw ConfigError("training: eval_every must be at least 1");
        }
        if (probe_batch < 1 || diversity_samples < 1 || corpus_size < 1) {
            throw ConfigError("training: probe_batch, diversity_samples and corpus_size must be positive");
        }
        if (embedding_dim < 1 || hidden_dim < 1) {
            throw ConfigError("training: model dimensions must be positive");
        }
    }

    friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;
};

/// Sub-stream tags for derive_seed(seed, tag).
namespace stream {
inline constexpr std::uint64_t policy_init = 1;
inline constexpr std::uint64_t disc_init = 2;
inline constexpr std::uint64_t train = 3;
inline constexpr std::uint64_t probe = 4;
inline constexpr std::uint64_t corpus = 5;
inline constexpr std::uint64_t evaluation = 6;
}  // namespace stream

inline nlohmann::json training_config_to_json(const TrainingConfig& c) {
    return {{"loss", std::string(to_string(c.loss.kind))},
            {"use_constant_term", c.loss.use_constant_term},
            {"use_conditional_term", c.loss.use_conditional_term},
            {"mle_full_form", c.loss.mle_full_form},
            {"iterations", c.iterations},
            {"batch_size", c.batch_size},
            {"generator_lr", c.generator_lr},
            {"discriminator_lr", c.discriminator_lr},
            {"gamma", c.gamma},
            {"seed", c.seed},
            {"eval_every", c.eval_every},
            {"probe_batch", c.probe_batch},
            {"diversity_samples", c.diversity_samples},
            {"corpus_size", c.corpus_size},
            {"embedding_dim", c.embedding_dim},
            {"hidden_dim", c.hidden_dim},
            {"init_embeddings_from_world", c.init_embeddings_from_world},
            {"kl_enumeration_cap", c.kl_enumeration_cap}};
}

/// Missing keys keep their defaults. When "loss" is given without explicit
/// term flags, the flags follow that loss kind's defaults.
inline TrainingConfig training_config_from_json(const nlohmann::json& j) {
    try {
        detail::require_keys(j,
                             {"loss", "use_constant_term", "use_conditional_term", "mle_full_form", "iterations",
                              "batch_size", "generator_lr", "discriminator_lr", "gamma", "seed", "eval_every",
                              "probe_batch", "diversity_samples", "corpus_size", "embedding_dim", "hidden_dim",
                              "init_embeddings_from_world", "kl_enumeration_cap"},
                             "training");
    } catch (const FormatError& e) {
        throw ConfigError(e.what());
    }
    TrainingConfig c;
    try {
        if (j.contains("loss")) {
            c.loss = LossOptions::defaults(parse_loss_kind(j.at("loss").get<std::string>()));
        }
        c.loss.use_constant_term = j.value("use_constant_term", c.loss.use_constant_term);
        c.loss.use_conditional_term = j.value("use_conditional_term", c.loss.use_conditional_term);
        c.loss.mle_full_form = j.value("mle_full_form", c.loss.mle_full_form);
        c.iterations = j.value("iterations", c.iterations);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.generator_lr = j.value("generator_lr", c.generator_lr);
        c.discriminator_lr = j.value("discriminator_lr", c.discriminator_lr);
        c.gamma = j.value("gamma", c.gamma);
        c.seed = j.value("seed", c.seed);
        c.eval_every = j.value("eval_every", c.eval_every);
        c.probe_batch = j.value("probe_batch", c.probe_batch);
        c.diversity_samples = j.value("diversity_samples", c.diversity_samples);
        c.corpus_size = j.value("corpus_size", c.corpus_size);
        c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
        c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
        c.init_embeddings_from_world = j.value("init_embeddings_from_world", c.init_embeddings_from_world);
        c.kl_enumeration_cap = j.value("kl_enumeration_cap", c.kl_enumeration_cap);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("training: ") + e.what());
    } catch (const InvalidInput& e) {
        throw ConfigError(std::string("training: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// KL to the true distribution

/// KL(p || q) over sentences given the true support with probabilities and
/// the model's log-probability for each of them.
template <typename LogProb>
double kl_over_support(const std::vector<WeightedSentence>& support, LogProb&& log_q) {
    double kl = 0.0;
    for (const auto& s : support) {
        kl += s.probability * (std::log(s.probability) - log_q(s.tokens));
    }
    return std::max(0.0, kl);
}

/// KL(p_true || pi) for one context, by enumerating the true support. Softmax
/// is strictly positive, so every true sentence has finite log pi.
inline double exact_policy_kl(const GrammarWorld& world, const PolicyNet& policy, std::size_t ctx,
                              std::size_t cap = 100000) {
    const auto support = enumerate_true_sentences(world, ctx, cap);
    const auto& feature = world.context(ctx).feature;
    return kl_over_support(support, [&](const TokenSeq& t) { return policy.trace(feature, t).total_log_prob(); });
}

// ---------------------------------------------------------------------------
// Run record

struct RunPoint {
    std::size_t iteration = 0;
    double mean_d_gen = 0.0;   // mean D over generated tokens of the probe batch
    double std_d_gen = 0.0;
    double mean_d_true = 0.0;  // mean D over ground-truth tokens
    double mean_abs_dev = 0.0; // mean |D - 0.5| over generated tokens
    double disc_loss = 0.0;    // per sentence pair
    double gen_loss = 0.0;     // surrogate per sentence pair
    Vector kl;                 // per context
    double kl_mean = 0.0;
    std::size_t distinct = 0;
    double coverage = 0.0;
    double novel_ratio = 0.0;
    bool clamped = false;

    friend bool operator==(const RunPoint&, const RunPoint&) = default;
};

struct AbortInfo {
    std::size_t iteration = 0;
    std::string message;
    double disc_loss = 0.0;
    double gen_loss = 0.0;

    friend bool operator==(const AbortInfo&, const AbortInfo&) = default;
};

struct RunRecord {
    std::size_t context_count = 0;
    std::vector<RunPoint> points;
    std::optional<AbortInfo> abort;

    friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

/// Shortest round-trip decimal form.
inline std::string format_double(double x) {
    if (std::isnan(x)) {
        return "nan";
    }
    if (std::isinf(x)) {
        return x > 0 ? "inf" : "-inf";
    }
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

inline constexpr int run_csv_version = 1;

inline std::vector<std::string> run_csv_header(std::size_t contexts) {
    std::vector<std::string> h{"iteration", "mean_d_gen", "std_d_gen", "mean_d_true", "mean_abs_dev",
                               "disc_loss", "gen_loss"};
    for (std::size_t c = 0; c < contexts; ++c) {
        h.push_back("kl_" + std::to_string(c));
    }
    for (const char* s : {"kl_mean", "distinct", "coverage", "novel_ratio", "clamped"}) {
        h.emplace_back(s);
    }
    return h;
}

inline void write_run_csv(std::ostream& os, const RunRecord& rec) {
    const auto header = run_csv_header(rec.context_count);
    for (std::size_t i = 0; i < header.size(); ++i) {
        os << (i ? "," : "") << header[i];
    }
    os << '\n';
    for (const auto& p : rec.points) {
        os << p.iteration << ',' << format_double(p.mean_d_gen) << ',' << format_double(p.std_d_gen) << ','
           << format_double(p.mean_d_true) << ',' << format_double(p.mean_abs_dev) << ','
           << format_double(p.disc_loss) << ',' << format_double(p.gen_loss);
        for (double k : p.kl) {
            os << ',' << format_double(k);
        }
        os << ',' << format_double(p.kl_mean) << ',' << p.distinct << ',' << format_double(p.coverage) << ','
           << format_double(p.novel_ratio) << ',' << (p.clamped ? 1 : 0) << '\n';
    }
}

/// Mean of a RunPoint field over points whose iteration lies in the last
/// `fraction` of [0, final iteration].
template <typename Field>
double final_window_mean(const RunRecord& rec, Field&& field, double fraction = 0.1) {
    if (rec.points.empty()) {
        throw InvalidInput("final_window_mean: empty record");
    }
    const double last = static_cast<double>(rec.points.back().iteration);
    const double start = last * (1.0 - fraction);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& p : rec.points) {
        if (static_cast<double>(p.iteration) >= start) {
            sum += field(p);
            ++n;
        }
    }
    return sum / static_cast<double>(n);
}

/// The fixed ground-truth corpus that novelty and coverage are measured against.
inline std::vector<SequenceSample> training_corpus(const GrammarWorld& world, const TrainingConfig& config) {
    Rng rng(derive_seed(config.seed, stream::corpus));
    std::vector<SequenceSample> out;
    out.reserve(config.corpus_size);
    for (std::size_t i = 0; i < config.corpus_size; ++i) {
        out.push_back(sample_pair(world, rng));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Trainer

/// Complete resumable state of a run.
struct TrainerState {
    std::size_t iteration = 0;
    ParameterSet policy;
    ParameterSet disc;
    AdamState policy_adam;
    AdamState disc_adam;
    std::string rng_state;

    friend bool operator==(const TrainerState&, const TrainerState&) = default;
};

struct StepStats {
    double disc_loss = 0.0;
    double gen_loss = 0.0;
    bool clamped = false;
};

class Trainer {
public:
    Trainer(TrainingConfig config, const GrammarWorld& world)
        : config_(std::move(config)),
          world_(&world),
          policy_(PolicyNet::zeros(shape_for(world, config_.embedding_dim, config_.hidden_dim))),
          disc_(DiscriminatorNet::zeros(shape_for(world, config_.embedding_dim, config_.hidden_dim), config_.gamma)),
          rng_(derive_seed(config_.seed, stream::train)) {
        config_.validate();
        const auto shape = shape_for(world, config_.embedding_dim, config_.hidden_dim);
        const DenseMatrix* emb = nullptr;
        if (config_.init_embeddings_from_world) {
            if (world.vocab().embedding_dim() != config_.embedding_dim) {
                throw ConfigError("training: init_embeddings_from_world needs embedding_dim = world embedding_dim");
            }
            emb = &world.vocab().embeddings();
        }
        Rng pinit(derive_seed(config_.seed, stream::policy_init));
        policy_ = PolicyNet::random(shape, pinit, emb);
        Rng dinit(derive_seed(config_.seed, stream::disc_init));
        disc_ = DiscriminatorNet::random(shape, dinit, config_.gamma, emb);
        policy_adam_ = AdamState::for_parameters(policy_.params(), config_.generator_lr);
        disc_adam_ = AdamState::for_parameters(disc_.params(), config_.discriminator_lr);
        prepare();
    }

    Trainer(TrainingConfig config, const GrammarWorld& world, const TrainerState& state) : Trainer(config, world) {
        restore(state);
    }

    const TrainingConfig& config() const noexcept { return config_; }
    const GrammarWorld& world() const noexcept { return *world_; }
    std::size_t iteration() const noexcept { return iteration_; }
    const PolicyNet& policy() const noexcept { return policy_; }
    const DiscriminatorNet& discriminator() const noexcept { return disc_; }
    const std::vector<SequenceSample>& corpus() const noexcept { return corpus_; }
    const std::vector<TokenSeq>& references(std::size_t ctx) const { return references_.at(ctx); }
    const std::vector<WeightedSentence>& support(std::size_t ctx) const { return support_.at(ctx); }

    TrainerState state() const {
        return {iteration_, policy_.params(), disc_.params(), policy_adam_, disc_adam_, rng_.state()};
    }

    void restore(const TrainerState& s) {
        if (!s.policy.same_layout(policy_.params()) || !s.disc.same_layout(disc_.params())) {
            throw FormatError("checkpoint parameters do not match the configured model");
        }
        iteration_ = s.iteration;
        policy_.set_params(s.policy);
        disc_.set_params(s.disc);
        policy_adam_ = s.policy_adam;
        disc_adam_ = s.disc_adam;
        rng_.restore(s.rng_state);
    }

    /// One iteration of the configured loop.
    StepStats step() {
        const auto& world = *world_;
        const double scale = 1.0 / static_cast<double>(config_.batch_size);
        const LossKind kind = config_.loss.kind;
        std::vector<ScoredSequence> truth;
        std::vector<ScoredSequence> gen;
        truth.reserve(config_.batch_size);
        gen.reserve(config_.batch_size);
        for (std::size_t b = 0; b < config_.batch_size; ++b) {
            const auto t = sample_pair(world, rng_);
            const auto& ctx = world.context(t.context);
            truth.push_back(score_sequence(policy_, disc_, ctx, t.tokens));
            auto g = sample_sequence(policy_, ctx, rng_, world.max_length());
            gen.push_back(score_sequence(std::move(g.trace), disc_, t.context));
        }

        StepStats st;
        ParameterSet dgrad = disc_.params().zeros_like();
        for (std::size_t b = 0; b < config_.batch_size; ++b) {
            if (kind == LossKind::gan) {
                st.disc_loss += accumulate_gan_discriminator_loss(disc_, truth[b], gen[b], scale, dgrad, st.clamped);
            } else {
                st.disc_loss += accumulate_discriminator_loss(disc_, truth[b], gen[b], scale, dgrad, st.clamped);
            }
        }
        check_finite(st.disc_loss, "discriminator loss");
        auto dres = adam_step(disc_.params(), dgrad, std::move(disc_adam_));
        disc_.set_params(std::move(dres.params));
        disc_adam_ = std::move(dres.state);

        // The generator sees the updated discriminator.
        for (std::size_t b = 0; b < config_.batch_size; ++b) {
            truth[b].disc = disc_.encode(truth[b].policy.context, truth[b].policy.tokens);
            gen[b].disc = disc_.encode(gen[b].policy.context, gen[b].policy.tokens);
        }
        ParameterSet pgrad = policy_.params().zeros_like();
        for (std::size_t b = 0; b < config_.batch_size; ++b) {
            st.gen_loss += generator_objective(truth[b], gen[b], scale, pgrad, st.clamped);
        }
        check_finite(st.gen_loss, "generator loss");
        auto pres = adam_step(policy_.params(), pgrad, std::move(policy_adam_));
        policy_.set_params(std::move(pres.params));
        policy_adam_ = std::move(pres.state);
        ++iteration_;
        return st;
    }

    /// Probe evaluation. Uses a stream derived from (seed, iteration) and does
    /// not touch the training stream.
    RunPoint evaluate() const {
        const auto& world = *world_;
        Rng rng(derive_seed(config_.seed, stream::probe, iteration_));
        RunPoint p;
        p.iteration = iteration_;
        Vector d_gen;
        double d_true_sum = 0.0;
        std::size_t d_true_n = 0;
        ParameterSet scratch_d = disc_.params().zeros_like();
        ParameterSet scratch_p = policy_.params().zeros_like();
        for (std::size_t b = 0; b < config_.probe_batch; ++b) {
            const auto t = sample_pair(world, rng);
            const auto& ctx = world.context(t.context);
            const auto truth = score_sequence(policy_, disc_, ctx, t.tokens);
            auto g = sample_sequence(policy_, ctx, rng, world.max_length());
            const auto gen = score_sequence(std::move(g.trace), disc_, t.context);
            for (std::size_t i = 0; i < gen.length(); ++i) {
                d_gen.push_back(gen.d(i));
            }
            for (std::size_t i = 0; i < truth.length(); ++i) {
                d_true_sum += truth.d(i);
                ++d_true_n;
            }
            if (config_.loss.kind == LossKind::gan) {
                p.disc_loss += accumulate_gan_discriminator_loss(disc_, truth, gen, 1.0, scratch_d, p.clamped);
            } else {
                p.disc_loss += accumulate_discriminator_loss(disc_, truth, gen, 1.0, scratch_d, p.clamped);
            }
            p.gen_loss += generator_objective(truth, gen, 1.0, scratch_p, p.clamped);
        }
        const double nb = static_cast<double>(config_.probe_batch);
        p.disc_loss /= nb;
        p.gen_loss /= nb;
        double sum = 0.0;
        double dev = 0.0;
        for (double d : d_gen) {
            sum += d;
            dev += std::abs(d - 0.5);
        }
        p.mean_d_gen = sum / static_cast<double>(d_gen.size());
        p.mean_abs_dev = dev / static_cast<double>(d_gen.size());
        double var = 0.0;
        for (double d : d_gen) {
            var += (d - p.mean_d_gen) * (d - p.mean_d_gen);
        }
        p.std_d_gen = std::sqrt(var / static_cast<double>(d_gen.size()));
        p.mean_d_true = d_true_sum / static_cast<double>(d_true_n);

        p.kl.resize(world.context_count());
        for (std::size_t c = 0; c < world.context_count(); ++c) {
            const auto& feature = world.context(c).feature;
            p.kl[c] = kl_over_support(support_[c],
                                      [&](const TokenSeq& t) { return policy_.trace(feature, t).total_log_prob(); });
            p.kl_mean += p.kl[c] / static_cast<double>(world.context_count());
        }

        const auto generated = generate(rng, config_.diversity_samples);
        const auto div = diversity_metrics(generated, corpus_, reference_vocab_, world.vocab());
        p.distinct = div.distinct;
        p.coverage = div.coverage;
        p.novel_ratio = div.novel_ratio;
        return p;
    }

    /// `per_context` generated sentences for every context, in context order.
    std::vector<SequenceSample> generate(Rng& rng, std::size_t per_context) const {
        std::vector<SequenceSample> out;
        for (std::size_t c = 0; c < world_->context_count(); ++c) {
            for (std::size_t i = 0; i < per_context; ++i) {
                out.push_back(sample_sequence(policy_, world_->context(c), rng, world_->max_length()).sample);
            }
        }
        return out;
    }

    /// Trains until `until` iterations. Evaluation points are the multiples of
    /// eval_every and the configured final iteration, so a run split at any
    /// iteration and resumed yields the same record. Points already in `rec`
    /// are kept. A non-finite loss or
    /// gradient stops the run and fills rec.abort.
    RunRecord run(std::size_t until, RunRecord rec = {},
                  const std::function<void(const RunPoint&)>& on_eval = nullptr) {
        rec.context_count = world_->context_count();
        const auto emit = [&] {
            rec.points.push_back(evaluate());
            if (on_eval) {
                on_eval(rec.points.back());
            }
        };
        const auto scheduled = [&] { return iteration_ % config_.eval_every == 0 || iteration_ == config_.iterations; };
        if (scheduled() && (rec.points.empty() || rec.points.back().iteration != iteration_)) {
            emit();
        }
        StepStats last;
        while (iteration_ < until) {
            try {
                last = step();
            } catch (const NumericalError& e) {
                rec.abort = AbortInfo{iteration_ + 1, e.what(), last.disc_loss, last.gen_loss};
                return rec;
            }
            if (scheduled()) {
                emit();
            }
        }
        return rec;
    }

private:
    void prepare() {
        const auto& world = *world_;
        corpus_ = training_corpus(world, config_);
        reference_vocab_ = vocabulary_usage(corpus_, world.vocab());
        support_.clear();
        references_.clear();
        for (std::size_t c = 0; c < world.context_count(); ++c) {
            support_.push_back(enumerate_true_sentences(world, c, config_.kl_enumeration_cap));
            std::vector<TokenSeq> refs;
            for (const auto& s : support_.back()) {
                refs.push_back(s.tokens);
            }
            references_.push_back(std::move(refs));
        }
    }

    static void check_finite(double x, const char* what) {
        if (!std::isfinite(x)) {
            throw NumericalError(std::string("non-finite ") + what);
        }
    }

    double generator_objective(const ScoredSequence& truth, const ScoredSequence& gen, double scale,
                               ParameterSet& grad, bool& clamped) const {
        switch (config_.loss.kind) {
            case LossKind::mle:
                return accumulate_mle(policy_, truth.policy, config_.loss.mle_full_form, scale, grad, clamped);
            case LossKind::rl: {
                const double r = best_reference_metric(gen.tokens(), references_[gen.context], policy_.shape().eos);
                const Vector c(gen.length(), r);
                return accumulate_weighted_log_likelihood(policy_, gen.policy, c, scale, grad);
            }
            case LossKind::gan: {
                const Vector c(gen.length(), sigmoid(gen.disc.sentence_logit));
                return accumulate_weighted_log_likelihood(policy_, gen.policy, c, scale, grad);
            }
            case LossKind::airl:
            case LossKind::rairl:
                return accumulate_rairl_generator(policy_, gen, &truth, config_.loss, scale, grad);
        }
        return 0.0;
    }

    TrainingConfig config_;
    const GrammarWorld* world_;
    PolicyNet policy_;
    DiscriminatorNet disc_;
    AdamState policy_adam_;
    AdamState disc_adam_;
    Rng rng_;
    std::size_t iteration_ = 0;
    std::vector<SequenceSample> corpus_;
    std::set<TokenId> reference_vocab_;
    std::vector<std::vector<WeightedSentence>> support_;
    std::vector<std::vector<TokenSeq>> references_;
};

inline RunRecord train(const TrainingConfig& config, const GrammarWorld& world) {
    Trainer t(config, world);
    return t.run(config.iterations);
}

}  // namespace rairl
