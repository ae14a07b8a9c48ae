#pragma once

// Experiment configuration (the document behind every subcommand), dotted
// overrides, the ablation matrix, and the evaluation protocols that turn a
// trained pair of models into report files.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rairl/checkpoint.hpp"
#include "rairl/envworld.hpp"
#include "rairl/error.hpp"
#include "rairl/evaluation.hpp"
#include "rairl/reports.hpp"
#include "rairl/training.hpp"

namespace rairl {

inline constexpr int experiment_config_version = 1;

struct EvaluationConfig {
    std::uint64_t seed = 1;
    std::vector<std::string> reports{"kl", "diversity", "compactness", "topk"};
    std::size_t compactness_sentences = 200;
    SentenceScorer sentence_scorer = SentenceScorer::sum_f;
    std::size_t diversity_samples = 100;  // per context
    std::size_t topk = 5;
    std::size_t topk_samples = 200;       // per context
    double diagnosis_threshold = 0.5;
    PositionScorer diagnosis_scorer = PositionScorer::relative;

    friend bool operator==(const EvaluationConfig&, const EvaluationConfig&) = default;
};

struct DynamicsConfig {
    Vector p_true{0.1, 0.2, 0.3, 0.4};
    std::size_t steps = 2000;
    double generator_rate = 0.1;
    double discriminator_rate = 0.1;
    std::string init = "random";  // or "equilibrium"
    std::uint64_t init_seed = 1;
    double init_scale = 1.0;

    friend bool operator==(const DynamicsConfig&, const DynamicsConfig&) = default;
};

struct ExperimentConfig {
    WorldSpec world = default_world_spec();
    TrainingConfig training;
    EvaluationConfig evaluation;
    DynamicsConfig dynamics;
    std::string output_dir = "out";
    std::vector<std::string> formats{"csv", "json"};

    bool wants(std::string_view format) const {
        return std::find(formats.begin(), formats.end(), format) != formats.end();
    }
};

inline const std::vector<std::string>& known_reports() {
    static const std::vector<std::string> r{"kl", "diversity", "compactness", "topk"};
    return r;
}

namespace detail {

template <typename T>
T get_field(const nlohmann::json& j, const char* key, T fallback, const std::string& where) {
    if (!j.contains(key)) {
        return fallback;
    }
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(where + "." + key + ": wrong type (" + j.at(key).dump() + ")");
    }
}

inline void require_object(const nlohmann::json& j, const std::string& where) {
    if (!j.is_object()) {
        throw ConfigError(where + ": expected an object");
    }
}

inline void allowed_keys(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
    require_object(j, where);
    for (const auto& [k, v] : j.items()) {
        if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; })) {
            throw ConfigError(where + ": unknown key '" + k + "'");
        }
    }
}

}  // namespace detail

inline EvaluationConfig evaluation_config_from_json(const nlohmann::json& j) {
    using detail::get_field;
    const std::string w = "evaluation";
    detail::allowed_keys(j,
                         {"seed", "reports", "compactness_sentences", "sentence_scorer", "diversity_samples", "topk",
                          "topk_samples", "diagnosis_threshold", "diagnosis_scorer"},
                         w);
    EvaluationConfig e;
    e.seed = get_field(j, "seed", e.seed, w);
    e.reports = get_field(j, "reports", e.reports, w);
    for (const auto& r : e.reports) {
        if (std::find(known_reports().begin(), known_reports().end(), r) == known_reports().end()) {
            throw ConfigError(w + ".reports: unknown report '" + r + "'");
        }
    }
    e.compactness_sentences = get_field(j, "compactness_sentences", e.compactness_sentences, w);
    e.diversity_samples = get_field(j, "diversity_samples", e.diversity_samples, w);
    e.topk = get_field(j, "topk", e.topk, w);
    e.topk_samples = get_field(j, "topk_samples", e.topk_samples, w);
    e.diagnosis_threshold = get_field(j, "diagnosis_threshold", e.diagnosis_threshold, w);
    try {
        e.sentence_scorer = parse_sentence_scorer(get_field<std::string>(j, "sentence_scorer", "sum_f", w));
        e.diagnosis_scorer = parse_position_scorer(get_field<std::string>(j, "diagnosis_scorer", "relative", w));
    } catch (const InvalidInput& ex) {
        throw ConfigError(w + ": " + ex.what());
    }
    if (e.compactness_sentences < 1 || e.diversity_samples < 1 || e.topk < 1 || e.topk_samples < e.topk) {
        throw ConfigError(w + ": sample counts must be positive and topk_samples >= topk");
    }
    if (!(e.diagnosis_threshold > 0.0)) {
        throw ConfigError(w + ".diagnosis_threshold must be positive");
    }
    return e;
}

inline nlohmann::json evaluation_config_to_json(const EvaluationConfig& e) {
    return {{"seed", e.seed},
            {"reports", e.reports},
            {"compactness_sentences", e.compactness_sentences},
            {"sentence_scorer", std::string(to_string(e.sentence_scorer))},
            {"diversity_samples", e.diversity_samples},
            {"topk", e.topk},
            {"topk_samples", e.topk_samples},
            {"diagnosis_threshold", e.diagnosis_threshold},
            {"diagnosis_scorer", std::string(to_string(e.diagnosis_scorer))}};
}

inline DynamicsConfig dynamics_config_from_json(const nlohmann::json& j) {
    using detail::get_field;
    const std::string w = "dynamics";
    detail::allowed_keys(
        j, {"p_true", "steps", "generator_rate", "discriminator_rate", "init", "init_seed", "init_scale"}, w);
    DynamicsConfig d;
    d.p_true = get_field(j, "p_true", d.p_true, w);
    d.steps = get_field(j, "steps", d.steps, w);
    d.generator_rate = get_field(j, "generator_rate", d.generator_rate, w);
    d.discriminator_rate = get_field(j, "discriminator_rate", d.discriminator_rate, w);
    d.init = get_field(j, "init", d.init, w);
    d.init_seed = get_field(j, "init_seed", d.init_seed, w);
    d.init_scale = get_field(j, "init_scale", d.init_scale, w);
    if (d.init != "random" && d.init != "equilibrium") {
        throw ConfigError(w + ".init must be 'random' or 'equilibrium'");
    }
    if (!(d.generator_rate > 0.0) || !(d.discriminator_rate > 0.0)) {
        throw ConfigError(w + ": rates must be positive");
    }
    if (d.p_true.empty() || d.p_true.size() > 4) {
        throw ConfigError(w + ".p_true must have 1 to 4 entries");
    }
    double total = 0.0;
    for (double p : d.p_true) {
        if (!(p > 0.0)) {
            throw ConfigError(w + ".p_true entries must be positive");
        }
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw ConfigError(w + ".p_true must sum to 1");
    }
    return d;
}

inline nlohmann::json dynamics_config_to_json(const DynamicsConfig& d) {
    return {{"p_true", d.p_true},
            {"steps", d.steps},
            {"generator_rate", d.generator_rate},
            {"discriminator_rate", d.discriminator_rate},
            {"init", d.init},
            {"init_seed", d.init_seed},
            {"init_scale", d.init_scale}};
}

/// Relative world files resolve against `base_dir` (the config file's folder).
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j,
                                                    const std::filesystem::path& base_dir = {}) {
    detail::require_object(j, "config");
    if (!j.contains("version")) {
        throw ConfigError("config: missing required key 'version'");
    }
    if (!j.at("version").is_number_integer()) {
        throw ConfigError("config.version must be an integer");
    }
    if (j.at("version").get<int>() != experiment_config_version) {
        throw VersionError("config version " + j.at("version").dump() + " is not supported (expected " +
                           std::to_string(experiment_config_version) + ")");
    }
    detail::allowed_keys(j, {"version", "world", "training", "evaluation", "dynamics", "output"}, "config");
    ExperimentConfig c;
    if (j.contains("world")) {
        const auto& w = j.at("world");
        detail::allowed_keys(w, {"seed", "file", "spec"}, "world");
        if (w.size() != 1) {
            throw ConfigError("world: give exactly one of 'seed', 'file' or 'spec'");
        }
        try {
            if (w.contains("seed")) {
                c.world = default_world_spec(detail::get_field<std::uint64_t>(w, "seed", 7, "world"));
            } else if (w.contains("file")) {
                std::filesystem::path p = detail::get_field<std::string>(w, "file", "", "world");
                if (p.is_relative() && !base_dir.empty()) {
                    p = base_dir / p;
                }
                c.world = load_world_spec(p);
            } else {
                c.world = world_spec_from_json(w.at("spec"));
            }
            build_world(c.world);
        } catch (const VersionError&) {
            throw;
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            throw ConfigError(std::string("world: ") + e.what());
        }
    }
    if (j.contains("training")) {
        detail::require_object(j.at("training"), "training");
        c.training = training_config_from_json(j.at("training"));
    }
    if (j.contains("evaluation")) {
        c.evaluation = evaluation_config_from_json(j.at("evaluation"));
    }
    if (j.contains("dynamics")) {
        c.dynamics = dynamics_config_from_json(j.at("dynamics"));
    }
    if (j.contains("output")) {
        const auto& o = j.at("output");
        detail::allowed_keys(o, {"dir", "formats"}, "output");
        c.output_dir = detail::get_field(o, "dir", c.output_dir, "output");
        c.formats = detail::get_field(o, "formats", c.formats, "output");
        for (const auto& f : c.formats) {
            if (f != "csv" && f != "json") {
                throw ConfigError("output.formats: unknown format '" + f + "'");
            }
        }
    }
    return c;
}

/// The effective configuration with the world inlined, so the echo alone
/// reproduces the run.
inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
    return {{"version", experiment_config_version},
            {"world", {{"spec", world_spec_to_json(c.world)}}},
            {"training", training_config_to_json(c.training)},
            {"evaluation", evaluation_config_to_json(c.evaluation)},
            {"dynamics", dynamics_config_to_json(c.dynamics)},
            {"output", {{"dir", c.output_dir}, {"formats", c.formats}}}};
}

/// The echo stored in checkpoints. It leaves out the output directory so the
/// same experiment written to two places yields identical checkpoint bytes.
inline nlohmann::json checkpoint_config_json(const ExperimentConfig& c) {
    auto j = experiment_config_to_json(c);
    j["output"].erase("dir");
    return j;
}

/// Applies "a.b.c=value". The value is parsed as JSON when possible and kept
/// as a string otherwise. Missing objects along the path are created; the
/// result is validated when the document is parsed.
inline void apply_override(nlohmann::json& doc, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError("--set expects KEY=VALUE, got '" + std::string(assignment) + "'");
    }
    const std::string key(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
        value = text;
    }
    nlohmann::json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) {
            throw ConfigError("--set: empty path component in '" + key + "'");
        }
        if (node->is_null()) {
            *node = nlohmann::json::object();
        }
        if (!node->is_object()) {
            throw ConfigError("--set: '" + key + "' descends into a non-object");
        }
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

inline nlohmann::json read_json_file(const std::filesystem::path& path, const char* what) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError(std::string("cannot open ") + what + " '" + path.string() + "'");
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string(what) + " '" + path.string() + "' is not valid JSON: " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Ablation matrix

struct AblationRow {
    std::string name;
    LossOptions loss;

    friend bool operator==(const AblationRow&, const AblationRow&) = default;
};

struct AblationMatrix {
    std::vector<AblationRow> rows;

    static AblationMatrix defaults() {
        auto with = [](LossKind k, bool constant, bool conditional) {
            auto o = LossOptions::defaults(k);
            o.use_constant_term = constant;
            o.use_conditional_term = conditional;
            return o;
        };
        return {{{"rAIRL", LossOptions::defaults(LossKind::rairl)},
                 {"rAIRL w/o constant", with(LossKind::rairl, false, true)},
                 {"rAIRL w/o conditional", with(LossKind::rairl, true, false)},
                 {"vanilla AIRL", LossOptions::defaults(LossKind::airl)},
                 {"GAN", LossOptions::defaults(LossKind::gan)},
                 {"RL", LossOptions::defaults(LossKind::rl)},
                 {"MLE", LossOptions::defaults(LossKind::mle)}}};
    }

    friend bool operator==(const AblationMatrix&, const AblationMatrix&) = default;
};

/// Lower-case alphanumerics with every other run of characters folded to '-'.
inline std::string slug(std::string_view name) {
    std::string out;
    bool dash = false;
    for (char ch : name) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            if (dash && !out.empty()) {
                out += '-';
            }
            dash = false;
            out += static_cast<char>(std::tolower(c));
        } else {
            dash = true;
        }
    }
    return out;
}

inline void validate_matrix(const AblationMatrix& m) {
    if (m.rows.empty()) {
        throw ConfigError("ablation matrix has no rows");
    }
    std::set<std::string> names;
    std::set<std::string> slugs;
    for (const auto& r : m.rows) {
        if (slug(r.name).empty()) {
            throw ConfigError("ablation row name '" + r.name + "' has no alphanumeric characters");
        }
        if (!names.insert(r.name).second || !slugs.insert(slug(r.name)).second) {
            throw ConfigError("duplicate ablation row name '" + r.name + "'");
        }
    }
}

inline AblationMatrix ablation_matrix_from_json(const nlohmann::json& j) {
    detail::require_object(j, "matrix");
    if (!j.contains("version")) {
        throw ConfigError("matrix: missing required key 'version'");
    }
    if (j.at("version") != 1) {
        throw VersionError("matrix version " + j.at("version").dump() + " is not supported (expected 1)");
    }
    detail::allowed_keys(j, {"version", "rows"}, "matrix");
    AblationMatrix m;
    if (!j.contains("rows") || !j.at("rows").is_array()) {
        throw ConfigError("matrix.rows must be an array");
    }
    for (const auto& r : j.at("rows")) {
        detail::allowed_keys(r, {"name", "loss", "use_constant_term", "use_conditional_term", "mle_full_form"},
                             "matrix.rows[]");
        if (!r.contains("name") || !r.contains("loss")) {
            throw ConfigError("matrix.rows[]: 'name' and 'loss' are required");
        }
        AblationRow row;
        row.name = detail::get_field<std::string>(r, "name", "", "matrix.rows[]");
        try {
            row.loss = LossOptions::defaults(parse_loss_kind(detail::get_field<std::string>(r, "loss", "", row.name)));
        } catch (const InvalidInput& e) {
            throw ConfigError("matrix row '" + row.name + "': " + e.what());
        }
        row.loss.use_constant_term = detail::get_field(r, "use_constant_term", row.loss.use_constant_term, row.name);
        row.loss.use_conditional_term =
            detail::get_field(r, "use_conditional_term", row.loss.use_conditional_term, row.name);
        row.loss.mle_full_form = detail::get_field(r, "mle_full_form", row.loss.mle_full_form, row.name);
        m.rows.push_back(std::move(row));
    }
    validate_matrix(m);
    return m;
}

inline nlohmann::json ablation_matrix_to_json(const AblationMatrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : m.rows) {
        rows.push_back({{"name", r.name},
                        {"loss", std::string(to_string(r.loss.kind))},
                        {"use_constant_term", r.loss.use_constant_term},
                        {"use_conditional_term", r.loss.use_conditional_term},
                        {"mle_full_form", r.loss.mle_full_form}});
    }
    return {{"version", 1}, {"rows", rows}};
}

// ---------------------------------------------------------------------------
// Evaluation protocols

/// Sub-stream tags under evaluation.seed.
namespace eval_stream {
inline constexpr std::uint64_t diversity = 1;
inline constexpr std::uint64_t compactness = 2;
inline constexpr std::uint64_t topk = 3;
inline constexpr std::uint64_t topk_median = 4;
inline constexpr std::uint64_t diagnosis = 5;
}  // namespace eval_stream

struct TrainedModels {
    PolicyNet policy;
    DiscriminatorNet disc;
};

inline TrainedModels models_from_state(const GrammarWorld& world, const TrainingConfig& t, const TrainerState& s) {
    const auto shape = shape_for(world, t.embedding_dim, t.hidden_dim);
    auto policy = PolicyNet(shape, PolicyNet::layout(shape));
    auto disc = DiscriminatorNet::zeros(shape, t.gamma);
    if (!s.policy.same_layout(policy.params()) || !s.disc.same_layout(disc.params())) {
        throw FormatError("checkpoint parameters do not match the configured model");
    }
    policy.set_params(s.policy);
    disc.set_params(s.disc);
    return {std::move(policy), std::move(disc)};
}

/// `per_context` samples for each context, contexts in order.
inline std::vector<SequenceSample> generate_corpus(const GrammarWorld& world, const PolicyNet& policy, Rng& rng,
                                                   std::size_t per_context) {
    std::vector<SequenceSample> out;
    for (std::size_t c = 0; c < world.context_count(); ++c) {
        for (std::size_t i = 0; i < per_context; ++i) {
            out.push_back(sample_sequence(policy, world.context(c), rng, world.max_length()).sample);
        }
    }
    return out;
}

struct TopKContext {
    TopKResult result;
    Vector metrics;  // handcrafted metric of each ranked sequence
    double corpus_median = 0.0;
};

inline double median(Vector v) {
    if (v.empty()) {
        throw InvalidInput("median of an empty list");
    }
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<TokenSeq> reference_sentences(const GrammarWorld& world, std::size_t ctx, std::size_t cap) {
    std::vector<TokenSeq> refs;
    for (const auto& s : enumerate_true_sentences(world, ctx, cap)) {
        refs.push_back(s.tokens);
    }
    return refs;
}

/// Top-k by sentence reward per context, with the median handcrafted metric of
/// a fresh generated corpus as the comparison point.
inline std::vector<TopKContext> evaluate_topk(const GrammarWorld& world, const TrainedModels& m,
                                              const EvaluationConfig& e, std::size_t cap) {
    std::vector<TopKContext> out;
    Rng rng(derive_seed(e.seed, eval_stream::topk));
    Rng mrng(derive_seed(e.seed, eval_stream::topk_median));
    const TokenId eos = world.vocab().eos();
    for (std::size_t c = 0; c < world.context_count(); ++c) {
        const auto refs = reference_sentences(world, c, cap);
        TopKContext t;
        t.result = top_k_by_reward(m.policy, m.disc, world.context(c), e.topk, e.topk_samples, world.max_length(), rng,
                                   e.sentence_scorer);
        for (const auto& r : t.result.ranked) {
            t.metrics.push_back(best_reference_metric(r.sample.tokens, refs, eos));
        }
        Vector corpus_metrics;
        for (std::size_t i = 0; i < e.topk_samples; ++i) {
            const auto s = sample_sequence(m.policy, world.context(c), mrng, world.max_length()).sample;
            corpus_metrics.push_back(best_reference_metric(s.tokens, refs, eos));
        }
        t.corpus_median = median(corpus_metrics);
        out.push_back(std::move(t));
    }
    return out;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw InvalidInput("cannot write '" + path.string() + "'");
    }
    os << text;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

/// Summary values of one evaluation pass, used by the ablation table.
struct EvaluationSummary {
    std::optional<double> kl_mean;
    std::optional<std::size_t> distinct;
    std::optional<double> coverage;
    std::optional<double> novel_ratio;
    std::optional<double> rp_s;
    std::optional<double> rp_d;
};

/// Runs the requested reports and writes <name>.csv / <name>.json into `dir`.
inline EvaluationSummary run_evaluation(const ExperimentConfig& cfg, const GrammarWorld& world,
                                        const TrainedModels& m, const std::vector<std::string>& which,
                                        const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto& e = cfg.evaluation;
    EvaluationSummary sum;
    const auto emit = [&](const std::string& name, const std::string& csv, const nlohmann::json& summary) {
        if (cfg.wants("csv")) {
            write_text_file(dir / (name + ".csv"), csv);
        }
        if (cfg.wants("json")) {
            write_json_file(dir / (name + ".json"), summary);
        }
    };
    for (const auto& w : which) {
        std::ostringstream csv;
        if (w == "kl") {
            Vector kl;
            std::vector<std::size_t> sizes;
            for (std::size_t c = 0; c < world.context_count(); ++c) {
                const auto support = enumerate_true_sentences(world, c, cfg.training.kl_enumeration_cap);
                sizes.push_back(support.size());
                const auto& feature = world.context(c).feature;
                kl.push_back(kl_over_support(
                    support, [&](const TokenSeq& t) { return m.policy.trace(feature, t).total_log_prob(); }));
            }
            const auto j = write_kl_report(csv, world, kl, sizes);
            sum.kl_mean = j.at("mean").get<double>();
            emit("kl", csv.str(), j);
        } else if (w == "diversity") {
            Rng rng(derive_seed(e.seed, eval_stream::diversity));
            const auto gen = generate_corpus(world, m.policy, rng, e.diversity_samples);
            const auto training = training_corpus(world, cfg.training);
            const auto rep =
                diversity_metrics(gen, training, vocabulary_usage(training, world.vocab()), world.vocab());
            const auto j = write_diversity_report(csv, rep, world, gen, training);
            sum.distinct = rep.distinct;
            sum.coverage = rep.coverage;
            sum.novel_ratio = rep.novel_ratio;
            emit("diversity", csv.str(), j);
        } else if (w == "compactness") {
            Rng rng(derive_seed(e.seed, eval_stream::compactness));
            std::vector<SequenceSample> corpus;
            for (std::size_t i = 0; i < e.compactness_sentences; ++i) {
                const std::size_t c = i % world.context_count();
                corpus.push_back(sample_sequence(m.policy, world.context(c), rng, world.max_length()).sample);
            }
            CompactnessReport rep;
            try {
                rep = compactness_probe(world, m.disc, corpus, rng, e.sentence_scorer);
            } catch (const DegenerateInput& ex) {
                rep.skipped = corpus.size();
                rep.warnings.push_back(ex.what());
            }
            const auto j = write_compactness_report(csv, rep, world, corpus, e.sentence_scorer);
            sum.rp_s = rep.same_class.pearson;
            sum.rp_d = rep.different_class.pearson;
            emit("compactness", csv.str(), j);
        } else if (w == "topk") {
            const auto res = evaluate_topk(world, m, e, cfg.training.kl_enumeration_cap);
            CsvWriter writer(csv, schema::topk());
            auto j = make_summary(schema::topk_summary());
            j["k"] = e.topk;
            j["samples"] = e.topk_samples;
            nlohmann::json medians = nlohmann::json::object();
            nlohmann::json contexts = nlohmann::json::object();
            for (std::size_t c = 0; c < res.size(); ++c) {
                const auto& name = world.context(c).name;
                bool all_at_least = true;
                for (std::size_t r = 0; r < res[c].result.ranked.size(); ++r) {
                    const auto& rs = res[c].result.ranked[r];
                    writer.row({name, std::to_string(r + 1), token_text(world.vocab(), rs.sample.tokens),
                                format_double(rs.reward), format_double(res[c].metrics[r])});
                    all_at_least = all_at_least && res[c].metrics[r] >= res[c].corpus_median;
                }
                medians[name] = res[c].corpus_median;
                contexts[name] = {{"shortfall", res[c].result.shortfall}, {"all_at_least_median", all_at_least}};
            }
            j["corpus_median"] = medians;
            j["contexts"] = contexts;
            emit("topk", csv.str(), j);
        } else {
            throw ConfigError("unknown report '" + w + "'");
        }
    }
    return sum;
}

}  // namespace rairl
