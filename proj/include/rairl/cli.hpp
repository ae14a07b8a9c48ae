#pragma once

// Command-line front end: train | eval | diagnose | dynamics | ablate.
// Exit codes: 0 ok, 2 configuration or input error, 3 numerical abort,
// 4 version mismatch, 1 anything else.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "rairl/experiment.hpp"

namespace rairl::cli {

inline constexpr int exit_ok = 0;
inline constexpr int exit_other = 1;
inline constexpr int exit_config = 2;
inline constexpr int exit_numeric = 3;
inline constexpr int exit_version = 4;

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> sets;
};

inline std::shared_ptr<spdlog::logger> logger() {
    if (auto l = spdlog::get("rairl")) {
        return l;
    }
    auto l = spdlog::stderr_logger_st("rairl");
    l->set_pattern("[%l] %v");
    const char* env = std::getenv("RAIRL_LOG");
    l->set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
    return l;
}

/// Reads --config (or the defaults), applies --set in order, validates.
inline ExperimentConfig load_config(const CommonOptions& o, nlohmann::json doc = nlohmann::json::object(),
                                    std::filesystem::path base_dir = {}) {
    if (!o.config.empty()) {
        doc = read_json_file(o.config, "config file");
        base_dir = std::filesystem::path(o.config).parent_path();
    } else if (doc.empty()) {
        doc = {{"version", experiment_config_version}};
    }
    for (const auto& s : o.sets) {
        apply_override(doc, s);
    }
    auto cfg = experiment_config_from_json(doc, base_dir);
    if (!o.out.empty()) {
        cfg.output_dir = o.out;
    }
    return cfg;
}

inline void write_run_outputs(const std::filesystem::path& dir, const RunRecord& rec) {
    std::ostringstream csv;
    write_run_csv(csv, rec);
    write_text_file(dir / "run.csv", csv.str());
    write_json_file(dir / "run.json", run_summary_json(rec));
}

/// Trains per `cfg` and writes run.csv, run.json, final.ckpt and
/// config-echo.json into `dir`. Returns the record; on a numerical abort also
/// writes abort.json and no checkpoint.
inline RunRecord train_into(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto world = build_world(cfg.world);
    const auto echo = experiment_config_to_json(cfg);
    write_json_file(dir / "config-echo.json", echo);
    Trainer trainer(cfg.training, world);
    auto log = logger();
    log->info("training {} for {} iterations (seed {})", to_string(cfg.training.loss.kind), cfg.training.iterations,
              cfg.training.seed);
    const auto rec = trainer.run(cfg.training.iterations, {}, [&](const RunPoint& p) {
        log->info("iter {:>6}  D_gen {:.4f}  |D-0.5| {:.4f}  KL {:.4f}  distinct {}", p.iteration, p.mean_d_gen,
                  p.mean_abs_dev, p.kl_mean, p.distinct);
    });
    write_run_outputs(dir, rec);
    if (rec.abort) {
        const auto path = dir / "abort.json";
        write_json_file(path, run_summary_json(rec).at("abort"));
        log->error("numerical abort at iteration {}: {} (record: {})", rec.abort->iteration, rec.abort->message,
                   path.string());
        return rec;
    }
    save_checkpoint((dir / "final.ckpt").string(), Checkpoint{checkpoint_config_json(cfg), trainer.state()});
    return rec;
}

struct LoadedCheckpoint {
    ExperimentConfig config;
    GrammarWorld world;
    TrainedModels models;
};

inline LoadedCheckpoint open_checkpoint(const std::string& path, const std::string& world_path,
                                        const CommonOptions& o) {
    const auto ck = load_checkpoint(path);
    auto opts = o;
    opts.config.clear();
    auto cfg = load_config(opts, ck.config);
    if (!world_path.empty()) {
        cfg.world = load_world_spec(world_path);
    }
    if (o.seed) {
        cfg.evaluation.seed = *o.seed;
    }
    auto world = build_world(cfg.world);
    auto models = models_from_state(world, cfg.training, ck.state);
    return {std::move(cfg), std::move(world), std::move(models)};
}

inline int cmd_train(const CommonOptions& o) {
    auto cfg = load_config(o);
    if (o.seed) {
        cfg.training.seed = *o.seed;
    }
    const auto rec = train_into(cfg, cfg.output_dir);
    return rec.abort ? exit_numeric : exit_ok;
}

inline int cmd_eval(const CommonOptions& o, const std::string& checkpoint, const std::string& world_path,
                    std::vector<std::string> which) {
    const auto ck = open_checkpoint(checkpoint, world_path, o);
    if (which.empty()) {
        which = ck.config.evaluation.reports;
    }
    for (const auto& w : which) {
        if (std::find(known_reports().begin(), known_reports().end(), w) == known_reports().end()) {
            throw ConfigError("--which: unknown report '" + w + "'");
        }
    }
    run_evaluation(ck.config, ck.world, ck.models, which, ck.config.output_dir);
    return exit_ok;
}

/// One sequence per line: a context name followed by token names, separated
/// by whitespace. EOS is appended when missing. Blank lines and lines
/// starting with '#' are skipped.
struct DiagnosisInput {
    std::size_t line = 0;
    SequenceSample sample;
};

inline std::vector<DiagnosisInput> read_sequences(const GrammarWorld& world, const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open input sequences '" + path + "'");
    }
    std::vector<DiagnosisInput> out;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        std::istringstream is(text);
        std::string ctx_name;
        if (!(is >> ctx_name) || ctx_name.starts_with('#')) {
            continue;
        }
        const auto where = path + ":" + std::to_string(line) + ": ";
        std::optional<std::size_t> ctx;
        for (std::size_t c = 0; c < world.context_count(); ++c) {
            if (world.context(c).name == ctx_name) {
                ctx = c;
            }
        }
        if (!ctx) {
            throw ConfigError(where + "unknown context '" + ctx_name + "'");
        }
        std::string rest;
        std::getline(is, rest);
        DiagnosisInput d;
        d.line = line;
        d.sample.context = *ctx;
        d.sample.source = SampleSource::generated;
        try {
            d.sample.tokens = parse_tokens(world.vocab(), rest);
            if (d.sample.tokens.empty() || d.sample.tokens.back() != world.vocab().eos()) {
                d.sample.tokens.push_back(world.vocab().eos());
            }
            validate_sample(world, d.sample);
        } catch (const InvalidInput& e) {
            throw ConfigError(where + e.what());
        }
        out.push_back(std::move(d));
    }
    return out;
}

inline int cmd_diagnose(const CommonOptions& o, const std::string& checkpoint, const std::string& world_path,
                        const std::string& input) {
    const auto ck = open_checkpoint(checkpoint, world_path, o);
    const auto& world = ck.world;
    const auto seqs = read_sequences(world, input);
    const auto& e = ck.config.evaluation;
    DiagnosisOptions opt;
    opt.threshold = e.diagnosis_threshold;
    opt.scorer = e.diagnosis_scorer;
    opt.max_length = world.max_length();
    std::vector<SequenceSample> plain;
    for (const auto& s : seqs) {
        plain.push_back(s.sample);
    }
    opt.scale = plain.empty() ? 1.0 : diagnosis_scale(ck.models.disc, world, plain, opt.scorer);
    std::vector<std::vector<TokenSeq>> refs(world.context_count());
    for (std::size_t c = 0; c < world.context_count(); ++c) {
        refs[c] = reference_sentences(world, c, ck.config.training.kl_enumeration_cap);
    }
    Rng rng(derive_seed(e.seed, eval_stream::diagnosis));
    std::ostringstream csv;
    CsvWriter w(csv, schema::diagnosis());
    std::size_t flagged = 0;
    double improvement = 0.0;
    const auto& v = world.vocab();
    for (const auto& s : seqs) {
        const auto r = diagnose_and_rewrite(ck.models.disc, ck.models.policy, world.context(s.sample.context),
                                            s.sample, refs[s.sample.context], opt, rng);
        std::string rewards;
        for (std::size_t i = 0; i < r.rewards.size(); ++i) {
            rewards += (i ? " " : "") + format_double(r.rewards[i]);
        }
        const bool f = r.flagged.has_value();
        w.row({std::to_string(s.line), world.context(s.sample.context).name, token_text(v, s.sample.tokens),
               f ? std::to_string(*r.flagged) : "", rewards, f ? token_text(v, r.rewrite->tokens) : "",
               f ? std::to_string(r.baseline_position) : "", f ? token_text(v, r.baseline_rewrite->tokens) : "",
               format_double(r.original_metric), f ? format_double(r.rewrite_metric) : "",
               f ? format_double(r.baseline_metric) : "", format_double(r.improvement)});
        if (f) {
            ++flagged;
            improvement += r.improvement;
        }
    }
    const std::filesystem::path dir = ck.config.output_dir;
    std::filesystem::create_directories(dir);
    write_text_file(dir / "diagnosis.csv", csv.str());
    auto j = make_summary(schema::diagnosis_summary());
    j["sequences"] = seqs.size();
    j["flagged"] = flagged;
    j["mean_improvement"] = flagged ? improvement / static_cast<double>(flagged) : 0.0;
    j["threshold"] = opt.threshold;
    j["scorer"] = std::string(to_string(opt.scorer));
    j["scale"] = opt.scale;
    write_json_file(dir / "diagnosis.json", j);
    return exit_ok;
}

inline int cmd_dynamics(const CommonOptions& o) {
    auto cfg = load_config(o);
    auto& d = cfg.dynamics;
    if (o.seed) {
        d.init_seed = *o.seed;
    }
    const std::size_t n = d.p_true.size();
    Vector z(n), f(n);
    if (d.init == "equilibrium") {
        for (std::size_t k = 0; k < n; ++k) {
            z[k] = f[k] = std::log(d.p_true[k]);
        }
    } else {
        Rng rng(d.init_seed);
        for (std::size_t k = 0; k < n; ++k) {
            z[k] = rng.uniform(-d.init_scale, d.init_scale);
            f[k] = rng.uniform(-d.init_scale, d.init_scale);
        }
    }
    GameOptions opt{d.steps, d.generator_rate, d.discriminator_rate};
    const std::filesystem::path dir = cfg.output_dir;
    std::filesystem::create_directories(dir);
    auto j = make_summary(schema::dynamics_summary());
    j["p_true"] = d.p_true;
    j["steps"] = d.steps;
    j["generator_rate"] = d.generator_rate;
    j["discriminator_rate"] = d.discriminator_rate;
    j["init"] = d.init;
    j["variants"] = nlohmann::json::object();
    for (auto variant : {GameVariant::vanilla, GameVariant::refined}) {
        const auto traj = one_step_game(d.p_true, z, f, variant, opt);
        std::ostringstream csv;
        write_dynamics_csv(csv, traj);
        const std::string name(to_string(variant));
        write_text_file(dir / ("dynamics_" + name + ".csv"), csv.str());
        double dev = 0.0;
        const std::size_t window = std::max<std::size_t>(1, (traj.size() + 9) / 10);
        for (std::size_t i = traj.size() - window; i < traj.size(); ++i) {
            for (double x : traj[i].d) {
                dev += std::abs(x - 0.5) / static_cast<double>(window * n);
            }
        }
        j["variants"][name] = {{"final_window_d_std", final_window_d_std(traj)},
                               {"final_window_abs_dev", dev},
                               {"final_pi", traj.back().pi},
                               {"final_d", traj.back().d}};
    }
    write_json_file(dir / "dynamics.json", j);
    return exit_ok;
}

inline int cmd_ablate(const CommonOptions& o, const std::string& matrix_path) {
    const auto base = load_config(o);
    const auto matrix =
        matrix_path.empty() ? AblationMatrix::defaults() : ablation_matrix_from_json(read_json_file(matrix_path, "matrix"));
    validate_matrix(matrix);
    const std::filesystem::path dir = base.output_dir;
    std::filesystem::create_directories(dir);
    write_json_file(dir / "matrix.json", ablation_matrix_to_json(matrix));
    std::ostringstream csv;
    CsvWriter table(csv, schema::ablation());
    auto log = logger();
    for (const auto& row : matrix.rows) {
        auto cfg = base;
        if (o.seed) {
            cfg.training.seed = *o.seed;
        }
        cfg.training.loss = row.loss;
        const auto row_dir = dir / slug(row.name);
        cfg.output_dir = row_dir.string();
        std::vector<std::string> cells{row.name, std::string(to_string(row.loss.kind)),
                                       row.loss.use_constant_term ? "1" : "0",
                                       row.loss.use_conditional_term ? "1" : "0"};
        try {
            log->info("ablation row '{}'", row.name);
            const auto rec = train_into(cfg, row_dir);
            const auto done = rec.points.empty() ? 0 : rec.points.back().iteration;
            if (rec.abort) {
                cells.insert(cells.end(), {"aborted", std::to_string(done), "", "", "", "", "", "", ""});
                table.row(cells);
                continue;
            }
            const auto ck = load_checkpoint((row_dir / "final.ckpt").string());
            const auto world = build_world(cfg.world);
            const auto models = models_from_state(world, cfg.training, ck.state);
            const auto s = run_evaluation(cfg, world, models, cfg.evaluation.reports, row_dir);
            const auto opt_real = [](const std::optional<double>& x) { return x ? format_double(*x) : ""; };
            cells.insert(cells.end(),
                         {"ok", std::to_string(done),
                          format_double(final_window_mean(rec, [](const RunPoint& p) { return p.kl_mean; })),
                          format_double(final_window_mean(rec, [](const RunPoint& p) { return p.mean_abs_dev; })),
                          s.distinct ? std::to_string(*s.distinct) : "", opt_real(s.coverage), opt_real(s.novel_ratio),
                          opt_real(s.rp_s), opt_real(s.rp_d)});
        } catch (const Error& e) {
            log->error("ablation row '{}' failed: {}", row.name, e.what());
            cells.resize(4);
            cells.insert(cells.end(), {"failed", "0", "", "", "", "", "", "", ""});
        }
        table.row(cells);
    }
    write_text_file(dir / "ablation.csv", csv.str());
    return exit_ok;
}

/// Entry point shared by the executable and the tests.
inline int run(const std::vector<std::string>& args) {
    CLI::App app{"Refined adversarial inverse reinforcement learning on synthetic grammar worlds", "rairl"};
    app.require_subcommand(1);
    CommonOptions o;
    const auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "Experiment config JSON");
        sub->add_option("--seed", o.seed, "Seed override");
        sub->add_option("--out", o.out, "Output directory");
        sub->add_option("--set", o.sets, "Override KEY=VALUE (dotted path), repeatable")->take_all();
    };
    std::string checkpoint, world, input, matrix;
    std::vector<std::string> which;
    std::optional<std::size_t> steps;
    std::optional<std::string> p_true;
    std::optional<double> grate, drate;

    auto* train = app.add_subcommand("train", "Train one configuration");
    common(train);
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    common(eval);
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    eval->add_option("--world", world, "World file (default: the one stored in the checkpoint)");
    eval->add_option("--which", which, "Reports: kl, diversity, compactness, topk")->delimiter(',');
    auto* diag = app.add_subcommand("diagnose", "Locate and rewrite bad tokens");
    common(diag);
    diag->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    diag->add_option("--world", world, "World file (default: the one stored in the checkpoint)");
    diag->add_option("--input", input, "Sequences, one per line: context token token ...")->required();
    auto* dyn = app.add_subcommand("dynamics", "One-step game trajectories for both generator variants");
    common(dyn);
    dyn->add_option("--p", p_true, "True distribution, comma separated");
    dyn->add_option("--steps", steps, "Number of steps");
    dyn->add_option("--generator-rate", grate, "Generator step size");
    dyn->add_option("--discriminator-rate", drate, "Discriminator step size");
    auto* abl = app.add_subcommand("ablate", "Train and evaluate every row of an ablation matrix");
    common(abl);
    abl->add_option("--matrix", matrix, "Ablation matrix JSON (default: built-in matrix)");

    std::vector<const char*> argv{"rairl"};
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    auto log = logger();
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_config;
    }
    try {
        if (train->parsed()) {
            return cmd_train(o);
        }
        if (eval->parsed()) {
            return cmd_eval(o, checkpoint, world, which);
        }
        if (diag->parsed()) {
            return cmd_diagnose(o, checkpoint, world, input);
        }
        if (dyn->parsed()) {
            if (p_true) {
                std::string list = "[" + *p_true + "]";
                o.sets.push_back("dynamics.p_true=" + list);
            }
            if (steps) {
                o.sets.push_back("dynamics.steps=" + std::to_string(*steps));
            }
            if (grate) {
                o.sets.push_back("dynamics.generator_rate=" + format_double(*grate));
            }
            if (drate) {
                o.sets.push_back("dynamics.discriminator_rate=" + format_double(*drate));
            }
            return cmd_dynamics(o);
        }
        if (abl->parsed()) {
            return cmd_ablate(o, matrix);
        }
    } catch (const VersionError& e) {
        log->error("{}", e.what());
        return exit_version;
    } catch (const NumericalError& e) {
        log->error("{}", e.what());
        return exit_numeric;
    } catch (const ConfigError& e) {
        log->error("{}", e.what());
        return exit_config;
    } catch (const InvalidInput& e) {
        log->error("{}", e.what());
        return exit_config;
    } catch (const FormatError& e) {
        log->error("{}", e.what());
        return exit_config;
    } catch (const std::exception& e) {
        log->error("{}", e.what());
        return exit_other;
    }
    return exit_other;
}

}  // namespace rairl::cli
