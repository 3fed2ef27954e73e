#include "minigpt/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "minigpt/calibration.hpp"
#include "minigpt/checkpoint.hpp"
#include "minigpt/dataset.hpp"
#include "minigpt/eval.hpp"
#include "minigpt/pruning.hpp"
#include "minigpt/training.hpp"

namespace minigpt {
namespace {

namespace fs = std::filesystem;

std::string hash_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorClass::io, "cannot open input " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string bytes = ss.str();
    return hex64(fnv1a64(std::span<const uint8_t>(
        reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size())));
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) fail(ErrorClass::io, "cannot write " + path);
    f << content;
    if (!f) fail(ErrorClass::io, "failed writing " + path);
}

// Every subcommand leaves a manifest next to its artifact: the resolved
// configuration, a hash of each input file, and the list of files written.
// Rerunning with the same inputs reproduces both artifact and manifest.
struct Manifest {
    std::string subcommand;
    nlohmann::json config = nlohmann::json::object();
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;

    void write(const std::string& path) const {
        nlohmann::json j;
        j["version"] = 1;
        j["tool"] = "minigpt";
        j["subcommand"] = subcommand;
        j["config"] = config;
        nlohmann::json in = nlohmann::json::object();
        for (const std::string& p : inputs) in[p] = hash_file(p);
        j["inputs"] = std::move(in);
        j["outputs"] = outputs;
        write_text(path, j.dump(2) + "\n");
    }
};

// Config files are read by the root app so one file can carry a [section] per
// subcommand; fallthrough lets --config appear after the subcommand name.
void add_config_option(CLI::App* c) {
    c->fallthrough();
}

std::string fmt(double v, int precision) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(precision) << v;
    return s.str();
}

// ---------------------------------------------------------------------------
// Shared option bundles
// ---------------------------------------------------------------------------

struct TrainFlags {
    TrainConfig cfg;
    std::string optimizer = "adam";
    double held_out = 0.1;

    void add(CLI::App* c, bool with_target) {
        c->add_option("--lr", cfg.learning_rate, "learning rate")->capture_default_str();
        c->add_option("--batch-size", cfg.batch_size, "blocks per optimizer step")
            ->capture_default_str();
        c->add_option("--max-epochs", cfg.max_epochs, "epoch budget")->capture_default_str();
        c->add_option("--optimizer", optimizer, "sgd or adam")
            ->check(CLI::IsMember({"sgd", "adam"}))
            ->capture_default_str();
        c->add_option("--held-out-fraction", held_out, "share of entries held out for eval")
            ->capture_default_str();
        if (with_target) {
            c->add_option("--target-ppl", target_ppl, "stop at this held-out perplexity");
        }
    }

    TrainConfig resolve(int64_t seq_len, uint64_t seed) const {
        TrainConfig t = cfg;
        t.seq_len = seq_len;
        t.seed = seed;
        t.optimizer = optimizer_from_name(optimizer);
        if (target_ppl > 0.0f) t.target_perplexity = target_ppl;
        return t;
    }

    nlohmann::json echo(int64_t seq_len, uint64_t seed) const {
        return {{"lr", cfg.learning_rate},
                {"batch_size", cfg.batch_size},
                {"seq_len", seq_len},
                {"max_epochs", cfg.max_epochs},
                {"optimizer", optimizer},
                {"seed", seed},
                {"held_out_fraction", held_out}};
    }

    float target_ppl = 0.0f;
};

// Threshold resolution order: explicit flag > config file value > preset >
// built-in default (1e-3). Embedding pruning turns on only when a preset or
// an explicit --min-token-count supplies a count.
struct ThresholdFlags {
    std::string preset;
    float eps_linear = 1e-3f;
    float eps_act = 1e-3f;
    int64_t min_token_count = 0;
    CLI::Option* opt_linear = nullptr;
    CLI::Option* opt_act = nullptr;
    CLI::Option* opt_min = nullptr;

    void add(CLI::App* c) {
        c->add_option("--preset", preset, "threshold preset: default (1e-3) or aggressive (1e-1)")
            ->check(CLI::IsMember({"default", "aggressive"}));
        opt_linear = c->add_option("--threshold-linear", eps_linear,
                                   "drop units quiet at the linear sites");
        opt_act = c->add_option("--threshold-act", eps_act,
                                "drop units quiet after the activation");
        opt_min = c->add_option("--min-token-count", min_token_count,
                                "prune tokens seen at most this often (enables embedding pruning)");
    }

    PlanOptions resolve() const {
        PlanOptions po;
        po.eps_linear = 1e-3f;
        po.eps_act = 1e-3f;
        po.prune_embeddings = false;
        po.min_token_count = 0;
        if (!preset.empty()) {
            const float eps = preset == "aggressive" ? 1e-1f : 1e-3f;
            po.eps_linear = eps;
            po.eps_act = eps;
            po.prune_embeddings = true;
        }
        if (opt_linear->count() > 0) po.eps_linear = eps_linear;
        if (opt_act->count() > 0) po.eps_act = eps_act;
        if (opt_min->count() > 0) {
            po.prune_embeddings = true;
            po.min_token_count = min_token_count;
        }
        return po;
    }

    nlohmann::json echo() const {
        const PlanOptions po = resolve();
        return {{"preset", preset.empty() ? "none" : preset},
                {"threshold_linear", po.eps_linear},
                {"threshold_act", po.eps_act},
                {"prune_embeddings", po.prune_embeddings},
                {"min_token_count", po.min_token_count}};
    }
};

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

void add_tokenizer_train(CLI::App& app, std::ostream& out) {
    struct Opts {
        std::string dataset, out_path;
        int64_t vocab_size = 512;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("tokenizer-train", "Train a byte-level BPE tokenizer");
    add_config_option(c);
    c->add_option("--dataset", o->dataset, "training text, one entry per line")->required();
    c->add_option("--vocab-size", o->vocab_size, "vocabulary budget")->capture_default_str();
    c->add_option("--out", o->out_path, "tokenizer JSON path")->required();
    c->callback([o, &out] {
        const std::vector<std::string> entries = load_text_entries(o->dataset);
        const BpeTokenizer tok =
            BpeTokenizer::train(entries, static_cast<int32_t>(o->vocab_size));
        tok.save(o->out_path);
        Manifest m;
        m.subcommand = "tokenizer-train";
        m.config = {{"dataset", o->dataset}, {"vocab_size", o->vocab_size}, {"out", o->out_path}};
        m.inputs = {o->dataset};
        m.outputs = {o->out_path};
        m.write(o->out_path + ".manifest.json");
        out << "tokenizer: " << tok.vocab_size() << " tokens -> " << o->out_path << "\n";
    });
}

void add_pretrain(CLI::App& app, std::ostream& out) {
    struct Opts {
        std::string dataset, tokenizer, out_path, activation = "gelu";
        int64_t layers = 2, d_model = 64, heads = 4, max_seq = 48, seq_len = 32;
        std::vector<int64_t> d_ff;
        uint64_t seed = 0;
        bool tie_head = false;
        TrainFlags train;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("pretrain", "Initialize and train a model from scratch");
    add_config_option(c);
    c->add_option("--dataset", o->dataset, "training text")->required();
    c->add_option("--tokenizer", o->tokenizer, "tokenizer JSON")->required();
    c->add_option("--out", o->out_path, "checkpoint path")->required();
    c->add_option("--layers", o->layers)->capture_default_str();
    c->add_option("--d-model", o->d_model)->capture_default_str();
    c->add_option("--heads", o->heads)->capture_default_str();
    c->add_option("--d-ff", o->d_ff, "per-layer widths; one value broadcasts")->delimiter(',');
    c->add_option("--max-seq", o->max_seq)->capture_default_str();
    c->add_option("--seq-len", o->seq_len, "training window")->capture_default_str();
    c->add_option("--activation", o->activation)->check(CLI::IsMember({"gelu", "relu"}));
    c->add_flag("--tie-head", o->tie_head, "share the embedding with the LM head");
    c->add_option("--seed", o->seed)->capture_default_str();
    o->train.add(c, false);
    c->callback([o, &out] {
        const std::vector<std::string> entries = load_text_entries(o->dataset);
        const BpeTokenizer tok = BpeTokenizer::load(o->tokenizer);
        const SplitResult split = split_dataset(entries, o->train.held_out, o->seed);

        ModelConfig mc;
        mc.n_layers = o->layers;
        mc.d_model = o->d_model;
        mc.n_heads = o->heads;
        mc.d_ff = o->d_ff;
        if (mc.d_ff.empty()) mc.d_ff.assign(static_cast<size_t>(o->layers), 4 * o->d_model);
        if (mc.d_ff.size() == 1 && o->layers > 1) {
            mc.d_ff.assign(static_cast<size_t>(o->layers), mc.d_ff[0]);
        }
        mc.vocab_size = tok.vocab_size();
        mc.max_seq = o->max_seq;
        mc.activation = activation_from_name(o->activation);
        mc.tie_lm_head = o->tie_head;

        ModelBundle model = init_model(mc, tok, o->seed);
        const TrainConfig tc = o->train.resolve(o->seq_len, o->seed);
        const TrainHistory history = train(model, split.train, tc, split.held_out);
        save_model(model, o->out_path);
        history.save_csv(o->out_path + ".history.csv");
        write_text(o->out_path + ".history.json", history.to_json_string() + "\n");

        Manifest m;
        m.subcommand = "pretrain";
        m.config = o->train.echo(o->seq_len, o->seed);
        m.config["dataset"] = o->dataset;
        m.config["tokenizer"] = o->tokenizer;
        m.config["out"] = o->out_path;
        m.config["model"] = nlohmann::json::parse(mc.to_json_string());
        m.inputs = {o->dataset, o->tokenizer};
        m.outputs = {o->out_path, o->out_path + ".history.csv", o->out_path + ".history.json"};
        m.write(o->out_path + ".manifest.json");

        out << "pretrained " << history.epochs.size() << " epochs, final loss "
            << fmt(history.epochs.back().loss, 6) << ", held-out perplexity "
            << fmt(history.epochs.back().perplexity, 6) << ", " << param_count(model)
            << " params -> " << o->out_path << "\n";
    });
}

void add_calibrate(CLI::App& app, std::ostream& out) {
    struct Opts {
        std::string model, dataset, out_path, aggregate = "mean", dataset_id;
        int64_t seq_len = 32, max_entries = 0;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("calibrate", "Record activation statistics on a dataset");
    add_config_option(c);
    c->add_option("--model", o->model, "checkpoint")->required();
    c->add_option("--dataset", o->dataset, "calibration text")->required();
    c->add_option("--out", o->out_path, "stats JSON path")->required();
    c->add_option("--seq-len", o->seq_len)->capture_default_str();
    c->add_option("--max-entries", o->max_entries, "0 means all")->capture_default_str();
    c->add_option("--aggregate", o->aggregate)->check(CLI::IsMember({"mean", "max"}));
    c->add_option("--dataset-id", o->dataset_id, "label stored in the stats file");
    c->callback([o, &out] {
        const ModelBundle model = load_model(o->model);
        const std::vector<std::string> entries = load_text_entries(o->dataset);
        CollectOptions co;
        co.seq_len = o->seq_len;
        co.max_entries = o->max_entries;
        co.aggregate = aggregate_from_name(o->aggregate);
        co.dataset_id = o->dataset_id.empty() ? o->dataset : o->dataset_id;
        const StatsReport stats = collect_stats(model, entries, co);
        stats.save(o->out_path);

        Manifest m;
        m.subcommand = "calibrate";
        m.config = {{"model", o->model},       {"dataset", o->dataset},
                    {"out", o->out_path},      {"seq_len", o->seq_len},
                    {"max_entries", o->max_entries}, {"aggregate", o->aggregate},
                    {"dataset_id", co.dataset_id}};
        m.inputs = {o->model, o->dataset};
        m.outputs = {o->out_path};
        m.write(o->out_path + ".manifest.json");

        out << "calibrated " << stats.sites.size() << " sites over " << stats.entries_processed
            << " entries (" << stats.entries_skipped << " skipped) -> " << o->out_path << "\n";
    });
}

void add_plan(CLI::App& app, std::ostream& out) {
    struct Opts {
        std::string model, stats, out_path;
        ThresholdFlags thresholds;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("plan", "Build a prune plan from activation statistics");
    add_config_option(c);
    c->add_option("--model", o->model, "checkpoint")->required();
    c->add_option("--stats", o->stats, "stats JSON")->required();
    c->add_option("--out", o->out_path, "plan JSON path")->required();
    o->thresholds.add(c);
    c->callback([o, &out] {
        const ModelBundle model = load_model(o->model);
        const StatsReport stats = StatsReport::load(o->stats);
        const PlanOptions po = o->thresholds.resolve();
        const PrunePlan plan = build_plan(model, stats, po);
        plan.save(o->out_path);

        int64_t dropped = 0;
        for (const LayerPlan& l : plan.layers) dropped += static_cast<int64_t>(l.dropped.size());
        Manifest m;
        m.subcommand = "plan";
        m.config = o->thresholds.echo();
        m.config["model"] = o->model;
        m.config["stats"] = o->stats;
        m.config["out"] = o->out_path;
        m.inputs = {o->model, o->stats};
        m.outputs = {o->out_path};
        m.write(o->out_path + ".manifest.json");

        out << "plan: drop " << dropped << " hidden units, keep " << plan.keep_tokens.size()
            << " tokens, predict " << plan.predicted_param_count << " params -> " << o->out_path
            << "\n";
    });
}

void add_prune(CLI::App& app, std::ostream& out) {
    struct Opts {
        std::string model, plan, out_path;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("prune", "Apply a prune plan to a checkpoint");
    add_config_option(c);
    c->add_option("--model", o->model, "checkpoint")->required();
    c->add_option("--plan", o->plan, "plan JSON")->required();
    c->add_option("--out", o->out_path, "pruned checkpoint path")->required();
    c->callback([o, &out] {
        const ModelBundle base = load_model(o->model);
        const PrunePlan plan = PrunePlan::load(o->plan);
        const PruneResult result = merge_and_apply(base, plan);
        save_model(result.model, o->out_path);

        Manifest m;
        m.subcommand = "prune";
        m.config = {{"model", o->model}, {"plan", o->plan}, {"out", o->out_path}};
        m.inputs = {o->model, o->plan};
        m.outputs = {o->out_path};
        m.write(o->out_path + ".manifest.json");

        out << "pruned " << param_count(base) << " -> " << param_count(result.model)
            << " params (relative size " << fmt(relative_size(base, result.model), 3) << "%) -> "
            << o->out_path << "\n";
    });
}

void add_finetune(CLI::App& app, std::ostream& out) {
    struct Opts {
        std::string model, dataset, base, out_path;
        int64_t seq_len = 32;
        uint64_t seed = 0;
        TrainFlags train;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("finetune", "Fine-tune until perplexity recovers");
    add_config_option(c);
    c->add_option("--model", o->model, "checkpoint to tune (typically pruned)")->required();
    c->add_option("--dataset", o->dataset, "fine-tuning text")->required();
    c->add_option("--base", o->base, "unpruned checkpoint whose perplexity is the target");
    c->add_option("--out", o->out_path, "recovered checkpoint path")->required();
    c->add_option("--seq-len", o->seq_len)->capture_default_str();
    c->add_option("--seed", o->seed)->capture_default_str();
    o->train.add(c, true);
    c->callback([o, &out] {
        ModelBundle model = load_model(o->model);
        const std::vector<std::string> entries = load_text_entries(o->dataset);
        const SplitResult split = split_dataset(entries, o->train.held_out, o->seed);

        TrainConfig tc = o->train.resolve(o->seq_len, o->seed);
        if (!o->base.empty()) {
            if (tc.target_perplexity) {
                fail(ErrorClass::config, "--base and --target-ppl are mutually exclusive");
            }
            const ModelBundle base = load_model(o->base);
            tc.target_perplexity = recovery_target(base, split.held_out, o->seq_len);
        }
        if (!tc.target_perplexity) {
            fail(ErrorClass::config, "finetune needs --base or --target-ppl for the stopping rule");
        }
        tc.checkpoint_path = o->out_path;
        const TrainHistory history = train(model, split.train, tc, split.held_out);
        save_model(model, o->out_path);
        history.save_csv(o->out_path + ".history.csv");
        write_text(o->out_path + ".history.json", history.to_json_string() + "\n");

        Manifest m;
        m.subcommand = "finetune";
        m.config = o->train.echo(o->seq_len, o->seed);
        m.config["model"] = o->model;
        m.config["dataset"] = o->dataset;
        m.config["base"] = o->base;
        m.config["target_ppl"] = *tc.target_perplexity;
        m.config["out"] = o->out_path;
        m.inputs = {o->model, o->dataset};
        if (!o->base.empty()) m.inputs.push_back(o->base);
        m.outputs = {o->out_path, o->out_path + ".history.csv", o->out_path + ".history.json"};
        m.write(o->out_path + ".manifest.json");

        out << "fine-tuned " << history.epochs.size() << " epochs, target "
            << fmt(*tc.target_perplexity, 6) << ", final perplexity "
            << fmt(history.epochs.back().perplexity, 6) << ", recovery ";
        if (history.recovery_epochs) {
            out << "at epoch " << *history.recovery_epochs;
        } else {
            out << "not reached";
        }
        out << " -> " << o->out_path << "\n";
    });
}

void add_eval_ppl(CLI::App& app, std::ostream& out) {
    struct Opts {
        std::string model, dataset, out_path;
        int64_t seq_len = 32;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("eval-ppl", "Perplexity over a text dataset");
    add_config_option(c);
    c->add_option("--model", o->model, "checkpoint")->required();
    c->add_option("--dataset", o->dataset, "evaluation text")->required();
    c->add_option("--out", o->out_path, "report JSON path")->required();
    c->add_option("--seq-len", o->seq_len)->capture_default_str();
    c->callback([o, &out] {
        const ModelBundle model = load_model(o->model);
        const std::vector<std::string> entries = load_text_entries(o->dataset);
        const EvalReport report = perplexity(model, entries, o->seq_len);
        report.save(o->out_path);

        Manifest m;
        m.subcommand = "eval-ppl";
        m.config = {{"model", o->model},
                    {"dataset", o->dataset},
                    {"out", o->out_path},
                    {"seq_len", o->seq_len}};
        m.inputs = {o->model, o->dataset};
        m.outputs = {o->out_path};
        m.write(o->out_path + ".manifest.json");
        out << report.table();
    });
}

void add_eval_mcq(CLI::App& app, std::ostream& out) {
    struct Opts {
        std::string model, mcq, out_path;
        bool answer_only = false;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("eval-mcq", "Multiple-choice accuracy from a JSONL file");
    add_config_option(c);
    c->add_option("--model", o->model, "checkpoint")->required();
    c->add_option("--mcq", o->mcq, "items, one JSON object per line")->required();
    c->add_option("--out", o->out_path, "report JSON path")->required();
    c->add_flag("--answer-only", o->answer_only, "score only the answer tokens");
    c->callback([o, &out] {
        const ModelBundle model = load_model(o->model);
        const std::vector<McqItem> items = load_mcq_jsonl(o->mcq);
        McqOptions mo;
        mo.answer_only = o->answer_only;
        const EvalReport report = mcq_eval(model, items, mo);
        report.save(o->out_path);

        Manifest m;
        m.subcommand = "eval-mcq";
        m.config = {{"model", o->model},
                    {"mcq", o->mcq},
                    {"out", o->out_path},
                    {"answer_only", o->answer_only}};
        m.inputs = {o->model, o->mcq};
        m.outputs = {o->out_path};
        m.write(o->out_path + ".manifest.json");
        out << report.table();
    });
}

void add_compare_stats(CLI::App& app, std::ostream& out) {
    struct Opts {
        std::string stats_a, stats_b, out_path;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("compare-stats", "Per-neuron CSV of two stats files");
    add_config_option(c);
    c->add_option("--stats-a", o->stats_a, "first stats JSON")->required();
    c->add_option("--stats-b", o->stats_b, "second stats JSON")->required();
    c->add_option("--out", o->out_path, "CSV path")->required();
    c->callback([o, &out] {
        const StatsReport a = StatsReport::load(o->stats_a);
        const StatsReport b = StatsReport::load(o->stats_b);
        const std::vector<CompareRow> rows = compare_stats(a, b);
        write_text(o->out_path, compare_csv(rows));

        Manifest m;
        m.subcommand = "compare-stats";
        m.config = {{"stats_a", o->stats_a}, {"stats_b", o->stats_b}, {"out", o->out_path}};
        m.inputs = {o->stats_a, o->stats_b};
        m.outputs = {o->out_path};
        m.write(o->out_path + ".manifest.json");
        out << "compared " << rows.size() << " neurons -> " << o->out_path << "\n";
    });
}

void add_pipeline(CLI::App& app, std::ostream& out) {
    struct Opts {
        std::string model, dataset, dataset_b, mcq, outdir;
        int64_t seq_len = 32;
        uint64_t seed = 0;
        ThresholdFlags thresholds;
        TrainFlags train;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand(
        "pipeline", "Base eval, calibrate, prune, fine-tune to recovery, report");
    add_config_option(c);
    c->add_option("--model", o->model, "base checkpoint")->required();
    c->add_option("--dataset", o->dataset, "calibration and fine-tuning domain")->required();
    c->add_option("--dataset-b", o->dataset_b, "contrast domain, evaluated but never calibrated");
    c->add_option("--mcq", o->mcq, "MCQ items for accuracy tracking");
    c->add_option("--out", o->outdir, "output directory")->required();
    c->add_option("--seq-len", o->seq_len)->capture_default_str();
    c->add_option("--seed", o->seed)->capture_default_str();
    o->thresholds.add(c);
    o->train.add(c, false);
    c->callback([o, &out] {
        fs::create_directories(o->outdir);
        const auto path = [&](const char* name) { return (fs::path(o->outdir) / name).string(); };

        const ModelBundle base = load_model(o->model);
        const std::vector<std::string> entries = load_text_entries(o->dataset);
        const SplitResult split = split_dataset(entries, o->train.held_out, o->seed);

        const float ppl_base = perplexity(base, split.held_out, o->seq_len).value;
        out << "base perplexity " << fmt(ppl_base, 6) << " on " << split.held_out.size()
            << " held-out entries\n";

        CollectOptions co;
        co.seq_len = o->seq_len;
        co.dataset_id = "domain-a";
        const StatsReport stats = collect_stats(base, split.train, co);
        stats.save(path("stats.json"));
        out << "calibrated " << stats.sites.size() << " sites on " << stats.entries_processed
            << " entries\n";

        const PlanOptions po = o->thresholds.resolve();
        const PrunePlan plan = build_plan(base, stats, po);
        plan.save(path("plan.json"));
        PruneResult result = merge_and_apply(base, plan);
        save_model(result.model, path("pruned.ckpt"));
        const double rel = relative_size(base, result.model);
        out << "pruned to " << param_count(result.model) << " params (" << fmt(rel, 3) << "%)\n";

        const float ppl_post = perplexity(result.model, split.held_out, o->seq_len).value;
        float b_base = 0.0f, b_post = 0.0f, b_fine = 0.0f;
        std::vector<std::string> entries_b;
        if (!o->dataset_b.empty()) {
            entries_b = load_text_entries(o->dataset_b);
            b_base = perplexity(base, entries_b, o->seq_len).value;
            b_post = perplexity(result.model, entries_b, o->seq_len).value;
        }
        float mcq_base = 0.0f, mcq_post = 0.0f, mcq_fine = 0.0f;
        std::vector<McqItem> items;
        if (!o->mcq.empty()) {
            items = load_mcq_jsonl(o->mcq);
            mcq_base = mcq_eval(base, items).value;
            mcq_post = mcq_eval(result.model, items).value;
        }

        TrainConfig tc = o->train.resolve(o->seq_len, o->seed);
        tc.target_perplexity = ppl_base;
        const TrainHistory history = train(result.model, split.train, tc, split.held_out);
        save_model(result.model, path("recovered.ckpt"));
        history.save_csv(path("history.csv"));
        write_text(path("history.json"), history.to_json_string() + "\n");
        const float ppl_fine = history.epochs.back().perplexity;
        if (!o->dataset_b.empty()) {
            b_fine = perplexity(result.model, entries_b, o->seq_len).value;
        }
        if (!o->mcq.empty()) mcq_fine = mcq_eval(result.model, items).value;

        nlohmann::json report;
        report["version"] = 1;
        report["config"] = o->thresholds.echo();
        report["config"].update(o->train.echo(o->seq_len, o->seed));
        report["base"] = {{"perplexity", ppl_base}, {"param_count", param_count(base)}};
        report["post_prune"] = {{"perplexity", ppl_post},
                                {"param_count", param_count(result.model)},
                                {"relative_size", rel}};
        report["fine_tune"] = {{"perplexity", ppl_fine},
                               {"epochs_run", history.epochs.size()},
                               {"recovered", history.recovery_epochs.has_value()}};
        if (history.recovery_epochs) {
            report["fine_tune"]["recovery_epochs"] = *history.recovery_epochs;
        } else {
            report["fine_tune"]["recovery_epochs"] = nullptr;
        }
        if (!o->dataset_b.empty()) {
            report["domain_b"] = {{"base", b_base}, {"post_prune", b_post}, {"fine_tune", b_fine}};
        }
        if (!o->mcq.empty()) {
            report["mcq"] = {{"base", mcq_base}, {"post_prune", mcq_post}, {"fine_tune", mcq_fine}};
        }
        write_text(path("report.json"), report.dump(2) + "\n");

        std::ostringstream row;
        row << "Base        Post prune  Fine-tune   Recovery epochs  Relative Size %\n";
        row << std::left << std::setw(12) << fmt(ppl_base, 6) << std::setw(12)
            << fmt(ppl_post, 6) << std::setw(12) << fmt(ppl_fine, 6) << std::setw(17)
            << (history.recovery_epochs ? std::to_string(*history.recovery_epochs) : "-")
            << fmt(rel, 3) << "\n";
        if (!o->dataset_b.empty()) {
            row << "domain-b: base " << fmt(b_base, 6) << ", post prune " << fmt(b_post, 6)
                << ", fine-tune " << fmt(b_fine, 6) << "\n";
        }
        if (!o->mcq.empty()) {
            row << "mcq: base " << fmt(mcq_base, 3) << "%, post prune " << fmt(mcq_post, 3)
                << "%, fine-tune " << fmt(mcq_fine, 3) << "%\n";
        }
        write_text(path("report.txt"), row.str());
        out << row.str();

        Manifest m;
        m.subcommand = "pipeline";
        m.config = o->thresholds.echo();
        m.config.update(o->train.echo(o->seq_len, o->seed));
        m.config["model"] = o->model;
        m.config["dataset"] = o->dataset;
        m.config["dataset_b"] = o->dataset_b;
        m.config["mcq"] = o->mcq;
        m.config["out"] = o->outdir;
        m.inputs = {o->model, o->dataset};
        if (!o->dataset_b.empty()) m.inputs.push_back(o->dataset_b);
        if (!o->mcq.empty()) m.inputs.push_back(o->mcq);
        m.outputs = {path("stats.json"),   path("plan.json"),    path("pruned.ckpt"),
                     path("recovered.ckpt"), path("history.csv"), path("history.json"),
                     path("report.json"),  path("report.txt")};
        m.write(path("manifest.json"));
    });
}

}  // namespace

int exit_code_for(ErrorClass c) {
    switch (c) {
        case ErrorClass::config: return 2;
        case ErrorClass::io: return 3;
        case ErrorClass::format: return 4;
        case ErrorClass::dimension: return 5;
        case ErrorClass::index: return 6;
        case ErrorClass::numeric: return 7;
        case ErrorClass::fingerprint: return 8;
        case ErrorClass::evaluation: return 9;
        case ErrorClass::contract: return 10;
    }
    return 1;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"minigpt: build, contextually prune, and evaluate small GPT-style models"};
    app.require_subcommand(1);
    app.set_config("--config", "",
                   "key=value file with one [section] per subcommand; flags override it");
    app.allow_config_extras(CLI::config_extras_mode::ignore);

    add_tokenizer_train(app, out);
    add_pretrain(app, out);
    add_calibrate(app, out);
    add_plan(app, out);
    add_prune(app, out);
    add_finetune(app, out);
    add_eval_ppl(app, out);
    add_eval_mcq(app, out);
    add_compare_stats(app, out);
    add_pipeline(app, out);

    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("minigpt");
    for (const std::string& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e, out, err);
        return rc == 0 ? 0 : exit_code_for(ErrorClass::config);
    } catch (const Error& e) {
        err << "error (" << error_class_name(e.cls()) << "): " << e.what() << "\n";
        return exit_code_for(e.cls());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

int run_cli(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(args, std::cout, std::cerr);
}

}  // namespace minigpt
