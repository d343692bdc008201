// Command-line entry point: corpus generation, staged training, evaluation,
// per-instance tradeoff analysis, FLOPs reports, and the ablation grids.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "captok/config.hpp"
#include "captok/corpus.hpp"
#include "captok/evaluation.hpp"
#include "captok/flops.hpp"
#include "captok/model.hpp"
#include "captok/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace captok;

namespace {

constexpr const char* kToolVersion = "0.1.0";

void ensure_dir(const std::string& dir) { fs::create_directories(dir); }

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << text;
}

void write_run_json(const std::string& dir, json j) {
    j["tool_version"] = kToolVersion;
    write_text(dir + "/run.json", j.dump(2) + "\n");
}

RunConfig load_config(const std::string& path, long seed_override) {
    RunConfig cfg = path.empty() ? RunConfig{} : RunConfig::from_file(path);
    if (seed_override >= 0) cfg.seed = seed_override;
    cfg.validate();
    return cfg;
}

void check_split_name(const std::string& split) {
    if (split != "held" && split != "train" && split != "all")
        throw ConfigError("unknown split '" + split + "' (expected held|train|all)");
}

std::vector<int> clips_for_split(const RunConfig& cfg, int num_clips,
                                 const std::string& split) {
    check_split_name(split);
    ClipSplit sp = split_clips(num_clips, static_cast<int>(cfg.holdout_every));
    if (split == "held") return sp.held;
    if (split == "train") return sp.train;
    std::vector<int> all(static_cast<size_t>(num_clips));
    for (int i = 0; i < num_clips; ++i) all[static_cast<size_t>(i)] = i;
    return all;
}

void write_eval_outputs(const std::string& dir, const std::vector<EvalRecord>& records) {
    ensure_dir(dir);
    write_eval_records(dir + "/records.jsonl", records);
    write_summary_csv(dir + "/summary.csv", records);
    const LengthStats st = length_stats(records);
    write_histogram_csv(dir + "/lengths.csv", st.histogram);
    write_lengths_svg(dir + "/lengths.svg", st.histogram);
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "# Evaluation\n\n- instances: %zu\n- accuracy: %.4f\n"
                  "- mean visual tokens: %.2f\n- mean compressed tokens: %.2f\n",
                  records.size(), accuracy(records), st.mean_visual, st.mean_cap);
    write_text(dir + "/summary.md", buf);
}

std::vector<EvalRecord> run_eval(const Model& m, const TrainContext& ctx,
                                 const std::vector<int>& clips, const EvalOptions& opts,
                                 const std::string& out_dir) {
    std::vector<EvalRecord> records = evaluate(m, ctx, clips, opts);
    write_eval_outputs(out_dir, records);
    return records;
}

struct TrainedModel {
    RunConfig cfg;
    Model model;
};

// Stage chain used by `ablate`: 1 -> 2(with flags) -> 3, writing per-stage
// run dirs under `root`.
TrainedModel train_pipeline(const RunConfig& cfg, const TrainContext& ctx,
                            const ClipSplit& split, const Stage2Flags& flags,
                            const std::string& scheme, const std::string& root) {
    TrainedModel tm{cfg, Model::init(cfg.model, static_cast<uint64_t>(cfg.seed))};
    auto spec = [&](Stage st) {
        StageSpec s = cfg.stage_spec(st);
        s.scheme = scheme;
        return s;
    };
    StageIo io1{root + "/stage1", static_cast<int>(cfg.checkpoint_every)};
    ensure_dir(io1.dir);
    run_stage1(tm.model, ctx, split, spec(Stage::CrossModalPretrain), io1);
    StageIo io2a{root + "/stage2a", static_cast<int>(cfg.checkpoint_every)};
    StageIo io2b{root + "/stage2b", static_cast<int>(cfg.checkpoint_every)};
    if (!flags.skip_cappruner_pretrain) ensure_dir(io2a.dir);
    if (!flags.skip_post_pretrain) ensure_dir(io2b.dir);
    run_stage2(tm.model, ctx, split, spec(Stage::CapPrunerPretrain), spec(Stage::PostPretrain),
               flags, io2a, io2b);
    StageIo io3{root + "/stage3", static_cast<int>(cfg.checkpoint_every)};
    ensure_dir(io3.dir);
    run_stage3(tm.model, ctx, split, spec(Stage::Sft), io3);
    save_checkpoint(root + "/checkpoint.bin", tm.model.params, tm.model.cfg.digest(),
                    {{"stage", "pipeline"},
                     {"scheme", scheme},
                     {"seed", std::to_string(cfg.seed)}});
    return tm;
}

std::string scheme_label(const Stage2Flags& flags) {
    if (flags.skip_cappruner_pretrain && flags.skip_post_pretrain) return "no_stage2";
    if (flags.skip_cappruner_pretrain) return "no_cappruner_pretrain";
    if (flags.skip_post_pretrain) return "no_post_pretrain";
    return "full";
}

// ---------------------------------------------------------------------------

int cmd_gen_data(uint64_t seed, int num_clips, int rich_min, int rich_max, int grid,
                 const std::string& out) {
    GenSpec spec;
    spec.seed = seed;
    spec.num_clips = num_clips;
    spec.richness = {rich_min, rich_max};
    spec.grid = grid;
    Corpus corpus = generate_corpus(spec);
    ensure_dir(out);
    write_corpus(out, corpus);

    std::map<int, int> richness_hist;
    for (const auto& c : corpus.clips) ++richness_hist[c.richness];
    std::ostringstream md;
    md << "# Corpus\n\n- clips: " << corpus.clips.size()
       << "\n- captions: " << corpus.captions.size() << "\n- qa: " << corpus.qa.size()
       << "\n- grid: " << grid << "\n- seed: " << seed << "\n\n## Clip richness\n\n";
    md << "| richness | clips |\n|---|---|\n";
    for (const auto& [r, n] : richness_hist) md << "| " << r << " | " << n << " |\n";
    write_text(out + "/summary.md", md.str());
    write_run_json(out, json{{"command", "gen-data"},
                             {"seed", seed},
                             {"num_clips", num_clips},
                             {"richness_min", rich_min},
                             {"richness_max", rich_max},
                             {"grid", grid}});
    std::cout << "wrote " << corpus.clips.size() << " clips to " << out << "\n";
    return 0;
}

int cmd_train(int stage, const std::string& config_path, const std::string& data,
              const std::string& out, const std::string& init_path,
              const std::string& resume_path, long seed_override, const Stage2Flags& flags) {
    RunConfig cfg = load_config(config_path, seed_override);
    Corpus corpus = read_corpus(data);
    TrainContext ctx = TrainContext::build(corpus);
    ClipSplit split =
        split_clips(static_cast<int>(corpus.clips.size()), static_cast<int>(cfg.holdout_every));

    Model m = Model::init(cfg.model, static_cast<uint64_t>(cfg.seed));
    if (!init_path.empty()) load_checkpoint(init_path, m.params, m.cfg.digest());

    ensure_dir(out);
    cfg.write_snapshot(out + "/config.toml");
    const std::string scheme = scheme_label(flags);

    AdamW opt;
    int start_step = 0;
    if (!resume_path.empty()) {
        auto meta = load_checkpoint(resume_path, m.params, m.cfg.digest(), &opt);
        auto it = meta.find("next_step");
        if (it == meta.end())
            throw DataError("resume checkpoint lacks next_step metadata: " + resume_path);
        start_step = std::stoi(it->second);
    }

    StageIo io{out, static_cast<int>(cfg.checkpoint_every)};
    double final_loss = 0.0;
    if (stage == 1) {
        final_loss =
            run_stage1(m, ctx, split, cfg.stage_spec(Stage::CrossModalPretrain), io, start_step,
                       resume_path.empty() ? nullptr : &opt)
                .final_loss;
    } else if (stage == 2) {
        if (!resume_path.empty())
            throw ConfigError("--resume is only supported for single-phase stages (1 or 3)");
        StageSpec sa = cfg.stage_spec(Stage::CapPrunerPretrain);
        StageSpec sb = cfg.stage_spec(Stage::PostPretrain);
        sa.scheme = sb.scheme = scheme;
        StageIo io_a{out + "/phase_a", static_cast<int>(cfg.checkpoint_every)};
        StageIo io_b{out + "/phase_b", static_cast<int>(cfg.checkpoint_every)};
        if (!flags.skip_cappruner_pretrain) ensure_dir(io_a.dir);
        if (!flags.skip_post_pretrain) ensure_dir(io_b.dir);
        run_stage2(m, ctx, split, sa, sb, flags, io_a, io_b);
        save_checkpoint(out + "/checkpoint.bin", m.params, m.cfg.digest(),
                        {{"stage", "stage2"},
                         {"scheme", scheme},
                         {"seed", std::to_string(cfg.seed)}});
    } else if (stage == 3) {
        final_loss = run_stage3(m, ctx, split, cfg.stage_spec(Stage::Sft), io, start_step,
                                resume_path.empty() ? nullptr : &opt)
                         .final_loss;
    } else {
        throw ConfigError("--stage must be 1, 2 or 3");
    }

    write_run_json(out, json{{"command", "train"},
                             {"stage", stage},
                             {"scheme", scheme},
                             {"seed", cfg.seed},
                             {"config_digest", hex64(m.cfg.digest())},
                             {"data", data},
                             {"init", init_path},
                             {"train_clips", split.train.size()},
                             {"held_clips", split.held.size()}});
    std::ostringstream md;
    md << "# Training\n\n- stage: " << stage << "\n- scheme: " << scheme
       << "\n- seed: " << cfg.seed << "\n- final step loss: " << final_loss << "\n";
    write_text(out + "/summary.md", md.str());
    std::cout << "stage " << stage << " (" << scheme << ") done, checkpoint in " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& config_path, const std::string& data,
             const std::string& out, const std::string& split, long seed_override,
             EvalOptions opts) {
    check_split_name(split);  // fail on usage errors before touching data
    RunConfig cfg = load_config(config_path, seed_override);
    opts.max_answer_tokens = static_cast<int>(cfg.eval_max_answer_tokens);
    Corpus corpus = read_corpus(data);
    TrainContext ctx = TrainContext::build(corpus);
    Model m = Model::init(cfg.model, static_cast<uint64_t>(cfg.seed));
    load_checkpoint(ckpt, m.params, m.cfg.digest());
    const auto clips = clips_for_split(cfg, static_cast<int>(corpus.clips.size()), split);
    const auto records = run_eval(m, ctx, clips, opts, out);
    cfg.write_snapshot(out + "/config.toml");
    write_run_json(out, json{{"command", "eval"},
                             {"ckpt", ckpt},
                             {"data", data},
                             {"split", split},
                             {"seed", cfg.seed},
                             {"use_base", opts.use_base},
                             {"use_cap", opts.use_cap},
                             {"tap_override", opts.tap_override},
                             {"instances", records.size()},
                             {"accuracy", accuracy(records)}});
    std::cout << "accuracy " << accuracy(records) << " over " << records.size()
              << " instances, outputs in " << out << "\n";
    return 0;
}

int cmd_oracle(const std::vector<std::string>& runs, const std::string& out) {
    if (runs.size() < 2) throw ConfigError("oracle needs at least two --runs directories");
    std::vector<std::vector<EvalRecord>> per_run;
    std::vector<std::string> names;
    for (const auto& dir : runs) {
        per_run.push_back(read_eval_records(dir + "/records.jsonl"));
        std::string name = fs::path(dir).filename().string();
        if (name.empty()) name = fs::path(dir).parent_path().filename().string();
        names.push_back(name);
    }
    CorrectnessMatrix mx = build_matrix(per_run, names);
    OracleResult res = oracle_select(mx);

    ensure_dir(out);
    std::ofstream csv(out + "/oracle.csv");
    if (!csv) throw DataError("cannot write " + out + "/oracle.csv");
    csv << "configuration,accuracy,mean_tokens\n";
    char buf[160];
    std::ostringstream md;
    md << "# Per-instance best tradeoff\n\n| configuration | accuracy | mean tokens |\n|---|---|---|\n";
    for (size_t c = 0; c < names.size(); ++c) {
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.3f\n", names[c].c_str(),
                      accuracy(per_run[c]),
                      length_stats(per_run[c]).mean_visual);
        csv << buf;
        md << "| " << names[c] << " | " << accuracy(per_run[c]) << " | "
           << length_stats(per_run[c]).mean_visual << " |\n";
    }
    std::snprintf(buf, sizeof(buf), "oracle,%.6f,%.3f\n", res.oracle_accuracy, res.mean_tokens);
    csv << buf;
    md << "| oracle | " << res.oracle_accuracy << " | " << res.mean_tokens << " |\n";
    write_text(out + "/summary.md", md.str());
    write_run_json(out, json{{"command", "oracle"},
                             {"runs", runs},
                             {"oracle_accuracy", res.oracle_accuracy},
                             {"oracle_mean_tokens", res.mean_tokens}});
    std::cout << "oracle accuracy " << res.oracle_accuracy << ", mean tokens "
              << res.mean_tokens << "\n";
    return 0;
}

int cmd_flops(const std::string& arch_file, const std::string& plan_file,
              const std::string& out_csv) {
    PipelineProfiles profiles = load_profiles(arch_file);
    TokenPlan plan = load_plan(plan_file);
    FlopsReport rep = pipeline_flops(profiles, plan);
    if (const auto parent = fs::path(out_csv).parent_path(); !parent.empty())
        fs::create_directories(parent);
    write_report_csv(out_csv, rep);
    std::ostringstream md;
    md << "# Prefill cost (" << rep.formula_version << ")\n\n"
       << "- baseline total: " << rep.baseline.total << "\n"
       << "- compressed-pipeline total: " << rep.langdc.total << "\n"
       << "- ratio: " << rep.ratio << "\n";
    write_text(fs::path(out_csv).replace_extension(".md").string(), md.str());
    std::cout << "ratio " << rep.ratio << " written to " << out_csv << "\n";
    return 0;
}

int cmd_report(const std::string& grid, const std::string& out) {
    struct Row {
        std::string name;
        bool base = false, cap = false;
        double acc = 0.0, mean_tokens = 0.0;
        bool present = false;
    };
    auto read_row = [&](const std::string& dir, Row& row) {
        const std::string path = dir + "/records.jsonl";
        if (!fs::exists(path)) return;
        const auto recs = read_eval_records(path);
        row.acc = accuracy(recs);
        row.mean_tokens = length_stats(recs).mean_visual;
        row.present = true;
    };

    ensure_dir(out);
    std::ostringstream md;
    md << "# Ablation report\n";

    std::vector<Row> combo = {{"none", false, false, 0, 0, false},
                              {"base_only", true, false, 0, 0, false},
                              {"cap_only", false, true, 0, 0, false},
                              {"both", true, true, 0, 0, false}};
    for (auto& row : combo) read_row(grid + "/combination/" + row.name, row);
    if (std::any_of(combo.begin(), combo.end(), [](const Row& r) { return r.present; })) {
        std::ofstream csv(out + "/combinations.csv");
        csv << "name,base_pruner,cap_pruner,accuracy,mean_tokens\n";
        md << "\n## Pruner combinations\n\n| pooled stream | compressed stream | accuracy | "
              "mean tokens |\n|---|---|---|---|\n";
        char buf[160];
        for (const auto& row : combo) {
            if (!row.present) continue;
            std::snprintf(buf, sizeof(buf), "%s,%d,%d,%.6f,%.3f\n", row.name.c_str(),
                          row.base ? 1 : 0, row.cap ? 1 : 0, row.acc, row.mean_tokens);
            csv << buf;
            md << "| " << (row.base ? "on" : "off") << " | " << (row.cap ? "on" : "off")
               << " | " << row.acc << " | " << row.mean_tokens << " |\n";
        }
    }

    std::vector<Row> schemes = {{"full", true, true, 0, 0, false},
                                {"no_cappruner_pretrain", true, true, 0, 0, false},
                                {"no_post_pretrain", true, true, 0, 0, false}};
    for (auto& row : schemes) read_row(grid + "/schemes/" + row.name, row);
    if (std::any_of(schemes.begin(), schemes.end(), [](const Row& r) { return r.present; })) {
        std::ofstream csv(out + "/schemes.csv");
        csv << "scheme,accuracy,mean_tokens\n";
        md << "\n## Training schemes\n\n| scheme | accuracy | mean tokens |\n|---|---|---|\n";
        char buf[160];
        for (const auto& row : schemes) {
            if (!row.present) continue;
            std::snprintf(buf, sizeof(buf), "%s,%.6f,%.3f\n", row.name.c_str(), row.acc,
                          row.mean_tokens);
            csv << buf;
            md << "| " << row.name << " | " << row.acc << " | " << row.mean_tokens << " |\n";
        }
    }

    std::vector<Row> taps;
    for (int k = 0; fs::exists(grid + "/tap/tap_" + std::to_string(k)); ++k) {
        Row row{"tap_" + std::to_string(k), true, true, 0, 0, false};
        read_row(grid + "/tap/tap_" + std::to_string(k), row);
        taps.push_back(row);
    }
    if (!taps.empty()) {
        std::ofstream csv(out + "/tap.csv");
        csv << "tap_layer,accuracy,mean_tokens\n";
        md << "\n## Export layer sweep\n\n| layer | accuracy | mean tokens |\n|---|---|---|\n";
        char buf[160];
        for (size_t k = 0; k < taps.size(); ++k) {
            if (!taps[k].present) continue;
            std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.3f\n", k, taps[k].acc,
                          taps[k].mean_tokens);
            csv << buf;
            md << "| " << k << " | " << taps[k].acc << " | " << taps[k].mean_tokens << " |\n";
        }
    }

    write_text(out + "/report.md", md.str());
    write_run_json(out, json{{"command", "report"}, {"grid", grid}});
    std::cout << "report written to " << out << "\n";
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& data, const std::string& out,
               long seed_override, bool skip_schemes, bool skip_tap) {
    RunConfig cfg = load_config(config_path, seed_override);
    Corpus corpus = read_corpus(data);
    TrainContext ctx = TrainContext::build(corpus);
    ClipSplit split =
        split_clips(static_cast<int>(corpus.clips.size()), static_cast<int>(cfg.holdout_every));

    ensure_dir(out);
    cfg.write_snapshot(out + "/config.toml");

    // Full pipeline once; the pruner-combination grid and the export-layer
    // sweep reuse its weights with evaluation-time stream masking.
    TrainedModel full =
        train_pipeline(cfg, ctx, split, Stage2Flags{}, "full", out + "/train_full");

    struct Combo {
        const char* name;
        bool base, cap;
    };
    for (const Combo& c : {Combo{"both", true, true}, Combo{"base_only", true, false},
                           Combo{"cap_only", false, true}, Combo{"none", false, false}}) {
        EvalOptions opts;
        opts.max_answer_tokens = static_cast<int>(cfg.eval_max_answer_tokens);
        opts.use_base = c.base;
        opts.use_cap = c.cap;
        run_eval(full.model, ctx, split.held, opts, out + "/combination/" + c.name);
    }

    if (!skip_tap) {
        for (int k = 0; k <= cfg.model.cap.layers; ++k) {
            EvalOptions opts;
            opts.max_answer_tokens = static_cast<int>(cfg.eval_max_answer_tokens);
            opts.tap_override = k;
            run_eval(full.model, ctx, split.held, opts, out + "/tap/tap_" + std::to_string(k));
        }
    }

    EvalOptions plain;
    plain.max_answer_tokens = static_cast<int>(cfg.eval_max_answer_tokens);
    run_eval(full.model, ctx, split.held, plain, out + "/schemes/full");

    if (!skip_schemes) {
        for (const auto& [scheme, flags] :
             {std::pair<std::string, Stage2Flags>{"no_cappruner_pretrain", {true, false}},
              std::pair<std::string, Stage2Flags>{"no_post_pretrain", {false, true}}}) {
            TrainedModel knocked = train_pipeline(cfg, ctx, split, flags, scheme,
                                                  out + "/train_" + scheme);
            run_eval(knocked.model, ctx, split.held, plain, out + "/schemes/" + scheme);
        }
    }

    write_run_json(out, json{{"command", "ablate"},
                             {"data", data},
                             {"seed", cfg.seed},
                             {"schemes", !skip_schemes},
                             {"tap_sweep", !skip_tap}});
    write_text(out + "/summary.md",
               "# Ablation grids\n\nSub-runs: combination/ (stream masking), schemes/ "
               "(training knockouts), tap/ (export layer sweep).\nUse the report command to "
               "tabulate.\n");
    std::cout << "ablation grids written to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"language-aware dynamic visual token compression toolkit"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic clip corpus");
    uint64_t gen_seed = 1;
    int gen_clips = 200, gen_rmin = 1, gen_rmax = 24, gen_grid = 8;
    std::string gen_out;
    gen->add_option("--seed", gen_seed, "corpus seed");
    gen->add_option("--num-clips", gen_clips, "number of clips");
    gen->add_option("--richness-min", gen_rmin, "minimum clip richness");
    gen->add_option("--richness-max", gen_rmax, "maximum clip richness");
    gen->add_option("--grid", gen_grid, "scene grid side");
    gen->add_option("--out", gen_out, "output directory")->required();

    // train
    auto* train = app.add_subcommand("train", "run one training stage");
    int train_stage = 0;
    std::string train_config, train_data, train_out, train_init, train_resume;
    long train_seed = -1;
    Stage2Flags train_flags;
    train->add_option("--stage", train_stage, "training stage (1, 2 or 3)")->required();
    train->add_option("--config", train_config, "run config file");
    train->add_option("--data", train_data, "corpus directory")->required();
    train->add_option("--out", train_out, "run directory")->required();
    train->add_option("--init", train_init, "checkpoint to initialize weights from");
    train->add_option("--resume", train_resume, "checkpoint to resume this stage from");
    train->add_option("--seed", train_seed, "seed override");
    train->add_flag("--skip-cappruner-pretrain", train_flags.skip_cappruner_pretrain,
                    "stage 2: skip the caption supervision phase");
    train->add_flag("--skip-post-pretrain", train_flags.skip_post_pretrain,
                    "stage 2: skip the post-projector phase");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on corpus QA");
    std::string ev_ckpt, ev_config, ev_data, ev_out, ev_split = "held";
    long ev_seed = -1;
    bool ev_no_base = false, ev_no_cap = false;
    int ev_tap = -1;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--config", ev_config, "run config file");
    ev->add_option("--data", ev_data, "corpus directory")->required();
    ev->add_option("--out", ev_out, "output directory")->required();
    ev->add_option("--split", ev_split, "held|train|all");
    ev->add_option("--seed", ev_seed, "seed override");
    ev->add_flag("--no-base", ev_no_base, "mask the pooled stream");
    ev->add_flag("--no-cap", ev_no_cap, "mask the compressed stream");
    ev->add_option("--tap", ev_tap, "export layer override");

    // oracle
    auto* orc = app.add_subcommand("oracle", "per-instance best tradeoff across runs");
    std::vector<std::string> orc_runs;
    std::string orc_out;
    orc->add_option("--runs", orc_runs, "evaluation run directories")->required()->expected(-1);
    orc->add_option("--out", orc_out, "output directory")->required();

    // flops
    auto* fl = app.add_subcommand("flops", "analytic prefill cost comparison");
    std::string fl_arch, fl_plan, fl_out;
    fl->add_option("--arch-file", fl_arch, "architecture profiles file")->required();
    fl->add_option("--plan", fl_plan, "token plan file")->required();
    fl->add_option("--out", fl_out, "output csv path")->required();

    // report
    auto* rep = app.add_subcommand("report", "tabulate an ablation grid");
    std::string rep_grid, rep_out;
    rep->add_option("--grid", rep_grid, "ablation grid directory")->required();
    rep->add_option("--out", rep_out, "output directory")->required();

    // ablate
    auto* ab = app.add_subcommand("ablate", "train and evaluate the ablation grids");
    std::string ab_config, ab_data, ab_out;
    long ab_seed = -1;
    bool ab_skip_schemes = false, ab_skip_tap = false;
    ab->add_option("--config", ab_config, "run config file");
    ab->add_option("--data", ab_data, "corpus directory")->required();
    ab->add_option("--out", ab_out, "output directory")->required();
    ab->add_option("--seed", ab_seed, "seed override");
    ab->add_flag("--skip-schemes", ab_skip_schemes, "skip the training-scheme knockouts");
    ab->add_flag("--skip-tap", ab_skip_tap, "skip the export layer sweep");

    try {
        app.parse(argc, argv);
        if (gen->parsed())
            return cmd_gen_data(gen_seed, gen_clips, gen_rmin, gen_rmax, gen_grid, gen_out);
        if (train->parsed())
            return cmd_train(train_stage, train_config, train_data, train_out, train_init,
                             train_resume, train_seed, train_flags);
        if (ev->parsed()) {
            EvalOptions opts;
            opts.use_base = !ev_no_base;
            opts.use_cap = !ev_no_cap;
            opts.tap_override = ev_tap;
            return cmd_eval(ev_ckpt, ev_config, ev_data, ev_out, ev_split, ev_seed, opts);
        }
        if (orc->parsed()) return cmd_oracle(orc_runs, orc_out);
        if (fl->parsed()) return cmd_flops(fl_arch, fl_plan, fl_out);
        if (rep->parsed()) return cmd_report(rep_grid, rep_out);
        if (ab->parsed())
            return cmd_ablate(ab_config, ab_data, ab_out, ab_seed, ab_skip_schemes, ab_skip_tap);
        return 1;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const ContractError& e) {
        std::cerr << "contract violation: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
