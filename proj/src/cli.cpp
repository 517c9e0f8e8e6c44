#include "unifuse/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "unifuse/binio.hpp"
#include "unifuse/digest.hpp"
#include "unifuse/error.hpp"
#include "unifuse/metrics.hpp"
#include "unifuse/parallel.hpp"
#include "unifuse/trainer.hpp"

namespace unifuse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
    std::string config_path;
    std::uint64_t seed = 1;
    std::string out_dir;
    std::string corpus_dir;
    std::string stage;
    std::string base_path;
    std::string init_path;
    bool from_scratch = false;
    std::string dropout;
    std::string checkpoint;
    std::string task = "all";
    std::string split = "test";
    std::string input_id;
    std::string snr_list;
    bool quiet = false;
};

struct Context {
    train::TrainConfig config;
    std::string config_digest;
    std::ostream& out;
    std::ostream& err;
    std::ostream* log;
};

std::vector<double> parse_number_list(const std::string& text, const std::string& field) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError(field + ": \"" + item + "\" is not a number");
        }
    }
    if (out.empty()) throw ConfigError(field + ": empty list");
    return out;
}

void require(const std::string& value, const std::string& flag, const std::string& command) {
    if (value.empty()) throw ConfigError(command + ": " + flag + " is required");
}

std::string corpus_digest(const std::string& dir) { return sha256_file(fs::path(dir) / "manifest.json"); }

json provenance(const Context& ctx, const Options& o, const std::string& command) {
    json p = {{"command", command}, {"config_sha256", ctx.config_digest}, {"seed", o.seed}};
    if (!o.corpus_dir.empty()) p["corpus_sha256"] = corpus_digest(o.corpus_dir);
    if (!o.checkpoint.empty()) p["checkpoint_sha256"] = sha256_file(o.checkpoint);
    if (!o.base_path.empty()) p["base_sha256"] = sha256_file(o.base_path);
    if (!o.init_path.empty()) p["init_sha256"] = sha256_file(o.init_path);
    return p;
}

void write_json(const fs::path& path, const json& j) { binio::write_file(path.string(), j.dump(2) + "\n"); }

// The model described by a checkpoint's embedded config, with its parameters.
struct LoadedModel {
    train::TrainConfig config;
    std::unique_ptr<Model> model;
    json meta;
};

LoadedModel load_model(const std::string& path) {
    ParameterSet probe;
    const std::string bytes = binio::read_file(path);
    // Read the metadata first so the model can be built with the right shape.
    json meta = decode_checkpoint(bytes, path, probe, [](std::string_view) { return false; });
    if (!meta.contains("config")) throw IoError(path + ": checkpoint metadata lacks the model config");
    LoadedModel lm;
    lm.config = train::config_from_json(meta["config"]);
    lm.model = std::make_unique<Model>(lm.config.model, 0);
    decode_checkpoint(bytes, path, lm.model->params());
    lm.meta = std::move(meta);
    if (lm.meta.value("kind", "") == "pretrain") lm.model->configure_pretraining();
    return lm;
}

ModalityMask slt_mask_of(const LoadedModel& lm) {
    const std::string stage = lm.meta.value("stage", "");
    if (stage.empty() || stage == "pretrain") return task_mask(TaskKind::slt);
    return train::resolve_stage(lm.config, stage).slt_mask;
}

std::vector<TaskKind> parse_tasks(const std::string& text) {
    if (text == "all") return {kAllTasks.begin(), kAllTasks.end()};
    return {parse_task(text)};
}

// ----------------------------------------------------------------- commands

int cmd_gen_corpus(const Context& ctx, const Options& o) {
    require(o.out_dir, "--out", "gen-corpus");
    const corpus::Corpus c = corpus::generate_corpus(o.seed, ctx.config.corpus);
    corpus::write_corpus(c, o.out_dir);
    if (ctx.log) *ctx.log << "wrote corpus to " << o.out_dir << '\n';
    return kExitOk;
}

int cmd_pretrain(const Context& ctx, const Options& o) {
    require(o.corpus_dir, "--corpus", "pretrain-decoder");
    require(o.out_dir, "--out", "pretrain-decoder");
    const corpus::Corpus data = corpus::load_corpus(o.corpus_dir);
    Model model(ctx.config.model, o.seed);
    const train::PretrainResult r = train::pretrain_lm(model, data, ctx.config, o.seed, ctx.log);
    const json meta = {{"kind", "pretrain"}, {"stage", "pretrain"}, {"seed", o.seed}, {"config", train::to_json(ctx.config)}};
    const std::string blob = encode_checkpoint(model.params(), meta);
    fs::create_directories(o.out_dir);
    binio::write_file((fs::path(o.out_dir) / "base.umck").string(), blob);
    const json report = {{"command", "pretrain-decoder"},
                         {"final_train_loss", r.final_loss},
                         {"val_loss", r.val_loss},
                         {"val_perplexity", r.val_perplexity},
                         {"val_next_token_accuracy", r.val_accuracy},
                         {"checkpoints", {{"base", sha256_hex(blob)}}},
                         {"provenance", provenance(ctx, o, "pretrain-decoder")}};
    write_json(fs::path(o.out_dir) / "report.json", report);
    if (ctx.log) *ctx.log << "val perplexity " << r.val_perplexity << '\n';
    return kExitOk;
}

int cmd_train(const Context& ctx, const Options& o) {
    require(o.stage, "--stage", "train");
    require(o.corpus_dir, "--corpus", "train");
    require(o.out_dir, "--out", "train");
    const train::StageConfig stage = train::resolve_stage(ctx.config, o.stage);
    const bool stage2 = o.stage == "2";
    if (stage2 && o.init_path.empty() && !o.from_scratch) {
        throw ConfigError("train --stage 2: needs a stage-1 checkpoint via --init, or --from-scratch to start from the "
                          "pretrained decoder");
    }
    if (!stage2 && !o.init_path.empty()) throw ConfigError("train: --init applies to --stage 2 only");
    if (o.from_scratch && !o.init_path.empty()) throw ConfigError("train: --from-scratch and --init are exclusive");
    const bool needs_base = !stage2 || o.from_scratch;
    if (needs_base && o.base_path.empty()) {
        throw ConfigError("train --stage " + o.stage + ": --base <pretrained decoder checkpoint> is required");
    }

    const corpus::Corpus data = corpus::load_corpus(o.corpus_dir);
    Model model(ctx.config.model, o.seed);
    if (needs_base) {
        const json meta = load_checkpoint(o.base_path, model.params(), Model::is_decoder_base);
        if (meta.value("kind", "") != "pretrain") throw ConfigError("--base: " + o.base_path + " is not a pretrained decoder");
    } else {
        const json meta = load_checkpoint(o.init_path, model.params());
        const std::string from = meta.value("stage", "");
        if (from != "1" && from != "slt-sign-lip-vsr") {
            throw ConfigError("--init: " + o.init_path + " comes from stage \"" + from + "\", expected a stage-1 checkpoint");
        }
    }
    model.configure_finetuning();
    const train::StageResult r = train::run_stage(model, data, stage, ctx.config, o.seed, o.out_dir, ctx.log);
    json report = {{"command", "train"},
                   {"stage", stage.id},
                   {"steps", stage.schedule.steps()},
                   {"best_step", r.best_step},
                   {"best_val_accuracy", r.best_accuracy},
                   {"last_val_accuracy", r.last_accuracy},
                   {"selected", train::to_string(r.selected)},
                   {"val_metrics", {{"best", r.best_metrics}, {"last", r.last_metrics}}},
                   {"checkpoints", {{"best", r.best_digest}, {"last", r.last_digest}, {"final", r.final_digest}}},
                   {"provenance", provenance(ctx, o, "train")}};
    write_json(fs::path(o.out_dir) / "report.json", report);
    return kExitOk;
}

int cmd_eval(const Context& ctx, const Options& o) {
    require(o.corpus_dir, "--corpus", "eval");
    require(o.checkpoint, "--checkpoint", "eval");
    require(o.out_dir, "--out", "eval");
    const std::vector<TaskKind> tasks = parse_tasks(o.task);
    if (o.split != "test" && o.split != "val") throw ConfigError("--split: expected test or val");
    const corpus::Corpus data = corpus::load_corpus(o.corpus_dir);
    const LoadedModel lm = load_model(o.checkpoint);
    json entries = json::array();
    for (TaskKind t : tasks) {
        const auto& split = data.split(o.split == "test" ? train::test_split(t) : train::val_split(t));
        const std::optional<ModalityMask> mask =
            t == TaskKind::slt ? std::optional<ModalityMask>(slt_mask_of(lm)) : std::nullopt;
        const auto hyps = train::decode_samples(*lm.model, split, t, ctx.config.eval, mask);
        json e = train::to_json(train::score(t, split, hyps));
        e["next_token_accuracy"] = train::next_token_accuracy(*lm.model, split, t, mask, ctx.config.eval.batch).accuracy;
        if (t == TaskKind::slt) {
            std::vector<metrics::Sentence> refs;
            for (const auto& s : split) refs.push_back(s.text);
            e["merged_pair_confusion"] = metrics::pair_confusion_rate(refs, hyps, data.lexicon.merged_pairs);
        }
        entries.push_back(e);
        if (ctx.log) *ctx.log << to_string(t) << ": " << e.dump() << '\n';
    }
    const json report = {{"command", "eval"},
                         {"split", o.split},
                         {"tasks", entries},
                         {"provenance", provenance(ctx, o, "eval")}};
    fs::create_directories(o.out_dir);
    write_json(fs::path(o.out_dir) / "report.json", report);
    return kExitOk;
}

int cmd_decode(const Context& ctx, const Options& o) {
    require(o.corpus_dir, "--corpus", "decode");
    require(o.checkpoint, "--checkpoint", "decode");
    require(o.input_id, "--input", "decode");
    std::uint32_t id = 0;
    try {
        std::size_t used = 0;
        const unsigned long v = std::stoul(o.input_id, &used);
        if (used != o.input_id.size() || v > 0xffffffffUL) throw std::out_of_range(o.input_id);
        id = static_cast<std::uint32_t>(v);
    } catch (const std::exception&) {
        throw ConfigError("--input: expected a numeric sample id, got \"" + o.input_id + "\"");
    }
    const corpus::Corpus data = corpus::load_corpus(o.corpus_dir);
    const corpus::Sample* sample = nullptr;
    std::string split_name;
    for (const auto& [name, samples] : data.splits) {
        for (const auto& s : samples) {
            if (s.id == id) {
                sample = &s;
                split_name = name;
            }
        }
    }
    if (sample == nullptr) throw ConfigError("--input: no sample with id " + o.input_id);
    if (sample->tag == corpus::CorpusTag::text) throw ConfigError("--input: sample " + o.input_id + " is text-only");
    std::vector<TaskKind> tasks;
    if (o.task == "all") {
        if (sample->tag == corpus::CorpusTag::signing) tasks = {TaskKind::slt};
        else tasks = {TaskKind::vsr, TaskKind::asr, TaskKind::avsr};
    } else {
        tasks = parse_tasks(o.task);
    }
    const LoadedModel lm = load_model(o.checkpoint);
    json results = json::array();
    for (TaskKind t : tasks) {
        if ((t == TaskKind::slt) != (sample->tag == corpus::CorpusTag::signing)) {
            throw ConfigError("--task: " + std::string(to_string(t)) + " does not match sample " + o.input_id + " (" +
                              std::string(to_string(sample->tag)) + ")");
        }
        const std::optional<ModalityMask> mask =
            t == TaskKind::slt ? std::optional<ModalityMask>(slt_mask_of(lm)) : std::nullopt;
        const auto hyps = train::decode_samples(*lm.model, std::span(sample, 1), t, ctx.config.eval, mask);
        std::vector<std::string> words;
        for (auto w : hyps[0]) words.push_back(vocab::token_name(w));
        results.push_back({{"task", to_string(t)},
                           {"tokens", hyps[0]},
                           {"words", words},
                           {"wer", metrics::wer(std::vector<metrics::Sentence>{sample->text},
                                                std::vector<metrics::Sentence>{hyps[0]})}});
    }
    std::vector<std::string> ref_words;
    for (auto w : sample->text) ref_words.push_back(vocab::token_name(w));
    const json doc = {{"command", "decode"},
                      {"sample", id},
                      {"split", split_name},
                      {"reference", {{"tokens", sample->text}, {"words", ref_words}}},
                      {"results", results},
                      {"provenance", provenance(ctx, o, "decode")}};
    ctx.out << doc.dump(2) << '\n';
    if (!o.out_dir.empty()) {
        fs::create_directories(o.out_dir);
        write_json(fs::path(o.out_dir) / "decode.json", doc);
    }
    return kExitOk;
}

int cmd_sweep(const Context& ctx, const Options& o) {
    require(o.corpus_dir, "--corpus", "sweep-noise");
    require(o.checkpoint, "--checkpoint", "sweep-noise");
    require(o.out_dir, "--out", "sweep-noise");
    const std::vector<double> snrs =
        o.snr_list.empty() ? ctx.config.eval.sweep_snr_db : parse_number_list(o.snr_list, "--snr-list");
    const corpus::Corpus data = corpus::load_corpus(o.corpus_dir);
    const LoadedModel lm = load_model(o.checkpoint);
    const auto& split = data.split("spoken_test");
    // VSR never sees audio, so one clean pass stands for every SNR.
    const double vsr = train::score(TaskKind::vsr, split, train::decode_samples(*lm.model, split, TaskKind::vsr, ctx.config.eval)).wer;
    std::string csv = "task,snr_db,wer\n";
    json rows = json::array();
    char buf[128];
    for (double snr : snrs) {
        const train::EvalNoise noise{snr, o.seed, ctx.config.eval.noise_distractors};
        for (TaskKind t : {TaskKind::asr, TaskKind::avsr, TaskKind::vsr}) {
            double w = vsr;
            if (t != TaskKind::vsr) {
                w = train::score(t, split, train::decode_samples(*lm.model, split, t, ctx.config.eval, std::nullopt, noise)).wer;
            }
            std::snprintf(buf, sizeof buf, "%s,%g,%.6f\n", std::string(to_string(t)).c_str(), snr, w);
            csv += buf;
            rows.push_back({{"task", to_string(t)}, {"snr_db", snr}, {"wer", w}});
            if (ctx.log) *ctx.log << buf;
        }
    }
    fs::create_directories(o.out_dir);
    binio::write_file((fs::path(o.out_dir) / "snr_sweep.csv").string(), csv);
    const json report = {{"command", "sweep-noise"}, {"sweep", rows}, {"provenance", provenance(ctx, o, "sweep-noise")}};
    write_json(fs::path(o.out_dir) / "report.json", report);
    return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    retain_heap_memory();
    CLI::App app{"Multimodal sign and speech recognition on a synthetic corpus"};
    app.require_subcommand(1);
    Options o;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config_path, "JSON config (defaults when omitted)");
        sub->add_option("--seed", o.seed, "Random seed");
        sub->add_option("--out", o.out_dir, "Output directory");
        sub->add_flag("--quiet", o.quiet, "Suppress progress output");
    };
    auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic corpus");
    common(gen);
    auto* pre = app.add_subcommand("pretrain-decoder", "Pretrain the decoder as a language model");
    common(pre);
    pre->add_option("--corpus", o.corpus_dir, "Corpus directory");
    auto* trn = app.add_subcommand("train", "Run one training stage");
    common(trn);
    trn->add_option("--corpus", o.corpus_dir, "Corpus directory");
    trn->add_option("--stage", o.stage, "1, 2, joint, single:TASK, slt-sign-only, slt-sign-lip, slt-sign-lip-vsr");
    trn->add_option("--base", o.base_path, "Pretrained decoder checkpoint");
    trn->add_option("--init", o.init_path, "Stage-1 checkpoint (stage 2)");
    trn->add_flag("--from-scratch", o.from_scratch, "Stage 2 without a stage-1 checkpoint");
    trn->add_option("--dropout", o.dropout, "Spoken task probabilities VSR,ASR,AVSR");
    auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint");
    common(evl);
    evl->add_option("--corpus", o.corpus_dir, "Corpus directory");
    evl->add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate");
    evl->add_option("--task", o.task, "slt, vsr, asr, avsr or all");
    evl->add_option("--split", o.split, "test or val");
    auto* dec = app.add_subcommand("decode", "Decode one sample");
    common(dec);
    dec->add_option("--corpus", o.corpus_dir, "Corpus directory");
    dec->add_option("--checkpoint", o.checkpoint, "Checkpoint");
    dec->add_option("--input", o.input_id, "Sample id");
    dec->add_option("--task", o.task, "slt, vsr, asr, avsr or all");
    auto* swp = app.add_subcommand("sweep-noise", "WER under babble noise across SNRs");
    common(swp);
    swp->add_option("--corpus", o.corpus_dir, "Corpus directory");
    swp->add_option("--checkpoint", o.checkpoint, "Checkpoint");
    swp->add_option("--snr-list", o.snr_list, "Comma-separated SNRs in dB");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        json doc = json::object();
        if (!o.config_path.empty()) {
            try {
                doc = json::parse(binio::read_file(o.config_path));
            } catch (const json::parse_error& e) {
                throw ConfigError("--config: " + o.config_path + " is not valid JSON: " + e.what());
            }
        }
        train::TrainConfig config = train::config_from_json(doc);
        if (!o.dropout.empty()) {
            const auto p = parse_number_list(o.dropout, "--dropout");
            if (p.size() != 3) throw ConfigError("--dropout: expected three probabilities VSR,ASR,AVSR");
            config.dropout = {p[0], p[1], p[2]};
            config.dropout.validate();
        }
        Context ctx{config, sha256_hex(train::to_json(config).dump()), out, err, o.quiet ? nullptr : &err};
        if (command == "gen-corpus") return cmd_gen_corpus(ctx, o);
        if (command == "pretrain-decoder") return cmd_pretrain(ctx, o);
        if (command == "train") return cmd_train(ctx, o);
        if (command == "eval") return cmd_eval(ctx, o);
        if (command == "decode") return cmd_decode(ctx, o);
        return cmd_sweep(ctx, o);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const InputError& e) {
        err << "input error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const IoError& e) {
        err << "i/o error: " << e.what() << '\n';
        return kExitIo;
    } catch (const fs::filesystem_error& e) {
        err << "i/o error: " << e.what() << '\n';
        return kExitIo;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitConfig;
    }
}

}  // namespace unifuse
