#include "unifuse/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "unifuse/binio.hpp"
#include "unifuse/digest.hpp"
#include "unifuse/error.hpp"
#include "unifuse/jsonutil.hpp"
#include "unifuse/metrics.hpp"
#include "unifuse/parallel.hpp"
#include "unifuse/random.hpp"

namespace unifuse::train {

namespace {

// Draws are built from raw engine output so they do not depend on the
// standard library's distribution algorithms.
double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
    return std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
}

std::uint64_t key_of(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
    return h;
}

bool is_speech(TaskKind t) { return t != TaskKind::slt; }

std::size_t argmax(std::span<const double> row) {
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

// ----------------------------------------------------------------- schedule

double lr_at(std::size_t step, const Schedule& s) {
    if (step >= s.steps()) {
        throw ConfigError("lr_at: step " + std::to_string(step) + " outside schedule of " + std::to_string(s.steps()) +
                          " steps");
    }
    if (step < s.warmup) return s.peak * static_cast<double>(step + 1) / static_cast<double>(s.warmup);
    if (step < s.warmup + s.hold) return s.peak;
    const double k = static_cast<double>(step - s.warmup - s.hold + 1);
    const double floor = s.floor_ratio * s.peak;
    return s.peak + (floor - s.peak) * k / static_cast<double>(s.decay);
}

void DropoutSchedule::validate() const {
    if (vsr < 0 || asr < 0 || avsr < 0) throw ConfigError("dropout: probabilities must be non-negative");
    if (std::abs(vsr + asr + avsr - 1.0) > 1e-9) throw ConfigError("dropout: probabilities must sum to 1");
}

std::vector<TaskKind> StageConfig::tasks() const {
    switch (sampling) {
        case Sampling::visual: return {TaskKind::slt, TaskKind::vsr};
        case Sampling::joint: return {TaskKind::slt, TaskKind::vsr, TaskKind::asr, TaskKind::avsr};
        case Sampling::single: return {task};
    }
    return {};
}

void StageConfig::validate() const {
    const std::string s = "stages[" + id + "]";
    if (schedule.steps() == 0) throw ConfigError(s + ".schedule: needs at least one step");
    if (schedule.warmup == 0) throw ConfigError(s + ".schedule.warmup: must be positive");
    if (schedule.decay == 0) throw ConfigError(s + ".schedule.decay: must be positive");
    if (!(schedule.peak >= 0.0) || !std::isfinite(schedule.peak)) throw ConfigError(s + ".schedule.peak: invalid");
    if (schedule.floor_ratio < 0.0 || schedule.floor_ratio > 1.0) {
        throw ConfigError(s + ".schedule.floor_ratio: must be in [0, 1]");
    }
    if (batch == 0) throw ConfigError(s + ".batch: must be positive");
    if (slt_fraction < 0.0 || slt_fraction > 1.0) throw ConfigError(s + ".slt_fraction: must be in [0, 1]");
    if (eval_every == 0) throw ConfigError(s + ".eval_every: must be positive");
    if (word_drop_max < 0.0 || word_drop_max >= 1.0) throw ConfigError(s + ".word_drop_max: must be in [0, 1)");
    if (noise.probability < 0.0 || noise.probability > 1.0) throw ConfigError(s + ".noise.probability: must be in [0, 1]");
    if (noise.enabled && noise.snr_db.empty()) throw ConfigError(s + ".noise.snr_db: empty");
    if (noise.enabled && noise.distractors == 0) throw ConfigError(s + ".noise.distractors: must be positive");
    if (!slt_mask.sign && !slt_mask.lip && !slt_mask.audio) throw ConfigError(s + ".slt_mask: selects no stream");
}

TaskKind sample_task(std::mt19937_64& rng, const StageConfig& stage, const DropoutSchedule& dropout) {
    switch (stage.sampling) {
        case Sampling::single: return stage.task;
        case Sampling::visual: return uniform01(rng) < stage.slt_fraction ? TaskKind::slt : TaskKind::vsr;
        case Sampling::joint: {
            if (uniform01(rng) < stage.slt_fraction) return TaskKind::slt;
            const double r = uniform01(rng);
            if (r < dropout.vsr) return TaskKind::vsr;
            if (r < dropout.vsr + dropout.asr) return TaskKind::asr;
            return TaskKind::avsr;
        }
    }
    return stage.task;
}

// ---------------------------------------------------------------- optimizer

AdamW::AdamW(const ParameterSet& params, const OptimizerConfig& config) : config_(config) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_.emplace_back(params[i].value.rows(), params[i].value.cols());
        v_.emplace_back(params[i].value.rows(), params[i].value.cols());
    }
    updates_.assign(params.size(), 0);
}

double AdamW::step(ParameterSet& params, Gradients& grads, double lr) {
    const double norm = grads.global_norm();
    if (!std::isfinite(norm)) throw NumericError("optimizer: non-finite gradient norm");
    if (config_.clip_norm > 0.0 && norm > config_.clip_norm) grads.scale(config_.clip_norm / (norm + 1e-6));
    ++t_;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params[i];
        if (!p.trainable || !grads.touched(i)) continue;
        const std::size_t t = ++updates_[i];
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t));
        const double decay = p.name == "dec.task_embed" ? 0.0 : config_.weight_decay;
        auto w = p.value.flat();
        auto g = grads[i].flat();
        auto m = m_[i].flat();
        auto v = v_[i].flat();
        for (std::size_t j = 0; j < w.size(); ++j) {
            w[j] *= 1.0 - lr * decay;
            m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
            v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
            w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.eps);
        }
    }
    return norm;
}

// ------------------------------------------------------------------- config

namespace {

StageConfig make_stage(std::string id, Sampling sampling, Schedule schedule) {
    StageConfig s;
    s.id = std::move(id);
    s.sampling = sampling;
    s.schedule = schedule;
    return s;
}

std::string_view sampling_name(Sampling s) {
    switch (s) {
        case Sampling::visual: return "visual";
        case Sampling::joint: return "joint";
        case Sampling::single: return "single";
    }
    return "?";
}

nlohmann::json stage_json(const StageConfig& s) {
    return {{"id", s.id},
            {"sampling", sampling_name(s.sampling)},
            {"task", to_string(s.task)},
            {"slt_fraction", s.slt_fraction},
            {"slt_mask", {{"sign", s.slt_mask.sign}, {"lip", s.slt_mask.lip}, {"audio", s.slt_mask.audio}}},
            {"schedule",
             {{"warmup", s.schedule.warmup},
              {"hold", s.schedule.hold},
              {"decay", s.schedule.decay},
              {"peak", s.schedule.peak},
              {"floor_ratio", s.schedule.floor_ratio}}},
            {"batch", s.batch},
            {"noise",
             {{"enabled", s.noise.enabled},
              {"probability", s.noise.probability},
              {"snr_db", s.noise.snr_db},
              {"distractors", s.noise.distractors}}},
            {"word_drop", s.word_drop},
            {"word_drop_max", s.word_drop_max},
            {"eval_every", s.eval_every}};
}

void read_schedule(const nlohmann::json& j, const std::string& section, Schedule& s) {
    jsonutil::check_object(j, section, {"warmup", "hold", "decay", "peak", "floor_ratio"});
    jsonutil::read(j, section, "warmup", s.warmup);
    jsonutil::read(j, section, "hold", s.hold);
    jsonutil::read(j, section, "decay", s.decay);
    jsonutil::read(j, section, "peak", s.peak);
    jsonutil::read(j, section, "floor_ratio", s.floor_ratio);
}

void stage_from_json(const nlohmann::json& j, StageConfig& s) {
    const std::string sec = "stages[" + s.id + "]";
    jsonutil::check_object(j, sec,
                           {"id", "sampling", "task", "slt_fraction", "slt_mask", "schedule", "batch", "noise",
                            "word_drop", "word_drop_max", "eval_every"});
    if (j.contains("sampling")) {
        std::string v;
        jsonutil::read(j, sec, "sampling", v);
        if (v == "visual") s.sampling = Sampling::visual;
        else if (v == "joint") s.sampling = Sampling::joint;
        else if (v == "single") s.sampling = Sampling::single;
        else throw ConfigError(sec + ".sampling: expected visual, joint or single");
    }
    if (j.contains("task")) {
        std::string v;
        jsonutil::read(j, sec, "task", v);
        s.task = parse_task(v);
    }
    jsonutil::read(j, sec, "slt_fraction", s.slt_fraction);
    if (j.contains("slt_mask")) {
        const auto& m = j["slt_mask"];
        jsonutil::check_object(m, sec + ".slt_mask", {"sign", "lip", "audio"});
        jsonutil::read(m, sec + ".slt_mask", "sign", s.slt_mask.sign);
        jsonutil::read(m, sec + ".slt_mask", "lip", s.slt_mask.lip);
        jsonutil::read(m, sec + ".slt_mask", "audio", s.slt_mask.audio);
    }
    if (j.contains("schedule")) read_schedule(j["schedule"], sec + ".schedule", s.schedule);
    jsonutil::read(j, sec, "batch", s.batch);
    if (j.contains("noise")) {
        const auto& n = j["noise"];
        const std::string ns = sec + ".noise";
        jsonutil::check_object(n, ns, {"enabled", "probability", "snr_db", "distractors"});
        jsonutil::read(n, ns, "enabled", s.noise.enabled);
        jsonutil::read(n, ns, "probability", s.noise.probability);
        if (n.contains("snr_db")) {
            if (!n["snr_db"].is_array()) throw ConfigError(ns + ".snr_db: expected an array of numbers");
            s.noise.snr_db.clear();
            for (const auto& v : n["snr_db"]) {
                if (!v.is_number()) throw ConfigError(ns + ".snr_db: expected an array of numbers");
                s.noise.snr_db.push_back(v.get<double>());
            }
        }
        jsonutil::read(n, ns, "distractors", s.noise.distractors);
    }
    jsonutil::read(j, sec, "word_drop", s.word_drop);
    jsonutil::read(j, sec, "word_drop_max", s.word_drop_max);
    jsonutil::read(j, sec, "eval_every", s.eval_every);
}

}  // namespace

TrainConfig default_config() {
    TrainConfig c;
    c.stages.push_back(make_stage("1", Sampling::visual, {300, 300, 1800, 3e-3, 0.01}));
    c.stages.push_back(make_stage("2", Sampling::joint, {50, 0, 1950, 3e-3, 0.01}));
    c.stages.push_back(make_stage("joint", Sampling::joint, {300, 300, 3800, 3e-3, 0.01}));
    c.stages.push_back(make_stage("single", Sampling::single, {300, 300, 1400, 3e-3, 0.01}));
    return c;
}

nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json j;
    to_json(j, c.model);
    j["corpus"] = c.corpus;
    j["stages"] = nlohmann::json::array();
    for (const auto& s : c.stages) j["stages"].push_back(stage_json(s));
    j["dropout"] = {{"vsr", c.dropout.vsr}, {"asr", c.dropout.asr}, {"avsr", c.dropout.avsr}};
    j["optimizer"] = {{"beta1", c.optimizer.beta1},
                      {"beta2", c.optimizer.beta2},
                      {"eps", c.optimizer.eps},
                      {"weight_decay", c.optimizer.weight_decay},
                      {"clip_norm", c.optimizer.clip_norm}};
    const Schedule& ps = c.pretrain.schedule;
    j["pretrain"] = {{"schedule",
                      {{"warmup", ps.warmup},
                       {"hold", ps.hold},
                       {"decay", ps.decay},
                       {"peak", ps.peak},
                       {"floor_ratio", ps.floor_ratio}}},
                     {"batch", c.pretrain.batch}};
    j["eval"] = {{"beam_width", c.eval.beam_width},
                 {"temperature", c.eval.temperature},
                 {"max_len", c.eval.max_len},
                 {"slt_greedy", c.eval.slt_greedy},
                 {"batch", c.eval.batch},
                 {"noise_distractors", c.eval.noise_distractors},
                 {"sweep_snr_db", c.eval.sweep_snr_db}};
    return j;
}

TrainConfig config_from_json(const nlohmann::json& doc) {
    TrainConfig c = default_config();
    jsonutil::check_object(doc, "config",
                           {"corpus", "encoders", "fusion", "decoder", "stages", "dropout", "optimizer", "pretrain",
                            "eval"});
    if (doc.contains("corpus")) from_json(doc["corpus"], c.corpus);
    model_config_from_json(doc, c.model);
    if (doc.contains("stages")) {
        if (!doc["stages"].is_array()) throw ConfigError("stages: expected an array");
        for (const auto& entry : doc["stages"]) {
            if (!entry.is_object() || !entry.contains("id") || !entry["id"].is_string()) {
                throw ConfigError("stages: every entry needs a string \"id\"");
            }
            const std::string id = entry["id"].get<std::string>();
            auto it = std::find_if(c.stages.begin(), c.stages.end(), [&](const StageConfig& s) { return s.id == id; });
            if (it == c.stages.end()) {
                c.stages.push_back(make_stage(id, Sampling::single, {300, 300, 1400, 3e-3, 0.01}));
                it = c.stages.end() - 1;
            }
            stage_from_json(entry, *it);
        }
    }
    if (doc.contains("dropout")) {
        const auto& d = doc["dropout"];
        jsonutil::check_object(d, "dropout", {"vsr", "asr", "avsr"});
        jsonutil::read(d, "dropout", "vsr", c.dropout.vsr);
        jsonutil::read(d, "dropout", "asr", c.dropout.asr);
        jsonutil::read(d, "dropout", "avsr", c.dropout.avsr);
    }
    if (doc.contains("optimizer")) {
        const auto& o = doc["optimizer"];
        jsonutil::check_object(o, "optimizer", {"beta1", "beta2", "eps", "weight_decay", "clip_norm"});
        jsonutil::read(o, "optimizer", "beta1", c.optimizer.beta1);
        jsonutil::read(o, "optimizer", "beta2", c.optimizer.beta2);
        jsonutil::read(o, "optimizer", "eps", c.optimizer.eps);
        jsonutil::read(o, "optimizer", "weight_decay", c.optimizer.weight_decay);
        jsonutil::read(o, "optimizer", "clip_norm", c.optimizer.clip_norm);
    }
    if (doc.contains("pretrain")) {
        const auto& p = doc["pretrain"];
        jsonutil::check_object(p, "pretrain", {"schedule", "batch"});
        if (p.contains("schedule")) read_schedule(p["schedule"], "pretrain.schedule", c.pretrain.schedule);
        jsonutil::read(p, "pretrain", "batch", c.pretrain.batch);
    }
    if (doc.contains("eval")) {
        const auto& e = doc["eval"];
        jsonutil::check_object(e, "eval",
                               {"beam_width", "temperature", "max_len", "slt_greedy", "batch", "noise_distractors",
                                "sweep_snr_db"});
        jsonutil::read(e, "eval", "beam_width", c.eval.beam_width);
        jsonutil::read(e, "eval", "temperature", c.eval.temperature);
        jsonutil::read(e, "eval", "max_len", c.eval.max_len);
        jsonutil::read(e, "eval", "slt_greedy", c.eval.slt_greedy);
        jsonutil::read(e, "eval", "batch", c.eval.batch);
        jsonutil::read(e, "eval", "noise_distractors", c.eval.noise_distractors);
        if (e.contains("sweep_snr_db")) {
            if (!e["sweep_snr_db"].is_array()) throw ConfigError("eval.sweep_snr_db: expected an array of numbers");
            c.eval.sweep_snr_db.clear();
            for (const auto& v : e["sweep_snr_db"]) {
                if (!v.is_number()) throw ConfigError("eval.sweep_snr_db: expected an array of numbers");
                c.eval.sweep_snr_db.push_back(v.get<double>());
            }
        }
    }
    c.dropout.validate();
    for (const auto& s : c.stages) s.validate();
    if (c.eval.beam_width == 0) throw ConfigError("eval.beam_width: must be positive");
    if (!(c.eval.temperature > 0.0)) throw ConfigError("eval.temperature: must be positive");
    if (c.eval.max_len == 0) throw ConfigError("eval.max_len: must be positive");
    if (c.eval.batch == 0) throw ConfigError("eval.batch: must be positive");
    if (c.eval.noise_distractors == 0) throw ConfigError("eval.noise_distractors: must be positive");
    if (c.pretrain.batch == 0) throw ConfigError("pretrain.batch: must be positive");
    if (c.pretrain.schedule.steps() == 0 || c.pretrain.schedule.warmup == 0 || c.pretrain.schedule.decay == 0) {
        throw ConfigError("pretrain.schedule: warmup and decay must be positive");
    }
    return c;
}

StageConfig resolve_stage(const TrainConfig& config, std::string_view id) {
    auto find = [&](std::string_view name) -> const StageConfig& {
        for (const auto& s : config.stages) {
            if (s.id == name) return s;
        }
        throw ConfigError("stages: no stage with id \"" + std::string(name) + "\"");
    };
    if (id == "1" || id == "2" || id == "joint") return find(id);
    if (id.starts_with("single:")) {
        StageConfig s = find("single");
        s.task = parse_task(id.substr(7));
        s.sampling = Sampling::single;
        s.id = "single:" + std::string(to_string(s.task));
        return s;
    }
    if (id == "slt-sign-only" || id == "slt-sign-lip" || id == "slt-sign-lip-vsr") {
        StageConfig s = find("1");
        s.id = std::string(id);
        if (id != "slt-sign-lip-vsr") {
            s.sampling = Sampling::single;
            s.task = TaskKind::slt;
        }
        if (id == "slt-sign-only") s.slt_mask = ModalityMask{true, false, false};
        return s;
    }
    throw ConfigError("--stage: unknown stage \"" + std::string(id) +
                      "\" (expected 1, 2, joint, single:TASK, slt-sign-only, slt-sign-lip or slt-sign-lip-vsr)");
}

std::string_view train_split(TaskKind task) noexcept { return task == TaskKind::slt ? "signed_train" : "spoken_train"; }
std::string_view val_split(TaskKind task) noexcept { return task == TaskKind::slt ? "signed_val" : "spoken_val"; }
std::string_view test_split(TaskKind task) noexcept { return task == TaskKind::slt ? "signed_test" : "spoken_test"; }

// ------------------------------------------------------------------ batches

Batch make_batch(const corpus::Corpus& data, const StageConfig& stage, TaskKind task, std::mt19937_64& rng) {
    const auto& pool = data.split(train_split(task));
    if (pool.empty()) throw InputError("make_batch: split " + std::string(train_split(task)) + " is empty");
    Batch b;
    b.task = task;
    b.mask = task == TaskKind::slt ? stage.slt_mask : task_mask(task);
    b.audio.reserve(stage.batch);
    const bool noisy_task = task == TaskKind::asr || task == TaskKind::avsr;
    for (std::size_t i = 0; i < stage.batch; ++i) {
        const std::size_t idx = uniform_index(rng, pool.size());
        const corpus::Sample& s = pool[idx];
        ModelInput in = input_of(s);
        if (noisy_task && stage.noise.enabled && in.audio != nullptr && uniform01(rng) < stage.noise.probability) {
            const double snr = stage.noise.snr_db[uniform_index(rng, stage.noise.snr_db.size())];
            std::vector<Tensor2> distractors;
            for (std::size_t d = 0; d < stage.noise.distractors; ++d) {
                std::size_t j = uniform_index(rng, pool.size());
                if (j == idx && pool.size() > 1) j = (j + 1) % pool.size();
                const corpus::Stream* a = pool[j].stream(corpus::Modality::audio);
                if (a == nullptr) throw InputError("make_batch: distractor sample has no audio");
                distractors.push_back(a->frames);
            }
            b.audio.push_back(corpus::mix_babble(*in.audio, distractors, snr));
            in.audio = &b.audio.back();
        }
        b.inputs.push_back(in);
        if (task == TaskKind::slt && stage.word_drop) {
            b.texts.push_back(corpus::word_drop_augment(s.text, rng, stage.word_drop_max));
        } else {
            b.texts.push_back(s.text);
        }
    }
    return b;
}

double train_step(Model& model, const Batch& batch, AdamW& optimizer, double lr) {
    Tape tape;
    std::vector<DecoderInput> inputs;
    inputs.reserve(batch.inputs.size());
    for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
        inputs.push_back({batch.task, model.tokens(tape, batch.inputs[i], batch.mask), batch.texts[i]});
    }
    const Var loss = model.decoder().sequence_loss(tape, inputs);
    const double value = loss.value()(0, 0);
    if (!std::isfinite(value)) {
        throw NumericError("train_step: non-finite loss for task " + std::string(to_string(batch.task)));
    }
    Gradients grads(model.params());
    tape.backward(loss, grads);
    optimizer.step(model.params(), grads, lr);
    return value;
}

// --------------------------------------------------------------- evaluation

namespace {

Accuracy teacher_forced(const Model& model, std::span<const corpus::Sample> samples, std::optional<TaskKind> task,
                        std::optional<ModalityMask> mask, std::size_t batch) {
    if (samples.empty()) throw InputError("next_token_accuracy: empty split");
    if (batch == 0) throw ConfigError("eval.batch: must be positive");
    std::size_t correct = 0;
    std::size_t total = 0;
    double nll = 0.0;
    for (std::size_t begin = 0; begin < samples.size(); begin += batch) {
        const std::size_t end = std::min(samples.size(), begin + batch);
        Tape tape(false);
        std::vector<DecoderInput> inputs;
        for (std::size_t i = begin; i < end; ++i) {
            DecoderInput in;
            in.task = task;
            if (task) in.tokens = model.tokens(tape, input_of(samples[i]), mask.value_or(task_mask(*task)));
            in.prefix = samples[i].text;
            inputs.push_back(std::move(in));
        }
        const Tensor2& logits = model.decoder().forward_logits(tape, inputs).value();
        std::size_t row = 0;
        for (const auto& in : inputs) {
            for (std::size_t t = 0; t <= in.prefix.size(); ++t, ++row) {
                const std::size_t target = t < in.prefix.size() ? in.prefix[t] : vocab::kEos;
                const auto r = logits.row(row);
                if (argmax(r) == target) ++correct;
                nll -= log_softmax(r)[target];
                ++total;
            }
        }
    }
    return {static_cast<double>(correct) / static_cast<double>(total), nll / static_cast<double>(total), total};
}

}  // namespace

Accuracy next_token_accuracy(const Model& model, std::span<const corpus::Sample> samples, TaskKind task,
                             std::optional<ModalityMask> mask, std::size_t batch) {
    return teacher_forced(model, samples, task, mask, batch);
}

Accuracy lm_accuracy(const Model& model, std::span<const corpus::Sample> samples, std::size_t batch) {
    return teacher_forced(model, samples, std::nullopt, std::nullopt, batch);
}

std::vector<std::vector<std::uint16_t>> decode_samples(const Model& model, std::span<const corpus::Sample> samples,
                                                       TaskKind task, const EvalConfig& eval,
                                                       std::optional<ModalityMask> mask,
                                                       std::optional<EvalNoise> noise) {
    const ModalityMask m = mask.value_or(task_mask(task));
    std::vector<std::vector<std::uint16_t>> out(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) {
        ModelInput in = input_of(samples[i]);
        Tensor2 noisy;
        if (noise && m.audio && in.audio != nullptr) {
            std::mt19937_64 rng(derive_seed(noise->seed, {0xba661e, i}));
            std::vector<Tensor2> distractors;
            for (std::size_t d = 0; d < noise->distractors; ++d) {
                std::size_t j = uniform_index(rng, samples.size());
                if (j == i && samples.size() > 1) j = (j + 1) % samples.size();
                const corpus::Stream* a = samples[j].stream(corpus::Modality::audio);
                if (a == nullptr) throw InputError("decode_samples: distractor sample has no audio");
                distractors.push_back(a->frames);
            }
            noisy = corpus::mix_babble(*in.audio, distractors, noise->snr_db);
            in.audio = &noisy;
        }
        const Tensor2 u = model.tokens_value(in, m);
        const Hypothesis h = (task == TaskKind::slt && eval.slt_greedy)
                                 ? model.decoder().greedy_decode(u, task, eval.max_len)
                                 : model.decoder().beam_decode(u, task, eval.beam_width, eval.temperature, eval.max_len);
        out[i] = h.tokens;
    });
    return out;
}

TaskScore score(TaskKind task, std::span<const corpus::Sample> samples, std::span<const std::vector<std::uint16_t>> hyps) {
    if (samples.size() != hyps.size()) throw ConfigError("score: sample and hypothesis counts differ");
    std::vector<metrics::Sentence> refs;
    refs.reserve(samples.size());
    for (const auto& s : samples) refs.push_back(s.text);
    const std::vector<metrics::Sentence> h(hyps.begin(), hyps.end());
    return {task, metrics::wer(refs, h), metrics::bleu4(refs, h), metrics::rouge_l(refs, h), samples.size()};
}

nlohmann::json to_json(const TaskScore& s) {
    return {{"task", to_string(s.task)},
            {"wer", s.wer},
            {"bleu4_corpus", s.bleu4},
            {"rouge_l", s.rouge_l},
            {"samples", s.samples}};
}

std::string_view to_string(Choice c) noexcept { return c == Choice::best ? "best" : "last"; }

Choice select_final(const SelectionMetrics& best, const SelectionMetrics& last) {
    if (best.mean_speech_wer && last.mean_speech_wer && *best.mean_speech_wer != *last.mean_speech_wer) {
        return *best.mean_speech_wer < *last.mean_speech_wer ? Choice::best : Choice::last;
    }
    if (best.bleu4 && last.bleu4 && *best.bleu4 != *last.bleu4) {
        return *best.bleu4 > *last.bleu4 ? Choice::best : Choice::last;
    }
    return Choice::last;
}

std::string curves_csv(std::span<const CurveRow> rows) {
    std::string out = "stage,epoch,step,task,metric,value\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.6f,%zu,%s,%s,%.6f\n", r.stage.c_str(), r.epoch, r.step,
                      std::string(to_string(r.task)).c_str(), r.metric.c_str(), r.value);
        out += buf;
    }
    return out;
}

// -------------------------------------------------------------------- stages

namespace {

std::vector<Tensor2> snapshot(const ParameterSet& params) {
    std::vector<Tensor2> out;
    out.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) out.push_back(params[i].value);
    return out;
}

void restore(ParameterSet& params, const std::vector<Tensor2>& values) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].value = values[i];
}

// Validation decoding for checkpoint selection.
std::pair<SelectionMetrics, nlohmann::json> selection_metrics(const Model& model, const corpus::Corpus& data,
                                                              const StageConfig& stage, const EvalConfig& eval) {
    SelectionMetrics sel;
    nlohmann::json j = nlohmann::json::object();
    double wer_sum = 0.0;
    std::size_t wer_count = 0;
    for (TaskKind t : stage.tasks()) {
        const auto& split = data.split(val_split(t));
        const std::optional<ModalityMask> mask =
            t == TaskKind::slt ? std::optional<ModalityMask>(stage.slt_mask) : std::nullopt;
        const auto hyps = decode_samples(model, split, t, eval, mask);
        const TaskScore s = score(t, split, hyps);
        j[std::string(to_string(t))] = to_json(s);
        if (is_speech(t)) {
            wer_sum += s.wer;
            ++wer_count;
        } else {
            sel.bleu4 = s.bleu4;
        }
    }
    if (wer_count > 0) sel.mean_speech_wer = wer_sum / static_cast<double>(wer_count);
    return {sel, j};
}

}  // namespace

StageResult run_stage(Model& model, const corpus::Corpus& data, const StageConfig& stage, const TrainConfig& config,
                      std::uint64_t seed, const std::filesystem::path& out_dir, std::ostream* log) {
    stage.validate();
    if (stage.sampling == Sampling::joint) config.dropout.validate();
    const std::vector<TaskKind> tasks = stage.tasks();
    std::size_t epoch_base = 0;
    for (TaskKind t : tasks) {
        for (std::string_view name : {train_split(t), val_split(t)}) {
            if (data.split(name).empty()) throw InputError("run_stage: split " + std::string(name) + " is empty");
        }
        const std::size_t n = data.split(train_split(t)).size();
        epoch_base = epoch_base == 0 ? n : std::min(epoch_base, n);
    }

    StageResult result;
    AdamW optimizer(model.params(), config.optimizer);
    const std::uint64_t stage_key = key_of(stage.id);
    std::vector<Tensor2> best_values;
    bool have_best = false;
    const std::size_t steps = stage.schedule.steps();
    double loss_window = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
        std::mt19937_64 rng(derive_seed(seed, {stage_key, step}));
        const TaskKind task = sample_task(rng, stage, config.dropout);
        const Batch batch = make_batch(data, stage, task, rng);
        loss_window += train_step(model, batch, optimizer, lr_at(step, stage.schedule));
        if (log != nullptr && (step + 1) % 100 == 0) {
            *log << "stage " << stage.id << " step " << step + 1 << " loss " << loss_window / 100.0 << '\n'
                 << std::flush;
            loss_window = 0.0;
        }
        if ((step + 1) % stage.eval_every == 0 || step + 1 == steps) {
            const double epoch = static_cast<double>((step + 1) * stage.batch) / static_cast<double>(epoch_base);
            double sum = 0.0;
            for (TaskKind t : tasks) {
                const std::optional<ModalityMask> mask =
                    t == TaskKind::slt ? std::optional<ModalityMask>(stage.slt_mask) : std::nullopt;
                const Accuracy a = next_token_accuracy(model, data.split(val_split(t)), t, mask, config.eval.batch);
                result.curves.push_back({stage.id, epoch, step + 1, t, "next_token_accuracy", a.accuracy});
                sum += a.accuracy;
                if (log != nullptr) *log << "  val " << to_string(t) << " acc " << a.accuracy << '\n';
            }
            const double mean = sum / static_cast<double>(tasks.size());
            result.last_accuracy = mean;
            if (!have_best || mean > result.best_accuracy) {
                have_best = true;
                result.best_accuracy = mean;
                result.best_step = step + 1;
                best_values = snapshot(model.params());
            }
        }
    }

    const nlohmann::json base_meta = {{"stage", stage.id}, {"seed", seed}, {"config", to_json(config)}};
    auto meta_for = [&](std::string_view kind, std::size_t step, double acc) {
        nlohmann::json m = base_meta;
        m["kind"] = kind;
        m["step"] = step;
        m["val_accuracy"] = acc;
        return m;
    };

    round_to_float32(model.params());
    std::vector<Tensor2> last_values = snapshot(model.params());
    const std::string last_blob = encode_checkpoint(model.params(), meta_for("last", steps, result.last_accuracy));
    auto [last_sel, last_json] = selection_metrics(model, data, stage, config.eval);

    restore(model.params(), best_values);
    round_to_float32(model.params());
    best_values = snapshot(model.params());
    const std::string best_blob =
        encode_checkpoint(model.params(), meta_for("best", result.best_step, result.best_accuracy));
    auto [best_sel, best_json] = selection_metrics(model, data, stage, config.eval);

    result.selected = select_final(best_sel, last_sel);
    result.best_metrics = best_json;
    result.last_metrics = last_json;
    result.best_digest = sha256_hex(best_blob);
    result.last_digest = sha256_hex(last_blob);
    const bool pick_best = result.selected == Choice::best;
    restore(model.params(), pick_best ? best_values : last_values);
    nlohmann::json final_meta = meta_for("final", pick_best ? result.best_step : steps,
                                         pick_best ? result.best_accuracy : result.last_accuracy);
    final_meta["selected"] = to_string(result.selected);
    const std::string final_blob = encode_checkpoint(model.params(), final_meta);
    result.final_digest = sha256_hex(final_blob);

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        binio::write_file((out_dir / "best.umck").string(), best_blob);
        binio::write_file((out_dir / "last.umck").string(), last_blob);
        binio::write_file((out_dir / "final.umck").string(), final_blob);
        binio::write_file((out_dir / "curves.csv").string(), curves_csv(result.curves));
    }
    if (log != nullptr) {
        *log << "stage " << stage.id << " selected " << to_string(result.selected) << " (best step "
             << result.best_step << ")\n";
    }
    return result;
}

PretrainResult pretrain_lm(Model& model, const corpus::Corpus& data, const TrainConfig& config, std::uint64_t seed,
                           std::ostream* log) {
    const auto& train = data.split("text_train");
    const auto& val = data.split("text_val");
    if (train.empty() || val.empty()) throw InputError("pretrain: text_train and text_val must be non-empty");
    model.configure_pretraining();
    AdamW optimizer(model.params(), config.optimizer);
    const Schedule& sched = config.pretrain.schedule;
    PretrainResult r;
    double window = 0.0;
    for (std::size_t step = 0; step < sched.steps(); ++step) {
        std::mt19937_64 rng(derive_seed(seed, {0x9e7a1, step}));
        Tape tape;
        std::vector<DecoderInput> inputs;
        for (std::size_t b = 0; b < config.pretrain.batch; ++b) {
            inputs.push_back({std::nullopt, std::nullopt, train[uniform_index(rng, train.size())].text});
        }
        const Var loss = model.decoder().sequence_loss(tape, inputs);
        const double value = loss.value()(0, 0);
        if (!std::isfinite(value)) throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));
        Gradients grads(model.params());
        tape.backward(loss, grads);
        optimizer.step(model.params(), grads, lr_at(step, sched));
        r.final_loss = value;
        window += value;
        if (log != nullptr && (step + 1) % 100 == 0) {
            *log << "pretrain step " << step + 1 << " loss " << window / 100.0 << '\n' << std::flush;
            window = 0.0;
        }
    }
    round_to_float32(model.params());
    const Accuracy a = lm_accuracy(model, val, config.eval.batch);
    r.val_loss = a.loss;
    r.val_perplexity = std::exp(a.loss);
    r.val_accuracy = a.accuracy;
    return r;
}

}  // namespace unifuse::train
