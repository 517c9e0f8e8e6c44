#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "unifuse/model.hpp"
#include "unifuse/synthcorpus.hpp"

namespace unifuse::train {

/// Tri-stage learning-rate schedule: linear warmup, constant hold, linear decay
/// to floor_ratio * peak.
struct Schedule {
    std::size_t warmup = 0;
    std::size_t hold = 0;
    std::size_t decay = 0;
    double peak = 3e-3;
    double floor_ratio = 0.01;

    [[nodiscard]] std::size_t steps() const noexcept { return warmup + hold + decay; }
};

/// Throws ConfigError when step >= schedule.steps().
double lr_at(std::size_t step, const Schedule& schedule);

/// Task probabilities for spoken batches in joint sampling.
struct DropoutSchedule {
    double vsr = 0.25;
    double asr = 0.25;
    double avsr = 0.5;
    /// Throws ConfigError unless all are non-negative and sum to 1 (1e-9).
    void validate() const;
};

enum class Sampling {
    visual,  ///< SLT or VSR
    joint,   ///< SLT or a spoken task drawn from the dropout schedule
    single,  ///< one fixed task
};

struct NoisePolicy {
    bool enabled = true;
    double probability = 0.75;
    std::vector<double> snr_db{-5, 0, 5, 10, 15, 20};
    std::size_t distractors = 3;
};

struct StageConfig {
    std::string id;
    Sampling sampling = Sampling::visual;
    TaskKind task = TaskKind::slt;  ///< used by Sampling::single
    double slt_fraction = 0.5;      ///< share of signed batches
    /// Streams fed to the encoders for SLT batches.
    ModalityMask slt_mask = task_mask(TaskKind::slt);
    Schedule schedule;
    std::size_t batch = 16;
    NoisePolicy noise;  ///< applies to ASR and AVSR batches only
    bool word_drop = true;
    double word_drop_max = 0.2;
    std::size_t eval_every = 200;

    /// Tasks this stage can sample, in TaskKind order.
    [[nodiscard]] std::vector<TaskKind> tasks() const;
    void validate() const;
};

TaskKind sample_task(std::mt19937_64& rng, const StageConfig& stage, const DropoutSchedule& dropout);

struct OptimizerConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
};

/// Adam with decoupled weight decay. Only trainable parameters that received a
/// gradient in the current step are updated; task embeddings are not decayed.
class AdamW {
public:
    AdamW(const ParameterSet& params, const OptimizerConfig& config);
    /// Clips `grads` to the configured global norm, then updates. Returns the
    /// pre-clip norm.
    double step(ParameterSet& params, Gradients& grads, double lr);
    [[nodiscard]] std::size_t steps_taken() const noexcept { return t_; }

private:
    OptimizerConfig config_;
    std::vector<Tensor2> m_;
    std::vector<Tensor2> v_;
    std::vector<std::size_t> updates_;
    std::size_t t_ = 0;
};

struct PretrainConfig {
    Schedule schedule{100, 1100, 800, 1e-3, 0.01};
    std::size_t batch = 16;
};

struct EvalConfig {
    std::size_t beam_width = 5;
    double temperature = 0.3;
    std::size_t max_len = 12;
    bool slt_greedy = true;
    std::size_t batch = 50;  ///< teacher-forced accuracy batch
    std::size_t noise_distractors = 3;
    std::vector<double> sweep_snr_db{-5, -2.5, 0, 2.5, 5, 7.5, 10};
};

/// Whole-run configuration; the JSON form has sections corpus, encoders,
/// fusion, decoder, stages, dropout, optimizer, pretrain and eval.
struct TrainConfig {
    corpus::CorpusConfig corpus;
    ModelConfig model;
    std::vector<StageConfig> stages;  ///< ids "1", "2", "joint", "single"
    DropoutSchedule dropout;
    OptimizerConfig optimizer;
    PretrainConfig pretrain;
    EvalConfig eval;
};

TrainConfig default_config();
nlohmann::json to_json(const TrainConfig& config);
/// Overlays `doc` on the defaults. Stage entries are matched by "id".
TrainConfig config_from_json(const nlohmann::json& doc);

/// Stage by id: "1", "2", "joint", "single:<TASK>", or one of the presets
/// "slt-sign-only", "slt-sign-lip", "slt-sign-lip-vsr".
StageConfig resolve_stage(const TrainConfig& config, std::string_view id);

/// One training batch; `inputs` point into the corpus or into `audio`.
struct Batch {
    TaskKind task = TaskKind::slt;
    ModalityMask mask;
    std::vector<ModelInput> inputs;
    std::vector<std::vector<std::uint16_t>> texts;
    std::vector<Tensor2> audio;  ///< noisy copies; reserved up front
};

/// Draws `stage.batch` samples with replacement from the split matching
/// `task`, applying the noise policy and word drop.
Batch make_batch(const corpus::Corpus& data, const StageConfig& stage, TaskKind task, std::mt19937_64& rng);

/// Forward, backward and one optimizer update. Throws NumericError on a
/// non-finite loss or gradient.
double train_step(Model& model, const Batch& batch, AdamW& optimizer, double lr);

struct Accuracy {
    double accuracy = 0.0;
    double loss = 0.0;  ///< mean cross-entropy per target position
    std::size_t positions = 0;
};

/// Teacher-forced next-token accuracy over text ++ EOS. `mask` overrides the
/// task's default streams. Throws InputError on an empty split.
Accuracy next_token_accuracy(const Model& model, std::span<const corpus::Sample> samples, TaskKind task,
                             std::optional<ModalityMask> mask = std::nullopt, std::size_t batch = 50);

/// Language-model loss over text samples (no task token, no linguistic tokens).
Accuracy lm_accuracy(const Model& model, std::span<const corpus::Sample> samples, std::size_t batch = 50);

/// Babble for evaluation: each sample mixes `distractors` other samples of the
/// same split, chosen from (seed, sample index).
struct EvalNoise {
    double snr_db = 0.0;
    std::uint64_t seed = 0;
    std::size_t distractors = 3;
};

/// Decodes every sample: greedy for SLT when eval.slt_greedy, beam otherwise.
std::vector<std::vector<std::uint16_t>> decode_samples(const Model& model, std::span<const corpus::Sample> samples,
                                                       TaskKind task, const EvalConfig& eval,
                                                       std::optional<ModalityMask> mask = std::nullopt,
                                                       std::optional<EvalNoise> noise = std::nullopt);

struct TaskScore {
    TaskKind task = TaskKind::slt;
    double wer = 0.0;
    double bleu4 = 0.0;
    double rouge_l = 0.0;
    std::size_t samples = 0;
};
TaskScore score(TaskKind task, std::span<const corpus::Sample> samples,
                std::span<const std::vector<std::uint16_t>> hyps);
nlohmann::json to_json(const TaskScore& s);

/// Validation metrics used to choose between the best and last checkpoints.
struct SelectionMetrics {
    std::optional<double> mean_speech_wer;
    std::optional<double> bleu4;
};
enum class Choice { best, last };
std::string_view to_string(Choice c) noexcept;
/// Lower mean speech WER wins, then higher BLEU-4, then "last".
Choice select_final(const SelectionMetrics& best, const SelectionMetrics& last);

struct CurveRow {
    std::string stage;
    double epoch = 0.0;
    std::size_t step = 0;
    TaskKind task = TaskKind::slt;
    std::string metric;
    double value = 0.0;
};
/// Header plus one line per row; values printed with %.6f.
std::string curves_csv(std::span<const CurveRow> rows);

struct StageResult {
    std::vector<CurveRow> curves;
    std::size_t best_step = 0;
    double best_accuracy = 0.0;
    double last_accuracy = 0.0;
    Choice selected = Choice::last;
    nlohmann::json best_metrics;
    nlohmann::json last_metrics;
    std::string best_digest;
    std::string last_digest;
    std::string final_digest;
};

/// Trains `model` (already in fine-tuning mode) for one stage. Writes
/// best.umck, last.umck, final.umck and curves.csv to `out_dir` when it is not
/// empty. On return the model holds the selected final parameters, rounded to
/// float32. `log` receives progress lines when not null.
StageResult run_stage(Model& model, const corpus::Corpus& data, const StageConfig& stage, const TrainConfig& config,
                      std::uint64_t seed, const std::filesystem::path& out_dir, std::ostream* log = nullptr);

struct PretrainResult {
    double final_loss = 0.0;
    double val_loss = 0.0;
    double val_perplexity = 0.0;
    double val_accuracy = 0.0;
};

/// Trains the decoder base as a language model on text_train and reports
/// held-out perplexity on text_val. Leaves the model in pretraining mode.
PretrainResult pretrain_lm(Model& model, const corpus::Corpus& data, const TrainConfig& config, std::uint64_t seed,
                           std::ostream* log = nullptr);

/// Corpus split names for a task.
std::string_view train_split(TaskKind task) noexcept;
std::string_view val_split(TaskKind task) noexcept;
std::string_view test_split(TaskKind task) noexcept;

}  // namespace unifuse::train
