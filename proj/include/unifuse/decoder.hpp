#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "unifuse/autodiff.hpp"
#include "unifuse/fusion.hpp"

namespace unifuse {

/// Token layout: words 0..39, then PAD, BOS, EOS and one token per task.
namespace vocab {
inline constexpr std::size_t kWords = 40;
inline constexpr std::uint16_t kPad = 40;
inline constexpr std::uint16_t kBos = 41;
inline constexpr std::uint16_t kEos = 42;
inline constexpr std::uint16_t kTaskBase = 43;
inline constexpr std::size_t kSize = 47;

inline constexpr std::uint16_t task_token(TaskKind t) noexcept {
    return static_cast<std::uint16_t>(kTaskBase + static_cast<std::uint16_t>(t));
}
/// "w0".."w39", "<pad>", "<bos>", "<eos>", "<task:SLT>", ...
std::string token_name(std::uint16_t id);
std::vector<std::string> table();
}  // namespace vocab

struct DecoderConfig {
    std::size_t d_model = 64;
    std::size_t layers = 3;
    std::size_t heads = 4;
    std::size_t ffn = 256;
    std::size_t max_positions = 160;
    std::size_t lora_rank = 4;
    double lora_alpha = 8.0;
    /// Longest linguistic-token block; text positions start right after it.
    std::size_t max_token_rows = 32;

    /// Position id of BOS. Position 0 is the task token, 1..max_token_rows the
    /// linguistic tokens, so text positions are the same with or without them.
    [[nodiscard]] std::size_t text_offset() const noexcept { return max_token_rows + 2; }
    [[nodiscard]] double lora_scale() const noexcept { return lora_alpha / static_cast<double>(lora_rank); }
};

/// One sequence for the decoder: optional task token, optional linguistic
/// tokens U (T x d_model), then BOS followed by `prefix`.
struct DecoderInput {
    std::optional<TaskKind> task;
    std::optional<Var> tokens;
    std::vector<std::uint16_t> prefix;
};

/// Result of a search; `score` is the summed temperature-scaled log-probability
/// of the returned tokens (and of EOS when finished).
struct Hypothesis {
    std::vector<std::uint16_t> tokens;
    double score = 0.0;
    bool finished = false;
};

/// Next-token logits for a prefix of generated tokens (BOS excluded).
using LogitsFn = std::function<std::vector<double>(std::span<const std::uint16_t> prefix)>;

/// Argmax per step (lowest index wins ties) until EOS or max_len tokens.
/// EOS is not included in the returned tokens.
Hypothesis greedy_search(const LogitsFn& logits, std::uint16_t eos, std::size_t max_len);

/// Beam search scoring sum(log softmax(logits / temperature)) without length
/// normalization. Each step keeps the `width` best extensions (ties broken by
/// parent rank, then token index); extensions ending in EOS move to the
/// finished pool. Stops when no live hypothesis can beat the best finished one.
/// Returns the best finished hypothesis, or the best live one at max_len.
Hypothesis beam_search(const LogitsFn& logits, std::uint16_t eos, std::size_t vocab_size, std::size_t width,
                       double temperature, std::size_t max_len);

/// log softmax(logits / temperature).
std::vector<double> log_softmax(std::span<const double> logits, double temperature = 1.0);

/// Small causal transformer with learned absolute positions and low-rank
/// adapters on the q/k/v/o projections of every layer.
class Decoder {
public:
    Decoder(ParameterSet& params, const DecoderConfig& config, std::mt19937_64& rng);

    [[nodiscard]] const DecoderConfig& config() const noexcept { return config_; }

    /// Adapters are added to the projections only while enabled.
    void set_lora_enabled(bool enabled) noexcept { lora_enabled_ = enabled; }
    [[nodiscard]] bool lora_enabled() const noexcept { return lora_enabled_; }

    /// Logits for the text region of every input, stacked: input i contributes
    /// |prefix_i| + 1 rows (BOS and each prefix token). Throws LengthError when
    /// a sequence does not fit the position table.
    Var forward_logits(Tape& tape, std::span<const DecoderInput> inputs) const;

    /// Mean next-token cross-entropy over every target position of the batch,
    /// where targets are prefix ++ EOS. Throws InputError on an empty prefix.
    Var sequence_loss(Tape& tape, std::span<const DecoderInput> inputs) const;

    /// Incremental (cached) inference for one sequence.
    class Session {
    public:
        /// Logits after `prefix` generated tokens. Extends cached states, so
        /// beam search reuses every shared prefix.
        std::vector<double> logits(std::span<const std::uint16_t> prefix);

    private:
        friend class Decoder;
        struct Weights;
        struct State {
            std::vector<std::vector<double>> k;  // per layer, rows x d_model
            std::vector<std::vector<double>> v;
            std::vector<double> logits;
        };
        void advance(const std::vector<double>& x_rows, std::size_t n_rows, const State* context, State& own) const;

        std::shared_ptr<const Weights> weights_;
        const DecoderConfig* config_ = nullptr;
        State prefix_;
        std::size_t text_rows_ = 0;
        std::vector<std::pair<std::vector<std::uint16_t>, State>> cache_;
    };

    /// `tokens` is T x d_model (may be empty for a pure language model); a
    /// missing task omits the task token.
    Session start(const Tensor2* tokens, std::optional<TaskKind> task) const;

    Hypothesis greedy_decode(const Tensor2& tokens, TaskKind task, std::size_t max_len = 12) const;
    Hypothesis beam_decode(const Tensor2& tokens, TaskKind task, std::size_t width = 5, double temperature = 0.3,
                           std::size_t max_len = 12) const;

    /// W + scale * A * B for projection `proj` (0..3 = q, k, v, o) of `layer`.
    [[nodiscard]] Tensor2 merged_weight(std::size_t layer, std::size_t proj) const;

    /// Parameter name prefixes, for trainability switches.
    static constexpr const char* kPrefix = "dec.";

private:
    struct Layer {
        Parameter* ln1_g;
        Parameter* ln1_b;
        std::array<Parameter*, 4> w;  // q, k, v, o
        std::array<Parameter*, 4> b;
        std::array<Parameter*, 4> lora_a;
        std::array<Parameter*, 4> lora_b;
        Parameter* ln2_g;
        Parameter* ln2_b;
        Parameter* fc1_w;
        Parameter* fc1_b;
        Parameter* fc2_w;
        Parameter* fc2_b;
    };
    Var projection(Tape& tape, Var x, const Layer& layer, std::size_t proj) const;

    DecoderConfig config_;
    bool lora_enabled_ = false;
    Parameter* tok_embed_ = nullptr;
    Parameter* pos_embed_ = nullptr;
    Parameter* task_embed_ = nullptr;
    std::vector<Layer> layers_;
    Parameter* lnf_g_ = nullptr;
    Parameter* lnf_b_ = nullptr;
    Parameter* head_w_ = nullptr;
    Parameter* head_b_ = nullptr;
};

}  // namespace unifuse
