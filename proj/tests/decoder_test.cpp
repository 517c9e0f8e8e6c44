#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "test_support.hpp"
#include "unifuse/decoder.hpp"
#include "unifuse/error.hpp"

using namespace unifuse;

namespace {

DecoderConfig small_decoder() {
    DecoderConfig c;
    c.d_model = 16;
    c.layers = 2;
    c.heads = 2;
    c.ffn = 32;
    return c;
}

Tensor2 random_tokens(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    Tensor2 t(rows, cols);
    fill_normal(t, 1.0, rng);
    return t;
}

void randomize_lora(ParameterSet& ps, std::mt19937_64& rng) {
    for (std::size_t i = 0; i < ps.size(); ++i)
        if (ps[i].name.find(".lora.") != std::string::npos) fill_normal(ps[i].value, 0.2, rng);
}

/// Next-token logits drawn once per prefix from a fixed table.
struct ToyModel {
    std::size_t vocab;
    std::mt19937_64 rng;
    std::map<std::vector<std::uint16_t>, std::vector<double>> table;

    std::vector<double> operator()(std::span<const std::uint16_t> prefix) {
        const std::vector<std::uint16_t> key(prefix.begin(), prefix.end());
        auto it = table.find(key);
        if (it == table.end()) {
            std::normal_distribution<double> n(0.0, 1.5);
            std::vector<double> l(vocab);
            for (double& v : l) v = n(rng);
            it = table.emplace(key, std::move(l)).first;
        }
        return it->second;
    }
};

/// Best finished sequence by brute force over every token string.
double exhaustive_best(ToyModel& model, std::uint16_t eos, std::size_t max_len, double temperature) {
    double best = -INFINITY;
    std::vector<std::vector<std::uint16_t>> frontier{{}};
    std::vector<double> scores{0.0};
    for (std::size_t step = 0; step < max_len; ++step) {
        std::vector<std::vector<std::uint16_t>> next;
        std::vector<double> next_scores;
        for (std::size_t i = 0; i < frontier.size(); ++i) {
            const auto lp = log_softmax(model(frontier[i]), temperature);
            for (std::uint16_t v = 0; v < model.vocab; ++v) {
                if (v == eos) {
                    best = std::max(best, scores[i] + lp[v]);
                } else {
                    auto seq = frontier[i];
                    seq.push_back(v);
                    next.push_back(std::move(seq));
                    next_scores.push_back(scores[i] + lp[v]);
                }
            }
        }
        frontier = std::move(next);
        scores = std::move(next_scores);
    }
    return best;
}

}  // namespace

TEST(Vocab, Layout) {
    EXPECT_EQ(vocab::token_name(0), "w0");
    EXPECT_EQ(vocab::token_name(39), "w39");
    EXPECT_EQ(vocab::token_name(vocab::kEos), "<eos>");
    EXPECT_EQ(vocab::task_token(TaskKind::avsr), 46);
    EXPECT_EQ(vocab::table().size(), vocab::kSize);
    EXPECT_THROW(vocab::token_name(47), ConfigError);
}

TEST(LogSoftmax, NormalizesAndScales) {
    const std::vector<double> l{1.0, 2.0, -0.5, 0.25};
    for (double temp : {1.0, 0.3, 2.0}) {
        const auto lp = log_softmax(l, temp);
        double total = 0.0;
        for (double v : lp) total += std::exp(v);
        EXPECT_NEAR(total, 1.0, 1e-12);
        EXPECT_EQ(std::max_element(lp.begin(), lp.end()) - lp.begin(), 1);
    }
    EXPECT_THROW(log_softmax(l, 0.0), ConfigError);
}

TEST(Search, ArgumentErrors) {
    ToyModel toy{5, std::mt19937_64(1), {}};
    const LogitsFn fn = [&](auto p) { return toy(p); };
    EXPECT_THROW(beam_search(fn, 4, 5, 0, 1.0, 3), ConfigError);
    EXPECT_THROW(beam_search(fn, 4, 5, 2, 0.0, 3), ConfigError);
    EXPECT_THROW(beam_search(fn, 4, 5, 2, -1.0, 3), ConfigError);
}

TEST(Search, WideBeamMatchesExhaustiveSearch) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        ToyModel toy{5, std::mt19937_64(seed), {}};
        const LogitsFn fn = [&](auto p) { return toy(p); };
        const double oracle = exhaustive_best(toy, 4, 3, 0.3);
        const Hypothesis wide = beam_search(fn, 4, 5, 125, 0.3, 3);
        ASSERT_TRUE(wide.finished);
        EXPECT_NEAR(wide.score, oracle, 1e-12) << "seed " << seed;
        const Hypothesis narrow = beam_search(fn, 4, 5, 5, 0.3, 3);
        if (narrow.finished) EXPECT_LE(narrow.score, oracle + 1e-12);
    }
}

TEST(Search, WidthOneTemperatureOneIsGreedy) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        ToyModel toy{6, std::mt19937_64(seed), {}};
        const LogitsFn fn = [&](auto p) { return toy(p); };
        const Hypothesis g = greedy_search(fn, 5, 6);
        const Hypothesis b = beam_search(fn, 5, 6, 1, 1.0, 6);
        EXPECT_EQ(g.tokens, b.tokens);
        EXPECT_EQ(g.finished, b.finished);
        EXPECT_NEAR(g.score, b.score, 1e-12);
    }
}

TEST(Decoder, ConfigValidation) {
    ParameterSet ps;
    std::mt19937_64 rng(1);
    DecoderConfig c = small_decoder();
    c.heads = 3;
    EXPECT_THROW(Decoder(ps, c, rng), ConfigError);
    c = small_decoder();
    c.lora_rank = 17;
    EXPECT_THROW(Decoder(ps, c, rng), ConfigError);
    EXPECT_DOUBLE_EQ(DecoderConfig{}.lora_scale(), 2.0);
    EXPECT_EQ(DecoderConfig{}.text_offset(), 34u);
}

TEST(Decoder, UniformLogitsGiveLogVocab) {
    ParameterSet ps;
    std::mt19937_64 rng(2);
    Decoder dec(ps, small_decoder(), rng);
    ps.at("dec.head.w").value.fill(0.0);
    ps.at("dec.head.b").value.fill(0.0);
    Tape tape;
    std::vector<DecoderInput> in{{std::nullopt, std::nullopt, {1, 2, 3}}, {TaskKind::asr, std::nullopt, {7}}};
    EXPECT_NEAR(dec.sequence_loss(tape, in).value()(0, 0), std::log(47.0), 1e-12);
    Tape t2;
    std::vector<DecoderInput> empty{{std::nullopt, std::nullopt, {}}};
    EXPECT_THROW(dec.sequence_loss(t2, empty), InputError);
}

TEST(Decoder, CausalOverTextPositions) {
    ParameterSet ps;
    std::mt19937_64 rng(3);
    Decoder dec(ps, small_decoder(), rng);
    const Tensor2 u = random_tokens(8, 16, rng);
    Tape tape(false);
    std::vector<DecoderInput> a{{TaskKind::vsr, tape.constant(u), {1, 2, 3, 4}}};
    std::vector<DecoderInput> b{{TaskKind::vsr, tape.constant(u), {1, 2, 9, 9}}};
    const Tensor2 la = dec.forward_logits(tape, a).value();
    const Tensor2 lb = dec.forward_logits(tape, b).value();
    ASSERT_EQ(la.rows(), 5u);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < la.cols(); ++c) EXPECT_EQ(la(r, c), lb(r, c));
    EXPECT_NE(la(4, 0), lb(4, 0));
}

TEST(Decoder, SessionMatchesBatchedForward) {
    ParameterSet ps;
    std::mt19937_64 rng(4);
    Decoder dec(ps, small_decoder(), rng);
    randomize_lora(ps, rng);
    dec.set_lora_enabled(true);
    const Tensor2 u = random_tokens(12, 16, rng);
    const std::vector<std::uint16_t> prefix{5, 9, 0, 31};
    Tape tape(false);
    std::vector<DecoderInput> in{{TaskKind::slt, tape.constant(u), prefix}};
    const Tensor2 full = dec.forward_logits(tape, in).value();
    auto session = dec.start(&u, TaskKind::slt);
    for (std::size_t k = 0; k <= prefix.size(); ++k) {
        const auto l = session.logits(std::span(prefix).first(k));
        for (std::size_t c = 0; c < l.size(); ++c) EXPECT_NEAR(l[c], full(k, c), 1e-10);
    }
}

TEST(Decoder, TooManyTokensIsLengthError) {
    ParameterSet ps;
    std::mt19937_64 rng(5);
    Decoder dec(ps, small_decoder(), rng);
    const Tensor2 u(33, 16);
    Tape tape(false);
    std::vector<DecoderInput> in{{TaskKind::slt, tape.constant(u), {1}}};
    EXPECT_THROW(dec.forward_logits(tape, in), LengthError);
    EXPECT_THROW(dec.start(&u, TaskKind::slt), LengthError);
}

TEST(Decoder, ZeroInitLoraIsBitIdentical) {
    ParameterSet ps;
    std::mt19937_64 rng(6);
    Decoder dec(ps, small_decoder(), rng);
    const Tensor2 u = random_tokens(8, 16, rng);
    Tape tape(false);
    std::vector<DecoderInput> in{{TaskKind::avsr, tape.constant(u), {3, 1, 4, 1, 5}}};
    dec.set_lora_enabled(false);
    const Tensor2 base = dec.forward_logits(tape, in).value();
    dec.set_lora_enabled(true);
    EXPECT_EQ(dec.forward_logits(tape, in).value(), base);
}

TEST(Decoder, MergedWeightsMatchAdapterPath) {
    std::mt19937_64 rng(7);
    ParameterSet ps;
    std::mt19937_64 init(70);
    Decoder dec(ps, small_decoder(), init);
    randomize_lora(ps, rng);
    dec.set_lora_enabled(true);

    ParameterSet merged_ps;
    std::mt19937_64 init2(70);
    Decoder merged(merged_ps, small_decoder(), init2);
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t j = 0; j < 4; ++j) {
            static constexpr const char* kNames[] = {"q", "k", "v", "o"};
            merged_ps.at("dec.l" + std::to_string(l) + ".attn." + kNames[j] + ".w").value = dec.merged_weight(l, j);
        }
    merged.set_lora_enabled(false);

    const Tensor2 u = random_tokens(8, 16, rng);
    Tape tape(false);
    std::vector<DecoderInput> in{{TaskKind::vsr, tape.constant(u), {2, 7, 1, 8}}};
    const Tensor2 adapter_path = dec.forward_logits(tape, in).value();
    const Tensor2 merged_path = merged.forward_logits(tape, in).value();
    const double diff = max_abs_diff(adapter_path, merged_path);
    EXPECT_LT(diff, 1e-6);
}

TEST(Decoder, BeamWidthOneIsGreedyOnRandomInputs) {
    ParameterSet ps;
    std::mt19937_64 rng(8);
    Decoder dec(ps, small_decoder(), rng);
    randomize_lora(ps, rng);
    dec.set_lora_enabled(true);
    for (int i = 0; i < 50; ++i) {
        const Tensor2 u = random_tokens(4 * (1 + i % 8), 16, rng);
        const auto task = kAllTasks[i % 4];
        const Hypothesis g = dec.greedy_decode(u, task);
        const Hypothesis b = dec.beam_decode(u, task, 1, 1.0);
        EXPECT_EQ(g.tokens, b.tokens) << i;
        EXPECT_EQ(dec.greedy_decode(u, task).tokens, g.tokens);
    }
}

TEST(Decoder, BeamScoreNonDecreasingInWidth) {
    ParameterSet ps;
    std::mt19937_64 rng(9);
    Decoder dec(ps, small_decoder(), rng);
    randomize_lora(ps, rng);
    dec.set_lora_enabled(true);
    ps.at("dec.head.b").value(0, vocab::kEos) = 3.0;  // make EOS reachable
    for (int i = 0; i < 20; ++i) {
        const Tensor2 u = random_tokens(12, 16, rng);
        const Hypothesis w1 = dec.beam_decode(u, TaskKind::asr, 1);
        const Hypothesis w2 = dec.beam_decode(u, TaskKind::asr, 2);
        const Hypothesis w5 = dec.beam_decode(u, TaskKind::asr, 5);
        if (w1.finished && w2.finished) EXPECT_GE(w2.score, w1.score - 1e-12);
        if (w2.finished && w5.finished) EXPECT_GE(w5.score, w2.score - 1e-12);
    }
}
