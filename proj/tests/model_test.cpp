#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "test_support.hpp"
#include "unifuse/error.hpp"
#include "unifuse/model.hpp"

using namespace unifuse;
using corpus::Modality;
using support::random_text;
using support::tiny_model_config;

namespace {

Tensor2 random_frames(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    Tensor2 t(rows, cols);
    fill_normal(t, 1.0, rng);
    return t;
}

corpus::Sample render(const std::vector<std::uint16_t>& text, corpus::CorpusTag tag, std::uint64_t seed) {
    static const corpus::Lexicon lex = corpus::build_lexicon(1);
    return corpus::render_sample(text, lex, tag, seed);
}

}  // namespace

TEST(Encoder, AudioDownsamplesByTwo) {
    ParameterSet ps;
    std::mt19937_64 rng(1);
    Encoder enc(ps, "enc.audio", default_encoder_config(Modality::audio), rng);
    Tape tape;
    EXPECT_EQ(enc.forward(tape, tape.constant(Tensor2(160, 12))).value().rows(), 80u);
    const Var y = enc.forward(tape, tape.constant(Tensor2(64, 12)));
    EXPECT_EQ(y.value().rows(), 32u);
    EXPECT_EQ(y.value().cols(), 16u);
}

TEST(Encoder, VisualStreamsKeepTheirRate) {
    ParameterSet ps;
    std::mt19937_64 rng(2);
    Encoder sign(ps, "enc.sign", default_encoder_config(Modality::sign), rng);
    Encoder lip(ps, "enc.lip", default_encoder_config(Modality::lip), rng);
    Tape tape;
    EXPECT_EQ(sign.forward(tape, tape.constant(Tensor2(40, 8))).value().rows(), 40u);
    EXPECT_EQ(lip.forward(tape, tape.constant(Tensor2(8, 8))).value().rows(), 8u);
}

TEST(Encoder, LengthAndModalityErrors) {
    ParameterSet ps;
    std::mt19937_64 rng(3);
    Encoder audio(ps, "enc.audio", default_encoder_config(Modality::audio), rng);
    Encoder sign(ps, "enc.sign", default_encoder_config(Modality::sign), rng);
    Tape tape;
    EXPECT_THROW(audio.forward(tape, tape.constant(Tensor2(33, 12))), LengthError);
    EXPECT_THROW(sign.forward(tape, tape.constant(Tensor2(4, 8))), LengthError);
    EXPECT_THROW(sign.forward(tape, tape.constant(Tensor2(16, 5))), DimensionError);
    const corpus::Sample spoken = render({1, 2, 3}, corpus::CorpusTag::speech, 4);
    EXPECT_THROW(sign.forward(tape, *spoken.stream(Modality::audio)), InputError);
}

TEST(Encoder, ZeroInputIsDeterministic) {
    ParameterSet ps;
    std::mt19937_64 rng(4);
    Encoder enc(ps, "enc.lip", default_encoder_config(Modality::lip), rng);
    Tape tape;
    const Tensor2 a = enc.forward(tape, tape.constant(Tensor2(16, 8))).value();
    const Tensor2 b = enc.forward(tape, tape.constant(Tensor2(16, 8))).value();
    EXPECT_EQ(a, b);
    // Edge extension keeps a constant input constant across time.
    for (std::size_t t = 1; t < a.rows(); ++t)
        for (std::size_t c = 0; c < a.cols(); ++c) EXPECT_EQ(a(t, c), a(0, c));
}

TEST(Encoder, GradCheckOnOneWord) {
    std::mt19937_64 rng(5);
    for (Modality m : {Modality::sign, Modality::lip, Modality::audio}) {
        ParameterSet ps;
        EncoderConfig cfg = default_encoder_config(m);
        cfg.out_dims = 4;
        Encoder enc(ps, "enc", cfg, rng);
        const Tensor2 x = random_frames(m == Modality::audio ? 32 : 8, cfg.in_dims, rng);
        const Tensor2 w = random_frames(enc.output_frames(x.rows()), 4, rng);
        const GradReport r = grad_check(ps, [&](Tape& tape) { return ops::weighted_sum(enc.forward(tape, tape.constant(x)), w); });
        EXPECT_TRUE(r.passed) << corpus::to_string(m) << " worst " << r.worst_param << " rel " << r.max_rel_err;
    }
}

TEST(LengthAdapter, OutputLengthFormula) {
    ParameterSet ps;
    std::mt19937_64 rng(6);
    LengthAdapter a(ps, "adapt", 3, 4, rng);
    Tape tape;
    EXPECT_EQ(a.forward(tape, tape.constant(Tensor2(80, 3))).value().rows(), 20u);
    EXPECT_EQ(a.forward(tape, tape.constant(Tensor2(83, 3))).value().rows(), 20u);
    EXPECT_THROW(a.forward(tape, tape.constant(Tensor2(3, 3))), LengthError);
}

TEST(Alignment, EveryModalityLandsOnFourTokensPerWord) {
    Model model(ModelConfig{}, 7);
    std::mt19937_64 rng(7);
    for (std::size_t len = 1; len <= 8; ++len) {
        const auto text = random_text(rng, len);
        const corpus::Sample signed_sample = render(text, corpus::CorpusTag::signing, rng());
        const corpus::Sample spoken_sample = render(text, corpus::CorpusTag::speech, rng());
        Tape tape(false);
        EXPECT_EQ(model.aligned(tape, Modality::sign, signed_sample.stream(Modality::sign)->frames).value().rows(), 4 * len);
        EXPECT_EQ(model.aligned(tape, Modality::lip, spoken_sample.stream(Modality::lip)->frames).value().rows(), 4 * len);
        EXPECT_EQ(model.aligned(tape, Modality::audio, spoken_sample.stream(Modality::audio)->frames).value().rows(),
                  4 * len);
    }
}

TEST(Fuse, MaskPatternsPerTask) {
    EXPECT_EQ(task_mask(TaskKind::slt), (ModalityMask{true, true, false}));
    EXPECT_EQ(task_mask(TaskKind::vsr), (ModalityMask{false, true, false}));
    EXPECT_EQ(task_mask(TaskKind::asr), (ModalityMask{false, false, true}));
    EXPECT_EQ(task_mask(TaskKind::avsr), (ModalityMask{false, true, true}));
    EXPECT_EQ(parse_task("avsr"), TaskKind::avsr);
    EXPECT_EQ(to_string(TaskKind::vsr), "VSR");
    EXPECT_THROW(parse_task("mt"), ConfigError);
}

TEST(Fuse, LiveBlocksCopiedAndMaskedBlocksZero) {
    std::mt19937_64 rng(8);
    Tape tape;
    AlignedFeatures f;
    const Tensor2 sign = random_frames(4, 2, rng);
    const Tensor2 lip = random_frames(4, 3, rng);
    const Tensor2 audio = random_frames(4, 1, rng);
    f.sign = tape.constant(sign);
    f.lip = tape.constant(lip);
    f.audio = tape.constant(audio);
    const FusionDims dims{2, 3, 1};
    for (TaskKind task : kAllTasks) {
        const ModalityMask mask = task_mask(task);
        const Tensor2 out = fuse(tape, f, mask, dims).value();
        ASSERT_EQ(out.rows(), 4u);
        ASSERT_EQ(out.cols(), 6u);
        for (std::size_t t = 0; t < 4; ++t) {
            for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(out(t, c), mask.sign ? sign(t, c) : 0.0);
            for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out(t, 2 + c), mask.lip ? lip(t, c) : 0.0);
            EXPECT_EQ(out(t, 5), mask.audio ? audio(t, 0) : 0.0);
        }
    }
}

TEST(Fuse, MissingLiveModalityIsInputError) {
    Tape tape;
    AlignedFeatures f;
    f.lip = tape.constant(Tensor2(4, 16));
    EXPECT_THROW(fuse(tape, f, task_mask(TaskKind::avsr)), InputError);
    EXPECT_NO_THROW(fuse(tape, f, task_mask(TaskKind::vsr)));
}

TEST(Fuse, MismatchedLengthsTrimOrRaise) {
    Tape tape;
    AlignedFeatures f;
    f.lip = tape.constant(Tensor2(5, 16, 1.0));
    f.audio = tape.constant(Tensor2(4, 16, 2.0));
    ::testing::internal::CaptureStderr();
    const Tensor2 out = fuse(tape, f, task_mask(TaskKind::avsr)).value();
    const std::string warning = ::testing::internal::GetCapturedStderr();
    EXPECT_EQ(out.rows(), 4u);
    EXPECT_FALSE(warning.empty());
    EXPECT_THROW(fuse(tape, f, task_mask(TaskKind::avsr), {}, true), InputError);
}

TEST(Mapping, DefaultHiddenWidthAndGradCheck) {
    ParameterSet ps;
    std::mt19937_64 rng(9);
    MappingNetwork map(ps, "map", 48, 64, 0, rng);
    EXPECT_EQ(map.hidden_dims(), 56u);

    ParameterSet small;
    MappingNetwork m2(small, "map", 6, 4, 0, rng);
    const Tensor2 lip = random_frames(4, 2, rng);
    const Tensor2 w = random_frames(4, 4, rng);
    const GradReport r = grad_check(small, [&](Tape& tape) {
        AlignedFeatures g;
        g.lip = tape.constant(lip);
        return ops::weighted_sum(m2.forward(tape, fuse(tape, g, task_mask(TaskKind::vsr), {2, 2, 2})), w);
    });
    EXPECT_TRUE(r.passed) << r.worst_param << " rel " << r.max_rel_err;
}

TEST(Model, ZeroInputGivesConstantTokens) {
    Model model(ModelConfig{}, 10);
    const Tensor2 sign(16, 8);
    const Tensor2 lip(16, 8);
    const Tensor2 audio(64, 12);
    const ModelInput in{&sign, &lip, &audio};
    for (TaskKind task : kAllTasks) {
        const Tensor2 u = model.tokens_value(in, task_mask(task));
        ASSERT_EQ(u.rows(), 8u);
        ASSERT_EQ(u.cols(), 64u);
        for (std::size_t t = 1; t < u.rows(); ++t)
            for (std::size_t c = 0; c < u.cols(); ++c) EXPECT_EQ(u(t, c), u(0, c));
    }
}

TEST(Model, MaskedModalitiesNeverInfluenceTokensOrGradients) {
    Model model(ModelConfig{}, 11);
    std::mt19937_64 rng(11);
    for (TaskKind task : kAllTasks) {
        const ModalityMask mask = task_mask(task);
        const std::size_t len = 3;
        const Tensor2 sign = random_frames(8 * len, 8, rng);
        const Tensor2 lip = random_frames(8 * len, 8, rng);
        const Tensor2 audio = random_frames(32 * len, 12, rng);
        const Tensor2 sign2 = random_frames(8 * len, 8, rng);
        const Tensor2 audio2 = random_frames(32 * len, 12, rng);
        const Tensor2 u = model.tokens_value({&sign, &lip, &audio}, mask);
        const Tensor2 u2 = model.tokens_value({mask.sign ? &sign : &sign2, &lip, mask.audio ? &audio : &audio2}, mask);
        EXPECT_EQ(u, u2) << to_string(task);

        Tape tape;
        DecoderInput din{task, model.tokens(tape, {&sign, &lip, &audio}, mask), random_text(rng, len)};
        Gradients g(model.params());
        tape.backward(model.decoder().sequence_loss(tape, std::span(&din, 1)), g);
        for (std::size_t i = 0; i < model.params().size(); ++i) {
            const std::string& name = model.params()[i].name;
            const bool masked = (name.starts_with("enc.sign") && !mask.sign) ||
                                (name.starts_with("enc.lip") && !mask.lip) ||
                                (name.starts_with("enc.audio") && !mask.audio);
            if (masked) {
                for (double v : g[i].flat()) ASSERT_EQ(v, 0.0) << name;
            }
        }
    }
}

TEST(Model, FullPipelineGradCheck) {
    ModelConfig cfg = tiny_model_config();
    Model model(cfg, 12);
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        Parameter& p = model.params()[i];
        p.trainable = true;
        if (p.name.find(".lora.") != std::string::npos) {
            std::mt19937_64 rng(i);
            fill_normal(p.value, 0.3, rng);
        }
    }
    std::mt19937_64 rng(12);
    const Tensor2 lip = random_frames(8, 8, rng);
    const Tensor2 audio = random_frames(32, 12, rng);
    const std::vector<std::uint16_t> text{3};
    const GradReport r = grad_check(model.params(), [&](Tape& tape) {
        DecoderInput din{TaskKind::avsr, model.tokens(tape, {nullptr, &lip, &audio}, task_mask(TaskKind::avsr)), text};
        return model.decoder().sequence_loss(tape, std::span(&din, 1));
    });
    EXPECT_TRUE(r.passed) << r.worst_param << " rel " << r.max_rel_err << " abs " << r.max_abs_err;
    EXPECT_GT(r.checked, 1000u);
}

TEST(Model, TrainableSetsPerPhase) {
    Model model(ModelConfig{}, 13);
    EXPECT_TRUE(model.decoder().lora_enabled());
    EXPECT_FALSE(model.params().at("dec.head.w").trainable);
    EXPECT_FALSE(model.params().at("dec.l0.attn.q.w").trainable);
    EXPECT_TRUE(model.params().at("dec.pos_embed").trainable);
    EXPECT_TRUE(model.params().at("dec.task_embed").trainable);
    EXPECT_TRUE(model.params().at("dec.l0.lora.q.a").trainable);
    EXPECT_TRUE(model.params().at("enc.audio.proj.w").trainable);
    EXPECT_TRUE(model.params().at("adapt.audio.w").trainable);
    EXPECT_TRUE(model.params().at("map.fc1.w").trainable);
    model.configure_pretraining();
    EXPECT_FALSE(model.decoder().lora_enabled());
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        const Parameter& p = model.params()[i];
        EXPECT_EQ(p.trainable, Model::is_decoder_base(p.name)) << p.name;
    }
}

TEST(Checkpoint, RoundTripIsFloat32Exact) {
    Model a(ModelConfig{}, 14);
    const std::string blob = encode_checkpoint(a.params(), {{"kind", "test"}});
    EXPECT_EQ(blob.substr(0, 5), "UMCK1");
    Model b(ModelConfig{}, 15);
    const auto meta = decode_checkpoint(blob, "blob", b.params());
    EXPECT_EQ(meta.at("kind"), "test");
    round_to_float32(a.params());
    for (std::size_t i = 0; i < a.params().size(); ++i) EXPECT_EQ(a.params()[i].value, b.params()[i].value);
    EXPECT_EQ(encode_checkpoint(b.params(), {{"kind", "test"}}), blob);
}

TEST(Checkpoint, SelectiveLoadTouchesOnlySelectedNames) {
    Model a(ModelConfig{}, 16);
    Model b(ModelConfig{}, 17);
    const Tensor2 b_enc = b.params().at("enc.sign.proj.w").value;
    decode_checkpoint(encode_checkpoint(a.params(), {}), "blob", b.params(), Model::is_decoder_base);
    EXPECT_EQ(b.params().at("enc.sign.proj.w").value, b_enc);
    Tensor2 expected = a.params().at("dec.head.w").value;
    for (double& v : expected.flat()) v = static_cast<float>(v);
    EXPECT_EQ(b.params().at("dec.head.w").value, expected);
}

TEST(Checkpoint, MalformedInputsAreIoErrors) {
    Model a(ModelConfig{}, 18);
    const std::string blob = encode_checkpoint(a.params(), {});
    Model b(ModelConfig{}, 18);
    std::string bad_magic = blob;
    bad_magic[1] = 'X';
    EXPECT_THROW(decode_checkpoint(bad_magic, "blob", b.params()), IoError);
    EXPECT_THROW(decode_checkpoint(blob.substr(0, blob.size() / 2), "blob", b.params()), IoError);
    // The vocabulary table starts right after magic and version; corrupt a name.
    std::string bad_vocab = blob;
    bad_vocab[5 + 2 + 2 + 2] ^= 0x20;
    EXPECT_THROW(decode_checkpoint(bad_vocab, "blob", b.params()), IoError);

    ModelConfig wide;
    wide.decoder.d_model = 32;
    wide.decoder.ffn = 64;
    Model c(wide, 18);
    EXPECT_THROW(decode_checkpoint(blob, "blob", c.params()), IoError);
    EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.umck", b.params()), IoError);
}

TEST(Checkpoint, ConfigJsonRoundTrip) {
    ModelConfig c = tiny_model_config();
    nlohmann::json j;
    to_json(j, c);
    ModelConfig back;
    model_config_from_json(j, back);
    nlohmann::json j2;
    to_json(j2, back);
    EXPECT_EQ(j, j2);
}
