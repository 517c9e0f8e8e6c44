#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>

#include <json.hpp>

#include "unifuse/decoder.hpp"
#include "unifuse/encoders.hpp"
#include "unifuse/fusion.hpp"
#include "unifuse/synthcorpus.hpp"

namespace unifuse {

struct ModelConfig {
    EncoderConfig sign = default_encoder_config(corpus::Modality::sign);
    EncoderConfig lip = default_encoder_config(corpus::Modality::lip);
    EncoderConfig audio = default_encoder_config(corpus::Modality::audio);
    std::size_t sign_stride = 2;
    std::size_t lip_stride = 2;
    std::size_t audio_stride = 4;
    std::size_t mapping_hidden = 0;  ///< 0 = (fused + d_model) / 2
    DecoderConfig decoder;
};

/// Raw frames of one sample; null pointers mean the modality is absent.
struct ModelInput {
    const Tensor2* sign = nullptr;
    const Tensor2* lip = nullptr;
    const Tensor2* audio = nullptr;
};
ModelInput input_of(const corpus::Sample& sample);

/// Encoders, length adapters, mapping network and decoder over one ParameterSet.
/// Parameter names start with "enc.", "adapt.", "map." or "dec.".
class Model {
public:
    Model(const ModelConfig& config, std::uint64_t seed);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    [[nodiscard]] const ModelConfig& config() const noexcept { return config_; }
    [[nodiscard]] ParameterSet& params() noexcept { return params_; }
    [[nodiscard]] const ParameterSet& params() const noexcept { return params_; }
    [[nodiscard]] Decoder& decoder() noexcept { return *decoder_; }
    [[nodiscard]] const Decoder& decoder() const noexcept { return *decoder_; }
    [[nodiscard]] const Encoder& encoder(corpus::Modality m) const;
    [[nodiscard]] const LengthAdapter& adapter(corpus::Modality m) const;
    [[nodiscard]] const MappingNetwork& mapping() const noexcept { return *mapping_; }

    /// Encoder then length adapter for one modality.
    Var aligned(Tape& tape, corpus::Modality m, const Tensor2& raw) const;
    /// Fused features (T x 48). Modalities outside `mask` are never encoded.
    Var fused(Tape& tape, const ModelInput& input, ModalityMask mask) const;
    /// Linguistic tokens U (T x d_model).
    Var tokens(Tape& tape, const ModelInput& input, ModalityMask mask) const;
    /// Same as tokens() on a gradient-free tape.
    Tensor2 tokens_value(const ModelInput& input, ModalityMask mask) const;

    /// Only the decoder base is trainable; adapters are bypassed.
    void configure_pretraining();
    /// Decoder base frozen; encoders, length adapters, mapping network, LoRA
    /// factors, task embeddings and the position table trainable.
    void configure_finetuning();

    /// True for base decoder weights (excludes LoRA factors and task embeddings).
    static bool is_decoder_base(std::string_view name) noexcept;

private:
    ModelConfig config_;
    ParameterSet params_;
    std::unique_ptr<Encoder> sign_;
    std::unique_ptr<Encoder> lip_;
    std::unique_ptr<Encoder> audio_;
    std::unique_ptr<LengthAdapter> adapt_sign_;
    std::unique_ptr<LengthAdapter> adapt_lip_;
    std::unique_ptr<LengthAdapter> adapt_audio_;
    std::unique_ptr<MappingNetwork> mapping_;
    std::unique_ptr<Decoder> decoder_;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
/// Reads the "encoders", "fusion" and "decoder" sections of a config document.
void model_config_from_json(const nlohmann::json& doc, ModelConfig& c);

/// Checkpoint blob: magic "UMCK1", u16 version, vocabulary table, named float32
/// parameter sections, then a JSON metadata trailer.
std::string encode_checkpoint(const ParameterSet& params, const nlohmann::json& meta);
void save_checkpoint(const std::string& path, const ParameterSet& params, const nlohmann::json& meta);

/// Loads sections whose names pass `select` (all when empty) into `params`.
/// Throws IoError on a malformed file, a vocabulary mismatch, a missing
/// selected parameter or a shape mismatch. Returns the metadata.
nlohmann::json load_checkpoint(const std::string& path, ParameterSet& params,
                               const std::function<bool(std::string_view)>& select = {});
nlohmann::json decode_checkpoint(std::string_view bytes, const std::string& what, ParameterSet& params,
                                 const std::function<bool(std::string_view)>& select = {});

/// Rounds every parameter to float32, matching what a checkpoint round trip
/// would produce.
void round_to_float32(ParameterSet& params);

}  // namespace unifuse
