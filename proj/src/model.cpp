#include "unifuse/model.hpp"

#include <cstring>
#include <set>

#include "unifuse/binio.hpp"
#include "unifuse/error.hpp"
#include "unifuse/jsonutil.hpp"
#include "unifuse/random.hpp"

namespace unifuse {

namespace {

constexpr std::string_view kCheckpointMagic = "UMCK1";
constexpr std::uint16_t kCheckpointVersion = 1;

}  // namespace

ModelInput input_of(const corpus::Sample& sample) {
    ModelInput in;
    if (const auto* s = sample.stream(corpus::Modality::sign)) in.sign = &s->frames;
    if (const auto* s = sample.stream(corpus::Modality::lip)) in.lip = &s->frames;
    if (const auto* s = sample.stream(corpus::Modality::audio)) in.audio = &s->frames;
    return in;
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    std::mt19937_64 rng(derive_seed(seed, {0x30de1}));
    using corpus::Modality;
    if (config.sign.modality != Modality::sign || config.lip.modality != Modality::lip ||
        config.audio.modality != Modality::audio) {
        throw ConfigError("encoders: modality fields do not match their slots");
    }
    sign_ = std::make_unique<Encoder>(params_, "enc.sign", config.sign, rng);
    lip_ = std::make_unique<Encoder>(params_, "enc.lip", config.lip, rng);
    audio_ = std::make_unique<Encoder>(params_, "enc.audio", config.audio, rng);
    adapt_sign_ = std::make_unique<LengthAdapter>(params_, "adapt.sign", config.sign.out_dims, config.sign_stride, rng);
    adapt_lip_ = std::make_unique<LengthAdapter>(params_, "adapt.lip", config.lip.out_dims, config.lip_stride, rng);
    adapt_audio_ =
        std::make_unique<LengthAdapter>(params_, "adapt.audio", config.audio.out_dims, config.audio_stride, rng);
    const std::size_t fused = config.sign.out_dims + config.lip.out_dims + config.audio.out_dims;
    mapping_ = std::make_unique<MappingNetwork>(params_, "map", fused, config.decoder.d_model, config.mapping_hidden, rng);
    decoder_ = std::make_unique<Decoder>(params_, config.decoder, rng);
    configure_finetuning();
}

const Encoder& Model::encoder(corpus::Modality m) const {
    switch (m) {
        case corpus::Modality::sign: return *sign_;
        case corpus::Modality::lip: return *lip_;
        case corpus::Modality::audio: return *audio_;
    }
    throw ConfigError("model: unknown modality");
}

const LengthAdapter& Model::adapter(corpus::Modality m) const {
    switch (m) {
        case corpus::Modality::sign: return *adapt_sign_;
        case corpus::Modality::lip: return *adapt_lip_;
        case corpus::Modality::audio: return *adapt_audio_;
    }
    throw ConfigError("model: unknown modality");
}

Var Model::aligned(Tape& tape, corpus::Modality m, const Tensor2& raw) const {
    return adapter(m).forward(tape, encoder(m).forward(tape, tape.constant(raw)));
}

Var Model::fused(Tape& tape, const ModelInput& input, ModalityMask mask) const {
    using corpus::Modality;
    AlignedFeatures f;
    if (mask.sign && input.sign != nullptr) f.sign = aligned(tape, Modality::sign, *input.sign);
    if (mask.lip && input.lip != nullptr) f.lip = aligned(tape, Modality::lip, *input.lip);
    if (mask.audio && input.audio != nullptr) f.audio = aligned(tape, Modality::audio, *input.audio);
    const FusionDims dims{config_.sign.out_dims, config_.lip.out_dims, config_.audio.out_dims};
    return fuse(tape, f, mask, dims);
}

Var Model::tokens(Tape& tape, const ModelInput& input, ModalityMask mask) const {
    return mapping_->forward(tape, fused(tape, input, mask));
}

Tensor2 Model::tokens_value(const ModelInput& input, ModalityMask mask) const {
    Tape tape(false);
    return tokens(tape, input, mask).value();
}

bool Model::is_decoder_base(std::string_view name) noexcept {
    return name.starts_with("dec.") && name.find(".lora.") == std::string_view::npos && name != "dec.task_embed";
}

void Model::configure_pretraining() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].trainable = is_decoder_base(params_[i].name);
    decoder_->set_lora_enabled(false);
}

void Model::configure_finetuning() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const std::string& n = params_[i].name;
        params_[i].trainable = !is_decoder_base(n) || n == "dec.pos_embed";
    }
    decoder_->set_lora_enabled(true);
}

// ------------------------------------------------------------------ config

namespace {

nlohmann::json encoder_json(const EncoderConfig& e) {
    return {{"in_dims", e.in_dims}, {"out_dims", e.out_dims}, {"kernel", e.kernel}, {"downsample", e.downsample},
            {"min_frames", e.min_frames}};
}

void encoder_from(const nlohmann::json& j, const std::string& section, EncoderConfig& e) {
    jsonutil::check_object(j, section, {"in_dims", "out_dims", "kernel", "downsample", "min_frames"});
    jsonutil::read(j, section, "in_dims", e.in_dims);
    jsonutil::read(j, section, "out_dims", e.out_dims);
    jsonutil::read(j, section, "kernel", e.kernel);
    jsonutil::read(j, section, "downsample", e.downsample);
    jsonutil::read(j, section, "min_frames", e.min_frames);
    if (e.in_dims == 0 || e.out_dims == 0) throw ConfigError(section + ": dims must be positive");
    if (e.kernel == 0 || e.kernel % 2 == 0) throw ConfigError(section + ".kernel: must be odd and positive");
}

}  // namespace

void to_json(nlohmann::json& j, const ModelConfig& c) {
    const DecoderConfig& d = c.decoder;
    j = nlohmann::json{
        {"encoders", {{"sign", encoder_json(c.sign)}, {"lip", encoder_json(c.lip)}, {"audio", encoder_json(c.audio)}}},
        {"fusion",
         {{"sign_stride", c.sign_stride},
          {"lip_stride", c.lip_stride},
          {"audio_stride", c.audio_stride},
          {"mapping_hidden", c.mapping_hidden}}},
        {"decoder",
         {{"d_model", d.d_model},
          {"layers", d.layers},
          {"heads", d.heads},
          {"ffn", d.ffn},
          {"max_positions", d.max_positions},
          {"lora_rank", d.lora_rank},
          {"lora_alpha", d.lora_alpha},
          {"max_token_rows", d.max_token_rows}}},
    };
}

void model_config_from_json(const nlohmann::json& doc, ModelConfig& c) {
    if (doc.contains("encoders")) {
        const auto& e = doc["encoders"];
        jsonutil::check_object(e, "encoders", {"sign", "lip", "audio"});
        if (e.contains("sign")) encoder_from(e["sign"], "encoders.sign", c.sign);
        if (e.contains("lip")) encoder_from(e["lip"], "encoders.lip", c.lip);
        if (e.contains("audio")) encoder_from(e["audio"], "encoders.audio", c.audio);
    }
    if (doc.contains("fusion")) {
        const auto& f = doc["fusion"];
        jsonutil::check_object(f, "fusion", {"sign_stride", "lip_stride", "audio_stride", "mapping_hidden"});
        jsonutil::read(f, "fusion", "sign_stride", c.sign_stride);
        jsonutil::read(f, "fusion", "lip_stride", c.lip_stride);
        jsonutil::read(f, "fusion", "audio_stride", c.audio_stride);
        jsonutil::read(f, "fusion", "mapping_hidden", c.mapping_hidden);
        if (c.sign_stride == 0 || c.lip_stride == 0 || c.audio_stride == 0) {
            throw ConfigError("fusion: strides must be positive");
        }
    }
    if (doc.contains("decoder")) {
        const auto& d = doc["decoder"];
        constexpr std::string_view s = "decoder";
        jsonutil::check_object(d, s,
                               {"d_model", "layers", "heads", "ffn", "max_positions", "lora_rank", "lora_alpha",
                                "max_token_rows"});
        jsonutil::read(d, s, "d_model", c.decoder.d_model);
        jsonutil::read(d, s, "layers", c.decoder.layers);
        jsonutil::read(d, s, "heads", c.decoder.heads);
        jsonutil::read(d, s, "ffn", c.decoder.ffn);
        jsonutil::read(d, s, "max_positions", c.decoder.max_positions);
        jsonutil::read(d, s, "lora_rank", c.decoder.lora_rank);
        jsonutil::read(d, s, "lora_alpha", c.decoder.lora_alpha);
        jsonutil::read(d, s, "max_token_rows", c.decoder.max_token_rows);
        if (c.decoder.heads == 0 || c.decoder.d_model % c.decoder.heads != 0) {
            throw ConfigError("decoder.heads: d_model must be divisible by heads");
        }
        if (c.decoder.lora_rank == 0 || c.decoder.lora_rank > c.decoder.d_model) {
            throw ConfigError("decoder.lora_rank: must be in [1, d_model]");
        }
    }
}

// -------------------------------------------------------------- checkpoints

std::string encode_checkpoint(const ParameterSet& params, const nlohmann::json& meta) {
    binio::Writer w;
    w.bytes(kCheckpointMagic);
    w.put<std::uint16_t>(kCheckpointVersion);
    const std::vector<std::string> table = vocab::table();
    w.put<std::uint16_t>(static_cast<std::uint16_t>(table.size()));
    for (const std::string& t : table) w.str16(t);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Parameter& p = params[i];
        w.str16(p.name);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.rows()));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.cols()));
        for (double v : p.value.flat()) w.put<float>(static_cast<float>(v));
    }
    const std::string trailer = meta.dump();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(trailer.size()));
    w.bytes(trailer);
    return w.take();
}

void save_checkpoint(const std::string& path, const ParameterSet& params, const nlohmann::json& meta) {
    binio::write_file(path, encode_checkpoint(params, meta));
}

nlohmann::json decode_checkpoint(std::string_view bytes, const std::string& what, ParameterSet& params,
                                 const std::function<bool(std::string_view)>& select) {
    binio::Reader r(bytes, what);
    if (r.bytes(kCheckpointMagic.size()) != kCheckpointMagic) throw IoError(what + ": not a UMCK1 checkpoint");
    const auto version = r.get<std::uint16_t>();
    if (version != kCheckpointVersion) throw IoError(what + ": unsupported checkpoint version " + std::to_string(version));
    const auto vocab_size = r.get<std::uint16_t>();
    std::vector<std::string> table;
    for (std::uint16_t i = 0; i < vocab_size; ++i) table.push_back(r.str16());
    if (table != vocab::table()) throw IoError(what + ": vocabulary table differs from this build");
    const auto sections = r.get<std::uint32_t>();
    std::set<std::string> loaded;
    for (std::uint32_t s = 0; s < sections; ++s) {
        const std::string name = r.str16();
        const auto rows = r.get<std::uint32_t>();
        const auto cols = r.get<std::uint32_t>();
        const std::string_view raw = r.bytes(static_cast<std::size_t>(rows) * cols * sizeof(float));
        if (select && !select(name)) continue;
        Parameter* p = params.find(name);
        if (p == nullptr) throw IoError(what + ": parameter " + name + " is not part of this model");
        if (p->value.rows() != rows || p->value.cols() != cols) {
            throw IoError(what + ": parameter " + name + " has shape " + std::to_string(rows) + "x" +
                          std::to_string(cols) + ", model expects " + p->value.shape_string());
        }
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            float f;
            std::memcpy(&f, raw.data() + i * sizeof(float), sizeof(float));
            p->value.flat()[i] = f;
        }
        loaded.insert(name);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::string& n = params[i].name;
        if ((!select || select(n)) && !loaded.contains(n)) throw IoError(what + ": missing parameter " + n);
    }
    const auto len = r.get<std::uint32_t>();
    const std::string_view trailer = r.bytes(len);
    try {
        return nlohmann::json::parse(trailer);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(what + ": bad metadata trailer: " + e.what());
    }
}

nlohmann::json load_checkpoint(const std::string& path, ParameterSet& params,
                               const std::function<bool(std::string_view)>& select) {
    return decode_checkpoint(binio::read_file(path), path, params, select);
}

void round_to_float32(ParameterSet& params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (double& v : params[i].value.flat()) v = static_cast<double>(static_cast<float>(v));
    }
}

}  // namespace unifuse
