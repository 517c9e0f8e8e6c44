#pragma once

#include <random>
#include <string>

#include "unifuse/autodiff.hpp"
#include "unifuse/synthcorpus.hpp"

namespace unifuse {

/// Toy frame encoder: two k=3 conv blocks over edge-extended input (length
/// preserving) and a k=1 projection. The audio variant first halves the frame
/// rate with a k=2, s=2 conv.
struct EncoderConfig {
    corpus::Modality modality = corpus::Modality::sign;
    std::size_t in_dims = 8;
    std::size_t out_dims = 16;
    std::size_t kernel = 3;
    bool downsample = false;
    std::size_t min_frames = 8;
};

EncoderConfig default_encoder_config(corpus::Modality modality);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike.
void init_uniform_fan_in(Parameter& p, std::size_t fan_in, std::mt19937_64& rng);

class Encoder {
public:
    /// Registers parameters named `<prefix>.<layer>.{w,b}`.
    Encoder(ParameterSet& params, const std::string& prefix, const EncoderConfig& config, std::mt19937_64& rng);

    /// Throws InputError for a stream of another modality and LengthError for
    /// too few (or, with downsampling, an odd number of) frames.
    Var forward(Tape& tape, const corpus::Stream& stream) const;
    Var forward(Tape& tape, Var frames) const;

    [[nodiscard]] const EncoderConfig& config() const noexcept { return config_; }
    /// Output frames for `raw_frames` input frames.
    [[nodiscard]] std::size_t output_frames(std::size_t raw_frames) const noexcept {
        return config_.downsample ? raw_frames / 2 : raw_frames;
    }

private:
    EncoderConfig config_;
    std::string prefix_;
    Parameter* down_w_ = nullptr;
    Parameter* down_b_ = nullptr;
    Parameter* conv1_w_ = nullptr;
    Parameter* conv1_b_ = nullptr;
    Parameter* conv2_w_ = nullptr;
    Parameter* conv2_b_ = nullptr;
    Parameter* proj_w_ = nullptr;
    Parameter* proj_b_ = nullptr;
};

}  // namespace unifuse
