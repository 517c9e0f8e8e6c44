#include "unifuse/encoders.hpp"

#include <cmath>

#include "unifuse/error.hpp"

namespace unifuse {

EncoderConfig default_encoder_config(corpus::Modality modality) {
    EncoderConfig c;
    c.modality = modality;
    c.in_dims = modality == corpus::Modality::audio ? 12 : 8;
    c.downsample = modality == corpus::Modality::audio;
    return c;
}

void init_uniform_fan_in(Parameter& p, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : p.value.flat()) v = u(rng);
}

Encoder::Encoder(ParameterSet& params, const std::string& prefix, const EncoderConfig& config, std::mt19937_64& rng)
    : config_(config), prefix_(prefix) {
    if (config.in_dims == 0 || config.out_dims == 0 || config.kernel == 0 || config.kernel % 2 == 0) {
        throw ConfigError(prefix + ": need positive dims and an odd kernel");
    }
    const std::size_t d = config.out_dims;
    auto layer = [&](const std::string& name, std::size_t taps, std::size_t in, Parameter*& w, Parameter*& b) {
        w = &params.add(prefix + "." + name + ".w", taps * in, d);
        b = &params.add(prefix + "." + name + ".b", 1, d);
        init_uniform_fan_in(*w, taps * in, rng);
        init_uniform_fan_in(*b, taps * in, rng);
    };
    std::size_t in = config.in_dims;
    if (config.downsample) {
        layer("down", 2, in, down_w_, down_b_);
        in = d;
    }
    layer("conv1", config.kernel, in, conv1_w_, conv1_b_);
    layer("conv2", config.kernel, d, conv2_w_, conv2_b_);
    layer("proj", 1, d, proj_w_, proj_b_);
}

Var Encoder::forward(Tape& tape, const corpus::Stream& stream) const {
    if (stream.modality != config_.modality) {
        throw InputError(prefix_ + ": expected a " + std::string(corpus::to_string(config_.modality)) +
                         " stream, got " + std::string(corpus::to_string(stream.modality)));
    }
    return forward(tape, tape.constant(stream.frames));
}

Var Encoder::forward(Tape& tape, Var frames) const {
    const std::size_t t = frames.rows();
    const std::string what(corpus::to_string(config_.modality));
    if (frames.cols() != config_.in_dims) {
        throw DimensionError(prefix_ + ": " + what + " frames have " + std::to_string(frames.cols()) +
                             " channels, expected " + std::to_string(config_.in_dims));
    }
    if (t < config_.min_frames) {
        throw LengthError(prefix_ + ": " + what + " input has " + std::to_string(t) + " frames, minimum is " +
                          std::to_string(config_.min_frames));
    }
    if (config_.downsample && t % 2 != 0) {
        throw LengthError(prefix_ + ": " + what + " input has an odd frame count " + std::to_string(t));
    }
    const std::size_t halo = config_.kernel / 2;
    Var x = frames;
    if (config_.downsample) {
        x = ops::gelu(ops::conv1d(x, tape.param(*down_w_), tape.param(*down_b_), 2, 2, prefix_ + ".down"));
    }
    x = ops::gelu(ops::conv1d(ops::edge_extend(x, halo), tape.param(*conv1_w_), tape.param(*conv1_b_),
                              config_.kernel, 1, prefix_ + ".conv1"));
    x = ops::gelu(ops::conv1d(ops::edge_extend(x, halo), tape.param(*conv2_w_), tape.param(*conv2_b_),
                              config_.kernel, 1, prefix_ + ".conv2"));
    return ops::affine(x, tape.param(*proj_w_), tape.param(*proj_b_));
}

}  // namespace unifuse
