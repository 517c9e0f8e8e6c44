#include "unifuse/fusion.hpp"

#include <algorithm>
#include <cctype>
#include <iostream>
#include <vector>

#include "unifuse/encoders.hpp"
#include "unifuse/error.hpp"

namespace unifuse {

std::string_view to_string(TaskKind task) noexcept {
    switch (task) {
        case TaskKind::slt: return "SLT";
        case TaskKind::vsr: return "VSR";
        case TaskKind::asr: return "ASR";
        case TaskKind::avsr: return "AVSR";
    }
    return "?";
}

TaskKind parse_task(std::string_view name) {
    std::string upper(name);
    std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
    for (TaskKind t : kAllTasks) {
        if (upper == to_string(t)) return t;
    }
    throw ConfigError("unknown task '" + std::string(name) + "' (expected slt, vsr, asr or avsr)");
}

ModalityMask task_mask(TaskKind task) noexcept {
    switch (task) {
        case TaskKind::slt: return {true, true, false};
        case TaskKind::vsr: return {false, true, false};
        case TaskKind::asr: return {false, false, true};
        case TaskKind::avsr: return {false, true, true};
    }
    return {};
}

LengthAdapter::LengthAdapter(ParameterSet& params, const std::string& prefix, std::size_t dims, std::size_t stride,
                             std::mt19937_64& rng)
    : prefix_(prefix), stride_(stride) {
    if (stride == 0 || dims == 0) throw ConfigError(prefix + ": stride and dims must be positive");
    w_ = &params.add(prefix + ".w", stride * dims, dims);
    b_ = &params.add(prefix + ".b", 1, dims);
    init_uniform_fan_in(*w_, stride * dims, rng);
    init_uniform_fan_in(*b_, stride * dims, rng);
}

Var LengthAdapter::forward(Tape& tape, Var features) const {
    return ops::conv1d(features, tape.param(*w_), tape.param(*b_), stride_, stride_, prefix_);
}

Var fuse(Tape& tape, const AlignedFeatures& features, ModalityMask mask, const FusionDims& dims,
         bool strict_lengths) {
    struct Block {
        const char* name;
        bool live;
        const std::optional<Var>* value;
        std::size_t width;
    };
    const std::array<Block, 3> blocks = {{{"sign", mask.sign, &features.sign, dims.sign},
                                          {"lip", mask.lip, &features.lip, dims.lip},
                                          {"audio", mask.audio, &features.audio, dims.audio}}};
    std::size_t t = 0;
    std::size_t t_max = 0;
    bool any = false;
    for (const Block& b : blocks) {
        if (!b.live) continue;
        if (!b.value->has_value()) throw InputError(std::string("fuse: task needs ") + b.name + " features");
        const Var& v = **b.value;
        if (v.cols() != b.width) {
            throw DimensionError(std::string("fuse: ") + b.name + " features have " + std::to_string(v.cols()) +
                                 " channels, expected " + std::to_string(b.width));
        }
        t = any ? std::min(t, v.rows()) : v.rows();
        t_max = std::max(t_max, v.rows());
        any = true;
    }
    if (!any) throw InputError("fuse: mask selects no modality");
    if (t != t_max) {
        if (strict_lengths) {
            throw InputError("fuse: aligned lengths disagree (" + std::to_string(t) + " vs " + std::to_string(t_max) +
                             ")");
        }
        std::cerr << "warning: fuse: aligned lengths disagree, trimming to " << t << " rows\n";
    }
    std::vector<Var> parts;
    for (const Block& b : blocks) {
        if (!b.live) {
            parts.push_back(tape.constant(Tensor2(t, b.width)));
            continue;
        }
        const Var& v = **b.value;
        parts.push_back(v.rows() == t ? v : ops::slice_rows(v, 0, t));
    }
    return ops::concat_cols(parts);
}

MappingNetwork::MappingNetwork(ParameterSet& params, const std::string& prefix, std::size_t in, std::size_t out,
                               std::size_t hidden, std::mt19937_64& rng)
    : in_(in), out_(out), hidden_(hidden == 0 ? (in + out) / 2 : hidden) {
    if (in == 0 || out == 0) throw ConfigError(prefix + ": dims must be positive");
    w1_ = &params.add(prefix + ".fc1.w", in_, hidden_);
    b1_ = &params.add(prefix + ".fc1.b", 1, hidden_);
    w2_ = &params.add(prefix + ".fc2.w", hidden_, out_);
    b2_ = &params.add(prefix + ".fc2.b", 1, out_);
    init_uniform_fan_in(*w1_, in_, rng);
    init_uniform_fan_in(*b1_, in_, rng);
    init_uniform_fan_in(*w2_, hidden_, rng);
    init_uniform_fan_in(*b2_, hidden_, rng);
}

Var MappingNetwork::forward(Tape& tape, Var fused) const {
    if (fused.cols() != in_) {
        throw DimensionError("mapping: input has " + std::to_string(fused.cols()) + " columns, expected " +
                             std::to_string(in_));
    }
    const Var h = ops::gelu(ops::affine(fused, tape.param(*w1_), tape.param(*b1_)));
    return ops::affine(h, tape.param(*w2_), tape.param(*b2_));
}

}  // namespace unifuse
