#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>

#include "unifuse/autodiff.hpp"
#include "unifuse/synthcorpus.hpp"

namespace unifuse {

enum class TaskKind : std::uint8_t { slt = 0, vsr = 1, asr = 2, avsr = 3 };
inline constexpr std::array<TaskKind, 4> kAllTasks = {TaskKind::slt, TaskKind::vsr, TaskKind::asr, TaskKind::avsr};

/// Upper-case name ("SLT", "VSR", ...).
std::string_view to_string(TaskKind task) noexcept;
/// Case-insensitive; throws ConfigError on an unknown name.
TaskKind parse_task(std::string_view name);

/// Which modality blocks of the fused features are live.
struct ModalityMask {
    bool sign = false;
    bool lip = false;
    bool audio = false;

    friend bool operator==(const ModalityMask&, const ModalityMask&) = default;
};

/// SLT = (s, v, 0), VSR = (0, v, 0), ASR = (0, 0, a), AVSR = (0, v, a).
ModalityMask task_mask(TaskKind task) noexcept;

/// Strided conv with kernel = stride that brings one modality to the shared
/// token rate. Dimension preserving.
class LengthAdapter {
public:
    LengthAdapter(ParameterSet& params, const std::string& prefix, std::size_t dims, std::size_t stride,
                  std::mt19937_64& rng);

    /// T_out = floor((T - k) / s) + 1; throws LengthError when T < k.
    Var forward(Tape& tape, Var features) const;
    [[nodiscard]] std::size_t stride() const noexcept { return stride_; }

private:
    std::string prefix_;
    std::size_t stride_;
    Parameter* w_ = nullptr;
    Parameter* b_ = nullptr;
};

struct AlignedFeatures {
    std::optional<Var> sign;
    std::optional<Var> lip;
    std::optional<Var> audio;
};

struct FusionDims {
    std::size_t sign = 16;
    std::size_t lip = 16;
    std::size_t audio = 16;
    [[nodiscard]] std::size_t total() const noexcept { return sign + lip + audio; }
};

/// Concatenates (sign, lip, audio) blocks along channels with masked blocks
/// replaced by exact zeros. A live block whose features are absent raises
/// InputError. Live blocks of different lengths are trimmed to the shortest
/// with a warning on stderr, unless `strict_lengths` is set, in which case
/// InputError is raised.
Var fuse(Tape& tape, const AlignedFeatures& features, ModalityMask mask, const FusionDims& dims = {},
         bool strict_lengths = false);

/// Two affine layers around one GELU, shared by every task.
class MappingNetwork {
public:
    /// hidden = 0 selects (in + out) / 2.
    MappingNetwork(ParameterSet& params, const std::string& prefix, std::size_t in, std::size_t out,
                   std::size_t hidden, std::mt19937_64& rng);

    Var forward(Tape& tape, Var fused) const;
    [[nodiscard]] std::size_t in_dims() const noexcept { return in_; }
    [[nodiscard]] std::size_t out_dims() const noexcept { return out_; }
    [[nodiscard]] std::size_t hidden_dims() const noexcept { return hidden_; }

private:
    std::size_t in_;
    std::size_t out_;
    std::size_t hidden_;
    Parameter* w1_ = nullptr;
    Parameter* b1_ = nullptr;
    Parameter* w2_ = nullptr;
    Parameter* b2_ = nullptr;
};

}  // namespace unifuse
