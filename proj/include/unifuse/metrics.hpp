#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <span>
#include <string>
#include <vector>

namespace unifuse::metrics {

using Sentence = std::vector<std::uint16_t>;

/// Word-level Levenshtein distance (substitutions + insertions + deletions).
std::size_t edit_distance(std::span<const std::uint16_t> ref, std::span<const std::uint16_t> hyp);

/// Corpus-pooled word error rate: total edit operations over total reference
/// words. Throws ConfigError on size mismatch or an empty reference.
double wer(std::span<const Sentence> refs, std::span<const Sentence> hyps);

/// Corpus BLEU-4 with clipped n-gram counts, uniform weights and the standard
/// brevity penalty. No smoothing: any zero pooled precision yields 0.
double bleu4(std::span<const Sentence> refs, std::span<const Sentence> hyps);

std::size_t lcs_length(std::span<const std::uint16_t> a, std::span<const std::uint16_t> b);

/// Mean per-sentence ROUGE-L F1 (beta = 1).
double rouge_l(std::span<const Sentence> refs, std::span<const Sentence> hyps);

/// Word-aligned (ref, hyp) substitution pairs from one minimum-edit alignment;
/// on ties the backtrace prefers the diagonal, then deletion.
std::vector<std::pair<std::uint16_t, std::uint16_t>> substitutions(std::span<const std::uint16_t> ref,
                                                                   std::span<const std::uint16_t> hyp);

/// Fraction of reference occurrences of paired words that are substituted by
/// their partner. Returns 0 when no reference word belongs to a pair.
double pair_confusion_rate(std::span<const Sentence> refs, std::span<const Sentence> hyps,
                           std::span<const std::array<std::uint16_t, 2>> pairs);

struct ScoreReport {
    std::string task;
    std::string metric;
    double value = 0.0;
    std::size_t samples = 0;
};

}  // namespace unifuse::metrics
