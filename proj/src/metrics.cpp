#include "unifuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>

#include "unifuse/error.hpp"

namespace unifuse::metrics {

namespace {

void check_pairing(std::span<const Sentence> refs, std::span<const Sentence> hyps, const char* metric) {
    if (refs.size() != hyps.size() || refs.empty()) {
        throw ConfigError(std::string(metric) + ": need equal, non-zero numbers of references and hypotheses (got " +
                          std::to_string(refs.size()) + " vs " + std::to_string(hyps.size()) + ")");
    }
}

using Ngram = std::vector<std::uint16_t>;

std::map<Ngram, std::size_t> count_ngrams(const Sentence& s, std::size_t n) {
    std::map<Ngram, std::size_t> counts;
    if (s.size() < n) return counts;
    for (std::size_t i = 0; i + n <= s.size(); ++i) {
        ++counts[Ngram(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return counts;
}

}  // namespace

std::size_t edit_distance(std::span<const std::uint16_t> ref, std::span<const std::uint16_t> hyp) {
    // Single-row DP over the hypothesis.
    std::vector<std::size_t> row(hyp.size() + 1);
    for (std::size_t j = 0; j <= hyp.size(); ++j) row[j] = j;
    for (std::size_t i = 1; i <= ref.size(); ++i) {
        std::size_t diag = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= hyp.size(); ++j) {
            const std::size_t up = row[j];
            const std::size_t sub = diag + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            row[j] = std::min({sub, up + 1, row[j - 1] + 1});
            diag = up;
        }
    }
    return row[hyp.size()];
}

double wer(std::span<const Sentence> refs, std::span<const Sentence> hyps) {
    check_pairing(refs, hyps, "wer");
    std::size_t errors = 0;
    std::size_t words = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        if (refs[i].empty()) throw ConfigError("wer: reference " + std::to_string(i) + " is empty");
        errors += edit_distance(refs[i], hyps[i]);
        words += refs[i].size();
    }
    return static_cast<double>(errors) / static_cast<double>(words);
}

double bleu4(std::span<const Sentence> refs, std::span<const Sentence> hyps) {
    check_pairing(refs, hyps, "bleu4");
    std::size_t hyp_len = 0;
    std::size_t ref_len = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        hyp_len += hyps[i].size();
        ref_len += refs[i].size();
    }
    if (hyp_len == 0) {
        std::cerr << "warning: bleu4 on an empty hypothesis corpus, returning 0\n";
        return 0.0;
    }
    double log_precision_sum = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        std::size_t matched = 0;
        std::size_t total = 0;
        for (std::size_t i = 0; i < refs.size(); ++i) {
            const auto hyp_counts = count_ngrams(hyps[i], n);
            const auto ref_counts = count_ngrams(refs[i], n);
            for (const auto& [gram, count] : hyp_counts) {
                total += count;
                const auto it = ref_counts.find(gram);
                if (it != ref_counts.end()) matched += std::min(count, it->second);
            }
        }
        if (matched == 0 || total == 0) return 0.0;
        log_precision_sum += std::log(static_cast<double>(matched) / static_cast<double>(total));
    }
    const double brevity =
        hyp_len < ref_len ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len)) : 1.0;
    return brevity * std::exp(log_precision_sum / 4.0);
}

std::size_t lcs_length(std::span<const std::uint16_t> a, std::span<const std::uint16_t> b) {
    std::vector<std::size_t> prev(b.size() + 1, 0);
    std::vector<std::size_t> cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_l(std::span<const Sentence> refs, std::span<const Sentence> hyps) {
    check_pairing(refs, hyps, "rouge_l");
    double sum = 0.0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        if (refs[i].empty()) throw ConfigError("rouge_l: reference " + std::to_string(i) + " is empty");
        if (hyps[i].empty()) continue;
        const double lcs = static_cast<double>(lcs_length(refs[i], hyps[i]));
        if (lcs == 0.0) continue;
        const double precision = lcs / static_cast<double>(hyps[i].size());
        const double recall = lcs / static_cast<double>(refs[i].size());
        sum += 2.0 * precision * recall / (precision + recall);
    }
    return sum / static_cast<double>(refs.size());
}

std::vector<std::pair<std::uint16_t, std::uint16_t>> substitutions(std::span<const std::uint16_t> ref,
                                                                   std::span<const std::uint16_t> hyp) {
    const std::size_t n = ref.size();
    const std::size_t m = hyp.size();
    std::vector<std::size_t> d((n + 1) * (m + 1));
    auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
    for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
    for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j) {
            at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i - 1, j) + 1, at(i, j - 1) + 1});
        }
    }
    std::vector<std::pair<std::uint16_t, std::uint16_t>> out;
    std::size_t i = n;
    std::size_t j = m;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
            if (ref[i - 1] != hyp[j - 1]) out.emplace_back(ref[i - 1], hyp[j - 1]);
            --i;
            --j;
        } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
            --i;
        } else {
            --j;
        }
    }
    std::reverse(out.begin(), out.end());
    return out;
}

double pair_confusion_rate(std::span<const Sentence> refs, std::span<const Sentence> hyps,
                           std::span<const std::array<std::uint16_t, 2>> pairs) {
    check_pairing(refs, hyps, "pair_confusion_rate");
    std::map<std::uint16_t, std::uint16_t> partner;
    for (const auto& p : pairs) {
        partner[p[0]] = p[1];
        partner[p[1]] = p[0];
    }
    std::size_t occurrences = 0;
    std::size_t confusions = 0;
    for (std::size_t k = 0; k < refs.size(); ++k) {
        for (std::uint16_t w : refs[k]) occurrences += partner.contains(w) ? 1 : 0;
        for (const auto& [r, h] : substitutions(refs[k], hyps[k])) {
            auto it = partner.find(r);
            if (it != partner.end() && it->second == h) ++confusions;
        }
    }
    return occurrences == 0 ? 0.0 : static_cast<double>(confusions) / static_cast<double>(occurrences);
}

}  // namespace unifuse::metrics
