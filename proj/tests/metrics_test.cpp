#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <map>
#include <random>

#include "unifuse/error.hpp"
#include "unifuse/metrics.hpp"

using namespace unifuse::metrics;

namespace {

Sentence words(std::initializer_list<char> cs) {
    Sentence s;
    for (char c : cs) s.push_back(static_cast<std::uint16_t>(c));
    return s;
}

// Full-table recursive Levenshtein, memoised.
std::size_t edit_oracle(const Sentence& a, const Sentence& b) {
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
    std::function<std::size_t(std::size_t, std::size_t)> d = [&](std::size_t i, std::size_t j) -> std::size_t {
        if (i == 0) return j;
        if (j == 0) return i;
        auto key = std::make_pair(i, j);
        if (auto it = memo.find(key); it != memo.end()) return it->second;
        const std::size_t best =
            std::min({d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] == b[j - 1] ? 0u : 1u)});
        memo[key] = best;
        return best;
    };
    return d(a.size(), b.size());
}

// Clipped n-gram counting by brute-force pairwise comparison.
double bleu_oracle(const std::vector<Sentence>& refs, const std::vector<Sentence>& hyps) {
    double logp = 0;
    std::size_t c = 0, r = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        c += hyps[i].size();
        r += refs[i].size();
    }
    for (std::size_t n = 1; n <= 4; ++n) {
        std::size_t num = 0, den = 0;
        for (std::size_t i = 0; i < refs.size(); ++i) {
            const auto& h = hyps[i];
            const auto& f = refs[i];
            if (h.size() < n) continue;
            std::vector<bool> used(f.size() >= n ? f.size() - n + 1 : 0, false);
            for (std::size_t p = 0; p + n <= h.size(); ++p) {
                ++den;
                for (std::size_t q = 0; q < used.size(); ++q) {
                    if (used[q]) continue;
                    if (std::equal(h.begin() + p, h.begin() + p + n, f.begin() + q)) {
                        used[q] = true;
                        ++num;
                        break;
                    }
                }
            }
        }
        if (num == 0) return 0.0;
        logp += std::log(static_cast<double>(num) / den) / 4.0;
    }
    const double bp = c < r ? std::exp(1.0 - static_cast<double>(r) / c) : 1.0;
    return bp * std::exp(logp);
}

Sentence random_sentence(std::mt19937_64& rng, std::size_t min_len, std::size_t max_len, std::uint16_t vocab) {
    Sentence s(min_len + rng() % (max_len - min_len + 1));
    for (auto& w : s) w = static_cast<std::uint16_t>(rng() % vocab);
    return s;
}

}  // namespace

TEST(Wer, HandCases) {
    std::vector<Sentence> refs{words({'a', 'b', 'c'})};
    EXPECT_EQ(wer(refs, refs), 0.0);
    std::vector<Sentence> hyps{words({'a', 'x', 'c', 'd'})};
    EXPECT_DOUBLE_EQ(wer(refs, hyps), 2.0 / 3.0);
    std::vector<Sentence> empty{Sentence{}};
    EXPECT_DOUBLE_EQ(wer(refs, empty), 1.0);
}

TEST(Wer, ErrorsOnEmptyReferenceOrMismatch) {
    std::vector<Sentence> refs{Sentence{}};
    std::vector<Sentence> hyps{words({'a'})};
    EXPECT_THROW(wer(refs, hyps), unifuse::ConfigError);
    std::vector<Sentence> two{words({'a'}), words({'b'})};
    EXPECT_THROW(wer(two, hyps), unifuse::ConfigError);
}

TEST(Wer, MatchesRecursiveOracleOnRandomPairs) {
    std::mt19937_64 rng(77);
    for (int i = 0; i < 1000; ++i) {
        const Sentence ref = random_sentence(rng, 1, 10, 6);
        const Sentence hyp = random_sentence(rng, 0, 10, 6);
        ASSERT_EQ(edit_distance(ref, hyp), edit_oracle(ref, hyp)) << "pair " << i;
    }
}

TEST(Wer, CorpusPooling) {
    std::vector<Sentence> refs{words({'a', 'b'}), words({'c', 'd', 'e', 'f'})};
    std::vector<Sentence> hyps{words({'a'}), words({'c', 'd', 'e', 'f'})};
    EXPECT_DOUBLE_EQ(wer(refs, hyps), 1.0 / 6.0);
}

TEST(Bleu4, HandCases) {
    std::vector<Sentence> refs{words({'a', 'b', 'c', 'd'})};
    EXPECT_DOUBLE_EQ(bleu4(refs, refs), 1.0);
    std::vector<Sentence> hyps{words({'a', 'b', 'c', 'd', 'e'})};
    EXPECT_NEAR(bleu4(refs, hyps), std::pow(0.2, 0.25), 1e-9);
    EXPECT_NEAR(bleu4(refs, hyps), 0.6687, 1e-4);
    std::vector<Sentence> no4{words({'a', 'b', 'c', 'x', 'b', 'c', 'd'})};
    EXPECT_EQ(bleu4(refs, no4), 0.0);
}

TEST(Bleu4, BrevityPenalty) {
    std::vector<Sentence> refs{words({'a', 'b', 'c', 'd', 'e', 'f'})};
    std::vector<Sentence> hyps{words({'a', 'b', 'c', 'd'})};
    EXPECT_NEAR(bleu4(refs, hyps), std::exp(1.0 - 6.0 / 4.0), 1e-12);
}

TEST(Bleu4, EmptyHypothesisCorpusIsZero) {
    std::vector<Sentence> refs{words({'a', 'b'})};
    std::vector<Sentence> hyps{Sentence{}};
    EXPECT_EQ(bleu4(refs, hyps), 0.0);
}

TEST(Bleu4, MatchesPairwiseOracleOnConstructedCases) {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 20; ++i) {
        std::vector<Sentence> refs, hyps;
        const std::size_t n = 1 + rng() % 4;
        for (std::size_t j = 0; j < n; ++j) {
            Sentence ref = random_sentence(rng, 4, 9, 4);
            Sentence hyp = ref;
            // Perturb a few positions so precisions are fractional but non-zero.
            if (!hyp.empty() && rng() % 2) hyp[rng() % hyp.size()] = 9;
            if (rng() % 2) hyp.push_back(static_cast<std::uint16_t>(rng() % 4));
            if (rng() % 3 == 0) hyp.erase(hyp.begin());
            refs.push_back(ref);
            hyps.push_back(hyp);
        }
        EXPECT_NEAR(bleu4(refs, hyps), bleu_oracle(refs, hyps), 1e-9) << "case " << i;
    }
}

TEST(RougeL, HandCases) {
    std::vector<Sentence> refs{words({'a', 'b', 'c', 'd'})};
    EXPECT_DOUBLE_EQ(rouge_l(refs, refs), 1.0);
    std::vector<Sentence> hyps{words({'a', 'c', 'd'})};
    EXPECT_NEAR(rouge_l(refs, hyps), 6.0 / 7.0, 1e-9);
    std::vector<Sentence> disjoint{words({'x', 'y'})};
    EXPECT_EQ(rouge_l(refs, disjoint), 0.0);
    std::vector<Sentence> empty{Sentence{}};
    EXPECT_EQ(rouge_l(refs, empty), 0.0);
}

TEST(Metrics, InvariantUnderVocabularyRelabeling) {
    std::mt19937_64 rng(31);
    std::vector<std::uint16_t> relabel{7, 3, 11, 0, 5, 2};
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Sentence> refs, hyps, rrefs, rhyps;
        for (int j = 0; j < 3; ++j) {
            refs.push_back(random_sentence(rng, 3, 8, 6));
            hyps.push_back(random_sentence(rng, 1, 8, 6));
        }
        auto map = [&](const Sentence& s) {
            Sentence out;
            for (auto w : s) out.push_back(relabel[w]);
            return out;
        };
        for (auto& s : refs) rrefs.push_back(map(s));
        for (auto& s : hyps) rhyps.push_back(map(s));
        EXPECT_EQ(wer(refs, hyps), wer(rrefs, rhyps));
        EXPECT_EQ(bleu4(refs, hyps), bleu4(rrefs, rhyps));
        EXPECT_EQ(rouge_l(refs, hyps), rouge_l(rrefs, rhyps));
    }
}
