#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "unifuse/tensor.hpp"

namespace unifuse::corpus {

enum class Modality : std::uint8_t { sign = 0, lip = 1, audio = 2 };
std::string_view to_string(Modality m) noexcept;

/// Which corpus a sample belongs to. Text-only samples carry no streams and
/// feed decoder pretraining.
enum class CorpusTag : std::uint8_t { signing = 0, speech = 1, text = 2 };
std::string_view to_string(CorpusTag t) noexcept;

struct LexiconConfig {
    std::size_t words = 40;
    std::size_t phonemes = 20;
    std::size_t visemes = 8;
    std::size_t merged_pairs = 10;     ///< word pairs sharing one gloss
    std::size_t homophene_pairs = 8;   ///< word pairs sharing every viseme
    std::size_t min_symbols = 2;
    std::size_t max_symbols = 4;
    std::size_t sign_dims = 8;
    std::size_t lip_dims = 8;
    std::size_t audio_dims = 12;
};

/// The synthetic language. Viseme and phoneme embedding tables carry one extra
/// final row for silence.
struct Lexicon {
    LexiconConfig config;
    std::vector<std::vector<std::uint8_t>> phonemes;  ///< per word
    std::vector<std::uint16_t> gloss_of;              ///< per word
    std::vector<std::array<std::uint16_t, 2>> merged_pairs;
    std::vector<std::array<std::uint16_t, 2>> homophene_pairs;
    Tensor2 gloss_embed;
    Tensor2 viseme_embed;
    Tensor2 phoneme_embed;

    [[nodiscard]] std::size_t gloss_count() const noexcept { return config.words - config.merged_pairs; }
    [[nodiscard]] std::uint8_t viseme_of(std::uint8_t phoneme) const noexcept {
        return static_cast<std::uint8_t>(phoneme * config.visemes / config.phonemes);
    }
    [[nodiscard]] std::vector<std::uint8_t> visemes(std::uint16_t word) const;
    /// SHA-256 over a canonical serialization of every field.
    [[nodiscard]] std::string digest() const;
};

/// Deterministic in `seed`. Throws ConfigError when the requested pair counts
/// cannot be satisfied.
Lexicon build_lexicon(std::uint64_t seed, const LexiconConfig& config = {});

struct RenderConfig {
    std::size_t sign_frames_per_word = 8;
    std::size_t lip_frames_per_word = 8;
    std::size_t audio_frames_per_word = 32;
    std::uint16_t sign_rate = 25;
    std::uint16_t lip_rate = 25;
    std::uint16_t audio_rate = 100;
    double noise_sigma = 0.1;
};

struct Stream {
    Modality modality = Modality::sign;
    std::uint16_t frame_rate = 0;
    Tensor2 frames;  ///< T x dims; values are exactly representable as float32

    friend bool operator==(const Stream&, const Stream&) = default;
};

struct Sample {
    std::uint32_t id = 0;
    CorpusTag tag = CorpusTag::signing;
    std::vector<std::uint16_t> text;
    std::vector<Stream> streams;

    /// nullptr when the sample has no stream of that modality.
    [[nodiscard]] const Stream* stream(Modality m) const noexcept;
    friend bool operator==(const Sample&, const Sample&) = default;
};

/// Per word: the gloss embedding held for every sign frame; the word's visemes
/// (lip) and phonemes (audio) repeated cyclically across its frames, with the
/// leftover frames silent. Signed samples get sign + lip (mouthing), spoken
/// samples lip + audio.
Sample render_sample(std::span<const std::uint16_t> text, const Lexicon& lexicon, CorpusTag tag, std::uint64_t seed,
                     const RenderConfig& config = {});

/// Mean squared value over all frames and channels.
double mean_power(const Tensor2& frames);
/// Noise gain that puts `p_noise` at `snr_db` below `p_signal`.
double babble_gain(double p_signal, double p_noise, double snr_db);
/// Repeats or trims rows to exactly `frames` rows.
Tensor2 loop_to_length(const Tensor2& x, std::size_t frames);
/// signal + gain * sum(distractors), distractors looped or trimmed to the
/// signal length. Throws InputError on zero signal or noise power.
Tensor2 mix_babble(const Tensor2& signal, std::span<const Tensor2> distractors, double snr_db);

/// Removes floor(fraction * |text|) words chosen uniformly without replacement.
std::vector<std::uint16_t> drop_words(std::span<const std::uint16_t> text, double fraction, std::mt19937_64& rng);
/// drop_words with fraction ~ U[0, max_fraction].
std::vector<std::uint16_t> word_drop_augment(std::span<const std::uint16_t> text, std::mt19937_64& rng,
                                             double max_fraction = 0.2);

struct SplitSizes {
    std::size_t train = 0;
    std::size_t val = 0;
    std::size_t test = 0;
};

struct CorpusConfig {
    SplitSizes signing{3000, 300, 500};
    SplitSizes speech{3000, 300, 500};
    std::size_t text_train = 5000;
    std::size_t text_val = 500;
    std::size_t min_words = 3;
    std::size_t max_words = 8;
    LexiconConfig lexicon;
    RenderConfig render;
};

void to_json(nlohmann::json& j, const CorpusConfig& c);
/// Missing keys keep their defaults; unknown keys and bad values raise ConfigError.
void from_json(const nlohmann::json& j, CorpusConfig& c);

/// Split file stems in generation order.
inline constexpr std::array<std::string_view, 8> kSplitNames = {
    "signed_train", "signed_val", "signed_test", "spoken_train",
    "spoken_val",   "spoken_test", "text_train", "text_val"};

struct Corpus {
    std::uint64_t seed = 0;
    CorpusConfig config;
    Lexicon lexicon;
    std::map<std::string, std::vector<Sample>, std::less<>> splits;

    /// Throws InputError naming the split when it is absent.
    [[nodiscard]] const std::vector<Sample>& split(std::string_view name) const;
};

/// All splits drawn from one stream of sentences with global rejection of
/// duplicates, so no sentence appears in two splits.
Corpus generate_corpus(std::uint64_t seed, const CorpusConfig& config = {});

/// Writes one container per split plus manifest.json; returns the manifest.
nlohmann::json write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
/// Reads a directory written by write_corpus, verifying file and lexicon digests.
Corpus load_corpus(const std::filesystem::path& dir);

std::string encode_container(std::span<const Sample> samples);
std::vector<Sample> decode_container(std::string_view bytes, const std::string& what);

}  // namespace unifuse::corpus
