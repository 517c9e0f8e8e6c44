#include "unifuse/synthcorpus.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <set>

#include "unifuse/binio.hpp"
#include "unifuse/digest.hpp"
#include "unifuse/error.hpp"
#include "unifuse/jsonutil.hpp"
#include "unifuse/random.hpp"

namespace unifuse::corpus {

namespace {

constexpr std::string_view kContainerMagic = "UMSC1";
constexpr std::uint16_t kContainerVersion = 1;
constexpr std::size_t kMaxDraws = 1'000'000;

double to_float32(double v) { return static_cast<double>(static_cast<float>(v)); }

Tensor2 unit_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor2 t(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        double norm = 0.0;
        for (double& v : t.row(r)) {
            v = normal(rng);
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (double& v : t.row(r)) v /= norm;
    }
    return t;
}

void validate(const LexiconConfig& c) {
    if (c.words == 0 || c.phonemes == 0 || c.visemes == 0 || c.visemes > c.phonemes) {
        throw ConfigError("lexicon: need 0 < visemes <= phonemes and words > 0");
    }
    if (c.phonemes > 255) throw ConfigError("lexicon.phonemes: at most 255");
    if (c.min_symbols == 0 || c.min_symbols > c.max_symbols) throw ConfigError("lexicon: need 1 <= min_symbols <= max_symbols");
    if (2 * (c.homophene_pairs + c.merged_pairs) > c.words) {
        throw ConfigError("lexicon: homophene and gloss-merged pairs need " +
                          std::to_string(2 * (c.homophene_pairs + c.merged_pairs)) + " distinct words, have " +
                          std::to_string(c.words));
    }
    if (c.sign_dims == 0 || c.lip_dims == 0 || c.audio_dims == 0) throw ConfigError("lexicon: stream dims must be positive");
}

// Each word's symbols repeated cyclically; frames left over after the last full
// cycle are silent.
void tile_word(const std::vector<std::uint8_t>& symbols, std::size_t frames, std::size_t silence,
               std::vector<std::size_t>& out) {
    const std::size_t cycles = frames / symbols.size();
    for (std::size_t c = 0; c < cycles; ++c) {
        for (std::uint8_t s : symbols) out.push_back(s);
    }
    out.resize(out.size() + frames - cycles * symbols.size(), silence);
}

Tensor2 embed_frames(const std::vector<std::size_t>& ids, const Tensor2& table, double sigma, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor2 out(ids.size(), table.cols());
    for (std::size_t r = 0; r < ids.size(); ++r) {
        for (std::size_t c = 0; c < table.cols(); ++c) {
            const double noise = sigma > 0.0 ? sigma * normal(rng) : 0.0;
            out(r, c) = to_float32(table(ids[r], c) + noise);
        }
    }
    return out;
}

const std::vector<std::uint16_t>& check_text(std::span<const std::uint16_t> text, std::size_t words,
                                             std::vector<std::uint16_t>& copy) {
    if (text.empty()) throw InputError("render_sample: empty text");
    for (std::uint16_t w : text) {
        if (w >= words) throw InputError("render_sample: unknown word " + std::to_string(w));
    }
    copy.assign(text.begin(), text.end());
    return copy;
}

void put_stream(binio::Writer& w, const Stream& s) {
    w.put<std::uint8_t>(static_cast<std::uint8_t>(s.modality));
    w.put<std::uint16_t>(s.frame_rate);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(s.frames.cols()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.frames.rows()));
    for (double v : s.frames.flat()) w.put<float>(static_cast<float>(v));
}

Stream get_stream(binio::Reader& r, const std::string& what) {
    Stream s;
    const auto m = r.get<std::uint8_t>();
    if (m > 2) throw IoError(what + ": bad modality byte " + std::to_string(m));
    s.modality = static_cast<Modality>(m);
    s.frame_rate = r.get<std::uint16_t>();
    const auto dims = r.get<std::uint16_t>();
    const auto frames = r.get<std::uint32_t>();
    s.frames = Tensor2(frames, dims);
    const std::string_view raw = r.bytes(static_cast<std::size_t>(frames) * dims * sizeof(float));
    for (std::size_t i = 0; i < s.frames.size(); ++i) {
        float f;
        std::memcpy(&f, raw.data() + i * sizeof(float), sizeof(float));
        s.frames.flat()[i] = f;
    }
    return s;
}

SplitSizes split_sizes_from(const nlohmann::json& j, std::string_view section) {
    SplitSizes s;
    jsonutil::check_object(j, section, {"train", "val", "test"});
    jsonutil::read(j, section, "train", s.train);
    jsonutil::read(j, section, "val", s.val);
    jsonutil::read(j, section, "test", s.test);
    return s;
}

}  // namespace

std::string_view to_string(Modality m) noexcept {
    switch (m) {
        case Modality::sign: return "sign";
        case Modality::lip: return "lip";
        case Modality::audio: return "audio";
    }
    return "?";
}

std::string_view to_string(CorpusTag t) noexcept {
    switch (t) {
        case CorpusTag::signing: return "signed";
        case CorpusTag::speech: return "spoken";
        case CorpusTag::text: return "text";
    }
    return "?";
}

std::vector<std::uint8_t> Lexicon::visemes(std::uint16_t word) const {
    std::vector<std::uint8_t> out;
    for (std::uint8_t p : phonemes.at(word)) out.push_back(viseme_of(p));
    return out;
}

std::string Lexicon::digest() const {
    binio::Writer w;
    for (std::size_t v : {config.words, config.phonemes, config.visemes, config.merged_pairs, config.homophene_pairs,
                          config.min_symbols, config.max_symbols, config.sign_dims, config.lip_dims, config.audio_dims}) {
        w.put<std::uint64_t>(v);
    }
    for (const auto& seq : phonemes) {
        w.put<std::uint8_t>(static_cast<std::uint8_t>(seq.size()));
        for (std::uint8_t p : seq) w.put<std::uint8_t>(p);
    }
    for (std::uint16_t g : gloss_of) w.put<std::uint16_t>(g);
    for (const auto* pairs : {&merged_pairs, &homophene_pairs}) {
        for (const auto& p : *pairs) {
            w.put<std::uint16_t>(p[0]);
            w.put<std::uint16_t>(p[1]);
        }
    }
    for (const Tensor2* t : {&gloss_embed, &viseme_embed, &phoneme_embed}) {
        for (double v : t->flat()) w.put<double>(v);
    }
    return sha256_hex(w.data());
}

Lexicon build_lexicon(std::uint64_t seed, const LexiconConfig& config) {
    validate(config);
    std::mt19937_64 rng(derive_seed(seed, {0x1e71c0}));
    Lexicon lex;
    lex.config = config;
    std::uniform_int_distribution<std::size_t> length(config.min_symbols, config.max_symbols);
    std::uniform_int_distribution<int> phoneme(0, static_cast<int>(config.phonemes) - 1);
    std::set<std::vector<std::uint8_t>> viseme_seqs;
    auto draw = [&] {
        std::vector<std::uint8_t> seq(length(rng));
        for (auto& p : seq) p = static_cast<std::uint8_t>(phoneme(rng));
        return seq;
    };
    auto to_visemes = [&](const std::vector<std::uint8_t>& seq) {
        std::vector<std::uint8_t> v;
        for (std::uint8_t p : seq) v.push_back(lex.viseme_of(p));
        return v;
    };

    std::size_t attempts = 0;
    while (lex.phonemes.size() < 2 * config.homophene_pairs) {
        if (++attempts > kMaxDraws) throw ConfigError("lexicon: cannot place homophene pairs");
        std::vector<std::uint8_t> seq = draw();
        std::vector<std::uint8_t> vis = to_visemes(seq);
        // Only positions whose viseme class has another member can be swapped.
        std::vector<std::size_t> swappable;
        for (std::size_t k = 0; k < seq.size(); ++k) {
            for (std::size_t p = 0; p < config.phonemes; ++p) {
                if (p != seq[k] && lex.viseme_of(static_cast<std::uint8_t>(p)) == vis[k]) {
                    swappable.push_back(k);
                    break;
                }
            }
        }
        if (swappable.empty() || viseme_seqs.contains(vis)) continue;
        const std::size_t k = swappable[std::uniform_int_distribution<std::size_t>(0, swappable.size() - 1)(rng)];
        std::vector<std::uint8_t> options;
        for (std::size_t p = 0; p < config.phonemes; ++p) {
            if (p != seq[k] && lex.viseme_of(static_cast<std::uint8_t>(p)) == vis[k]) {
                options.push_back(static_cast<std::uint8_t>(p));
            }
        }
        std::vector<std::uint8_t> twin = seq;
        twin[k] = options[std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(rng)];
        viseme_seqs.insert(vis);
        const auto a = static_cast<std::uint16_t>(lex.phonemes.size());
        lex.phonemes.push_back(std::move(seq));
        lex.phonemes.push_back(std::move(twin));
        lex.homophene_pairs.push_back({a, static_cast<std::uint16_t>(a + 1)});
    }
    while (lex.phonemes.size() < config.words) {
        if (++attempts > kMaxDraws) throw ConfigError("lexicon: cannot draw enough distinct viseme sequences");
        std::vector<std::uint8_t> seq = draw();
        if (!viseme_seqs.insert(to_visemes(seq)).second) continue;
        lex.phonemes.push_back(std::move(seq));
    }

    // Gloss-merged pairs come from words outside homophene pairs, so mouthing
    // always separates them.
    std::vector<std::uint16_t> rest(config.words - 2 * config.homophene_pairs);
    std::iota(rest.begin(), rest.end(), static_cast<std::uint16_t>(2 * config.homophene_pairs));
    std::shuffle(rest.begin(), rest.end(), rng);
    constexpr auto kUnset = std::numeric_limits<std::uint16_t>::max();
    lex.gloss_of.assign(config.words, kUnset);
    std::uint16_t gloss = 0;
    for (std::size_t i = 0; i < config.merged_pairs; ++i) {
        std::array<std::uint16_t, 2> pair{rest[2 * i], rest[2 * i + 1]};
        std::sort(pair.begin(), pair.end());
        lex.gloss_of[pair[0]] = gloss;
        lex.gloss_of[pair[1]] = gloss;
        lex.merged_pairs.push_back(pair);
        ++gloss;
    }
    for (auto& g : lex.gloss_of) {
        if (g == kUnset) g = gloss++;
    }

    lex.gloss_embed = unit_rows(lex.gloss_count(), config.sign_dims, rng);
    lex.viseme_embed = unit_rows(config.visemes + 1, config.lip_dims, rng);
    lex.phoneme_embed = unit_rows(config.phonemes + 1, config.audio_dims, rng);
    return lex;
}

const Stream* Sample::stream(Modality m) const noexcept {
    for (const Stream& s : streams) {
        if (s.modality == m) return &s;
    }
    return nullptr;
}

Sample render_sample(std::span<const std::uint16_t> text, const Lexicon& lexicon, CorpusTag tag, std::uint64_t seed,
                     const RenderConfig& config) {
    std::vector<std::uint16_t> words;
    check_text(text, lexicon.config.words, words);
    Sample s;
    s.tag = tag;
    s.text = words;
    if (tag == CorpusTag::text) return s;

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> lip_ids;
    std::vector<std::size_t> other_ids;
    const std::size_t lip_silence = lexicon.config.visemes;
    const std::size_t audio_silence = lexicon.config.phonemes;
    for (std::uint16_t w : words) {
        tile_word(lexicon.visemes(w), config.lip_frames_per_word, lip_silence, lip_ids);
        if (tag == CorpusTag::signing) {
            other_ids.insert(other_ids.end(), config.sign_frames_per_word, lexicon.gloss_of[w]);
        } else {
            tile_word(lexicon.phonemes[w], config.audio_frames_per_word, audio_silence, other_ids);
        }
    }
    if (tag == CorpusTag::signing) {
        Tensor2 sign = embed_frames(other_ids, lexicon.gloss_embed, config.noise_sigma, rng);
        Tensor2 lip = embed_frames(lip_ids, lexicon.viseme_embed, config.noise_sigma, rng);
        s.streams.push_back({Modality::sign, config.sign_rate, std::move(sign)});
        s.streams.push_back({Modality::lip, config.lip_rate, std::move(lip)});
    } else {
        Tensor2 lip = embed_frames(lip_ids, lexicon.viseme_embed, config.noise_sigma, rng);
        Tensor2 audio = embed_frames(other_ids, lexicon.phoneme_embed, config.noise_sigma, rng);
        s.streams.push_back({Modality::lip, config.lip_rate, std::move(lip)});
        s.streams.push_back({Modality::audio, config.audio_rate, std::move(audio)});
    }
    return s;
}

double mean_power(const Tensor2& frames) {
    if (frames.empty()) return 0.0;
    double acc = 0.0;
    for (double v : frames.flat()) acc += v * v;
    return acc / static_cast<double>(frames.size());
}

double babble_gain(double p_signal, double p_noise, double snr_db) {
    if (!(p_signal > 0.0)) throw InputError("mix_babble: signal power is zero");
    if (!(p_noise > 0.0)) throw InputError("mix_babble: noise power is zero");
    return std::sqrt(p_signal / (p_noise * std::pow(10.0, snr_db / 10.0)));
}

Tensor2 loop_to_length(const Tensor2& x, std::size_t frames) {
    if (x.rows() == 0) throw InputError("loop_to_length: empty input");
    Tensor2 out(frames, x.cols());
    for (std::size_t r = 0; r < frames; ++r) {
        auto src = x.row(r % x.rows());
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

Tensor2 mix_babble(const Tensor2& signal, std::span<const Tensor2> distractors, double snr_db) {
    if (distractors.empty()) throw InputError("mix_babble: no distractors");
    Tensor2 noise(signal.rows(), signal.cols());
    for (const Tensor2& d : distractors) {
        if (d.cols() != signal.cols()) {
            throw DimensionError("mix_babble: distractor " + d.shape_string() + " vs signal " + signal.shape_string());
        }
        const Tensor2 fitted = d.rows() == signal.rows() ? d : loop_to_length(d, signal.rows());
        for (std::size_t i = 0; i < noise.size(); ++i) noise.flat()[i] += fitted.flat()[i];
    }
    const double gain = babble_gain(mean_power(signal), mean_power(noise), snr_db);
    Tensor2 out = signal;
    for (std::size_t i = 0; i < out.size(); ++i) out.flat()[i] += gain * noise.flat()[i];
    return out;
}

std::vector<std::uint16_t> drop_words(std::span<const std::uint16_t> text, double fraction, std::mt19937_64& rng) {
    const auto n = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(text.size())));
    std::vector<std::size_t> order(text.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Partial Fisher-Yates: the first n entries become the dropped positions.
    for (std::size_t i = 0; i < n && i + 1 < order.size(); ++i) {
        const std::size_t j = std::uniform_int_distribution<std::size_t>(i, order.size() - 1)(rng);
        std::swap(order[i], order[j]);
    }
    std::vector<bool> dropped(text.size(), false);
    for (std::size_t i = 0; i < std::min(n, order.size()); ++i) dropped[order[i]] = true;
    std::vector<std::uint16_t> out;
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (!dropped[i]) out.push_back(text[i]);
    }
    return out;
}

std::vector<std::uint16_t> word_drop_augment(std::span<const std::uint16_t> text, std::mt19937_64& rng,
                                             double max_fraction) {
    const double f = std::uniform_real_distribution<double>(0.0, max_fraction)(rng);
    return drop_words(text, f, rng);
}

void to_json(nlohmann::json& j, const CorpusConfig& c) {
    auto sizes = [](const SplitSizes& s) { return nlohmann::json{{"train", s.train}, {"val", s.val}, {"test", s.test}}; };
    const LexiconConfig& l = c.lexicon;
    const RenderConfig& r = c.render;
    j = nlohmann::json{
        {"signed", sizes(c.signing)},
        {"spoken", sizes(c.speech)},
        {"text_train", c.text_train},
        {"text_val", c.text_val},
        {"min_words", c.min_words},
        {"max_words", c.max_words},
        {"lexicon",
         {{"words", l.words},
          {"phonemes", l.phonemes},
          {"visemes", l.visemes},
          {"merged_pairs", l.merged_pairs},
          {"homophene_pairs", l.homophene_pairs},
          {"min_symbols", l.min_symbols},
          {"max_symbols", l.max_symbols},
          {"sign_dims", l.sign_dims},
          {"lip_dims", l.lip_dims},
          {"audio_dims", l.audio_dims}}},
        {"render",
         {{"sign_frames_per_word", r.sign_frames_per_word},
          {"lip_frames_per_word", r.lip_frames_per_word},
          {"audio_frames_per_word", r.audio_frames_per_word},
          {"sign_rate", r.sign_rate},
          {"lip_rate", r.lip_rate},
          {"audio_rate", r.audio_rate},
          {"noise_sigma", r.noise_sigma}}},
    };
}

void from_json(const nlohmann::json& j, CorpusConfig& c) {
    using jsonutil::read;
    jsonutil::check_object(j, "corpus",
                           {"signed", "spoken", "text_train", "text_val", "min_words", "max_words", "lexicon", "render"});
    if (j.contains("signed")) c.signing = split_sizes_from(j["signed"], "corpus.signed");
    if (j.contains("spoken")) c.speech = split_sizes_from(j["spoken"], "corpus.spoken");
    read(j, "corpus", "text_train", c.text_train);
    read(j, "corpus", "text_val", c.text_val);
    read(j, "corpus", "min_words", c.min_words);
    read(j, "corpus", "max_words", c.max_words);
    if (j.contains("lexicon")) {
        const auto& l = j["lexicon"];
        constexpr std::string_view s = "corpus.lexicon";
        jsonutil::check_object(l, s,
                               {"words", "phonemes", "visemes", "merged_pairs", "homophene_pairs", "min_symbols",
                                "max_symbols", "sign_dims", "lip_dims", "audio_dims"});
        read(l, s, "words", c.lexicon.words);
        read(l, s, "phonemes", c.lexicon.phonemes);
        read(l, s, "visemes", c.lexicon.visemes);
        read(l, s, "merged_pairs", c.lexicon.merged_pairs);
        read(l, s, "homophene_pairs", c.lexicon.homophene_pairs);
        read(l, s, "min_symbols", c.lexicon.min_symbols);
        read(l, s, "max_symbols", c.lexicon.max_symbols);
        read(l, s, "sign_dims", c.lexicon.sign_dims);
        read(l, s, "lip_dims", c.lexicon.lip_dims);
        read(l, s, "audio_dims", c.lexicon.audio_dims);
    }
    if (j.contains("render")) {
        const auto& r = j["render"];
        constexpr std::string_view s = "corpus.render";
        jsonutil::check_object(r, s,
                               {"sign_frames_per_word", "lip_frames_per_word", "audio_frames_per_word", "sign_rate",
                                "lip_rate", "audio_rate", "noise_sigma"});
        read(r, s, "sign_frames_per_word", c.render.sign_frames_per_word);
        read(r, s, "lip_frames_per_word", c.render.lip_frames_per_word);
        read(r, s, "audio_frames_per_word", c.render.audio_frames_per_word);
        read(r, s, "sign_rate", c.render.sign_rate);
        read(r, s, "lip_rate", c.render.lip_rate);
        read(r, s, "audio_rate", c.render.audio_rate);
        read(r, s, "noise_sigma", c.render.noise_sigma);
        if (!(c.render.noise_sigma >= 0.0)) throw ConfigError("corpus.render.noise_sigma: must be >= 0");
    }
    if (c.min_words == 0 || c.min_words > c.max_words || c.max_words > 0xffff) {
        throw ConfigError("corpus.min_words/max_words: need 1 <= min_words <= max_words");
    }
    validate(c.lexicon);
}

const std::vector<Sample>& Corpus::split(std::string_view name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw InputError("corpus: missing split '" + std::string(name) + "'");
    return it->second;
}

Corpus generate_corpus(std::uint64_t seed, const CorpusConfig& config) {
    validate(config.lexicon);
    if (config.min_words == 0 || config.min_words > config.max_words) {
        throw ConfigError("corpus.min_words/max_words: need 1 <= min_words <= max_words");
    }
    Corpus corpus;
    corpus.seed = seed;
    corpus.config = config;
    corpus.lexicon = build_lexicon(seed, config.lexicon);

    const std::array<std::pair<CorpusTag, std::size_t>, kSplitNames.size()> plan = {{
        {CorpusTag::signing, config.signing.train},
        {CorpusTag::signing, config.signing.val},
        {CorpusTag::signing, config.signing.test},
        {CorpusTag::speech, config.speech.train},
        {CorpusTag::speech, config.speech.val},
        {CorpusTag::speech, config.speech.test},
        {CorpusTag::text, config.text_train},
        {CorpusTag::text, config.text_val},
    }};
    std::mt19937_64 sentences(derive_seed(seed, {0x5e47}));
    std::uniform_int_distribution<std::size_t> length(config.min_words, config.max_words);
    std::uniform_int_distribution<std::size_t> word(0, config.lexicon.words - 1);
    std::set<std::vector<std::uint16_t>> seen;
    std::uint32_t next_id = 0;
    for (std::size_t s = 0; s < plan.size(); ++s) {
        auto& out = corpus.splits[std::string(kSplitNames[s])];
        const auto [tag, count] = plan[s];
        out.reserve(count);
        std::size_t draws = 0;
        while (out.size() < count) {
            if (++draws > count + kMaxDraws) {
                throw ConfigError("corpus: cannot draw " + std::to_string(count) + " distinct sentences for " +
                                  std::string(kSplitNames[s]));
            }
            std::vector<std::uint16_t> text(length(sentences));
            for (auto& w : text) w = static_cast<std::uint16_t>(word(sentences));
            if (!seen.insert(text).second) continue;
            Sample sample = render_sample(text, corpus.lexicon, tag, derive_seed(seed, {0x7e, next_id}), config.render);
            sample.id = next_id++;
            out.push_back(std::move(sample));
        }
    }
    return corpus;
}

std::string encode_container(std::span<const Sample> samples) {
    binio::Writer w;
    w.bytes(kContainerMagic);
    w.put<std::uint16_t>(kContainerVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(samples.size()));
    for (const Sample& s : samples) {
        w.put<std::uint32_t>(s.id);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(s.tag));
        if (s.text.size() > 0xffff) throw ConfigError("container: text longer than 65535 words");
        w.put<std::uint16_t>(static_cast<std::uint16_t>(s.text.size()));
        for (std::uint16_t t : s.text) w.put<std::uint16_t>(t);
        for (const Stream& st : s.streams) put_stream(w, st);
    }
    return w.take();
}

std::vector<Sample> decode_container(std::string_view bytes, const std::string& what) {
    binio::Reader r(bytes, what);
    if (r.bytes(kContainerMagic.size()) != kContainerMagic) throw IoError(what + ": not a UMSC1 container");
    const auto version = r.get<std::uint16_t>();
    if (version != kContainerVersion) throw IoError(what + ": unsupported container version " + std::to_string(version));
    const auto count = r.get<std::uint32_t>();
    std::vector<Sample> out;
    out.reserve(std::min<std::size_t>(count, 1u << 20));
    for (std::uint32_t i = 0; i < count; ++i) {
        Sample s;
        s.id = r.get<std::uint32_t>();
        const auto tag = r.get<std::uint8_t>();
        if (tag > 2) throw IoError(what + ": bad corpus tag " + std::to_string(tag));
        s.tag = static_cast<CorpusTag>(tag);
        s.text.resize(r.get<std::uint16_t>());
        for (auto& t : s.text) t = r.get<std::uint16_t>();
        const std::size_t streams = s.tag == CorpusTag::text ? 0 : 2;
        for (std::size_t k = 0; k < streams; ++k) s.streams.push_back(get_stream(r, what));
        out.push_back(std::move(s));
    }
    if (r.remaining() != 0) throw IoError(what + ": trailing bytes after last record");
    return out;
}

nlohmann::json write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create corpus directory " + dir.string() + ": " + ec.message());
    nlohmann::json manifest;
    manifest["format"] = std::string(kContainerMagic);
    manifest["seed"] = corpus.seed;
    manifest["config"] = corpus.config;
    manifest["lexicon_digest"] = corpus.lexicon.digest();
    for (std::string_view name : kSplitNames) {
        const std::string file = std::string(name) + ".umsc";
        const std::string bytes = encode_container(corpus.split(name));
        binio::write_file((dir / file).string(), bytes);
        manifest["splits"][std::string(name)] = {
            {"file", file}, {"count", corpus.split(name).size()}, {"sha256", sha256_hex(bytes)}};
    }
    binio::write_file((dir / "manifest.json").string(), manifest.dump(2) + "\n");
    return manifest;
}

Corpus load_corpus(const std::filesystem::path& dir) {
    const std::string manifest_path = (dir / "manifest.json").string();
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(binio::read_file(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(manifest_path + ": " + e.what());
    }
    Corpus corpus;
    try {
        corpus.seed = manifest.at("seed").get<std::uint64_t>();
        corpus.config = manifest.at("config").get<CorpusConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(manifest_path + ": " + e.what());
    }
    corpus.lexicon = build_lexicon(corpus.seed, corpus.config.lexicon);
    if (manifest.value("lexicon_digest", std::string()) != corpus.lexicon.digest()) {
        throw IoError(manifest_path + ": lexicon digest does not match the rebuilt lexicon");
    }
    for (const auto& [name, entry] : manifest.at("splits").items()) {
        const std::string path = (dir / entry.at("file").get<std::string>()).string();
        const std::string bytes = binio::read_file(path);
        if (sha256_hex(bytes) != entry.at("sha256").get<std::string>()) throw IoError(path + ": digest mismatch");
        corpus.splits[name] = decode_container(bytes, path);
    }
    return corpus;
}

}  // namespace unifuse::corpus
