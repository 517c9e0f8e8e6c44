#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "unifuse/model.hpp"
#include "unifuse/synthcorpus.hpp"

namespace unifuse::support {

/// Small enough for finite differences over every parameter.
inline ModelConfig tiny_model_config() {
    ModelConfig c;
    c.sign.out_dims = 3;
    c.lip.out_dims = 3;
    c.audio.out_dims = 3;
    c.mapping_hidden = 5;
    c.decoder.d_model = 8;
    c.decoder.layers = 1;
    c.decoder.heads = 2;
    c.decoder.ffn = 12;
    c.decoder.lora_rank = 2;
    c.decoder.lora_alpha = 4.0;
    return c;
}

inline corpus::CorpusConfig small_corpus_config(std::size_t train = 60, std::size_t held_out = 20) {
    corpus::CorpusConfig c;
    c.signing = {train, held_out, held_out};
    c.speech = {train, held_out, held_out};
    c.text_train = train;
    c.text_val = held_out;
    return c;
}

inline std::vector<std::uint16_t> random_text(std::mt19937_64& rng, std::size_t len) {
    std::vector<std::uint16_t> t(len);
    for (auto& w : t) w = static_cast<std::uint16_t>(rng() % 40);
    return t;
}

inline std::filesystem::path fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("unifuse_test_" + name);
    std::filesystem::remove_all(dir);
    return dir;
}

}  // namespace unifuse::support
