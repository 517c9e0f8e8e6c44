#include "unifuse/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "unifuse/encoders.hpp"
#include "unifuse/error.hpp"

namespace unifuse {

namespace vocab {

std::string token_name(std::uint16_t id) {
    if (id < kWords) return "w" + std::to_string(id);
    switch (id) {
        case kPad: return "<pad>";
        case kBos: return "<bos>";
        case kEos: return "<eos>";
        default: break;
    }
    if (id < kSize) return "<task:" + std::string(to_string(static_cast<TaskKind>(id - kTaskBase))) + ">";
    throw ConfigError("vocab: token id " + std::to_string(id) + " out of range");
}

std::vector<std::string> table() {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < kSize; ++i) out.push_back(token_name(static_cast<std::uint16_t>(i)));
    return out;
}

}  // namespace vocab

// ------------------------------------------------------------------- search

std::vector<double> log_softmax(std::span<const double> logits, double temperature) {
    if (!(temperature > 0.0)) throw ConfigError("log_softmax: temperature must be positive");
    std::vector<double> out(logits.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = logits[i] / temperature;
        mx = std::max(mx, out[i]);
    }
    double z = 0.0;
    for (double v : out) z += std::exp(v - mx);
    const double lz = mx + std::log(z);
    for (double& v : out) v -= lz;
    return out;
}

Hypothesis greedy_search(const LogitsFn& logits, std::uint16_t eos, std::size_t max_len) {
    Hypothesis h;
    for (std::size_t step = 0; step < max_len; ++step) {
        const std::vector<double> l = logits(h.tokens);
        const std::vector<double> lp = log_softmax(l);
        const auto best = static_cast<std::uint16_t>(std::max_element(l.begin(), l.end()) - l.begin());
        h.score += lp[best];
        if (best == eos) {
            h.finished = true;
            return h;
        }
        h.tokens.push_back(best);
    }
    return h;
}

Hypothesis beam_search(const LogitsFn& logits, std::uint16_t eos, std::size_t vocab_size, std::size_t width,
                       double temperature, std::size_t max_len) {
    if (width == 0) throw ConfigError("beam_search: width must be at least 1");
    if (!(temperature > 0.0)) throw ConfigError("beam_search: temperature must be positive");
    struct Candidate {
        double score;
        std::size_t parent;
        std::uint16_t token;
    };
    std::vector<Hypothesis> live(1);
    std::optional<Hypothesis> best_finished;
    for (std::size_t step = 0; step < max_len && !live.empty(); ++step) {
        std::vector<Candidate> cands;
        cands.reserve(live.size() * vocab_size);
        for (std::size_t p = 0; p < live.size(); ++p) {
            const std::vector<double> l = logits(live[p].tokens);
            if (l.size() != vocab_size) throw DimensionError("beam_search: logits width differs from vocab size");
            const std::vector<double> lp = log_softmax(l, temperature);
            for (std::size_t v = 0; v < vocab_size; ++v) {
                cands.push_back({live[p].score + lp[v], p, static_cast<std::uint16_t>(v)});
            }
        }
        const std::size_t keep = std::min(width, cands.size());
        std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                          [](const Candidate& a, const Candidate& b) {
                              if (a.score != b.score) return a.score > b.score;
                              if (a.parent != b.parent) return a.parent < b.parent;
                              return a.token < b.token;
                          });
        std::vector<Hypothesis> next;
        for (std::size_t i = 0; i < keep; ++i) {
            const Candidate& c = cands[i];
            Hypothesis h{live[c.parent].tokens, c.score, false};
            if (c.token == eos) {
                h.finished = true;
                if (!best_finished || h.score > best_finished->score) best_finished = std::move(h);
            } else {
                h.tokens.push_back(c.token);
                next.push_back(std::move(h));
            }
        }
        live = std::move(next);
        // Scores only decrease along a hypothesis, so nothing live can overtake.
        if (best_finished && (live.empty() || live.front().score <= best_finished->score)) break;
    }
    if (best_finished) return *best_finished;
    if (live.empty()) return {};
    return live.front();
}

// ------------------------------------------------------------------ decoder

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr std::array<const char*, 4> kProj = {"q", "k", "v", "o"};

void fill_gaussian(Parameter& p, double stddev, std::mt19937_64& rng) { fill_normal(p.value, stddev, rng); }

void ones(Parameter& p) { p.value.fill(1.0); }

}  // namespace

Decoder::Decoder(ParameterSet& params, const DecoderConfig& config, std::mt19937_64& rng) : config_(config) {
    const std::size_t d = config.d_model;
    if (config.heads == 0 || d % config.heads != 0) {
        throw ConfigError("decoder.heads: d_model " + std::to_string(d) + " is not divisible by " +
                          std::to_string(config.heads) + " heads");
    }
    if (config.lora_rank == 0 || config.lora_rank > d) {
        throw ConfigError("decoder.lora_rank: must be in [1, d_model], got " + std::to_string(config.lora_rank));
    }
    if (config.layers == 0 || config.ffn == 0) throw ConfigError("decoder: layers and ffn must be positive");
    if (config.text_offset() + 2 > config.max_positions) {
        throw ConfigError("decoder.max_positions: too small for max_token_rows " +
                          std::to_string(config.max_token_rows));
    }
    const std::string p = kPrefix;
    tok_embed_ = &params.add(p + "tok_embed", vocab::kSize, d);
    pos_embed_ = &params.add(p + "pos_embed", config.max_positions, d);
    task_embed_ = &params.add(p + "task_embed", kAllTasks.size(), d);
    fill_gaussian(*tok_embed_, 0.1, rng);
    fill_gaussian(*pos_embed_, 0.1, rng);
    fill_gaussian(*task_embed_, 0.1, rng);
    for (std::size_t l = 0; l < config.layers; ++l) {
        const std::string lp = p + "l" + std::to_string(l) + ".";
        Layer layer{};
        layer.ln1_g = &params.add(lp + "ln1.g", 1, d);
        layer.ln1_b = &params.add(lp + "ln1.b", 1, d);
        ones(*layer.ln1_g);
        for (std::size_t j = 0; j < 4; ++j) {
            layer.w[j] = &params.add(lp + "attn." + kProj[j] + ".w", d, d);
            layer.b[j] = &params.add(lp + "attn." + kProj[j] + ".b", 1, d);
            init_uniform_fan_in(*layer.w[j], d, rng);
            init_uniform_fan_in(*layer.b[j], d, rng);
            layer.lora_a[j] = &params.add(lp + "lora." + kProj[j] + ".a", d, config.lora_rank);
            layer.lora_b[j] = &params.add(lp + "lora." + kProj[j] + ".b", config.lora_rank, d);
            fill_gaussian(*layer.lora_a[j], 1.0 / std::sqrt(static_cast<double>(d)), rng);
        }
        layer.ln2_g = &params.add(lp + "ln2.g", 1, d);
        layer.ln2_b = &params.add(lp + "ln2.b", 1, d);
        ones(*layer.ln2_g);
        layer.fc1_w = &params.add(lp + "ffn.fc1.w", d, config.ffn);
        layer.fc1_b = &params.add(lp + "ffn.fc1.b", 1, config.ffn);
        layer.fc2_w = &params.add(lp + "ffn.fc2.w", config.ffn, d);
        layer.fc2_b = &params.add(lp + "ffn.fc2.b", 1, d);
        init_uniform_fan_in(*layer.fc1_w, d, rng);
        init_uniform_fan_in(*layer.fc1_b, d, rng);
        init_uniform_fan_in(*layer.fc2_w, config.ffn, rng);
        init_uniform_fan_in(*layer.fc2_b, config.ffn, rng);
        layers_.push_back(layer);
    }
    lnf_g_ = &params.add(p + "ln_f.g", 1, d);
    lnf_b_ = &params.add(p + "ln_f.b", 1, d);
    ones(*lnf_g_);
    head_w_ = &params.add(p + "head.w", d, vocab::kSize);
    head_b_ = &params.add(p + "head.b", 1, vocab::kSize);
    init_uniform_fan_in(*head_w_, d, rng);
    init_uniform_fan_in(*head_b_, d, rng);
}

Var Decoder::projection(Tape& tape, Var x, const Layer& layer, std::size_t proj) const {
    Var y = ops::affine(x, tape.param(*layer.w[proj]), tape.param(*layer.b[proj]));
    if (!lora_enabled_) return y;
    const Var low = ops::matmul(ops::matmul(x, tape.param(*layer.lora_a[proj])), tape.param(*layer.lora_b[proj]));
    return ops::add(y, ops::scale(low, config_.lora_scale()));
}

Var Decoder::forward_logits(Tape& tape, std::span<const DecoderInput> inputs) const {
    if (inputs.empty()) throw InputError("decoder: empty batch");
    const std::size_t d = config_.d_model;
    std::vector<Var> parts;
    std::vector<std::size_t> positions;
    std::vector<std::size_t> segments;
    std::vector<std::size_t> text_rows;
    std::size_t row = 0;
    const Var tok = tape.param(*tok_embed_);
    const Var task_table = tape.param(*task_embed_);
    for (const DecoderInput& in : inputs) {
        const std::size_t start = row;
        if (in.task) {
            const std::size_t id = static_cast<std::size_t>(*in.task);
            parts.push_back(ops::gather_rows(task_table, std::span<const std::size_t>(&id, 1)));
            positions.push_back(0);
            ++row;
        }
        if (in.tokens) {
            const Var& u = *in.tokens;
            if (u.cols() != d) {
                throw DimensionError("decoder: linguistic tokens have " + std::to_string(u.cols()) +
                                     " columns, expected " + std::to_string(d));
            }
            if (u.rows() > config_.max_token_rows) {
                throw LengthError("decoder: " + std::to_string(u.rows()) + " linguistic tokens exceed the limit of " +
                                  std::to_string(config_.max_token_rows));
            }
            if (u.rows() > 0) parts.push_back(u);
            for (std::size_t j = 0; j < u.rows(); ++j) positions.push_back(1 + j);
            row += u.rows();
        }
        const std::size_t text_len = in.prefix.size() + 1;
        if (config_.text_offset() + text_len > config_.max_positions) {
            throw LengthError("decoder: sequence of " + std::to_string(text_len) + " text tokens overflows " +
                              std::to_string(config_.max_positions) + " positions");
        }
        std::vector<std::size_t> ids;
        ids.reserve(text_len);
        ids.push_back(vocab::kBos);
        for (std::uint16_t t : in.prefix) {
            if (t >= vocab::kSize) throw InputError("decoder: token id " + std::to_string(t) + " outside vocabulary");
            ids.push_back(t);
        }
        parts.push_back(ops::gather_rows(tok, ids));
        for (std::size_t j = 0; j < text_len; ++j) {
            positions.push_back(config_.text_offset() + j);
            text_rows.push_back(row + j);
        }
        row += text_len;
        segments.push_back(row - start);
    }
    Var x = ops::add(ops::concat_rows(parts), ops::gather_rows(tape.param(*pos_embed_), positions));
    for (const Layer& layer : layers_) {
        const Var h = ops::layer_norm(x, tape.param(*layer.ln1_g), tape.param(*layer.ln1_b), kLayerNormEps);
        const Var q = projection(tape, h, layer, 0);
        const Var k = projection(tape, h, layer, 1);
        const Var v = projection(tape, h, layer, 2);
        const Var a = ops::causal_attention(q, k, v, config_.heads, segments);
        x = ops::add(x, projection(tape, a, layer, 3));
        const Var h2 = ops::layer_norm(x, tape.param(*layer.ln2_g), tape.param(*layer.ln2_b), kLayerNormEps);
        const Var f = ops::gelu(ops::affine(h2, tape.param(*layer.fc1_w), tape.param(*layer.fc1_b)));
        x = ops::add(x, ops::affine(f, tape.param(*layer.fc2_w), tape.param(*layer.fc2_b)));
    }
    const Var text = ops::gather_rows(x, text_rows);
    const Var normed = ops::layer_norm(text, tape.param(*lnf_g_), tape.param(*lnf_b_), kLayerNormEps);
    return ops::affine(normed, tape.param(*head_w_), tape.param(*head_b_));
}

Var Decoder::sequence_loss(Tape& tape, std::span<const DecoderInput> inputs) const {
    std::vector<std::size_t> targets;
    for (const DecoderInput& in : inputs) {
        if (in.prefix.empty()) throw InputError("sequence_loss: empty target text");
        targets.insert(targets.end(), in.prefix.begin(), in.prefix.end());
        targets.push_back(vocab::kEos);
    }
    const Var logits = forward_logits(tape, inputs);
    const std::vector<std::uint8_t> mask(targets.size(), 1);
    return ops::softmax_cross_entropy(logits, targets, mask);
}

Tensor2 Decoder::merged_weight(std::size_t layer, std::size_t proj) const {
    const Layer& l = layers_.at(layer);
    Tensor2 w = l.w.at(proj)->value;
    if (!lora_enabled_) return w;
    const Tensor2& a = l.lora_a[proj]->value;
    const Tensor2& b = l.lora_b[proj]->value;
    Tensor2 ab(a.rows(), b.cols());
    kernels::gemm_nn_acc(a.data(), b.data(), ab.data(), a.rows(), a.cols(), b.cols());
    const double s = config_.lora_scale();
    for (std::size_t i = 0; i < w.size(); ++i) w.flat()[i] += s * ab.flat()[i];
    return w;
}

// ------------------------------------------------------------------ session

struct Decoder::Session::Weights {
    struct LayerWeights {
        Tensor2 ln1_g, ln1_b, ln2_g, ln2_b;
        std::array<Tensor2, 4> w;
        std::array<Tensor2, 4> b;
        Tensor2 fc1_w, fc1_b, fc2_w, fc2_b;
    };
    std::vector<LayerWeights> layers;
    Tensor2 tok_embed, pos_embed, lnf_g, lnf_b, head_w, head_b;
};

namespace {

void layer_norm_rows(const double* x, double* out, std::size_t rows, std::size_t d, const Tensor2& g,
                     const Tensor2& b) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * d;
        double mean = 0.0;
        for (std::size_t c = 0; c < d; ++c) mean += xr[c];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + kLayerNormEps);
        for (std::size_t c = 0; c < d; ++c) out[r * d + c] = (xr[c] - mean) * is * g(0, c) + b(0, c);
    }
}

// out = x W + b for `rows` rows.
void affine_rows(const double* x, std::size_t rows, const Tensor2& w, const Tensor2& b, double* out) {
    for (std::size_t r = 0; r < rows; ++r) std::copy(b.data(), b.data() + b.cols(), out + r * w.cols());
    kernels::gemm_nn_acc(x, w.data(), out, rows, w.rows(), w.cols());
}

}  // namespace

void Decoder::Session::advance(const std::vector<double>& x_rows, std::size_t n_rows, const State* context,
                               State& own) const {
    const Weights& W = *weights_;
    const std::size_t d = config_->d_model;
    const std::size_t heads = config_->heads;
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> x = x_rows;
    std::vector<double> h(n_rows * d);
    std::vector<double> q(n_rows * d);
    std::vector<double> attn(n_rows * d);
    std::vector<double> f;
    std::vector<double> scores;
    if (own.k.empty()) {
        own.k.resize(W.layers.size());
        own.v.resize(W.layers.size());
    }
    for (std::size_t l = 0; l < W.layers.size(); ++l) {
        const auto& L = W.layers[l];
        layer_norm_rows(x.data(), h.data(), n_rows, d, L.ln1_g, L.ln1_b);
        affine_rows(h.data(), n_rows, L.w[0], L.b[0], q.data());
        const std::size_t own_before = own.k[l].size() / d;
        own.k[l].resize((own_before + n_rows) * d);
        own.v[l].resize((own_before + n_rows) * d);
        affine_rows(h.data(), n_rows, L.w[1], L.b[1], own.k[l].data() + own_before * d);
        affine_rows(h.data(), n_rows, L.w[2], L.b[2], own.v[l].data() + own_before * d);
        const std::size_t ctx_rows = context != nullptr ? context->k[l].size() / d : 0;
        std::fill(attn.begin(), attn.end(), 0.0);
        for (std::size_t i = 0; i < n_rows; ++i) {
            const std::size_t visible = ctx_rows + own_before + i + 1;
            scores.resize(visible);
            for (std::size_t hh = 0; hh < heads; ++hh) {
                const std::size_t off = hh * dh;
                const double* qi = q.data() + i * d + off;
                auto key = [&](std::size_t j) {
                    return j < ctx_rows ? context->k[l].data() + j * d + off
                                        : own.k[l].data() + (j - ctx_rows) * d + off;
                };
                auto value = [&](std::size_t j) {
                    return j < ctx_rows ? context->v[l].data() + j * d + off
                                        : own.v[l].data() + (j - ctx_rows) * d + off;
                };
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < visible; ++j) {
                    const double* kj = key(j);
                    double acc = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                    scores[j] = acc * inv_sqrt;
                    mx = std::max(mx, scores[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < visible; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    z += scores[j];
                }
                double* oi = attn.data() + i * d + off;
                for (std::size_t j = 0; j < visible; ++j) {
                    const double p = scores[j] / z;
                    const double* vj = value(j);
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
                }
            }
        }
        affine_rows(attn.data(), n_rows, L.w[3], L.b[3], h.data());
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += h[i];
        layer_norm_rows(x.data(), h.data(), n_rows, d, L.ln2_g, L.ln2_b);
        f.assign(n_rows * L.fc1_w.cols(), 0.0);
        affine_rows(h.data(), n_rows, L.fc1_w, L.fc1_b, f.data());
        for (double& v : f) v = kernels::gelu(v);
        affine_rows(f.data(), n_rows, L.fc2_w, L.fc2_b, h.data());
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += h[i];
    }
    std::vector<double> last(d);
    layer_norm_rows(x.data() + (n_rows - 1) * d, last.data(), 1, d, W.lnf_g, W.lnf_b);
    own.logits.assign(W.head_w.cols(), 0.0);
    affine_rows(last.data(), 1, W.head_w, W.head_b, own.logits.data());
}

std::vector<double> Decoder::Session::logits(std::span<const std::uint16_t> prefix) {
    if (prefix.empty()) return prefix_.logits;
    for (const auto& [key, state] : cache_) {
        if (std::equal(key.begin(), key.end(), prefix.begin(), prefix.end())) return state.logits;
    }
    const std::size_t pos = config_->text_offset() + prefix.size();
    if (pos >= config_->max_positions) throw LengthError("decoder session: sequence overflows the position table");
    // Make sure the parent state exists, then extend it by one token.
    logits(prefix.first(prefix.size() - 1));
    State next;
    if (prefix.size() > 1) {
        for (const auto& [key, state] : cache_) {
            if (key.size() + 1 == prefix.size() && std::equal(key.begin(), key.end(), prefix.begin())) {
                next.k = state.k;
                next.v = state.v;
                break;
            }
        }
    }
    const std::uint16_t token = prefix.back();
    if (token >= vocab::kSize) throw InputError("decoder session: token outside vocabulary");
    const std::size_t d = config_->d_model;
    std::vector<double> x(d);
    for (std::size_t c = 0; c < d; ++c) x[c] = weights_->tok_embed(token, c) + weights_->pos_embed(pos, c);
    advance(x, 1, &prefix_, next);
    std::vector<double> out = next.logits;
    cache_.emplace_back(std::vector<std::uint16_t>(prefix.begin(), prefix.end()), std::move(next));
    return out;
}

Decoder::Session Decoder::start(const Tensor2* tokens, std::optional<TaskKind> task) const {
    auto w = std::make_shared<Session::Weights>();
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const Layer& L = layers_[l];
        Session::Weights::LayerWeights lw;
        lw.ln1_g = L.ln1_g->value;
        lw.ln1_b = L.ln1_b->value;
        lw.ln2_g = L.ln2_g->value;
        lw.ln2_b = L.ln2_b->value;
        for (std::size_t j = 0; j < 4; ++j) {
            lw.w[j] = merged_weight(l, j);
            lw.b[j] = L.b[j]->value;
        }
        lw.fc1_w = L.fc1_w->value;
        lw.fc1_b = L.fc1_b->value;
        lw.fc2_w = L.fc2_w->value;
        lw.fc2_b = L.fc2_b->value;
        w->layers.push_back(std::move(lw));
    }
    w->tok_embed = tok_embed_->value;
    w->pos_embed = pos_embed_->value;
    w->lnf_g = lnf_g_->value;
    w->lnf_b = lnf_b_->value;
    w->head_w = head_w_->value;
    w->head_b = head_b_->value;

    const std::size_t d = config_.d_model;
    const std::size_t u_rows = tokens != nullptr ? tokens->rows() : 0;
    if (tokens != nullptr && tokens->cols() != d) throw DimensionError("decoder session: token width mismatch");
    if (u_rows > config_.max_token_rows) throw LengthError("decoder session: too many linguistic tokens");
    std::vector<double> x;
    std::size_t rows = 0;
    auto push = [&](const double* src, std::size_t pos) {
        for (std::size_t c = 0; c < d; ++c) x.push_back(src[c] + w->pos_embed(pos, c));
        ++rows;
    };
    if (task) push(task_embed_->value.row(static_cast<std::size_t>(*task)).data(), 0);
    for (std::size_t j = 0; j < u_rows; ++j) push(tokens->row(j).data(), 1 + j);
    push(w->tok_embed.row(vocab::kBos).data(), config_.text_offset());

    Session s;
    s.weights_ = std::move(w);
    s.config_ = &config_;
    s.advance(x, rows, nullptr, s.prefix_);
    return s;
}

Hypothesis Decoder::greedy_decode(const Tensor2& tokens, TaskKind task, std::size_t max_len) const {
    Session s = start(&tokens, task);
    return greedy_search([&](std::span<const std::uint16_t> p) { return s.logits(p); }, vocab::kEos, max_len);
}

Hypothesis Decoder::beam_decode(const Tensor2& tokens, TaskKind task, std::size_t width, double temperature,
                                std::size_t max_len) const {
    if (width == 0) throw ConfigError("beam_decode: width must be at least 1");
    if (!(temperature > 0.0)) throw ConfigError("beam_decode: temperature must be positive");
    Session s = start(&tokens, task);
    return beam_search([&](std::span<const std::uint16_t> p) { return s.logits(p); }, vocab::kEos, vocab::kSize, width,
                       temperature, max_len);
}

}  // namespace unifuse
