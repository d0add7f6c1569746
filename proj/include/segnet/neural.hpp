#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "segnet/config.hpp"
#include "segnet/corpus.hpp"
#include "segnet/ops.hpp"
#include "segnet/params.hpp"

namespace segnet {

// Forward-pass context: training toggles dropout; gradient checks run with
// train=true and rate 0 so the graph matches training without noise.
struct Runtime {
    bool train = false;
    Real dropout_rate = 0;
    Rng* rng = nullptr;
    bool bn_update = false; // fold batch stats into running buffers

    Tensor drop(const Tensor& x) const {
        if (!train || dropout_rate <= Real(0) || rng == nullptr) return x;
        return dropout(x, dropout_rate, *rng, true);
    }
};

// ---------------------------------------------------------------- features

struct TokenFeatures {
    std::vector<int> words;
    std::vector<int> tags;
    std::vector<int> positions;
    std::vector<int> segments;
    std::vector<std::vector<int>> chars;
};

inline std::vector<int> char_ids_of(const std::string& token, std::size_t min_len) {
    std::vector<int> ids;
    ids.reserve(std::max(token.size(), min_len));
    for (char c : token) ids.push_back(Vocab::char_id(c));
    while (ids.size() < min_len) ids.push_back(Vocab::kCharPad);
    return ids;
}

inline TokenFeatures source_features(const std::vector<std::string>& tokens,
                                     const std::vector<std::string>& tags,
                                     const std::vector<int>& segment_ids, const Vocab& vocab,
                                     const ModelConfig& cfg) {
    if (tokens.size() != tags.size() || tokens.size() != segment_ids.size())
        throw ContractError("source_features: unaligned inputs");
    TokenFeatures f;
    const std::size_t n = tokens.size();
    f.words.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        f.words.push_back(vocab.id(tokens[i]));
        f.tags.push_back(tag_id(tags[i]));
        f.positions.push_back(static_cast<int>(std::min(i, cfg.max_len - 1)));
        f.segments.push_back(
            std::min(segment_ids[i], static_cast<int>(cfg.max_sent) - 1));
        f.chars.push_back(char_ids_of(tokens[i], cfg.char_width));
    }
    return f;
}

// -------------------------------------------------------------- embeddings

// Five-way source embedding (word + POS tag + absolute position + segment +
// char CNN); decoder tokens use word + char only.
struct EmbeddingLayer {
    std::size_t d_model = 0;
    std::size_t char_width = 0;
    Tensor word, tag, position, segment;
    Tensor char_table, conv_w, conv_b;

    EmbeddingLayer() = default;

    EmbeddingLayer(ParameterStore& ps, const std::string& prefix, const ModelConfig& cfg,
                   Rng& rng)
        : d_model(cfg.d_model), char_width(cfg.char_width) {
        word = ps.add(prefix + ".word", embedding_init(rng, cfg.vocab_size, cfg.d_model)).array;
        tag = ps.add(prefix + ".tag",
                     embedding_init(rng, universal_tags().size(), cfg.d_model)).array;
        position = ps.add(prefix + ".position", embedding_init(rng, cfg.max_len, cfg.d_model)).array;
        segment = ps.add(prefix + ".segment", embedding_init(rng, cfg.max_sent, cfg.d_model)).array;
        char_table =
            ps.add(prefix + ".char_table", embedding_init(rng, Vocab::kCharVocab, cfg.char_dim)).array;
        conv_w = ps.add(prefix + ".char_conv_w",
                        xavier_uniform(rng, cfg.char_width * cfg.char_dim, cfg.char_filters)).array;
        conv_b = ps.add(prefix + ".char_conv_b", Tensor(1, cfg.char_filters)).array;
    }

    // conv over the character sequence, tanh, max over time
    Tensor char_vector(const std::vector<int>& char_ids) const {
        auto x = gather_rows(char_table, char_ids);
        auto h = tanh_op(add_row(conv1d_valid(x, conv_w, char_width), conv_b));
        return max_pool_rows(h);
    }

    Tensor char_rows(const std::vector<std::vector<int>>& chars) const {
        std::vector<Tensor> rows;
        rows.reserve(chars.size());
        for (const auto& ids : chars) rows.push_back(char_vector(ids));
        return concat_rows(rows);
    }

    Tensor source_rows(const TokenFeatures& f, const Runtime& rt) const {
        Tensor sum = gather_rows(word, f.words);
        sum = add(sum, gather_rows(tag, f.tags));
        sum = add(sum, gather_rows(position, f.positions));
        sum = add(sum, gather_rows(segment, f.segments));
        sum = add(sum, char_rows(f.chars));
        return rt.drop(sum);
    }

    Tensor target_rows(const std::vector<int>& word_ids,
                       const std::vector<std::vector<int>>& chars, const Runtime& rt) const {
        Tensor sum = add(gather_rows(word, word_ids), char_rows(chars));
        return rt.drop(sum);
    }
};

// --------------------------------------------------------------- attention

struct AttentionHead {
    Tensor wq, wk, wv;    // [d_model x d_k], [d_model x d_k], [d_model x d_v]
    Tensor rel_k, rel_v;  // optional, [2k+1 x d_k] / [2k+1 x d_v]
    bool relative = false;
    int clip = 0;
    std::size_t d_k = 0;
};

inline AttentionHead make_head(ParameterStore& ps, const std::string& prefix,
                               const ModelConfig& cfg, Rng& rng, bool relative) {
    AttentionHead h;
    h.d_k = cfg.d_k;
    h.wq = ps.add(prefix + ".wq", xavier_uniform(rng, cfg.d_model, cfg.d_k)).array;
    h.wk = ps.add(prefix + ".wk", xavier_uniform(rng, cfg.d_model, cfg.d_k)).array;
    h.wv = ps.add(prefix + ".wv", xavier_uniform(rng, cfg.d_model, cfg.d_v)).array;
    h.relative = relative;
    if (relative) {
        h.clip = static_cast<int>(cfg.rel_clip);
        const std::size_t rows = 2 * cfg.rel_clip + 1;
        h.rel_k = ps.add(prefix + ".rel_k", embedding_init(rng, rows, cfg.d_k)).array;
        h.rel_v = ps.add(prefix + ".rel_v", embedding_init(rng, rows, cfg.d_v)).array;
    }
    return h;
}

struct AttendResult {
    Tensor output;  // [m x d_v]
    Tensor weights; // [m x n]
};

inline Mask causal_mask(std::size_t m) {
    Mask mask(m * m, 0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j <= i; ++j) mask[i * m + j] = 1;
    return mask;
}

// Scaled dot-product attention for one head, optionally with clipped
// relative-position terms. query_offset shifts query indices for
// incremental decoding (a single query row standing at that absolute
// position). When a Runtime is given, dropout lands on the weights used
// for the value mix; the returned weights are the clean distribution.
inline AttendResult attend(const Tensor& queries, const Tensor& keys_values,
                           const AttentionHead& head, const Mask* valid = nullptr,
                           long query_offset = 0, const Runtime* rt = nullptr) {
    if (head.relative && query_offset == 0 && queries.rows() != keys_values.rows())
        throw ContractError("relative attention requires self-attention (m == n)");
    auto q = matmul(queries, head.wq);
    auto k = matmul(keys_values, head.wk);
    auto v = matmul(keys_values, head.wv);
    Tensor e = matmul_nt(q, k);
    if (head.relative)
        e = add(e, relative_logits(q, head.rel_k, head.clip, keys_values.rows(), query_offset));
    e = scale(e, Real(1) / static_cast<Real>(std::sqrt(double(head.d_k))));
    Tensor alpha = softmax_rows(e, valid);
    Tensor used = rt ? rt->drop(alpha) : alpha;
    Tensor out = matmul(used, v);
    if (head.relative) out = add(out, relative_values(used, head.rel_v, head.clip, query_offset));
    return {out, alpha};
}

// ----------------------------------------------------- coverage attention

// Per-head coverage accumulator. The paper tracks the accumulated
// exponentiated scores sum_{k<t} exp(e_j^k); this stores its logarithm so
// the division happens as a shift inside a stabilized softmax. Values are
// identical mathematically; exp(acc) is the paper's accumulator.
struct HeadCoverage {
    std::vector<Real> acc;
    std::size_t step = 0; // steps consumed so far
};

// Single decoding step of coverage-modified attention for one head.
// t is 1-based and must continue the state's step counter.
inline AttendResult attend_with_coverage(const Tensor& dec_state, const Tensor& enc_outputs,
                                         const AttentionHead& head, HeadCoverage& state,
                                         std::size_t t) {
    if (dec_state.rows() != 1)
        throw ContractError("attend_with_coverage expects a single decoder state row");
    if (t == 0 || t != state.step + 1)
        throw StateError("coverage step " + std::to_string(t) + " does not follow state counter " +
                         std::to_string(state.step));
    auto q = matmul(dec_state, head.wq);
    auto k = matmul(enc_outputs, head.wk);
    auto v = matmul(enc_outputs, head.wv);
    Tensor e = scale(matmul_nt(q, k), Real(1) / static_cast<Real>(std::sqrt(double(head.d_k))));

    Tensor g;
    if (t == 1) {
        g = e;
        state.acc.resize(e.cols());
        for (std::size_t j = 0; j < e.cols(); ++j) state.acc[j] = e.at(0, j);
    } else {
        if (state.acc.size() != e.cols())
            throw StateError("coverage accumulator length mismatch");
        Tensor shift(1, e.cols());
        for (std::size_t j = 0; j < e.cols(); ++j) shift.at(0, j) = state.acc[j];
        g = sub(e, shift);
        for (std::size_t j = 0; j < e.cols(); ++j)
            state.acc[j] = detail::log_add_exp(state.acc[j], e.at(0, j));
    }
    state.step = t;
    Tensor alpha = softmax_rows(g);
    return {matmul(alpha, v), alpha};
}

// Teacher-forced counterpart: one parallel pass whose per-row weights equal
// the sequential definition exactly (prefix scan over decoder positions).
// Coverage accumulators see raw logits; dropout only touches the weights
// used for the value mix.
inline AttendResult attend_coverage_parallel(const Tensor& dec_states, const Tensor& enc_outputs,
                                             const AttentionHead& head,
                                             const Runtime* rt = nullptr) {
    auto q = matmul(dec_states, head.wq);
    auto k = matmul(enc_outputs, head.wk);
    auto v = matmul(enc_outputs, head.wv);
    Tensor e = scale(matmul_nt(q, k), Real(1) / static_cast<Real>(std::sqrt(double(head.d_k))));
    Tensor alpha = softmax_rows(coverage_shift(e));
    Tensor used = rt ? rt->drop(alpha) : alpha;
    return {matmul(used, v), alpha};
}

// ---------------------------------------------------------- layer plumbing

struct LayerNormParams {
    Tensor gamma, beta;

    LayerNormParams() = default;
    LayerNormParams(ParameterStore& ps, const std::string& prefix, std::size_t d) {
        gamma = ps.add(prefix + ".gamma", Tensor(1, d, Real(1))).array;
        beta = ps.add(prefix + ".beta", Tensor(1, d)).array;
    }

    Tensor apply(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

struct FeedForward {
    Tensor w1, b1, w2, b2;

    FeedForward() = default;
    FeedForward(ParameterStore& ps, const std::string& prefix, std::size_t d_model,
                std::size_t d_ff, Rng& rng) {
        w1 = ps.add(prefix + ".w1", xavier_uniform(rng, d_model, d_ff)).array;
        b1 = ps.add(prefix + ".b1", Tensor(1, d_ff)).array;
        w2 = ps.add(prefix + ".w2", xavier_uniform(rng, d_ff, d_model)).array;
        b2 = ps.add(prefix + ".b2", Tensor(1, d_model)).array;
    }

    Tensor apply(const Tensor& x) const {
        return add_row(matmul(relu(add_row(matmul(x, w1), b1)), w2), b2);
    }
};

struct MultiHeadAttention {
    std::vector<AttentionHead> heads;
    Tensor wo, bo;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParameterStore& ps, const std::string& prefix, const ModelConfig& cfg,
                       Rng& rng, bool relative) {
        for (std::size_t h = 0; h < cfg.heads; ++h)
            heads.push_back(make_head(ps, prefix + ".head" + std::to_string(h), cfg, rng, relative));
        wo = ps.add(prefix + ".wo", xavier_uniform(rng, cfg.heads * cfg.d_v, cfg.d_model)).array;
        bo = ps.add(prefix + ".bo", Tensor(1, cfg.d_model)).array;
    }

    Tensor project(const std::vector<Tensor>& head_outs) const {
        return add_row(matmul(concat_cols(head_outs), wo), bo);
    }

    Tensor full(const Tensor& q_in, const Tensor& kv_in, const Mask* valid, const Runtime& rt,
                long query_offset = 0) const {
        std::vector<Tensor> outs;
        outs.reserve(heads.size());
        for (const auto& h : heads)
            outs.push_back(attend(q_in, kv_in, h, valid, query_offset, &rt).output);
        return project(outs);
    }

    Tensor coverage_parallel(const Tensor& dec, const Tensor& enc, const Runtime& rt) const {
        std::vector<Tensor> outs;
        outs.reserve(heads.size());
        for (const auto& h : heads)
            outs.push_back(attend_coverage_parallel(dec, enc, h, &rt).output);
        return project(outs);
    }

    // incremental variant; one HeadCoverage per head, t is 1-based
    // (inference path: no dropout on coverage weights)
    Tensor coverage_step(const Tensor& dec_row, const Tensor& enc,
                         std::vector<HeadCoverage>& states, std::size_t t,
                         const Runtime&) const {
        if (states.size() != heads.size())
            throw StateError("coverage state has wrong head count");
        std::vector<Tensor> outs;
        outs.reserve(heads.size());
        for (std::size_t h = 0; h < heads.size(); ++h)
            outs.push_back(attend_with_coverage(dec_row, enc, heads[h], states[h], t).output);
        return project(outs);
    }
};

// ------------------------------------------------------------------ stacks

struct EncoderLayerParams {
    MultiHeadAttention self;
    LayerNormParams ln1, ln2;
    FeedForward ff;

    EncoderLayerParams() = default;
    EncoderLayerParams(ParameterStore& ps, const std::string& prefix, const ModelConfig& cfg,
                       Rng& rng)
        : self(ps, prefix + ".self", cfg, rng, /*relative=*/false),
          ln1(ps, prefix + ".ln1", cfg.d_model),
          ln2(ps, prefix + ".ln2", cfg.d_model),
          ff(ps, prefix + ".ff", cfg.d_model, cfg.d_ff, rng) {}
};

// Post-norm transformer encoder returning every layer's output for
// layer-wise coordination with the decoder.
struct EncoderStack {
    std::vector<EncoderLayerParams> layers;

    EncoderStack() = default;
    EncoderStack(ParameterStore& ps, const std::string& prefix, const ModelConfig& cfg, Rng& rng,
                 std::size_t depth) {
        for (std::size_t l = 0; l < depth; ++l)
            layers.emplace_back(ps, prefix + ".layer" + std::to_string(l), cfg, rng);
    }

    std::vector<Tensor> forward(const Tensor& embedded, const Runtime& rt) const {
        std::vector<Tensor> outs;
        outs.reserve(layers.size());
        Tensor x = embedded;
        for (const auto& layer : layers) {
            Tensor a = layer.self.full(x, x, nullptr, rt);
            x = layer.ln1.apply(add(x, rt.drop(a)));
            Tensor f = layer.ff.apply(x);
            x = layer.ln2.apply(add(x, rt.drop(f)));
            outs.push_back(x);
        }
        return outs;
    }
};

struct DecoderLayerParams {
    MultiHeadAttention self;  // masked, relative positions
    MultiHeadAttention cross; // coverage-modified, against the matching encoder layer
    LayerNormParams ln1, ln2, ln3;
    FeedForward ff;

    DecoderLayerParams() = default;
    DecoderLayerParams(ParameterStore& ps, const std::string& prefix, const ModelConfig& cfg,
                       Rng& rng)
        : self(ps, prefix + ".self", cfg, rng, /*relative=*/true),
          cross(ps, prefix + ".cross", cfg, rng, /*relative=*/false),
          ln1(ps, prefix + ".ln1", cfg.d_model),
          ln2(ps, prefix + ".ln2", cfg.d_model),
          ln3(ps, prefix + ".ln3", cfg.d_model),
          ff(ps, prefix + ".ff", cfg.d_model, cfg.d_ff, rng) {}
};

// Per-decode coverage bookkeeping across all layers and heads.
struct CoverageState {
    std::vector<std::vector<HeadCoverage>> per_layer;
    std::size_t step = 0;

    void reset(std::size_t layers, std::size_t heads) {
        per_layer.assign(layers, std::vector<HeadCoverage>(heads));
        step = 0;
    }
};

struct DecoderStack {
    std::vector<DecoderLayerParams> layers;

    DecoderStack() = default;
    DecoderStack(ParameterStore& ps, const std::string& prefix, const ModelConfig& cfg, Rng& rng) {
        for (std::size_t l = 0; l < cfg.layers; ++l)
            layers.emplace_back(ps, prefix + ".layer" + std::to_string(l), cfg, rng);
    }

    // Teacher-forced pass over all target positions at once. Decoder layer i
    // attends encoder layer i's output; causal masking hides the future.
    std::vector<Tensor> forward_parallel(const Tensor& embedded_targets,
                                         const std::vector<Tensor>& encoder_layers,
                                         const Runtime& rt) const {
        if (encoder_layers.size() != layers.size())
            throw ConfigError("layer-wise coordination requires equal encoder/decoder depth: " +
                              std::to_string(encoder_layers.size()) + " vs " +
                              std::to_string(layers.size()));
        const Mask mask = causal_mask(embedded_targets.rows());
        std::vector<Tensor> outs;
        outs.reserve(layers.size());
        Tensor x = embedded_targets;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& layer = layers[i];
            Tensor a = layer.self.full(x, x, &mask, rt);
            x = layer.ln1.apply(add(x, rt.drop(a)));
            Tensor c = layer.cross.coverage_parallel(x, encoder_layers[i], rt);
            x = layer.ln2.apply(add(x, rt.drop(c)));
            Tensor f = layer.ff.apply(x);
            x = layer.ln3.apply(add(x, rt.drop(f)));
            outs.push_back(x);
        }
        return outs;
    }
};

// Incremental decoding session: caches every layer's input rows so step t
// computes only position t, with coverage accumulators carried in state.
class DecoderSession {
public:
    DecoderSession(const DecoderStack& stack, std::vector<Tensor> encoder_layers)
        : stack_(&stack), enc_(std::move(encoder_layers)) {
        if (enc_.size() != stack.layers.size())
            throw ConfigError("decoder session: encoder depth mismatch");
        coverage_.reset(stack.layers.size(), stack.layers[0].self.heads.size());
        inputs_.resize(stack.layers.size());
    }

    std::size_t step_count() const { return t_; }
    CoverageState& coverage() { return coverage_; }

    // Feed the embedding of the next target token; returns each layer's
    // output row for this position.
    std::vector<Tensor> step(const Tensor& embedded_row, const Runtime& rt) {
        if (embedded_row.rows() != 1) throw ContractError("decoder step expects one row");
        ++t_;
        std::vector<Tensor> outs;
        outs.reserve(stack_->layers.size());
        Tensor x = embedded_row;
        for (std::size_t i = 0; i < stack_->layers.size(); ++i) {
            const auto& layer = stack_->layers[i];
            inputs_[i].push_back(x);
            Tensor kv = inputs_[i].size() == 1 ? x : concat_rows(inputs_[i]);
            Tensor a = layer.self.full(x, kv, nullptr, rt, static_cast<long>(t_ - 1));
            x = layer.ln1.apply(add(x, rt.drop(a)));
            Tensor c = layer.cross.coverage_step(x, enc_[i], coverage_.per_layer[i], t_, rt);
            x = layer.ln2.apply(add(x, rt.drop(c)));
            Tensor f = layer.ff.apply(x);
            x = layer.ln3.apply(add(x, rt.drop(f)));
            outs.push_back(x);
        }
        coverage_.step = t_;
        return outs;
    }

private:
    const DecoderStack* stack_;
    std::vector<Tensor> enc_;
    CoverageState coverage_;
    std::vector<std::vector<Tensor>> inputs_; // per layer, per position
    std::size_t t_ = 0;
};

} // namespace segnet
