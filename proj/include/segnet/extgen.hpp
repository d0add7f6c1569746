#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "segnet/corpus.hpp"
#include "segnet/neural.hpp"

namespace segnet {

// Copy-side view of one document: the encoder's top layer, which source
// positions are blocked (constituents of a present keyphrase), and how each
// source position maps into the copy-extended vocabulary.
struct CopyContext {
    Tensor encoder_top;                    // o^L, [n x d_model]
    std::vector<std::uint8_t> blocked;     // 1 = no copying from this position
    std::vector<int> ext_ids;              // per position: column in V + OOV
    std::vector<std::string> oov_words;    // ext id V+i -> surface form
    std::size_t vocab_size = 0;

    std::size_t ext_vocab() const { return vocab_size + oov_words.size(); }

    bool fully_blocked() const {
        for (auto b : blocked)
            if (!b) return false;
        return true;
    }

    Mask copy_mask() const {
        Mask m(blocked.size());
        for (std::size_t i = 0; i < blocked.size(); ++i) m[i] = blocked[i] ? 0 : 1;
        return m;
    }

    // id for a decoded/target token over V + OOV source words
    int ext_token_id(const std::string& word, const Vocab& vocab) const {
        if (vocab.contains(word)) return vocab.id(word);
        for (std::size_t i = 0; i < oov_words.size(); ++i)
            if (oov_words[i] == word) return static_cast<int>(vocab_size + i);
        return Vocab::kUnkId;
    }

    std::string ext_word(int id, const Vocab& vocab) const {
        if (id < static_cast<int>(vocab_size)) return vocab.word(id);
        return oov_words.at(static_cast<std::size_t>(id) - vocab_size);
    }
};

inline CopyContext make_copy_context(Tensor encoder_top,
                                     const std::vector<std::string>& source_tokens,
                                     std::vector<std::uint8_t> blocked, const Vocab& vocab) {
    if (blocked.size() != source_tokens.size())
        throw ContractError("copy context: blocked bits must cover every source token");
    CopyContext ctx;
    ctx.encoder_top = std::move(encoder_top);
    ctx.blocked = std::move(blocked);
    ctx.vocab_size = vocab.size();
    std::unordered_map<std::string, int> oov;
    for (const auto& tok : source_tokens) {
        if (vocab.contains(tok)) {
            ctx.ext_ids.push_back(vocab.id(tok));
        } else {
            auto [it, fresh] = oov.emplace(tok, static_cast<int>(ctx.vocab_size + oov.size()));
            if (fresh) ctx.oov_words.push_back(tok);
            ctx.ext_ids.push_back(it->second);
        }
    }
    return ctx;
}

// Distributions produced for one decoding step (or one row of the
// teacher-forced pass).
struct StepOutput {
    Tensor final_dist;   // over the copy-extended vocabulary (plain V when fully blocked)
    Tensor tag_dist;     // over the POS tag inventory
    Tensor gate;         // p(u_t = 1); zero row when copying is fully blocked
    Tensor copy_weights; // masked copy attention a_t (zero row when fully blocked)
};

// Joint present-keyphrase extractor and absent-keyphrase generator.
class ExtGenModel {
public:
    ModelConfig cfg;
    ParameterStore params;
    EmbeddingLayer embed;
    EncoderStack encoder;
    DecoderStack decoder;
    Tensor wr1, br1, wr2, br2; // extractor head
    Tensor wv, bv;             // vocabulary projection
    Tensor wtag, btag;         // POS tag head, read at layer pos_tag_layer
    Tensor watt;               // bilinear copy attention
    Tensor wu, bu;             // copy gate over [h || c]

    explicit ExtGenModel(const ModelConfig& config) : cfg(config) {
        cfg.finalize();
        Rng rng(cfg.seed + 1); // distinct stream from the selector
        embed = EmbeddingLayer(params, "embed", cfg, rng);
        encoder = EncoderStack(params, "encoder", cfg, rng, cfg.layers);
        decoder = DecoderStack(params, "decoder", cfg, rng);
        const std::size_t d = cfg.d_model;
        wr1 = params.add("extractor.w1", xavier_uniform(rng, d, d)).array;
        br1 = params.add("extractor.b1", Tensor(1, d)).array;
        wr2 = params.add("extractor.w2", xavier_uniform(rng, d, 1)).array;
        br2 = params.add("extractor.b2", Tensor(1, 1)).array;
        wv = params.add("gen.wv", xavier_uniform(rng, d, cfg.vocab_size)).array;
        bv = params.add("gen.bv", Tensor(1, cfg.vocab_size)).array;
        wtag = params.add("gen.wtag", xavier_uniform(rng, d, universal_tags().size())).array;
        btag = params.add("gen.btag", Tensor(1, universal_tags().size())).array;
        watt = params.add("copy.watt", xavier_uniform(rng, d, d)).array;
        wu = params.add("copy.wu", xavier_uniform(rng, 2 * d, 1)).array;
        bu = params.add("copy.bu", Tensor(1, 1)).array;
    }

    std::vector<Tensor> encode(const TokenFeatures& f, const Runtime& rt) const {
        if (f.words.empty()) throw ContractError("encode: empty input");
        if (f.words.size() > cfg.max_len)
            throw ContractError("encode: input length " + std::to_string(f.words.size()) +
                                " exceeds max_len " + std::to_string(cfg.max_len));
        return encoder.forward(embed.source_rows(f, rt), rt);
    }

    // p(word is a constituent of a present keyphrase), per token
    Tensor extract_probs(const Tensor& encoder_top, const Runtime&) const {
        return sigmoid(add_row(matmul(tanh_op(add_row(matmul(encoder_top, wr1), br1)), wr2), br2));
    }

    // shared head computation over decoder states
    StepOutput output_heads(const Tensor& h_top, const Tensor& h_tag, const CopyContext& copy,
                            const Runtime&) const {
        if (copy.vocab_size != wv.cols())
            throw ContractError("model vocabulary width " + std::to_string(wv.cols()) +
                                " differs from corpus vocabulary " +
                                std::to_string(copy.vocab_size) +
                                " (set vocab_size to the built vocabulary's size)");
        StepOutput out;
        out.tag_dist = softmax_rows(add_row(matmul(h_tag, wtag), btag));
        Tensor p_gen = softmax_rows(add_row(matmul(h_top, wv), bv));
        const std::size_t steps = h_top.rows();
        if (copy.fully_blocked()) {
            // copying forbidden everywhere: the mixture collapses to the
            // generation softmax exactly
            out.final_dist = p_gen;
            out.gate = Tensor(steps, 1);
            out.copy_weights = Tensor(steps, copy.blocked.size());
            return out;
        }
        Tensor proj = matmul(copy.encoder_top, watt);     // [n x d]
        Tensor logits = matmul_nt(h_top, proj);           // [t x n]
        Mask valid = copy.copy_mask();
        Mask full(steps * copy.blocked.size());
        for (std::size_t t = 0; t < steps; ++t)
            std::copy(valid.begin(), valid.end(), full.begin() + t * valid.size());
        Tensor a = softmax_rows(logits, &full);
        Tensor context = matmul(a, copy.encoder_top);     // [t x d]
        Tensor gate = sigmoid(add_row(matmul(concat_cols({h_top, context}), wu), bu));
        out.final_dist = mix_copy(p_gen, a, gate, copy.ext_ids, copy.ext_vocab());
        out.gate = gate;
        out.copy_weights = a;
        return out;
    }

    // One parallel teacher-forced pass over all positions; row t reproduces
    // the sequential decode_step exactly (coverage via prefix scan, causal
    // masking elsewhere).
    struct ForwardResult {
        std::vector<Tensor> encoder_layers;
        Tensor extract; // [n x 1]
        StepOutput steps;
    };

    ForwardResult teacher_forced_forward(const TokenFeatures& src,
                                         const std::vector<int>& target_in_words,
                                         const std::vector<std::vector<int>>& target_in_chars,
                                         const std::vector<std::uint8_t>& blocked,
                                         const std::vector<std::string>& src_tokens,
                                         const Vocab& vocab, const Runtime& rt) const {
        if (target_in_words.size() > cfg.decode_max_len + 2)
            throw ContractError("teacher forcing: target longer than the decode limit");
        ForwardResult res;
        res.encoder_layers = encode(src, rt);
        res.extract = extract_probs(res.encoder_layers.back(), rt);
        CopyContext copy =
            make_copy_context(res.encoder_layers.back(), src_tokens, blocked, vocab);
        Tensor y = embed.target_rows(target_in_words, target_in_chars, rt);
        auto dec = decoder.forward_parallel(y, res.encoder_layers, rt);
        res.steps = output_heads(dec.back(), dec[cfg.pos_tag_layer - 1], copy, rt);
        return res;
    }
};

// Incremental decoding: one CoverageState-backed session per document.
class ExtGenSession {
public:
    ExtGenSession(const ExtGenModel& model, std::vector<Tensor> encoder_layers, CopyContext copy)
        : model_(&model),
          copy_(std::move(copy)),
          session_(model.decoder, std::move(encoder_layers)) {}

    const CopyContext& copy() const { return copy_; }
    std::size_t steps() const { return session_.step_count(); }

    // feed the next input token (surface form resolves embeddings), get the
    // distributions for the following position
    StepOutput step(const std::string& input_token, const Vocab& vocab) {
        Runtime rt; // inference mode
        std::vector<int> word = {vocab.id(input_token)};
        std::vector<std::vector<int>> chars = {
            char_ids_of(input_token, model_->cfg.char_width)};
        auto outs = session_.step(model_->embed.target_rows(word, chars, rt), rt);
        return model_->output_heads(outs.back(), outs[model_->cfg.pos_tag_layer - 1], copy_, rt);
    }

private:
    const ExtGenModel* model_;
    CopyContext copy_;
    DecoderSession session_;
};

// ------------------------------------------------------------ span assembly

struct ExtractedPhrase {
    std::vector<std::string> tokens;
    Span span;
};

// Maximal runs of tokens at or above the threshold become phrases; runs
// split at sentence boundaries; stem-identical duplicates keep the first.
inline std::vector<ExtractedPhrase> extract_spans(const std::vector<double>& probs,
                                                  const std::vector<std::string>& tokens,
                                                  const std::vector<int>& segment_ids,
                                                  double threshold = 0.5) {
    if (probs.size() != tokens.size() || segment_ids.size() != tokens.size())
        throw ContractError("extract_spans: unaligned inputs");
    std::vector<ExtractedPhrase> out;
    std::set<std::string> seen;
    std::size_t i = 0;
    while (i < tokens.size()) {
        if (probs[i] < threshold) { ++i; continue; }
        std::size_t j = i;
        while (j + 1 < tokens.size() && probs[j + 1] >= threshold &&
               segment_ids[j + 1] == segment_ids[i])
            ++j;
        ExtractedPhrase ph;
        ph.span = {i, j + 1};
        ph.tokens.assign(tokens.begin() + i, tokens.begin() + j + 1);
        if (seen.insert(stem_key(ph.tokens)).second) out.push_back(std::move(ph));
        i = j + 1;
    }
    return out;
}

} // namespace segnet
