#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "segnet/corpus.hpp"
#include "segnet/neural.hpp"

namespace segnet {

// One maxout layer: two batch-normalized linear pieces, elementwise max.
struct MaxoutLayer {
    Tensor w0, b0, w1, b1;
    Tensor g0, be0, g1, be1;
    Parameter* rm0 = nullptr;
    Parameter* rv0 = nullptr;
    Parameter* rm1 = nullptr;
    Parameter* rv1 = nullptr;

    MaxoutLayer() = default;
    MaxoutLayer(ParameterStore& ps, const std::string& prefix, std::size_t in, std::size_t out,
                Rng& rng) {
        w0 = ps.add(prefix + ".w0", xavier_uniform(rng, in, out)).array;
        b0 = ps.add(prefix + ".b0", Tensor(1, out)).array;
        w1 = ps.add(prefix + ".w1", xavier_uniform(rng, in, out)).array;
        b1 = ps.add(prefix + ".b1", Tensor(1, out)).array;
        g0 = ps.add(prefix + ".bn0.gamma", Tensor(1, out, Real(1))).array;
        be0 = ps.add(prefix + ".bn0.beta", Tensor(1, out)).array;
        g1 = ps.add(prefix + ".bn1.gamma", Tensor(1, out, Real(1))).array;
        be1 = ps.add(prefix + ".bn1.beta", Tensor(1, out)).array;
        rm0 = &ps.add(prefix + ".bn0.running_mean", Tensor(1, out), false);
        rv0 = &ps.add(prefix + ".bn0.running_var", Tensor(1, out, Real(1)), false);
        rm1 = &ps.add(prefix + ".bn1.running_mean", Tensor(1, out), false);
        rv1 = &ps.add(prefix + ".bn1.running_var", Tensor(1, out, Real(1)), false);
    }

    Tensor apply(const Tensor& x, const Runtime& rt) const {
        Tensor z0 = batch_norm(add_row(matmul(x, w0), b0), g0, be0, rm0->array.values(),
                               rv0->array.values(), rt.train, rt.train && rt.bn_update);
        Tensor z1 = batch_norm(add_row(matmul(x, w1), b1), g1, be1, rm1->array.values(),
                               rv1->array.values(), rt.train, rt.train && rt.bn_update);
        return max_elem(z0, z1);
    }
};

// Sentence-level salience classifier: shared embedding structure, an
// encoder stack over the sentence, max+mean pooling, then a three-layer
// batch-normalized maxout network ending in one sigmoid unit.
class SelectorModel {
public:
    ModelConfig cfg;
    ParameterStore params;
    EmbeddingLayer embed;
    EncoderStack encoder;
    MaxoutLayer fc1, fc2, fc3;

    explicit SelectorModel(const ModelConfig& config) : cfg(config) {
        cfg.finalize();
        Rng rng(cfg.seed);
        embed = EmbeddingLayer(params, "embed", cfg, rng);
        encoder = EncoderStack(params, "encoder", cfg, rng, cfg.selector_layers);
        const std::size_t d = cfg.d_model;
        fc1 = MaxoutLayer(params, "cls.fc1", 2 * d, d, rng);
        fc2 = MaxoutLayer(params, "cls.fc2", d, std::max<std::size_t>(1, d / 2), rng);
        fc3 = MaxoutLayer(params, "cls.fc3", std::max<std::size_t>(1, d / 2), 1, rng);
    }

    // max (+) mean pooled sentence embedding, [1 x 2*d_model]
    Tensor sentence_vector(const TokenFeatures& f, const Runtime& rt) const {
        if (f.words.empty()) throw ContractError("score_sentence: empty sentence");
        auto outs = encoder.forward(embed.source_rows(f, rt), rt);
        const Tensor& top = outs.back();
        return concat_cols({max_pool_rows(top), mean_pool_rows(top)});
    }

    // salience probabilities for a batch of pooled sentence vectors
    Tensor classify(const Tensor& pooled, const Runtime& rt) const {
        Tensor h = fc1.apply(pooled, rt);
        h = rt.drop(h);
        h = fc2.apply(h, rt);
        h = rt.drop(h);
        h = fc3.apply(h, rt);
        return sigmoid(h);
    }

    TokenFeatures sentence_features(const Document& doc, std::size_t sentence,
                                    const Vocab& vocab) const {
        const auto [lo, hi] = doc.sentences[sentence];
        if (lo >= hi) throw ContractError("score_sentence: empty sentence");
        std::vector<std::string> toks(doc.tokens.begin() + lo, doc.tokens.begin() + hi);
        std::vector<std::string> tags(doc.pos_tags.begin() + lo, doc.pos_tags.begin() + hi);
        std::vector<int> segs(hi - lo, static_cast<int>(sentence));
        return source_features(toks, tags, segs, vocab, cfg);
    }

    // deterministic inference-mode probability for one sentence
    double score_sentence(const Document& doc, std::size_t sentence, const Vocab& vocab) const {
        NoGradGuard ng;
        Runtime rt; // eval: dropout off, batch norm uses running statistics
        auto p = classify(sentence_vector(sentence_features(doc, sentence, vocab), rt), rt);
        return static_cast<double>(p.item());
    }

    std::vector<double> score_document(const Document& doc, const Vocab& vocab) const {
        std::vector<double> probs;
        probs.reserve(doc.sentences.size());
        for (std::size_t s = 0; s < doc.sentences.size(); ++s)
            probs.push_back(score_sentence(doc, s, vocab));
        return probs;
    }
};

// Budgeted selection: sentences at or above the threshold in document
// order, skipping any that would overflow the word budget; if nothing
// qualifies, fall back to the leading sentences that fit.
inline std::vector<std::size_t> select_sentences(const std::vector<std::size_t>& lengths,
                                                 const std::vector<double>& probs,
                                                 std::size_t budget, double threshold = 0.5) {
    if (lengths.size() != probs.size())
        throw ContractError("select_sentences: lengths/probs mismatch");
    std::vector<std::size_t> out;
    std::size_t used = 0;
    for (std::size_t s = 0; s < lengths.size(); ++s) {
        if (probs[s] < threshold) continue;
        if (used + lengths[s] > budget) continue;
        out.push_back(s);
        used += lengths[s];
    }
    if (out.empty()) {
        used = 0;
        for (std::size_t s = 0; s < lengths.size(); ++s) {
            if (used + lengths[s] > budget) break;
            out.push_back(s);
            used += lengths[s];
        }
    }
    return out;
}

inline std::vector<std::size_t> select_sentences(const Document& doc,
                                                 const std::vector<double>& probs,
                                                 std::size_t budget, double threshold = 0.5) {
    std::vector<std::size_t> lengths(doc.sentences.size());
    for (std::size_t s = 0; s < doc.sentences.size(); ++s) lengths[s] = doc.sentence_words(s);
    return select_sentences(lengths, probs, budget, threshold);
}

// Sentences carrying gold salience, under the same budget rule.
inline std::vector<std::size_t> gold_selection(const Document& doc, std::size_t budget) {
    std::vector<double> probs(doc.salience.size());
    for (std::size_t s = 0; s < probs.size(); ++s) probs[s] = doc.salience[s] ? 1.0 : 0.0;
    return select_sentences(doc, probs, budget);
}

struct SelectionMetrics {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
};

// Micro-averaged over the corpus; zero denominators give zero scores.
inline SelectionMetrics selection_metrics(
    const std::vector<std::vector<std::size_t>>& selected,
    const std::vector<std::vector<std::uint8_t>>& gold) {
    if (selected.size() != gold.size())
        throw ContractError("selection_metrics: corpus size mismatch");
    std::size_t hit = 0, sel = 0, pos = 0;
    for (std::size_t d = 0; d < selected.size(); ++d) {
        for (std::size_t s : selected[d]) {
            ++sel;
            if (s < gold[d].size() && gold[d][s]) ++hit;
        }
        for (auto b : gold[d]) pos += b ? 1 : 0;
    }
    SelectionMetrics m;
    m.precision = sel ? static_cast<double>(hit) / static_cast<double>(sel) : 0.0;
    m.recall = pos ? static_cast<double>(hit) / static_cast<double>(pos) : 0.0;
    m.f1 = (m.precision + m.recall) > 0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    return m;
}

} // namespace segnet
