#pragma once

#include <array>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "segnet/extgen.hpp"
#include "segnet/selector.hpp"

namespace segnet {

// Final predictions for one document.
struct PredictionSet {
    std::string id;
    std::vector<std::vector<std::string>> present;
    std::vector<std::vector<std::string>> absent;
    std::vector<std::vector<std::string>> absent_tags; // aligned per phrase
    std::vector<std::string> decoder_trace;            // raw decoded tokens
    std::vector<double> gate_trace;                    // p(u=1) per decoded token
    bool empty_input = false;
};

// Distribution provider for one decoding step: given nothing (state lives
// with the provider), produce the next-step distribution over the extended
// vocabulary. Tests inject rigged providers.
using StepFn = std::function<Tensor()>;
using FeedFn = std::function<void(const std::string&)>; // consume chosen token

struct GreedyHooks {
    StepFn step;
    FeedFn feed;
    std::function<std::string(int)> word_of; // extended id -> surface
    int eos_id = Vocab::kEosId;
    int sep_id = Vocab::kSepId;
};

// Greedy search with trigram blocking: never emit a token that would
// complete a trigram already present in the decoded sequence. Separators
// reset the trigram window (phrases are independent units); sequences
// shorter than three tokens are never blocked. Ties break toward the
// lower token id. If every candidate is blocked, emit eos.
inline std::vector<int> greedy_decode(const GreedyHooks& hooks, std::size_t max_len) {
    std::vector<int> out;
    std::set<std::array<int, 3>> trigrams;
    std::vector<int> window; // token ids since the last separator
    hooks.feed(kBosTok);
    while (out.size() < max_len) {
        Tensor dist = hooks.step();
        // rank candidates by probability, ties toward lower id
        int best = -1;
        Real best_p = -1;
        for (std::size_t v = 0; v < dist.cols(); ++v) {
            const Real p = dist.at(0, v);
            if (p <= best_p) continue;
            if (window.size() >= 2) {
                std::array<int, 3> cand = {window[window.size() - 2], window.back(),
                                           static_cast<int>(v)};
                if (trigrams.count(cand)) continue;
            }
            best = static_cast<int>(v);
            best_p = p;
        }
        if (best < 0) best = hooks.eos_id; // everything blocked
        out.push_back(best);
        if (best == hooks.eos_id) break;
        if (best == hooks.sep_id) {
            window.clear();
        } else {
            window.push_back(best);
            if (window.size() >= 3)
                trigrams.insert({window[window.size() - 3], window[window.size() - 2],
                                 window.back()});
        }
        hooks.feed(hooks.word_of(best));
    }
    return out;
}

// Split a decoded id sequence on the separator, dropping specials and
// empty segments; tags slice identically when provided.
struct SplitDecoded {
    std::vector<std::vector<std::string>> phrases;
    std::vector<std::vector<std::string>> tags;
};

inline SplitDecoded split_decoded(const std::vector<int>& ids,
                                  const std::function<std::string(int)>& word_of,
                                  const std::vector<std::string>* tag_per_step = nullptr) {
    SplitDecoded out;
    std::vector<std::string> cur_tokens, cur_tags;
    auto flush = [&] {
        if (!cur_tokens.empty()) {
            out.phrases.push_back(cur_tokens);
            out.tags.push_back(cur_tags);
        }
        cur_tokens.clear();
        cur_tags.clear();
    };
    for (std::size_t t = 0; t < ids.size(); ++t) {
        const int id = ids[t];
        if (id == Vocab::kEosId) break;
        if (id == Vocab::kSepId) {
            flush();
            continue;
        }
        if (id == Vocab::kBosId || id == Vocab::kPadId) continue;
        cur_tokens.push_back(word_of(id));
        cur_tags.push_back(tag_per_step ? (*tag_per_step)[t] : std::string());
    }
    flush();
    return out;
}

struct PredictOptions {
    std::size_t budget = 200;
    double select_threshold = 0.5;
    double extract_threshold = 0.5;
    std::size_t max_len = 40;
    bool drop_absent_duplicating_present = true;
};

// Full inference pipeline: select salient sentences, extract present
// phrases, block their tokens for copying, greedily decode the absent
// phrases, then deduplicate by stemmed identity within and across lists.
inline PredictionSet predict(const Document& doc, const SelectorModel& selector,
                             const ExtGenModel& extgen, const Vocab& vocab,
                             const PredictOptions& opt = {}) {
    NoGradGuard ng;
    PredictionSet out;
    out.id = doc.id;
    if (doc.tokens.empty()) {
        out.empty_input = true;
        return out;
    }

    auto probs = selector.score_document(doc, vocab);
    auto selected = select_sentences(doc, probs, opt.budget, opt.select_threshold);
    if (selected.empty()) {
        out.empty_input = true;
        return out;
    }
    auto input = build_selected_input(doc, selected);

    Runtime rt; // inference
    auto features = source_features(input.tokens, input.tags, input.segment_ids, vocab,
                                    extgen.cfg);
    auto enc_layers = extgen.encode(features, rt);
    auto eprobs_t = extgen.extract_probs(enc_layers.back(), rt);
    std::vector<double> eprobs(eprobs_t.rows());
    for (std::size_t i = 0; i < eprobs.size(); ++i)
        eprobs[i] = static_cast<double>(eprobs_t.at(i, 0));

    auto extracted = extract_spans(eprobs, input.tokens, input.segment_ids,
                                   opt.extract_threshold);
    std::set<std::string> present_keys;
    for (const auto& ph : extracted) {
        out.present.push_back(ph.tokens);
        present_keys.insert(stem_key(ph.tokens));
    }

    // copy blocking from the extractor's own predictions
    std::vector<std::uint8_t> blocked(input.tokens.size(), 0);
    for (const auto& ph : extracted)
        for (std::size_t t = ph.span.first; t < ph.span.second; ++t) blocked[t] = 1;

    CopyContext copy = make_copy_context(enc_layers.back(), input.tokens, blocked, vocab);
    ExtGenSession session(extgen, enc_layers, copy);

    std::vector<std::string> step_tags;
    GreedyHooks hooks;
    auto pending_tags = std::make_shared<Tensor>();
    auto pending_dist = std::make_shared<Tensor>();
    auto pending_gate = std::make_shared<double>(0.0);
    hooks.word_of = [&copy, &vocab](int id) { return copy.ext_word(id, vocab); };
    hooks.feed = [&session, &vocab, pending_tags, pending_dist,
                  pending_gate](const std::string& tok) {
        auto so = session.step(tok, vocab);
        *pending_tags = so.tag_dist;
        *pending_dist = so.final_dist;
        *pending_gate = static_cast<double>(so.gate.at(0, 0));
    };
    hooks.step = [&out, &step_tags, pending_tags, pending_dist, pending_gate]() {
        // record the argmax tag and the copy gate alongside each emitted token
        int best_tag = 0;
        for (std::size_t j = 1; j < pending_tags->cols(); ++j)
            if (pending_tags->at(0, j) > pending_tags->at(0, best_tag))
                best_tag = static_cast<int>(j);
        step_tags.push_back(universal_tags()[static_cast<std::size_t>(best_tag)]);
        out.gate_trace.push_back(*pending_gate);
        return *pending_dist;
    };

    auto ids = greedy_decode(hooks, opt.max_len);
    for (int id : ids) out.decoder_trace.push_back(copy.ext_word(id, vocab));

    auto split = split_decoded(ids, hooks.word_of, &step_tags);
    std::set<std::string> absent_keys;
    for (std::size_t p = 0; p < split.phrases.size(); ++p) {
        const std::string key = stem_key(split.phrases[p]);
        if (absent_keys.count(key)) continue;
        if (opt.drop_absent_duplicating_present && present_keys.count(key)) continue;
        absent_keys.insert(key);
        out.absent.push_back(split.phrases[p]);
        out.absent_tags.push_back(split.tags[p]);
    }
    return out;
}

} // namespace segnet
