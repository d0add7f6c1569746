#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <limits>
#include <set>
#include <string>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"

#include "segnet/error.hpp"
#include "segnet/stemmer.hpp"

namespace segnet {

// Reserved vocabulary entries, dense from id 0.
inline constexpr const char* kPadTok = "<pad>";
inline constexpr const char* kUnkTok = "<unk>";
inline constexpr const char* kBosTok = "<bos>";
inline constexpr const char* kEosTok = "<eos>";
inline constexpr const char* kSepTok = "<sep>";
inline constexpr const char* kDigitTok = "<digit>";

using Span = std::pair<std::size_t, std::size_t>; // [start, end)

// ------------------------------------------------------------- tokenization

// Lowercase, split alphanumeric runs from punctuation, replace each maximal
// digit run with the digit symbol. "b2b" becomes "b<digit>b"; a pure number
// becomes exactly "<digit>".
inline std::string normalize_digits(const std::string& tok) {
    std::string out;
    std::size_t i = 0;
    while (i < tok.size()) {
        if (std::isdigit(static_cast<unsigned char>(tok[i]))) {
            while (i < tok.size() && std::isdigit(static_cast<unsigned char>(tok[i]))) ++i;
            out += kDigitTok;
        } else {
            out += tok[i++];
        }
    }
    return out;
}

inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(normalize_digits(cur));
            cur.clear();
        }
    };
    for (char raw : text) {
        const auto c = static_cast<unsigned char>(raw);
        if (std::isspace(c)) {
            flush();
        } else if (std::isalnum(c)) {
            cur += static_cast<char>(std::tolower(c));
        } else {
            flush();
            out.push_back(std::string(1, static_cast<char>(c)));
        }
    }
    flush();
    return out;
}

// Sentence boundaries by terminator tokens; a run of terminators stays with
// its sentence, and a trailing fragment without a terminator still counts.
inline std::vector<Span> split_sentences(const std::vector<std::string>& tokens,
                                         std::size_t begin = 0) {
    static const std::unordered_set<std::string> kTerm = {".", "!", "?"};
    std::vector<Span> out;
    std::size_t start = begin;
    std::size_t i = begin;
    while (i < tokens.size()) {
        if (kTerm.count(tokens[i])) {
            while (i + 1 < tokens.size() && kTerm.count(tokens[i + 1])) ++i;
            out.emplace_back(start, i + 1);
            start = i + 1;
        }
        ++i;
    }
    if (start < tokens.size()) out.emplace_back(start, tokens.size());
    return out;
}

// ---------------------------------------------------------------- POS tags

// Universal 17-tag set plus a dedicated tag for decoder specials.
inline const std::vector<std::string>& universal_tags() {
    static const std::vector<std::string> tags = {
        "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
        "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X", "SPECIAL"};
    return tags;
}

inline int tag_id(const std::string& tag) {
    const auto& tags = universal_tags();
    for (std::size_t i = 0; i < tags.size(); ++i)
        if (tags[i] == tag) return static_cast<int>(i);
    return static_cast<int>(tags.size()) - 2; // X
}

inline int special_tag_id() { return static_cast<int>(universal_tags().size()) - 1; }

// Fallback tagger: small closed-class lexicon plus suffix heuristics over
// the universal tag set. Real deployments pass pre-computed tags instead.
class RuleTagger {
public:
    std::string tag(const std::string& tok) const {
        if (tok.empty()) return "X";
        if (tok == kDigitTok) return "NUM";
        const auto c0 = static_cast<unsigned char>(tok[0]);
        if (!std::isalnum(c0) && tok.size() == 1) return "PUNCT";
        if (auto it = lexicon().find(tok); it != lexicon().end()) return it->second;
        if (tok.size() >= 4) {
            if (ends(tok, "ly")) return "ADV";
            if (ends(tok, "ing") || ends(tok, "ed") || ends(tok, "ize") || ends(tok, "ise") ||
                ends(tok, "ify"))
                return "VERB";
            if (ends(tok, "ous") || ends(tok, "ful") || ends(tok, "ive") || ends(tok, "ic") ||
                ends(tok, "able") || ends(tok, "ible") || ends(tok, "al") || ends(tok, "ish") ||
                ends(tok, "less"))
                return "ADJ";
        }
        return "NOUN";
    }

private:
    static bool ends(const std::string& s, const char* suf) {
        const std::size_t n = std::char_traits<char>::length(suf);
        return s.size() >= n && s.compare(s.size() - n, n, suf) == 0;
    }

    static const std::unordered_map<std::string, std::string>& lexicon() {
        static const std::unordered_map<std::string, std::string> m = {
            {"the", "DET"}, {"a", "DET"}, {"an", "DET"}, {"this", "DET"}, {"that", "DET"},
            {"these", "DET"}, {"those", "DET"}, {"each", "DET"}, {"every", "DET"},
            {"some", "DET"}, {"any", "DET"}, {"no", "DET"}, {"both", "DET"},
            {"of", "ADP"}, {"in", "ADP"}, {"on", "ADP"}, {"at", "ADP"}, {"by", "ADP"},
            {"for", "ADP"}, {"with", "ADP"}, {"from", "ADP"}, {"to", "ADP"}, {"into", "ADP"},
            {"over", "ADP"}, {"under", "ADP"}, {"between", "ADP"}, {"through", "ADP"},
            {"during", "ADP"}, {"after", "ADP"}, {"before", "ADP"}, {"about", "ADP"},
            {"against", "ADP"}, {"above", "ADP"}, {"below", "ADP"},
            {"i", "PRON"}, {"you", "PRON"}, {"he", "PRON"}, {"she", "PRON"}, {"it", "PRON"},
            {"we", "PRON"}, {"they", "PRON"}, {"me", "PRON"}, {"him", "PRON"}, {"her", "PRON"},
            {"us", "PRON"}, {"them", "PRON"}, {"who", "PRON"}, {"whom", "PRON"},
            {"which", "PRON"}, {"what", "PRON"}, {"its", "PRON"}, {"our", "PRON"},
            {"is", "AUX"}, {"are", "AUX"}, {"was", "AUX"}, {"were", "AUX"}, {"be", "AUX"},
            {"been", "AUX"}, {"being", "AUX"}, {"am", "AUX"}, {"has", "AUX"}, {"have", "AUX"},
            {"had", "AUX"}, {"do", "AUX"}, {"does", "AUX"}, {"did", "AUX"}, {"will", "AUX"},
            {"would", "AUX"}, {"can", "AUX"}, {"could", "AUX"}, {"shall", "AUX"},
            {"should", "AUX"}, {"may", "AUX"}, {"might", "AUX"}, {"must", "AUX"},
            {"and", "CCONJ"}, {"or", "CCONJ"}, {"but", "CCONJ"}, {"nor", "CCONJ"},
            {"yet", "CCONJ"}, {"so", "CCONJ"},
            {"if", "SCONJ"}, {"because", "SCONJ"}, {"while", "SCONJ"}, {"although", "SCONJ"},
            {"though", "SCONJ"}, {"since", "SCONJ"}, {"unless", "SCONJ"}, {"whereas", "SCONJ"},
            {"not", "PART"},
            {"very", "ADV"}, {"too", "ADV"}, {"also", "ADV"}, {"just", "ADV"}, {"only", "ADV"},
            {"more", "ADV"}, {"most", "ADV"}, {"now", "ADV"}, {"then", "ADV"}, {"here", "ADV"},
            {"there", "ADV"}, {"when", "ADV"}, {"where", "ADV"}, {"why", "ADV"}, {"how", "ADV"},
            {"however", "ADV"}, {"therefore", "ADV"},
            {"one", "NUM"}, {"two", "NUM"}, {"three", "NUM"}, {"four", "NUM"}, {"five", "NUM"},
            {"oh", "INTJ"}, {"hey", "INTJ"}, {"wow", "INTJ"},
        };
        return m;
    }
};

// ---------------------------------------------------------------- stopwords

// Fixed 25-word list used by the absent-overlap rule; matching happens on
// stems, so the stemmed forms are what the rule consults.
inline const std::vector<std::string>& salience_stopwords() {
    static const std::vector<std::string> words = {
        "the", "a",  "an", "of",   "in",   "on",   "for", "to",  "and",  "or",  "with", "at",  "by",
        "from", "as", "is", "are", "was", "be", "that", "this", "it", "its", "we", "our"};
    return words;
}

inline const std::unordered_set<std::string>& stopword_stems() {
    static const std::unordered_set<std::string> stems = [] {
        std::unordered_set<std::string> s;
        for (const auto& w : salience_stopwords()) {
            s.insert(w);
            s.insert(porter_stem(w));
        }
        return s;
    }();
    return stems;
}

// ------------------------------------------------------------------- vocab

struct Vocab {
    static constexpr int kPadId = 0;
    static constexpr int kUnkId = 1;
    static constexpr int kBosId = 2;
    static constexpr int kEosId = 3;
    static constexpr int kSepId = 4;
    static constexpr int kDigitId = 5;
    static constexpr int kSpecialCount = 6;

    std::vector<std::string> words;
    std::unordered_map<std::string, int> ids;

    static Vocab with_specials() {
        Vocab v;
        for (const char* s : {kPadTok, kUnkTok, kBosTok, kEosTok, kSepTok, kDigitTok})
            v.push(s);
        return v;
    }

    void push(const std::string& w) {
        ids.emplace(w, static_cast<int>(words.size()));
        words.push_back(w);
    }

    int id(const std::string& w) const {
        auto it = ids.find(w);
        return it == ids.end() ? kUnkId : it->second;
    }

    bool contains(const std::string& w) const { return ids.count(w) != 0; }

    const std::string& word(int i) const {
        if (i < 0 || static_cast<std::size_t>(i) >= words.size())
            throw ContractError("vocab id out of range: " + std::to_string(i));
        return words[static_cast<std::size_t>(i)];
    }

    std::size_t size() const { return words.size(); }

    // Most frequent words up to max_size (specials included in the cap);
    // frequency ties break alphabetically for determinism. Keyphrase tokens
    // count alongside document tokens so that purely target-side words are
    // generatable at all.
    template <typename DocRange>
    static Vocab build(const DocRange& docs, std::size_t max_size) {
        std::unordered_map<std::string, std::size_t> freq;
        for (const auto& d : docs) {
            for (const auto& t : d.tokens) ++freq[t];
            for (const auto& pp : d.present)
                for (const auto& t : pp.tokens) ++freq[t];
            for (const auto& ph : d.absent)
                for (const auto& t : ph) ++freq[t];
        }
        Vocab v = with_specials();
        std::vector<std::pair<std::string, std::size_t>> items;
        items.reserve(freq.size());
        for (auto& kv : freq)
            if (!v.contains(kv.first)) items.emplace_back(kv.first, kv.second);
        std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        for (const auto& [w, c] : items) {
            if (v.size() >= max_size) break;
            v.push(w);
        }
        return v;
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw DataError("cannot write vocab: " + path);
        for (const auto& w : words) os << w << "\n";
    }

    static Vocab load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw DataError("cannot read vocab: " + path);
        Vocab v;
        std::string line;
        while (std::getline(is, line))
            if (!line.empty()) v.push(line);
        if (v.size() < kSpecialCount || v.words[0] != kPadTok || v.words[1] != kUnkTok)
            throw DataError("vocab file lacks the reserved specials: " + path);
        return v;
    }

    // Character inventory: pad, unknown, then printable ASCII.
    static constexpr int kCharPad = 0;
    static constexpr int kCharUnk = 1;
    static constexpr int kCharVocab = 2 + 95;

    static int char_id(char c) {
        const auto u = static_cast<unsigned char>(c);
        return (u >= 32 && u < 127) ? 2 + (u - 32) : kCharUnk;
    }
};

// ---------------------------------------------------------------- documents

struct RawExample {
    std::string id;
    std::string title;
    std::string body;
    std::vector<std::string> keyphrases;
    std::vector<std::string> tokens; // optional pre-tokenized input
    std::vector<std::string> pos;    // optional, aligned with tokens
};

struct PresentPhrase {
    std::vector<std::string> tokens;
    std::vector<Span> spans; // every stemmed match in the document
};

struct Document {
    std::string id;
    std::vector<std::string> tokens;
    std::vector<Span> sentences;
    std::vector<std::string> pos_tags;
    std::vector<int> segment_ids;
    std::vector<PresentPhrase> present;
    std::vector<std::vector<std::string>> absent;
    std::vector<std::uint8_t> salience;
    std::vector<std::uint8_t> extract_labels;

    std::size_t sentence_words(std::size_t s) const {
        return sentences[s].second - sentences[s].first;
    }
};

// ------------------------------------------------------------ phrase split

struct PhraseSplit {
    std::vector<PresentPhrase> present;
    std::vector<std::vector<std::string>> absent;
};

// A phrase is present iff its stemmed token sequence occurs contiguously in
// the stemmed document; every match span is recorded. Phrases are expected
// pre-deduplicated by stemmed identity.
inline PhraseSplit split_phrases(const std::vector<std::string>& doc_tokens,
                                 const std::vector<std::vector<std::string>>& phrases) {
    std::vector<std::string> doc_stems(doc_tokens.size());
    for (std::size_t i = 0; i < doc_tokens.size(); ++i) doc_stems[i] = porter_stem(doc_tokens[i]);

    PhraseSplit out;
    for (const auto& phrase : phrases) {
        if (phrase.empty()) continue;
        std::vector<std::string> stems(phrase.size());
        for (std::size_t i = 0; i < phrase.size(); ++i) stems[i] = porter_stem(phrase[i]);
        PresentPhrase pp;
        pp.tokens = phrase;
        if (phrase.size() <= doc_tokens.size()) {
            for (std::size_t s = 0; s + stems.size() <= doc_stems.size(); ++s) {
                bool match = true;
                for (std::size_t k = 0; k < stems.size(); ++k)
                    if (doc_stems[s + k] != stems[k]) { match = false; break; }
                if (match) pp.spans.emplace_back(s, s + stems.size());
            }
        }
        if (!pp.spans.empty())
            out.present.push_back(std::move(pp));
        else
            out.absent.push_back(phrase);
    }
    return out;
}

// Salience per Definition 1: a sentence is salient iff it fully contains a
// present-phrase span, or shares at least one stemmed non-stopword token
// with any absent phrase.
inline std::vector<std::uint8_t> label_salience(const Document& doc) {
    std::unordered_set<std::string> absent_stems;
    for (const auto& phrase : doc.absent)
        for (const auto& tok : phrase) {
            const std::string st = porter_stem(tok);
            if (!stopword_stems().count(tok) && !stopword_stems().count(st))
                absent_stems.insert(st);
        }

    std::vector<std::uint8_t> out(doc.sentences.size(), 0);
    for (std::size_t s = 0; s < doc.sentences.size(); ++s) {
        const auto [lo, hi] = doc.sentences[s];
        bool salient = false;
        for (const auto& pp : doc.present) {
            for (const auto& span : pp.spans)
                if (span.first >= lo && span.second <= hi) { salient = true; break; }
            if (salient) break;
        }
        if (!salient && !absent_stems.empty()) {
            for (std::size_t t = lo; t < hi && !salient; ++t) {
                const std::string st = porter_stem(doc.tokens[t]);
                if (stopword_stems().count(doc.tokens[t]) || stopword_stems().count(st)) continue;
                if (absent_stems.count(st)) salient = true;
            }
        }
        out[s] = salient ? 1 : 0;
    }
    return out;
}

inline std::vector<std::uint8_t> label_extraction(const Document& doc) {
    std::vector<std::uint8_t> out(doc.tokens.size(), 0);
    for (const auto& pp : doc.present)
        for (const auto& span : pp.spans)
            for (std::size_t t = span.first; t < span.second; ++t) out[t] = 1;
    return out;
}

// -------------------------------------------------------------- preprocess

inline Document preprocess(const RawExample& raw, const RuleTagger& tagger) {
    Document doc;
    doc.id = raw.id;

    if (!raw.tokens.empty()) {
        doc.tokens.reserve(raw.tokens.size());
        for (const auto& t : raw.tokens) {
            std::string lower;
            lower.reserve(t.size());
            for (char c : t) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            doc.tokens.push_back(normalize_digits(lower));
        }
        doc.sentences = split_sentences(doc.tokens);
        if (!raw.pos.empty()) {
            if (raw.pos.size() != doc.tokens.size())
                throw DataError("example " + raw.id + ": pos/token length mismatch");
            doc.pos_tags = raw.pos;
        }
    } else {
        if (raw.body.empty()) throw DataError("example " + raw.id + ": empty body");
        const std::vector<std::string> title_toks = tokenize(raw.title);
        const std::vector<std::string> body_toks = tokenize(raw.body);
        doc.tokens = title_toks;
        doc.tokens.insert(doc.tokens.end(), body_toks.begin(), body_toks.end());
        // the title is sentence 0 regardless of punctuation
        if (!title_toks.empty()) doc.sentences.emplace_back(0, title_toks.size());
        auto body_sents = split_sentences(doc.tokens, title_toks.size());
        doc.sentences.insert(doc.sentences.end(), body_sents.begin(), body_sents.end());
    }
    if (doc.tokens.empty()) throw DataError("example " + raw.id + ": no tokens");

    if (doc.pos_tags.empty()) {
        doc.pos_tags.reserve(doc.tokens.size());
        for (const auto& t : doc.tokens) doc.pos_tags.push_back(tagger.tag(t));
    }

    doc.segment_ids.assign(doc.tokens.size(), 0);
    for (std::size_t s = 0; s < doc.sentences.size(); ++s)
        for (std::size_t t = doc.sentences[s].first; t < doc.sentences[s].second; ++t)
            doc.segment_ids[t] = static_cast<int>(s);

    // gold keyphrases: preprocess identically, dedup by stemmed identity
    std::vector<std::vector<std::string>> phrases;
    std::set<std::string> seen;
    for (const auto& k : raw.keyphrases) {
        auto toks = tokenize(k);
        if (toks.empty()) continue;
        const std::string key = stem_key(toks);
        if (seen.insert(key).second) phrases.push_back(std::move(toks));
    }

    PhraseSplit split = split_phrases(doc.tokens, phrases);
    doc.present = std::move(split.present);
    doc.absent = std::move(split.absent);
    doc.extract_labels = label_extraction(doc);
    doc.salience = label_salience(doc);
    return doc;
}

// --------------------------------------------------------- decoder targets

struct DecoderTarget {
    std::vector<std::string> tokens; // <bos> p1 <sep> p2 ... <eos>
    std::vector<std::string> tags;   // aligned; SPECIAL for the specials
    std::vector<std::size_t> phrase_of; // token index -> phrase ordinal (specials: npos)
};

// Absent phrases enter the target in a deterministic order: phrases sharing
// a stemmed non-stopword token with the source come first, ordered by the
// earliest source position of such a token, then the remainder by length
// and alphabetically.
inline std::vector<std::size_t> absent_order(const Document& doc) {
    std::vector<std::string> doc_stems(doc.tokens.size());
    for (std::size_t i = 0; i < doc.tokens.size(); ++i) doc_stems[i] = porter_stem(doc.tokens[i]);

    const std::size_t kNoOverlap = std::numeric_limits<std::size_t>::max();
    std::vector<std::tuple<std::size_t, std::size_t, std::string, std::size_t>> keyed;
    for (std::size_t p = 0; p < doc.absent.size(); ++p) {
        std::unordered_set<std::string> stems;
        for (const auto& tok : doc.absent[p]) {
            const std::string st = porter_stem(tok);
            if (!stopword_stems().count(tok) && !stopword_stems().count(st)) stems.insert(st);
        }
        std::size_t first = kNoOverlap;
        for (std::size_t t = 0; t < doc_stems.size(); ++t)
            if (stems.count(doc_stems[t])) { first = t; break; }
        std::string joined;
        for (const auto& tok : doc.absent[p]) { joined += tok; joined += ' '; }
        keyed.emplace_back(first, doc.absent[p].size(), joined, p);
    }
    std::sort(keyed.begin(), keyed.end());
    std::vector<std::size_t> order;
    order.reserve(keyed.size());
    for (const auto& k : keyed) order.push_back(std::get<3>(k));
    return order;
}

// POS tag for a phrase token: first occurrence in the document wins,
// otherwise the fallback tagger.
inline std::string phrase_token_tag(const Document& doc, const RuleTagger& tagger,
                                    const std::string& tok) {
    for (std::size_t t = 0; t < doc.tokens.size(); ++t)
        if (doc.tokens[t] == tok) return doc.pos_tags[t];
    return tagger.tag(tok);
}

inline DecoderTarget build_decoder_target(const Document& doc, const RuleTagger& tagger) {
    constexpr std::size_t kSpecial = std::numeric_limits<std::size_t>::max();
    DecoderTarget out;
    out.tokens.push_back(kBosTok);
    out.tags.push_back("SPECIAL");
    out.phrase_of.push_back(kSpecial);
    const auto order = absent_order(doc);
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
        if (oi) {
            out.tokens.push_back(kSepTok);
            out.tags.push_back("SPECIAL");
            out.phrase_of.push_back(kSpecial);
        }
        for (const auto& tok : doc.absent[order[oi]]) {
            out.tokens.push_back(tok);
            out.tags.push_back(phrase_token_tag(doc, tagger, tok));
            out.phrase_of.push_back(order[oi]);
        }
    }
    out.tokens.push_back(kEosTok);
    out.tags.push_back("SPECIAL");
    out.phrase_of.push_back(kSpecial);
    return out;
}

// --------------------------------------------------------- selected input

// The extractor-generator consumes selected sentences as one concatenated
// sequence; original segment ids ride along and gold spans/labels are
// remapped into the new coordinates.
struct SelectedInput {
    std::vector<std::size_t> sentence_indices;
    std::vector<std::size_t> token_map; // position -> original token index
    std::vector<std::string> tokens;
    std::vector<std::string> tags;
    std::vector<int> segment_ids;
    std::vector<std::uint8_t> extract_labels;
    std::vector<Span> present_spans; // spans fully inside the selection
};

inline SelectedInput build_selected_input(const Document& doc,
                                          const std::vector<std::size_t>& sentence_indices) {
    SelectedInput out;
    out.sentence_indices = sentence_indices;
    std::vector<std::size_t> new_pos(doc.tokens.size(), std::numeric_limits<std::size_t>::max());
    for (std::size_t s : sentence_indices) {
        if (s >= doc.sentences.size())
            throw ContractError("selected sentence index out of range");
        for (std::size_t t = doc.sentences[s].first; t < doc.sentences[s].second; ++t) {
            new_pos[t] = out.tokens.size();
            out.token_map.push_back(t);
            out.tokens.push_back(doc.tokens[t]);
            out.tags.push_back(doc.pos_tags[t]);
            out.segment_ids.push_back(doc.segment_ids[t]);
            out.extract_labels.push_back(doc.extract_labels[t]);
        }
    }
    for (const auto& pp : doc.present)
        for (const auto& span : pp.spans) {
            bool inside = true;
            for (std::size_t t = span.first; t < span.second && inside; ++t)
                if (new_pos[t] == std::numeric_limits<std::size_t>::max()) inside = false;
            if (!inside) continue;
            // selected sentences keep document order, so the span stays contiguous
            out.present_spans.emplace_back(new_pos[span.first], new_pos[span.second - 1] + 1);
        }
    return out;
}

// ------------------------------------------------------------------- JSONL

namespace jsonl {

using nlohmann::json;

inline std::vector<RawExample> read_raw(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open input: " + path);
    std::vector<RawExample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": bad json: " + e.what());
        }
        RawExample ex;
        ex.id = j.value("id", "doc" + std::to_string(lineno));
        ex.title = j.value("title", "");
        if (j.contains("abstract"))
            ex.body = j["abstract"].get<std::string>();
        else
            ex.body = j.value("body", "");
        if (j.contains("keyphrases"))
            for (const auto& k : j["keyphrases"]) ex.keyphrases.push_back(k.get<std::string>());
        if (j.contains("tokens"))
            for (const auto& t : j["tokens"]) ex.tokens.push_back(t.get<std::string>());
        if (j.contains("pos"))
            for (const auto& t : j["pos"]) ex.pos.push_back(t.get<std::string>());
        out.push_back(std::move(ex));
    }
    return out;
}

inline json document_to_json(const Document& doc) {
    json j;
    j["id"] = doc.id;
    j["tokens"] = doc.tokens;
    json sents = json::array();
    for (const auto& s : doc.sentences) sents.push_back({s.first, s.second});
    j["sentences"] = sents;
    j["pos"] = doc.pos_tags;
    j["segment_ids"] = doc.segment_ids;
    json present = json::array();
    for (const auto& pp : doc.present) {
        json spans = json::array();
        for (const auto& s : pp.spans) spans.push_back({s.first, s.second});
        present.push_back({{"tokens", pp.tokens}, {"spans", spans}});
    }
    j["present"] = present;
    j["absent"] = doc.absent;
    j["salience"] = doc.salience;
    j["extract"] = doc.extract_labels;
    return j;
}

inline Document document_from_json(const json& j) {
    Document doc;
    doc.id = j.at("id").get<std::string>();
    doc.tokens = j.at("tokens").get<std::vector<std::string>>();
    for (const auto& s : j.at("sentences"))
        doc.sentences.emplace_back(s[0].get<std::size_t>(), s[1].get<std::size_t>());
    doc.pos_tags = j.at("pos").get<std::vector<std::string>>();
    doc.segment_ids = j.at("segment_ids").get<std::vector<int>>();
    for (const auto& p : j.at("present")) {
        PresentPhrase pp;
        pp.tokens = p.at("tokens").get<std::vector<std::string>>();
        for (const auto& s : p.at("spans"))
            pp.spans.emplace_back(s[0].get<std::size_t>(), s[1].get<std::size_t>());
        doc.present.push_back(std::move(pp));
    }
    doc.absent = j.at("absent").get<std::vector<std::vector<std::string>>>();
    doc.salience = j.at("salience").get<std::vector<std::uint8_t>>();
    doc.extract_labels = j.at("extract").get<std::vector<std::uint8_t>>();
    return doc;
}

inline void write_documents(const std::string& path, const std::vector<Document>& docs) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write: " + path);
    for (const auto& d : docs) os << document_to_json(d).dump() << "\n";
}

inline std::vector<Document> read_documents(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open dataset: " + path);
    std::vector<Document> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        out.push_back(document_from_json(json::parse(line)));
    }
    return out;
}

// A processed-dataset line carries "sentences"; raw lines do not.
inline bool looks_processed(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open: " + path);
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) {
            auto j = json::parse(line, nullptr, false);
            return j.is_object() && j.contains("sentences") && j.contains("tokens");
        }
    throw DataError("empty dataset: " + path);
}

} // namespace jsonl

} // namespace segnet
